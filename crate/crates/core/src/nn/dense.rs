use ndarray::{Array1, Array2, ArrayView2, Axis, Ix2};
use rand::Rng;

use super::params::{Grads, ParamGroup, ParamId, ParamStore};
use crate::real::Real;

/// Fully connected layer `y = x·Wᵀ + b` with `W` of shape `(out, in)`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Dense {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        group: ParamGroup,
        in_features: usize,
        out_features: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let bound = gain * (3.0 / in_features as f64).sqrt();
        let w = Array2::from_shape_simple_fn((out_features, in_features), || {
            F::lit(rng.random_range(-bound..bound))
        });
        let weight = store.add(format!("{name}.weight"), group, w.into_dyn());
        let bias = store.add(
            format!("{name}.bias"),
            group,
            Array1::<F>::zeros(out_features).into_dyn(),
        );
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    fn weight_matrix<'a, F: Real>(&self, store: &'a ParamStore<F>) -> ArrayView2<'a, F> {
        store
            .get(self.weight)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("rank-2 dense weight")
    }

    pub fn forward<F: Real>(&self, store: &ParamStore<F>, x: ArrayView2<F>) -> Array2<F> {
        let mut y = x.dot(&self.weight_matrix(store).t());
        let b = store.get(self.bias).view().into_dimensionality::<ndarray::Ix1>().expect("rank-1 bias");
        y += &b;
        y
    }

    /// `x` is the layer input saved from the forward pass.
    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        x: ArrayView2<F>,
        dy: ArrayView2<F>,
        grads: Option<&mut Grads<F>>,
    ) -> Array2<F> {
        if let Some(grads) = grads {
            grads.accumulate(self.weight, &dy.t().dot(&x));
            grads.accumulate(self.bias, &dy.sum_axis(Axis(0)));
        }
        dy.dot(&self.weight_matrix(store))
    }
}
