use ndarray::{ArrayD, IxDyn, Zip};
use serde::{Deserialize, Serialize};

use crate::real::Real;

/// Which part of the network a parameter tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Prototypes,
    /// Weights of the fixed perceptual feature extractor. Never trained.
    Extractor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<F> {
    pub name: String,
    pub group: ParamGroup,
    pub value: ArrayD<F>,
}

/// Flat, ordered collection of named parameter tensors.
///
/// Layers hold [`ParamId`]s into a store instead of owning their weights, so
/// optimizers, checkpoints and gradient checks can treat all parameters
/// uniformly.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: ArrayD<F>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.entries[id.0].value
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<F>] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads<F> {
        Grads {
            tensors: self
                .entries
                .iter()
                .map(|e| ArrayD::zeros(e.value.raw_dim()))
                .collect(),
        }
    }

    /// Converts every tensor to another element type, keeping names and layout.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    group: e.group,
                    value: e.value.mapv(|v| G::lit(v.as_f64())),
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.value.iter().all(|v| v.is_finite()))
    }
}

/// Gradient buffers laid out exactly like a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads<F> {
    pub tensors: Vec<ArrayD<F>>,
}

impl<F: Real> Grads<F> {
    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.tensors[id.0]
    }

    pub fn accumulate<D: ndarray::Dimension>(&mut self, id: ParamId, grad: &ndarray::Array<F, D>) {
        let target = &mut self.tensors[id.0];
        let view = grad
            .view()
            .into_shape_with_order(IxDyn(target.shape()))
            .expect("gradient shape matches parameter");
        Zip::from(target).and(&view).for_each(|t, &g| *t = *t + g);
    }

    pub fn scale(&mut self, factor: F) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn add_assign(&mut self, other: &Grads<F>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            Zip::from(a).and(b).for_each(|x, &y| *x = *x + y);
        }
    }

    /// Zeroes the gradient of every tensor in `group`.
    pub fn zero_group(&mut self, store: &ParamStore<F>, group: ParamGroup) {
        for (t, e) in self.tensors.iter_mut().zip(store.entries()) {
            if e.group == group {
                t.fill(F::zero());
            }
        }
    }

    pub fn global_norm(&self) -> F {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .fold(F::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}
