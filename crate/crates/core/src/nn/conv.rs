use ndarray::{Array1, Array2, Array4, ArrayView4, Axis, Ix2};
use rand::Rng;

use super::params::{Grads, ParamGroup, ParamId, ParamStore};
use crate::real::Real;

/// Square 2-d convolution, lowered to a matrix product over im2col patches.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Values saved by [`Conv2d::forward`] that the backward pass needs.
#[derive(Debug)]
pub struct ConvCache<F> {
    cols: Array2<F>,
    input_dims: (usize, usize, usize, usize),
}

impl Conv2d {
    /// Registers a new convolution in `store`.
    ///
    /// Weights are drawn uniformly from `±gain·sqrt(3/fan_in)`; biases start at zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        group: ParamGroup,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = gain * (3.0 / fan_in).sqrt();
        let w = Array4::from_shape_simple_fn((out_channels, in_channels, kernel, kernel), || {
            F::lit(rng.random_range(-bound..bound))
        });
        let weight = store.add(format!("{name}.weight"), group, w.into_dyn());
        let bias = store.add(
            format!("{name}.bias"),
            group,
            Array1::<F>::zeros(out_channels).into_dyn(),
        );
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn weight_matrix<'a, F: Real>(&self, store: &'a ParamStore<F>) -> ndarray::ArrayView2<'a, F> {
        store
            .get(self.weight)
            .view()
            .into_shape_with_order((self.out_channels, self.in_channels * self.kernel * self.kernel))
            .expect("contiguous conv weight")
            .into_dimensionality::<Ix2>()
            .expect("rank 2")
    }

    pub fn forward<F: Real>(&self, store: &ParamStore<F>, x: ArrayView4<F>) -> (Array4<F>, ConvCache<F>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (oh, ow) = self.output_size(h, w);
        let x = x.as_standard_layout();
        let cols = im2col(
            x.as_slice().expect("standard layout"),
            (n, c, h, w),
            self.kernel,
            self.stride,
            self.pad,
            (oh, ow),
        );
        let mut y = self.weight_matrix(store).dot(&cols);
        let bias = store.get(self.bias);
        for (mut row, &b) in y.axis_iter_mut(Axis(0)).zip(bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        let out = channel_major_to_batch(y, n, self.out_channels, oh, ow);
        (
            out,
            ConvCache {
                cols,
                input_dims: (n, c, h, w),
            },
        )
    }

    /// Propagates `dy` back through the layer.
    ///
    /// Parameter gradients are accumulated into `grads` when given; the input
    /// gradient is returned only when `need_input_grad` is set.
    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        cache: &ConvCache<F>,
        dy: ArrayView4<F>,
        grads: Option<&mut Grads<F>>,
        need_input_grad: bool,
    ) -> Option<Array4<F>> {
        let (n, _, oh, ow) = dy.dim();
        let dy_mat = batch_to_channel_major(dy, n, self.out_channels, oh, ow);
        if let Some(grads) = grads {
            let dw = dy_mat.dot(&cache.cols.t());
            grads.accumulate(self.weight, &dw);
            let db = dy_mat.sum_axis(Axis(1));
            grads.accumulate(self.bias, &db);
        }
        if !need_input_grad {
            return None;
        }
        let dcols = self.weight_matrix(store).t().dot(&dy_mat);
        Some(col2im(
            &dcols,
            cache.input_dims,
            self.kernel,
            self.stride,
            self.pad,
            (oh, ow),
        ))
    }
}

/// `(out, n·oh·ow)` → `(n, out, oh, ow)`.
fn channel_major_to_batch<F: Real>(y: Array2<F>, n: usize, c: usize, oh: usize, ow: usize) -> Array4<F> {
    let hw = oh * ow;
    let src = y.as_slice().expect("fresh matmul output");
    let mut out = Array4::<F>::zeros((n, c, oh, ow));
    let dst = out.as_slice_mut().expect("fresh");
    for ci in 0..c {
        for b in 0..n {
            let s = &src[ci * n * hw + b * hw..ci * n * hw + (b + 1) * hw];
            dst[(b * c + ci) * hw..(b * c + ci + 1) * hw].copy_from_slice(s);
        }
    }
    out
}

/// `(n, out, oh, ow)` → `(out, n·oh·ow)`.
fn batch_to_channel_major<F: Real>(dy: ArrayView4<F>, n: usize, c: usize, oh: usize, ow: usize) -> Array2<F> {
    let hw = oh * ow;
    let dy = dy.as_standard_layout();
    let src = dy.as_slice().expect("standard layout");
    let mut out = Array2::<F>::zeros((c, n * hw));
    let dst = out.as_slice_mut().expect("fresh");
    for b in 0..n {
        for ci in 0..c {
            let s = &src[(b * c + ci) * hw..(b * c + ci + 1) * hw];
            dst[ci * n * hw + b * hw..ci * n * hw + (b + 1) * hw].copy_from_slice(s);
        }
    }
    out
}

/// Output positions `ox` whose tap `ox·stride + k − pad` lands inside `[0, w)`.
fn valid_range(k: usize, stride: usize, pad: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    // largest ox with ox·stride + k − pad ≤ w − 1
    let hi = if w + pad > k { ((w + pad - k - 1) / stride + 1).min(ow) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds `k×k` patches into columns: rows are `(channel, ky, kx)`,
/// columns are `(sample, oy, ox)`. Out-of-bounds taps read zero.
pub(crate) fn im2col<F: Real>(
    x: &[F],
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Array2<F> {
    let ncols = n * oh * ow;
    let mut cols = Array2::<F>::zeros((c * k * k, ncols));
    let dst = cols.as_slice_mut().expect("fresh");
    for ci in 0..c {
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(ky, stride, pad, h, oh);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(kx, stride, pad, w, ow);
                if ox_lo >= ox_hi {
                    continue;
                }
                let row = (ci * k + ky) * k + kx;
                let base = row * ncols;
                let ix0 = ox_lo * stride + kx - pad;
                let len = ox_hi - ox_lo;
                for b in 0..n {
                    let plane = &x[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let src_row = &plane[iy * w..(iy + 1) * w];
                        let start = base + (b * oh + oy) * ow + ox_lo;
                        let dst_row = &mut dst[start..start + len];
                        if stride == 1 {
                            dst_row.copy_from_slice(&src_row[ix0..ix0 + len]);
                        } else {
                            for (d, &v) in dst_row.iter_mut().zip(src_row[ix0..].iter().step_by(stride)) {
                                *d = v;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub(crate) fn col2im<F: Real>(
    cols: &Array2<F>,
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Array4<F> {
    let ncols = n * oh * ow;
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let mut out = Array4::<F>::zeros((n, c, h, w));
    let dst = out.as_slice_mut().expect("fresh");
    for ci in 0..c {
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(ky, stride, pad, h, oh);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(kx, stride, pad, w, ow);
                if ox_lo >= ox_hi {
                    continue;
                }
                let row = (ci * k + ky) * k + kx;
                let base = row * ncols;
                let ix0 = ox_lo * stride + kx - pad;
                let len = ox_hi - ox_lo;
                for b in 0..n {
                    let plane = &mut dst[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let start = base + (b * oh + oy) * ow + ox_lo;
                        let src_row = &src[start..start + len];
                        let dst_row = &mut plane[iy * w..(iy + 1) * w];
                        if stride == 1 {
                            for (d, &g) in dst_row[ix0..ix0 + len].iter_mut().zip(src_row) {
                                *d += g;
                            }
                        } else {
                            for (d, &g) in dst_row[ix0..].iter_mut().step_by(stride).zip(src_row) {
                                *d += g;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}
