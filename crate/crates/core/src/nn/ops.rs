//! Parameter-free tensor operations and their adjoints.

use ndarray::{Array, Array4, ArrayView, ArrayView4, Dimension, Zip};

use crate::real::Real;

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu<F: Real, D: Dimension>(x: ArrayView<F, D>) -> Array<F, D> {
    let slope = F::lit(LEAKY_SLOPE);
    x.mapv(|v| if v > F::zero() { v } else { v * slope })
}

/// `pre` is the activation input.
pub fn leaky_relu_backward<F: Real, D: Dimension>(pre: ArrayView<F, D>, dy: ArrayView<F, D>) -> Array<F, D> {
    let slope = F::lit(LEAKY_SLOPE);
    Zip::from(&pre)
        .and(&dy)
        .map_collect(|&p, &g| if p > F::zero() { g } else { g * slope })
}

pub fn relu<F: Real, D: Dimension>(x: ArrayView<F, D>) -> Array<F, D> {
    x.mapv(|v| v.max(F::zero()))
}

pub fn relu_backward<F: Real, D: Dimension>(pre: ArrayView<F, D>, dy: ArrayView<F, D>) -> Array<F, D> {
    Zip::from(&pre)
        .and(&dy)
        .map_collect(|&p, &g| if p > F::zero() { g } else { F::zero() })
}

pub fn sigmoid<F: Real, D: Dimension>(x: ArrayView<F, D>) -> Array<F, D> {
    x.mapv(|v| {
        if v >= F::zero() {
            F::one() / (F::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (F::one() + e)
        }
    })
}

/// `y` is the sigmoid output.
pub fn sigmoid_backward<F: Real, D: Dimension>(y: ArrayView<F, D>, dy: ArrayView<F, D>) -> Array<F, D> {
    Zip::from(&y)
        .and(&dy)
        .map_collect(|&s, &g| g * s * (F::one() - s))
}

/// Sub-pixel rearrangement `(N, C·r², H, W)` → `(N, C, H·r, W·r)`.
///
/// Output pixel `(c, h·r+i, w·r+j)` is read from input channel `c·r² + i·r + j`.
pub fn pixel_shuffle<F: Real>(x: ArrayView4<F>, r: usize) -> Array4<F> {
    let (n, cr, h, w) = x.dim();
    assert_eq!(cr % (r * r), 0, "channels divisible by r²");
    let c = cr / (r * r);
    let mut out = Array4::zeros((n, c, h * r, w * r));
    for b in 0..n {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let src = x.slice(ndarray::s![b, ci * r * r + i * r + j, .., ..]);
                    let mut dst = out.slice_mut(ndarray::s![b, ci, i..;r, j..;r]);
                    dst.assign(&src);
                }
            }
        }
    }
    out
}

/// Adjoint (and inverse) of [`pixel_shuffle`].
pub fn pixel_unshuffle<F: Real>(y: ArrayView4<F>, r: usize) -> Array4<F> {
    let (n, c, hr, wr) = y.dim();
    let (h, w) = (hr / r, wr / r);
    let mut out = Array4::zeros((n, c * r * r, h, w));
    for b in 0..n {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let src = y.slice(ndarray::s![b, ci, i..;r, j..;r]);
                    out.slice_mut(ndarray::s![b, ci * r * r + i * r + j, .., ..])
                        .assign(&src);
                }
            }
        }
    }
    out
}
