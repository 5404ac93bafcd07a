//! Forward/backward kernels shared by both encoder variants.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis};

use super::params::{LayerNorm, Linear};
use crate::real::Real;

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn linear<F: Real>(x: ArrayView2<F>, l: &Linear<F>) -> Array2<F> {
    let mut y = x.dot(&l.weight);
    y += &l.bias;
    y
}

/// Accumulates parameter gradients into `grad` and returns `dL/dx`.
pub(crate) fn linear_backward<F: Real>(
    x: ArrayView2<F>,
    dy: ArrayView2<F>,
    l: &Linear<F>,
    grad: &mut Linear<F>,
) -> Array2<F> {
    general_mat_mul(F::one(), &x.t(), &dy, F::one(), &mut grad.weight);
    grad.bias += &dy.sum_axis(Axis(0));
    dy.dot(&l.weight.t())
}

pub(crate) struct NormCache<F> {
    pub xhat: Array2<F>,
    pub inv_std: Array1<F>,
}

pub(crate) fn layer_norm<F: Real>(x: ArrayView2<F>, ln: &LayerNorm<F>) -> (Array2<F>, NormCache<F>) {
    let d = F::of(x.ncols() as f64);
    let eps = F::of(LN_EPS);
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<F>() / d;
        *s = F::one() / (var + eps).sqrt();
        let scale = *s;
        row.mapv_inplace(|v| v * scale);
    }
    let mut y = &xhat * &ln.gain;
    y += &ln.bias;
    (y, NormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward<F: Real>(
    dy: ArrayView2<F>,
    cache: &NormCache<F>,
    ln: &LayerNorm<F>,
    grad: &mut LayerNorm<F>,
) -> Array2<F> {
    grad.gain += &(&dy * &cache.xhat).sum_axis(Axis(0));
    grad.bias += &dy.sum_axis(Axis(0));
    let d = F::of(dy.ncols() as f64);
    let mut dx = &dy * &ln.gain;
    for ((mut row, xhat), &s) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_g = row.sum() / d;
        let mean_gx = row.iter().zip(xhat.iter()).map(|(&g, &x)| g * x).sum::<F>() / d;
        row.zip_mut_with(&xhat, |g, &x| *g = s * (*g - mean_g - x * mean_gx));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh approximation of GELU.
pub(crate) fn gelu<F: Real>(x: F) -> F {
    let half = F::of(0.5);
    let u = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    half * x * (F::one() + u.tanh())
}

pub(crate) fn gelu_grad<F: Real>(x: F) -> F {
    let half = F::of(0.5);
    let u = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = F::of(GELU_C) * (F::one() + F::of(3.0 * GELU_A) * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

pub(crate) fn softmax_rows<F: Real>(mut s: ArrayViewMut2<F>) {
    for mut row in s.rows_mut() {
        let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
}

/// `ds = p ⊙ (dp − rowsum(dp ⊙ p))`, in place on `dp`.
pub(crate) fn softmax_backward_rows<F: Real>(p: ArrayView2<F>, mut dp: ArrayViewMut2<F>) {
    for (prow, mut drow) in p.rows().into_iter().zip(dp.rows_mut()) {
        let dot = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum::<F>();
        drow.zip_mut_with(&prow, |g, &pv| *g = pv * (*g - dot));
    }
}

/// Fixed sinusoidal encodings: `sin` on even channels, `cos` on odd ones.
pub(crate) fn positional_encoding<F: Real>(len: usize, d: usize) -> Array2<F> {
    Array2::from_shape_fn((len, d), |(pos, j)| {
        let pair = (j / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
        F::of(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
        assert_eq!(gelu(0.0f64), 0.0);
    }

    #[test]
    fn positional_encoding_first_rows() {
        let pe = positional_encoding::<f64>(2, 4);
        assert_eq!(pe.row(0).to_vec(), vec![0.0, 1.0, 0.0, 1.0]);
        assert!((pe[[1, 0]] - 1f64.sin()).abs() < 1e-15);
        assert!((pe[[1, 3]] - (1.0f64 / 100.0).cos()).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = ndarray::array![[1.0f64, 2.0, 3.0, 6.0], [-1.0, 0.0, 0.5, 10.0]];
        let ln = LayerNorm {
            gain: Array1::ones(4),
            bias: Array1::zeros(4),
        };
        let (y, _) = layer_norm(x.view(), &ln);
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
