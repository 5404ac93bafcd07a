//! Generalized-mean (GeM) temporal pooling.
//!
//! Per column `j`: `y_j = ((1/k) Σ_i max(x_ij, eps)^p)^(1/p)`. Evaluated as
//! `c_max · (mean (c/c_max)^p)^(1/p)` so large exponents neither overflow nor
//! underflow to zero.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::real::Real;

pub fn gem_pool<F: Real>(seq: ArrayView2<F>, p: F, eps: F) -> Result<Array1<F>> {
    if !(p >= F::one()) {
        return Err(Error::Domain(format!("GeM exponent must be >= 1, got {p}")));
    }
    if !(eps > F::zero()) {
        return Err(Error::Domain(format!("GeM eps must be positive, got {eps}")));
    }
    if seq.nrows() == 0 {
        return Err(Error::Shape("GeM pooling over zero rows".into()));
    }
    Ok(Array1::from_iter(seq.columns().into_iter().map(|col| gem_column(col, p, eps))))
}

fn gem_column<F: Real>(col: ArrayView1<F>, p: F, eps: F) -> F {
    let k = F::of(col.len() as f64);
    let cmax = col.iter().fold(eps, |m, &v| m.max(v));
    let mean = col
        .iter()
        .map(|&v| (v.max(eps) / cmax).powf(p))
        .sum::<F>()
        / k;
    cmax * mean.powf(F::one() / p)
}

/// Gradients of `Σ_j dy_j · y_j` with respect to the input rows and `p`.
pub(crate) fn gem_backward<F: Real>(
    seq: ArrayView2<F>,
    p: F,
    eps: F,
    pooled: ArrayView1<F>,
    dy: ArrayView1<F>,
) -> (Array2<F>, F) {
    let k = F::of(seq.nrows() as f64);
    let mut dx = Array2::zeros(seq.raw_dim());
    let mut dp = F::zero();
    for (j, col) in seq.columns().into_iter().enumerate() {
        let y = pooled[j];
        let g = dy[j];
        let ln_y = y.ln();
        let cmax = col.iter().fold(eps, |m, &v| m.max(v));
        let ln_cmax = cmax.ln();
        // normalized moments: M' = mean r^p, S = mean r^p ln c, r = c / c_max
        let mut m_norm = F::zero();
        let mut s_norm = F::zero();
        for (i, &v) in col.iter().enumerate() {
            let c = v.max(eps);
            let ln_c = c.ln();
            let rp = (p * (ln_c - ln_cmax)).exp();
            m_norm += rp;
            s_norm += rp * ln_c;
            if v > eps {
                // dy/dc = (c / y)^(p-1) / k
                dx[[i, j]] = g * ((p - F::one()) * (ln_c - ln_y)).exp() / k;
            }
        }
        m_norm /= k;
        s_norm /= k;
        // d/dp of M^(1/p), with ln M = p ln c_max + ln M'
        let ln_m = p * ln_cmax + m_norm.ln();
        dp += g * y * (-ln_m / (p * p) + s_norm / (m_norm * p));
    }
    (dx, dp)
}
