//! AdamW with decoupled weight decay.

use ndarray::Zip;

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWSettings {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: EncoderParams<f32>,
    pub v: EncoderParams<f32>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &EncoderParams<f32>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One AdamW update in place. The decay `p ← p·(1 − lr·wd)` is applied
/// before, and independently of, the bias-corrected adaptive step; the GeM
/// exponent is clamped back into its domain afterwards.
pub fn adamw_step(
    params: &mut EncoderParams<f32>,
    grads: &EncoderParams<f32>,
    state: &mut OptimizerState,
    lr: f64,
    settings: &AdamWSettings,
) -> Result<()> {
    if let Some((name, _)) = grads
        .tensors()
        .into_iter()
        .find(|(_, g)| g.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Numeric(format!("non-finite gradient in {name}")));
    }
    state.t += 1;
    let t = state.t as i32;
    let decay = (1.0 - lr * settings.weight_decay) as f32;
    let (b1, b2) = (settings.beta1 as f32, settings.beta2 as f32);
    let c1 = (1.0 - settings.beta1.powi(t)) as f32;
    let c2 = (1.0 - settings.beta2.powi(t)) as f32;
    let (lr, eps) = (lr as f32, settings.eps as f32);

    let g = grads.tensors();
    let mut p = params.tensors_mut();
    let mut m = state.m.tensors_mut();
    let mut v = state.v.tensors_mut();
    if g.len() != p.len() || m.len() != p.len() {
        return Err(Error::Shape("gradient structure differs from parameters".into()));
    }
    for (((p, m), v), g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(&g) {
        if p.1.shape() != g.1.shape() {
            return Err(Error::Shape(format!("gradient shape mismatch in {}", p.0)));
        }
        Zip::from(&mut p.1)
            .and(&mut m.1)
            .and(&mut v.1)
            .and(&g.1)
            .for_each(|p, m, v, &g| {
                *p *= decay;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    drop(p);
    params.clamp_gem_p();
    Ok(())
}
