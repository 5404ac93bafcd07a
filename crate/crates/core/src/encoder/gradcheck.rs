//! Finite-difference verification of the reverse-mode gradients.
//!
//! The numeric side only ever calls the forward pass and the objective's loss
//! value, so it is independent of the backward code it checks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::model::{compute_gradients, embed, window_seed, Objective};
use super::{init_params, EncoderConfig, EncoderParams, Mode};
use crate::error::Result;
use crate::feature_store::Window;
use crate::losses::NtXent;

#[derive(Debug, Clone, Serialize)]
pub struct ArrayCheck {
    pub name: String,
    pub len: usize,
    pub max_abs_error: f64,
    /// `max |analytic − numeric|` over the array, divided by the largest
    /// gradient magnitude seen in either (floored at [`REL_FLOOR`]).
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub loss: f64,
    pub arrays: Vec<ArrayCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.arrays.iter().map(|a| a.max_rel_error).fold(0.0, f64::max)
    }

    pub fn get(&self, name: &str) -> Option<&ArrayCheck> {
        self.arrays.iter().find(|a| a.name == name)
    }
}

/// Smallest denominator used for the relative error.
pub const REL_FLOOR: f64 = 1e-6;

fn objective_value(
    params: &EncoderParams<f64>,
    config: &EncoderConfig,
    objective: &dyn Objective,
    windows: &[Window],
    pair_of: &[usize],
    mode: Mode,
) -> Result<f64> {
    let embeddings = windows
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let m = match mode {
                Mode::Eval => Mode::Eval,
                Mode::Train { seed } => Mode::Train {
                    seed: window_seed(seed, i),
                },
            };
            embed(params, config, w, m)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(objective.loss_and_grad(&embeddings, pair_of)?.0)
}

/// Compares analytic gradients with central differences of step `step` for
/// every scalar of every parameter array (64-bit throughout).
pub fn finite_difference_report(
    params: &EncoderParams<f64>,
    config: &EncoderConfig,
    objective: &dyn Objective,
    windows: &[Window],
    pair_of: &[usize],
    mode: Mode,
    step: f64,
) -> Result<GradCheckReport> {
    let (loss, analytic) = compute_gradients(params, config, objective, windows, pair_of, mode)?;
    let analytic: Vec<(String, Vec<f64>)> = analytic
        .tensors()
        .into_iter()
        .map(|(n, a)| (n, a.iter().copied().collect()))
        .collect();
    let mut probe = params.clone();
    let mut arrays = Vec::with_capacity(analytic.len());
    for (index, (name, grad)) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(grad.len());
        for j in 0..grad.len() {
            let original = nth_scalar(&mut probe, index, j, None);
            nth_scalar(&mut probe, index, j, Some(original + step));
            let up = objective_value(&probe, config, objective, windows, pair_of, mode)?;
            nth_scalar(&mut probe, index, j, Some(original - step));
            let down = objective_value(&probe, config, objective, windows, pair_of, mode)?;
            nth_scalar(&mut probe, index, j, Some(original));
            numeric.push((up - down) / (2.0 * step));
        }
        let max_abs_error = grad
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        let scale = grad
            .iter()
            .chain(&numeric)
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        // Some gradients are identically zero (a key bias cannot change the
        // softmax), so the denominator is floored to keep rounding noise
        // from reading as a 100% error.
        let max_rel_error = max_abs_error / scale.max(REL_FLOOR);
        arrays.push(ArrayCheck {
            name: name.clone(),
            len: grad.len(),
            max_abs_error,
            max_rel_error,
        });
    }
    Ok(GradCheckReport { step, loss, arrays })
}

fn nth_scalar(params: &mut EncoderParams<f64>, array: usize, j: usize, set: Option<f64>) -> f64 {
    let mut tensors = params.tensors_mut();
    let slot = tensors[array]
        .1
        .iter_mut()
        .nth(j)
        .expect("index within array");
    if let Some(v) = set {
        *slot = v;
    }
    *slot
}

/// Window length used by [`check_gradients`].
pub const CHECK_WINDOW: usize = 4;

/// Gradient check of `config` on a synthetic 4-window NT-Xent batch, in train
/// mode so dropout paths are exercised with fixed masks.
pub fn check_gradients(config: &EncoderConfig, seed: u64) -> Result<GradCheckReport> {
    let params = init_params::<f64>(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let windows: Vec<Window> = (0..4)
        .map(|i| Window {
            data: Array2::from_shape_simple_fn((CHECK_WINDOW, config.d_in), || {
                rng.random_range(-1.0f32..1.0)
            }),
            source_track: format!("w{i}"),
            start_index: 0,
        })
        .collect();
    let objective = NtXent { temperature: 0.1 };
    finite_difference_report(
        &params,
        config,
        &objective,
        &windows,
        &[1, 0, 3, 2],
        Mode::Train { seed },
        1e-4,
    )
}

/// The tiny transformer used by the gradient suite: 1 block, `d_h = 8`,
/// 2 heads.
pub fn tiny_transformer_config() -> EncoderConfig {
    EncoderConfig {
        d_in: 6,
        d_h: 8,
        n_blocks: 1,
        n_heads: 2,
        d_ffn: 16,
        dropout_p: 0.1,
        d_e: 4,
        ..Default::default()
    }
}
