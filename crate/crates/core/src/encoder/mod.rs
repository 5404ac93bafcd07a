//! The trainable encoder: latent window in, embedding out.
//!
//! Two variants share one parameter container:
//!
//! * `transformer`: linear input projection, sinusoidal positions, a stack of
//!   pre-norm encoder blocks, a final layer norm, temporal pooling (GeM, mean
//!   or a learned CLS position) and a linear output projection.
//! * `avg_mlp`: column mean of the window followed by a two-layer GELU MLP.
//!
//! Gradients are computed by hand-written reverse mode in [`model`] and
//! verified against central finite differences in [`gradcheck`].

pub mod checkpoint;
pub mod gem;
pub mod gradcheck;
mod layers;
pub mod model;
pub mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gem::gem_pool;
pub use model::{compute_gradients, embed, forward, Objective};
pub use params::{init_params, EncoderParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Gem,
    Mean,
    Cls,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Transformer,
    AvgMlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_in: usize,
    pub d_h: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub dropout_p: f64,
    pub d_e: usize,
    pub pooling: Pooling,
    pub variant: Variant,
    pub gem_p_init: f64,
    pub gem_eps: f64,
    /// Add fixed sinusoidal position encodings after the input projection.
    pub positional_encoding: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_in: 1280,
            d_h: 768,
            n_blocks: 4,
            n_heads: 12,
            d_ffn: 1024,
            dropout_p: 0.1,
            d_e: 512,
            pooling: Pooling::Gem,
            variant: Variant::Transformer,
            gem_p_init: 3.0,
            gem_eps: 1e-6,
            positional_encoding: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_in", self.d_in),
            ("d_h", self.d_h),
            ("d_e", self.d_e),
            ("d_ffn", self.d_ffn),
            ("n_heads", self.n_heads),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.variant == Variant::Transformer && self.n_blocks == 0 {
            return Err(Error::Config("n_blocks must be at least 1".into()));
        }
        if !self.d_h.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_h={} is not divisible by n_heads={}",
                self.d_h, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must lie in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if !(self.gem_p_init >= 1.0 && self.gem_p_init.is_finite()) {
            return Err(Error::Config(format!(
                "gem_p_init must be >= 1, got {}",
                self.gem_p_init
            )));
        }
        if !(self.gem_eps > 0.0) {
            return Err(Error::Config("gem_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_h / self.n_heads
    }

    pub fn uses_gem(&self) -> bool {
        self.variant == Variant::Transformer && self.pooling == Pooling::Gem
    }

    pub fn uses_cls(&self) -> bool {
        self.variant == Variant::Transformer && self.pooling == Pooling::Cls
    }
}

/// Whether dropout is active. Training dropout masks come from a ChaCha
/// stream seeded by `seed`, so a train-mode pass is reproducible too.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f32>,
    pub source_track: String,
    pub window_start: usize,
}
