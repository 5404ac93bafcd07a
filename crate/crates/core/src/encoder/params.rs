use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EncoderConfig, Variant};
use crate::error::Result;
use crate::real::Real;

/// Affine map `y = x · weight + bias`, weight stored `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<F> {
    pub gain: Array1<F>,
    pub bias: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<F> {
    pub attn_norm: LayerNorm<F>,
    pub query: Linear<F>,
    pub key: Linear<F>,
    pub value: Linear<F>,
    pub attn_out: Linear<F>,
    pub ffn_norm: LayerNorm<F>,
    pub ffn_in: Linear<F>,
    pub ffn_out: Linear<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams<F> {
    pub input: Linear<F>,
    pub blocks: Vec<Block<F>>,
    pub final_norm: LayerNorm<F>,
    /// Learnable GeM exponent (length 1), present only with GeM pooling.
    pub gem_p: Option<Array1<F>>,
    /// Learned CLS position prepended before the blocks (CLS pooling only).
    pub cls: Option<Array1<F>>,
    pub output: Linear<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AvgMlpParams<F> {
    pub hidden: Linear<F>,
    pub output: Linear<F>,
}

/// Every learnable array of an encoder. Gradients and optimizer moments use
/// the same type.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderParams<F> {
    Transformer(TransformerParams<F>),
    AvgMlp(AvgMlpParams<F>),
}

impl<F: Real> Linear<F> {
    fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Array2::zeros((d_in, d_out)),
            bias: Array1::zeros(d_out),
        }
    }

    fn xavier<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weight: xavier(d_in, d_out, (d_in, d_out), rng),
            bias: Array1::zeros(d_out),
        }
    }

    fn map<G: Real>(&self, f: impl Fn(F) -> G + Copy) -> Linear<G> {
        Linear {
            weight: self.weight.mapv(f),
            bias: self.bias.mapv(f),
        }
    }

    fn push<'a>(&'a self, name: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
        out.push((format!("{name}.weight"), self.weight.view().into_dyn()));
        out.push((format!("{name}.bias"), self.bias.view().into_dyn()));
    }

    fn push_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>) {
        out.push((format!("{name}.weight"), self.weight.view_mut().into_dyn()));
        out.push((format!("{name}.bias"), self.bias.view_mut().into_dyn()));
    }
}

impl<F: Real> LayerNorm<F> {
    fn new(d: usize, gain: F) -> Self {
        Self {
            gain: Array1::from_elem(d, gain),
            bias: Array1::zeros(d),
        }
    }

    fn map<G: Real>(&self, f: impl Fn(F) -> G + Copy) -> LayerNorm<G> {
        LayerNorm {
            gain: self.gain.mapv(f),
            bias: self.bias.mapv(f),
        }
    }

    fn push<'a>(&'a self, name: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
        out.push((format!("{name}.gain"), self.gain.view().into_dyn()));
        out.push((format!("{name}.bias"), self.bias.view().into_dyn()));
    }

    fn push_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>) {
        out.push((format!("{name}.gain"), self.gain.view_mut().into_dyn()));
        out.push((format!("{name}.bias"), self.bias.view_mut().into_dyn()));
    }
}

impl<F: Real> Block<F> {
    fn build(cfg: &EncoderConfig, mut lin: impl FnMut(usize, usize) -> Linear<F>, gain: F) -> Self {
        let d = cfg.d_h;
        Self {
            attn_norm: LayerNorm::new(d, gain),
            query: lin(d, d),
            key: lin(d, d),
            value: lin(d, d),
            attn_out: lin(d, d),
            ffn_norm: LayerNorm::new(d, gain),
            ffn_in: lin(d, cfg.d_ffn),
            ffn_out: lin(cfg.d_ffn, d),
        }
    }

    fn map<G: Real>(&self, f: impl Fn(F) -> G + Copy) -> Block<G> {
        Block {
            attn_norm: self.attn_norm.map(f),
            query: self.query.map(f),
            key: self.key.map(f),
            value: self.value.map(f),
            attn_out: self.attn_out.map(f),
            ffn_norm: self.ffn_norm.map(f),
            ffn_in: self.ffn_in.map(f),
            ffn_out: self.ffn_out.map(f),
        }
    }
}

fn xavier<F: Real, R: Rng>(
    fan_in: usize,
    fan_out: usize,
    shape: (usize, usize),
    rng: &mut R,
) -> Array2<F> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn(shape, || F::of(rng.random_range(-a..a)))
}

/// Xavier-uniform weights, zero biases, unit layer-norm gains,
/// `gem_p = gem_p_init`. Deterministic in `seed`.
pub fn init_params<F: Real>(config: &EncoderConfig, seed: u64) -> Result<EncoderParams<F>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(EncoderParams::build(config, F::one(), |i, o| Linear::xavier(i, o, &mut rng)))
}

impl<F: Real> EncoderParams<F> {
    fn build(
        cfg: &EncoderConfig,
        gain: F,
        mut lin: impl FnMut(usize, usize) -> Linear<F>,
    ) -> Self {
        match cfg.variant {
            Variant::AvgMlp => EncoderParams::AvgMlp(AvgMlpParams {
                hidden: lin(cfg.d_in, cfg.d_h),
                output: lin(cfg.d_h, cfg.d_e),
            }),
            Variant::Transformer => {
                let input = lin(cfg.d_in, cfg.d_h);
                let blocks = (0..cfg.n_blocks)
                    .map(|_| Block::build(cfg, &mut lin, gain))
                    .collect();
                let cls = cfg.uses_cls().then(|| {
                    let row = lin(1, cfg.d_h);
                    row.weight.row(0).to_owned()
                });
                let output = lin(cfg.d_h, cfg.d_e);
                let gem_p = cfg.uses_gem().then(|| {
                    // zero-valued for gradients/moments, the init value otherwise
                    Array1::from_elem(1, if gain == F::one() { F::of(cfg.gem_p_init) } else { F::zero() })
                });
                EncoderParams::Transformer(TransformerParams {
                    input,
                    blocks,
                    final_norm: LayerNorm::new(cfg.d_h, gain),
                    gem_p,
                    cls,
                    output,
                })
            }
        }
    }

    /// All-zero arrays with the shapes `config` implies.
    pub fn zeros(config: &EncoderConfig) -> Self {
        Self::build(config, F::zero(), Linear::zeros)
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_| F::zero())
    }

    pub fn map<G: Real>(&self, f: impl Fn(F) -> G + Copy) -> EncoderParams<G> {
        match self {
            EncoderParams::AvgMlp(p) => EncoderParams::AvgMlp(AvgMlpParams {
                hidden: p.hidden.map(f),
                output: p.output.map(f),
            }),
            EncoderParams::Transformer(p) => EncoderParams::Transformer(TransformerParams {
                input: p.input.map(f),
                blocks: p.blocks.iter().map(|b| b.map(f)).collect(),
                final_norm: p.final_norm.map(f),
                gem_p: p.gem_p.as_ref().map(|a| a.mapv(f)),
                cls: p.cls.as_ref().map(|a| a.mapv(f)),
                output: p.output.map(f),
            }),
        }
    }

    pub fn cast<G: Real>(&self) -> EncoderParams<G> {
        self.map(|v| G::of(v.as_f64()))
    }

    /// Named views of every learnable array, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = Vec::new();
        match self {
            EncoderParams::AvgMlp(p) => {
                p.hidden.push("hidden", &mut out);
                p.output.push("output", &mut out);
            }
            EncoderParams::Transformer(p) => {
                p.input.push("input", &mut out);
                if let Some(cls) = &p.cls {
                    out.push(("cls".into(), cls.view().into_dyn()));
                }
                for (i, b) in p.blocks.iter().enumerate() {
                    let n = |s: &str| format!("blocks.{i}.{s}");
                    b.attn_norm.push(&n("attn_norm"), &mut out);
                    b.query.push(&n("query"), &mut out);
                    b.key.push(&n("key"), &mut out);
                    b.value.push(&n("value"), &mut out);
                    b.attn_out.push(&n("attn_out"), &mut out);
                    b.ffn_norm.push(&n("ffn_norm"), &mut out);
                    b.ffn_in.push(&n("ffn_in"), &mut out);
                    b.ffn_out.push(&n("ffn_out"), &mut out);
                }
                p.final_norm.push("final_norm", &mut out);
                if let Some(gem_p) = &p.gem_p {
                    out.push(("gem_p".into(), gem_p.view().into_dyn()));
                }
                p.output.push("output", &mut out);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut out = Vec::new();
        match self {
            EncoderParams::AvgMlp(p) => {
                p.hidden.push_mut("hidden", &mut out);
                p.output.push_mut("output", &mut out);
            }
            EncoderParams::Transformer(p) => {
                p.input.push_mut("input", &mut out);
                if let Some(cls) = &mut p.cls {
                    out.push(("cls".into(), cls.view_mut().into_dyn()));
                }
                for (i, b) in p.blocks.iter_mut().enumerate() {
                    let n = |s: &str| format!("blocks.{i}.{s}");
                    b.attn_norm.push_mut(&n("attn_norm"), &mut out);
                    b.query.push_mut(&n("query"), &mut out);
                    b.key.push_mut(&n("key"), &mut out);
                    b.value.push_mut(&n("value"), &mut out);
                    b.attn_out.push_mut(&n("attn_out"), &mut out);
                    b.ffn_norm.push_mut(&n("ffn_norm"), &mut out);
                    b.ffn_in.push_mut(&n("ffn_in"), &mut out);
                    b.ffn_out.push_mut(&n("ffn_out"), &mut out);
                }
                p.final_norm.push_mut("final_norm", &mut out);
                if let Some(gem_p) = &mut p.gem_p {
                    out.push(("gem_p".into(), gem_p.view_mut().into_dyn()));
                }
                p.output.push_mut("output", &mut out);
            }
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, a)| a.len()).sum()
    }

    /// `self += other`, array by array. Panics on structural mismatch.
    pub fn add_assign(&mut self, other: &Self) {
        let src = other.tensors();
        let mut dst = self.tensors_mut();
        assert_eq!(src.len(), dst.len(), "parameter structure mismatch");
        for ((_, d), (_, s)) in dst.iter_mut().zip(src.iter()) {
            Zip::from(d).and(s).for_each(|a, &b| *a += b);
        }
    }

    pub fn scale(&mut self, factor: F) {
        for (_, mut a) in self.tensors_mut() {
            a.mapv_inplace(|v| v * factor);
        }
    }

    pub fn gem_p(&self) -> Option<F> {
        match self {
            EncoderParams::Transformer(TransformerParams { gem_p: Some(p), .. }) => Some(p[0]),
            _ => None,
        }
    }

    /// Keep the GeM exponent in the power-mean's domain (`p >= 1`).
    pub fn clamp_gem_p(&mut self) {
        if let EncoderParams::Transformer(TransformerParams { gem_p: Some(p), .. }) = self {
            if !(p[0] >= F::one()) {
                p[0] = F::one();
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }

    /// Shape check against a config (used when loading checkpoints).
    pub fn matches(&self, config: &EncoderConfig) -> bool {
        let reference = EncoderParams::<F>::zeros(config);
        let a = self.tensors();
        let b = reference.tensors();
        a.len() == b.len()
            && a.iter()
                .zip(b.iter())
                .all(|((na, va), (nb, vb))| na == nb && va.shape() == vb.shape())
    }
}
