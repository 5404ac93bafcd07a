//! Forward pass, hand-written reverse mode, and batch gradient computation.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::gem::{gem_backward, gem_pool};
use super::layers::{
    gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward,
    positional_encoding, softmax_backward_rows, softmax_rows, NormCache,
};
use super::params::{AvgMlpParams, Block, EncoderParams, Linear, TransformerParams};
use super::{EncoderConfig, Embedding, Mode, Pooling, Variant};
use crate::error::{Error, Result};
use crate::feature_store::Window;
use crate::real::Real;

/// A scalar training objective over a batch of embeddings.
pub trait Objective: Sync {
    /// Loss value and its gradient with respect to every embedding.
    fn loss_and_grad(
        &self,
        embeddings: &[Array1<f64>],
        pair_of: &[usize],
    ) -> Result<(f64, Vec<Array1<f64>>)>;
}

struct BlockCache<F> {
    attn_norm: NormCache<F>,
    normed: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
    attn_masks: Option<Vec<Array2<F>>>,
    heads: Array2<F>,
    ffn_norm: NormCache<F>,
    ffn_normed: Array2<F>,
    pre_act: Array2<F>,
    hidden: Array2<F>,
    ffn_mask: Option<Array2<F>>,
}

struct TransformerCache<F> {
    x: Array2<F>,
    blocks: Vec<BlockCache<F>>,
    final_norm: NormCache<F>,
    normed: Array2<F>,
    pooled: Array1<F>,
}

struct AvgMlpCache<F> {
    mean: Array1<F>,
    pre_act: Array1<F>,
    hidden: Array1<F>,
    mask: Option<Array1<F>>,
}

enum Cache<F> {
    Transformer(TransformerCache<F>),
    AvgMlp(AvgMlpCache<F>),
}

fn dropout_mask<F: Real>(shape: (usize, usize), p: f64, rng: &mut ChaCha8Rng) -> Array2<F> {
    let keep = F::of(1.0 / (1.0 - p));
    Array2::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < p {
            F::zero()
        } else {
            keep
        }
    })
}

fn cached_positions(len: usize, d: usize) -> Arc<Array2<f64>> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<Array2<f64>>>>> = OnceLock::new();
    let mut map = CACHE.get_or_init(Default::default).lock().unwrap();
    map.entry((len, d))
        .or_insert_with(|| Arc::new(positional_encoding(len, d)))
        .clone()
}

fn mode_rng(mode: Mode, dropout_p: f64) -> Option<ChaCha8Rng> {
    match mode {
        Mode::Train { seed } if dropout_p > 0.0 => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    }
}

fn check_finite<F: Real>(values: impl IntoIterator<Item = F>, what: &str) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite values in {what}")))
    }
}

fn block_forward<F: Real>(
    h: &mut Array2<F>,
    block: &Block<F>,
    cfg: &EncoderConfig,
    rng: &mut Option<ChaCha8Rng>,
) -> BlockCache<F> {
    let t = h.nrows();
    let dk = cfg.head_dim();
    let scale = F::of(1.0 / (dk as f64).sqrt());
    let (normed, attn_norm) = layer_norm(h.view(), &block.attn_norm);
    let q = linear(normed.view(), &block.query);
    let k = linear(normed.view(), &block.key);
    let v = linear(normed.view(), &block.value);
    let mut heads = Array2::zeros((t, cfg.d_h));
    let mut probs = Vec::with_capacity(cfg.n_heads);
    let mut masks = rng.as_ref().map(|_| Vec::with_capacity(cfg.n_heads));
    for head in 0..cfg.n_heads {
        let cols = s![.., head * dk..(head + 1) * dk];
        let mut p = q.slice(cols).dot(&k.slice(cols).t());
        p.mapv_inplace(|x| x * scale);
        softmax_rows(p.view_mut());
        let out = match (rng.as_mut(), masks.as_mut()) {
            (Some(rng), Some(masks)) => {
                let mask = dropout_mask::<F>((t, t), cfg.dropout_p, rng);
                let dropped = &p * &mask;
                masks.push(mask);
                dropped.dot(&v.slice(cols))
            }
            _ => p.dot(&v.slice(cols)),
        };
        heads.slice_mut(cols).assign(&out);
        probs.push(p);
    }
    *h += &linear(heads.view(), &block.attn_out);

    let (ffn_normed, ffn_norm) = layer_norm(h.view(), &block.ffn_norm);
    let pre_act = linear(ffn_normed.view(), &block.ffn_in);
    let mut hidden = pre_act.mapv(gelu);
    let ffn_mask = rng.as_mut().map(|rng| {
        let mask = dropout_mask::<F>(hidden.dim(), cfg.dropout_p, rng);
        hidden *= &mask;
        mask
    });
    *h += &linear(hidden.view(), &block.ffn_out);
    BlockCache {
        attn_norm,
        normed,
        q,
        k,
        v,
        probs,
        attn_masks: masks,
        heads,
        ffn_norm,
        ffn_normed,
        pre_act,
        hidden,
        ffn_mask,
    }
}

fn block_backward<F: Real>(
    dh: Array2<F>,
    block: &Block<F>,
    cache: &BlockCache<F>,
    cfg: &EncoderConfig,
    grad: &mut Block<F>,
) -> Array2<F> {
    let dk = cfg.head_dim();
    let scale = F::of(1.0 / (dk as f64).sqrt());

    // feed-forward branch
    let mut d_hidden = linear_backward(cache.hidden.view(), dh.view(), &block.ffn_out, &mut grad.ffn_out);
    if let Some(mask) = &cache.ffn_mask {
        d_hidden *= mask;
    }
    d_hidden.zip_mut_with(&cache.pre_act, |g, &x| *g *= gelu_grad(x));
    let d_normed = linear_backward(cache.ffn_normed.view(), d_hidden.view(), &block.ffn_in, &mut grad.ffn_in);
    let mut dh = dh + layer_norm_backward(d_normed.view(), &cache.ffn_norm, &block.ffn_norm, &mut grad.ffn_norm);

    // attention branch
    let d_heads = linear_backward(cache.heads.view(), dh.view(), &block.attn_out, &mut grad.attn_out);
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dkm = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for head in 0..cfg.n_heads {
        let cols = s![.., head * dk..(head + 1) * dk];
        let d_out = d_heads.slice(cols);
        let p = &cache.probs[head];
        let mask = cache.attn_masks.as_ref().map(|m| &m[head]);
        let mut dp = d_out.dot(&cache.v.slice(cols).t());
        match mask {
            Some(mask) => {
                let dropped = p * mask;
                dv.slice_mut(cols).assign(&dropped.t().dot(&d_out));
                dp *= mask;
            }
            None => dv.slice_mut(cols).assign(&p.t().dot(&d_out)),
        }
        softmax_backward_rows(p.view(), dp.view_mut());
        dp.mapv_inplace(|x| x * scale);
        dq.slice_mut(cols).assign(&dp.dot(&cache.k.slice(cols)));
        dkm.slice_mut(cols).assign(&dp.t().dot(&cache.q.slice(cols)));
    }
    let mut d_normed = linear_backward(cache.normed.view(), dq.view(), &block.query, &mut grad.query);
    d_normed += &linear_backward(cache.normed.view(), dkm.view(), &block.key, &mut grad.key);
    d_normed += &linear_backward(cache.normed.view(), dv.view(), &block.value, &mut grad.value);
    dh += &layer_norm_backward(d_normed.view(), &cache.attn_norm, &block.attn_norm, &mut grad.attn_norm);
    dh
}

fn transformer_forward<F: Real>(
    params: &TransformerParams<F>,
    cfg: &EncoderConfig,
    x: Array2<F>,
    mode: Mode,
    keep_cache: bool,
) -> Result<(Array1<F>, Option<TransformerCache<F>>)> {
    let k = x.nrows();
    let mut h0 = linear(x.view(), &params.input);
    if cfg.positional_encoding {
        let pe = cached_positions(k, cfg.d_h);
        h0.zip_mut_with(&*pe, |a, &b| *a += F::of(b));
    }
    let mut h = match &params.cls {
        Some(cls) => {
            let mut with_cls = Array2::zeros((k + 1, cfg.d_h));
            with_cls.row_mut(0).assign(cls);
            with_cls.slice_mut(s![1.., ..]).assign(&h0);
            with_cls
        }
        None => h0,
    };
    let mut rng = mode_rng(mode, cfg.dropout_p);
    let mut block_caches = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let cache = block_forward(&mut h, block, cfg, &mut rng);
        if keep_cache {
            block_caches.push(cache);
        }
    }
    check_finite(h.iter().copied(), "encoder blocks")?;
    let (normed, final_norm) = layer_norm(h.view(), &params.final_norm);
    let pooled = match cfg.pooling {
        Pooling::Gem => {
            let p = params.gem_p.as_ref().map_or(F::of(cfg.gem_p_init), |p| p[0]);
            gem_pool(normed.view(), p, F::of(cfg.gem_eps))?
        }
        Pooling::Mean => normed.mean_axis(Axis(0)).expect("non-empty window"),
        Pooling::Cls => normed.row(0).to_owned(),
    };
    let z = params.output.weight.t().dot(&pooled) + &params.output.bias;
    check_finite(z.iter().copied(), "embedding")?;
    let cache = keep_cache.then(|| TransformerCache {
        x,
        blocks: block_caches,
        final_norm,
        normed,
        pooled,
    });
    Ok((z, cache))
}

fn transformer_backward<F: Real>(
    params: &TransformerParams<F>,
    cfg: &EncoderConfig,
    cache: &TransformerCache<F>,
    dz: ArrayView1<F>,
) -> TransformerParams<F> {
    let EncoderParams::Transformer(mut grad) = EncoderParams::<F>::zeros(cfg) else {
        unreachable!("config variant is transformer")
    };
    let pooled = cache.pooled.view().insert_axis(Axis(0));
    let dz2 = dz.insert_axis(Axis(0));
    let d_pooled = linear_backward(pooled, dz2, &params.output, &mut grad.output);
    let d_pooled = d_pooled.row(0);
    let t = cache.normed.nrows();
    let d_normed = match cfg.pooling {
        Pooling::Gem => {
            let p = params.gem_p.as_ref().expect("gem_p present")[0];
            let (dx, dp) = gem_backward(cache.normed.view(), p, F::of(cfg.gem_eps), cache.pooled.view(), d_pooled);
            grad.gem_p.as_mut().expect("gem_p present")[0] += dp;
            dx
        }
        Pooling::Mean => {
            let row = d_pooled.mapv(|g| g / F::of(t as f64));
            row.broadcast((t, cfg.d_h)).expect("broadcast").to_owned()
        }
        Pooling::Cls => {
            let mut d = Array2::zeros((t, cfg.d_h));
            d.row_mut(0).assign(&d_pooled);
            d
        }
    };
    let mut dh = layer_norm_backward(d_normed.view(), &cache.final_norm, &params.final_norm, &mut grad.final_norm);
    for ((block, bc), bg) in params
        .blocks
        .iter()
        .zip(&cache.blocks)
        .zip(grad.blocks.iter_mut())
        .rev()
    {
        dh = block_backward(dh, block, bc, cfg, bg);
    }
    let dh0 = if let Some(dcls) = grad.cls.as_mut() {
        *dcls += &dh.row(0);
        dh.slice(s![1.., ..])
    } else {
        dh.view()
    };
    linear_backward_params_only(cache.x.view(), dh0, &mut grad.input);
    grad
}

fn linear_backward_params_only<F: Real>(x: ArrayView2<F>, dy: ArrayView2<F>, grad: &mut Linear<F>) {
    ndarray::linalg::general_mat_mul(F::one(), &x.t(), &dy, F::one(), &mut grad.weight);
    grad.bias += &dy.sum_axis(Axis(0));
}

fn avg_mlp_forward<F: Real>(
    params: &AvgMlpParams<F>,
    cfg: &EncoderConfig,
    x: ArrayView2<F>,
    mode: Mode,
) -> Result<(Array1<F>, AvgMlpCache<F>)> {
    let mean = x.mean_axis(Axis(0)).expect("non-empty window");
    let pre_act = params.hidden.weight.t().dot(&mean) + &params.hidden.bias;
    let mut hidden = pre_act.mapv(gelu);
    let mask = mode_rng(mode, cfg.dropout_p).map(|mut rng| {
        let mask = dropout_mask::<F>((1, hidden.len()), cfg.dropout_p, &mut rng)
            .into_shape_with_order(hidden.len())
            .expect("row mask");
        hidden *= &mask;
        mask
    });
    let z = params.output.weight.t().dot(&hidden) + &params.output.bias;
    check_finite(z.iter().copied(), "embedding")?;
    Ok((
        z,
        AvgMlpCache {
            mean,
            pre_act,
            hidden,
            mask,
        },
    ))
}

fn outer_add<F: Real>(target: &mut Array2<F>, a: ArrayView1<F>, b: ArrayView1<F>) {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    ndarray::linalg::general_mat_mul(F::one(), &a2, &b2, F::one(), target);
}

fn avg_mlp_backward<F: Real>(
    params: &AvgMlpParams<F>,
    cache: &AvgMlpCache<F>,
    dz: ArrayView1<F>,
) -> AvgMlpParams<F> {
    let mut grad = AvgMlpParams {
        hidden: Linear {
            weight: Array2::zeros(params.hidden.weight.raw_dim()),
            bias: Array1::zeros(params.hidden.bias.len()),
        },
        output: Linear {
            weight: Array2::zeros(params.output.weight.raw_dim()),
            bias: Array1::zeros(params.output.bias.len()),
        },
    };
    outer_add(&mut grad.output.weight, cache.hidden.view(), dz);
    grad.output.bias += &dz;
    let mut d_hidden = params.output.weight.dot(&dz);
    if let Some(mask) = &cache.mask {
        d_hidden *= mask;
    }
    d_hidden.zip_mut_with(&cache.pre_act, |g, &x| *g *= gelu_grad(x));
    outer_add(&mut grad.hidden.weight, cache.mean.view(), d_hidden.view());
    grad.hidden.bias += &d_hidden;
    grad
}

fn window_input<F: Real>(window: &Window, cfg: &EncoderConfig) -> Result<Array2<F>> {
    if window.data.ncols() != cfg.d_in {
        return Err(Error::Shape(format!(
            "window width {} does not match d_in {}",
            window.data.ncols(),
            cfg.d_in
        )));
    }
    if window.data.nrows() == 0 {
        return Err(Error::Shape("empty window".into()));
    }
    Ok(window.data.mapv(|v| F::of(v as f64)))
}

fn forward_impl<F: Real>(
    params: &EncoderParams<F>,
    cfg: &EncoderConfig,
    window: &Window,
    mode: Mode,
    keep_cache: bool,
) -> Result<(Array1<F>, Option<Cache<F>>)> {
    let x = window_input::<F>(window, cfg)?;
    match (params, cfg.variant) {
        (EncoderParams::Transformer(p), Variant::Transformer) => {
            let (z, cache) = transformer_forward(p, cfg, x, mode, keep_cache)?;
            Ok((z, cache.map(Cache::Transformer)))
        }
        (EncoderParams::AvgMlp(p), Variant::AvgMlp) => {
            let (z, cache) = avg_mlp_forward(p, cfg, x.view(), mode)?;
            Ok((z, keep_cache.then_some(Cache::AvgMlp(cache))))
        }
        _ => Err(Error::Config("parameters do not match the configured variant".into())),
    }
}

fn backward_impl<F: Real>(
    params: &EncoderParams<F>,
    cfg: &EncoderConfig,
    cache: &Cache<F>,
    dz: ArrayView1<F>,
) -> EncoderParams<F> {
    match (params, cache) {
        (EncoderParams::Transformer(p), Cache::Transformer(c)) => {
            EncoderParams::Transformer(transformer_backward(p, cfg, c, dz))
        }
        (EncoderParams::AvgMlp(p), Cache::AvgMlp(c)) => EncoderParams::AvgMlp(avg_mlp_backward(p, c, dz)),
        _ => unreachable!("cache produced by the same params"),
    }
}

/// Raw embedding vector for one window.
pub fn embed<F: Real>(
    params: &EncoderParams<F>,
    config: &EncoderConfig,
    window: &Window,
    mode: Mode,
) -> Result<Array1<F>> {
    forward_impl(params, config, window, mode, false).map(|(z, _)| z)
}

pub fn forward<F: Real>(
    params: &EncoderParams<F>,
    config: &EncoderConfig,
    window: &Window,
    mode: Mode,
) -> Result<Embedding> {
    let z = embed(params, config, window, mode)?;
    Ok(Embedding {
        values: z.iter().map(|v| v.as_f64() as f32).collect(),
        source_track: window.source_track.clone(),
        window_start: window.start_index,
    })
}

/// Per-window dropout seed derived from a batch seed (splitmix64 finalizer).
pub fn window_seed(batch_seed: u64, index: usize) -> u64 {
    let mut z = batch_seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn window_mode(mode: Mode, index: usize) -> Mode {
    match mode {
        Mode::Eval => Mode::Eval,
        Mode::Train { seed } => Mode::Train {
            seed: window_seed(seed, index),
        },
    }
}

// Above this many cached scalars per batch, activations are recomputed per
// window during the backward sweep instead of being held for the whole batch.
const CACHE_BUDGET_SCALARS: usize = 64 << 20;
const REDUCE_CHUNK: usize = 8;

fn cache_scalars(cfg: &EncoderConfig, k: usize) -> usize {
    match cfg.variant {
        Variant::AvgMlp => cfg.d_in + 3 * cfg.d_h,
        Variant::Transformer => {
            let t = k + 1;
            let per_block = 10 * t * cfg.d_h + 2 * cfg.n_heads * t * t + 3 * t * cfg.d_ffn;
            k * cfg.d_in + cfg.n_blocks * per_block + 2 * t * cfg.d_h
        }
    }
}

/// Loss and exact gradients of `objective` over a batch of windows.
///
/// Forward passes and per-window backward passes run in parallel; the
/// per-window gradients are summed in fixed chunk order, so the result does
/// not depend on the number of worker threads.
pub fn compute_gradients<F: Real>(
    params: &EncoderParams<F>,
    config: &EncoderConfig,
    objective: &dyn Objective,
    windows: &[Window],
    pair_of: &[usize],
    mode: Mode,
) -> Result<(f64, EncoderParams<F>)> {
    if windows.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let k = windows[0].k();
    let keep = cache_scalars(config, k) * windows.len() <= CACHE_BUDGET_SCALARS;
    let forwards: Vec<(Array1<F>, Option<Cache<F>>)> = windows
        .par_iter()
        .enumerate()
        .map(|(i, w)| forward_impl(params, config, w, window_mode(mode, i), keep))
        .collect::<Result<_>>()?;
    let embeddings: Vec<Array1<f64>> = forwards.iter().map(|(z, _)| z.mapv(Real::as_f64)).collect();
    let (loss, dz) = objective.loss_and_grad(&embeddings, pair_of)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }
    if dz.len() != windows.len() {
        return Err(Error::Shape("objective returned wrong number of gradients".into()));
    }
    let mut caches: Vec<Option<Cache<F>>> = forwards.into_iter().map(|(_, c)| c).collect();
    let chunk_grads: Vec<EncoderParams<F>> = caches
        .par_chunks_mut(REDUCE_CHUNK)
        .enumerate()
        .map(|(chunk, slots)| -> Result<EncoderParams<F>> {
            let mut acc = params.zeros_like();
            for (offset, slot) in slots.iter_mut().enumerate() {
                let i = chunk * REDUCE_CHUNK + offset;
                let dzi = dz[i].mapv(F::of);
                if dzi.iter().all(|&g| g == F::zero()) {
                    continue;
                }
                let cache = match slot.take() {
                    Some(c) => c,
                    None => forward_impl(params, config, &windows[i], window_mode(mode, i), true)?
                        .1
                        .expect("cache requested"),
                };
                acc.add_assign(&backward_impl(params, config, &cache, dzi.view()));
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut grads = params.zeros_like();
    for g in &chunk_grads {
        grads.add_assign(g);
    }
    if !grads.all_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok((loss, grads))
}
