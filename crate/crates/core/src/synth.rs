//! Synthetic datasets with controllable clique structure, for exercising the
//! whole pipeline without audio.
//!
//! Every clique draws two unit signatures `s` and `r`. A version's latent row
//! at time `t` is
//!
//! ```text
//! x_t = β·A s + ε_t·γ·B r + σ·(C w_v + z_t)
//! ```
//!
//! with shared random orthonormal maps `A` (d × signature_dim), `B`
//! (d × jitter_dim) and `C` (d × nuisance_dim), where `A` and `C` live in
//! the orthogonal complement of `B`'s span, a per-version offset `w_v`, per-row noise `z_t`, and a
//! sign `ε_t = ±1` held constant over random-length segments, each followed by
//! its mirror (the version's temporal jitter). The `B r` part averages away over time but is visible
//! row by row, confined to a low-rank subspace an encoder can learn to
//! read. What survives averaging is the `A s` part buried in the version
//! offset, which is why time-averaged representations plateau below a model
//! that looks at individual rows.

use std::path::Path;

use ndarray::{s, Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{write_latents, DatasetManifest, LatentSequence, Split, TrackRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_cliques: usize,
    pub versions_min: usize,
    pub versions_max: usize,
    pub d: usize,
    pub m_min: usize,
    pub m_max: usize,
    pub signature_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Weight β of the time-invariant clique component.
    pub shared_weight: f64,
    /// Rank of the sign-flipping component's subspace.
    pub jitter_dim: usize,
    /// Norm of the sign-flipping component.
    pub jitter_weight: f64,
    pub nuisance_dim: usize,
    pub segment_min: usize,
    pub segment_max: usize,
    /// Words per clique lyric.
    pub lyric_words: usize,
    pub word_pool: usize,
    /// Probability that a version keeps each lyric word (else it is replaced).
    pub word_keep: f64,
    /// Fraction of versions given a non-lyrical transcription.
    pub instrumental_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_cliques: 200,
            versions_min: 2,
            versions_max: 4,
            d: 32,
            m_min: 160,
            m_max: 400,
            signature_dim: 24,
            noise_sigma: 0.2,
            seed: 0,
            shared_weight: 1.0,
            jitter_dim: 8,
            jitter_weight: 3.0,
            nuisance_dim: 24,
            segment_min: 2,
            segment_max: 8,
            lyric_words: 40,
            word_pool: 2000,
            word_keep: 0.3,
            instrumental_fraction: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_cliques", self.n_cliques),
            ("versions_min", self.versions_min),
            ("d", self.d),
            ("m_min", self.m_min),
            ("signature_dim", self.signature_dim),
            ("jitter_dim", self.jitter_dim),
            ("segment_min", self.segment_min),
            ("word_pool", self.word_pool),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.jitter_dim >= self.d || self.signature_dim.max(self.nuisance_dim) > self.d - self.jitter_dim {
            return Err(Error::Config(
                "signature_dim and nuisance_dim must fit in the d - jitter_dim complement".into(),
            ));
        }
        if self.versions_max < self.versions_min || self.m_max < self.m_min || self.segment_max < self.segment_min {
            return Err(Error::Config("a range has max below min".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.shared_weight >= 0.0) || !(self.jitter_weight >= 0.0) {
            return Err(Error::Config("noise_sigma and the component weights must be >= 0".into()));
        }
        for (name, p) in [("word_keep", self.word_keep), ("instrumental_fraction", self.instrumental_fraction)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `d × k` matrix with orthonormal columns (Gram-Schmidt on Gaussian draws).
fn orthonormal(rng: &mut ChaCha8Rng, d: usize, k: usize) -> Array2<f64> {
    let mut q = Array2::<f64>::zeros((d, k));
    let mut j = 0;
    while j < k {
        let mut v = Array1::from_shape_simple_fn(d, || normal(rng));
        for i in 0..j {
            let col = q.column(i);
            let proj = col.dot(&v);
            v.scaled_add(-proj, &col);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            q.column_mut(j).assign(&(v / norm));
            j += 1;
        }
    }
    q
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    loop {
        let v = Array1::from_shape_simple_fn(n, || normal(rng));
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

const ONSETS: [&str; 16] = ["b", "k", "d", "f", "g", "j", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Distinct pseudo-words of two to four syllables.
fn word_pool(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=4);
        let w: String = (0..syllables)
            .map(|_| {
                format!(
                    "{}{}",
                    ONSETS[rng.random_range(0..ONSETS.len())],
                    VOWELS[rng.random_range(0..VOWELS.len())]
                )
            })
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

const INSTRUMENTAL: &str = "[Instrumental]";

/// Writes `latents/<track>.wlat` files and `manifest.jsonl` under `out_dir`
/// and returns the loaded manifest. Output is a pure function of `spec`.
pub fn synth_dataset(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let latent_dir = out_dir.join("latents");
    std::fs::create_dir_all(&latent_dir).map_err(|e| Error::storage(&latent_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let map_scale = 1.0 / (spec.d as f64).sqrt();
    // B spans its own subspace; A and C share the orthogonal complement.
    let basis = orthonormal(&mut rng, spec.d, spec.d);
    let b = basis.slice(s![.., ..spec.jitter_dim]).to_owned();
    let rest = basis.slice(s![.., spec.jitter_dim..]).to_owned();
    let free = spec.d - spec.jitter_dim;
    let a = rest.dot(&orthonormal(&mut rng, free, spec.signature_dim));
    let c = rest.dot(&orthonormal(&mut rng, free, spec.nuisance_dim));
    let pool = word_pool(spec.word_pool, &mut rng);

    let mut order: Vec<usize> = (0..spec.n_cliques).collect();
    order.shuffle(&mut rng);
    let n_train = (spec.n_cliques as f64 * 0.70).round() as usize;
    let n_val = (spec.n_cliques as f64 * 0.15).round() as usize;
    let mut split_of = vec![Split::Test; spec.n_cliques];
    for (rank, &ci) in order.iter().enumerate() {
        split_of[ci] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let sigma = spec.noise_sigma;
    let mut records = Vec::new();
    for ci in 0..spec.n_cliques {
        let clique_id = format!("c{ci:04}");
        let shared = a.dot(&unit(&mut rng, spec.signature_dim)) * spec.shared_weight;
        let flipping = b.dot(&unit(&mut rng, spec.jitter_dim)) * spec.jitter_weight;
        let lyric: Vec<&str> = (0..spec.lyric_words)
            .map(|_| pool[rng.random_range(0..pool.len())].as_str())
            .collect();
        let n_versions = rng.random_range(spec.versions_min..=spec.versions_max);
        for vi in 0..n_versions {
            let track_id = format!("{clique_id}_v{vi}");
            let m = rng.random_range(spec.m_min..=spec.m_max);
            let offset = c.dot(&Array1::from_shape_simple_fn(spec.nuisance_dim, || normal(&mut rng)));
            let mut data = Array2::<f32>::zeros((m, spec.d));
            let mut signs = Vec::with_capacity(m);
            while signs.len() < m {
                // a segment and its mirror image, so the sign averages out
                let len = rng.random_range(spec.segment_min..=spec.segment_max);
                let first = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                signs.extend(std::iter::repeat_n(first, len));
                signs.extend(std::iter::repeat_n(-first, len));
            }
            for (row, &sign) in signs[..m].iter().enumerate() {
                for j in 0..spec.d {
                    let z = normal(&mut rng);
                    let v = shared[j] + sign * flipping[j] + sigma * (offset[j] + z * map_scale);
                    data[[row, j]] = v as f32;
                }
            }
            let words: Vec<&str> = lyric
                .iter()
                .map(|&w| {
                    if rng.random_bool(spec.word_keep) {
                        w
                    } else {
                        pool[rng.random_range(0..pool.len())].as_str()
                    }
                })
                .collect();
            let transcription = if rng.random_bool(spec.instrumental_fraction) {
                INSTRUMENTAL.to_owned()
            } else {
                words.join(" ")
            };
            let latent_path = format!("latents/{track_id}.wlat");
            write_latents(&LatentSequence::new(data)?, out_dir.join(&latent_path))?;
            records.push(TrackRecord {
                track_id,
                clique_id: clique_id.clone(),
                split: split_of[ci],
                latent_path,
                transcription: Some(transcription),
                language: Some("en".into()),
                duration_s: Some(m as f64 * 0.5),
            });
        }
    }
    let manifest = DatasetManifest {
        records,
        dataset_name: "manifest".into(),
        d: spec.d,
        base_dir: out_dir.to_path_buf(),
    };
    let path = out_dir.join("manifest.jsonl");
    manifest.save(&path)?;
    DatasetManifest::load(&path)
}
