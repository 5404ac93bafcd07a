//! Contrastive training: clique-pair batches, AdamW under a warmup-cosine
//! schedule, and early stopping on validation MAP.

mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::checkpoint::save_checkpoint;
use crate::encoder::{compute_gradients, init_params, EncoderConfig, EncoderParams, Mode, Objective};
use crate::error::{Error, Result};
use crate::feature_store::{sample_train_window, DatasetManifest, LatentStore, Split, Window};
use crate::losses::{BatchHardTriplet, NtXent};
use crate::retrieval::{distance_matrix, embed_first_windows, map_eval_labels};

pub use optim::{adamw_step, AdamWSettings, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    NtXent,
    Triplet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_base: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub lr_min: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    /// Window length in latent rows.
    pub k: usize,
    pub temperature: f64,
    pub loss: LossKind,
    pub triplet_margin: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_base: 1e-4,
            weight_decay: 1e-3,
            warmup_epochs: 50,
            lr_min: 1e-6,
            max_epochs: 1000,
            batch_size: 64,
            patience: 20,
            k: 1500,
            temperature: 0.1,
            loss: LossKind::NtXent,
            triplet_margin: 0.3,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        let cfg: Self = serde_json::from_str(&raw)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return bad(format!("batch_size must be even and >= 2, got {}", self.batch_size));
        }
        if self.warmup_epochs >= self.max_epochs {
            return bad(format!(
                "warmup_epochs ({}) must be below max_epochs ({})",
                self.warmup_epochs, self.max_epochs
            ));
        }
        for (name, v) in [
            ("lr_base", self.lr_base),
            ("lr_min", self.lr_min),
            ("temperature", self.temperature),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.lr_min > self.lr_base {
            return bad("lr_min exceeds lr_base".into());
        }
        if !(self.weight_decay >= 0.0) || !(self.triplet_margin >= 0.0) {
            return bad("weight_decay and triplet_margin must be >= 0".into());
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.k == 0 || self.patience == 0 {
            return bad("k and patience must be positive".into());
        }
        self.encoder.validate()
    }

    pub fn adamw(&self) -> AdamWSettings {
        AdamWSettings {
            weight_decay: self.weight_decay,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    fn objective(&self) -> Box<dyn Objective> {
        match self.loss {
            LossKind::NtXent => Box::new(NtXent {
                temperature: self.temperature,
            }),
            LossKind::Triplet => Box::new(BatchHardTriplet {
                margin: self.triplet_margin,
            }),
        }
    }
}

/// Linear warmup to `lr_base` over `warmup_epochs`, then cosine decay that
/// reaches `lr_min` at `max_epochs`.
pub fn lr_at_epoch(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch >= config.max_epochs {
        return Err(Error::Domain(format!(
            "epoch {epoch} outside [0, {})",
            config.max_epochs
        )));
    }
    let w = config.warmup_epochs;
    if epoch < w {
        return Ok(config.lr_base * (epoch + 1) as f64 / w as f64);
    }
    let progress = (epoch - w) as f64 / (config.max_epochs - w) as f64;
    let cos = (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0;
    Ok(config.lr_min + (config.lr_base - config.lr_min) * cos)
}

/// Windows of one training batch; `pair_of[i]` is the other version of
/// window `i`'s clique.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub windows: Vec<Window>,
    pub pair_of: Vec<usize>,
    pub cliques: Vec<String>,
}

/// `batch_size / 2` distinct cliques, two distinct versions of each, one
/// random window per version. Pairs are consecutive: (0, 1), (2, 3), ….
pub fn build_batch<R: Rng + ?Sized>(
    cliques: &[(String, Vec<String>)],
    store: &LatentStore,
    batch_size: usize,
    k: usize,
    rng: &mut R,
) -> Result<WindowBatch> {
    let n_cliques = batch_size / 2;
    if cliques.iter().any(|(_, t)| t.len() < 2) {
        return Err(Error::Config("batch cliques need at least two versions".into()));
    }
    if cliques.len() < n_cliques {
        return Err(Error::Config(format!(
            "batch of {batch_size} needs {n_cliques} trainable cliques, only {} available",
            cliques.len()
        )));
    }
    let mut windows = Vec::with_capacity(batch_size);
    let mut chosen = Vec::with_capacity(n_cliques);
    for ci in sample(rng, cliques.len(), n_cliques).into_iter() {
        let (clique, tracks) = &cliques[ci];
        for ti in sample(rng, tracks.len(), 2).into_iter() {
            let id = &tracks[ti];
            let seq = store.get(id)?;
            windows.push(sample_train_window(&seq, id, k, rng));
        }
        chosen.push(clique.clone());
    }
    Ok(WindowBatch {
        pair_of: crate::losses::consecutive_pairs(windows.len()),
        windows,
        cliques: chosen,
    })
}

/// Patience rule on a maximized metric. Epochs are 1-based.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    pub best: f64,
    pub best_epoch: usize,
    pub stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            min_delta: 1e-6,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records an epoch's value; returns `(improved, stop)`.
    pub fn update(&mut self, epoch: usize, value: f64) -> (bool, bool) {
        if value > self.best + self.min_delta {
            self.best = value;
            self.best_epoch = epoch;
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.stale >= self.patience)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_map: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_map: f64,
    pub stopped_reason: StopReason,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams<f32>,
    pub history: TrainHistory,
    /// Best checkpoint, when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

pub const CHECKPOINT_FILE: &str = "best.wckp";
pub const HISTORY_FILE: &str = "history.jsonl";

/// Validation MAP with one first-`k` window per validation track.
pub fn validation_map(
    params: &EncoderParams<f32>,
    config: &TrainConfig,
    store: &LatentStore,
) -> Result<f64> {
    let manifest = store.manifest();
    let ids: Vec<String> = manifest.split(Split::Val).map(|r| r.track_id.clone()).collect();
    let embs = embed_first_windows(params, &config.encoder, store, &ids, config.k)?;
    let dm = distance_matrix(&embs, &ids, &ids)?;
    Ok(map_eval_labels(&dm, &manifest.clique_labels())?.map)
}

fn check_val_split(manifest: &DatasetManifest) -> Result<()> {
    if manifest.cliques(Split::Val).iter().any(|(_, t)| t.len() >= 2) {
        Ok(())
    } else {
        Err(Error::Config(
            "validation split needs at least one clique with two or more tracks".into(),
        ))
    }
}

/// Full training run. With `out_dir`, the best checkpoint is rewritten on
/// every improvement and the history is appended one epoch per line, so a
/// numeric failure still leaves the last good checkpoint on disk.
pub fn train(config: &TrainConfig, store: &LatentStore, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let manifest = store.manifest();
    if manifest.d != config.encoder.d_in {
        return Err(Error::Config(format!(
            "encoder d_in {} does not match latent dimension {}",
            config.encoder.d_in, manifest.d
        )));
    }
    check_val_split(manifest)?;
    let cliques = manifest.trainable_cliques();
    let per_batch = config.batch_size / 2;
    if cliques.len() < per_batch {
        return Err(Error::Config(format!(
            "batch of {} needs {per_batch} trainable cliques, only {} available",
            config.batch_size,
            cliques.len()
        )));
    }
    let batches_per_epoch = cliques.len().div_ceil(per_batch);

    let (ckpt_path, mut history_file) = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
            let hp = dir.join(HISTORY_FILE);
            let f = std::fs::File::create(&hp).map_err(|e| Error::storage(&hp, e))?;
            (Some(dir.join(CHECKPOINT_FILE)), Some((hp, f)))
        }
        None => (None, None),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = init_params::<f32>(&config.encoder, rng.next_u64())?;
    let mut state = OptimizerState::new(&params);
    let settings = config.adamw();
    let objective = config.objective();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = params.clone();
    let mut epochs = Vec::new();
    let mut reason = StopReason::MaxEpochs;

    for e in 0..config.max_epochs {
        let lr = lr_at_epoch(e, config)?;
        let mut loss_sum = 0.0;
        for _ in 0..batches_per_epoch {
            let batch = build_batch(&cliques, store, config.batch_size, config.k, &mut rng)?;
            let mode = Mode::Train { seed: rng.next_u64() };
            let (loss, grads) = compute_gradients(
                &params,
                &config.encoder,
                objective.as_ref(),
                &batch.windows,
                &batch.pair_of,
                mode,
            )?;
            adamw_step(&mut params, &grads, &mut state, lr, &settings)?;
            loss_sum += loss;
        }
        let val_map = validation_map(&params, config, store)?;
        let record = EpochRecord {
            epoch: e + 1,
            train_loss: loss_sum / batches_per_epoch as f64,
            val_map,
            lr,
        };
        log::info!(
            "epoch {} loss {:.4} val MAP {:.4} lr {:.2e}",
            record.epoch,
            record.train_loss,
            val_map,
            lr
        );
        if let Some((hp, f)) = history_file.as_mut() {
            let line = serde_json::to_string(&record).expect("epoch record serializes");
            writeln!(f, "{line}").map_err(|err| Error::storage(&*hp, err))?;
        }
        epochs.push(record);
        let (improved, stop) = stopper.update(e + 1, val_map);
        if improved {
            best = params.clone();
            if let Some(p) = &ckpt_path {
                save_checkpoint(&best, &config.encoder, p)?;
            }
        }
        if stop {
            reason = StopReason::Patience;
            break;
        }
    }

    Ok(TrainOutcome {
        params: best,
        history: TrainHistory {
            epochs,
            best_epoch: stopper.best_epoch,
            best_val_map: stopper.best,
            stopped_reason: reason,
        },
        checkpoint: ckpt_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::{write_latents, LatentSequence, TrackRecord};
    use ndarray::Array2;

    fn default_config() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn schedule_examples() {
        let c = default_config();
        assert_eq!(lr_at_epoch(49, &c).unwrap(), 1e-4);
        assert!((lr_at_epoch(999, &c).unwrap() - 1e-6).abs() < 1e-9);
        assert!((lr_at_epoch(525, &c).unwrap() - (1e-4 + 1e-6) / 2.0).abs() < 1e-15);
        assert!((lr_at_epoch(0, &c).unwrap() - 2e-6).abs() < 1e-18);
        assert!(matches!(lr_at_epoch(1000, &c), Err(Error::Domain(_))));
    }

    #[test]
    fn schedule_shape() {
        let c = default_config();
        let lrs: Vec<f64> = (0..c.max_epochs).map(|e| lr_at_epoch(e, &c).unwrap()).collect();
        assert!(lrs[..50].windows(2).all(|w| w[1] > w[0]));
        assert!(lrs[50] <= c.lr_base);
        assert!(lrs[49..].windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn early_stopping_example() {
        let mut s = EarlyStopping::new(20);
        let mut values = vec![0.5, 0.6];
        values.extend(std::iter::repeat_n(0.6, 10));
        values.extend(std::iter::repeat_n(0.55, 10));
        values.push(0.99);
        let mut stopped_at = None;
        for (i, v) in values.iter().enumerate() {
            if s.update(i + 1, *v).1 {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(22));
        assert_eq!(s.best_epoch, 2);
    }

    #[test]
    fn config_validation() {
        assert!(default_config().validate().is_ok());
        let odd = TrainConfig {
            batch_size: 63,
            ..default_config()
        };
        assert!(matches!(odd.validate(), Err(Error::Config(_))));
        let warm = TrainConfig {
            warmup_epochs: 1000,
            ..default_config()
        };
        assert!(warm.validate().is_err());
        let json = serde_json::to_string(&default_config()).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, default_config());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 1}"#).is_err());
        let partial: TrainConfig = serde_json::from_str(r#"{"loss": "triplet", "encoder": {"d_e": 8}}"#).unwrap();
        assert_eq!(partial.loss, LossKind::Triplet);
        assert_eq!(partial.encoder.d_e, 8);
        assert_eq!(partial.batch_size, 64);
    }

    fn toy_store(dir: &Path, n_cliques: usize, versions: usize) -> LatentStore {
        let mut records = Vec::new();
        for c in 0..n_cliques {
            for v in 0..versions {
                let id = format!("c{c}v{v}");
                let data = Array2::from_shape_fn((6 + v, 3), |(i, j)| (c * 7 + v + i * j) as f32 * 0.1);
                write_latents(&LatentSequence::new(data).unwrap(), dir.join(format!("{id}.wlat"))).unwrap();
                records.push(TrackRecord {
                    track_id: id.clone(),
                    clique_id: format!("c{c}"),
                    split: if c % 4 == 3 { Split::Val } else { Split::Train },
                    latent_path: format!("{id}.wlat"),
                    transcription: None,
                    language: None,
                    duration_s: None,
                });
            }
        }
        LatentStore::new(DatasetManifest {
            records,
            dataset_name: "toy".into(),
            d: 3,
            base_dir: dir.to_path_buf(),
        })
    }

    #[test]
    fn batch_composition() {
        let dir = tempfile::tempdir().unwrap();
        let store = toy_store(dir.path(), 8, 3);
        let cliques = store.manifest().trainable_cliques();
        assert_eq!(cliques.len(), 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = build_batch(&cliques, &store, 8, 4, &mut rng).unwrap();
        assert_eq!(b.windows.len(), 8);
        assert_eq!(b.pair_of, vec![1, 0, 3, 2, 5, 4, 7, 6]);
        let distinct: std::collections::HashSet<_> = b.cliques.iter().collect();
        assert_eq!(distinct.len(), 4);
        let labels = store.manifest().clique_labels();
        for i in (0..8).step_by(2) {
            let (a, c) = (&b.windows[i].source_track, &b.windows[i + 1].source_track);
            assert_ne!(a, c);
            assert_eq!(labels[a], labels[c]);
            assert_eq!(b.windows[i].k(), 4);
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        let b2 = build_batch(&cliques, &store, 8, 4, &mut rng2).unwrap();
        let ids = |b: &WindowBatch| b.windows.iter().map(|w| (w.source_track.clone(), w.start_index)).collect::<Vec<_>>();
        assert_eq!(ids(&b), ids(&b2));
        assert!(matches!(
            build_batch(&cliques, &store, 14, 4, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn two_version_clique_uses_both() {
        let dir = tempfile::tempdir().unwrap();
        let store = toy_store(dir.path(), 1, 2);
        let cliques = store.manifest().trainable_cliques();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = build_batch(&cliques, &store, 2, 3, &mut rng).unwrap();
        let mut ids: Vec<_> = b.windows.iter().map(|w| w.source_track.as_str()).collect();
        ids.sort();
        assert_eq!(ids, vec!["c0v0", "c0v1"]);
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            lr_base: 1e-2,
            warmup_epochs: 1,
            max_epochs: 4,
            batch_size: 4,
            patience: 10,
            k: 4,
            encoder: EncoderConfig {
                d_in: 3,
                d_h: 8,
                n_blocks: 1,
                n_heads: 2,
                d_ffn: 8,
                d_e: 4,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let store = toy_store(dir.path(), 8, 3);
        let cfg = tiny_train_config();
        let out = dir.path().join("run");
        let a = train(&cfg, &store, Some(&out)).unwrap();
        let b = train(&cfg, &store, None).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
        assert_eq!(a.history.epochs.len(), 4);
        assert_eq!(a.history.stopped_reason, StopReason::MaxEpochs);
        let lines = std::fs::read_to_string(out.join(HISTORY_FILE)).unwrap();
        assert_eq!(lines.lines().count(), 4);
        let (loaded, loaded_cfg) = crate::encoder::checkpoint::load_checkpoint(out.join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(loaded, a.params);
        let recomputed = validation_map(&loaded, &TrainConfig { encoder: loaded_cfg, ..cfg }, &store).unwrap();
        assert!((recomputed - a.history.best_val_map).abs() <= 1e-9);
    }

    #[test]
    fn loss_descends_on_a_frozen_batch() {
        let dir = tempfile::tempdir().unwrap();
        let spec = crate::synth::SynthSpec {
            n_cliques: 20,
            m_min: 20,
            m_max: 40,
            d: 8,
            signature_dim: 4,
            jitter_dim: 2,
            nuisance_dim: 4,
            ..Default::default()
        };
        let store = LatentStore::new(crate::synth::synth_dataset(&spec, dir.path()).unwrap());
        let cfg = TrainConfig {
            batch_size: 8,
            k: 16,
            encoder: EncoderConfig {
                d_in: 8,
                d_h: 16,
                n_blocks: 2,
                n_heads: 2,
                d_ffn: 32,
                d_e: 8,
                ..Default::default()
            },
            ..tiny_train_config()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = build_batch(&store.manifest().trainable_cliques(), &store, cfg.batch_size, cfg.k, &mut rng).unwrap();
        let mut params = init_params::<f32>(&cfg.encoder, 0).unwrap();
        let mut state = OptimizerState::new(&params);
        let objective = cfg.objective();
        let mut losses = Vec::new();
        for _ in 0..=20 {
            let (loss, grads) =
                compute_gradients(&params, &cfg.encoder, objective.as_ref(), &batch.windows, &batch.pair_of, Mode::Eval)
                    .unwrap();
            losses.push(loss);
            adamw_step(&mut params, &grads, &mut state, 1e-3, &cfg.adamw()).unwrap();
        }
        assert!(losses[20] < losses[0], "{losses:?}");
        assert!(losses[20] < 0.5 * losses[0], "{losses:?}");
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let store = toy_store(dir.path(), 8, 3);
        let mut cfg = tiny_train_config();
        cfg.encoder.d_in = 5;
        assert!(matches!(train(&cfg, &store, None), Err(Error::Config(_))));
    }
}
