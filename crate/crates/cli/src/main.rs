//! `wealy`: synthetic data, training, embedding, baselines, evaluation and
//! fusion from the command line.
//!
//! Every successful run prints one JSON line on stdout. Exit status is 0 on
//! success, 1 for invalid input or configuration, 2 for I/O and file-format
//! failures.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use wealy_core::baselines::{avgemb_distance_matrix, tfidf_distance_matrix, tfidf_fit};
use wealy_core::encoder::checkpoint::load_checkpoint;
use wealy_core::feature_store::{validate_manifest, DatasetManifest, LatentStore, Split};
use wealy_core::fusion::{align_matrices, fuse, sweep_alpha};
use wealy_core::retrieval::{
    distance_matrix, embed_tracks, map_eval, oracle_distance_matrix, random_baseline, read_distances,
    write_distances, DistanceMatrix, OracleRules,
};
use wealy_core::synth::{synth_dataset, SynthSpec};
use wealy_core::trainer::{train, TrainConfig, HISTORY_FILE};
use wealy_core::Error;

#[derive(Parser)]
#[command(name = "wealy", version, about = "Lyrics-aware version identification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ManifestArg {
    /// Dataset manifest (JSON lines).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (latents + manifest).
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// JSON file with synthetic-data parameters; unset fields take defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_cliques: Option<usize>,
    },
    /// Manifest utilities.
    Manifest {
        #[command(subcommand)]
        action: ManifestAction,
    },
    /// Train an encoder.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        manifest: ManifestArg,
        /// Output directory for the best checkpoint and the history.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Embed a split with a checkpoint and write its distance matrix.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        manifest: ManifestArg,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 0.9)]
        overlap: f64,
        #[arg(long, default_value_t = 1500)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// MAP of a distance matrix against the manifest's cliques.
    Eval {
        #[arg(long)]
        distances: PathBuf,
        #[command(flatten)]
        manifest: ManifestArg,
        /// Include per-query average precision in the output.
        #[arg(long)]
        per_query: bool,
    },
    /// Distance matrix of a reference system.
    Baseline {
        system: BaselineKind,
        #[command(flatten)]
        manifest: ManifestArg,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Oracle rule thresholds and patterns (JSON).
        #[arg(long)]
        rules: Option<PathBuf>,
    },
    /// Late fusion: audio + alpha * lyrics.
    Fuse {
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        lyrics: PathBuf,
        #[arg(long, default_value_t = 1.5)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
        /// Reorder the lyrics matrix onto the audio ids first.
        #[arg(long)]
        align: bool,
    },
    /// MAP of the fused matrix over a grid of weights.
    SweepAlpha {
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        lyrics: PathBuf,
        #[command(flatten)]
        manifest: ManifestArg,
        #[arg(long, default_value_t = 0.0)]
        min: f64,
        #[arg(long, default_value_t = 3.0)]
        max: f64,
        #[arg(long, default_value_t = 0.25)]
        step: f64,
    },
}

#[derive(Subcommand)]
enum ManifestAction {
    /// Check ids, latent files and dimensions.
    Validate {
        #[command(flatten)]
        manifest: ManifestArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    Tfidf,
    Avgemb,
    Random,
    Oracle,
}

impl ManifestArg {
    fn load(&self) -> Result<DatasetManifest, Error> {
        let path = self
            .manifest
            .as_ref()
            .ok_or_else(|| Error::Validation("missing required flag --manifest".into()))?;
        if !path.exists() {
            return Err(Error::Validation(format!(
                "--manifest: no such file {}",
                path.display()
            )));
        }
        DatasetManifest::load(path)
    }
}

fn split_ids(manifest: &DatasetManifest, split: Split) -> Result<Vec<String>, Error> {
    let ids: Vec<String> = manifest.split(split).map(|r| r.track_id.clone()).collect();
    if ids.is_empty() {
        return Err(Error::Validation(format!("split {split} has no tracks")));
    }
    Ok(ids)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn run(command: Command) -> Result<Value, Error> {
    match command {
        Command::Synth {
            out,
            spec,
            seed,
            n_cliques,
        } => {
            let mut spec = match spec {
                Some(p) => {
                    let raw = std::fs::read_to_string(&p).map_err(|e| Error::storage(&p, e))?;
                    serde_json::from_str(&raw).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => SynthSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            if let Some(n) = n_cliques {
                spec.n_cliques = n;
            }
            let manifest = synth_dataset(&spec, &out)?;
            let cliques: std::collections::HashSet<&str> =
                manifest.records.iter().map(|r| r.clique_id.as_str()).collect();
            Ok(json!({
                "manifest": path_str(&out.join("manifest.jsonl")),
                "tracks": manifest.records.len(),
                "cliques": cliques.len(),
            }))
        }
        Command::Manifest {
            action: ManifestAction::Validate { manifest },
        } => {
            let m = manifest.load()?;
            let report = validate_manifest(&m);
            let issues = serde_json::to_value(&report.issues).expect("issues serialize");
            if report.has_errors() {
                let first = report.errors().next().expect("has errors");
                return Err(Error::Validation(format!(
                    "{} error(s), first: {}",
                    report.errors().count(),
                    first.message
                )));
            }
            Ok(json!({ "valid": true, "tracks": m.records.len(), "d": m.d, "issues": issues }))
        }
        Command::Train {
            config,
            manifest,
            out,
            seed,
        } => {
            let m = manifest.load()?;
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let report = validate_manifest(&m);
            if let Some(issue) = report.errors().next() {
                return Err(Error::Validation(format!("manifest: {}", issue.message)));
            }
            for w in report.warnings() {
                log::warn!("{}", w.message);
            }
            let outcome = train(&cfg, &LatentStore::new(m), Some(&out))?;
            Ok(json!({
                "checkpoint": outcome.checkpoint.as_deref().map(path_str),
                "history": path_str(&out.join(HISTORY_FILE)),
                "epochs": outcome.history.epochs.len(),
                "best_epoch": outcome.history.best_epoch,
                "best_val_map": outcome.history.best_val_map,
                "stopped_reason": outcome.history.stopped_reason,
            }))
        }
        Command::Embed {
            ckpt,
            manifest,
            split,
            overlap,
            k,
            out,
        } => {
            if !(0.0..1.0).contains(&overlap) || k == 0 {
                return Err(Error::Validation("overlap must lie in [0, 1) and k must be positive".into()));
            }
            let m = manifest.load()?;
            let (params, config) = load_checkpoint(&ckpt)?;
            if config.d_in != m.d {
                return Err(Error::Validation(format!(
                    "checkpoint expects d = {}, dataset has d = {}",
                    config.d_in, m.d
                )));
            }
            let ids = split_ids(&m, split)?;
            let store = LatentStore::new(m);
            let embs = embed_tracks(&params, &config, &store, &ids, k, overlap)?;
            let chunks: usize = embs.values().map(Vec::len).sum();
            let dm = distance_matrix(&embs, &ids, &ids)?;
            write_distances(&dm, &out)?;
            Ok(json!({ "distances": path_str(&out), "tracks": ids.len(), "chunks": chunks }))
        }
        Command::Eval {
            distances,
            manifest,
            per_query,
        } => {
            let m = manifest.load()?;
            let dm = read_distances(&distances)?;
            let report = map_eval(&dm, &m)?;
            let mut v = json!({
                "map": report.map,
                "ci_halfwidth": report.ci_halfwidth,
                "n_queries": report.n_queries,
            });
            if per_query {
                v["per_query_ap"] = json!(report.per_query_ap);
            }
            Ok(v)
        }
        Command::Baseline {
            system,
            manifest,
            split,
            out,
            seed,
            rules,
        } => {
            let m = manifest.load()?;
            let ids = split_ids(&m, split)?;
            let (name, dm) = match system {
                BaselineKind::Tfidf => {
                    let model = tfidf_fit(
                        m.split(split)
                            .map(|r| (r.track_id.as_str(), r.transcription.as_deref())),
                    )?;
                    ("tfidf", tfidf_distance_matrix(&model, &ids, &ids)?)
                }
                BaselineKind::Avgemb => ("avgemb", avgemb_distance_matrix(&LatentStore::new(m.clone()), &ids)?),
                BaselineKind::Random => ("random", random_baseline(&ids, seed)),
                BaselineKind::Oracle => {
                    let rules = match rules {
                        Some(p) => OracleRules::load(p)?,
                        None => OracleRules::default(),
                    };
                    let validity: HashMap<String, bool> = m
                        .split(split)
                        .map(|r| (r.track_id.clone(), rules.check(r.transcription.as_deref()).valid))
                        .collect();
                    ("oracle", oracle_distance_matrix(&m, &ids, &validity)?)
                }
            };
            write_distances(&dm, &out)?;
            Ok(json!({ "system": name, "distances": path_str(&out), "tracks": ids.len() }))
        }
        Command::Fuse {
            audio,
            lyrics,
            alpha,
            out,
            align,
        } => {
            let a = read_distances(&audio)?;
            let mut l = read_distances(&lyrics)?;
            if align {
                l = align_matrices(&a, &l)?.1;
            }
            let fused = fuse(&a, &l, alpha)?;
            write_distances(&fused, &out)?;
            Ok(json!({ "distances": path_str(&out), "alpha": alpha }))
        }
        Command::SweepAlpha {
            audio,
            lyrics,
            manifest,
            min,
            max,
            step,
        } => {
            let m = manifest.load()?;
            let a: DistanceMatrix = read_distances(&audio)?;
            let l = align_matrices(&a, &read_distances(&lyrics)?)?.1;
            let points = sweep_alpha(min, max, step, &a, &l, &m.clique_labels())?;
            let best = points
                .iter()
                .fold(None::<&wealy_core::fusion::SweepPoint>, |b, p| match b {
                    Some(b) if b.map >= p.map => Some(b),
                    _ => Some(p),
                })
                .expect("non-empty grid");
            Ok(json!({ "best_alpha": best.alpha, "best_map": best.map, "points": points }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    wealy_core::init_thread_pool();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
