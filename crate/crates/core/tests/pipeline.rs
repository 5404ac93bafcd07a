//! Synthetic data through every stage: validation, reference systems,
//! training, checkpoint reload, embedding, evaluation and fusion.

use wealy_core::baselines::{avgemb_distance_matrix, tfidf_distance_matrix, tfidf_fit};
use wealy_core::encoder::checkpoint::load_checkpoint;
use wealy_core::encoder::EncoderConfig;
use wealy_core::feature_store::{validate_manifest, DatasetManifest, LatentStore, Split};
use wealy_core::fusion::{fuse, sweep_alpha};
use wealy_core::retrieval::{
    distance_matrix, embed_tracks, map_eval, oracle_distance_matrix, random_baseline, read_distances,
    write_distances, OracleRules,
};
use wealy_core::synth::{synth_dataset, SynthSpec};
use wealy_core::trainer::{train, TrainConfig};

fn small_spec() -> SynthSpec {
    SynthSpec {
        n_cliques: 40,
        seed: 12,
        ..Default::default()
    }
}

#[test]
fn synthetic_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_dataset(&small_spec(), dir.path().join("data")).unwrap();
    let reloaded = DatasetManifest::load(dir.path().join("data/manifest.jsonl")).unwrap();
    assert_eq!(reloaded.records, manifest.records);
    assert!(validate_manifest(&manifest).is_empty());

    let store = LatentStore::new(manifest.clone());
    let test: Vec<String> = manifest.split(Split::Test).map(|r| r.track_id.clone()).collect();

    let rules = OracleRules::default();
    let validity = manifest
        .split(Split::Test)
        .map(|r| (r.track_id.clone(), rules.check(r.transcription.as_deref()).valid))
        .collect();
    let oracle = oracle_distance_matrix(&manifest, &test, &validity).unwrap();
    assert_eq!(map_eval(&oracle, &manifest).unwrap().map, 1.0);

    let raw = map_eval(&avgemb_distance_matrix(&store, &test).unwrap(), &manifest).unwrap();
    let random = map_eval(&random_baseline(&test, 1), &manifest).unwrap();
    let model = tfidf_fit(
        manifest
            .split(Split::Test)
            .map(|r| (r.track_id.as_str(), r.transcription.as_deref())),
    )
    .unwrap();
    let lyrics = tfidf_distance_matrix(&model, &test, &test).unwrap();
    let tfidf = map_eval(&lyrics, &manifest).unwrap();
    assert!(random.map < raw.map && random.map < tfidf.map, "{random:?} {raw:?} {tfidf:?}");

    let cfg = TrainConfig {
        lr_base: 3e-3,
        warmup_epochs: 1,
        max_epochs: 3,
        batch_size: 16,
        k: 64,
        encoder: EncoderConfig {
            d_in: 32,
            d_h: 16,
            n_blocks: 1,
            n_heads: 2,
            d_ffn: 32,
            d_e: 8,
            ..Default::default()
        },
        ..Default::default()
    };
    let run = dir.path().join("run");
    let outcome = train(&cfg, &store, Some(&run)).unwrap();
    assert_eq!(outcome.history.epochs.len(), 3);
    let (params, enc) = load_checkpoint(outcome.checkpoint.as_ref().unwrap()).unwrap();
    assert_eq!(enc, cfg.encoder);
    assert_eq!(params, outcome.params);

    let embs = embed_tracks(&params, &enc, &store, &test, cfg.k, 0.9).unwrap();
    assert!(embs.values().all(|chunks| !chunks.is_empty()));
    let audio = distance_matrix(&embs, &test, &test).unwrap();
    let path = dir.path().join("audio.wdst");
    write_distances(&audio, &path).unwrap();
    let audio = read_distances(&path).unwrap();
    let trained = map_eval(&audio, &manifest).unwrap();
    assert!((0.0..=1.0).contains(&trained.map));

    assert_eq!(fuse(&audio, &lyrics, 0.0).unwrap(), audio);
    let sweep = sweep_alpha(0.0, 1.0, 0.5, &audio, &lyrics, &manifest.clique_labels()).unwrap();
    assert_eq!(sweep.len(), 3);
    assert_eq!(sweep[0].map, trained.map);
}

#[test]
fn training_rejects_mismatched_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_dataset(&small_spec(), dir.path()).unwrap();
    let cfg = TrainConfig {
        warmup_epochs: 1,
        max_epochs: 2,
        ..Default::default()
    };
    assert!(train(&cfg, &LatentStore::new(manifest), None).is_err());
}
