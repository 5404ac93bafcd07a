use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn wealy(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wealy"))
        .args(args)
        .env("WEALY_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn json_line(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "status {:?}, stderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout.clone()).unwrap();
    assert_eq!(stdout.lines().count(), 1, "one result line: {stdout}");
    serde_json::from_str(stdout.trim()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, seed: &str) -> String {
    let v = json_line(&wealy(&["synth", "--out", s(dir), "--n-cliques", "30", "--seed", seed]));
    v["manifest"].as_str().unwrap().to_owned()
}

#[test]
fn oracle_eval_prints_map_one() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "4");
    let v = json_line(&wealy(&["manifest", "validate", "--manifest", &manifest]));
    assert_eq!(v["valid"], true);
    let dm = dir.path().join("oracle.wdst");
    json_line(&wealy(&["baseline", "oracle", "--manifest", &manifest, "--out", s(&dm)]));
    let v = json_line(&wealy(&["eval", "--distances", s(&dm), "--manifest", &manifest]));
    assert_eq!(v["map"].as_f64().unwrap(), 1.0);
    assert!(v["n_queries"].as_u64().unwrap() > 0);
}

#[test]
fn fuse_with_zero_alpha_copies_audio_payload() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "5");
    let audio = dir.path().join("audio.wdst");
    let lyrics = dir.path().join("lyrics.wdst");
    let fused = dir.path().join("fused.wdst");
    json_line(&wealy(&["baseline", "avgemb", "--manifest", &manifest, "--out", s(&audio)]));
    json_line(&wealy(&["baseline", "tfidf", "--manifest", &manifest, "--out", s(&lyrics)]));
    json_line(&wealy(&[
        "fuse", "--audio", s(&audio), "--lyrics", s(&lyrics), "--alpha", "0", "--out", s(&fused),
    ]));
    assert_eq!(std::fs::read(&audio).unwrap(), std::fs::read(&fused).unwrap());

    let v = json_line(&wealy(&[
        "sweep-alpha", "--audio", s(&audio), "--lyrics", s(&lyrics), "--manifest", &manifest, "--min", "0",
        "--max", "2", "--step", "0.5",
    ]));
    assert_eq!(v["points"].as_array().unwrap().len(), 5);
    assert!(v["best_map"].as_f64().unwrap() >= v["points"][0]["map"].as_f64().unwrap());
}

#[test]
fn seeded_subcommands_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = synth(a.path(), "9");
    synth(b.path(), "9");
    assert_eq!(
        std::fs::read(a.path().join("manifest.jsonl")).unwrap(),
        std::fs::read(b.path().join("manifest.jsonl")).unwrap()
    );
    let r1 = a.path().join("r1.wdst");
    let r2 = a.path().join("r2.wdst");
    for r in [&r1, &r2] {
        json_line(&wealy(&["baseline", "random", "--manifest", &ma, "--seed", "3", "--out", s(r)]));
    }
    assert_eq!(std::fs::read(&r1).unwrap(), std::fs::read(&r2).unwrap());
}

#[test]
fn train_then_embed_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "6");
    let config = dir.path().join("train.json");
    std::fs::write(
        &config,
        r#"{"max_epochs": 2, "warmup_epochs": 1, "batch_size": 8, "k": 32,
            "encoder": {"d_in": 32, "d_h": 16, "n_blocks": 1, "n_heads": 2, "d_ffn": 32, "d_e": 8}}"#,
    )
    .unwrap();
    let run = dir.path().join("run");
    let v = json_line(&wealy(&[
        "train", "--config", s(&config), "--manifest", &manifest, "--out", s(&run), "--seed", "1",
    ]));
    assert_eq!(v["epochs"], 2);
    let ckpt = v["checkpoint"].as_str().unwrap().to_owned();
    let dm = dir.path().join("test.wdst");
    json_line(&wealy(&[
        "embed", "--ckpt", &ckpt, "--manifest", &manifest, "--k", "32", "--overlap", "0.5", "--out", s(&dm),
    ]));
    let v = json_line(&wealy(&["eval", "--distances", s(&dm), "--manifest", &manifest]));
    let map = v["map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
}

#[test]
fn missing_manifest_exits_one_naming_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(&dir.path().join("x.wdst")).to_owned();
    for args in [
        vec!["baseline", "random", "--out", out.as_str()],
        vec!["baseline", "random", "--out", out.as_str(), "--manifest", "/nonexistent/m.jsonl"],
        vec!["manifest", "validate"],
    ] {
        let o = wealy(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("--manifest"));
        assert!(o.stdout.is_empty());
    }
}

#[test]
fn io_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "7");
    let garbage = dir.path().join("garbage.wdst");
    std::fs::write(&garbage, b"not a matrix").unwrap();
    let o = wealy(&["eval", "--distances", s(&garbage), "--manifest", &manifest]);
    assert_eq!(o.status.code(), Some(2));
    let o = wealy(&["eval", "--distances", "/nonexistent.wdst", "--manifest", &manifest]);
    assert_eq!(o.status.code(), Some(2));

    let o = wealy(&["eval", "--bogus-flag"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--bogus-flag"));

    let o = wealy(&["embed", "--ckpt", "x", "--manifest", &manifest, "--overlap", "1.0", "--out", "y"]);
    assert_eq!(o.status.code(), Some(1));
}
