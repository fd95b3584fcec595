use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fewseg_core::backbone::BackboneConfig;
use fewseg_core::data::CorpusConfig;
use fewseg_core::harness::TrainConfig;
use fewseg_core::model::ModelConfig;

fn fewseg(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_fewseg")).args(args).env("RUST_LOG", "warn").output().unwrap();
    out
}

fn ok(args: &[&str]) -> String {
    let out = fewseg(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Corpus directory plus a trained tiny checkpoint.
struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["datagen", "--seed", "3", "--scenes", "12", "--block-points", "128", "--out", s(&data)]);
    let cfg = TrainConfig {
        iterations: 4,
        corpus: CorpusConfig { n_scenes: 12, block_points: 128, ..Default::default() },
        model: ModelConfig {
            backbone: BackboneConfig { k: 6, width: 8, d_out: 8, n_blocks: 2 },
            n_prototypes: 6,
            n_registers: 2,
            decoder_blocks: 2,
            text_dim: 16,
            ..Default::default()
        },
        eval_episodes: 4,
        ..TrainConfig::default()
    };
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    ok(&["train", "--config", s(&cfg_path), "--iterations", "5", "--data", s(&data), "--out", s(&run)]);
    Fixture { _dir: dir, data, run }
}

#[test]
fn datagen_train_eval_round_trip() {
    let f = fixture();
    assert!(f.data.join("corpus.json").exists());
    let metrics = std::fs::read_to_string(f.run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    assert!(metrics.starts_with("iter,L_seg"));
    let saved: TrainConfig = serde_json::from_str(&std::fs::read_to_string(f.run.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved.iterations, 5);

    let ckpt = f.run.join("checkpoint.epck");
    let report = f.run.join("eval.jsonl");
    let stdout = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&f.data), "--episodes", "3", "--out", s(&report)]);
    assert!(stdout.contains("m-IoU"));
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&f.data), "--episodes", "3", "--zero-shot", "--out", s(&report)]);
    let lines: Vec<serde_json::Value> =
        std::fs::read_to_string(&report).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["support_reads"], 0);
    assert!(lines.iter().all(|l| l["m_iou"].as_f64().is_some_and(|m| (0.0..=1.0).contains(&m))));
}

#[test]
fn zeroshot_spectrum_and_params() {
    let f = fixture();
    let ckpt = f.run.join("checkpoint.epck");
    let block = f.data.join("block_00000.epc");
    let labels = f.run.join("labels.csv");
    ok(&["zeroshot", "--checkpoint", s(&ckpt), "--query", s(&block), "--classes", "chair,lamp", "--data", s(&f.data), "--out", s(&labels)]);
    let csv = std::fs::read_to_string(&labels).unwrap();
    assert!(csv.starts_with("point,label,p_background,p_chair,p_lamp\n"));
    assert_eq!(csv.lines().count(), 129);

    let spec = f.run.join("spectrum.csv");
    let stdout = ok(&["spectrum", "--checkpoint", s(&ckpt), "--data", s(&f.data), "--out", s(&spec)]);
    assert!(stdout.contains("high-band fraction"));
    assert_eq!(std::fs::read_to_string(&spec).unwrap().lines().count(), 1 + 128 / 2 + 1);

    let params = ok(&["params", "--checkpoint", s(&ckpt)]);
    assert!(params.lines().last().unwrap().starts_with("total,"));
    assert!(ok(&["params"]).contains("backbone,"));
}

#[test]
fn bad_arguments_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = fewseg(&["train", "--disable", "nonsense", "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(!fewseg(&["eval", "--checkpoint", "/nonexistent.epck", "--out", s(&dir.path().join("x"))]).status.success());
    assert!(!fewseg(&["datagen", "--classes", "40", "--out", s(dir.path())]).status.success());
}
