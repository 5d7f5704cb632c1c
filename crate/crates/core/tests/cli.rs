use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use msseg::cli::decode_labels;
use msseg::dataset::{load_manifest, load_split, Split};
use msseg::metrics::{confusion, Scores};
use msseg::trainer::{score_predictions, PredictMode, StepLog};
use msseg::volume::load_volume;
use sha2::{Digest, Sha256};

const CONFIG: &str = r#"{
  "data": {"sources": [
    {"name": "a", "rng_seed": 1, "samples": 5, "labeled": true, "test_samples": 2, "volume_dims": [16,16,16], "num_teeth": 2},
    {"name": "b", "rng_seed": 2, "samples": 5, "test_samples": 2, "volume_dims": [16,16,16], "num_teeth": 2,
     "transform": {"intensity_offset": 100, "noise_stddev": 50}},
    {"name": "c", "rng_seed": 3, "samples": 5, "test_samples": 2, "volume_dims": [16,16,16], "num_teeth": 2,
     "transform": {"intensity_offset": 400, "intensity_scale": 0.6, "noise_stddev": 120}}
  ]},
  "model": {"base_channels": 2, "depth": 2},
  "train": {"epochs": 2, "batch_size": 2},
  "analyze": {"kde_samples_per_volume": 512, "projection": {"method": "tsne", "perplexity": 2, "iterations": 150, "seed": 0}}
}"#;

fn msseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msseg")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = msseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("cfg.json");
    fs::write(&config, CONFIG).unwrap();
    Workspace { _dir: dir, root, config }
}

fn generate(w: &Workspace, name: &str) -> PathBuf {
    let ds = w.root.join(name);
    ok(&["generate", "--config", s(&w.config), "--out", s(&ds)]);
    ds
}

fn digests(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, hex::encode(Sha256::digest(fs::read(&p).unwrap()))));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_counts_labels_and_determinism() {
    let w = workspace();
    let a = generate(&w, "a");
    let b = generate(&w, "b");
    let m = load_manifest(&a).unwrap();
    let train: Vec<_> = m.split(Split::Train).collect();
    assert_eq!(train.len(), 15);
    assert_eq!(fs::read_dir(a.join("volumes")).unwrap().filter(|e| {
        e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ms3t")
    }).count(), 21);
    for e in &train {
        // flags word sits right after the magic and version
        let bytes = fs::read(a.join(&e.file)).unwrap();
        let flags = u16::from_le_bytes([bytes[6], bytes[7]]);
        assert_eq!(flags & 1 == 1, e.source_id == "a", "{}", e.sample_id);
    }
    assert_eq!(digests(&a), digests(&b));

    let again = msseg(&["generate", "--config", s(&w.config), "--out", s(&a)]);
    assert_eq!(again.status.code(), Some(3));
    ok(&["generate", "--config", s(&w.config), "--out", s(&a), "--force"]);
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let w = workspace();
    assert_eq!(msseg(&["train", "--dataset", "x", "--run", "y", "--ablation", "exp9"]).status.code(), Some(2));
    assert_eq!(msseg(&["bogus"]).status.code(), Some(2));
    let missing = w.root.join("nothing");
    assert_eq!(msseg(&["partition", "--dataset", s(&missing)]).status.code(), Some(3));
    let bad = msseg(&["generate", "--config", s(&w.config), "--set", "train.gamma=4", "--out", s(&missing)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn exp1_logs_only_supervised_loss() {
    let w = workspace();
    let ds = generate(&w, "ds");
    ok(&["partition", "--dataset", s(&ds)]);
    let run = w.root.join("run1");
    ok(&["train", "--config", s(&w.config), "--dataset", s(&ds), "--run", s(&run), "--ablation", "exp1", "--epochs", "1"]);
    let log = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert!(!log.is_empty());
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("l_u").is_none() && v.get("l_h").is_none(), "{line}");
        let l: StepLog = serde_json::from_value(v).unwrap();
        assert_eq!(l.l_sup, l.l_total);
    }
}

#[test]
fn pipeline_train_evaluate_analyze() {
    let w = workspace();
    let ds = generate(&w, "ds");
    ok(&["partition", "--dataset", s(&ds), "--mixed-fraction", "0.5"]);
    let run = w.root.join("run");
    ok(&["train", "--config", s(&w.config), "--dataset", s(&ds), "--run", s(&run), "--ablation", "exp5"]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(run.join("report.json")).unwrap()).unwrap();
    let final_step = report["final_step"].as_u64().unwrap();
    assert!(run.join(format!("ckpt/step-{final_step}/manifest.json")).exists());
    assert!(run.join("config.json").exists() && run.join("partition.json").exists());

    // refuses to clobber, resumes to the same place
    assert_eq!(
        msseg(&["train", "--config", s(&w.config), "--dataset", s(&ds), "--run", s(&run), "--ablation", "exp5"]).status.code(),
        Some(3)
    );
    ok(&["train", "--config", s(&w.config), "--dataset", s(&ds), "--run", s(&run), "--ablation", "exp5", "--resume"]);

    let preds = w.root.join("preds");
    let eval_path = w.root.join("eval.json");
    ok(&["evaluate", "--run", s(&run), "--dataset", s(&ds), "--mode", "ensemble", "--out", s(&eval_path), "--predictions", s(&preds)]);
    let eval: serde_json::Value = serde_json::from_slice(&fs::read(&eval_path).unwrap()).unwrap();
    for k in ["mIoU", "Dice", "Recall", "Acc"] {
        let v = eval[k].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&v), "{k} = {v}");
    }
    assert_eq!(eval["step"].as_u64(), Some(final_step));

    // offline recomputation from the saved predictions
    let m = load_manifest(&ds).unwrap();
    let test = load_split(&ds, &m, Split::Test).unwrap();
    let vols: Vec<_> = test.iter().collect();
    let pred: Vec<Vec<u16>> = test
        .iter()
        .map(|v| decode_labels(&fs::read(preds.join(format!("{}.pred", v.sample_id))).unwrap()).unwrap())
        .collect();
    let again = score_predictions(&vols, &pred, 2, final_step, PredictMode::Ensemble).unwrap();
    assert_eq!(serde_json::to_value(&again).unwrap(), eval);

    // a prediction equal to the ground truth scores perfectly
    let gt: Vec<Vec<u16>> = test.iter().map(|v| v.labels.clone().unwrap()).collect();
    let perfect = score_predictions(&vols, &gt, 2, 0, PredictMode::Main).unwrap().overall;
    assert_eq!((perfect.miou, perfect.dice, perfect.recall, perfect.accuracy), (100.0, 100.0, 100.0, 100.0));

    let untrained = w.root.join("eval0.json");
    ok(&["evaluate", "--run", s(&run), "--dataset", s(&ds), "--checkpoint", s(&run.join("ckpt/step-0")), "--out", s(&untrained)]);
    let e0: serde_json::Value = serde_json::from_slice(&fs::read(&untrained).unwrap()).unwrap();
    assert_eq!(e0["step"].as_u64(), Some(0));

    let an = w.root.join("an");
    let an2 = w.root.join("an2");
    ok(&["analyze", "--config", s(&w.config), "--dataset", s(&ds), "--run", s(&run), "--out", s(&an)]);
    ok(&["analyze", "--config", s(&w.config), "--dataset", s(&ds), "--run", s(&run), "--out", s(&an2)]);
    let a: serde_json::Value = serde_json::from_slice(&fs::read(an.join("analysis.json")).unwrap()).unwrap();
    assert!(a["untrained"]["separability"].is_f64() && a["trained"]["separability"].is_f64());
    assert_eq!(a["kde"].as_array().unwrap().len(), 3);
    for f in ["kde.svg", "profiles.svg", "embedding-untrained.svg", "embedding-trained.svg"] {
        assert!(an.join(f).exists(), "{f}");
    }
    assert_eq!(digests(&an), digests(&an2));
}

#[test]
fn analyze_single_source_errors() {
    let w = workspace();
    let one = w.root.join("one.json");
    let cfg: serde_json::Value = serde_json::from_str(CONFIG).unwrap();
    let mut single = cfg.clone();
    single["data"]["sources"] = serde_json::json!([cfg["data"]["sources"][0]]);
    fs::write(&one, single.to_string()).unwrap();
    let ds = w.root.join("ds");
    ok(&["generate", "--config", s(&one), "--out", s(&ds)]);
    let an = w.root.join("an");
    let out = msseg(&["analyze", "--config", s(&one), "--dataset", s(&ds), "--out", s(&an)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("2 sources"));
    let a: serde_json::Value = serde_json::from_slice(&fs::read(an.join("analysis.json")).unwrap()).unwrap();
    assert_eq!(a["kde"].as_array().unwrap().len(), 1);
}

#[test]
fn saved_volume_matches_manifest_entry() {
    let w = workspace();
    let ds = generate(&w, "ds");
    let m = load_manifest(&ds).unwrap();
    let e = &m.entries[0];
    let v = load_volume(&ds.join(&e.file)).unwrap();
    assert_eq!(v.sample_id, e.sample_id);
    let c = confusion(v.labels.as_ref().unwrap(), v.labels.as_ref().unwrap(), 2).unwrap();
    assert_eq!(Scores::from_counts(&c, false).dice, 100.0);
}
