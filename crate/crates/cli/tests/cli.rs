use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn msunet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msunet")).args(args).env_remove("MSUNET_DETERMINISTIC").output().unwrap()
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = msunet(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_and_usage_errors() {
    let help = msunet(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["generate-data", "make-edge-labels", "train", "finetune-denoise", "evaluate", "sweep", "render-overlays"] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
    assert_eq!(msunet(&["frobnicate"]).status.code(), Some(2));
    let missing = msunet(&["evaluate", "--data", "d", "--out", "o"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("--checkpoint"));
    assert_eq!(msunet(&["train", "--data", "d", "--out", "o", "--bogus"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = msunet(&["evaluate", "--checkpoint", "missing.ckpt", "--data", "nowhere", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].as_str().unwrap().contains("missing.ckpt"));
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let m = ok(&["generate-data", "--out", p(&data), "--cases", "4", "--val-cases", "2", "--test-cases", "3", "--noise", "0.05"]);
    assert_eq!(m["num_classes"], 3);
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(data.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "generate-data");

    let edges = dir.path().join("edges");
    let e = ok(&["make-edge-labels", "--input", p(&data), "--out", p(&edges)]);
    assert_eq!(e["files"], 9);
    assert!(edges.join("train/edges/case_0000.msua").exists());

    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"model": {"backbone": {"embed_dim": 8, "num_heads": [1, 1, 2, 2]}}, "loss": {"edge_start_epoch": 1}}"#).unwrap();
    let train = dir.path().join("train");
    let s = ok(&["train", "--data", p(&data), "--out", p(&train), "--config", p(&cfg), "--epochs", "2", "--batch-size", "2"]);
    assert_eq!(s["finished"], true);
    assert_eq!(s["steps"], 4);
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(train.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["config"]["model"]["backbone"]["embed_dim"], 8);
    assert_eq!(run["inputs"].as_object().unwrap().len(), 2);
    let ckpt = train.join("best.ckpt");

    let eval = dir.path().join("eval");
    let r = ok(&["evaluate", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&eval), "--percentile", "95"]);
    assert_eq!(r["cases"], 3);
    assert_eq!(r["hd_metric"], "hd95");
    let csv = fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2);

    let ft = dir.path().join("ft");
    let f = ok(&["finetune-denoise", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&ft), "--epochs", "1", "--lr", "0.01"]);
    assert_eq!(f["phase"], "DENOISE_FT");
    let again = msunet(&["finetune-denoise", "--checkpoint", p(&ft.join("last.ckpt")), "--data", p(&data), "--out", p(&ft)]);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("DENOISE_FT"));

    let o1 = dir.path().join("o1");
    let o2 = dir.path().join("o2");
    for o in [&o1, &o2] {
        let r = ok(&["render-overlays", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(o)]);
        assert_eq!(r["files"].as_array().unwrap().len(), 3);
    }
    for id in ["case_0000", "case_0001", "case_0002"] {
        let a = o1.join(format!("{id}.png"));
        assert_eq!(sha(&a), sha(&o2.join(format!("{id}.png"))));
    }
}
