mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::tiny_config;
use facecomp::codebook::CodebookKind;
use facecomp::toolkit::io::{parse_codebook_dump, parse_tensor_dump, FEATURE_MAGIC, FLOW_MAGIC};
use facecomp::toolkit::MetricReport;

fn facecomp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facecomp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = facecomp(&["train", "--bogus"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&facecomp(&["no-such-command"])), 2);
    assert_eq!(code(&facecomp(&["--help"])), 0);
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\nn_scales = 0\n").unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&facecomp(&["gen-data", "--out", s(&data), "--videos", "2", "--frames", "2"])), 0);
    let o = facecomp(&["train", "--data", s(&data), "--out", s(&dir.path().join("run")), "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    std::fs::write(&cfg, "[model]\nno_such_key = 1\n").unwrap();
    let o = facecomp(&["train", "--data", s(&data), "--out", s(&dir.path().join("run")), "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = facecomp(&[
        "dump-codebook",
        "--checkpoint",
        s(&dir.path().join("missing.safetensors")),
        "--kind",
        "motion",
        "--out",
        s(&dir.path().join("cb.bin")),
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let run = root.join("run");
    let cfg_path = root.join("tiny.toml");
    tiny_config().save(&cfg_path).unwrap();

    let ok = |args: &[&str]| {
        let o = facecomp(args);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    ok(&["gen-data", "--out", s(&data), "--videos", "3", "--frames", "3", "--size", "32", "--test-fraction", "0.34"]);
    ok(&["train", "--data", s(&data), "--out", s(&run), "--config", s(&cfg_path), "--steps", "2"]);
    let ckpt = run.join("checkpoint.safetensors");
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    // Resume to step 3 appends one more log line.
    ok(&["train", "--data", s(&data), "--out", s(&run), "--resume", s(&ckpt), "--steps", "3"]);
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let rec = root.join("rec");
    ok(&["reconstruct", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&rec)]);
    let report: MetricReport = serde_json::from_str(&std::fs::read_to_string(rec.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report.videos.len(), 2);
    assert!(report.aggregate.aed.is_some());
    assert!(rec.join("v0001").join("0002.png").exists());

    // Scoring the reconstruction from disk agrees with the report written alongside it.
    let ev = root.join("ev.json");
    ok(&["eval", "--generated", s(&rec), "--ground-truth", s(&data), "--checkpoint", s(&ckpt), "--out", s(&ev)]);
    let again: MetricReport = serde_json::from_str(&std::fs::read_to_string(&ev).unwrap()).unwrap();
    assert!((again.aggregate.l1 - report.aggregate.l1).abs() < 1e-9);
    assert!((again.aggregate.psnr - report.aggregate.psnr).abs() < 1e-9);

    // Identical folders: PSNR cap, zero L1 and zero AKD.
    let same = root.join("same.json");
    ok(&["eval", "--generated", s(&data), "--ground-truth", s(&data), "--out", s(&same)]);
    let same: MetricReport = serde_json::from_str(&std::fs::read_to_string(&same).unwrap()).unwrap();
    assert_eq!(same.aggregate.psnr, facecomp::toolkit::metrics::PSNR_CAP);
    assert_eq!(same.aggregate.l1, 0.0);
    assert_eq!(same.aggregate.akd, Some(0.0));

    let src = data.join("v0000").join("0000.png");
    let reen = root.join("reenact");
    ok(&["reenact", "--checkpoint", s(&ckpt), "--source", s(&src), "--driving", s(&data.join("v0001")), "--out", s(&reen)]);
    assert!(reen.join("0002.png").exists());

    let flows = root.join("flows");
    ok(&["dump-flows", "--checkpoint", s(&ckpt), "--source", s(&src), "--driving", s(&data.join("v0000").join("0001.png")), "--out", s(&flows)]);
    for name in ["m0_0000", "mr1_0000", "mr2_0000", "m1_0000", "m2_0000"] {
        assert!(flows.join(format!("{name}.png")).exists(), "{name}");
        let (magic, dims, values) = parse_tensor_dump(&std::fs::read(flows.join(format!("{name}.bin"))).unwrap()).unwrap();
        assert_eq!(magic, FLOW_MAGIC);
        assert_eq!(dims, vec![1, 32, 32, 2]);
        assert_eq!(values.len(), 32 * 32 * 2);
    }

    let feats = root.join("feats");
    ok(&["dump-features", "--checkpoint", s(&ckpt), "--source", s(&src), "--driving", s(&src), "--out", s(&feats)]);
    for name in ["fw1_0000", "fc1_0000", "fw2_0000", "fc2_0000"] {
        let (magic, dims, _) = parse_tensor_dump(&std::fs::read(feats.join(format!("{name}.bin"))).unwrap()).unwrap();
        assert_eq!(magic, FEATURE_MAGIC);
        assert_eq!(dims, vec![1, 4, 4, 8]);
        assert!(feats.join(format!("{name}.png")).exists());
    }

    let cb = root.join("cb.bin");
    ok(&["dump-codebook", "--checkpoint", s(&ckpt), "--kind", "appearance", "--out", s(&cb)]);
    let bytes = std::fs::read(&cb).unwrap();
    assert_eq!(&bytes[..4], b"FCCB");
    let (kind, n, dim, codes) = parse_codebook_dump(&bytes).unwrap();
    assert_eq!((kind, n, dim, codes.len()), (CodebookKind::Appearance, 8, 8, 64));
}
