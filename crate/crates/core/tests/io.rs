use std::fs;
use std::path::Path;
use std::process::Command;

use metacrl::config::{parse_config_str, ExperimentConfig, Mode};
use metacrl::error::Error;
use metacrl::io::{
    decode_checkpoint, emit_metrics, encode_checkpoint, load_checkpoint, read_matrix_csv, read_metrics, save_checkpoint,
    RunManifest, CHECKPOINT_VERSION,
};
use metacrl::meta::MetricsRow;
use metacrl::models::ModelBundle;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_metacrl"))
}

fn rows(n: usize) -> Vec<MetricsRow> {
    (0..n)
        .map(|i| MetricsRow {
            iteration: i,
            split: "query".into(),
            pred_loss: 1.0 / (i as f64 + 3.0),
            score: 0.1 * i as f64,
            dm_xi: 1e-17 * i as f64,
            dm_fgr: -0.3,
            seconds: 0.0,
        })
        .collect()
}

#[test]
fn metrics_files_have_header_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    emit_metrics(&[], &p).unwrap();
    assert_eq!(fs::read_to_string(&p).unwrap().lines().count(), 1);
    emit_metrics(&rows(3), &p).unwrap();
    let text = fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert_eq!(
        text.lines().next().unwrap(),
        "iteration,split,pred-loss,score,l-dm-xi,l-dm-fgr,seconds"
    );
    assert_eq!(read_metrics(&p).unwrap(), rows(3));
    assert!(emit_metrics(&rows(1), Path::new("/nonexistent/dir/m.csv")).is_err());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    for mode in [Mode::Plain, Mode::Causal] {
        let cfg = ExperimentConfig {
            mode,
            ..ExperimentConfig::default()
        };
        let b = ModelBundle::init(&cfg, 4).unwrap();
        let p = dir.path().join("a.bin");
        save_checkpoint(&b, &cfg, &p).unwrap();
        let (ck, warning) = load_checkpoint(&p, Some(&cfg)).unwrap();
        assert!(warning.is_none());
        assert!(ck.bundle.value_eq(&b));
        assert_eq!(ck.config, cfg);
        let q = dir.path().join("b.bin");
        save_checkpoint(&ck.bundle, &ck.config, &q).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
    }
}

#[test]
fn mismatched_config_warns_but_loads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::default();
    let b = ModelBundle::init(&cfg, 0).unwrap();
    let p = dir.path().join("c.bin");
    save_checkpoint(&b, &cfg, &p).unwrap();
    let other = ExperimentConfig {
        outer_lr: 0.5,
        ..cfg
    };
    let (ck, warning) = load_checkpoint(&p, Some(&other)).unwrap();
    assert!(warning.unwrap().contains("warning"));
    assert!(ck.bundle.value_eq(&b));
}

#[test]
fn corrupt_checkpoints_rejected() {
    let cfg = ExperimentConfig::default();
    let b = ModelBundle::init(&cfg, 0).unwrap();
    let bytes = encode_checkpoint(&b, &cfg).unwrap();

    // Config length field sits right after magic, version and mode tag.
    let mut tampered = bytes.clone();
    tampered[13] = tampered[13].wrapping_add(1);
    assert!(matches!(decode_checkpoint(&tampered), Err(Error::Checkpoint(_))));

    let mut version = bytes.clone();
    version[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    match decode_checkpoint(&version) {
        Err(Error::CheckpointVersion { expected, found }) => {
            assert_eq!((expected, found), (CHECKPOINT_VERSION, CHECKPOINT_VERSION + 1))
        }
        other => panic!("{other:?}"),
    }
    assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    assert!(decode_checkpoint(b"not a checkpoint").is_err());
}

#[test]
fn manifest_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::classification_defaults();
    let mut m = RunManifest::new("train", &cfg);
    m.outputs.push("metrics.csv".into());
    let p = m.finish(dir.path()).unwrap();
    let back: RunManifest = metacrl::io::read_json(&p).unwrap();
    assert_eq!(back.config, cfg);
    assert_eq!(parse_config_str(&back.config.to_toml()).unwrap(), cfg);
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("cfg.toml");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn cli_unknown_subcommand_prints_usage() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn cli_reports_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[causal]\nlamda1 = 0.4\n");
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda1"));
    assert!(!dir.path().join("o").join("manifest.json").exists());
}

#[test]
fn cli_train_export_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "iterations = 5\neval_tasks = 4\n[net]\nencoder = [8, 8]\nn_k = 5\n");
    let before = fs::read(&cfg).unwrap();
    let run = |sub: &[&str], out: &str| {
        let o = bin()
            .args(sub)
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path().join(out))
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    run(&["train"], "t1");
    run(&["train"], "t2");
    for f in ["metrics.csv", "checkpoint.bin", "eval.json"] {
        assert_eq!(
            fs::read(dir.path().join("t1").join(f)).unwrap(),
            fs::read(dir.path().join("t2").join(f)).unwrap(),
            "{f}"
        );
    }
    let manifest: RunManifest = metacrl::io::read_json(&dir.path().join("t1/manifest.json")).unwrap();
    for f in &manifest.outputs {
        assert!(dir.path().join("t1").join(f).exists());
    }
    assert_eq!(read_metrics(&dir.path().join("t1/metrics.csv")).unwrap().len(), 6);

    let ck = dir.path().join("t1/checkpoint.bin");
    let ck_bytes = fs::read(&ck).unwrap();
    let ck_arg = ck.to_str().unwrap();
    run(&["export-gram", "--checkpoint", ck_arg], "g");
    let gram = read_matrix_csv(&dir.path().join("g/gram.csv")).unwrap();
    assert_eq!(gram.len(), 5);
    assert!(gram.iter().all(|r| r.len() == 5));
    run(&["eval", "--checkpoint", ck_arg], "e");
    assert_eq!(read_metrics(&dir.path().join("e/metrics.csv")).unwrap().len(), 1);
    assert_eq!(fs::read(&ck).unwrap(), ck_bytes);
    assert_eq!(fs::read(&cfg).unwrap(), before);
}

#[test]
fn cli_plain_checkpoint_has_no_gram() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "iterations = 2\neval_tasks = 2\nmode = \"plain\"\n");
    let o = bin()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("p"))
        .output()
        .unwrap();
    assert!(o.status.success());
    let o = bin()
        .args(["export-gram", "--checkpoint"])
        .arg(dir.path().join("p/checkpoint.bin"))
        .arg("--out")
        .arg(dir.path().join("g"))
        .output()
        .unwrap();
    assert!(!o.status.success());
}

#[test]
fn cli_gradcheck_and_theorem1() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["gradcheck", "--nets", "5", "--out"])
        .arg(dir.path().join("gc"))
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("10/10 passed"));
    let o = bin()
        .args(["theorem1", "--seed", "2", "--out"])
        .arg(dir.path().join("t"))
        .output()
        .unwrap();
    assert!(o.status.success());
    let reports: serde_json::Value = metacrl::io::read_json(&dir.path().join("t/theorem1.json")).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 9);
    assert!(dir.path().join("t/manifest.json").exists());
}
