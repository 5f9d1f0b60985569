use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn pgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pgan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run pgan")
}

fn run_ok(args: &[&str]) -> Output {
    let out = pgan(args);
    assert!(
        out.status.success(),
        "pgan {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn smoke(cmd: &[&str], out: &Path, extra: &[&str]) -> Output {
    let cfg = smoke_config();
    let mut args = vec![
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    args.extend_from_slice(cmd);
    run_ok(&args)
}

/// Every file under `dir`, keyed by relative path.
fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn gen_data_writes_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    smoke(&["gen-data"], dir.path(), &[]);
    let ann: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("train/annotations.json")).unwrap())
            .unwrap();
    let first = &ann.as_array().unwrap()[0];
    assert!(first["image_id"].is_u64() && first["class_id"].is_u64());
    assert_eq!(first["box"].as_array().unwrap().len(), 4);
    assert!(dir.path().join("train/proposals.json").is_file());
    assert!(dir.path().join("train/img_0.ppm").is_file());
    assert!(dir.path().join("test/img_6.ppm").is_file());
    assert!(dir.path().join("config.json").is_file());
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = pgan(&["--out", dir.path().to_str().unwrap(), "gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("usage"));

    let missing = dir.path().join("nope.json");
    let out = pgan(&["--config", missing.to_str().unwrap(), "gen-data"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_values_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let out_dir = dir.path().to_str().unwrap();
    let out = pgan(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir,
        "--set",
        "train.momentum=1.5",
        "gen-data",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = pgan(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir,
        "--set",
        "bogus.key=1",
        "gen-data",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_exits_two() {
    assert_eq!(pgan(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(pgan(&["--help"]).status.code(), Some(0));
}

#[test]
fn eval_without_a_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let out = pgan(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "eval",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn resume_continues_the_log_bit_exact() {
    let full = tempfile::tempdir().unwrap();
    smoke(&["train-gan"], full.path(), &[]);
    let full_log = fs::read_to_string(full.path().join("train_log.csv")).unwrap();
    assert!(full.path().join("round_1.ckpt").is_file());
    assert!(full.path().join("round_2.ckpt").is_file());
    assert!(!full.path().join("round_3.ckpt").exists());

    let resumed = tempfile::tempdir().unwrap();
    let ckpt = full.path().join("round_1.ckpt");
    smoke(
        &["train-gan", "--resume", ckpt.to_str().unwrap()],
        resumed.path(),
        &[],
    );
    let tail = fs::read_to_string(resumed.path().join("train_log.csv")).unwrap();

    let full_rows: Vec<&str> = full_log.lines().collect();
    let tail_rows: Vec<&str> = tail.lines().collect();
    assert_eq!(full_rows[0], tail_rows[0], "header");
    // one generator and one adversarial row per round
    assert_eq!(full_rows.len(), 1 + 6);
    assert_eq!(tail_rows.len(), 1 + 4);
    assert_eq!(&full_rows[3..], &tail_rows[1..]);
    assert_eq!(
        fs::read(full.path().join("model.ckpt")).unwrap(),
        fs::read(resumed.path().join("model.ckpt")).unwrap()
    );
}

fn pipeline(out: &Path) {
    smoke(&["gen-data"], out, &[]);
    smoke(&["pretrain"], out, &[]);
    smoke(&["train-gan"], out, &[]);
    let eval = smoke(&["eval"], out, &[]);
    let stdout = String::from_utf8(eval.stdout).unwrap();
    assert!(stdout.starts_with("bucket,recall,accuracy,num_gt,num_det\n"));
    assert!(stdout.lines().any(|l| l.starts_with("lamr=")));
    smoke(&["viz-features", "--count", "2", "--scale", "4"], out, &[]);
}

#[test]
fn every_command_is_idempotent() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    for name in [
        "config.json",
        "pretrain.ckpt",
        "pretrain_log.csv",
        "model.ckpt",
        "train_log.csv",
        "detections.json",
        "metrics.csv",
        "curves.csv",
        "lamr.txt",
        "viz/proposal_0.ppm",
        "viz/proposal_1.ppm",
    ] {
        assert!(ta.contains_key(name), "missing {name}");
    }
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        assert!(v == &tb[k], "{k} differs between runs");
    }
}

#[test]
fn seed_flag_changes_the_data() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    smoke(&["gen-data"], a.path(), &["--seed", "1"]);
    smoke(&["gen-data"], b.path(), &["--seed", "2"]);
    let read = |d: &Path| fs::read(d.join("train/annotations.json")).unwrap();
    assert_ne!(read(a.path()), read(b.path()));
}
