//! Drives the `mgg` binary end to end on small generated datasets.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mgg::pgm;
use serde_json::{json, Value};
use tempfile::TempDir;

fn mgg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgg")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A generated 100-sample dataset plus a config that trains on it briefly.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let out = mgg(&["gen-data", "--count", "100", "--out", "data"], dir.path());
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let f = Self { dir };
        f.write_config("run.json", |_| {});
        f
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn config(&self) -> Value {
        json!({
            "model": {"backbone": "synthetic_32", "n_attrs": 12, "groups": "data/groups.csv"},
            "training": {"mode": "plain", "batch_size": 16, "schedule": [[2, 0.01], [1, 0.001]], "seed": 5},
            "data": {"manifest": "data/manifest.csv"},
            "output": "out"
        })
    }

    fn write_config(&self, name: &str, edit: impl FnOnce(&mut Value)) -> PathBuf {
        let mut cfg = self.config();
        edit(&mut cfg);
        let path = self.path().join(name);
        fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        path
    }

    fn run(&self, args: &[&str]) -> Output {
        mgg(args, self.path())
    }

    fn train(&self, config: &str, out: &str) {
        let o = self.run(&["train", "--config", config, "--out", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
}

fn epoch_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir.join("loss")).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files
}

#[test]
fn gradcheck_passes_and_catches_a_broken_rule() {
    let dir = tempfile::tempdir().unwrap();
    let ok = mgg(&["gradcheck"], dir.path());
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    let text = String::from_utf8_lossy(&ok.stdout);
    assert!(text.contains("max rel. err."), "{text}");
    let bad = mgg(&["gradcheck", "--inject-fault", "conv2d:1.5"], dir.path());
    assert_eq!(code(&bad), 1);
}

#[test]
fn gen_data_writes_requested_count() {
    let f = Fixture::new();
    let images = fs::read_dir(f.path().join("data/images")).unwrap().count();
    assert_eq!(images, 100);
    let manifest = fs::read_to_string(f.path().join("data/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 101);
}

#[test]
fn schedule_sets_epoch_count_and_term_count() {
    let f = Fixture::new();
    f.train("run.json", "out");
    let files = epoch_files(&f.path().join("out"));
    assert_eq!(files.len(), 3);
    for file in &files {
        let text = fs::read_to_string(file).unwrap();
        // header + 2N(B+1) terms + total, with N = 12 and B = 2
        let terms = text.lines().skip(1).filter(|l| !l.starts_with("total")).count();
        assert_eq!(terms, 2 * 12 * 3, "{}", file.display());
        assert!(text.lines().skip(1).all(|l| l.starts_with("bce/") || l.starts_with("total")));
    }
    let totals = fs::read_to_string(f.path().join("out/loss_totals.csv")).unwrap();
    assert_eq!(totals.lines().count(), 4);
    for name in ["checkpoint/manifest.csv", "val_report.csv", "config.json"] {
        assert!(f.path().join("out").join(name).exists(), "{name}");
    }
}

#[test]
fn balanced_mode_logs_weighted_terms() {
    let f = Fixture::new();
    f.write_config("bal.json", |c| c["training"]["mode"] = json!("balanced"));
    f.train("bal.json", "out");
    let text = fs::read_to_string(&epoch_files(&f.path().join("out"))[0]).unwrap();
    let labels: Vec<&str> = text.lines().skip(1).filter(|l| !l.starts_with("total")).collect();
    assert!(!labels.is_empty());
    assert!(labels.iter().all(|l| l.starts_with("weighted_bce/")), "{text}");
}

#[test]
fn identical_runs_are_bit_identical() {
    let f = Fixture::new();
    f.train("run.json", "a");
    f.train("run.json", "b");
    let mut names: Vec<PathBuf> = Vec::new();
    for sub in ["loss", "checkpoint"] {
        for e in fs::read_dir(f.path().join("a").join(sub)).unwrap() {
            names.push(Path::new(sub).join(e.unwrap().file_name()));
        }
    }
    names.push("loss_totals.csv".into());
    assert!(names.len() > 40);
    for n in names {
        assert_eq!(
            fs::read(f.path().join("a").join(&n)).unwrap(),
            fs::read(f.path().join("b").join(&n)).unwrap(),
            "{}",
            n.display()
        );
    }
}

#[test]
fn seed_flag_changes_the_run() {
    let f = Fixture::new();
    f.train("run.json", "a");
    let o = f.run(&["train", "--config", "run.json", "--out", "b", "--seed", "99"]);
    assert_eq!(code(&o), 0);
    let a = fs::read(f.path().join("a/loss_totals.csv")).unwrap();
    let b = fs::read(f.path().join("b/loss_totals.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn malformed_config_exits_2() {
    let f = Fixture::new();
    fs::write(f.path().join("bad.json"), "{\"model\": ").unwrap();
    assert_eq!(code(&f.run(&["train", "--config", "bad.json"])), 2);
    f.write_config("empty.json", |c| c["training"]["schedule"] = json!([]));
    assert_eq!(code(&f.run(&["train", "--config", "empty.json"])), 2);
    f.write_config("unknown.json", |c| c["training"]["lr"] = json!(0.1));
    assert_eq!(code(&f.run(&["train", "--config", "unknown.json"])), 2);
    assert_eq!(code(&f.run(&["train", "--config", "missing.json"])), 2);
}

#[test]
fn missing_manifest_exits_3() {
    let f = Fixture::new();
    f.write_config("nodata.json", |c| c["data"]["manifest"] = json!("nowhere/manifest.csv"));
    assert_eq!(code(&f.run(&["train", "--config", "nodata.json"])), 3);
    f.train("run.json", "out");
    let o = f.run(&["eval", "--config", "run.json", "--checkpoint", "out/checkpoint", "--manifest", "nowhere.csv"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn divergence_exits_4_and_writes_nothing() {
    let f = Fixture::new();
    f.write_config("nan.json", |c| c["training"]["schedule"] = json!([[2, 1e300]]));
    let o = f.run(&["train", "--config", "nan.json", "--out", "nan"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("diverged") && err.contains("non-finite"), "{err}");
    assert!(!f.path().join("nan").exists());
    let leftovers: Vec<_> = fs::read_dir(f.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with('.'))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn checkpoint_shape_mismatch_exits_5() {
    let f = Fixture::new();
    f.train("run.json", "out");
    f.write_config("wide.json", |c| {
        c["model"]["backbone"] = json!({
            "input": {"channels": 3, "height": 32, "width": 32},
            "blocks": [
                {"out_channels": 8, "conv_count": 1, "downsample": 2},
                {"out_channels": 16, "conv_count": 1, "downsample": 2},
                {"out_channels": 16, "conv_count": 1, "downsample": 1},
                {"out_channels": 24, "conv_count": 1, "downsample": 2}
            ],
            "tap_blocks": [3, 4]
        })
    });
    let o = f.run(&["eval", "--config", "wide.json", "--checkpoint", "out/checkpoint"]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    assert!(!f.path().join("out/eval_report.csv").exists());
}

#[test]
fn attention_export_writes_one_pgm_per_block_and_group() {
    let f = Fixture::new();
    f.train("run.json", "out");
    let o = f.run(&[
        "export-attention",
        "--config",
        "run.json",
        "--checkpoint",
        "out/checkpoint",
        "--samples",
        "7",
        "--out",
        "masks",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut names: Vec<String> =
        fs::read_dir(f.path().join("masks")).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    assert_eq!(names.len(), 8);
    // synthetic_32 taps block 3 at 8x8 and block 4 at 4x4
    for b in [3usize, 4] {
        for g in 0..4 {
            let name = format!("mask_b{b}_g{g}_s7.pgm");
            let bytes = fs::read(f.path().join("masks").join(&name)).unwrap();
            assert!(bytes.starts_with(b"P5"));
            let img = pgm::decode(&bytes).unwrap();
            let side = if b == 3 { 8 } else { 4 };
            assert_eq!((img.width, img.height), (side, side), "{name}");
            assert_eq!(img.pixels.len(), side * side);
        }
    }
}

#[test]
fn attention_export_rejects_unknown_ids() {
    let f = Fixture::new();
    f.train("run.json", "out");
    let o = f.run(&[
        "export-attention",
        "--config",
        "run.json",
        "--checkpoint",
        "out/checkpoint",
        "--samples",
        "7,100000",
        "--out",
        "masks",
    ]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("100000"));
    assert!(!f.path().join("masks").exists());
}

#[test]
fn affinity_export_writes_one_matrix_per_block() {
    let f = Fixture::new();
    f.train("run.json", "out");
    let o = f.run(&["export-affinity", "--config", "run.json", "--checkpoint", "out/checkpoint", "--out", "aff"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let files = fs::read_dir(f.path().join("aff")).unwrap().count();
    assert_eq!(files, 2);
    let groups = ["Hairline", "Eyes", "Nose", "Mouth"];
    for b in [3, 4] {
        let text = fs::read_to_string(f.path().join(format!("aff/affinity_b{b}.csv"))).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), format!(",{}", groups.join(",")));
        let mut values = Vec::new();
        for (i, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells[0], groups[i]);
            let row: Vec<f64> = cells[1..].iter().map(|c| c.parse().unwrap()).collect();
            assert_eq!(row[i], 0.0);
            values.extend(row.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| *v));
        }
        assert_eq!(values.len(), 12);
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
    }
}

#[test]
fn affinity_export_needs_samples() {
    let f = Fixture::new();
    f.train("run.json", "out");
    fs::create_dir_all(f.path().join("empty")).unwrap();
    let header = fs::read_to_string(f.path().join("data/manifest.csv")).unwrap().lines().next().unwrap().to_string();
    fs::write(f.path().join("empty/manifest.csv"), header + "\n").unwrap();
    let o =
        f.run(&["export-affinity", "--config", "run.json", "--checkpoint", "out/checkpoint", "--manifest", "empty/manifest.csv"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}
