//! End-to-end runs of the `harmon` binary on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use harmon::nets::container::content_hash;

const TINY: &str = r#"
schema_version = 1

[data]
n_train = 2
n_val = 1
n_phantom = 1
shape = { depth = 8, height = 14, width = 16 }

[preprocess]
slice_count = 4
stride = 1
canvas = 16

[train]
batch_size = 2
iterations = 6
checkpoint_every = 3
model = { n_sites = 3, canvas = 16, width_mult = 0.0625, res_blocks = 1 }

[harmonize]
batch = 4
montage_rows = 2

[eval]
n_styles = 2
n_refs = 2
batch = 8
"#;

struct Run {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
    config: PathBuf,
}

impl Run {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().to_path_buf();
        let config = dir.join("tiny.toml");
        let text = format!(
            "output_dir = {:?}\n{}",
            dir.join("out").to_string_lossy(),
            TINY.replace("[data]", &format!("[data]\nroot = {:?}", dir.join("data").to_string_lossy()))
        );
        fs::write(&config, text).unwrap();
        Run { _tmp: tmp, dir, config }
    }

    fn harmon(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_harmon"));
        cmd.arg("--config").arg(&self.config).args(args).env("RUST_LOG", "warn");
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let out = self.harmon(args);
        assert!(out.status.success(), "harmon {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    }

    fn out(&self) -> PathBuf {
        self.dir.join("out")
    }

    fn final_ckpt(&self) -> PathBuf {
        self.out().join("checkpoints/final.ckpt")
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn full_pipeline() {
    let run = Run::new();
    run.ok(&["synth-data"]);
    assert!(run.dir.join("data/manifest.json").exists());
    run.ok(&["preprocess"]);
    for split in ["train", "val", "phantom"] {
        assert!(run.out().join(format!("samples/{split}.bin")).exists());
    }
    run.ok(&["train"]);
    assert!(run.final_ckpt().exists());
    assert!(run.out().join("checkpoints/iter_00000003.ckpt").exists());
    let log = fs::read_to_string(run.out().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);

    run.ok(&["harmonize", "--mode", "site", "--target", "1", "--seed", "4"]);
    let site_dir = run.out().join("harmonized/site1");
    assert!(site_dir.join("manifest.json").exists());
    assert!(site_dir.join("montage.png").exists());

    let manifest = json(&run.dir.join("data/manifest.json"));
    let entry = manifest["volumes"].as_array().unwrap().iter().find(|e| e["site_id"] == 1).unwrap();
    let reference = run.dir.join("data").join(entry["path"].as_str().unwrap());
    run.ok(&["harmonize", "--mode", "ref", "--reference", reference.to_str().unwrap(), "--ref-agg", "first"]);
    assert!(run.out().join("harmonized/reference/manifest.json").exists());

    run.ok(&["interpolate", "--from-site", "0", "--to-site", "2", "--betas", "0,0.5,1"]);
    let betas = json(&run.out().join("interpolate/betas.json"));
    assert_eq!(betas, serde_json::json!([0.0, 0.5, 1.0]));

    run.ok(&["evaluate"]);
    let report = json(&run.out().join("eval/report.json"));
    assert_eq!(report["pairs"].as_array().unwrap().len(), 6);
    assert!(run.out().join("eval/report.txt").exists());

    let manifest = json(&run.out().join("manifest_evaluate.json"));
    let hash = content_hash(&run.final_ckpt()).unwrap();
    assert!(manifest.to_string().contains(&hash), "evaluate manifest lacks the checkpoint hash");
    for cmd in ["synth_data", "preprocess", "train", "harmonize", "interpolate"] {
        assert!(run.out().join(format!("manifest_{cmd}.json")).exists(), "missing manifest for {cmd}");
    }
}

#[test]
fn resume_matches_uninterrupted_training() {
    let run = Run::new();
    run.ok(&["synth-data"]);
    run.ok(&["preprocess"]);
    run.ok(&["train"]);
    let straight = content_hash(&run.final_ckpt()).unwrap();

    let mid = run.out().join("checkpoints/iter_00000003.ckpt");
    let kept = run.dir.join("iter3.ckpt");
    fs::copy(&mid, &kept).unwrap();
    fs::remove_dir_all(run.out().join("checkpoints")).unwrap();
    run.ok(&["train", "--resume", kept.to_str().unwrap()]);
    assert_eq!(content_hash(&run.final_ckpt()).unwrap(), straight);
}

#[test]
fn set_overrides_config_file() {
    let run = Run::new();
    run.ok(&["--set", "data.n_train=1", "--set", "data.n_val=0", "--set", "data.n_phantom=0", "synth-data"]);
    let manifest = json(&run.dir.join("data/manifest.json"));
    assert_eq!(manifest["volumes"].as_array().unwrap().len(), 3);
}

#[test]
fn exit_codes() {
    let run = Run::new();
    assert_eq!(code(&run.harmon(&["--set", "train.no_such_key=1", "train"])), 2);
    assert_eq!(code(&run.harmon(&["--set", "train.model.canvas=20", "train"])), 2);
    assert_eq!(code(&run.harmon(&["--set", "schema_version=9", "synth-data"])), 2);
    assert_eq!(code(&run.harmon(&["harmonize", "--mode", "sideways"])), 2);
    assert_eq!(code(&run.harmon(&["--bogus-flag"])), 2);

    assert_eq!(code(&run.harmon(&["preprocess"])), 5, "preprocess without a dataset");
    run.ok(&["synth-data"]);
    run.ok(&["preprocess"]);
    assert_eq!(code(&run.harmon(&["harmonize"])), 5, "harmonize without a checkpoint");
    assert_eq!(code(&run.harmon(&["evaluate", "--checkpoint", "/nonexistent.ckpt"])), 5);

    let garbage = run.dir.join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(code(&run.harmon(&["train", "--resume", garbage.to_str().unwrap()])), 3);

    let bad = run.dir.join("bad.toml");
    fs::write(&bad, "[train\nbatch_size = ").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_harmon")).arg("--config").arg(&bad).arg("train").output().unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn nan_learning_rate_is_a_config_error() {
    let run = Run::new();
    assert_eq!(code(&run.harmon(&["--set", "train.learning_rate=nan", "train"])), 2);
}

#[test]
fn shipped_configs_parse() {
    for name in ["desk.toml", "smoke.toml"] {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
        harmon::config::RunConfig::load(Some(&path), &[]).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}
