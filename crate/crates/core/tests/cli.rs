// SPDX-License-Identifier: Apache-2.0

//! End-to-end checks of the `sfseg` binary on a tiny configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sfseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfseg"))
        .args(args)
        .output()
        .expect("spawn sfseg")
}

fn ok(args: &[&str]) -> String {
    let out = sfseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    sfseg(args).status.code().unwrap()
}

const TINY: &str = r#"{
  "synth": {"n_images": {"source_train": 4, "source_val": 3, "target_train": 4, "target_test": 3},
            "image_size": 16, "blob_radius": [3.0, 5.0], "blobs_per_image": [1, 1]},
  "train": {"arch": {"widths": [4, 8, 8, 8], "feature_channels": 8},
            "epochs": 1, "source_epochs": 1, "batch_size": 2, "viz_samples": 1,
            "fcl": {"min_region_pixels": 4}}
}"#;

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
        Fixture { dir }
    }
    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
    fn s(&self, name: &str) -> String {
        self.p(name).to_str().unwrap().to_owned()
    }
    fn data(&self) -> String {
        let cfg = self.s("tiny.json");
        ok(&["generate-data", "--config", &cfg, "--out", &self.s("data")]);
        self.s("data")
    }
    fn pretrained(&self) -> (String, String) {
        let data = self.data();
        let cfg = self.s("tiny.json");
        ok(&["pretrain", "--config", &cfg, "--data", &data, "--out", &self.s("pre")]);
        (data, self.s("pre/model.ckpt"))
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            for (n, b) in files(&p) {
                out.push((format!("{}/{n}", p.file_name().unwrap().to_string_lossy()), b));
            }
        } else {
            out.push((p.file_name().unwrap().to_string_lossy().into(), std::fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn generate_data_writes_all_splits_deterministically() {
    let f = Fixture::new();
    let cfg = f.s("tiny.json");
    ok(&["generate-data", "--config", &cfg, "--seed", "7", "--out", &f.s("a")]);
    ok(&["generate-data", "--config", &cfg, "--seed", "7", "--out", &f.s("b")]);
    for split in ["source_train", "source_val", "target_train", "target_test"] {
        assert!(f.p("a").join(split).join("images").is_dir(), "{split}");
    }
    assert_eq!(files(&f.p("a")), files(&f.p("b")));
    ok(&["generate-data", "--config", &cfg, "--seed", "8", "--out", &f.s("c")]);
    assert_ne!(files(&f.p("a")), files(&f.p("c")));
}

#[test]
fn usage_errors_exit_with_two() {
    let f = Fixture::new();
    std::fs::write(f.p("bad_radius.json"), r#"{"synth": {"blob_radius": [0.0, 5.0]}}"#).unwrap();
    std::fs::write(f.p("unknown.json"), r#"{"train": {"betta": 1.0}}"#).unwrap();
    assert_eq!(code(&["generate-data", "--config", &f.s("bad_radius.json"), "--out", &f.s("x")]), 2);
    assert_eq!(code(&["generate-data", "--config", &f.s("unknown.json"), "--out", &f.s("y")]), 2);
    assert_eq!(code(&["adapt", "--data", &f.s("d"), "--out", &f.s("z")]), 2);
    assert_eq!(code(&["adapt", "--data", &f.s("d"), "--source-ckpt", "c", "--ablation", "none", "--out", "z"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
}

#[test]
fn refuses_non_empty_output_directory() {
    let f = Fixture::new();
    std::fs::create_dir(f.p("busy")).unwrap();
    std::fs::write(f.p("busy/keep"), "x").unwrap();
    assert_eq!(code(&["generate-data", "--config", &f.s("tiny.json"), "--out", &f.s("busy")]), 2);
    assert_eq!(std::fs::read_to_string(f.p("busy/keep")).unwrap(), "x");
}

#[test]
fn pretrain_adapt_evaluate_visualize() {
    let f = Fixture::new();
    let (data, src) = f.pretrained();
    let cfg = f.s("tiny.json");
    assert!(f.p("pre/resolved_config.json").exists());

    ok(&["adapt", "--config", &cfg, "--data", &data, "--source-ckpt", &src,
         "--ablation", "no-fcl", "--beta", "0.5", "--out", &f.s("ad")]);
    let resolved: serde_json::Value =
        serde_json::from_slice(&std::fs::read(f.p("ad/resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["ablation"], "no_fcl");
    assert_eq!(resolved["train"]["beta"], 0.5);
    assert!(f.p("ad/model.ckpt").exists());

    let stdout = ok(&["evaluate", "--data", &data, "--ckpt", &f.s("ad/model.ckpt"), "--out", &f.s("ev")]);
    assert!(stdout.contains("dice"));
    let csv = std::fs::read_to_string(f.p("ev/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 + 1, "{csv}");
    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(f.p("ev/report.json")).unwrap()).unwrap();
    assert_eq!(json["n_images"], 3);

    ok(&["visualize", "--data", &data, "--ckpt", &src, "--limit", "2", "--out", &f.s("viz")]);
    let names: Vec<String> = files(&f.p("viz")).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names.len(), 4);
    assert!(names.iter().all(|n| n.ends_with("_heat.png") || n.ends_with("_entropy.png")));
}

#[test]
fn single_point_sweep_writes_csv_and_plot() {
    let f = Fixture::new();
    let (data, src) = f.pretrained();
    let stdout = ok(&["sweep", "--config", &f.s("tiny.json"), "--data", &data, "--source-ckpt", &src,
                      "--betas", "1", "--gammas", "1", "--out", &f.s("sw")]);
    assert!(stdout.contains("spread"));
    for name in ["sweep.csv", "sweep.json", "sweep.svg"] {
        assert!(f.p("sw").join(name).exists(), "{name}");
    }
    assert_eq!(std::fs::read_to_string(f.p("sw/sweep.csv")).unwrap().lines().count(), 2);
}
