//! Runs every `sh` block of the README, in order, in one scratch directory.

use std::path::{Path, PathBuf};
use std::process::Command;

fn readme_script() -> String {
    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md")).unwrap();
    let mut script = String::new();
    let mut inside = false;
    for line in text.lines() {
        if inside {
            if line.trim_start().starts_with("```") {
                inside = false;
            } else {
                script += line;
                script.push('\n');
            }
        } else if line.trim() == "```sh" {
            inside = true;
        }
    }
    script
}

fn bin_dir() -> PathBuf {
    Path::new(env!("CARGO_BIN_EXE_unloadlab")).parent().unwrap().to_path_buf()
}

#[test]
fn readme_commands_succeed() {
    let script = readme_script();
    assert!(script.lines().filter(|l| l.starts_with("unloadlab ") || l.contains(" unloadlab ")).count() >= 10);
    let dir = tempfile::tempdir().unwrap();
    let path = format!("{}:{}", bin_dir().display(), std::env::var("PATH").unwrap_or_default());
    let out = Command::new("sh")
        .args(["-eu", "-c", &script])
        .current_dir(dir.path())
        .env("PATH", path)
        .env_remove("UNLOADLAB_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "README script failed:\n{}", String::from_utf8_lossy(&out.stderr));

    let d = dir.path();
    let read = |p: &str| std::fs::read_to_string(d.join(p)).unwrap();
    let manifest = read("d/manifest.jsonl");
    let header: serde_json::Value = serde_json::from_str(&read("d/dataset.json")).unwrap();
    let failures = header["failures"].as_array().unwrap().len();
    assert_eq!(manifest.lines().count() + failures, 16);
    assert!(manifest.lines().count() >= 15);
    for run in ["cycle-on", "cycle-off"] {
        let h = read(&format!("runs/{run}/history.csv"));
        assert!(h.starts_with("epoch,train_loss,val_loss,lr,wall_s\n"));
        assert_eq!(h.lines().count(), 6);
    }
    let metrics = read("runs/cycle-on/eval/metrics.csv");
    let cols: Vec<&str> = metrics.lines().next().unwrap().split(',').collect();
    for c in ["DSC", "HD_cm", "MD_cm", "SD_cm", "infer_s", "inverse_fe_s"] {
        assert!(cols.contains(&c), "missing column {c}");
    }
    assert_eq!(read("runs/ablation/ablation.csv").lines().count(), 4);
    for f in ["fe/unloaded.json", "fe/inflated.vtk", "pred/predicted_unloaded.json", "runs/pca/pca.json", "runs/pca/eval/metrics.json", "runs/lovo/model.ckpt", "d3/shapes.json"] {
        assert!(d.join(f).exists(), "{f} missing");
    }
    let lovo: serde_json::Value = serde_json::from_str(&read("runs/lovo/model.ckpt")).unwrap();
    let ids = lovo["labeled_ids"].as_array().unwrap();
    assert!(ids.iter().all(|i| !i.as_str().unwrap().contains("_P12_")));
}
