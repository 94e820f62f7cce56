mod common;

use std::path::Path;
use std::process::{Command, Output};

use anomaly_rectify::config::RunConfig;
use anomaly_rectify::dataio::{array_to_rgb, make_synthetic_dataset, write_dataset};
use common::tiny_run_toml;

fn afr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("AFR_CACHE")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, tiny_run_toml(extra)).unwrap();
    p.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn print_config_emits_loadable_toml() {
    for args in [&["print-config"][..], &["print-config", "--desk"]] {
        let o = afr(args);
        assert_eq!(o.status.code(), Some(0));
        let cfg: RunConfig = toml::from_str(&stdout(&o)).unwrap();
        cfg.validate().unwrap();
    }
}

#[test]
fn help_lists_config_keys_and_exit_codes() {
    let o = afr(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for needle in ["AFR_CACHE", "average_image_stages", "Exit codes", "print-config"] {
        assert!(text.contains(needle), "help lacks {needle}");
    }
}

#[test]
fn bad_flag_is_a_usage_error() {
    assert_eq!(afr(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(afr(&["ablate", "everything"]).status.code(), Some(2));
}

#[test]
fn train_writes_checkpoints_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("out");
    let o = afr(&["--config", &cfg, "--out", out.to_str().unwrap(), "train"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("checkpoints/last/manifest.txt").is_file());
    assert!(out.join("config.toml").is_file());
    let log = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\"kind\":\"epoch\"")).count(), 2);
}

#[test]
fn same_dataset_for_train_and_test_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run_toml("").replace("synthetic-b", "synthetic-a");
    let p = dir.path().join("run.toml");
    std::fs::write(&p, cfg).unwrap();
    let out = dir.path().join("out");
    for cmd in ["train", "eval", "ablate"] {
        let mut args = vec!["--config", p.to_str().unwrap(), "--out", out.to_str().unwrap(), cmd];
        if cmd == "ablate" {
            args.push("m");
        }
        assert_eq!(afr(&args).status.code(), Some(2), "{cmd}");
    }
    assert!(!out.join("checkpoints").exists());
}

#[test]
fn missing_dataset_root_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let extra = format!(
        "\n[data.test]\nkind = \"folder\"\nid = \"elsewhere\"\nroot = \"{}\"\n",
        dir.path().join("absent").display()
    );
    let toml = tiny_run_toml("").replace(
        "[data.test]\nid = \"synthetic-b\"\nclasses = [\"blobs\", \"rings\"]\nper_class = 4\n",
        "",
    ) + &extra;
    let p = dir.path().join("run.toml");
    std::fs::write(&p, toml).unwrap();
    let o = afr(&["--config", p.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap(), "eval"]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn invalid_config_value_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "\n[score]\ntemperature = -1.0\n");
    assert_eq!(afr(&["--config", &cfg, "print-config"]).status.code(), Some(2));
}

#[test]
fn predict_keeps_native_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let ds = make_synthetic_dataset(3, 1, 2, 40);
    let img = image::imageops::resize(&array_to_rgb(&ds.samples[0].image), 50, 30, image::imageops::FilterType::Triangle);
    let path = dir.path().join("wide.png");
    img.save(&path).unwrap();
    let out = dir.path().join("pred");
    let o = afr(&["--config", &cfg, "--out", out.to_str().unwrap(), "predict", path.to_str().unwrap(), "--class", "bolt"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let score: f64 = std::fs::read_to_string(out.join("wide_score.txt")).unwrap().trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&score));
    let heat = image::open(out.join("wide_heatmap.png")).unwrap();
    assert_eq!((heat.width(), heat.height()), (50, 30));
}

#[test]
fn unreadable_image_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let bogus = dir.path().join("bogus.png");
    std::fs::write(&bogus, b"not an image").unwrap();
    let out = dir.path().join("pred");
    for image in [bogus, dir.path().join("absent.png")] {
        let o = afr(&["--config", &cfg, "--out", out.to_str().unwrap(), "predict", image.to_str().unwrap(), "--class", "x"]);
        assert_eq!(o.status.code(), Some(1));
    }
}

#[test]
fn manifest_without_masks_reports_image_level_only() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_synthetic_dataset(9, 1, 3, 32);
    let mut manifest = write_dataset(&ds, &dir.path().join("tree"), "test").unwrap();
    manifest.records.iter_mut().for_each(|r| r.mask = None);
    let mpath = dir.path().join("plates.txt");
    manifest.save(&mpath).unwrap();
    let toml = tiny_run_toml("").replace(
        "[data.test]\nid = \"synthetic-b\"\nclasses = [\"blobs\", \"rings\"]\nper_class = 4\n",
        &format!("[data.test]\nkind = \"manifest\"\nroot = \"{}\"\n", mpath.display()),
    );
    let p = dir.path().join("run.toml");
    std::fs::write(&p, toml).unwrap();
    let out = dir.path().join("eval");
    let o = afr(&["--config", p.to_str().unwrap(), "--out", out.to_str().unwrap(), "eval"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2, "{csv}");
    assert!(lines[1].starts_with("plates,image,"));
}

#[test]
fn ablate_window_sweep_reports_three_variants() {
    let dir = tempfile::tempdir().unwrap();
    // an 8 x 8 patch grid admits every window width
    let p = dir.path().join("run.toml");
    std::fs::write(&p, tiny_run_toml("").replace("image_size = 32", "image_size = 32\npatch_size = 4")).unwrap();
    let cfg = p.to_str().unwrap();
    let out = dir.path().join("abl");
    let o = afr(&["--config", cfg, "--out", out.to_str().unwrap(), "ablate", "m"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let mut names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    names.dedup();
    assert_eq!(names, ["m1", "m3", "m5"]);
}
