use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use latentlight::config::RunConfig;
use latentlight::dirsearch::DirectionSet;
use latentlight::render::{Rgb8, GUTTER};

fn latentlight(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latentlight")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a small config into `dir` and returns its path.
fn small_config(dir: &Path, n_samples: usize) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.generator.resolution = 32;
    cfg.train.m = 4;
    cfg.train.n_samples = n_samples;
    cfg.eval.n_scenes = 3;
    cfg.eval.n_distinction = 4;
    cfg.eval.n_shift = 64;
    cfg.eval.inversion_restarts = 1;
    cfg.eval.inversion_steps = 20;
    cfg.eval.inversion_targets = 1;
    cfg.output_dir = dir.join("default-out");
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json().unwrap()).unwrap();
    path
}

fn train(dir: &Path, config: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("run");
    let mut args = vec!["train", "--config", s(config), "--out-dir", s(&out)];
    args.extend_from_slice(extra);
    let o = latentlight(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn missing_config_is_a_usage_error_naming_the_path() {
    let o = latentlight(&["train", "--config", "/nonexistent/cfg.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/cfg.json"), "{}", stderr(&o));
}

#[test]
fn unknown_config_field_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"train": {"m": 2, "bogus": true}}"#).unwrap();
    let o = latentlight(&["train", "--config", s(&path)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"), "{}", stderr(&o));
}

#[test]
fn bad_arguments_exit_with_usage_code() {
    assert_eq!(latentlight(&["render-grid"]).status.code(), Some(2));
    assert_eq!(latentlight(&["frobnicate"]).status.code(), Some(2));
    assert!(latentlight(&["--help"]).status.success());
}

#[test]
fn untrained_run_writes_unit_norm_directions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 0);
    let out = train(dir.path(), &cfg, &["--mode", "recolor"]);
    let set = DirectionSet::load(&out.join("directions.json")).unwrap();
    assert_eq!(set.len(), 4);
    assert!(set.row_norms().iter().all(|n| (n - 1.0).abs() < 1e-12));
    let log = std::fs::read_to_string(out.join("training_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(out.join("classifier.json").exists());
}

#[test]
fn render_grid_has_one_row_per_edit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    let out = train(dir.path(), &cfg, &[]);
    let grid_path = dir.path().join("grid.ppm");
    let dirs = out.join("directions.json");
    for _ in 0..2 {
        let o = latentlight(&[
            "render-grid",
            "--dirs",
            s(&dirs),
            "--config",
            s(&cfg),
            "--n-scenes",
            "1",
            "--out",
            s(&grid_path),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let bytes = std::fs::read(&grid_path).unwrap();
    let grid = Rgb8::from_ppm(&bytes).unwrap();
    assert_eq!((grid.width, grid.height), (32, 5 * 32 + 4 * GUTTER));

    let o = latentlight(&[
        "render-grid",
        "--dirs",
        s(&dirs),
        "--config",
        s(&cfg),
        "--n-scenes",
        "1",
        "--out",
        s(&grid_path),
    ]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(&grid_path).unwrap(), bytes);
}

#[test]
fn interpolation_strip_has_requested_frames() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 0);
    let out = train(dir.path(), &cfg, &[]);
    let dirs = out.join("directions.json");
    let strip = dir.path().join("strip.ppm");
    let o = latentlight(&[
        "interpolate",
        "--dirs",
        s(&dirs),
        "--config",
        s(&cfg),
        "--path",
        "pair",
        "--i",
        "0",
        "--j",
        "2",
        "--steps",
        "5",
        "--out",
        s(&strip),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let img = Rgb8::from_ppm(&std::fs::read(&strip).unwrap()).unwrap();
    assert_eq!((img.width, img.height), (5 * 32 + 4 * GUTTER, 32));

    let o = latentlight(&["interpolate", "--dirs", s(&dirs), "--config", s(&cfg), "--path", "pair", "--i", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = latentlight(&["interpolate", "--dirs", s(&dirs), "--config", s(&cfg), "--path", "scale", "--i", "9"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_writes_per_direction_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    let out = train(dir.path(), &cfg, &[]);
    let dirs = out.join("directions.json");
    let clf = out.join("classifier.json");
    let o =
        latentlight(&["eval", "--dirs", s(&dirs), "--config", s(&cfg), "--classifier", s(&clf), "--out-dir", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("metric,direction,value,n"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(rows.iter().all(|r| r.len() == 4 && r[2].parse::<f64>().is_ok()));
    for i in 0..4 {
        assert!(rows.iter().any(|r| r[1] == i.to_string()), "no rows for direction {i}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(summary.is_object());
}

#[test]
fn directions_from_another_generator_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 0);
    let out = train(dir.path(), &cfg, &[]);
    let mut other = RunConfig::default();
    other.generator.l = 5;
    let other_path = dir.path().join("other.json");
    std::fs::write(&other_path, other.to_json().unwrap()).unwrap();
    let o = latentlight(&["render-grid", "--dirs", s(&out.join("directions.json")), "--config", s(&other_path)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
