mod common;

use std::fs;
use std::path::Path;

use common::cli::*;
use sassl::cli::RunConfig;
use sassl::stylebank::load_bank;
use tempfile::TempDir;

#[test]
fn seeded_commands_are_byte_reproducible() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    seeded_session(a.path());
    seeded_session(b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (path, bytes) in &ta {
        assert!(bytes == &tb[path], "{} differs between runs", path.display());
    }
    let metrics = String::from_utf8(ta[Path::new("run/metrics.csv")].clone()).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("step,loss,lr,m"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn init_config_writes_the_parseable_default() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("default.toml");
    ok(&["init-config", "--out", s(&path)]);
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(RunConfig::parse(&text).unwrap(), RunConfig::default());
}

#[test]
fn build_bank_counts_images_and_rejects_empty_folders() {
    let dir = TempDir::new().unwrap();
    let config = tiny_config(dir.path());
    let data = gen_data(dir.path(), &config, 5);
    let bank = dir.path().join("b.ssbk");
    ok(&["build-bank", "--images", s(&data.join("styles")), "--out", s(&bank)]);
    assert_eq!(load_bank(&bank).unwrap().count(), 5);
    assert_eq!(load_bank(&bank).unwrap().dim(), 100);

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = sassl(&["build-bank", "--images", s(&empty), "--out", s(&dir.path().join("e.ssbk"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no .ppm images"));

    let out = sassl(&["build-bank", "--images", s(&dir.path().join("nope")), "--out", s(&bank)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stylize_with_zero_beta_copies_inputs() {
    let dir = TempDir::new().unwrap();
    let config = tiny_config(dir.path());
    let data = gen_data(dir.path(), &config, 3);
    let out = dir.path().join("out");
    ok(&[
        "stylize", "--input", s(&data.join("styles")), "--style", s(&data.join("styles")), "--out", s(&out),
        "--beta", "0",
    ]);
    let (inputs, outputs) = (tree(&data.join("styles")), tree(&out));
    assert_eq!(outputs.len(), 3);
    for (name, bytes) in outputs {
        assert!(bytes == inputs[&name], "{} was changed", name.display());
    }
}

#[test]
fn stylize_without_a_bank_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let config = tiny_config(dir.path());
    let data = gen_data(dir.path(), &config, 2);
    let out = sassl(&[
        "stylize", "--input", s(&data.join("styles")), "--style", s(&dir.path().join("missing.ssbk")), "--out",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ssbk"));
}

#[test]
fn export_writes_one_row_per_code() {
    let dir = TempDir::new().unwrap();
    let config = tiny_config(dir.path());
    let data = gen_data(dir.path(), &config, 3);
    let bank_path = dir.path().join("b.ssbk");
    ok(&["build-bank", "--images", s(&data.join("styles")), "--out", s(&bank_path)]);
    let csv_path = dir.path().join("codes.csv");
    ok(&["export-embeddings", "--bank", s(&bank_path), "--out", s(&csv_path)]);
    let text = fs::read_to_string(&csv_path).unwrap();
    let mut lines = text.lines();
    let header: Vec<String> = (0..100).map(|j| format!("dim_{j}")).collect();
    assert_eq!(lines.next().unwrap(), header.join(","));
    let bank = load_bank(&bank_path).unwrap();
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    for (line, code) in rows.iter().zip(bank.rows()) {
        let parsed: Vec<f32> = line.split(',').map(|v| v.parse::<f64>().unwrap() as f32).collect();
        assert_eq!(parsed, code);
    }

    let from_images = dir.path().join("images.csv");
    ok(&["export-embeddings", "--images", s(&data.join("styles")), "--out", s(&from_images)]);
    assert_eq!(fs::read(&from_images).unwrap(), text.as_bytes());
}

#[test]
fn evaluation_commands_need_a_checkpoint() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("none.ssck");
    for cmd in [vec!["probe"], vec!["fewshot", "--k", "1"], vec!["invariance"]] {
        let mut args = cmd.clone();
        args.extend(["--ckpt", s(&missing)]);
        let out = sassl(&args);
        assert_eq!(out.status.code(), Some(2), "{cmd:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
    }
}

#[test]
fn pretrain_probe_and_fewshot_report_results() {
    let dir = TempDir::new().unwrap();
    let config = tiny_config(dir.path());
    let run = dir.path().join("run");
    ok(&["pretrain", "--config", s(&config), "--out", s(&run)]);
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"], 3);
    assert_eq!(summary["sassl"], true);

    let ckpt = run.join("checkpoint.ssck");
    let out = ok(&["probe", "--ckpt", s(&ckpt), "--config", s(&config)]);
    let probe: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((0.0..=1.0).contains(&probe["test_accuracy"].as_f64().unwrap()));
    assert_eq!(probe["chance"], 0.25);

    let out = ok(&["fewshot", "--ckpt", s(&ckpt), "--config", s(&config), "--k", "1"]);
    let few: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(few["trials"], 5);
    assert_eq!(few["trial_accuracies"].as_array().unwrap().len(), 5);
}

#[test]
fn bench_report_has_every_field() {
    let dir = TempDir::new().unwrap();
    let config = tiny_config(dir.path());
    let path = dir.path().join("bench.json");
    ok(&["bench", "--config", s(&config), "--runs", "1", "--batch", "4", "--out", s(&path)]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    for key in [
        "pipeline",
        "images_per_second",
        "baseline_pipeline",
        "baseline_images_per_second",
        "relative_change_percent",
        "runs",
        "warmup_runs",
        "batch_size",
        "image_size",
        "workers",
    ] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert_eq!(report["pipeline"], "sassl");
    assert_eq!(report["warmup_runs"], 3);
}

#[test]
fn bad_configuration_exits_with_two() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[train]\nlearning_rat = 0.1\n").unwrap();
    let out = sassl(&["pretrain", "--config", s(&path), "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
    assert_eq!(sassl(&["probe"]).status.code(), Some(2));
    assert_eq!(sassl(&["no-such-command"]).status.code(), Some(2));
}
