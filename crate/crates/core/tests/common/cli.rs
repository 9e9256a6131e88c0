//! Helpers for driving the `sassl` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const TINY: &str = r#"
[synth]
train_count = 24
test_count = 12
image_size = 24

[model]
encoder_widths = [4, 8]
projector_hidden = 16
projector_out = 8

[train]
batch_size = 8
epochs = 1
max_steps = 3

[policy]
output_size = 16

[policy.sassl]
p = 0.8

[style]
generated_styles = 4
style_image_size = 16

[probe]
epochs = 5
"#;

pub fn sassl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sassl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn ok(args: &[&str]) -> Output {
    let out = sassl(args);
    assert!(
        out.status.success(),
        "sassl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path
}

pub fn gen_data(dir: &Path, config: &Path, styles: usize) -> PathBuf {
    let data = dir.join("data");
    ok(&["gen-data", "--config", s(config), "--out", s(&data), "--styles", &styles.to_string()]);
    data
}

pub fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

/// Every seeded command, writing all of its outputs below `root`.
pub fn seeded_session(root: &Path) {
    let config = tiny_config(root);
    let c = s(&config);
    let data = gen_data(root, &config, 5);
    let styles = data.join("styles");
    let weights = root.join("weights.ssck");
    ok(&["init-weights", "--config", c, "--out", s(&weights)]);
    let bank = root.join("styles.ssbk");
    ok(&["build-bank", "--config", c, "--weights", s(&weights), "--images", s(&styles), "--out", s(&bank)]);
    ok(&[
        "stylize", "--config", c, "--input", s(&data.join("test")), "--style", s(&bank), "--out",
        s(&root.join("stylized")), "--seed", "4",
    ]);
    ok(&["export-embeddings", "--bank", s(&bank), "--out", s(&root.join("bank.csv"))]);
    let run = root.join("run");
    ok(&["pretrain", "--config", c, "--out", s(&run)]);
    let ckpt = run.join("checkpoint.ssck");
    ok(&["probe", "--ckpt", s(&ckpt), "--config", c, "--out", s(&root.join("probe.json"))]);
    ok(&[
        "fewshot", "--ckpt", s(&ckpt), "--config", c, "--k", "2", "--seed", "9", "--out",
        s(&root.join("fewshot.json")),
    ]);
    ok(&[
        "invariance", "--ckpt", s(&ckpt), "--config", c, "--n", "6", "--seed", "3", "--out",
        s(&root.join("invariance.json")),
    ]);
}
