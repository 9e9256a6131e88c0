//! End-to-end acceptance run. Prints one line per criterion and fails if any
//! criterion fails:
//!
//! ```text
//! cargo test -p sassl --test acceptance -- --nocapture
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::cli::{ok, s, seeded_session, tree};
use common::*;
use numcore::{diff_primitive_set, grad_check_report, GradCheckReport, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sassl::augpipe::{augment_view, AugPolicy};
use sassl::cli::relative_change;
use sassl::nst::{
    blend_embeddings, cin_graph, SasslParams, StyleEmbedding, StyleExtractor, StyleRef, StyleTransfer, Stylizer,
    StylizerConfig, NORM_EPS,
};
use sassl::rng::{RngStream, View};
use sassl::ssltrain::{cosine_lr, momentum_schedule, nt_xent, nt_xent_graph};
use sassl::stylebank::{inbatch_pairing, load_bank, save_bank, BankError, StyleBank};
use sassl::Error;
use serde_json::Value;
use tempfile::TempDir;

const CIN_MEAN_TOL: f64 = 1e-4;
const CIN_STD_TOL: f64 = 1e-3;
const CIN_MIN_INPUT_STD: f64 = 1e-3;
const NT_XENT_TOL: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-6;
const MOMENTUM_MID_TOL: f64 = 1e-9;
const RELATIVE_CHANGE_TOL: f64 = 0.01;
const MIN_LOSS_DROP_PERCENT: f64 = 20.0;
const MIN_PROBE_ACCURACY: f64 = 0.5;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn criterion(id: u32, name: &str, budget_secs: Option<f64>, check: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into());
        Err(format!("panic: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let result = match (result, budget_secs) {
        (Ok(_), Some(budget)) if secs > budget => Err(format!("took {secs:.1}s, budget {budget}s")),
        (r, _) => r,
    };
    let (verdict, detail) = match &result {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {id}: {verdict} {name}: {detail} [{secs:.1}s]");
    result.is_ok()
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn json_stdout(args: &[&str]) -> Value {
    serde_json::from_slice(&ok(args).stdout).unwrap()
}

fn random_code(rng: &mut ChaCha8Rng, scale: f32) -> StyleEmbedding {
    StyleEmbedding::new((0..100).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn cin_moments() -> Check {
    let engine = default_engine();
    let layers = engine.stylizer.styled_layers();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_mean, mut worst_std, mut channels) = (0.0f64, 0.0f64, 0usize);
    for _ in 0..64 {
        let layer = layers[rng.random_range(0..layers.len())];
        let c = engine.stylizer.layer_channels(layer).unwrap();
        let x = Tensor::from_fn([c, 6, 5], |_| rng.random_range(-3.0f32..3.0));
        let z = random_code(&mut rng, 2.0);
        let (gamma, lambda) = engine.stylizer.predict_affine(&z, layer).map_err(|e| e.to_string())?;
        let out = engine.stylizer.cin(&x, &z, layer).map_err(|e| e.to_string())?;
        for (ch, ((m_out, s_out), (_, s_in))) in channel_moments(&out).into_iter().zip(channel_moments(&x)).enumerate() {
            if s_in <= CIN_MIN_INPUT_STD {
                continue;
            }
            channels += 1;
            worst_mean = worst_mean.max((m_out - lambda[ch]).abs());
            worst_std = worst_std.max((s_out - gamma[ch] * s_in / (s_in + NORM_EPS)).abs());
        }
    }
    ensure!(worst_mean < CIN_MEAN_TOL, "mean error {worst_mean:.2e} over {channels} channels");
    ensure!(worst_std < CIN_STD_TOL, "std error {worst_std:.2e} over {channels} channels");
    Ok(format!("64 pairs, {channels} channels, max mean error {worst_mean:.1e}, max std error {worst_std:.1e}"))
}

fn degenerate_identities() -> Check {
    let engine = default_engine();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let root = RngStream::new(2);
    for i in 0..8u64 {
        let content = test_image(i as usize, 24, 20);
        let z = StyleRef::Embedding(random_code(&mut rng, 1.0));
        let sample = root.sample(i, Some(View::Left));

        let beta0 = SasslParams { p: 1.0, beta_min: 0.0, beta_max: 0.0, ..Default::default() };
        let out = engine.style_augment(&content, &z, &beta0, &sample).unwrap();
        ensure!(out.bit_eq(&content), "beta = 0 changed image {i}");

        let alpha0 = SasslParams { p: 1.0, alpha_min: 0.0, alpha_max: 0.0, ..Default::default() };
        let trace = engine.style_augment_traced(&content, &z, &alpha0, &sample).unwrap();
        let z_c = engine.extract_style(&content).unwrap();
        ensure!(trace.blended.as_ref() == Some(&z_c), "alpha = 0 did not keep the content code for image {i}");
        let z_s = random_code(&mut rng, 1.0);
        ensure!(blend_embeddings(&z_c, &z_s, 0.0).unwrap() == z_c, "alpha = 0 blend is not z_c");

        let policy = AugPolicy { output_size: 16, ..AugPolicy::default() };
        let off = AugPolicy { sassl: Some(SasslParams { p: 0.0, ..Default::default() }), ..policy.clone() };
        for view in [View::Left, View::Right] {
            let r = root.sample(100 + i, Some(view));
            let a = augment_view(&content, &off, view, &r, Some((&engine, &z))).unwrap();
            let b = augment_view(&content, &policy.without_sassl(), view, &r, None).unwrap();
            ensure!(a.bit_eq(&b), "p = 0 pipeline differs from the style-free one (image {i}, {view:?})");
        }
    }
    Ok("beta = 0, alpha = 0 and p = 0 identities hold bit-exactly on 8 images".into())
}

fn nt_xent_against_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for n in 1..=4 {
        for _ in 0..50 {
            let z = Tensor::<f64>::from_fn([2 * n, 8], |_| rng.random_range(-1.0..1.0));
            let tau = rng.random_range(0.05..1.0);
            let got = nt_xent(&z, tau).map_err(|e| e.to_string())?;
            let want = nt_xent_oracle(&rows_of(&z), tau);
            worst = worst.max((got - want).abs());
            if n == 1 {
                ensure!(got == 0.0, "N = 1 loss is {got}, not 0");
            }
        }
    }
    ensure!(worst < NT_XENT_TOL, "max deviation {worst:.2e}");
    Ok(format!("200 trials, max deviation {worst:.1e}, N = 1 loss exactly 0"))
}

fn weighted_sum(g: &mut Graph<f64>, y: numcore::Var) -> Result<numcore::Var, Error> {
    let w = Tensor::from_fn(g.shape(y).to_vec(), |i| ((i * 7919) % 101) as f64 / 50.0 - 1.0);
    let wv = g.constant(w);
    let prod = g.mul(y, wv)?;
    Ok(g.sum(prod, &[], false)?)
}

fn gradient_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = (0.0f64, String::new());
    let mut record = |name: String, r: Result<GradCheckReport, String>| -> Result<(), String> {
        let r = r.map_err(|e| format!("{name}: {e}"))?;
        if r.max_rel_error >= worst.0 {
            worst = (r.max_rel_error, name.clone());
        }
        ensure!(r.max_rel_error < GRAD_TOL, "{name}: relative error {:.2e}", r.max_rel_error);
        Ok(())
    };
    let primitives = diff_primitive_set();
    for &p in primitives {
        let (lo, hi) = p.probe_domain();
        for _ in 0..3 {
            let point = Tensor::<f64>::from_fn(p.probe_shape(), |_| rng.random_range(lo..hi));
            let r = grad_check_report(|g, x| p.probe(g, x), &point, GRAD_STEP).map_err(|e| e.to_string());
            record(p.name().to_string(), r)?;
        }
    }

    let x = Tensor::<f64>::from_fn([2, 3, 4, 5], |_| rng.random_range(-2.0..2.0));
    let gamma = Tensor::<f64>::from_fn([2, 3], |_| rng.random_range(0.2..2.0));
    let lambda = Tensor::<f64>::from_fn([2, 3], |_| rng.random_range(-1.0..1.0));
    let r = grad_check_report(
        |g, xv| {
            let (gv, lv) = (g.constant(gamma.clone()), g.constant(lambda.clone()));
            let y = cin_graph(g, xv, gv, lv, NORM_EPS)?;
            weighted_sum(g, y)
        },
        &x,
        GRAD_STEP,
    );
    record("cin/x".into(), r.map_err(|e| e.to_string()))?;
    let r = grad_check_report(
        |g, gv| {
            let (xv, lv) = (g.constant(x.clone()), g.constant(lambda.clone()));
            let y = cin_graph(g, xv, gv, lv, NORM_EPS)?;
            weighted_sum(g, y)
        },
        &gamma,
        GRAD_STEP,
    );
    record("cin/gamma".into(), r.map_err(|e| e.to_string()))?;

    let config = StylizerConfig { width: 2, embedding_dim: 4, ..Default::default() };
    let engine: StyleTransfer<f64> =
        StyleTransfer::new(StyleExtractor::new(&[2, 2, 2, 2], 4, 7), Stylizer::<f32>::new(&config, 8).unwrap())
            .unwrap()
            .cast();
    let img = Tensor::<f64>::from_fn([1, 3, 8, 8], |_| rng.random_range(0.05..0.95));
    let z = Tensor::<f64>::from_fn([1, 4], |_| rng.random_range(-1.0..1.0));
    let r = grad_check_report(
        |g, xv| {
            let p = engine.stylizer.params().bind(g, false);
            let zv = g.constant(z.clone());
            let y = engine.stylizer.forward(g, &p, xv, zv)?;
            weighted_sum(g, y)
        },
        &img,
        GRAD_STEP,
    );
    record("stylizer/x".into(), r.map_err(|e| e.to_string()))?;
    let r = grad_check_report(
        |g, zv| {
            let p = engine.stylizer.params().bind(g, false);
            let xv = g.constant(img.clone());
            let y = engine.stylizer.forward(g, &p, xv, zv)?;
            weighted_sum(g, y)
        },
        &z,
        GRAD_STEP,
    );
    record("stylizer/z".into(), r.map_err(|e| e.to_string()))?;

    for n in 1..=4 {
        let base: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pts = Tensor::<f64>::from_fn([2 * n, 5], |i| base[i % 5] + rng.random_range(-0.3..0.3));
        let r = grad_check_report(|g, zv| nt_xent_graph(g, zv, 0.1), &pts, GRAD_STEP);
        record(format!("nt_xent N={n}"), r.map_err(|e| e.to_string()))?;
    }
    Ok(format!(
        "{} primitives, cin, stylizer, nt_xent; worst {:.1e} ({})",
        primitives.len(),
        worst.0,
        worst.1
    ))
}

fn pairing() -> Check {
    let got = inbatch_pairing(4, 1);
    ensure!(got == vec![3, 0, 1, 2], "B = 4, b0 = 1 gives {got:?}");
    for b in 1..=16 {
        for b0 in 0..=16 {
            let pairs = inbatch_pairing(b, b0);
            ensure!(pairs == pairing_oracle(b, b0), "B = {b}, b0 = {b0}: {pairs:?}");
            let mut sorted = pairs.clone();
            sorted.sort_unstable();
            ensure!(sorted == (0..b).collect::<Vec<_>>(), "B = {b}, b0 = {b0} is not a bijection");
        }
    }
    Ok("[3, 0, 1, 2] at B = 4, b0 = 1; bijective for all B, b0 <= 16".into())
}

fn schedules() -> Check {
    let total = 1000;
    let (start, end, mid) = (
        momentum_schedule(0, total, 0.996),
        momentum_schedule(total, total, 0.996),
        momentum_schedule(total / 2, total, 0.996),
    );
    ensure!(start == 0.996 && end == 1.0, "momentum endpoints {start}, {end}");
    ensure!((mid - 0.998).abs() < MOMENTUM_MID_TOL, "momentum midpoint {mid}");
    for step in 0..=total {
        let m = momentum_schedule(step, total, 0.996);
        ensure!((m - momentum_oracle(step, total, 0.996)).abs() < 1e-12, "momentum at {step}: {m}");
    }
    let (peak, warmup) = (0.5, 50);
    let lr0 = cosine_lr(0, warmup, total, peak);
    let lr_peak = cosine_lr(warmup, warmup, total, peak);
    let lr_end = cosine_lr(total, warmup, total, peak);
    let lr_last = cosine_lr(total - 1, warmup, total, peak);
    ensure!(lr0 == 0.0, "lr at step 0 is {lr0}");
    ensure!((lr_peak - peak).abs() < 1e-12, "lr after warmup is {lr_peak}");
    ensure!(lr_end.abs() < 1e-12 && lr_last < 1e-5 * peak, "final lr {lr_last}, {lr_end}");
    Ok(format!("momentum {start} -> {mid:.12} -> {end}; lr 0 -> {lr_peak} -> {lr_last:.1e}"))
}

fn bank_format() -> Check {
    let dir = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..1000 {
        let dim = rng.random_range(1..=128);
        let count = rng.random_range(1..=16);
        let data = (0..dim * count)
            .map(|_| {
                let v: f32 = rng.sample(rand_distr::StandardNormal);
                v * 10f32.powi(rng.random_range(-3..4))
            })
            .collect();
        let bank = StyleBank::new(dim, data, "random").unwrap();
        let back = if i % 10 == 0 {
            let path = dir.path().join(format!("{i}.ssbk"));
            save_bank(&bank, &path).unwrap();
            load_bank(&path).unwrap()
        } else {
            StyleBank::from_bytes(&bank.to_bytes(), Path::new("mem.ssbk")).unwrap()
        };
        ensure!(back.bit_eq(&bank), "round trip {i} (D = {dim}, count = {count}) changed values");
    }

    let good = StyleBank::new(3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], "t").unwrap().to_bytes();
    let parse = |bytes: &[u8]| StyleBank::from_bytes(bytes, Path::new("bad.ssbk"));
    let mut magic = good.clone();
    magic[0] = b'X';
    ensure!(matches!(parse(&magic), Err(BankError::BadMagic { .. })), "bad magic not detected");
    let mut version = good.clone();
    version[4] = 9;
    ensure!(matches!(parse(&version), Err(BankError::UnsupportedVersion { version: 9, .. })), "bad version not detected");
    ensure!(matches!(parse(&good[..10]), Err(BankError::Truncated { .. })), "short header not detected");
    ensure!(matches!(parse(&good[..good.len() - 4]), Err(BankError::Truncated { .. })), "missing row data not detected");
    let mut long = good.clone();
    long.extend_from_slice(&[0; 4]);
    ensure!(matches!(parse(&long), Err(BankError::LengthMismatch { .. })), "trailing bytes not detected");
    let mut count = good.clone();
    count[12] = 5;
    ensure!(matches!(parse(&count), Err(BankError::Truncated { .. })), "inflated count not detected");
    let mut nan = good.clone();
    nan[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
    ensure!(matches!(parse(&nan), Err(BankError::NonFinite { .. })), "NaN payload not detected");
    Ok("1000 bit-exact round trips (100 through files); 7 corruption cases rejected".into())
}

fn relative_change_formula() -> Check {
    let got = relative_change(37.45, 29.48);
    ensure!((got - 21.28).abs() < RELATIVE_CHANGE_TOL, "got {got}");
    ensure!(relative_change(37.45, 37.45) == 0.0, "identical throughput is not 0");
    Ok(format!("37.45 -> 29.48 images/s gives {got:.4}%"))
}

struct Pretrained {
    style_ckpt: PathBuf,
}

fn desk_pipeline(work: &Path, out: &mut Option<Pretrained>) -> Check {
    let config = config_path("desk.toml");
    let run = work.join("sassl");
    ok(&["pretrain", "--config", s(&config), "--out", s(&run)]);
    let summary = read_json(&run.join("summary.json"));
    let drop = summary["loss_drop_percent"].as_f64().unwrap();
    let steps = summary["steps"].as_u64().unwrap();
    let ckpt = run.join("checkpoint.ssck");
    let probe = json_stdout(&["probe", "--ckpt", s(&ckpt), "--config", s(&config)]);
    let acc = probe["test_accuracy"].as_f64().unwrap();
    let chance = probe["chance"].as_f64().unwrap();
    *out = Some(Pretrained { style_ckpt: ckpt });
    ensure!(steps == 200, "ran {steps} steps");
    ensure!(summary["sassl"] == true, "style augmentation was off");
    ensure!(drop >= MIN_LOSS_DROP_PERCENT, "smoothed loss dropped {drop:.1}%");
    ensure!(acc >= MIN_PROBE_ACCURACY, "probe accuracy {acc:.3} (chance {chance})");
    Ok(format!(
        "smoothed loss {:.3} -> {:.3} ({drop:.1}% drop), probe accuracy {acc:.3} vs chance {chance}",
        summary["smoothed_loss_at_step_10"].as_f64().unwrap(),
        summary["smoothed_final_loss"].as_f64().unwrap(),
    ))
}

fn texture_report(work: &Path, pretrained: Option<&Pretrained>) -> Check {
    let pretrained = pretrained.ok_or("no SASSL checkpoint from the desk-scale run")?;
    let style_config = config_path("desk.toml");
    let run = work.join("baseline");
    ok(&["pretrain", "--config", s(&config_path("desk-baseline.toml")), "--out", s(&run)]);
    let score = |ckpt: &Path| {
        json_stdout(&["invariance", "--ckpt", s(ckpt), "--config", s(&style_config), "--n", "64", "--seed", "0"])["score"]
            .as_f64()
            .unwrap()
    };
    let sassl = score(&pretrained.style_ckpt);
    let baseline = score(&run.join("checkpoint.ssck"));
    let report = serde_json::json!({
        "images": 64,
        "seed": 0,
        "sassl_score": sassl,
        "baseline_score": baseline,
        "sassl_higher": sassl > baseline,
    });
    let path = Path::new(env!("CARGO_TARGET_TMPDIR")).join("texture_invariance.json");
    fs::write(&path, serde_json::to_string_pretty(&report).unwrap() + "\n").map_err(|e| e.to_string())?;
    Ok(format!(
        "SASSL {sassl:.4} vs baseline {baseline:.4} ({}), archived to {}",
        if sassl > baseline { "SASSL higher" } else { "SASSL not higher" },
        path.display()
    ))
}

fn determinism() -> Check {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    seeded_session(a.path());
    seeded_session(b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    ensure!(
        ta.keys().eq(tb.keys()),
        "runs wrote different file sets: {:?} vs {:?}",
        ta.keys().collect::<Vec<_>>(),
        tb.keys().collect::<Vec<_>>()
    );
    for (path, bytes) in &ta {
        ensure!(bytes == &tb[path], "{} differs between runs", path.display());
    }
    Ok(format!("{} output files byte-identical across two runs", ta.len()))
}

#[test]
fn acceptance_criteria() {
    let work = TempDir::new().unwrap();
    let mut pretrained = None;
    let results = [
        criterion(1, "CIN moment matching", Some(10.0), cin_moments),
        criterion(2, "degenerate identities", Some(5.0), degenerate_identities),
        criterion(3, "NT-Xent against direct evaluation", Some(10.0), nt_xent_against_oracle),
        criterion(4, "gradient suite", Some(120.0), gradient_suite),
        criterion(5, "in-batch pairing", None, pairing),
        criterion(6, "schedules", None, schedules),
        criterion(7, "bank format", None, bank_format),
        criterion(8, "relative change", None, relative_change_formula),
        criterion(9, "desk-scale pipeline", Some(900.0), || desk_pipeline(work.path(), &mut pretrained)),
        criterion(10, "texture-invariance report", None, || texture_report(work.path(), pretrained.as_ref())),
        criterion(11, "determinism", None, determinism),
    ];
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
