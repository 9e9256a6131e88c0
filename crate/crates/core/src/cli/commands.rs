use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use numcore::Tensor;
use serde::Serialize;
use serde_json::json;

use super::bench::{measure_throughput, BenchReport};
use super::checkpoint::Checkpoint;
use super::config::{RunConfig, StyleConfig};
use super::ppm::{load_dataset, read_image_dir, save_dataset, write_ppm};
use crate::augpipe::StyleContext;
use crate::error::{Error, Result};
use crate::eval::{
    encode_dataset, few_shot_eval, gen_style_images, gen_synth, texture_invariance_score, LinearProbe, SynthData,
};
use crate::nst::{StyleExtractor, StyleRef, StyleSource, StyleTransfer, Stylizer};
use crate::rng::RngStream;
use crate::ssltrain::{pretrain_with, smoothed, SslModel};
use crate::stylebank::{build_bank, load_bank, pick_style, save_bank, StyleBank};

/// Window of the moving average reported for the loss curve.
pub const LOSS_WINDOW: usize = 10;

#[derive(Debug, Parser)]
#[command(name = "sassl", version, about = "Style-augmented contrastive self-supervised learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the default configuration.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic dataset and style images as PPM folders.
    GenData(GenDataArgs),
    /// Write the seeded style-engine weights as a checkpoint.
    InitWeights {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract style codes of a folder of images into a bank.
    BuildBank {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply the style augmentation block to a folder of images.
    Stylize(StylizeArgs),
    /// Contrastive pretraining; writes a checkpoint, per-step metrics and a summary.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Linear-probe accuracy of a pretrained encoder.
    Probe(EvalArgs),
    /// Few-shot accuracy of a pretrained encoder.
    Fewshot {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Mean cosine similarity between features of images and their stylizations.
    Invariance {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Augmentation-only throughput against the style-free pipeline.
    Bench(BenchArgs),
    /// Write style codes as CSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Style-engine weights; overrides the configured path.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of style images written to `OUT/styles`.
    #[arg(long, default_value_t = 16)]
    pub styles: usize,
}

#[derive(Debug, Args)]
pub struct StylizeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub input: PathBuf,
    /// A `.ssbk` bank or a folder of style images.
    #[arg(long)]
    pub style: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Fixed blending factor; the configured range when omitted.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Fixed pixel interpolation factor; the configured range when omitted.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub p: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset folder; overrides the configured one.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Also write the JSON result here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchMode {
    Default,
    Sassl,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    #[arg(long, value_enum, default_value_t = BenchMode::Sassl)]
    pub mode: BenchMode,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(id = "source", required = true, multiple = false, args = ["bank", "images"])]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit status of a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        _ => 1,
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            require(p, "configuration")?;
            RunConfig::load(p)
        }
        None => Ok(RunConfig::default()),
    }
}

/// Seeded engine, or the `extractor.` / `stylizer.` sections of a checkpoint.
pub fn style_engine(style: &StyleConfig, weights: Option<&Path>) -> Result<StyleTransfer> {
    match weights {
        Some(path) => {
            require(path, "weights checkpoint")?;
            let ckpt = Checkpoint::load(path)?;
            let extractor = StyleExtractor::from_params(ckpt.section("extractor"))?;
            let stylizer = Stylizer::from_params(ckpt.section("stylizer"), extractor.dim())?;
            StyleTransfer::new(extractor, stylizer)
        }
        None => StyleTransfer::new(
            StyleExtractor::new(
                &StyleExtractor::<f32>::DEFAULT_WIDTHS,
                style.stylizer.embedding_dim,
                style.extractor_seed,
            ),
            Stylizer::new(&style.stylizer, style.stylizer_seed)?,
        ),
    }
}

fn engine_checkpoint(engine: &StyleTransfer) -> Checkpoint {
    let mut c = Checkpoint::new(0, [0; 32], Default::default());
    c.insert_section("extractor", engine.extractor.params());
    c.insert_section("stylizer", engine.stylizer.params());
    c
}

fn engine_for(config: &RunConfig, weights: Option<&Path>) -> Result<StyleTransfer> {
    style_engine(&config.style, weights.or(config.paths.weights.as_deref()))
}

/// The configured bank, or one built from generated style images.
fn resolve_bank(config: &RunConfig, engine: &StyleTransfer) -> Result<StyleBank> {
    match &config.paths.bank {
        Some(path) => {
            require(path, "style bank")?;
            load_bank(path)
        }
        None => {
            let s = &config.style;
            if s.generated_styles == 0 {
                return Err(Error::Config("no style bank configured and style.generated_styles = 0".into()));
            }
            let images = gen_style_images(s.generated_styles, s.style_image_size, s.style_seed)?;
            build_bank(images.iter(), &engine.extractor, format!("generated:{}", s.style_seed))
        }
    }
}

fn needs_bank(config: &RunConfig) -> bool {
    config
        .policy
        .sassl
        .as_ref()
        .is_some_and(|s| matches!(s.style_source, StyleSource::ExternalBank | StyleSource::GaussianNoise))
}

fn load_data(config: &RunConfig, data: Option<&Path>) -> Result<SynthData> {
    match data.or(config.paths.data.as_deref()) {
        Some(dir) => {
            require(dir, "dataset folder")?;
            Ok(SynthData {
                train: load_dataset(&dir.join("train"))?,
                test: load_dataset(&dir.join("test"))?,
            })
        }
        None => gen_synth(&config.synth),
    }
}

fn load_model(path: &Path) -> Result<SslModel> {
    require(path, "checkpoint")?;
    SslModel::from_checkpoint(&Checkpoint::load(path)?)
}

fn emit(value: &impl Serialize, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable report") + "\n";
    if let Some(path) = out {
        write_file(path, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn image_stem(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitConfig { out } => write_file(&out, RunConfig::default().to_toml()),
        Command::GenData(args) => gen_data(args),
        Command::InitWeights { common, out } => {
            let config = load_config(common.config.as_deref())?;
            let engine = engine_for(&config, common.weights.as_deref())?;
            write_file(&out, engine_checkpoint(&engine).to_bytes())
        }
        Command::BuildBank { common, images, out } => {
            let config = load_config(common.config.as_deref())?;
            let engine = engine_for(&config, common.weights.as_deref())?;
            require(&images, "image folder")?;
            let files = read_image_dir(&images)?;
            if files.is_empty() {
                return Err(Error::invalid(format!("{} contains no .ppm images", images.display())));
            }
            let bank = build_bank(files.iter().map(|(_, t)| t), &engine.extractor, "")?;
            save_bank(&bank, &out)?;
            log::info!("wrote {} codes of length {} to {}", bank.count(), bank.dim(), out.display());
            Ok(())
        }
        Command::Stylize(args) => stylize(args),
        Command::Pretrain { config, out } => cmd_pretrain(&config, &out),
        Command::Probe(args) => probe(args),
        Command::Fewshot { eval, k, trials, seed } => {
            let config = load_config(eval.config.as_deref())?;
            let model = load_model(&eval.ckpt)?;
            let data = load_data(&config, eval.data.as_deref())?;
            let features = encode_dataset(&model, &data.train, config.policy.output_size)?;
            let r = few_shot_eval(&features, &data.train.labels, k, trials, &config.probe, &RngStream::new(seed))?;
            emit(
                &json!({
                    "k": k,
                    "trials": trials,
                    "seed": seed,
                    "mean_accuracy": r.mean_accuracy,
                    "trial_accuracies": r.trial_accuracies,
                }),
                eval.out.as_deref(),
            )
        }
        Command::Invariance { eval, n, seed } => {
            let config = load_config(eval.config.as_deref())?;
            let model = load_model(&eval.ckpt)?;
            let data = load_data(&config, eval.data.as_deref())?;
            let engine = engine_for(&config, None)?;
            let mut params = config.policy.sassl.clone().unwrap_or_default();
            params.p = 1.0;
            let bank = match params.style_source {
                StyleSource::ExternalBank | StyleSource::GaussianNoise => Some(resolve_bank(&config, &engine)?),
                _ => None,
            };
            let ctx = StyleContext::new(&engine, bank.as_ref(), config.style.inbatch_offset)?;
            let images = crate::eval::resize_batch(&data.test.images, config.policy.output_size)?;
            let score = texture_invariance_score(&model, &images, &ctx, &params, n.min(data.test.len()), &RngStream::new(seed))?;
            emit(&json!({ "n": n.min(data.test.len()), "seed": seed, "score": score }), eval.out.as_deref())
        }
        Command::Bench(args) => bench(args),
        Command::ExportEmbeddings(args) => export(args),
    }
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let data = gen_synth(&config.synth)?;
    save_dataset(&args.out.join("train"), &data.train)?;
    save_dataset(&args.out.join("test"), &data.test)?;
    let styles_dir = args.out.join("styles");
    fs::create_dir_all(&styles_dir).map_err(|e| Error::io(&styles_dir, e))?;
    let s = &config.style;
    for (i, img) in gen_style_images(args.styles, s.style_image_size, s.style_seed)?.iter().enumerate() {
        write_ppm(&styles_dir.join(format!("{i:05}.ppm")), img)?;
    }
    Ok(())
}

fn stylize(args: StylizeArgs) -> Result<()> {
    let config = load_config(args.common.config.as_deref())?;
    require(&args.input, "input folder")?;
    require(&args.style, "style bank")?;
    let engine = engine_for(&config, args.common.weights.as_deref())?;
    let bank = if args.style.is_dir() {
        let styles = read_image_dir(&args.style)?;
        if styles.is_empty() {
            return Err(Error::Config(format!("{} contains no .ppm style images", args.style.display())));
        }
        build_bank(styles.iter().map(|(_, t)| t), &engine.extractor, "")?
    } else {
        load_bank(&args.style)?
    };
    if bank.dim() != engine.stylizer.embedding_dim() {
        return Err(Error::Config(format!(
            "bank codes have length {} but the stylizer expects {}",
            bank.dim(),
            engine.stylizer.embedding_dim()
        )));
    }
    let mut params = config.policy.sassl.clone().unwrap_or_default();
    params.p = args.p;
    if let Some(a) = args.alpha {
        (params.alpha_min, params.alpha_max) = (a, a);
    }
    if let Some(b) = args.beta {
        (params.beta_min, params.beta_max) = (b, b);
    }
    params.validate()?;
    let inputs = read_image_dir(&args.input)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let root = RngStream::new(args.seed);
    for (i, (path, image)) in inputs.iter().enumerate() {
        let rng = root.sample(i as u64, None);
        let style = StyleRef::Embedding(bank.embedding(pick_style(&bank, &rng)));
        let out = engine.style_augment(image, &style, &params, &rng)?;
        write_ppm(&args.out.join(image_stem(path)), &out)?;
    }
    log::info!("stylized {} images into {}", inputs.len(), args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct PretrainSummary {
    steps: usize,
    batch_size: usize,
    sassl: bool,
    momentum_encoder: bool,
    first_loss: f64,
    final_loss: f64,
    smoothing_window: usize,
    smoothed_loss_at_step_10: f64,
    smoothed_final_loss: f64,
    loss_drop_percent: f64,
    config_hash: String,
}

fn cmd_pretrain(config_path: &Path, out: &Path) -> Result<()> {
    let config = load_config(Some(config_path))?;
    let data = load_data(&config, None)?;
    let engine;
    let bank;
    let ctx = if config.policy.sassl.is_some() {
        engine = engine_for(&config, None)?;
        bank = needs_bank(&config).then(|| resolve_bank(&config, &engine)).transpose()?;
        Some(StyleContext::new(&engine, bank.as_ref(), config.style.inbatch_offset)?)
    } else {
        None
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let start = Instant::now();
    let mut csv = String::from("step,loss,lr,m\n");
    let result = pretrain_with(
        &data.train.images,
        &config.model,
        &config.train,
        &config.policy,
        ctx.as_ref(),
        |r| {
            let _ = writeln!(csv, "{},{},{},{}", r.step, r.loss, r.lr, r.momentum);
            if r.step % 10 == 0 {
                log::info!("step {} loss {:.4} lr {:.4} m {:.5}", r.step, r.loss, r.lr, r.momentum);
            }
        },
    )?;
    log::info!("pretrained {} steps in {:.1}s", result.history.len(), start.elapsed().as_secs_f64());
    let losses: Vec<f64> = result.history.iter().map(|r| r.loss).collect();
    let smooth = smoothed(&losses, LOSS_WINDOW);
    let at10 = smooth[LOSS_WINDOW.min(smooth.len() - 1)];
    let last = *smooth.last().expect("at least one step");
    let hash = config.hash();
    let summary = PretrainSummary {
        steps: losses.len(),
        batch_size: config.train.batch_size.min(data.train.len()),
        sassl: config.policy.sassl.is_some(),
        momentum_encoder: config.model.momentum_encoder,
        first_loss: losses[0],
        final_loss: *losses.last().expect("at least one step"),
        smoothing_window: LOSS_WINDOW,
        smoothed_loss_at_step_10: at10,
        smoothed_final_loss: last,
        loss_drop_percent: (at10 - last) / at10 * 100.0,
        config_hash: hash.iter().map(|b| format!("{b:02x}")).collect(),
    };
    result
        .model
        .to_checkpoint(losses.len() as u64, hash)
        .save(&out.join("checkpoint.ssck"))?;
    write_file(&out.join("metrics.csv"), csv)?;
    emit(&summary, Some(&out.join("summary.json")))
}

fn probe(args: EvalArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let model = load_model(&args.ckpt)?;
    let data = load_data(&config, args.data.as_deref())?;
    let size = config.policy.output_size;
    let train = encode_dataset(&model, &data.train, size)?;
    let test = encode_dataset(&model, &data.test, size)?;
    let classes = data.train.classes.max(data.test.classes);
    let probe = LinearProbe::fit(&train, &data.train.labels, classes, &config.probe)?;
    emit(
        &json!({
            "classes": classes,
            "train_count": data.train.len(),
            "test_count": data.test.len(),
            "epochs": config.probe.epochs,
            "train_accuracy": probe.accuracy(&train, &data.train.labels)?,
            "test_accuracy": probe.accuracy(&test, &data.test.labels)?,
            "chance": 1.0 / classes as f64,
        }),
        args.out.as_deref(),
    )
}

fn bench(args: BenchArgs) -> Result<()> {
    let mut config = load_config(args.common.config.as_deref())?;
    if args.batch == 0 {
        return Err(Error::Config("--batch must be positive".into()));
    }
    if args.mode == BenchMode::Sassl && config.policy.sassl.is_none() {
        config.policy.sassl = Some(Default::default());
    }
    let mut spec = config.synth.clone();
    spec.train_count = args.batch;
    spec.test_count = 1;
    let batch = gen_synth(&spec)?.train.images;
    let baseline_policy = config.policy.without_sassl();
    let baseline = measure_throughput(&batch, &baseline_policy, None, args.runs, 0)?;
    let (label, candidate) = match args.mode {
        BenchMode::Default => ("default", measure_throughput(&batch, &baseline_policy, None, args.runs, 0)?),
        BenchMode::Sassl => {
            let engine = engine_for(&config, args.common.weights.as_deref())?;
            let bank = needs_bank(&config).then(|| resolve_bank(&config, &engine)).transpose()?;
            let ctx = StyleContext::new(&engine, bank.as_ref(), config.style.inbatch_offset)?;
            ("sassl", measure_throughput(&batch, &config.policy, Some(&ctx), args.runs, 0)?)
        }
    };
    let report = BenchReport::new(label, candidate, "default", baseline, args.runs, args.batch, spec.image_size);
    emit(&report, args.out.as_deref())
}

/// CSV with header `dim_0,…,dim_{D−1}` and one `{:.16e}` row per code.
pub fn embeddings_csv<'a>(dim: usize, rows: impl IntoIterator<Item = &'a [f32]>) -> String {
    let mut s = (0..dim).map(|j| format!("dim_{j}")).collect::<Vec<_>>().join(",");
    s.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|&v| format!("{:.16e}", v as f64)).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

fn export(args: ExportArgs) -> Result<()> {
    let bank = match (&args.bank, &args.images) {
        (Some(path), _) => {
            require(path, "style bank")?;
            load_bank(path)?
        }
        (None, Some(dir)) => {
            require(dir, "image folder")?;
            let config = load_config(args.common.config.as_deref())?;
            let engine = engine_for(&config, args.common.weights.as_deref())?;
            let files = read_image_dir(dir)?;
            if files.is_empty() {
                return Err(Error::invalid(format!("{} contains no .ppm images", dir.display())));
            }
            build_bank(files.iter().map(|(_, t): &(PathBuf, Tensor<f32>)| t), &engine.extractor, "")?
        }
        (None, None) => return Err(Error::Config("one of --bank or --images is required".into())),
    };
    write_file(&args.out, embeddings_csv(bank.dim(), bank.rows()))
}
