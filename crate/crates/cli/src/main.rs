//! `semcolor`: synthetic data, training, sampling and evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use semcolor_core::colorspace::{lab_to_rgb, GrayImage, RgbImage};
use semcolor_core::config::{RunConfig, KEYS};
use semcolor_core::data::{load_dir, make_synthetic_corpus, prepare_all, save_dir, Prepared, SyntheticSpec};
use semcolor_core::generator::{sample_image, SampleOptions};
use semcolor_core::losses::IGNORE_LABEL;
use semcolor_core::metrics::{colorize, diversity_report, ms_ssim, psnr, Confusion, DiversityReport};
use semcolor_core::training::{curves_csv, run_regime, Checkpoint, Regime};
use semcolor_core::ModelConfig;

#[derive(Parser)]
#[command(name = "semcolor", version, about = "Pixel-level semantic colorization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic shapes corpus (images/, masks/, list.txt).
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a loss CSV.
    #[command(after_help = config_help())]
    Train(TrainArgs),
    /// Colorize one gray image with the averaged parameters of a checkpoint.
    Sample(SampleArgs),
    /// Score a checkpoint on a labelled directory.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Number of image/mask pairs
    #[arg(long, default_value_t = 64)]
    num: usize,
    /// Image side in pixels
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Number of classes, background included
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write into a non-empty directory
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Training directory (images/, masks/, list.txt)
    #[arg(long, required_unless_present = "dump_config")]
    data: Option<PathBuf>,
    /// Held-out directory for validation losses
    #[arg(long)]
    val: Option<PathBuf>,
    /// joint | color_only | seg_only_scratch | seg_only_pretrained [default: from config, joint]
    #[arg(long)]
    regime: Option<String>,
    /// Flat key = value file; see the key list below
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set epochs=50` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed of all randomness [default: from config, 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Color-only checkpoint whose trunk initializes seg_only_pretrained
    #[arg(long)]
    init: Option<PathBuf>,
    /// Checkpoint path
    #[arg(long, required_unless_present = "dump_config")]
    out: Option<PathBuf>,
    /// Loss CSV path [default: checkpoint path with a .csv extension]
    #[arg(long)]
    curves: Option<PathBuf>,
    /// Print the resolved configuration and exit
    #[arg(long)]
    dump_config: bool,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Gray (or color, converted to gray) input image
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Mixture-weight temperature; 1 samples the model as trained
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated subset of psnr,msssim,miou,diversity
    #[arg(long, default_value = "psnr,msssim,miou,diversity")]
    metrics: String,
    /// Report directory
    #[arg(long)]
    out: PathBuf,
    /// Name of the split in the report
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Colorization pairs per image for the diversity histogram
    #[arg(long, default_value_t = 1)]
    pairs: usize,
    /// Score the ground truth against itself (pipeline check, no model)
    #[arg(long)]
    oracle: bool,
    /// Image side used by --oracle without a checkpoint
    #[arg(long, default_value_t = 32)]
    size: usize,
}

fn config_help() -> String {
    let defaults = RunConfig::default();
    let mut s = String::from("Config keys (defaults shown):\n");
    for (key, help) in KEYS {
        s.push_str(&format!("  {key} = {}    {help}\n", defaults.get(key).expect("key")));
    }
    s
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("semcolor: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    if a.out.exists() && fs::read_dir(&a.out)?.next().is_some() && !a.force {
        bail!("{} is not empty (use --force to write anyway)", a.out.display());
    }
    let spec = SyntheticSpec::new(a.num, a.size, a.classes, a.seed);
    let samples = make_synthetic_corpus(&spec)?;
    create_dir(&a.out)?;
    save_dir(&a.out, &samples)?;
    info!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn load_prepared(dir: &Path, cfg: &ModelConfig) -> Result<Vec<Prepared>> {
    let samples = load_dir(dir, cfg.input_size, cfg.num_classes).with_context(|| format!("loading {}", dir.display()))?;
    if samples.is_empty() {
        bail!("{} lists no samples", dir.display());
    }
    Ok(prepare_all(&samples, cfg)?)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(r) = &a.regime {
        cfg.train.regime = r.parse::<Regime>()?;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    if a.dump_config {
        print!("{}", cfg.dump());
        return Ok(());
    }
    let (data, out) = (a.data.expect("required by clap"), a.out.expect("required by clap"));
    let init = match (cfg.train.regime, &a.init) {
        (Regime::SegOnlyPretrained, None) => bail!("regime seg_only_pretrained needs --init CKPT (a color_only checkpoint)"),
        (_, Some(p)) => Some(Checkpoint::<f32>::load(p).with_context(|| format!("loading {}", p.display()))?),
        (_, None) => None,
    };
    let model_cfg = cfg.train.regime.model_config(&cfg.model);
    let train = load_prepared(&data, &model_cfg)?;
    let val = match &a.val {
        Some(v) => load_prepared(v, &model_cfg)?,
        None => Vec::new(),
    };
    info!(
        "training {} on {} images ({} held out), {} epochs",
        cfg.train.regime,
        train.len(),
        val.len(),
        cfg.train.epochs
    );
    let run = run_regime::<f32>(&model_cfg, &cfg.train, &train, &val, init.as_ref(), |rows| {
        for r in rows {
            let l = r.loss;
            info!(
                "epoch {} {}: L_emb {:.4} L_seg {:.4} L_gen {:.4} L_sum {:.4}",
                r.epoch, r.split, l.emb, l.seg, l.gen, l.sum
            );
        }
    })?;
    run.trainer.checkpoint().save(&out)?;
    let curves = a.curves.unwrap_or_else(|| out.with_extension("csv"));
    fs::write(&curves, curves_csv(&run.curves)).with_context(|| format!("writing {}", curves.display()))?;
    info!("wrote {} and {}", out.display(), curves.display());
    Ok(())
}

fn sample(a: SampleArgs) -> Result<()> {
    let ck = Checkpoint::<f32>::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let (model, params) = ck.inference_model()?;
    let rgb = RgbImage::load(&a.input)?;
    let mut gray = GrayImage::from_rgb(&rgb);
    let s = model.config.input_size;
    if (gray.width(), gray.height()) != (s, s) {
        warn!("{} is {}x{}; rescaling to {s}x{s}", a.input.display(), gray.width(), gray.height());
        gray = gray.resized(s, s);
    }
    create_dir(&a.out)?;
    let opts = SampleOptions {
        seed: a.seed,
        temperature: a.temperature,
    };
    for (i, lab) in sample_image(&model, &params, &gray, opts, a.count)?.iter().enumerate() {
        let path = a.out.join(format!("sample_{i:03}.png"));
        lab_to_rgb(lab).save_png(&path)?;
        info!("wrote {}", path.display());
    }
    Ok(())
}

const METRICS: [&str; 4] = ["psnr", "msssim", "miou", "diversity"];

fn parse_metrics(list: &str) -> Result<Vec<&'static str>> {
    let mut out = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let Some(m) = METRICS.iter().find(|m| **m == name) else {
            bail!("unknown metric `{name}` (valid: {})", METRICS.join(", "));
        };
        if !out.contains(m) {
            out.push(*m);
        }
    }
    if out.is_empty() {
        bail!("no metrics requested (valid: {})", METRICS.join(", "));
    }
    Ok(out)
}

fn eval(a: EvalArgs) -> Result<()> {
    let metrics = parse_metrics(&a.metrics)?;
    let ckpt = match &a.ckpt {
        Some(p) => Some(Checkpoint::<f32>::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let opts = SampleOptions {
        seed: a.seed,
        temperature: a.temperature,
    };
    let (size, classes) = match &ckpt {
        Some(ck) if !a.oracle => (ck.model.input_size, ck.model.num_classes),
        _ => (a.size, IGNORE_LABEL as usize),
    };
    let samples = load_dir(&a.data, size, classes).with_context(|| format!("loading {}", a.data.display()))?;
    if samples.is_empty() {
        bail!("{} lists no samples", a.data.display());
    }
    create_dir(&a.out)?;
    let mut rows = Vec::new();
    let mut diversity: Option<DiversityReport> = None;

    if a.oracle {
        for &m in &metrics {
            let value = match m {
                "psnr" => mean(samples.iter().map(|s| psnr(&s.rgb, &s.rgb)))?,
                "msssim" | "diversity" => mean(samples.iter().map(|s| ms_ssim(&s.rgb, &s.rgb)))?,
                _ => {
                    let mut c = Confusion::new(classes);
                    for s in &samples {
                        c.add(&s.mask, &s.mask)?;
                    }
                    c.mean_iou()
                }
            };
            rows.push((m, value));
        }
    } else {
        let ck = ckpt.expect("required by clap");
        let (model, params) = ck.inference_model()?;
        let prepared = prepare_all(&samples, &model.config)?;
        let needs_color = metrics.iter().any(|m| *m == "psnr" || *m == "msssim");
        let colorized = if needs_color {
            prepared
                .iter()
                .enumerate()
                .map(|(i, p)| colorize(&model, &params, &p.gray, opts, i))
                .collect::<semcolor_core::Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        for &m in &metrics {
            let value = match m {
                "psnr" => mean(colorized.iter().zip(&prepared).map(|(c, p)| psnr(c, &p.rgb)))?,
                "msssim" => mean(colorized.iter().zip(&prepared).map(|(c, p)| ms_ssim(c, &p.rgb)))?,
                "miou" => {
                    let mut c = Confusion::new(model.config.num_classes);
                    for chunk in prepared.chunks(8) {
                        let grays: Vec<_> = chunk.iter().map(|p| &p.gray).collect();
                        for (pred, p) in model.predict_segmentation(&params, &grays)?.iter().zip(chunk) {
                            c.add(pred, &p.mask)?;
                        }
                    }
                    c.mean_iou()
                }
                _ => {
                    let grays: Vec<_> = prepared.iter().map(|p| p.gray.clone()).collect();
                    let r = diversity_report(&model, &params, &grays, a.pairs, opts)?;
                    let v = r.mean();
                    diversity = Some(r);
                    v
                }
            };
            rows.push((m, value));
        }
    }

    let mut report = String::from("split,metric,value\n");
    for (m, v) in &rows {
        report.push_str(&format!("{},{m},{v:?}\n", a.split));
        info!("{} {m} = {v:.4}", a.split);
    }
    let path = a.out.join("metrics.csv");
    fs::write(&path, report).with_context(|| format!("writing {}", path.display()))?;
    if let Some(r) = diversity {
        let hist = a.out.join("diversity_histogram.csv");
        fs::write(&hist, r.histogram_csv()).with_context(|| format!("writing {}", hist.display()))?;
        let scores: String = std::iter::once("pair,ms_ssim".to_string())
            .chain(r.scores.iter().enumerate().map(|(i, s)| format!("{i},{s:?}")))
            .map(|l| l + "\n")
            .collect();
        fs::write(a.out.join("diversity_scores.csv"), scores)?;
        info!("{}", r.summary());
    }
    info!("wrote {}", path.display());
    Ok(())
}

fn mean(values: impl Iterator<Item = semcolor_core::Result<f64>>) -> Result<f64> {
    let v = values.collect::<semcolor_core::Result<Vec<_>>>()?;
    Ok(v.iter().sum::<f64>() / v.len().max(1) as f64)
}
