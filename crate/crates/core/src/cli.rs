//! Command-line interface of the `gated` binary.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::agcm::gamma_to_display;
use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::data::{scan_dataset, Layout, Split};
use crate::error::{Error, Result};
use crate::image::{crop, crop_planar, load_image_with, reflect_pad, resize_bilinear, save_image, save_planar, LoadOptions};
use crate::metrics::{evaluate, EvalOptions, ExternalScorer, Identity, Metric};
use crate::model::Model;
use crate::trainer::{TrainData, Trainer};
use crate::unet::SIZE_MULTIPLE;

#[derive(Debug, Parser)]
#[command(name = "gated", version, about = "Two-stage low-light image enhancement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a TOML configuration.
    Train(TrainArgs),
    /// Enhance one image or every image in a directory.
    Enhance(EnhanceArgs),
    /// Score a checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
    /// Print statistics of the predicted gamma map.
    InspectGamma(InspectArgs),
    /// Write the scanned dataset manifest as JSON lines.
    ExportManifest(ManifestArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Configuration file; built-in defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `section.key=value`, applied after the file is read.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image file or directory of images.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Also write the gamma-corrected image and the gamma map.
    #[arg(long)]
    pub save_intermediate: bool,
    /// Resize to HxW instead of running at native resolution.
    #[arg(long, value_parser = parse_size)]
    pub size: Option<(usize, usize)>,
    #[arg(long)]
    pub replicate_grayscale: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Model to score; `--identity` scores the unmodified inputs instead.
    #[arg(long, required_unless_present = "identity")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, conflicts_with = "checkpoint")]
    pub identity: bool,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "auto")]
    pub layout: String,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    /// Comma-separated built-in metrics (psnr, ssim, mae); may be empty.
    #[arg(long, default_value = "psnr,ssim,mae")]
    pub metrics: String,
    /// External scorer as `name=fr:command` or `name=nr:command`.
    #[arg(long = "scorer", value_name = "SPEC")]
    pub scorers: Vec<String>,
    /// Evaluate at native resolution (pad to a multiple of 16, crop back).
    #[arg(long, conflicts_with = "size")]
    pub native: bool,
    #[arg(long, value_parser = parse_size, default_value = "128x128")]
    pub size: (usize, usize),
    /// Directory for `per_image.csv` and `aggregate.json`.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Write the gamma map, mapped from [0.5, 2] to [0, 1], as a PNG.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_parser = parse_size)]
    pub size: Option<(usize, usize)>,
}

#[derive(Debug, Args)]
pub struct ManifestArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "auto")]
    pub layout: String,
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW")?;
    let h: usize = h.parse().map_err(|_| format!("bad height `{h}`"))?;
    let w: usize = w.parse().map_err(|_| format!("bad width `{w}`"))?;
    if h == 0 || w == 0 {
        return Err("size must be positive".into());
    }
    Ok((h, w))
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err("expected `train` or `test`".into()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let config = match &args.config {
        Some(p) => Config::load(p, &args.overrides)?,
        None => Config::from_toml_with_overrides("", &args.overrides)?,
    };
    config.data_root()?;
    let data = TrainData::load(&config)?;
    let mut trainer = match &args.resume {
        Some(p) => Trainer::resume(config, Checkpoint::load(p)?)?,
        None => Trainer::new(config)?,
    };
    let summary = trainer.fit(&data, |rec| {
        log::info!(
            "epoch {} step {} loss {:.5} lr {:.3e} |g| {:.3}",
            rec.epoch,
            rec.step,
            rec.loss["total"],
            rec.lr,
            rec.grad_norm
        );
    })?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("plain data serialises"));
    Ok(())
}

fn list_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        let mut out = Vec::new();
        for e in std::fs::read_dir(input).map_err(|e| Error::io(input, e))? {
            let p = e.map_err(|e| Error::io(input, e))?.path();
            let is_img = p
                .extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"));
            if p.is_file() && is_img {
                out.push(p);
            }
        }
        out.sort();
        Ok(out)
    } else if input.is_file() {
        Ok(vec![input.to_path_buf()])
    } else {
        Err(Error::io(input, std::io::Error::from(std::io::ErrorKind::NotFound)))
    }
}

/// Gamma map mapped onto `[0, 1]` for display.
pub fn gamma_visualization(gamma: &gated_tensor::Tensor<f32>) -> gated_tensor::Tensor<f32> {
    gamma.map(gamma_to_display)
}

pub fn cmd_enhance(args: &EnhanceArgs) -> Result<()> {
    let model = Checkpoint::load(&args.checkpoint)?.model;
    let inputs = list_inputs(&args.input)?;
    create_dir(&args.output)?;
    let opts = LoadOptions {
        replicate_grayscale: args.replicate_grayscale,
    };
    for path in &inputs {
        let img = load_image_with(path, opts)?;
        let img = match args.size {
            Some((h, w)) => resize_bilinear(&img, h, w)?,
            None => img,
        };
        let (h, w) = (img.height(), img.width());
        let padded = if h % SIZE_MULTIPLE == 0 && w % SIZE_MULTIPLE == 0 {
            img.clone()
        } else {
            reflect_pad(&img, SIZE_MULTIPLE)?
        };
        let out = model.enhance(&padded)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        save_image(&crop(&out.output, h, w)?, args.output.join(format!("{stem}_enhanced.png")))?;
        if args.save_intermediate {
            save_image(&crop(&out.stage1, h, w)?, args.output.join(format!("{stem}_stage1.png")))?;
            let gamma = crop_planar(&out.gamma, h, w)?;
            save_planar(&gamma_visualization(&gamma), args.output.join(format!("{stem}_gamma.png")))?;
        }
        log::info!("enhanced {}", path.display());
    }
    println!("enhanced {} image(s) into {}", inputs.len(), args.output.display());
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let layout: Layout = args.layout.parse()?;
    let mut metrics = Vec::new();
    for name in args.metrics.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        metrics.push(Metric::parse(name).ok_or_else(|| Error::config("metrics", format!("unknown metric `{name}`")))?);
    }
    let scorers = args
        .scorers
        .iter()
        .map(|s| ExternalScorer::parse(s))
        .collect::<Result<Vec<_>>>()?;
    let ds = scan_dataset(&args.data, layout)?;
    let mut manifest = ds.split(args.split).clone();
    if let Some(n) = args.limit {
        manifest.truncate(n);
    }
    let opts = EvalOptions {
        size: (!args.native).then_some(args.size),
        metrics,
        scorers,
        work_dir: args.output.as_ref().map(|d| d.join("scorer_inputs")),
        ..EvalOptions::default()
    };
    if let Some(d) = &args.output {
        create_dir(d)?;
    }
    let report = if args.identity {
        evaluate(&Identity, &manifest, &opts)?
    } else {
        let model: Model<f32> = Checkpoint::load(args.checkpoint.as_ref().expect("required by clap"))?.model;
        evaluate(&model, &manifest, &opts)?
    };
    println!("{}", report.table());
    if let Some(d) = &args.output {
        report.write_csv(&d.join("per_image.csv"))?;
        report.write_json(&d.join("aggregate.json"))?;
    }
    Ok(())
}

pub fn cmd_inspect_gamma(args: &InspectArgs) -> Result<()> {
    let model = Checkpoint::load(&args.checkpoint)?.model;
    let img = load_image_with(&args.input, LoadOptions::default())?;
    let img = match args.size {
        Some((h, w)) => resize_bilinear(&img, h, w)?,
        None => img,
    };
    let (h, w) = (img.height(), img.width());
    let padded = reflect_pad(&img, SIZE_MULTIPLE)?;
    let gamma = crop_planar(&model.enhance(&padded)?.gamma, h, w)?;
    let plane = h * w;
    println!("channel       min      mean       max");
    for (c, name) in ["r", "g", "b"].iter().enumerate() {
        let p = &gamma.data()[c * plane..(c + 1) * plane];
        let min = p.iter().copied().fold(f32::INFINITY, f32::min);
        let max = p.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mean = p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        println!("{name:>7} {min:>9.4} {mean:>9.4} {max:>9.4}");
    }
    if let Some(out) = &args.output {
        save_planar(&gamma_visualization(&gamma), out)?;
    }
    Ok(())
}

pub fn cmd_export_manifest(args: &ManifestArgs) -> Result<()> {
    let layout: Layout = args.layout.parse()?;
    let ds = scan_dataset(&args.data, layout)?;
    for w in &ds.warnings {
        eprintln!("warning: {w}");
    }
    match &args.output {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            let f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
            ds.write_jsonl(std::io::BufWriter::new(f)).map_err(|e| Error::io(p, e))?;
        }
        None => ds
            .write_jsonl(std::io::stdout().lock())
            .map_err(|e| Error::io("<stdout>", e))?,
    }
    eprintln!(
        "{}: {} train / {} test entries",
        ds.layout,
        ds.train.len(),
        ds.test.len()
    );
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Enhance(a) => cmd_enhance(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::InspectGamma(a) => cmd_inspect_gamma(a),
        Command::ExportManifest(a) => cmd_export_manifest(a),
    }
}

/// Parse the process arguments, run the command and return the exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

