//! `bir`: batch front end for degradation, training, restoration and
//! analysis.
//!
//! Failures print a single line `error: <kind>: <message>` to stderr and
//! exit with status 1 (status 2 for command-line usage errors).

mod analyze;
mod config;
mod pool;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "bir", version, about = "Blind image restoration with a self-attention adapter on a latent denoiser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write procedural texture PNGs (plus manifest.txt) for toy experiments.
    Synth(SynthArgs),
    /// Degrade every PNG in a folder and write per-image spec sidecars.
    Degrade(DegradeArgs),
    /// Pretrain a toy backbone and write a model directory.
    Pretrain(PretrainArgs),
    /// Train an adapter against a frozen model directory.
    Train(TrainArgs),
    /// Restore every PNG in a folder.
    Restore(RestoreArgs),
    /// Metrics, feature similarity, guidance sweeps and parameter counts.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Print a default configuration file as JSON.
    Defaults {
        /// One of: model, pretrain, train, restore.
        kind: String,
    },
}

/// Options shared by commands that take a configuration file.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON configuration file; may be partial.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dotted override such as `xi=0.75` or `degradation.random.op_probability=0.5`; repeatable, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Root seed; per-image and per-step seeds are derived from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; outputs do not depend on this.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Seed of the first texture; image i uses first + i.
    #[arg(long, default_value_t = 0)]
    pub first: u64,
}

#[derive(Args, Debug)]
pub struct DegradeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Cascade in text form, e.g. `blur:2|down:4:bicubic|noise:20|jpeg:50`.
    #[arg(long, default_value = "blur:2|down:4:bicubic|noise:20|jpeg:50", conflicts_with = "random")]
    pub spec: String,
    /// Draw a random cascade per image instead of using --spec.
    #[arg(long, default_value_t = false)]
    pub random: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Folder of clean training PNGs.
    #[arg(long)]
    pub data: PathBuf,
    /// Output model directory (model.json, backbone.bira, pretrain log).
    #[arg(long)]
    pub model: PathBuf,
    /// Model configuration JSON; the toy model when omitted.
    #[arg(long, value_name = "FILE")]
    pub model_config: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Model directory written by `bir pretrain`.
    #[arg(long, default_value = "model")]
    pub model: PathBuf,
    /// Clean training PNG folder (overrides `dataset`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory for checkpoints and the log (overrides `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

/// Sampling options shared by `restore` and `analyze xi-sweep`.
#[derive(Args, Debug, Clone)]
pub struct SampleArgs {
    /// Model directory written by `bir pretrain`.
    #[arg(long, default_value = "model")]
    pub model: PathBuf,
    /// Adapter checkpoint [default: zero-initialized adapter].
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Guidance threshold: guide while t / T > xi.
    #[arg(long, default_value_t = 0.9)]
    pub xi: f64,
    /// Number of sampling steps.
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    /// Classifier-free guidance weight.
    #[arg(long = "cfg", default_value_t = 9.0)]
    pub cfg_weight: f64,
    /// Latent tile side.
    #[arg(long, default_value_t = 64)]
    pub tile: usize,
    /// Latent tile stride.
    #[arg(long, default_value_t = 32)]
    pub stride: usize,
    /// Process the whole latent as one region.
    #[arg(long, default_value_t = false)]
    pub untiled: bool,
    /// Skip guided sampling entirely.
    #[arg(long, default_value_t = false)]
    pub no_guidance: bool,
    /// Initial restorations with the same file names [default: bicubic upsampling].
    #[arg(long)]
    pub init_dir: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct RestoreArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Output size as a multiple of the input size.
    #[arg(long, default_value_t = 4)]
    pub upscale: usize,
    #[command(flatten)]
    pub sample: SampleArgs,
}

#[derive(Subcommand, Debug)]
pub enum AnalyzeCommand {
    /// Per-image PSNR, MS-SSIM and sharpness of a folder against clean references.
    Metrics {
        #[arg(long)]
        clean: PathBuf,
        /// Degraded or restored images with the same file names.
        #[arg(long)]
        other: PathBuf,
        /// CSV output [default: stdout].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-block feature cosine similarity of clean vs degraded images.
    Similarity {
        #[arg(long)]
        clean: PathBuf,
        /// Same-size degraded images with the same file names.
        #[arg(long)]
        degraded: PathBuf,
        #[arg(long, default_value = "model")]
        model: PathBuf,
        /// Timestep whose embedding the features are taken at.
        #[arg(long, default_value_t = 0)]
        t: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean PSNR and sharpness of restorations over guidance thresholds.
    XiSweep {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        degraded: PathBuf,
        /// Comma-separated thresholds.
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,0.9,1")]
        xis: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        sample: SampleArgs,
    },
    /// Backbone and adapter parameter counts.
    Params {
        /// Model configuration JSON [default: the toy model].
        #[arg(long, value_name = "FILE", conflicts_with = "sd15")]
        model_config: Option<PathBuf>,
        /// Count the full-size (SD-1.5 dimension) configuration.
        #[arg(long, default_value_t = false)]
        sd15: bool,
    },
}

/// Whether `id` was typed on the command line (as opposed to a default).
pub fn explicit(m: &ArgMatches, id: &str) -> bool {
    matches!(m.value_source(id), Some(ValueSource::CommandLine))
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(b) = cause.downcast_ref::<bir_adapter::Error>() {
            return b.kind();
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
        if cause.is::<serde_json::Error>() {
            return "json";
        }
    }
    "config"
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::from_arg_matches(&matches).expect("matches come from the same parser");
    let sub = matches.subcommand().map(|(_, m)| m).expect("a subcommand is required");
    match run::dispatch(cli.command, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {}: {msg}", error_kind(&e));
            ExitCode::from(1)
        }
    }
}
