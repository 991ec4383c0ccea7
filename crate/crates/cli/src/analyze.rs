//! `bir analyze` modes.
//!
//! Folders are matched by relative file name. For `metrics`, an image of a
//! different size than its reference (a downsampled degraded input, say)
//! is bicubic-upsampled first, which makes the report double as the
//! bicubic baseline.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ArgMatches;

use bir_adapter::analyze::{
    count_adapter_params, feature_similarity, format_db, ms_ssim, psnr, sharpness, shuffle_pixels, sweep_csv, xi_sweep,
};
use bir_adapter::denoiser::{layout, DenoiserConfig, PromptEmbedding, PromptRole};
use bir_adapter::image::{resize, ImageTensor, Kernel};
use bir_adapter::rng::{rng_at, streams};
use bir_adapter::sampler::Restorer;
use bir_adapter::train::ModelConfig;

use crate::run::{images_in, load_sampling, read_sidecar, Loaded};
use crate::AnalyzeCommand;

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// (relative name, clean, other) for every clean image.
fn pairs(clean: &Path, other: &Path) -> Result<Vec<(PathBuf, ImageTensor, ImageTensor)>> {
    images_in(clean)?
        .into_iter()
        .map(|(rel, path)| {
            let a = ImageTensor::load_png(&path)?;
            let b = ImageTensor::load_png(&other.join(&rel))
                .with_context(|| format!("no counterpart for {} in {}", rel.display(), other.display()))?;
            Ok((rel, a, b))
        })
        .collect()
}

fn at_size(img: &ImageTensor, like: &ImageTensor) -> Result<ImageTensor> {
    if (img.height(), img.width()) == (like.height(), like.width()) {
        return Ok(img.clone());
    }
    Ok(resize(img, like.height(), like.width(), Kernel::Bicubic)?.map(|v| v.clamp(0.0, 1.0)))
}

pub fn run(cmd: AnalyzeCommand, m: &ArgMatches) -> Result<()> {
    match cmd {
        AnalyzeCommand::Metrics { clean, other, out } => {
            let rows = pairs(&clean, &other)?;
            let mut csv = String::from("image,psnr,ms_ssim,sharpness\n");
            let (mut sp, mut ss, mut sh) = (0.0, 0.0, 0.0);
            for (rel, a, b) in &rows {
                let b = at_size(b, a)?;
                let (p, s, h) = (psnr(&b, a)?, ms_ssim(&b, a)?, sharpness(&b));
                sp += p;
                ss += s;
                sh += h;
                writeln!(csv, "{},{},{s:.6},{h:.6}", rel.display(), format_db(p))?;
            }
            let n = rows.len() as f64;
            writeln!(csv, "mean,{},{:.6},{:.6}", format_db(sp / n), ss / n, sh / n)?;
            emit(out.as_deref(), &csv)
        }
        AnalyzeCommand::Similarity {
            clean,
            degraded,
            model,
            t,
            seed,
            out,
        } => {
            let (cfg, d) = ModelConfig::load_dir(&model)?;
            let codec = cfg.codec()?;
            let prompt = PromptEmbedding::empty(d.config());
            let rows = pairs(&clean, &degraded)?;
            let mut sums: Vec<(String, f64, f64)> = Vec::new();
            for (i, (rel, a, b)) in rows.iter().enumerate() {
                let spec = read_sidecar(&degraded, rel).map_or_else(|| "unknown".to_string(), |s| s.spec);
                let real = feature_similarity(a, b, &d, &codec, t, &prompt, &spec)?;
                let shuffled = shuffle_pixels(a, &mut rng_at(seed, &[streams::ANALYZE, i as u64]));
                let base = feature_similarity(a, &shuffled, &d, &codec, t, &prompt, "shuffled")?;
                if sums.is_empty() {
                    sums = real.blocks.iter().map(|b| (b.label.clone(), 0.0, 0.0)).collect();
                }
                for ((_, r, s), (x, y)) in sums.iter_mut().zip(real.blocks.iter().zip(&base.blocks)) {
                    *r += x.cosine;
                    *s += y.cosine;
                }
            }
            let n = rows.len() as f64;
            let mut csv = String::from("block,cosine,shuffled\n");
            for (label, r, s) in &sums {
                writeln!(csv, "{label},{:.6},{:.6}", r / n, s / n)?;
            }
            emit(out.as_deref(), &csv)
        }
        AnalyzeCommand::XiSweep {
            clean,
            degraded,
            xis,
            out,
            sample,
        } => {
            if sample.init_dir.is_some() {
                bail!("xi-sweep uses bicubic initial restorations; --init-dir is not supported here");
            }
            let Loaded {
                model,
                denoiser,
                adapter,
                mut cfg,
            } = load_sampling(&sample, m)?;
            let rows = pairs(&clean, &degraded)?;
            let (a, b) = (&rows[0].1, &rows[0].2);
            if b.height() == 0 || a.height() % b.height() != 0 || a.height() / b.height() != a.width() / b.width() {
                bail!("clean images must be a whole multiple of the degraded size");
            }
            cfg.upscale = a.height() / b.height();
            let codec = model.codec()?;
            let schedule = model.schedule()?;
            let (pos, neg) = (model.prompt(PromptRole::Positive), model.prompt(PromptRole::Negative));
            let r = Restorer {
                denoiser: &denoiser,
                adapter: &adapter,
                codec: &codec,
                schedule: &schedule,
                positive: &pos,
                negative: &neg,
            };
            let pairs: Vec<_> = rows.into_iter().map(|(_, a, b)| (a, b)).collect();
            let sweep = xi_sweep(&pairs, &xis, &r, &cfg, None, sample.common.seed)?;
            emit(out.as_deref(), &sweep_csv(&sweep))
        }
        AnalyzeCommand::Params { model_config, sd15 } => {
            let cfg = if sd15 {
                DenoiserConfig::sd15()
            } else if let Some(p) = model_config {
                ModelConfig::load(&p)?.denoiser
            } else {
                ModelConfig::default().denoiser
            };
            let backbone = layout(&cfg)?.param_count();
            println!("backbone_params,{backbone}\nadapter_params,{}", count_adapter_params(&cfg)?);
            Ok(())
        }
    }
}
