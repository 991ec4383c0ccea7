//! Command implementations other than `analyze`.
//!
//! Seeds: image `i` of a folder (in listing order) degrades with
//! `derive(seed, [DEGRADE, i])` and restores with `derive(seed, [i])`.
//! Training derives its per-step, per-item streams from the config seed.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ArgMatches;
use serde::{Deserialize, Serialize};

use bir_adapter::degrade::{apply_spec, sample_spec, DegradationSpec};
use bir_adapter::denoiser::{AdapterParams, Denoiser, PromptRole};
use bir_adapter::image::ImageTensor;
use bir_adapter::rng::{derive, rng_at, streams};
use bir_adapter::sampler::{BicubicInit, ImageInit, InitProvider, RestoreConfig, RestoreManifest, Restorer};
use bir_adapter::train::{
    list_images, pretrain_backbone, train_loop, Dataset, ModelConfig, PretrainConfig, TrainConfig,
};
use bir_adapter::{checkpoint, synth};

use crate::{config, explicit, pool, Command, DegradeArgs, PretrainArgs, RestoreArgs, SampleArgs, TrainArgs};

pub fn dispatch(cmd: Command, m: &ArgMatches) -> Result<()> {
    match cmd {
        Command::Synth(a) => {
            let paths = synth::write_dataset(&a.out, a.first, a.count, a.size)?;
            println!("wrote {} images to {}", paths.len(), a.out.display());
            Ok(())
        }
        Command::Degrade(a) => degrade(&a),
        Command::Pretrain(a) => pretrain(&a, m),
        Command::Train(a) => train(&a, m),
        Command::Restore(a) => restore(&a, m),
        Command::Analyze(a) => {
            let inner = m.subcommand().map(|(_, m)| m).expect("analyze needs a mode");
            crate::analyze::run(a, inner)
        }
        Command::Defaults { kind } => {
            let text = match kind.as_str() {
                "model" => serde_json::to_string_pretty(&ModelConfig::default())?,
                "pretrain" => serde_json::to_string_pretty(&PretrainConfig::default())?,
                "train" => serde_json::to_string_pretty(&TrainConfig::default())?,
                "restore" => serde_json::to_string_pretty(&RestoreConfig::default())?,
                other => bail!("unknown configuration kind `{other}` (model, pretrain, train, restore)"),
            };
            println!("{text}");
            Ok(())
        }
    }
}

/// PNGs under `dir` as (path relative to `dir`, full path).
pub fn images_in(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let list = list_images(dir)?;
    if list.is_empty() {
        bail!(bir_adapter::Error::Dataset(format!("no PNG files under {}", dir.display())));
    }
    Ok(list
        .into_iter()
        .map(|p| (p.strip_prefix(dir).unwrap_or(&p).to_path_buf(), p))
        .collect())
}

fn write_png(root: &Path, rel: &Path, img: &ImageTensor) -> Result<()> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    img.save_png(&path)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_manifest(root: &Path, rels: &[&Path]) -> Result<()> {
    let text: String = rels.iter().map(|r| format!("{}\n", r.display())).collect();
    let path = root.join("manifest.txt");
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

/// What `degrade` records next to each output image.
#[derive(Debug, Serialize, Deserialize)]
pub struct SpecSidecar {
    pub source: PathBuf,
    pub spec: String,
    pub seed: u64,
}

pub fn sidecar_path(root: &Path, rel: &Path) -> PathBuf {
    root.join(rel).with_extension("spec.json")
}

pub fn read_sidecar(root: &Path, rel: &Path) -> Option<SpecSidecar> {
    let text = fs::read_to_string(sidecar_path(root, rel)).ok()?;
    serde_json::from_str(&text).ok()
}

fn degrade(a: &DegradeArgs) -> Result<()> {
    let images = images_in(&a.input)?;
    if !a.random {
        // fail early on a bad spec string
        DegradationSpec::parse(&a.spec, 0)?;
    }
    let results = pool::map_indexed(images.len(), a.jobs, || (), |_, i| -> Result<()> {
        let (rel, path) = &images[i];
        let spec_seed = derive(a.seed, &[streams::DEGRADE, i as u64]);
        let spec = if a.random {
            sample_spec(&mut rng_at(spec_seed, &[]))
        } else {
            DegradationSpec::parse(&a.spec, spec_seed)?
        };
        let clean = ImageTensor::load_png(path)?;
        let out = apply_spec(&clean, &spec).with_context(|| format!("degrading {}", rel.display()))?;
        write_png(&a.output, rel, &out)?;
        let side = SpecSidecar {
            source: rel.clone(),
            spec: spec.to_string(),
            seed: spec.seed,
        };
        write_json(&sidecar_path(&a.output, rel), &side)
    });
    results.into_iter().collect::<Result<Vec<_>>>()?;
    write_manifest(&a.output, &images.iter().map(|(r, _)| r.as_path()).collect::<Vec<_>>())?;
    println!("degraded {} images into {}", images.len(), a.output.display());
    Ok(())
}

/// Prints roughly twenty progress lines over a run.
fn progress(label: &'static str, total: usize) -> impl FnMut(usize, f64) {
    let every = (total / 20).max(1);
    move |step, loss| {
        if step % every == 0 || step == total {
            eprintln!("{label} step {step}/{total} loss {loss:.5}");
        }
    }
}

fn pretrain(a: &PretrainArgs, m: &ArgMatches) -> Result<()> {
    let mut cfg: PretrainConfig = config::resolve(a.common.config.as_deref(), &a.common.set)?;
    if explicit(m, "seed") {
        cfg.seed = a.common.seed;
    }
    let model = match &a.model_config {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::default(),
    };
    let data = Dataset::open(&a.data)?;
    let mut d = Denoiser::new(model.denoiser.clone(), cfg.seed)?;
    let mut report = progress("pretrain", cfg.steps);
    let losses = pretrain_backbone(&cfg, &model, &mut d, &data, Some(&mut report))?;
    model.save_dir(&a.model, &d)?;
    write_json(&a.model.join("pretrain_config.json"), &cfg)?;
    let log: String = std::iter::once("step,loss\n".to_string())
        .chain(losses.iter().enumerate().map(|(i, l)| format!("{},{l:.6e}\n", i + 1)))
        .collect();
    let log_path = a.model.join("pretrain_log.csv");
    fs::write(&log_path, log).with_context(|| format!("writing {}", log_path.display()))?;
    println!("{}", a.model.display());
    Ok(())
}

fn train(a: &TrainArgs, m: &ArgMatches) -> Result<()> {
    let mut cfg: TrainConfig = config::resolve(a.common.config.as_deref(), &a.common.set)?;
    if let Some(d) = &a.data {
        cfg.dataset = d.clone();
    }
    if let Some(o) = &a.out {
        cfg.out_dir = o.clone();
    }
    if explicit(m, "seed") {
        cfg.seed = a.common.seed;
    }
    let (model, d) = ModelConfig::load_dir(&a.model)?;
    let data = Dataset::open(&cfg.dataset)?;
    write_json(&cfg.out_dir.join("train_config.json"), &cfg)?;
    let mut report = progress("train", cfg.steps);
    let ckpt = train_loop(&cfg, &d, &model.codec()?, &model.schedule()?, &data, Some(&mut report))?;
    println!("{}", ckpt.display());
    Ok(())
}

/// The frozen model, adapter and resolved sampling configuration.
pub struct Loaded {
    pub model: ModelConfig,
    pub denoiser: Denoiser,
    pub adapter: AdapterParams,
    pub cfg: RestoreConfig,
}

/// Resolves defaults, `--config`, `--set`, then explicitly typed flags.
pub fn load_sampling(s: &SampleArgs, m: &ArgMatches) -> Result<Loaded> {
    let mut cfg: RestoreConfig = config::resolve(s.common.config.as_deref(), &s.common.set)?;
    if explicit(m, "xi") {
        cfg.guidance.xi = s.xi;
    }
    if explicit(m, "cfg_weight") {
        cfg.guidance.cfg_weight = s.cfg_weight;
    }
    if explicit(m, "steps") {
        cfg.steps = s.steps;
    }
    if explicit(m, "tile") {
        cfg.tile = s.tile;
    }
    if explicit(m, "stride") {
        cfg.stride = s.stride;
    }
    if s.untiled {
        cfg.untiled = true;
    }
    if s.no_guidance {
        cfg.ablate_guidance = true;
    }
    let (model, denoiser) = ModelConfig::load_dir(&s.model)?;
    let adapter = match &s.adapter {
        Some(p) => checkpoint::load_adapter(p)?,
        None => denoiser.init_adapter(),
    };
    denoiser.check_adapter(&adapter)?;
    Ok(Loaded {
        model,
        denoiser,
        adapter,
        cfg,
    })
}

#[derive(Serialize)]
struct ImageRecord<'a> {
    file: &'a Path,
    #[serde(flatten)]
    run: &'a RestoreManifest,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'static str,
    seed: u64,
    model: &'a Path,
    adapter: Option<&'a Path>,
    init_dir: Option<&'a Path>,
    config: &'a RestoreConfig,
    images: Vec<ImageRecord<'a>>,
}

fn restore(a: &RestoreArgs, m: &ArgMatches) -> Result<()> {
    let s = &a.sample;
    let mut loaded = load_sampling(s, m)?;
    if explicit(m, "upscale") {
        loaded.cfg.upscale = a.upscale;
    }
    let Loaded {
        model,
        denoiser,
        adapter,
        cfg,
    } = &loaded;
    let images = images_in(&a.input)?;
    let codec = model.codec()?;
    let schedule = model.schedule()?;
    let (pos, neg) = (model.prompt(PromptRole::Positive), model.prompt(PromptRole::Negative));
    let seed = s.common.seed;
    let results = pool::map_indexed(
        images.len(),
        s.common.jobs,
        // each worker owns a codec so encode counts stay per image
        || codec.clone(),
        |codec, i| -> Result<RestoreManifest> {
            let (rel, path) = &images[i];
            let degraded = ImageTensor::load_png(path)?;
            let init: Box<dyn InitProvider> = match &s.init_dir {
                Some(dir) => Box::new(ImageInit {
                    label: format!("{}", dir.join(rel).display()),
                    image: ImageTensor::load_png(&dir.join(rel))?,
                }),
                None => Box::new(BicubicInit),
            };
            let r = Restorer {
                denoiser,
                adapter,
                codec,
                schedule: &schedule,
                positive: &pos,
                negative: &neg,
            };
            let mut out = r
                .restore(&degraded, init.as_ref(), cfg, derive(seed, &[i as u64]))
                .with_context(|| format!("restoring {}", rel.display()))?;
            out.manifest.spec = read_sidecar(&a.input, rel).map(|sc| sc.spec);
            write_png(&a.output, rel, &out.image)?;
            Ok(out.manifest)
        },
    );
    let manifests = results.into_iter().collect::<Result<Vec<_>>>()?;
    let run = RunManifest {
        command: "restore",
        seed,
        model: &s.model,
        adapter: s.adapter.as_deref(),
        init_dir: s.init_dir.as_deref(),
        config: cfg,
        images: images
            .iter()
            .zip(&manifests)
            .map(|((rel, _), run)| ImageRecord { file: rel, run })
            .collect(),
    };
    write_json(&a.output.join("manifest.json"), &run)?;
    write_manifest(&a.output, &images.iter().map(|(r, _)| r.as_path()).collect::<Vec<_>>())?;
    println!("restored {} images into {}", images.len(), a.output.display());
    Ok(())
}
