//! End-to-end calibration run on synthetic textures: pretrain the backbone,
//! train an adapter on the benchmark cascade, then compare held-out PSNR of
//! bicubic upsampling, the zero-init adapter and the trained adapter, and
//! sweep the guidance threshold.
//!
//! `cargo run --release --example pilot -- [pretrain_steps] [train_steps] [codec_scale]`

use std::path::PathBuf;
use std::time::Instant;

use bir_adapter::analyze::{psnr, xi_sweep};
use bir_adapter::degrade::{apply_spec, DegradationSpec};
use bir_adapter::denoiser::{Denoiser, PromptRole};
use bir_adapter::image::{resize, Kernel};
use bir_adapter::sampler::{BicubicInit, RestoreConfig, Restorer};
use bir_adapter::train::{pretrain_backbone, train_loop, Dataset, DegradationSource, ModelConfig, PretrainConfig, TrainConfig};
use bir_adapter::{checkpoint, synth};

const SPEC: &str = "blur:2|down:4:bicubic|noise:20|jpeg:50";

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (pre_steps, train_steps, scale) = (arg(0, 10000.0) as usize, arg(1, 2000.0) as usize, arg(2, 1.0) as f32);
    let mut model = ModelConfig::default();
    model.codec.scale = scale;
    let out = PathBuf::from(std::env::var("PILOT_DIR").unwrap_or_else(|_| "/tmp/pilot".into()));
    std::fs::create_dir_all(&out)?;

    let train = Dataset::from_images(synth::textures(0, 200, 64))?;
    let held: Vec<_> = synth::textures(1_000_000, 20, 64);

    let t0 = Instant::now();
    let reuse = out.join("backbone.bira");
    let d = if std::env::var("PILOT_REUSE").is_ok() && reuse.exists() {
        checkpoint::load_backbone(&reuse, model.denoiser.clone())?
    } else {
        let mut d = Denoiser::new(model.denoiser.clone(), 0)?;
        let pc = PretrainConfig { steps: pre_steps, ..PretrainConfig::default() };
        let mut report = |s: usize, l: f64| {
            if s.is_multiple_of(250) {
                eprintln!("pretrain {s} loss {l:.4} ({:.0}s)", t0.elapsed().as_secs_f64());
            }
        };
        let losses = pretrain_backbone(&pc, &model, &mut d, &train, Some(&mut report))?;
        let tail = &losses[losses.len().saturating_sub(100)..];
        eprintln!("pretrain mean loss of last 100: {:.4}", tail.iter().sum::<f64>() / tail.len() as f64);
        checkpoint::save_backbone(&reuse, &d)?;
        model.save(&out.join("model.json"))?;
        d
    };
    let batch = std::env::var("PILOT_BATCH").ok().and_then(|s| s.parse().ok()).unwrap_or(8);
    let lr = std::env::var("PILOT_LR").ok().and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let codec = model.codec()?;
    let schedule = model.schedule()?;
    let cfg = TrainConfig {
        steps: train_steps,
        lr,
        batch,
        out_dir: out.join("adapter"),
        checkpoint_every: train_steps.max(1),
        degradation: DegradationSource::Fixed(SPEC.into()),
        ..TrainConfig::default()
    };
    let t1 = Instant::now();
    let mut report = |s: usize, l: f64| {
        if s.is_multiple_of(250) {
            eprintln!("adapter {s} loss {l:.4} ({:.0}s)", t1.elapsed().as_secs_f64());
        }
    };
    let ckpt = train_loop(&cfg, &d, &codec, &schedule, &train, Some(&mut report))?;
    let trained = checkpoint::load_adapter(&ckpt)?;
    let zero = d.init_adapter();

    let pairs: Vec<_> = held
        .iter()
        .enumerate()
        .map(|(i, c)| Ok((c.clone(), apply_spec(c, &DegradationSpec::parse(SPEC, 77 + i as u64)?)?)))
        .collect::<anyhow::Result<_>>()?;
    let bicubic: f64 = pairs
        .iter()
        .map(|(c, lr)| psnr(&resize(lr, 64, 64, Kernel::Bicubic).unwrap().map(|v| v.clamp(0.0, 1.0)), c).unwrap())
        .sum::<f64>()
        / pairs.len() as f64;
    let pos = model.prompt(PromptRole::Positive);
    let neg = model.prompt(PromptRole::Negative);
    for (label, adapter) in [("zero-init", &zero), ("trained", &trained)] {
        let r = Restorer { denoiser: &d, adapter, codec: &codec, schedule: &schedule, positive: &pos, negative: &neg };
        for (cfg_w, xi) in [(9.0, 0.9), (1.0, 0.9), (9.0, 1.0), (1.0, 1.0)] {
            let mut rc = RestoreConfig::default();
            rc.guidance.cfg_weight = cfg_w;
            rc.guidance.xi = xi;
            let mean: f64 = pairs
                .iter()
                .enumerate()
                .map(|(i, (c, lr))| psnr(&r.restore(lr, &BicubicInit, &rc, i as u64).unwrap().image, c).unwrap())
                .sum::<f64>()
                / pairs.len() as f64;
            println!("{label} cfg {cfg_w} xi {xi}: {mean:.3} dB");
        }
    }
    println!("bicubic: {bicubic:.3} dB");
    let r = Restorer { denoiser: &d, adapter: &trained, codec: &codec, schedule: &schedule, positive: &pos, negative: &neg };
    let rows = xi_sweep(&pairs, &[0.0, 0.25, 0.5, 0.75, 0.9, 1.0], &r, &RestoreConfig::default(), None, 0)?;
    for row in rows {
        println!("xi {:.2}: psnr {:.3} sharp {:.4}", row.xi, row.psnr, row.sharpness);
    }
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
    Ok(())
}
