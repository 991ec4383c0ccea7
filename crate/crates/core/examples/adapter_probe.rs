//! Per-timestep loss of the zero-init vs a trained adapter on held-out
//! pairs, plus the PSNR of the decoded one-shot clean estimate.
//!
//! `cargo run --release --example adapter_probe -- <model_dir> <adapter.bira>`

use std::path::PathBuf;

use bir_adapter::analyze::psnr;
use bir_adapter::checkpoint;
use bir_adapter::degrade::DegradationSpec;
use bir_adapter::denoiser::{context_batch, PromptEmbedding};
use bir_adapter::rng::{gaussian, rng_at};
use bir_adapter::synth;
use bir_adapter::train::{degrade_to_size, loss, Batch, ModelConfig};
use bir_adapter::Tensor;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (model, d) = ModelConfig::load_dir(&PathBuf::from(&args[0]))?;
    let trained = checkpoint::load_adapter(&PathBuf::from(&args[1]))?;
    let zero = d.init_adapter();
    let codec = model.codec()?;
    let s = model.schedule()?;
    let prompt = PromptEmbedding::empty(d.config());
    let held = synth::textures(1_000_000, 16, 64);
    let mut x0s = Vec::new();
    let mut xds = Vec::new();
    for (i, c) in held.iter().enumerate() {
        let spec = DegradationSpec::parse("blur:2|down:4:bicubic|noise:20|jpeg:50", i as u64)?;
        x0s.push(codec.encode(c)?);
        xds.push(codec.encode(&degrade_to_size(c, &spec)?)?);
    }
    let x0 = Tensor::stack(&x0s)?;
    let xd = Tensor::stack(&xds)?;
    let eps = gaussian(&mut rng_at(5, &[]), x0.shape().to_vec());
    for t in [10, 100, 300, 500, 700, 850, 950, 999] {
        let b = Batch { x0: x0.clone(), x_deg: xd.clone(), eps: eps.clone(), ts: vec![t; held.len()] };
        let lz = loss(&d, &zero, &s, &b, &prompt)?;
        let lt = loss(&d, &trained, &s, &b, &prompt)?;
        // one-shot clean estimate PSNR
        let x_t = b.diffused(&s)?;
        let ctx = context_batch(&vec![&prompt; held.len()])?;
        let mut pz = 0.0;
        let mut pt = 0.0;
        for (a, acc) in [(&zero, &mut pz), (&trained, &mut pt)] {
            let e = d.predict_noise_adapted_batch(&xd, &x_t, &b.ts, &ctx, a)?;
            for i in 0..held.len() {
                let x0h = s.estimate_x0(&x_t.batch_item(i)?, &e.batch_item(i)?, t)?;
                *acc += psnr(&codec.decode(&x0h)?, &held[i])?;
            }
        }
        let n = held.len() as f64;
        println!("t {t:4}: loss zero {lz:.4} trained {lt:.4} | x0 psnr zero {:.2} trained {:.2}", pz / n, pt / n);
    }
    Ok(())
}
