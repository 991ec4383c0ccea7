//! Guided, tiled DDIM restoration.
//!
//! One restore call upsamples the degraded image to the target size,
//! encodes it once into the conditioning latent `x_deg`, draws `x_T` and
//! runs the strided DDIM schedule. Each step splits the current latent into
//! tiles, predicts noise per tile with classifier-free guidance over the
//! positive and negative prompts, estimates `x_{t->0}`, optionally pulls it
//! toward the latent of an initial restoration, recombines to the next
//! timestep and merges the tiles back.
//!
//! The guidance pull only acts while `t / T > xi`, where `t` is the
//! timestep on the full training schedule. It is weighted per position by
//! `W = 1 - normalized Sobel magnitude` of the initial restoration, so flat
//! regions follow the initial restoration and edges are left to the model.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::denoiser::{context_batch, AdapterParams, Denoiser, PromptEmbedding};
use crate::error::{invalid, shape_err, Error, Result};
use crate::image::{luma, resize, resize_planes, sobel_magnitude, ImageTensor, Kernel};
use crate::rng::{gaussian, rng_at, streams};
use crate::schedule::DiffusionSchedule;
use crate::tensor::{LatentTensor, Tensor};
use crate::tiling::TilePlan;

/// Guidance threshold and classifier-free guidance weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub xi: f64,
    pub cfg_weight: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            xi: 0.9,
            cfg_weight: 9.0,
        }
    }
}

/// Prepared guidance: the weight map `[H, W]` at latent resolution and the
/// latent of the initial restoration.
#[derive(Clone, Debug, PartialEq)]
pub struct Guide {
    pub weights: Tensor<f32>,
    pub init_latent: LatentTensor,
    pub xi: f64,
}

impl Guide {
    pub fn new(weights: Tensor<f32>, init_latent: LatentTensor, xi: f64) -> Result<Self> {
        let [_, h, w] = init_latent.chw()?;
        weights.expect_shape(&[h, w])?;
        if !(0.0..=1.0).contains(&xi) {
            return Err(invalid!("xi must lie in [0, 1], got {}", xi));
        }
        if weights.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid!("guidance weights must lie in [0, 1]"));
        }
        Ok(Guide {
            weights,
            init_latent,
            xi,
        })
    }

    fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Guide> {
        let wts = self.weights.clone().reshape([1, self.weights.dim(0), self.weights.dim(1)])?;
        Ok(Guide {
            weights: wts.crop(y, x, h, w)?.reshape([h, w])?,
            init_latent: self.init_latent.crop(y, x, h, w)?,
            xi: self.xi,
        })
    }
}

/// `W = 1 - G(init)`: Sobel magnitude of the luma, area-resampled to
/// `latent_hw` and divided by its global maximum. A flat image gives
/// `W = 1` everywhere.
pub fn guidance_weights(init: &ImageTensor, latent_hw: (usize, usize)) -> Result<Tensor<f32>> {
    let (lh, lw) = latent_hw;
    if lh == 0 || lw == 0 || lh > init.height() || lw > init.width() {
        return Err(invalid!(
            "cannot build {}x{} guidance weights for a {}x{} image",
            lh,
            lw,
            init.height(),
            init.width()
        ));
    }
    let (h, w) = (init.height(), init.width());
    let grad = Tensor::new([1, h, w], sobel_magnitude(&luma(init), h, w))?;
    let small = resize_planes(&grad, lh, lw, Kernel::Area)?;
    let max = small.data().iter().fold(0f32, |m, v| m.max(*v));
    let weights = small.map(|v| if max > 0.0 { 1.0 - (v / max).clamp(0.0, 1.0) } else { 1.0 });
    weights.reshape([lh, lw])
}

/// Whether step `t` of a `total`-step schedule is guided under threshold `xi`.
pub fn is_guided(t: usize, total: usize, xi: f64) -> bool {
    t as f64 / total as f64 > xi
}

/// `x0 + W * (init - x0)` while `t / T > xi`, otherwise `x0` unchanged. `W`
/// is one `[H, W]` map shared by all channels.
pub fn apply_guidance(
    x0: &LatentTensor,
    weights: &Tensor<f32>,
    init_latent: &LatentTensor,
    t: usize,
    total: usize,
    xi: f64,
) -> Result<LatentTensor> {
    x0.expect_same_shape(init_latent)?;
    let [_, h, w] = x0.chw()?;
    weights.expect_shape(&[h, w])?;
    if !is_guided(t, total, xi) {
        return Ok(x0.clone());
    }
    let hw = h * w;
    let data = x0
        .data()
        .iter()
        .zip(init_latent.data())
        .enumerate()
        .map(|(i, (a, b))| {
            let wt = weights.data()[i % hw];
            if wt == 1.0 {
                *b
            } else {
                a + wt * (b - a)
            }
        })
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// `eps_neg + w (eps_pos - eps_neg)`; `w = 1` returns `eps_pos` itself.
pub fn cfg_combine(eps_pos: &LatentTensor, eps_neg: &LatentTensor, w: f64) -> Result<LatentTensor> {
    eps_pos.expect_same_shape(eps_neg)?;
    if w == 1.0 {
        return Ok(eps_pos.clone());
    }
    let w = w as f32;
    eps_neg.zip_map(eps_pos, |n, p| n + w * (p - n))
}

/// Noise prediction for one tile of the latent being sampled.
pub trait NoiseModel {
    /// `region` indexes the tile list the loop was started with.
    fn predict(&self, region: usize, x_t: &LatentTensor, t: usize) -> Result<LatentTensor>;
}

/// Result of [`sample_loop`].
#[derive(Clone, Debug)]
pub struct LoopOutput {
    pub x0: LatentTensor,
    pub guided_steps: usize,
}

/// Deterministic DDIM from `x_T` over `steps` strided timesteps. With no
/// plan the whole latent is one region.
pub fn sample_loop(
    schedule: &DiffusionSchedule,
    model: &dyn NoiseModel,
    x_t: LatentTensor,
    steps: usize,
    plan: Option<&TilePlan>,
    guide: Option<&Guide>,
) -> Result<LoopOutput> {
    let [_, h, w] = x_t.chw()?;
    let regions = regions(plan, h, w)?;
    let guides = match guide {
        Some(g) => {
            g.init_latent.expect_same_shape(&x_t)?;
            Some(
                regions
                    .iter()
                    .map(|&(y, x, th, tw)| g.crop(y, x, th, tw))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        None => None,
    };
    let ts = schedule.inference_timesteps(steps)?;
    let total = schedule.steps();
    let mut x = x_t;
    let mut guided_steps = 0;
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied();
        let tiles = match plan {
            Some(p) => p.split(&x)?,
            None => vec![x.clone()],
        };
        let mut next = Vec::with_capacity(tiles.len());
        let mut guided = false;
        for (r, tile) in tiles.iter().enumerate() {
            let eps = model.predict(r, tile, t)?;
            let mut x0 = schedule.estimate_x0(tile, &eps, t)?;
            if let Some(gs) = &guides {
                let g = &gs[r];
                guided = is_guided(t, total, g.xi);
                x0 = apply_guidance(&x0, &g.weights, &g.init_latent, t, total, g.xi)?;
            }
            next.push(schedule.recombine(&x0, &eps, t_prev)?);
        }
        guided_steps += guided as usize;
        x = match plan {
            Some(p) => p.merge(&next)?,
            None => next.pop().expect("one region"),
        };
        if !x.all_finite() {
            return Err(Error::NonFinite(format!(
                "at sampling step {} of {} (t = {})",
                i + 1,
                ts.len(),
                t
            )));
        }
    }
    Ok(LoopOutput { x0: x, guided_steps })
}

fn regions(plan: Option<&TilePlan>, h: usize, w: usize) -> Result<Vec<(usize, usize, usize, usize)>> {
    match plan {
        Some(p) => {
            if (p.height(), p.width()) != (h, w) {
                return Err(shape_err!(
                    "tile plan for {}x{} applied to a {}x{} latent",
                    p.height(),
                    p.width(),
                    h,
                    w
                ));
            }
            let (th, tw) = p.tile_shape();
            Ok(p.offsets().iter().map(|&(y, x)| (y, x, th, tw)).collect())
        }
        None => Ok(vec![(0, 0, h, w)]),
    }
}

/// Adapted denoiser with classifier-free guidance, conditioned on fixed
/// crops of the degraded latent.
struct AdaptedModel<'a> {
    denoiser: &'a Denoiser,
    adapter: &'a AdapterParams,
    degraded: Vec<LatentTensor>,
    ctx: Tensor<f32>,
    cfg_weight: f64,
}

impl NoiseModel for AdaptedModel<'_> {
    fn predict(&self, region: usize, x_t: &LatentTensor, t: usize) -> Result<LatentTensor> {
        let xd = &self.degraded[region];
        let [c, h, w] = x_t.chw()?;
        let n = self.ctx.dim(0);
        let stack = |z: &LatentTensor| Tensor::stack(&vec![z.clone(); n]);
        let out = self.denoiser.predict_noise_adapted_batch(
            &stack(xd)?,
            &stack(x_t)?,
            &vec![t; n],
            &self.ctx,
            self.adapter,
        )?;
        let pos = out.batch_item(0)?;
        if n == 1 {
            return Ok(pos);
        }
        let neg = out.batch_item(1)?;
        debug_assert_eq!(pos.shape(), [c, h, w]);
        cfg_combine(&pos, &neg, self.cfg_weight)
    }
}

/// Source of the initial restoration that anchors guidance.
pub trait InitProvider {
    fn name(&self) -> String;
    /// Initial restoration of `degraded` at the `h x w` output size.
    fn initial(&self, degraded: &ImageTensor, h: usize, w: usize) -> Result<ImageTensor>;
}

/// Bicubic upsampling of the degraded input.
#[derive(Clone, Copy, Debug, Default)]
pub struct BicubicInit;

impl InitProvider for BicubicInit {
    fn name(&self) -> String {
        "bicubic".into()
    }

    fn initial(&self, degraded: &ImageTensor, h: usize, w: usize) -> Result<ImageTensor> {
        Ok(resize(degraded, h, w, Kernel::Bicubic)?.map(|v| v.clamp(0.0, 1.0)))
    }
}

/// An externally produced restoration, resized bicubically if needed.
#[derive(Clone, Debug)]
pub struct ImageInit {
    pub label: String,
    pub image: ImageTensor,
}

impl InitProvider for ImageInit {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn initial(&self, _degraded: &ImageTensor, h: usize, w: usize) -> Result<ImageTensor> {
        if (self.image.height(), self.image.width()) == (h, w) {
            return Ok(self.image.clone());
        }
        Ok(resize(&self.image, h, w, Kernel::Bicubic)?.map(|v| v.clamp(0.0, 1.0)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RestoreConfig {
    pub steps: usize,
    #[serde(flatten)]
    pub guidance: GuidanceConfig,
    /// Latent tile side and stride.
    pub tile: usize,
    pub stride: usize,
    /// Run the whole latent as one region without a tile plan.
    pub untiled: bool,
    /// Output size is `upscale` times the input size.
    pub upscale: usize,
    /// Drop the guidance step entirely (no weights, no init latent).
    pub ablate_guidance: bool,
    /// Replace the Sobel weight map with a constant.
    pub weight_override: Option<f32>,
}

impl Default for RestoreConfig {
    fn default() -> Self {
        RestoreConfig {
            steps: 20,
            guidance: GuidanceConfig::default(),
            tile: 64,
            stride: 32,
            untiled: false,
            upscale: 4,
            ablate_guidance: false,
            weight_override: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub encode_ms: f64,
    pub sample_ms: f64,
    pub decode_ms: f64,
    pub total_ms: f64,
}

/// Run manifest of one restore call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestoreManifest {
    pub seed: u64,
    /// Degradation spec text, when the caller knows it.
    pub spec: Option<String>,
    pub config: RestoreConfig,
    pub init: String,
    pub input_hw: (usize, usize),
    pub output_hw: (usize, usize),
    pub latent_hw: (usize, usize),
    pub tiles: usize,
    pub guided_steps: usize,
    pub degraded_encodes: usize,
    pub timings: Timings,
}

#[derive(Clone, Debug)]
pub struct Restoration {
    pub image: ImageTensor,
    pub manifest: RestoreManifest,
}

/// Everything a restore call needs besides its input.
#[derive(Clone, Copy)]
pub struct Restorer<'a> {
    pub denoiser: &'a Denoiser,
    pub adapter: &'a AdapterParams,
    pub codec: &'a Codec,
    pub schedule: &'a DiffusionSchedule,
    pub positive: &'a PromptEmbedding,
    pub negative: &'a PromptEmbedding,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

impl Restorer<'_> {
    pub fn restore(
        &self,
        degraded: &ImageTensor,
        init: &dyn InitProvider,
        cfg: &RestoreConfig,
        seed: u64,
    ) -> Result<Restoration> {
        let start = Instant::now();
        if cfg.upscale == 0 || cfg.steps == 0 {
            return Err(invalid!("upscale and steps must be positive"));
        }
        let (h, w) = (degraded.height() * cfg.upscale, degraded.width() * cfg.upscale);
        let (lh, lw) = self.codec.latent_hw(h, w)?;
        let m = self.denoiser.config().spatial_multiple();
        if lh % m != 0 || lw % m != 0 {
            return Err(shape_err!(
                "{}x{} latent is not a multiple of the denoiser's {}",
                lh,
                lw,
                m
            ));
        }
        let plan = if cfg.untiled {
            None
        } else {
            let p = TilePlan::new(lh, lw, cfg.tile, cfg.stride)?;
            let (th, tw) = p.tile_shape();
            if th % m != 0 || tw % m != 0 {
                return Err(invalid!("tile {} is not a multiple of the denoiser's {}", cfg.tile, m));
            }
            Some(p)
        };

        let t_enc = Instant::now();
        let upsampled = resize(degraded, h, w, Kernel::Bicubic)?.map(|v| v.clamp(0.0, 1.0));
        let before = self.codec.encode_calls();
        let x_deg = self.codec.encode(&upsampled)?;
        let degraded_encodes = self.codec.encode_calls() - before;
        let guide = if cfg.ablate_guidance {
            None
        } else {
            let init_img = init.initial(degraded, h, w)?;
            let weights = match cfg.weight_override {
                Some(v) => Tensor::full([lh, lw], v),
                None => guidance_weights(&init_img, (lh, lw))?,
            };
            Some(Guide::new(weights, self.codec.encode(&init_img)?, cfg.guidance.xi)?)
        };
        let encode_ms = ms(t_enc);

        let t_sample = Instant::now();
        let degraded_tiles = match &plan {
            Some(p) => p.split(&x_deg)?,
            None => vec![x_deg],
        };
        let prompts: Vec<&PromptEmbedding> = if cfg.guidance.cfg_weight == 1.0 {
            vec![self.positive]
        } else {
            vec![self.positive, self.negative]
        };
        let model = AdaptedModel {
            denoiser: self.denoiser,
            adapter: self.adapter,
            degraded: degraded_tiles,
            ctx: context_batch(&prompts)?,
            cfg_weight: cfg.guidance.cfg_weight,
        };
        let x_t = gaussian(
            &mut rng_at(seed, &[streams::SAMPLER_NOISE]),
            [self.codec.latent_channels(), lh, lw],
        );
        let out = sample_loop(self.schedule, &model, x_t, cfg.steps, plan.as_ref(), guide.as_ref())?;
        let sample_ms = ms(t_sample);

        let t_dec = Instant::now();
        let image = self.codec.decode(&out.x0)?;
        let decode_ms = ms(t_dec);
        Ok(Restoration {
            image,
            manifest: RestoreManifest {
                seed,
                spec: None,
                config: cfg.clone(),
                init: if cfg.ablate_guidance { "none".into() } else { init.name() },
                input_hw: (degraded.height(), degraded.width()),
                output_hw: (h, w),
                latent_hw: (lh, lw),
                tiles: plan.as_ref().map_or(1, |p| p.len()),
                guided_steps: out.guided_steps,
                degraded_encodes,
                timings: Timings {
                    encode_ms,
                    sample_ms,
                    decode_ms,
                    total_ms: ms(start),
                },
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;
    use crate::denoiser::{DenoiserConfig, PromptRole};
    use crate::schedule::ScheduleConfig;
    use proptest::prelude::*;

    fn toy() -> (Denoiser, Codec, DiffusionSchedule) {
        let cfg = DenoiserConfig {
            latent_channels: 12,
            base_channels: 8,
            channel_mult: vec![1, 2],
            heads: 2,
            context_dim: 6,
            context_tokens: 3,
            norm_groups: 4,
            attention: vec![true; 2],
            ..DenoiserConfig::default()
        };
        (
            Denoiser::new(cfg, 3).unwrap(),
            Codec::new(CodecConfig::default()).unwrap(),
            DiffusionSchedule::from_config(&ScheduleConfig::default()).unwrap(),
        )
    }

    fn blob(h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_fn(h, w, |c, y, x| {
            let d = ((y as f32 - h as f32 / 2.0).powi(2) + (x as f32 - w as f32 / 3.0).powi(2)).sqrt();
            0.3 + 0.4 * (-(d / 5.0).powi(2)).exp() + 0.1 * c as f32
        })
    }

    struct Oracle<'a> {
        schedule: &'a DiffusionSchedule,
        x0: Vec<LatentTensor>,
    }

    impl NoiseModel for Oracle<'_> {
        fn predict(&self, region: usize, x_t: &LatentTensor, t: usize) -> Result<LatentTensor> {
            let ab = self.schedule.alpha_bar(t)?;
            x_t.zip_map(&self.x0[region], |x, z| {
                ((x as f64 - ab.sqrt() * z as f64) / (1.0 - ab).sqrt()) as f32
            })
        }
    }

    #[test]
    fn weights_of_flat_and_step_images() {
        let flat = ImageTensor::filled(32, 32, 0.4);
        let w = guidance_weights(&flat, (4, 4)).unwrap();
        assert!(w.data().iter().all(|v| *v == 1.0));

        // vertical step between columns 15 and 16 of a 32-px image; at
        // latent 32x32 (no resampling) the Sobel response is 4 * 1 = 4 on
        // both columns next to the edge and 0 elsewhere
        let step = ImageTensor::from_fn(32, 32, |_, _, x| if x < 16 { 0.0 } else { 1.0 });
        let w = guidance_weights(&step, (32, 32)).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let v = w.data()[y * 32 + x];
                let want = if x == 15 || x == 16 { 0.0 } else { 1.0 };
                assert_eq!(v, want, "({y}, {x})");
            }
        }
        let w = guidance_weights(&step, (4, 4)).unwrap();
        assert!(w.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(w.data()[1], 0.0);
        assert_eq!(w.data()[0], 1.0);
        assert!(guidance_weights(&step, (0, 4)).is_err());
    }

    #[test]
    fn guidance_rules() {
        let x0 = Tensor::from_fn([2, 3, 3], |i| i as f32);
        let init = Tensor::full([2, 3, 3], -1.0f32);
        let ones = Tensor::full([3, 3], 1.0f32);
        let zeros = Tensor::zeros([3, 3]);
        for t in [1, 500, 999] {
            assert_eq!(apply_guidance(&x0, &ones, &init, t, 1000, 1.0).unwrap(), x0);
            assert_eq!(apply_guidance(&x0, &zeros, &init, t, 1000, 0.0).unwrap(), x0);
            assert_eq!(apply_guidance(&x0, &ones, &init, t, 1000, 0.0).unwrap(), init);
        }
        assert_eq!(apply_guidance(&x0, &ones, &init, 900, 1000, 0.9).unwrap(), x0);
        assert_eq!(apply_guidance(&x0, &ones, &init, 901, 1000, 0.9).unwrap(), init);
        let half = Tensor::full([3, 3], 0.5f32);
        let mid = apply_guidance(&x0, &half, &init, 999, 1000, 0.5).unwrap();
        assert_eq!(mid.data()[4], (4.0 - 1.0) / 2.0);
        assert!(apply_guidance(&x0, &Tensor::zeros([3, 2]), &init, 1, 1000, 0.0).is_err());
    }

    #[test]
    fn cfg_arithmetic() {
        let pos = Tensor::full([1, 2, 2], 0.1f32);
        let neg = Tensor::zeros([1, 2, 2]);
        let out = cfg_combine(&pos, &neg, 9.0).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.9).abs() < 1e-6));
        let odd = Tensor::from_fn([1, 2, 2], |i| 0.3 + i as f32 * 1.7);
        assert_eq!(cfg_combine(&odd, &neg, 1.0).unwrap(), odd);
        assert_eq!(cfg_combine(&odd, &odd, 9.0).unwrap(), odd);
        assert!(cfg_combine(&odd, &Tensor::zeros([1, 2, 3]), 2.0).is_err());
    }

    #[test]
    fn oracle_reconstructs_clean_latent() {
        let schedule = DiffusionSchedule::from_config(&ScheduleConfig::default()).unwrap();
        let x0 = gaussian(&mut rng_at(1, &[]), [4, 8, 8]);
        let model = Oracle {
            schedule: &schedule,
            x0: vec![x0.clone()],
        };
        let x_t = gaussian(&mut rng_at(2, &[]), [4, 8, 8]);
        let out = sample_loop(&schedule, &model, x_t, 20, None, None).unwrap();
        assert!(out.x0.max_abs_diff(&x0).unwrap() < 1e-4);
    }

    #[test]
    fn guided_step_counts() {
        let schedule = DiffusionSchedule::from_config(&ScheduleConfig::default()).unwrap();
        let count = |xi| {
            schedule
                .inference_timesteps(20)
                .unwrap()
                .iter()
                .filter(|&&t| is_guided(t, 1000, xi))
                .count()
        };
        assert_eq!(count(0.9), 2);
        assert_eq!(count(0.0), 20);
        assert_eq!(count(1.0), 0);
    }

    struct Nan;
    impl NoiseModel for Nan {
        fn predict(&self, _: usize, x: &LatentTensor, t: usize) -> Result<LatentTensor> {
            Ok(if t < 500 { x.map(|_| f32::NAN) } else { x.clone() })
        }
    }

    #[test]
    fn nan_aborts_with_step() {
        let schedule = DiffusionSchedule::from_config(&ScheduleConfig::default()).unwrap();
        let err = sample_loop(&schedule, &Nan, Tensor::zeros([1, 4, 4]), 20, None, None).unwrap_err();
        assert!(matches!(&err, Error::NonFinite(m) if m.contains("step 11 of 20") && m.contains("t = 451")), "{err}");
    }

    fn restorer<'a>(
        d: &'a Denoiser,
        a: &'a AdapterParams,
        c: &'a Codec,
        s: &'a DiffusionSchedule,
        p: &'a (PromptEmbedding, PromptEmbedding),
    ) -> Restorer<'a> {
        Restorer {
            denoiser: d,
            adapter: a,
            codec: c,
            schedule: s,
            positive: &p.0,
            negative: &p.1,
        }
    }

    fn prompts(d: &Denoiser) -> (PromptEmbedding, PromptEmbedding) {
        (
            PromptEmbedding::fixed(d.config(), PromptRole::Positive, 0),
            PromptEmbedding::fixed(d.config(), PromptRole::Negative, 0),
        )
    }

    #[test]
    fn restore_contracts() {
        let (d, codec, s) = toy();
        let a = d.init_adapter();
        let p = prompts(&d);
        let r = restorer(&d, &a, &codec, &s, &p);
        let lr = blob(8, 8);
        let cfg = RestoreConfig {
            steps: 4,
            ..RestoreConfig::default()
        };
        let base = r.restore(&lr, &BicubicInit, &cfg, 5).unwrap();
        assert_eq!((base.image.height(), base.image.width()), (32, 32));
        assert_eq!(base.manifest.degraded_encodes, 1);
        assert_eq!(r.restore(&lr, &BicubicInit, &cfg, 5).unwrap().image, base.image);

        // xi = 1 matches the guidance-free loop bit for bit
        let xi1 = RestoreConfig {
            guidance: GuidanceConfig { xi: 1.0, ..cfg.guidance.clone() },
            ..cfg.clone()
        };
        let ablated = RestoreConfig {
            ablate_guidance: true,
            ..xi1.clone()
        };
        let a1 = r.restore(&lr, &BicubicInit, &xi1, 5).unwrap();
        assert_eq!(a1.manifest.guided_steps, 0);
        assert_eq!(a1.image, r.restore(&lr, &BicubicInit, &ablated, 5).unwrap().image);

        // full replacement at every step lands on the initial restoration
        let full = RestoreConfig {
            guidance: GuidanceConfig { xi: 0.0, ..cfg.guidance.clone() },
            weight_override: Some(1.0),
            ..cfg.clone()
        };
        let out = r.restore(&lr, &BicubicInit, &full, 5).unwrap();
        let init = BicubicInit.initial(&lr, 32, 32).unwrap();
        let want = codec.decode(&codec.encode(&init).unwrap()).unwrap();
        assert_eq!(out.image, want);
        assert_eq!(out.manifest.guided_steps, 4);

        // one tile covering the latent equals the untiled path
        let untiled = RestoreConfig {
            untiled: true,
            ..cfg.clone()
        };
        assert_eq!(r.restore(&lr, &BicubicInit, &untiled, 5).unwrap().image, base.image);
    }

    #[test]
    fn degraded_latent_encoded_once_across_tiles() {
        let (d, codec, s) = toy();
        let a = d.init_adapter();
        let p = prompts(&d);
        let r = restorer(&d, &a, &codec, &s, &p);
        let cfg = RestoreConfig {
            steps: 3,
            tile: 4,
            stride: 2,
            ablate_guidance: true,
            ..RestoreConfig::default()
        };
        let out = r.restore(&blob(16, 16), &BicubicInit, &cfg, 1).unwrap();
        assert_eq!(out.manifest.tiles, 9);
        assert_eq!(out.manifest.degraded_encodes, 1);
        assert_eq!(codec.encode_calls(), 1);
    }

    #[test]
    fn rejects_incompatible_inputs() {
        let (d, codec, s) = toy();
        let a = d.init_adapter();
        let p = prompts(&d);
        let r = restorer(&d, &a, &codec, &s, &p);
        // 5 px * 4 = 20 px is not a multiple of the codec factor
        assert!(r.restore(&blob(5, 8), &BicubicInit, &RestoreConfig::default(), 0).is_err());
        let odd_tile = RestoreConfig {
            tile: 3,
            stride: 1,
            ..RestoreConfig::default()
        };
        assert!(r.restore(&blob(16, 16), &BicubicInit, &odd_tile, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn guided_steps_grow_as_xi_falls(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let s = DiffusionSchedule::from_config(&ScheduleConfig::default()).unwrap();
            let ts = s.inference_timesteps(20).unwrap();
            let n = |xi| ts.iter().filter(|&&t| is_guided(t, 1000, xi)).count();
            prop_assert!(n(lo) >= n(hi));
        }

        #[test]
        fn weights_stay_in_unit_range(seed in any::<u64>()) {
            let img = ImageTensor::new(gaussian(&mut rng_at(seed, &[]), [3, 16, 16]).map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0))).unwrap();
            let w = guidance_weights(&img, (4, 4)).unwrap();
            prop_assert!(w.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(w.data().contains(&0.0));
        }
    }
}
