//! Adapter fine-tuning and backbone pretraining.
//!
//! Adapter training draws random square patches from a folder of clean
//! images, degrades each patch, upsamples it back to patch size and encodes
//! both versions. The clean latent is diffused to a uniform random
//! timestep; the loss is the mean squared error between the drawn noise and
//! the adapted prediction under the empty prompt. Only the adapter
//! projections receive gradients.
//!
//! The miniature backbone has no published weights, so it is pretrained
//! here first with the plain noise-prediction loss. Clean patches are
//! paired with the positive or empty prompt and degraded patches with the
//! negative prompt, which gives classifier-free guidance a direction away
//! from degraded-looking content.
//!
//! Randomness for step `s`, item `i` comes from `rng_at(seed, [stream, s, i])`
//! so runs are reproducible and resumable from any checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Named};
use crate::codec::{Codec, CodecConfig};
use crate::degrade::{apply_spec, sample_spec_with, DegradationSpec, RandomSpecConfig};
use crate::denoiser::{context_batch, AdapterParams, Denoiser, DenoiserConfig, Plugin, PromptEmbedding, PromptRole};
use crate::error::{invalid, shape_err, Error, Result};
use crate::graph::Graph;
use crate::image::{resize, ImageTensor, Kernel};
use crate::rng::{gaussian, rng_at, streams};
use crate::schedule::{DiffusionSchedule, ScheduleConfig};
use crate::tensor::{LatentTensor, Real, Tensor};

/// Everything needed to rebuild the frozen model side of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    pub codec: CodecConfig,
    pub schedule: ScheduleConfig,
    /// Seed of the fixed prompt embeddings.
    pub prompt_seed: u64,
}

impl ModelConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn prompt(&self, role: PromptRole) -> PromptEmbedding {
        PromptEmbedding::fixed(&self.denoiser, role, self.prompt_seed)
    }

    pub fn codec(&self) -> Result<Codec> {
        Codec::new(self.codec.clone())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::from_config(&self.schedule)
    }

    /// Writes `model.json` and `backbone.bira` into `dir`.
    pub fn save_dir(&self, dir: &Path, denoiser: &Denoiser) -> Result<()> {
        if denoiser.config() != &self.denoiser {
            return Err(invalid!("denoiser does not match the model configuration"));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.save(&dir.join(MODEL_FILE))?;
        checkpoint::save_backbone(&dir.join(BACKBONE_FILE), denoiser)
    }

    /// Reads a model directory written by [`ModelConfig::save_dir`].
    pub fn load_dir(dir: &Path) -> Result<(Self, Denoiser)> {
        let cfg = Self::load(&dir.join(MODEL_FILE))?;
        let d = checkpoint::load_backbone(&dir.join(BACKBONE_FILE), cfg.denoiser.clone())?;
        Ok((cfg, d))
    }
}

pub const MODEL_FILE: &str = "model.json";
pub const BACKBONE_FILE: &str = "backbone.bira";

/// Where training degradations come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationSource {
    /// A fresh random cascade per patch.
    Random(RandomSpecConfig),
    /// One cascade in text form; only the noise seed varies per patch.
    Fixed(String),
}

impl Default for DegradationSource {
    fn default() -> Self {
        DegradationSource::Random(RandomSpecConfig::default())
    }
}

impl DegradationSource {
    fn draw(&self, rng: &mut impl Rng) -> Result<DegradationSpec> {
        match self {
            DegradationSource::Random(cfg) => Ok(sample_spec_with(rng, cfg)),
            DegradationSource::Fixed(text) => DegradationSpec::parse(text, rng.random()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub patch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    /// Micro-batches averaged into one optimizer step.
    pub accumulation: usize,
    pub steps: usize,
    pub seed: u64,
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    /// Write a checkpoint every this many steps (and after the last one).
    pub checkpoint_every: usize,
    pub degradation: DegradationSource,
    /// Run the degraded stream as its own recorded pass instead of one
    /// stacked batch. Both give the same gradients.
    pub two_pass: bool,
    /// Adapter checkpoint to resume from; its optimizer state is read from
    /// the matching `optim-*.bira` file.
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    /// Miniature defaults.
    fn default() -> Self {
        TrainConfig {
            patch: 64,
            lr: 1e-3,
            weight_decay: 1e-2,
            batch: 8,
            accumulation: 1,
            steps: 2000,
            seed: 0,
            dataset: PathBuf::from("data/train"),
            out_dir: PathBuf::from("runs/adapter"),
            checkpoint_every: 500,
            degradation: DegradationSource::default(),
            two_pass: false,
            resume: None,
        }
    }
}

impl TrainConfig {
    /// Settings used for the full-size model: 512 px patches, learning
    /// rate 1e-5, weight decay 1e-2, batch 4 with 4 accumulation steps.
    pub fn full_scale() -> Self {
        TrainConfig {
            patch: 512,
            lr: 1e-5,
            weight_decay: 1e-2,
            batch: 4,
            accumulation: 4,
            ..TrainConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.batch == 0 || self.accumulation == 0 || self.steps == 0 || self.checkpoint_every == 0 {
            return Err(invalid!("patch, batch, accumulation, steps and checkpoint_every must be positive"));
        }
        if !(self.lr > 0.0 && self.weight_decay >= 0.0) {
            return Err(invalid!("learning rate must be positive and weight decay non-negative"));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay over a set of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update. Every parameter needs a gradient of its own shape.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (String, &'a mut Arc<Tensor<f32>>)>,
        grads: &BTreeMap<String, Tensor<f32>>,
    ) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (name, p) in params {
            let g = grads
                .get(&name)
                .ok_or_else(|| invalid!("no gradient for {}", name))?;
            g.expect_same_shape(p)?;
            let n = g.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name).or_insert_with(|| vec![0.0; n]);
            let data = Arc::make_mut(p).data_mut();
            for i in 0..n {
                let gi = g.data()[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = (mi / c1) / ((vi / c2).sqrt() + self.eps);
                data[i] = (data[i] as f64 * decay - self.lr * update) as f32;
            }
        }
        Ok(())
    }

    /// Moments as `m.<name>` / `v.<name>` tensors plus a `t` scalar.
    pub fn to_named(&self) -> Named {
        let mut out = Named::new();
        for (prefix, map) in [("m", &self.m), ("v", &self.v)] {
            for (k, d) in map {
                out.insert(
                    format!("{prefix}.{k}"),
                    Arc::new(Tensor::new([d.len()], d.clone()).expect("flat")),
                );
            }
        }
        // u64 step counts stay exact in f32 far beyond any run length here
        out.insert("t".into(), Arc::new(Tensor::scalar(self.t as f32)));
        out
    }

    pub fn load_state(&mut self, named: &Named) -> Result<()> {
        let t = named
            .get("t")
            .ok_or_else(|| Error::Checkpoint("optimizer state lacks `t`".into()))?;
        self.t = t.item() as u64;
        self.m.clear();
        self.v.clear();
        for (k, d) in named {
            if let Some(rest) = k.strip_prefix("m.") {
                self.m.insert(rest.to_string(), d.data().to_vec());
            } else if let Some(rest) = k.strip_prefix("v.") {
                self.v.insert(rest.to_string(), d.data().to_vec());
            }
        }
        Ok(())
    }
}

/// Square random crop of side `patch`.
pub fn random_patch(img: &ImageTensor, patch: usize, rng: &mut impl Rng) -> Result<ImageTensor> {
    let (h, w) = (img.height(), img.width());
    if h < patch || w < patch {
        return Err(Error::Dataset(format!("{h}x{w} image is smaller than a {patch} px patch")));
    }
    let y = rng.random_range(0..=h - patch);
    let x = rng.random_range(0..=w - patch);
    img.crop(y, x, patch, patch)
}

/// Degrades `clean` with `spec` and upsamples the result back to the clean
/// size with bicubic resampling.
pub fn degrade_to_size(clean: &ImageTensor, spec: &DegradationSpec) -> Result<ImageTensor> {
    let low = apply_spec(clean, spec)?;
    if (low.height(), low.width()) == (clean.height(), clean.width()) {
        return Ok(low);
    }
    Ok(resize(&low, clean.height(), clean.width(), Kernel::Bicubic)?.map(|v| v.clamp(0.0, 1.0)))
}

/// `(encode(clean), encode(upsampled degraded clean))` with a random
/// cascade drawn from `rng`.
pub fn make_pair(clean: &ImageTensor, rng: &mut impl Rng, codec: &Codec) -> Result<(LatentTensor, LatentTensor)> {
    make_pair_with(clean, rng, codec, &DegradationSource::default())
}

pub fn make_pair_with(
    clean: &ImageTensor,
    rng: &mut impl Rng,
    codec: &Codec,
    source: &DegradationSource,
) -> Result<(LatentTensor, LatentTensor)> {
    if clean.height() != clean.width() {
        return Err(invalid!("patches must be square, got {}x{}", clean.height(), clean.width()));
    }
    let spec = source.draw(rng)?;
    let degraded = degrade_to_size(clean, &spec)?;
    Ok((codec.encode(clean)?, codec.encode(&degraded)?))
}

/// One micro-batch of latents with the noise and timesteps drawn for it.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<F: Real = f32> {
    /// `[N, C, H, W]` clean latents.
    pub x0: Tensor<F>,
    /// `[N, C, H, W]` degraded latents.
    pub x_deg: Tensor<F>,
    pub eps: Tensor<F>,
    pub ts: Vec<usize>,
}

impl<F: Real> Batch<F> {
    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    fn check(&self) -> Result<()> {
        self.x0.expect_same_shape(&self.x_deg)?;
        self.x0.expect_same_shape(&self.eps)?;
        if self.x0.rank() != 4 || self.x0.dim(0) != self.ts.len() {
            return Err(shape_err!("batch of {} timesteps for latents {:?}", self.ts.len(), self.x0.shape()));
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> Batch<G> {
        Batch {
            x0: self.x0.cast(),
            x_deg: self.x_deg.cast(),
            eps: self.eps.cast(),
            ts: self.ts.clone(),
        }
    }

    /// `x_t` for every item.
    pub fn diffused(&self, schedule: &DiffusionSchedule) -> Result<Tensor<F>> {
        self.check()?;
        let items = (0..self.len())
            .map(|i| schedule.forward_diffuse(&self.x0.batch_item(i)?, self.ts[i], &self.eps.batch_item(i)?))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&items)
    }
}

fn repeat_ctx<F: Real>(prompt: &PromptEmbedding<F>, n: usize) -> Result<Tensor<F>> {
    context_batch(&vec![prompt; n])
}

/// Training loss of the adapted prediction, without gradients.
pub fn loss<F: Real>(
    denoiser: &Denoiser<F>,
    adapter: &AdapterParams<F>,
    schedule: &DiffusionSchedule,
    batch: &Batch<F>,
    prompt: &PromptEmbedding<F>,
) -> Result<f64> {
    let x_t = batch.diffused(schedule)?;
    let ctx = repeat_ctx(prompt, batch.len())?;
    let pred = denoiser.predict_noise_adapted_batch(&batch.x_deg, &x_t, &batch.ts, &ctx, adapter)?;
    mse(&pred, &batch.eps)
}

fn mse<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<f64> {
    a.expect_same_shape(b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.to_f64c() - y.to_f64c()).powi(2))
        .sum::<f64>()
        / a.len() as f64)
}

/// Loss and gradients with respect to every adapter tensor, keyed like
/// [`AdapterParams::to_named`]. The backbone enters the graph as constants.
pub fn adapter_loss_and_grads<F: Real>(
    denoiser: &Denoiser<F>,
    adapter: &AdapterParams<F>,
    schedule: &DiffusionSchedule,
    batch: &Batch<F>,
    prompt: &PromptEmbedding<F>,
    two_pass: bool,
) -> Result<(f64, BTreeMap<String, Tensor<F>>)> {
    denoiser.check_adapter(adapter)?;
    let x_t = batch.diffused(schedule)?;
    let n = batch.len();
    let ctx = repeat_ctx(prompt, n)?;
    let recorded = if two_pass {
        Some(denoiser.record_degraded(&batch.x_deg, &batch.ts, &ctx)?)
    } else {
        None
    };
    let mut g = Graph::new();
    let p = denoiser.bind(&mut g, false);
    let layers = adapter.bind(&mut g, true);
    let pred = match &recorded {
        Some(rec) => {
            let x = g.constant(x_t);
            let c = g.constant(ctx);
            denoiser.forward(
                &mut g,
                &p,
                x,
                &batch.ts,
                c,
                &mut Plugin::Inject {
                    degraded: rec,
                    layers: &layers,
                },
                None,
            )?
        }
        None => denoiser.stacked(&mut g, &p, &batch.x_deg, &x_t, &batch.ts, &ctx, |half| Plugin::Adapter {
            layers: &layers,
            half,
        })?,
    };
    let l = g.mse(pred, &batch.eps)?;
    let value = g.value(l).item().to_f64c();
    let mut grads = g.backward(l)?;
    let mut out = BTreeMap::new();
    for (k, vars) in layers.iter().enumerate() {
        for (suffix, v, t) in [
            ("w_k", vars.k, &adapter.layers[k].w_k),
            ("w_v", vars.v, &adapter.layers[k].w_v),
            ("w_o", vars.o, &adapter.layers[k].w_o),
        ] {
            let grad = grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
            out.insert(format!("adapter.{k}.{suffix}"), grad);
        }
    }
    Ok((value, out))
}

/// Plain noise-prediction loss and gradients for every backbone parameter.
pub fn backbone_loss_and_grads(
    denoiser: &Denoiser,
    schedule: &DiffusionSchedule,
    x0: &Tensor<f32>,
    eps: &Tensor<f32>,
    ts: &[usize],
    ctx: &Tensor<f32>,
) -> Result<(f64, BTreeMap<String, Tensor<f32>>)> {
    let batch = Batch {
        x0: x0.clone(),
        x_deg: x0.clone(),
        eps: eps.clone(),
        ts: ts.to_vec(),
    };
    let x_t = batch.diffused(schedule)?;
    let mut g = Graph::new();
    let p = denoiser.bind(&mut g, true);
    let x = g.constant(x_t);
    let c = g.constant(ctx.clone());
    let pred = denoiser.forward(&mut g, &p, x, ts, c, &mut Plugin::Plain, None)?;
    let l = g.mse(pred, eps)?;
    let value = g.value(l).item() as f64;
    let mut grads = g.backward(l)?;
    let out = p
        .iter()
        .map(|(name, v)| {
            let grad = grads
                .take(*v)
                .unwrap_or_else(|| Tensor::zeros(g.shape(*v).to_vec()));
            (name.clone(), grad)
        })
        .collect();
    Ok((value, out))
}

/// Clean training images, ordered by `manifest.txt` when present and by
/// sorted relative path otherwise.
pub struct Dataset {
    pub paths: Vec<PathBuf>,
    pub images: Vec<ImageTensor>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let paths = list_images(root)?;
        if paths.is_empty() {
            return Err(Error::Dataset(format!("no PNG images under {}", root.display())));
        }
        let images = paths
            .iter()
            .map(|p| ImageTensor::load_png(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { paths, images })
    }

    pub fn from_images(images: Vec<ImageTensor>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Dataset("empty image list".into()));
        }
        Ok(Dataset {
            paths: (0..images.len()).map(|i| PathBuf::from(format!("#{i}"))).collect(),
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// PNG files under `root`: the lines of `root/manifest.txt` if it exists,
/// otherwise a recursive listing sorted by path.
pub fn list_images(root: &Path) -> Result<Vec<PathBuf>> {
    let manifest = root.join("manifest.txt");
    if manifest.is_file() {
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        return Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| root.join(l))
            .collect());
    }
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Micro-batch `micro` of optimizer step `step`.
pub fn adapter_batch(
    data: &Dataset,
    codec: &Codec,
    cfg: &TrainConfig,
    total_t: usize,
    step: usize,
    micro: usize,
) -> Result<Batch> {
    let mut x0s = Vec::with_capacity(cfg.batch);
    let mut xds = Vec::with_capacity(cfg.batch);
    let mut epss = Vec::with_capacity(cfg.batch);
    let mut ts = Vec::with_capacity(cfg.batch);
    for i in 0..cfg.batch {
        let item = (micro * cfg.batch + i) as u64;
        let path = [step as u64, item];
        let mut drng = rng_at(cfg.seed, &[streams::TRAIN_DATA, path[0], path[1]]);
        let img = &data.images[drng.random_range(0..data.len())];
        let patch = random_patch(img, cfg.patch, &mut drng)?;
        let mut grng = rng_at(cfg.seed, &[streams::DEGRADE, path[0], path[1]]);
        let (x0, xd) = make_pair_with(&patch, &mut grng, codec, &cfg.degradation)?;
        let eps = gaussian(&mut rng_at(cfg.seed, &[streams::TRAIN_NOISE, path[0], path[1]]), x0.shape().to_vec());
        ts.push(rng_at(cfg.seed, &[streams::TRAIN_TIMESTEP, path[0], path[1]]).random_range(0..total_t));
        x0s.push(x0);
        xds.push(xd);
        epss.push(eps);
    }
    Ok(Batch {
        x0: Tensor::stack(&x0s)?,
        x_deg: Tensor::stack(&xds)?,
        eps: Tensor::stack(&epss)?,
        ts,
    })
}

/// Mutable adapter training state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub adapter: AdapterParams,
    pub opt: AdamW,
    /// Completed optimizer steps.
    pub step: usize,
}

impl TrainState {
    pub fn new(denoiser: &Denoiser, cfg: &TrainConfig) -> Self {
        TrainState {
            adapter: denoiser.init_adapter(),
            opt: AdamW::new(cfg.lr, cfg.weight_decay),
            step: 0,
        }
    }
}

/// One optimizer step over `micro_batches`, with gradients averaged.
/// Returns the mean loss.
pub fn train_step(
    state: &mut TrainState,
    denoiser: &Denoiser,
    schedule: &DiffusionSchedule,
    micro_batches: &[Batch],
    prompt: &PromptEmbedding,
    two_pass: bool,
) -> Result<f64> {
    if micro_batches.is_empty() {
        return Err(invalid!("train_step needs at least one micro-batch"));
    }
    let mut total: Option<BTreeMap<String, Tensor<f32>>> = None;
    let mut loss_sum = 0.0;
    for b in micro_batches {
        let (l, grads) = adapter_loss_and_grads(denoiser, &state.adapter, schedule, b, prompt, two_pass)?;
        if !l.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {l} at training step {} (timesteps {:?})",
                state.step + 1,
                b.ts
            )));
        }
        loss_sum += l;
        total = Some(match total {
            None => grads,
            Some(mut acc) => {
                for (k, g) in grads {
                    let a = acc.get_mut(&k).expect("same keys");
                    *a = a.add(&g)?;
                }
                acc
            }
        });
    }
    let k = micro_batches.len() as f32;
    let mut grads = total.expect("non-empty");
    if k > 1.0 {
        for g in grads.values_mut() {
            *g = g.scale(1.0 / k);
        }
    }
    state.opt.step(state.adapter.tensors_mut(), &grads)?;
    state.step += 1;
    Ok(loss_sum / k as f64)
}

fn adapter_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("adapter-{step:06}.bira"))
}

fn optim_path_for(adapter: &Path) -> PathBuf {
    let name = adapter
        .file_name()
        .map(|n| n.to_string_lossy().replacen("adapter", "optim", 1))
        .unwrap_or_else(|| "optim.bira".into());
    adapter.with_file_name(name)
}

fn step_of(adapter: &Path) -> Result<usize> {
    adapter
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.strip_prefix("adapter-"))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("cannot read a step number from {}", adapter.display())))
}

/// Saves adapter and optimizer state for `state.step`; returns the adapter
/// checkpoint path.
pub fn save_state(dir: &Path, state: &TrainState) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = adapter_path(dir, state.step);
    checkpoint::save_adapter(&path, &state.adapter)?;
    checkpoint::save(&optim_path_for(&path), &state.opt.to_named())?;
    Ok(path)
}

pub fn load_state(adapter_ckpt: &Path, cfg: &TrainConfig) -> Result<TrainState> {
    let adapter = checkpoint::load_adapter(adapter_ckpt)?;
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    opt.load_state(&checkpoint::load(&optim_path_for(adapter_ckpt))?)?;
    Ok(TrainState {
        adapter,
        opt,
        step: step_of(adapter_ckpt)?,
    })
}

const LOG_HEADER: &str = "step,loss,lr,wall_time_ms";

/// Opens the CSV log, keeping rows up to `keep_through` when resuming.
fn open_log(path: &Path, keep_through: usize) -> Result<fs::File> {
    let mut kept = vec![LOG_HEADER.to_string()];
    if keep_through > 0 {
        if let Ok(text) = fs::read_to_string(path) {
            kept.extend(
                text.lines()
                    .skip(1)
                    .filter(|l| l.split(',').next().and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s <= keep_through))
                    .map(str::to_string),
            );
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for line in kept {
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

/// Per-step observer for progress output.
pub type Progress<'a> = &'a mut dyn FnMut(usize, f64);

/// Trains an adapter on `data` and returns the last adapter checkpoint.
/// Checkpoints and `train_log.csv` go to `cfg.out_dir`.
pub fn train_loop(
    cfg: &TrainConfig,
    denoiser: &Denoiser,
    codec: &Codec,
    schedule: &DiffusionSchedule,
    data: &Dataset,
    mut progress: Option<Progress<'_>>,
) -> Result<PathBuf> {
    cfg.validate()?;
    let mut state = match &cfg.resume {
        Some(p) => load_state(p, cfg)?,
        None => TrainState::new(denoiser, cfg),
    };
    denoiser.check_adapter(&state.adapter)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let log_path = cfg.out_dir.join("train_log.csv");
    let mut log = open_log(&log_path, state.step)?;
    let prompt = PromptEmbedding::empty(denoiser.config());
    let start = Instant::now();
    let mut last = None;
    while state.step < cfg.steps {
        let step = state.step;
        let micro = (0..cfg.accumulation)
            .map(|m| adapter_batch(data, codec, cfg, schedule.steps(), step, m))
            .collect::<Result<Vec<_>>>()?;
        let l = train_step(&mut state, denoiser, schedule, &micro, &prompt, cfg.two_pass)?;
        writeln!(
            log,
            "{},{:.6e},{:e},{}",
            state.step,
            l,
            cfg.lr,
            start.elapsed().as_millis()
        )
        .map_err(|e| Error::io(&log_path, e))?;
        if let Some(p) = progress.as_mut() {
            p(state.step, l);
        }
        if state.step % cfg.checkpoint_every == 0 || state.step == cfg.steps {
            last = Some(save_state(&cfg.out_dir, &state)?);
        }
    }
    match last {
        Some(p) => Ok(p),
        // already complete on resume
        None => save_state(&cfg.out_dir, &state),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub patch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    /// Share of items drawn as degraded patches under the negative prompt.
    pub negative_fraction: f64,
    /// Share of clean items that use the empty prompt instead of the
    /// positive one.
    pub empty_fraction: f64,
    pub degradation: RandomSpecConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            patch: 64,
            lr: 1e-3,
            weight_decay: 0.0,
            batch: 8,
            steps: 3000,
            seed: 0,
            negative_fraction: 1.0 / 3.0,
            empty_fraction: 0.5,
            degradation: RandomSpecConfig::default(),
        }
    }
}

/// Pretrains the backbone in place; returns the per-step losses.
pub fn pretrain_backbone(
    cfg: &PretrainConfig,
    model: &ModelConfig,
    denoiser: &mut Denoiser,
    data: &Dataset,
    mut progress: Option<Progress<'_>>,
) -> Result<Vec<f64>> {
    if cfg.patch == 0 || cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(invalid!("pretraining needs positive patch, batch and learning rate"));
    }
    let codec = model.codec()?;
    let schedule = model.schedule()?;
    let prompts = [PromptRole::Positive, PromptRole::Negative, PromptRole::Empty].map(|r| model.prompt(r));
    let source = DegradationSource::Random(cfg.degradation.clone());
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut x0s = Vec::new();
        let mut epss = Vec::new();
        let mut ts = Vec::new();
        let mut ctx = Vec::new();
        for i in 0..cfg.batch {
            let path = [step as u64, i as u64];
            let mut rng = rng_at(cfg.seed, &[streams::TRAIN_DATA, path[0], path[1]]);
            let img = &data.images[rng.random_range(0..data.len())];
            let patch = random_patch(img, cfg.patch, &mut rng)?;
            let role = if rng.random_bool(cfg.negative_fraction) {
                PromptRole::Negative
            } else if rng.random_bool(cfg.empty_fraction) {
                PromptRole::Empty
            } else {
                PromptRole::Positive
            };
            let content = if role == PromptRole::Negative {
                let spec = source.draw(&mut rng_at(cfg.seed, &[streams::DEGRADE, path[0], path[1]]))?;
                degrade_to_size(&patch, &spec)?
            } else {
                patch
            };
            let x0 = codec.encode(&content)?;
            epss.push(gaussian(&mut rng_at(cfg.seed, &[streams::TRAIN_NOISE, path[0], path[1]]), x0.shape().to_vec()));
            ts.push(rng_at(cfg.seed, &[streams::TRAIN_TIMESTEP, path[0], path[1]]).random_range(0..schedule.steps()));
            x0s.push(x0);
            ctx.push(&prompts[role as usize]);
        }
        let (l, grads) = backbone_loss_and_grads(
            denoiser,
            &schedule,
            &Tensor::stack(&x0s)?,
            &Tensor::stack(&epss)?,
            &ts,
            &context_batch(&ctx)?,
        )?;
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("pretraining loss {l} at step {}", step + 1)));
        }
        opt.step(denoiser.params_mut().iter_mut().map(|(k, v)| (k.clone(), v)), &grads)?;
        losses.push(l);
        if let Some(p) = progress.as_mut() {
            p(step + 1, l);
        }
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::tests::tiny;

    fn tiny_model() -> (Denoiser, Codec, DiffusionSchedule) {
        let cfg = DenoiserConfig {
            latent_channels: 12,
            ..tiny()
        };
        (
            Denoiser::new(cfg, 1).unwrap(),
            Codec::new(CodecConfig::default()).unwrap(),
            DiffusionSchedule::from_config(&ScheduleConfig::default()).unwrap(),
        )
    }

    fn images(n: usize, side: usize) -> Dataset {
        Dataset::from_images(
            (0..n)
                .map(|k| {
                    ImageTensor::from_fn(side, side, |c, y, x| {
                        0.5 + 0.35 * ((x as f32 * (0.2 + 0.1 * k as f32) + c as f32).sin() * (y as f32 * 0.15).cos())
                    })
                })
                .collect(),
        )
        .unwrap()
    }

    fn small_cfg(dir: &Path) -> TrainConfig {
        TrainConfig {
            patch: 32,
            batch: 2,
            steps: 4,
            checkpoint_every: 2,
            out_dir: dir.to_path_buf(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adamw_zero_gradient_is_pure_decay() {
        let mut p = [("w".to_string(), Arc::new(Tensor::from_fn([3], |i| i as f32 - 1.0)))];
        let before = p[0].1.clone();
        let mut opt = AdamW::new(0.1, 0.01);
        let grads = BTreeMap::from([("w".to_string(), Tensor::zeros([3]))]);
        opt.step(p.iter_mut().map(|(k, v)| (k.clone(), v)), &grads).unwrap();
        for (a, b) in p[0].1.data().iter().zip(before.data()) {
            assert_eq!(*a, (*b as f64 * (1.0 - 0.1 * 0.01)) as f32);
        }
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        // first bias-corrected step is g / |g| = sign(g), up to eps
        let mut p = [("w".to_string(), Arc::new(Tensor::from_fn([2], |_| 1.0f32)))];
        let mut opt = AdamW::new(0.01, 0.0);
        let grads = BTreeMap::from([("w".to_string(), Tensor::new([2], vec![3.0, -0.5]).unwrap())]);
        opt.step(p.iter_mut().map(|(k, v)| (k.clone(), v)), &grads).unwrap();
        assert!((p[0].1.data()[0] - 0.99).abs() < 1e-6);
        assert!((p[0].1.data()[1] - 1.01).abs() < 1e-6);
        let mut fresh = AdamW::new(0.01, 0.0);
        fresh.load_state(&opt.to_named()).unwrap();
        assert_eq!(fresh, opt);
        assert!(opt.step(p.iter_mut().map(|(k, v)| (k.clone(), v)), &BTreeMap::new()).is_err());
    }

    #[test]
    fn identity_pair_matches() {
        let (_, codec, _) = tiny_model();
        let img = images(1, 32).images.remove(0);
        let src = DegradationSource::Fixed("none".into());
        let (x0, xd) = make_pair_with(&img, &mut rng_at(0, &[]), &codec, &src).unwrap();
        assert_eq!(x0, xd);
        for seed in 0..5 {
            let (a, b) = make_pair(&img, &mut rng_at(seed, &[]), &codec).unwrap();
            assert_eq!(a.shape(), b.shape());
            assert_eq!((a, b), make_pair(&img, &mut rng_at(seed, &[]), &codec).unwrap());
        }
        assert!(make_pair(&img.crop(0, 0, 16, 32).unwrap(), &mut rng_at(0, &[]), &codec).is_err());
    }

    #[test]
    fn loss_matches_scalar_oracle() {
        let (d, codec, s) = tiny_model();
        let data = images(2, 32);
        let cfg = TrainConfig { patch: 32, batch: 2, ..TrainConfig::default() };
        let b = adapter_batch(&data, &codec, &cfg, 1000, 0, 0).unwrap();
        let a = d.init_adapter();
        let prompt = PromptEmbedding::empty(d.config());
        let got = loss(&d, &a, &s, &b, &prompt).unwrap();
        let mut sum = 0.0;
        let mut n = 0;
        for i in 0..2 {
            let xt = s.forward_diffuse(&b.x0.batch_item(i).unwrap(), b.ts[i], &b.eps.batch_item(i).unwrap()).unwrap();
            let pred = d.predict_noise(&xt, b.ts[i], &prompt).unwrap();
            for (p, e) in pred.data().iter().zip(b.eps.batch_item(i).unwrap().data()) {
                sum += ((p - e) as f64).powi(2);
                n += 1;
            }
        }
        assert!((got - sum / n as f64).abs() < 1e-5 * got.max(1.0));
        let (gl, _) = adapter_loss_and_grads(&d, &a, &s, &b, &prompt, false).unwrap();
        assert!((gl - got).abs() < 1e-5 * got.max(1.0));
    }

    #[test]
    fn mse_of_offsets() {
        let e = Tensor::from_fn([1, 2, 2, 2], |i| i as f32 * 0.1);
        assert_eq!(mse(&e, &e).unwrap(), 0.0);
        let shifted = e.map(|v| v + 0.5);
        assert!((mse(&shifted, &e).unwrap() - 0.25).abs() < 1e-6);
    }

    #[test]
    fn batched_and_two_pass_gradients_agree() {
        let (d, codec, s) = tiny_model();
        let data = images(2, 32);
        let cfg = TrainConfig { patch: 32, batch: 2, ..TrainConfig::default() };
        let b = adapter_batch(&data, &codec, &cfg, 1000, 3, 0).unwrap();
        let mut a = d.init_adapter();
        // move off the zero-output point so every projection gets gradient
        for (_, t) in a.tensors_mut() {
            *t = Arc::new(t.map(|v| v + 0.01));
        }
        let prompt = PromptEmbedding::empty(d.config());
        let (l1, g1) = adapter_loss_and_grads(&d, &a, &s, &b, &prompt, false).unwrap();
        let (l2, g2) = adapter_loss_and_grads(&d, &a, &s, &b, &prompt, true).unwrap();
        assert!((l1 - l2).abs() < 1e-6);
        for (k, g) in &g1 {
            let scale = g.max_abs().max(1e-6);
            assert!(g.max_abs_diff(&g2[k]).unwrap() / scale < 1e-3, "{k}");
        }
    }

    #[test]
    fn only_adapter_changes() {
        let dir = tempfile::tempdir().unwrap();
        let (d, codec, s) = tiny_model();
        let backbone = checkpoint::digest(d.params());
        let init = d.init_adapter();
        let path = train_loop(&small_cfg(dir.path()), &d, &codec, &s, &images(2, 32), None).unwrap();
        assert_eq!(checkpoint::digest(d.params()), backbone);
        let trained = checkpoint::load_adapter(&path).unwrap();
        d.check_adapter(&trained).unwrap();
        for ((k, a), (_, b)) in trained.to_named().iter().zip(init.to_named().iter()) {
            assert_ne!(a, b, "{k} did not move");
        }
        let log = fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert_eq!(log.lines().next().unwrap(), LOG_HEADER);
        assert_eq!(log.lines().count(), 5);
    }

    #[test]
    fn resume_reproduces_the_next_loss() {
        let (d, codec, s) = tiny_model();
        let data = images(2, 32);
        let full_dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(full_dir.path());
        train_loop(&cfg, &d, &codec, &s, &data, None).unwrap();
        let full_log = fs::read_to_string(full_dir.path().join("train_log.csv")).unwrap();

        let part_dir = tempfile::tempdir().unwrap();
        let first = TrainConfig { steps: 2, out_dir: part_dir.path().into(), ..cfg.clone() };
        let ckpt = train_loop(&first, &d, &codec, &s, &data, None).unwrap();
        let second = TrainConfig { resume: Some(ckpt), out_dir: part_dir.path().into(), ..cfg.clone() };
        let last = train_loop(&second, &d, &codec, &s, &data, None).unwrap();
        let part_log = fs::read_to_string(part_dir.path().join("train_log.csv")).unwrap();
        let losses = |t: &str| t.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().to_string()).collect::<Vec<_>>();
        assert_eq!(losses(&part_log), losses(&full_log));
        assert_eq!(
            fs::read(&last).unwrap(),
            fs::read(full_dir.path().join("adapter-000004.bira")).unwrap()
        );
    }

    #[test]
    fn overfits_a_fixed_batch() {
        let (d, codec, s) = tiny_model();
        let cfg = TrainConfig { patch: 32, batch: 2, ..TrainConfig::default() };
        let b = adapter_batch(&images(2, 32), &codec, &cfg, 1000, 0, 0).unwrap();
        let b = Batch { ts: vec![300, 600], ..b };
        let mut state = TrainState::new(&d, &cfg);
        let prompt = PromptEmbedding::empty(d.config());
        let losses: Vec<f64> = (0..200)
            .map(|_| train_step(&mut state, &d, &s, std::slice::from_ref(&b), &prompt, false).unwrap())
            .collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn accumulation_averages() {
        let (d, codec, s) = tiny_model();
        let cfg = TrainConfig { patch: 32, batch: 2, ..TrainConfig::default() };
        let data = images(2, 32);
        let b0 = adapter_batch(&data, &codec, &cfg, 1000, 0, 0).unwrap();
        let b1 = adapter_batch(&data, &codec, &cfg, 1000, 0, 1).unwrap();
        let prompt = PromptEmbedding::empty(d.config());
        let mut acc = TrainState::new(&d, &cfg);
        let l = train_step(&mut acc, &d, &s, &[b0.clone(), b1.clone()], &prompt, false).unwrap();
        let joined = Batch {
            x0: Tensor::stack(&[b0.x0.batch_item(0).unwrap(), b0.x0.batch_item(1).unwrap(), b1.x0.batch_item(0).unwrap(), b1.x0.batch_item(1).unwrap()]).unwrap(),
            x_deg: Tensor::stack(&[b0.x_deg.batch_item(0).unwrap(), b0.x_deg.batch_item(1).unwrap(), b1.x_deg.batch_item(0).unwrap(), b1.x_deg.batch_item(1).unwrap()]).unwrap(),
            eps: Tensor::stack(&[b0.eps.batch_item(0).unwrap(), b0.eps.batch_item(1).unwrap(), b1.eps.batch_item(0).unwrap(), b1.eps.batch_item(1).unwrap()]).unwrap(),
            ts: [b0.ts.clone(), b1.ts.clone()].concat(),
        };
        let mut one = TrainState::new(&d, &cfg);
        let l1 = train_step(&mut one, &d, &s, &[joined], &prompt, false).unwrap();
        assert!((l - l1).abs() < 1e-5);
        for ((k, a), (_, b)) in acc.adapter.to_named().iter().zip(one.adapter.to_named().iter()) {
            assert!(a.max_abs_diff(b).unwrap() < 1e-5, "{k}");
        }
    }

    #[test]
    fn timesteps_are_uniform() {
        let cfg = TrainConfig::default();
        let bins = 10;
        let mut hist = vec![0usize; bins];
        let n = 10_000;
        for k in 0..n {
            let t = rng_at(cfg.seed, &[streams::TRAIN_TIMESTEP, (k / 8) as u64, (k % 8) as u64]).random_range(0..1000usize);
            hist[t * bins / 1000] += 1;
        }
        let expect = n as f64 / bins as f64;
        let sd = (n as f64 * 0.1 * 0.9).sqrt();
        assert!(hist.iter().all(|&c| (c as f64 - expect).abs() < 3.0 * sd), "{hist:?}");
    }

    #[test]
    fn pretraining_lowers_loss() {
        let (mut d, _, _) = tiny_model();
        let model = ModelConfig {
            denoiser: d.config().clone(),
            ..ModelConfig::default()
        };
        let cfg = PretrainConfig { patch: 32, batch: 4, steps: 40, lr: 3e-3, ..PretrainConfig::default() };
        let before = checkpoint::digest(d.params());
        let losses = pretrain_backbone(&cfg, &model, &mut d, &images(3, 32), None).unwrap();
        assert_ne!(checkpoint::digest(d.params()), before);
        let head: f64 = losses[..10].iter().sum();
        let tail: f64 = losses[30..].iter().sum();
        assert!(tail < head, "{losses:?}");
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Dataset::open(dir.path()), Err(Error::Dataset(_))));
        assert!(Dataset::from_images(vec![]).is_err());
    }
}
