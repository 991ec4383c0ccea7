//! Miniature latent U-Net noise predictor.
//!
//! Layout follows the usual latent-diffusion U-Net: a 3x3 input convolution,
//! down stages of residual blocks (each optionally followed by a
//! self/cross-attention transformer block) with a strided convolution between
//! stages, a middle residual/attention/residual block, mirrored up stages that
//! consume one skip connection per residual block, and a normalized output
//! convolution. A sinusoidal timestep embedding passes through a two-layer
//! MLP and is added inside every residual block.
//!
//! Parameters live in a name-keyed map; the names double as checkpoint keys.
//! Self-attention layers are numbered in network order (down, mid, up), and
//! that index keys the adapter records.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{self, AdapterLayer, AdapterVars, AttentionWeights, AttnVars};
use crate::error::{invalid, shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::{rng_at, streams};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    /// Residual blocks per down stage; up stages use one more.
    pub blocks_per_stage: usize,
    /// Whether each stage carries transformer blocks. The middle block
    /// always does.
    pub attention: Vec<bool>,
    pub heads: usize,
    pub context_dim: usize,
    pub context_tokens: usize,
    pub norm_groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            latent_channels: 12,
            base_channels: 32,
            channel_mult: vec![1, 2, 4],
            blocks_per_stage: 1,
            attention: vec![true; 3],
            heads: 4,
            context_dim: 32,
            context_tokens: 4,
            norm_groups: 8,
        }
    }
}

impl DenoiserConfig {
    /// The attention dimensions of Stable Diffusion 1.5. Only used for
    /// parameter accounting; nothing is allocated from it.
    pub fn sd15() -> Self {
        DenoiserConfig {
            latent_channels: 4,
            base_channels: 320,
            channel_mult: vec![1, 2, 4, 4],
            blocks_per_stage: 2,
            attention: vec![true, true, true, false],
            heads: 8,
            context_dim: 768,
            context_tokens: 77,
            norm_groups: 32,
        }
    }

    pub fn stages(&self) -> usize {
        self.channel_mult.len()
    }

    /// Latent height and width must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.stages().saturating_sub(1))
    }

    pub fn temb_dim(&self) -> usize {
        4 * self.base_channels
    }

    fn check(&self) -> Result<()> {
        let positive = self.latent_channels > 0
            && self.base_channels > 0
            && self.blocks_per_stage > 0
            && self.heads > 0
            && self.context_dim > 0
            && self.context_tokens > 0
            && self.norm_groups > 0
            && !self.channel_mult.is_empty()
            && self.channel_mult.iter().all(|m| *m > 0);
        if !positive {
            return Err(invalid!("denoiser sizes must all be positive"));
        }
        if self.attention.len() != self.channel_mult.len() {
            return Err(invalid!(
                "{} attention flags for {} stages",
                self.attention.len(),
                self.channel_mult.len()
            ));
        }
        if !self.base_channels.is_multiple_of(2) {
            return Err(invalid!("base channels must be even for the timestep embedding"));
        }
        Ok(())
    }
}

/// Which of the fixed prompt embeddings a context holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRole {
    Positive,
    Negative,
    Empty,
}

/// Cross-attention context of shape `[tokens, context_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding<F = f32> {
    pub data: Tensor<F>,
    pub role: PromptRole,
}

impl<F: Real> PromptEmbedding<F> {
    pub fn empty(cfg: &DenoiserConfig) -> Self {
        PromptEmbedding {
            data: Tensor::zeros([cfg.context_tokens, cfg.context_dim]),
            role: PromptRole::Empty,
        }
    }

    /// Fixed pseudo-random stand-in for an encoded text prompt.
    pub fn fixed(cfg: &DenoiserConfig, role: PromptRole, seed: u64) -> Self {
        let stream = match role {
            PromptRole::Empty => return Self::empty(cfg),
            PromptRole::Positive => 1,
            PromptRole::Negative => 2,
        };
        let mut rng = rng_at(seed, &[streams::PROMPTS, stream]);
        PromptEmbedding {
            data: Tensor::from_fn([cfg.context_tokens, cfg.context_dim], |_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                F::of(v)
            }),
            role,
        }
    }

    pub fn cast<G: Real>(&self) -> PromptEmbedding<G> {
        PromptEmbedding {
            data: self.data.cast(),
            role: self.role,
        }
    }
}

/// Stacks prompts into a `[N, tokens, dim]` context batch.
pub fn context_batch<F: Real>(prompts: &[&PromptEmbedding<F>]) -> Result<Tensor<F>> {
    let items: Vec<Tensor<F>> = prompts.iter().map(|p| p.data.clone()).collect();
    Tensor::stack(&items)
}

/// Ablation variants of the self-attention plug-in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Degraded features as queries, host weights only.
    One,
    /// Plain self-attention plus the variant-one term.
    Two,
}

/// Hidden state at the output of one network block.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<F = f32> {
    pub label: String,
    pub data: Tensor<F>,
}

/// Named parameter shapes in construction order.
#[derive(Clone, Debug)]
pub struct Layout {
    pub entries: Vec<(String, Vec<usize>)>,
    pub self_attention: Vec<String>,
}

impl Layout {
    pub fn param_count(&self) -> usize {
        self.entries
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Entries of `W'_K`, `W'_V` and `W'_O` over every self-attention layer.
    pub fn adapter_param_count(&self) -> usize {
        let shapes: BTreeMap<&str, &Vec<usize>> =
            self.entries.iter().map(|(n, s)| (n.as_str(), s)).collect();
        self.self_attention
            .iter()
            .map(|p| {
                ["w_k", "w_v", "w_o"]
                    .iter()
                    .map(|w| shapes[format!("{p}.self.{w}").as_str()].iter().product::<usize>())
                    .sum::<usize>()
            })
            .sum()
    }
}

struct LayoutBuilder<'c> {
    cfg: &'c DenoiserConfig,
    out: Layout,
}

impl LayoutBuilder<'_> {
    fn add(&mut self, name: String, shape: Vec<usize>) {
        self.out.entries.push((name, shape));
    }

    fn check_groups(&self, ch: usize) -> Result<()> {
        if !ch.is_multiple_of(self.cfg.norm_groups) {
            return Err(invalid!(
                "{} channels do not split into {} norm groups",
                ch,
                self.cfg.norm_groups
            ));
        }
        Ok(())
    }

    fn conv(&mut self, p: &str, cout: usize, cin: usize, k: usize) {
        self.add(format!("{p}.w"), vec![cout, cin, k, k]);
        self.add(format!("{p}.b"), vec![cout]);
    }

    fn norm(&mut self, p: &str, ch: usize) {
        self.add(format!("{p}.gamma"), vec![ch]);
        self.add(format!("{p}.beta"), vec![ch]);
    }

    fn linear(&mut self, p: &str, din: usize, dout: usize) {
        self.add(format!("{p}.w"), vec![din, dout]);
        self.add(format!("{p}.b"), vec![dout]);
    }

    fn res(&mut self, p: &str, cin: usize, cout: usize) -> Result<()> {
        self.check_groups(cin)?;
        self.check_groups(cout)?;
        self.norm(&format!("{p}.norm1"), cin);
        self.conv(&format!("{p}.conv1"), cout, cin, 3);
        self.linear(&format!("{p}.temb"), self.cfg.temb_dim(), cout);
        self.norm(&format!("{p}.norm2"), cout);
        self.conv(&format!("{p}.conv2"), cout, cout, 3);
        if cin != cout {
            self.conv(&format!("{p}.skip"), cout, cin, 1);
        }
        Ok(())
    }

    fn transformer(&mut self, p: &str, ch: usize) -> Result<()> {
        self.check_groups(ch)?;
        if !ch.is_multiple_of(self.cfg.heads) {
            return Err(invalid!("{} heads do not divide {} channels", self.cfg.heads, ch));
        }
        let ctx = self.cfg.context_dim;
        self.norm(&format!("{p}.norm"), ch);
        self.linear(&format!("{p}.proj_in"), ch, ch);
        self.norm(&format!("{p}.ln1"), ch);
        for (w, din) in [("w_q", ch), ("w_k", ch), ("w_v", ch)] {
            self.add(format!("{p}.self.{w}"), vec![din, ch]);
        }
        self.add(format!("{p}.self.w_o"), vec![ch, ch]);
        self.norm(&format!("{p}.ln2"), ch);
        for (w, din) in [("w_q", ch), ("w_k", ctx), ("w_v", ctx)] {
            self.add(format!("{p}.cross.{w}"), vec![din, ch]);
        }
        self.add(format!("{p}.cross.w_o"), vec![ch, ch]);
        self.linear(&format!("{p}.proj_out"), ch, ch);
        self.out.self_attention.push(p.to_string());
        Ok(())
    }
}

/// Parameter shapes of a configuration, without allocating any weights.
pub fn layout(cfg: &DenoiserConfig) -> Result<Layout> {
    cfg.check()?;
    let mut b = LayoutBuilder {
        cfg,
        out: Layout {
            entries: Vec::new(),
            self_attention: Vec::new(),
        },
    };
    let base = cfg.base_channels;
    let temb = cfg.temb_dim();
    b.linear("time.lin1", base, temb);
    b.linear("time.lin2", temb, temb);
    b.conv("conv_in", base, cfg.latent_channels, 3);
    let mut skips = vec![base];
    let mut ch = base;
    let stages = cfg.stages();
    for s in 0..stages {
        let cout = base * cfg.channel_mult[s];
        for i in 0..cfg.blocks_per_stage {
            b.res(&format!("down.{s}.res.{i}"), ch, cout)?;
            ch = cout;
            if cfg.attention[s] {
                b.transformer(&format!("down.{s}.attn.{i}"), ch)?;
            }
            skips.push(ch);
        }
        if s + 1 < stages {
            b.conv(&format!("down.{s}.downsample"), ch, ch, 3);
            skips.push(ch);
        }
    }
    b.res("mid.res.0", ch, ch)?;
    b.transformer("mid.attn.0", ch)?;
    b.res("mid.res.1", ch, ch)?;
    for s in (0..stages).rev() {
        let cout = base * cfg.channel_mult[s];
        for i in 0..cfg.blocks_per_stage + 1 {
            let skip = skips.pop().expect("one skip per up block");
            b.res(&format!("up.{s}.res.{i}"), ch + skip, cout)?;
            ch = cout;
            if cfg.attention[s] {
                b.transformer(&format!("up.{s}.attn.{i}"), ch)?;
            }
        }
        if s > 0 {
            b.conv(&format!("up.{s}.upsample"), ch, ch, 3);
        }
    }
    b.norm("out.norm", ch);
    b.conv("conv_out", cfg.latent_channels, ch, 3);
    Ok(b.out)
}

/// Adapter records, one per self-attention layer in network order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams<F = f32> {
    pub layers: Vec<AdapterLayer<F>>,
}

impl<F: Real> AdapterParams<F> {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// Checkpoint view: `adapter.{k}.w_k` and friends.
    pub fn to_named(&self) -> BTreeMap<String, Arc<Tensor<F>>> {
        let mut out = BTreeMap::new();
        for (k, l) in self.layers.iter().enumerate() {
            out.insert(format!("adapter.{k}.w_k"), l.w_k.clone());
            out.insert(format!("adapter.{k}.w_v"), l.w_v.clone());
            out.insert(format!("adapter.{k}.w_o"), l.w_o.clone());
        }
        out
    }

    pub fn from_named(mut named: BTreeMap<String, Arc<Tensor<F>>>) -> Result<Self> {
        let count = named.len() / 3;
        if named.len() != 3 * count {
            return Err(Error::Checkpoint(format!(
                "{} adapter tensors is not a multiple of three",
                named.len()
            )));
        }
        let mut take = |k: usize, w: &str| {
            named
                .remove(&format!("adapter.{k}.{w}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing adapter.{k}.{w}")))
        };
        let layers = (0..count)
            .map(|k| {
                Ok(AdapterLayer {
                    w_k: take(k, "w_k")?,
                    w_v: take(k, "w_v")?,
                    w_o: take(k, "w_o")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AdapterParams { layers })
    }

    /// Mutable access for the optimizer, in `to_named` order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Arc<Tensor<F>>)> {
        let mut out = Vec::new();
        for (k, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("adapter.{k}.w_k"), &mut l.w_k));
            out.push((format!("adapter.{k}.w_o"), &mut l.w_o));
            out.push((format!("adapter.{k}.w_v"), &mut l.w_v));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn cast<G: Real>(&self) -> AdapterParams<G> {
        let c = |t: &Arc<Tensor<F>>| Arc::new(t.cast::<G>());
        AdapterParams {
            layers: self
                .layers
                .iter()
                .map(|l| AdapterLayer {
                    w_k: c(&l.w_k),
                    w_v: c(&l.w_v),
                    w_o: c(&l.w_o),
                })
                .collect(),
        }
    }

    pub(crate) fn bind(&self, g: &mut Graph<F>, trainable: bool) -> Vec<AdapterVars> {
        let mut leaf = |t: &Arc<Tensor<F>>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant_shared(t.clone())
            }
        };
        self.layers
            .iter()
            .map(|l| AdapterVars {
                k: leaf(&l.w_k),
                v: leaf(&l.w_v),
                o: leaf(&l.w_o),
            })
            .collect()
    }
}

/// Graph handles for the backbone parameters.
pub(crate) struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// How self-attention layers treat the degraded stream.
pub(crate) enum Plugin<'a, F> {
    Plain,
    /// The batch is `[degraded; diffused]`, each half `half` items long.
    Adapter { layers: &'a [AdapterVars], half: usize },
    Variant { kind: Variant, half: usize },
    /// Store each self-attention input.
    Record(&'a mut Vec<Tensor<F>>),
    /// Use previously recorded degraded features for the adapter branch.
    Inject {
        degraded: &'a [Tensor<F>],
        layers: &'a [AdapterVars],
    },
}

/// The noise predictor. Weights are immutable once built; the adapter is
/// passed alongside at call time.
#[derive(Debug)]
pub struct Denoiser<F: Real = f32> {
    cfg: DenoiserConfig,
    layout: Layout,
    params: BTreeMap<String, Arc<Tensor<F>>>,
    embed_calls: AtomicUsize,
}

impl<F: Real> Clone for Denoiser<F> {
    fn clone(&self) -> Self {
        Denoiser {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            params: self.params.clone(),
            embed_calls: AtomicUsize::new(0),
        }
    }
}

fn timestep_embedding<F: Real>(ts: &[usize], dim: usize) -> Tensor<F> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
        out.extend(args.iter().map(|a| F::of(a.cos())));
        out.extend(args.iter().map(|a| F::of(a.sin())));
    }
    Tensor::new([ts.len(), dim], out).expect("embedding shape")
}

impl<F: Real> Denoiser<F> {
    /// Deterministic initialization: each tensor draws from its own stream
    /// derived from `seed` and its position in the layout. Weights are
    /// uniform in `+-1/sqrt(fan_in)`, norm scales are one, biases zero.
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        let layout = layout(&cfg)?;
        let mut params = BTreeMap::new();
        for (i, (name, shape)) in layout.entries.iter().enumerate() {
            let t = if name.ends_with(".gamma") {
                Tensor::full(shape.clone(), F::one())
            } else if name.ends_with(".beta") || name.ends_with(".b") {
                Tensor::zeros(shape.clone())
            } else {
                let fan_in: usize = if shape.len() == 4 {
                    shape[1..].iter().product()
                } else {
                    shape[0]
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut rng = rng_at(seed, &[streams::INIT_WEIGHTS, i as u64]);
                Tensor::from_fn(shape.clone(), |_| F::of(rng.random_range(-bound..bound)))
            };
            params.insert(name.clone(), Arc::new(t));
        }
        Ok(Denoiser {
            cfg,
            layout,
            params,
            embed_calls: AtomicUsize::new(0),
        })
    }

    /// Rebuilds a denoiser from named tensors, checking them against the
    /// layout of `cfg`.
    pub fn from_params(cfg: DenoiserConfig, params: BTreeMap<String, Arc<Tensor<F>>>) -> Result<Self> {
        let layout = layout(&cfg)?;
        if params.len() != layout.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                layout.entries.len(),
                params.len()
            )));
        }
        for (name, shape) in &layout.entries {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "{name} has shape {:?}, expected {:?}",
                        t.shape(),
                        shape
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        Ok(Denoiser {
            cfg,
            layout,
            params,
            embed_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &BTreeMap<String, Arc<Tensor<F>>> {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut BTreeMap<String, Arc<Tensor<F>>> {
        &mut self.params
    }

    /// `(name, shape)` for every parameter, sorted by name.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> Denoiser<G> {
        Denoiser {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|(n, t)| (n.clone(), Arc::new(t.cast())))
                .collect(),
            embed_calls: AtomicUsize::new(0),
        }
    }

    /// Number of timestep embeddings computed so far. Each forward pass
    /// computes exactly one, shared by every item and stream in the batch.
    pub fn embed_calls(&self) -> usize {
        self.embed_calls.load(Ordering::Relaxed)
    }

    pub fn self_attention_count(&self) -> usize {
        self.layout.self_attention.len()
    }

    /// Host weights of self-attention layer `k`.
    pub fn attention_weights(&self, k: usize) -> Result<AttentionWeights<F>> {
        let prefix = self
            .layout
            .self_attention
            .get(k)
            .ok_or_else(|| invalid!("no self-attention layer {k}"))?;
        let get = |w: &str| self.params[&format!("{prefix}.self.{w}")].clone();
        Ok(AttentionWeights {
            w_q: get("w_q"),
            w_k: get("w_k"),
            w_v: get("w_v"),
            w_o: get("w_o"),
            heads: self.cfg.heads,
        })
    }

    /// Fresh adapter: cloned key/value projections, zero output projection.
    pub fn init_adapter(&self) -> AdapterParams<F> {
        AdapterParams {
            layers: (0..self.self_attention_count())
                .map(|k| attention::init_adapter(&self.attention_weights(k).expect("layer exists")))
                .collect(),
        }
    }

    pub fn check_adapter(&self, adapter: &AdapterParams<F>) -> Result<()> {
        if adapter.layers.len() != self.self_attention_count() {
            return Err(invalid!(
                "adapter has {} layers, denoiser has {} self-attention layers",
                adapter.layers.len(),
                self.self_attention_count()
            ));
        }
        for (k, l) in adapter.layers.iter().enumerate() {
            l.validate_against(&self.attention_weights(k)?)?;
        }
        Ok(())
    }

    pub(crate) fn bind(&self, g: &mut Graph<F>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(n, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant_shared(t.clone())
                };
                (n.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    fn check_latent(&self, x: &[usize]) -> Result<()> {
        let m = self.cfg.spatial_multiple();
        match *x {
            [_, c, h, w] if c == self.cfg.latent_channels && h % m == 0 && w % m == 0 && h > 0 && w > 0 => {
                Ok(())
            }
            _ => Err(shape_err!(
                "latent batch {:?} needs {} channels and sides divisible by {}",
                x,
                self.cfg.latent_channels,
                m
            )),
        }
    }

    fn conv(&self, g: &mut Graph<F>, p: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = p.get(&format!("{name}.w"))?;
        let b = p.get(&format!("{name}.b"))?;
        let k = g.shape(w)[2];
        g.conv2d(x, w, Some(b), stride, k / 2)
    }

    fn gn(&self, g: &mut Graph<F>, p: &Bound, name: &str, x: Var) -> Result<Var> {
        let gamma = p.get(&format!("{name}.gamma"))?;
        let beta = p.get(&format!("{name}.beta"))?;
        g.group_norm(x, gamma, beta, self.cfg.norm_groups)
    }

    fn ln(&self, g: &mut Graph<F>, p: &Bound, name: &str, x: Var) -> Result<Var> {
        let gamma = p.get(&format!("{name}.gamma"))?;
        let beta = p.get(&format!("{name}.beta"))?;
        g.layer_norm(x, gamma, beta)
    }

    fn lin(&self, g: &mut Graph<F>, p: &Bound, name: &str, x: Var) -> Result<Var> {
        let w = p.get(&format!("{name}.w"))?;
        let b = p.get(&format!("{name}.b"))?;
        g.linear(x, w, Some(b))
    }

    fn res_block(&self, g: &mut Graph<F>, p: &Bound, name: &str, x: Var, temb: Var) -> Result<Var> {
        let h = self.gn(g, p, &format!("{name}.norm1"), x)?;
        let h = g.silu(h);
        let h = self.conv(g, p, &format!("{name}.conv1"), h, 1)?;
        let t = self.lin(g, p, &format!("{name}.temb"), temb)?;
        let h = g.add_channel(h, t)?;
        let h = self.gn(g, p, &format!("{name}.norm2"), h)?;
        let h = g.silu(h);
        let h = self.conv(g, p, &format!("{name}.conv2"), h, 1)?;
        let skip = if p.get(&format!("{name}.skip.w")).is_ok() {
            self.conv(g, p, &format!("{name}.skip"), x, 1)?
        } else {
            x
        };
        g.add(skip, h)
    }

    fn attn_vars(&self, p: &Bound, prefix: &str) -> Result<AttnVars> {
        Ok(AttnVars {
            q: p.get(&format!("{prefix}.w_q"))?,
            k: p.get(&format!("{prefix}.w_k"))?,
            v: p.get(&format!("{prefix}.w_v"))?,
            o: p.get(&format!("{prefix}.w_o"))?,
            heads: self.cfg.heads,
        })
    }

    fn self_attention(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        prefix: &str,
        z: Var,
        plugin: &mut Plugin<'_, F>,
        k: usize,
    ) -> Result<Var> {
        let w = self.attn_vars(p, &format!("{prefix}.self"))?;
        match plugin {
            Plugin::Plain => attention::attend(g, z, z, w),
            Plugin::Record(store) => {
                store.push(g.value(z).clone());
                attention::attend(g, z, z, w)
            }
            Plugin::Inject { degraded, layers } => {
                let zd = degraded
                    .get(k)
                    .ok_or_else(|| invalid!("no recorded features for layer {k}"))?;
                if zd.shape() != g.shape(z) {
                    return Err(shape_err!(
                        "recorded features {:?} vs {:?} at layer {k}",
                        zd.shape(),
                        g.shape(z)
                    ));
                }
                let zd = g.constant(zd.clone());
                attention::adapted(g, z, zd, w, layers[k])
            }
            Plugin::Adapter { layers, half } => {
                let half = *half;
                let q = g.linear(z, w.q, None)?;
                let base = attention::attend_projected(g, q, z, w.k, w.v, w.o, w.heads)?;
                let q_deg = g.narrow(q, 0, 0, half)?;
                let z_t = g.narrow(z, 0, half, half)?;
                let a = layers[k];
                let extra = attention::attend_projected(g, q_deg, z_t, a.k, a.v, a.o, w.heads)?;
                let base_deg = g.narrow(base, 0, 0, half)?;
                let base_t = g.narrow(base, 0, half, half)?;
                let out_t = g.add(base_t, extra)?;
                g.concat(&[base_deg, out_t], 0)
            }
            Plugin::Variant { kind, half } => {
                let half = *half;
                let q = g.linear(z, w.q, None)?;
                let base = attention::attend_projected(g, q, z, w.k, w.v, w.o, w.heads)?;
                let q_deg = g.narrow(q, 0, 0, half)?;
                let z_t = g.narrow(z, 0, half, half)?;
                let cross = attention::attend_projected(g, q_deg, z_t, w.k, w.v, w.o, w.heads)?;
                let base_deg = g.narrow(base, 0, 0, half)?;
                let out_t = match kind {
                    Variant::One => cross,
                    Variant::Two => {
                        let base_t = g.narrow(base, 0, half, half)?;
                        g.add(base_t, cross)?
                    }
                };
                g.concat(&[base_deg, out_t], 0)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn transformer(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        prefix: &str,
        x: Var,
        ctx: Var,
        plugin: &mut Plugin<'_, F>,
        layer: &mut usize,
    ) -> Result<Var> {
        let (n, c, hh, ww) = match g.shape(x)[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(shape_err!("transformer input {:?}", g.shape(x))),
        };
        let h = self.gn(g, p, &format!("{prefix}.norm"), x)?;
        let h = g.reshape(h, &[n, c, hh * ww])?;
        let h = g.transpose12(h)?;
        let h = self.lin(g, p, &format!("{prefix}.proj_in"), h)?;
        let z = self.ln(g, p, &format!("{prefix}.ln1"), h)?;
        let sa = self.self_attention(g, p, prefix, z, plugin, *layer)?;
        *layer += 1;
        let h = g.add(h, sa)?;
        let z = self.ln(g, p, &format!("{prefix}.ln2"), h)?;
        let cw = self.attn_vars(p, &format!("{prefix}.cross"))?;
        let ca = attention::attend(g, z, ctx, cw)?;
        let h = g.add(h, ca)?;
        let h = self.lin(g, p, &format!("{prefix}.proj_out"), h)?;
        let h = g.transpose12(h)?;
        let h = g.reshape(h, &[n, c, hh, ww])?;
        g.add(x, h)
    }

    /// Full forward pass on a latent batch `x` with per-item timesteps and a
    /// `[N, tokens, dim]` context. Block outputs are appended to `features`
    /// when given.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn forward(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        x: Var,
        ts: &[usize],
        ctx: Var,
        plugin: &mut Plugin<'_, F>,
        mut features: Option<&mut Vec<(String, Var)>>,
    ) -> Result<Var> {
        self.check_latent(g.shape(x))?;
        let n = g.shape(x)[0];
        if ts.len() != n {
            return Err(shape_err!("{} timesteps for a batch of {}", ts.len(), n));
        }
        let cs = g.shape(ctx);
        if cs.len() != 3 || cs[0] != n || cs[2] != self.cfg.context_dim {
            return Err(shape_err!(
                "context {:?} for a batch of {} with width {}",
                cs,
                n,
                self.cfg.context_dim
            ));
        }
        self.embed_calls.fetch_add(1, Ordering::Relaxed);
        let temb = g.constant(timestep_embedding(ts, self.cfg.base_channels));
        let temb = self.lin(g, p, "time.lin1", temb)?;
        let temb = g.silu(temb);
        let temb = self.lin(g, p, "time.lin2", temb)?;
        let temb = g.silu(temb);

        let stages = self.cfg.stages();
        let mut layer = 0;
        let mut h = self.conv(g, p, "conv_in", x, 1)?;
        let mut skips = vec![h];
        for s in 0..stages {
            for i in 0..self.cfg.blocks_per_stage {
                h = self.res_block(g, p, &format!("down.{s}.res.{i}"), h, temb)?;
                if self.cfg.attention[s] {
                    h = self.transformer(g, p, &format!("down.{s}.attn.{i}"), h, ctx, plugin, &mut layer)?;
                }
                skips.push(h);
            }
            if let Some(f) = features.as_deref_mut() {
                f.push((format!("Down{s}"), h));
            }
            if s + 1 < stages {
                h = self.conv(g, p, &format!("down.{s}.downsample"), h, 2)?;
                skips.push(h);
            }
        }
        h = self.res_block(g, p, "mid.res.0", h, temb)?;
        h = self.transformer(g, p, "mid.attn.0", h, ctx, plugin, &mut layer)?;
        h = self.res_block(g, p, "mid.res.1", h, temb)?;
        if let Some(f) = features.as_deref_mut() {
            f.push(("Mid".to_string(), h));
        }
        for s in (0..stages).rev() {
            for i in 0..self.cfg.blocks_per_stage + 1 {
                let skip = skips.pop().expect("one skip per up block");
                h = g.concat(&[h, skip], 1)?;
                h = self.res_block(g, p, &format!("up.{s}.res.{i}"), h, temb)?;
                if self.cfg.attention[s] {
                    h = self.transformer(g, p, &format!("up.{s}.attn.{i}"), h, ctx, plugin, &mut layer)?;
                }
            }
            if let Some(f) = features.as_deref_mut() {
                f.push((format!("Up{s}"), h));
            }
            if s > 0 {
                h = g.upsample2(h)?;
                h = self.conv(g, p, &format!("up.{s}.upsample"), h, 1)?;
            }
        }
        let h = self.gn(g, p, "out.norm", h)?;
        let h = g.silu(h);
        self.conv(g, p, "conv_out", h, 1)
    }

    /// Noise prediction for a `[N, C, H, W]` batch.
    pub fn predict_noise_batch(&self, x_t: &Tensor<F>, ts: &[usize], ctx: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::inference();
        let p = self.bind(&mut g, false);
        let x = g.constant(x_t.clone());
        let c = g.constant(ctx.clone());
        let out = self.forward(&mut g, &p, x, ts, c, &mut Plugin::Plain, None)?;
        Ok(g.value(out).clone())
    }

    /// `eps_theta(x_t, t, prompt)` for a single `[C, H, W]` latent.
    pub fn predict_noise(&self, x_t: &Tensor<F>, t: usize, prompt: &PromptEmbedding<F>) -> Result<Tensor<F>> {
        let x = single(x_t)?;
        let out = self.predict_noise_batch(&x, &[t], &context_batch(&[prompt])?)?;
        out.batch_item(0)
    }

    /// Adapted prediction for a batch: `x_deg` and `x_t` are `[N, C, H, W]`
    /// and are run as one stacked batch of `2N`. The returned prediction
    /// covers the diffused half only.
    pub fn predict_noise_adapted_batch(
        &self,
        x_deg: &Tensor<F>,
        x_t: &Tensor<F>,
        ts: &[usize],
        ctx: &Tensor<F>,
        adapter: &AdapterParams<F>,
    ) -> Result<Tensor<F>> {
        self.check_adapter(adapter)?;
        let mut g = Graph::inference();
        let p = self.bind(&mut g, false);
        let layers = adapter.bind(&mut g, false);
        let out = self.stacked(&mut g, &p, x_deg, x_t, ts, ctx, |half| Plugin::Adapter {
            layers: &layers,
            half,
        })?;
        Ok(g.value(out).clone())
    }

    pub fn predict_noise_adapted(
        &self,
        x_deg: &Tensor<F>,
        x_t: &Tensor<F>,
        t: usize,
        prompt: &PromptEmbedding<F>,
        adapter: &AdapterParams<F>,
    ) -> Result<Tensor<F>> {
        let out = self.predict_noise_adapted_batch(
            &single(x_deg)?,
            &single(x_t)?,
            &[t],
            &context_batch(&[prompt])?,
            adapter,
        )?;
        out.batch_item(0)
    }

    /// Ablation variants, batched like [`Self::predict_noise_adapted`].
    pub fn predict_noise_variant(
        &self,
        x_deg: &Tensor<F>,
        x_t: &Tensor<F>,
        t: usize,
        prompt: &PromptEmbedding<F>,
        kind: Variant,
    ) -> Result<Tensor<F>> {
        let mut g = Graph::inference();
        let p = self.bind(&mut g, false);
        let ctx = context_batch(&[prompt])?;
        let out = self.stacked(&mut g, &p, &single(x_deg)?, &single(x_t)?, &[t], &ctx, |half| {
            Plugin::Variant { kind, half }
        })?;
        g.value(out).batch_item(0)
    }

    /// Stacks `[x_deg; x_t]`, duplicates timesteps and contexts, runs the
    /// forward pass and returns the diffused half of the prediction.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn stacked<'a>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        x_deg: &Tensor<F>,
        x_t: &Tensor<F>,
        ts: &[usize],
        ctx: &Tensor<F>,
        plugin: impl FnOnce(usize) -> Plugin<'a, F>,
    ) -> Result<Var>
    where
        F: 'a,
    {
        if x_deg.shape() != x_t.shape() {
            return Err(shape_err!(
                "degraded latent {:?} vs diffused latent {:?}",
                x_deg.shape(),
                x_t.shape()
            ));
        }
        let n = x_t.shape().first().copied().unwrap_or(0);
        let xd = g.constant(x_deg.clone());
        let xt = g.constant(x_t.clone());
        let x = g.concat(&[xd, xt], 0)?;
        let c = g.constant(ctx.clone());
        let c = g.concat(&[c, c], 0)?;
        let ts2: Vec<usize> = ts.iter().chain(ts).copied().collect();
        let out = self.forward(g, p, x, &ts2, c, &mut plugin(n), None)?;
        g.narrow(out, 0, n, n)
    }

    /// Reference adapted prediction that runs the two streams as separate
    /// passes: the degraded latent first, recording each self-attention
    /// input, then the diffused latent with those recordings injected.
    pub fn predict_noise_adapted_two_pass(
        &self,
        x_deg: &Tensor<F>,
        x_t: &Tensor<F>,
        ts: &[usize],
        ctx: &Tensor<F>,
        adapter: &AdapterParams<F>,
    ) -> Result<Tensor<F>> {
        self.check_adapter(adapter)?;
        let recorded = self.record_degraded(x_deg, ts, ctx)?;
        let mut g = Graph::inference();
        let p = self.bind(&mut g, false);
        let layers = adapter.bind(&mut g, false);
        let x = g.constant(x_t.clone());
        let c = g.constant(ctx.clone());
        let out = self.forward(
            &mut g,
            &p,
            x,
            ts,
            c,
            &mut Plugin::Inject {
                degraded: &recorded,
                layers: &layers,
            },
            None,
        )?;
        Ok(g.value(out).clone())
    }

    /// Self-attention inputs of every layer for a `[N, C, H, W]` batch.
    pub(crate) fn record_degraded(&self, x_deg: &Tensor<F>, ts: &[usize], ctx: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
        let mut recorded = Vec::new();
        let mut g = Graph::inference();
        let p = self.bind(&mut g, false);
        let x = g.constant(x_deg.clone());
        let c = g.constant(ctx.clone());
        self.forward(&mut g, &p, x, ts, c, &mut Plugin::Record(&mut recorded), None)?;
        Ok(recorded)
    }

    /// Outputs of every down stage, the middle block and every up stage, in
    /// network order, for a single `[C, H, W]` latent.
    pub fn extract_block_features(
        &self,
        x: &Tensor<F>,
        t: usize,
        prompt: &PromptEmbedding<F>,
    ) -> Result<Vec<FeatureMap<F>>> {
        let mut g = Graph::inference();
        let p = self.bind(&mut g, false);
        let xv = g.constant(single(x)?);
        let c = g.constant(context_batch(&[prompt])?);
        let mut feats = Vec::new();
        self.forward(&mut g, &p, xv, &[t], c, &mut Plugin::Plain, Some(&mut feats))?;
        feats
            .into_iter()
            .map(|(label, v)| {
                Ok(FeatureMap {
                    label,
                    data: g.value(v).batch_item(0)?,
                })
            })
            .collect()
    }
}

fn single<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let [c, h, w] = x.chw()?;
    x.clone().reshape([1, c, h, w])
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng::gaussian;

    pub(crate) fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: 3,
            base_channels: 8,
            channel_mult: vec![1, 2],
            blocks_per_stage: 1,
            attention: vec![true, true],
            heads: 2,
            context_dim: 6,
            context_tokens: 3,
            norm_groups: 4,
        }
    }

    fn latent(seed: u64, shape: [usize; 3]) -> Tensor<f32> {
        gaussian(&mut rng_at(seed, &[]), shape)
    }

    /// Adapter with every projection random, so the branch is active.
    fn random_adapter(d: &Denoiser<f32>, seed: u64) -> AdapterParams<f32> {
        let mut a = d.init_adapter();
        for (i, (_, t)) in a.tensors_mut().into_iter().enumerate() {
            let shape = t.shape().to_vec();
            *t = Arc::new(gaussian(&mut rng_at(seed, &[i as u64]), shape).scale(0.2));
        }
        a
    }

    #[test]
    fn one_stage_count_matches_hand_sum() {
        let cfg = DenoiserConfig {
            latent_channels: 2,
            base_channels: 8,
            channel_mult: vec![1],
            blocks_per_stage: 1,
            attention: vec![false],
            heads: 1,
            context_dim: 4,
            context_tokens: 2,
            norm_groups: 4,
        };
        let d = Denoiser::<f32>::new(cfg, 0).unwrap();
        let time = (8 * 32 + 32) + (32 * 32 + 32);
        let conv_in = 8 * 2 * 9 + 8;
        let res = |cin: usize, cout: usize| {
            2 * cin + (cout * cin * 9 + cout) + (32 * cout + cout) + 2 * cout + (cout * cout * 9 + cout)
                + if cin != cout { cout * cin + cout } else { 0 }
        };
        let tr = |c: usize| 2 * c + (c * c + c) + 2 * c + 4 * c * c + 2 * c + (2 * c * c + 2 * 4 * c) + (c * c + c);
        // down: one block; mid: res + attn + res; up: two blocks on concat
        let total = time + conv_in + res(8, 8) + 2 * res(8, 8) + tr(8) + 2 * res(16, 8) + 2 * 8 + (2 * 8 * 9 + 2);
        assert_eq!(d.param_count(), total);
        assert_eq!(layout(d.config()).unwrap().param_count(), total);
        assert_eq!(d.self_attention_count(), 1);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Denoiser::<f32>::new(tiny(), 9).unwrap();
        let b = Denoiser::<f32>::new(tiny(), 9).unwrap();
        let c = Denoiser::<f32>::new(tiny(), 10).unwrap();
        assert_eq!(a.manifest(), b.manifest());
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn sd15_adapter_count_near_37_million() {
        let n = layout(&DenoiserConfig::sd15()).unwrap().adapter_param_count();
        assert_eq!(n, 3 * (5 * 320 * 320 + 5 * 640 * 640 + 6 * 1280 * 1280));
        assert!((n as f64 - 37e6).abs() <= 3.7e6);
    }

    #[test]
    fn output_shape_purity_and_stress() {
        let d = Denoiser::<f32>::new(tiny(), 1).unwrap();
        let prompt = PromptEmbedding::fixed(d.config(), PromptRole::Positive, 3);
        for (i, shape) in [[3, 2, 2], [3, 4, 6], [3, 8, 2]].into_iter().enumerate() {
            let x = latent(i as u64, shape);
            let a = d.predict_noise(&x, 500, &prompt).unwrap();
            assert_eq!(a.shape(), x.shape());
            assert_eq!(a, d.predict_noise(&x, 500, &prompt).unwrap());
        }
        let big = latent(7, [3, 4, 4]).scale(1e3);
        assert!(d.predict_noise(&big, 999, &prompt).unwrap().all_finite());
        assert!(d.predict_noise(&latent(1, [3, 3, 4]), 5, &prompt).is_err());
        assert!(d.predict_noise(&latent(1, [2, 4, 4]), 5, &prompt).is_err());
    }

    #[test]
    fn zero_init_adapter_is_a_no_op() {
        let d = Denoiser::<f32>::new(tiny(), 2).unwrap();
        let a = d.init_adapter();
        let prompt = PromptEmbedding::empty(d.config());
        for i in 0..5 {
            let x_t = latent(10 + i, [3, 4, 4]);
            let x_d = latent(20 + i, [3, 4, 4]);
            let plain = d.predict_noise(&x_t, 100 * i as usize, &prompt).unwrap();
            let adapted = d.predict_noise_adapted(&x_d, &x_t, 100 * i as usize, &prompt, &a).unwrap();
            assert!(plain.max_abs_diff(&adapted).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn cloned_base_adapter_equals_variant_two() {
        let d = Denoiser::<f32>::new(tiny(), 3).unwrap();
        let mut a = d.init_adapter();
        for (k, l) in a.layers.iter_mut().enumerate() {
            l.w_o = d.attention_weights(k).unwrap().w_o;
        }
        let prompt = PromptEmbedding::fixed(d.config(), PromptRole::Negative, 1);
        let x = latent(4, [3, 4, 4]);
        let adapted = d.predict_noise_adapted(&x, &x, 300, &prompt, &a).unwrap();
        let v2 = d.predict_noise_variant(&x, &x, 300, &prompt, Variant::Two).unwrap();
        assert!(adapted.max_abs_diff(&v2).unwrap() <= 1e-6);
        let v1 = d.predict_noise_variant(&x, &x, 300, &prompt, Variant::One).unwrap();
        // identical streams make variant one plain self-attention
        assert!(v1.max_abs_diff(&d.predict_noise(&x, 300, &prompt).unwrap()).unwrap() <= 1e-5);
    }

    #[test]
    fn batched_matches_two_pass_reference() {
        let d = Denoiser::<f32>::new(tiny(), 4).unwrap();
        let a = random_adapter(&d, 5);
        let xd = gaussian(&mut rng_at(1, &[]), [2, 3, 4, 4]);
        let xt = gaussian(&mut rng_at(2, &[]), [2, 3, 4, 4]);
        let pos = PromptEmbedding::fixed(d.config(), PromptRole::Positive, 1);
        let neg = PromptEmbedding::fixed(d.config(), PromptRole::Negative, 1);
        let ctx = context_batch(&[&pos, &neg]).unwrap();
        let batched = d.predict_noise_adapted_batch(&xd, &xt, &[10, 700], &ctx, &a).unwrap();
        let two = d.predict_noise_adapted_two_pass(&xd, &xt, &[10, 700], &ctx, &a).unwrap();
        assert!(batched.max_abs_diff(&two).unwrap() <= 1e-6);
        let plain = d.predict_noise_batch(&xt, &[10, 700], &ctx).unwrap();
        assert!(batched.max_abs_diff(&plain).unwrap() > 1e-4);
    }

    #[test]
    fn one_embedding_per_forward() {
        let d = Denoiser::<f32>::new(tiny(), 5).unwrap();
        let a = d.init_adapter();
        let p = PromptEmbedding::empty(d.config());
        let x = latent(1, [3, 4, 4]);
        let before = d.embed_calls();
        d.predict_noise_adapted(&x, &x, 7, &p, &a).unwrap();
        assert_eq!(d.embed_calls() - before, 1);
    }

    #[test]
    fn features_in_network_order() {
        let cfg = DenoiserConfig {
            channel_mult: vec![1, 2, 2],
            attention: vec![true, false, true],
            ..tiny()
        };
        let d = Denoiser::<f32>::new(cfg, 6).unwrap();
        let p = PromptEmbedding::empty(d.config());
        let x = latent(2, [3, 8, 8]);
        let f = d.extract_block_features(&x, 0, &p).unwrap();
        let labels: Vec<&str> = f.iter().map(|m| m.label.as_str()).collect();
        assert_eq!(labels, ["Down0", "Down1", "Down2", "Mid", "Up2", "Up1", "Up0"]);
        let sides: Vec<usize> = f.iter().map(|m| m.data.dim(1)).collect();
        assert_eq!(sides, [8, 4, 2, 2, 2, 4, 8]);
        assert_eq!(f, d.extract_block_features(&x, 0, &p).unwrap());
    }

    #[test]
    fn adapter_checkpoint_names_round_trip() {
        let d = Denoiser::<f32>::new(tiny(), 7).unwrap();
        let a = random_adapter(&d, 1);
        let back = AdapterParams::from_named(a.to_named()).unwrap();
        assert_eq!(a, back);
        d.check_adapter(&back).unwrap();
        let short = AdapterParams { layers: vec![] };
        assert!(d.check_adapter(&short).is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = tiny();
        c.attention = vec![true];
        assert!(Denoiser::<f32>::new(c, 0).is_err());
        let mut c = tiny();
        c.norm_groups = 3;
        assert!(Denoiser::<f32>::new(c, 0).is_err());
        let mut c = tiny();
        c.heads = 3;
        assert!(Denoiser::<f32>::new(c, 0).is_err());
    }
}
