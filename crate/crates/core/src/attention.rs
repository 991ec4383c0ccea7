//! Scaled dot-product attention, the plain self/cross-attention layers and
//! the adapter-extended self-attention with its two ablation variants.
//!
//! The free functions here operate on `[tokens, d_model]` matrices and are
//! what the unit tests check against scalar oracles. The denoiser calls the
//! same graph-level helpers on batched `[N, tokens, d_model]` inputs.
//!
//! With `A(q, kv; W) = softmax((q W_Q)(kv W_K)^T / sqrt(d_k)) (kv W_V) W_O`,
//! the adapted layer computes
//!
//! ```text
//! A(z_t, z_t; W) + softmax((z_deg W_Q)(z_t W'_K)^T / sqrt(d_k)) (z_t W'_V) W'_O
//! ```
//!
//! The query projection of the second term is the frozen `W_Q`; only
//! `W'_K`, `W'_V` and `W'_O` are trained.

use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Projection matrices of one attention layer. `W_Q`, `W_K`, `W_V` are
/// `[d_in, d_attn]` (`d_in` is the context width for cross-attention keys
/// and values) and `W_O` is `[d_attn, d_model]`. There are no biases.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<F = f32> {
    pub w_q: Arc<Tensor<F>>,
    pub w_k: Arc<Tensor<F>>,
    pub w_v: Arc<Tensor<F>>,
    pub w_o: Arc<Tensor<F>>,
    pub heads: usize,
}

/// Trainable projections of the adapter branch for one self-attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterLayer<F = f32> {
    pub w_k: Arc<Tensor<F>>,
    pub w_v: Arc<Tensor<F>>,
    pub w_o: Arc<Tensor<F>>,
}

impl<F: Real> AttentionWeights<F> {
    pub fn d_attn(&self) -> usize {
        self.w_q.dim(1)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.w_q.rank() == 2
            && self.w_k.rank() == 2
            && self.w_v.rank() == 2
            && self.w_o.rank() == 2
            && self.w_k.shape() == self.w_v.shape()
            && self.w_k.dim(1) == self.w_q.dim(1)
            && self.w_o.dim(0) == self.w_q.dim(1);
        if !ok {
            return Err(shape_err!(
                "inconsistent attention weights: q {:?}, k {:?}, v {:?}, o {:?}",
                self.w_q.shape(),
                self.w_k.shape(),
                self.w_v.shape(),
                self.w_o.shape()
            ));
        }
        if self.heads == 0 || !self.d_attn().is_multiple_of(self.heads) {
            return Err(shape_err!(
                "{} heads do not divide attention width {}",
                self.heads,
                self.d_attn()
            ));
        }
        Ok(())
    }
}

impl<F: Real> AdapterLayer<F> {
    pub fn validate_against(&self, base: &AttentionWeights<F>) -> Result<()> {
        if self.w_k.shape() != base.w_k.shape()
            || self.w_v.shape() != base.w_v.shape()
            || self.w_o.shape() != base.w_o.shape()
        {
            return Err(shape_err!(
                "adapter shapes k {:?}, v {:?}, o {:?} do not match the host layer",
                self.w_k.shape(),
                self.w_v.shape(),
                self.w_o.shape()
            ));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.w_k.len() + self.w_v.len() + self.w_o.len()
    }
}

/// Clones the host key/value projections and zeroes the output projection,
/// so the adapter branch starts as an exact no-op.
pub fn init_adapter<F: Real>(base: &AttentionWeights<F>) -> AdapterLayer<F> {
    AdapterLayer {
        w_k: Arc::new((*base.w_k).clone()),
        w_v: Arc::new((*base.w_v).clone()),
        w_o: Arc::new(Tensor::zeros(base.w_o.shape().to_vec())),
    }
}

/// Graph handles for an [`AttentionWeights`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnVars {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
    pub heads: usize,
}

impl AttnVars {
    pub fn constant<F: Real>(g: &mut Graph<F>, w: &AttentionWeights<F>) -> Self {
        AttnVars {
            q: g.constant_shared(w.w_q.clone()),
            k: g.constant_shared(w.w_k.clone()),
            v: g.constant_shared(w.w_v.clone()),
            o: g.constant_shared(w.w_o.clone()),
            heads: w.heads,
        }
    }
}

/// Graph handles for an [`AdapterLayer`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct AdapterVars {
    pub k: Var,
    pub v: Var,
    pub o: Var,
}

/// `softmax(q k^T / sqrt(d_k)) v` per head, then `W_O`, for already projected
/// queries.
pub(crate) fn attend_projected<F: Real>(
    g: &mut Graph<F>,
    q: Var,
    kv_src: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
    heads: usize,
) -> Result<Var> {
    let k = g.linear(kv_src, w_k, None)?;
    let v = g.linear(kv_src, w_v, None)?;
    let a = g.attention(q, k, v, heads)?;
    g.linear(a, w_o, None)
}

/// `A(q_src, kv_src; W)` on `[N, L, D]` inputs.
pub(crate) fn attend<F: Real>(g: &mut Graph<F>, q_src: Var, kv_src: Var, w: AttnVars) -> Result<Var> {
    let q = g.linear(q_src, w.q, None)?;
    attend_projected(g, q, kv_src, w.k, w.v, w.o, w.heads)
}

/// The adapted self-attention on separate streams.
pub(crate) fn adapted<F: Real>(
    g: &mut Graph<F>,
    z_t: Var,
    z_deg: Var,
    w: AttnVars,
    a: AdapterVars,
) -> Result<Var> {
    let base = attend(g, z_t, z_t, w)?;
    let q_deg = g.linear(z_deg, w.q, None)?;
    let extra = attend_projected(g, q_deg, z_t, a.k, a.v, a.o, w.heads)?;
    g.add(base, extra)
}

/// Degraded features as queries against the diffused keys and values, with
/// the host weights only.
pub(crate) fn variant1<F: Real>(g: &mut Graph<F>, z_t: Var, z_deg: Var, w: AttnVars) -> Result<Var> {
    attend(g, z_deg, z_t, w)
}

/// Plain self-attention plus the variant-1 term, both with host weights.
pub(crate) fn variant2<F: Real>(g: &mut Graph<F>, z_t: Var, z_deg: Var, w: AttnVars) -> Result<Var> {
    let base = attend(g, z_t, z_t, w)?;
    let cross = attend(g, z_deg, z_t, w)?;
    g.add(base, cross)
}

fn rows<F: Real>(g: &mut Graph<F>, m: &Tensor<F>) -> Result<Var> {
    if m.rank() != 2 {
        return Err(shape_err!("expected a [tokens, width] matrix, got {:?}", m.shape()));
    }
    let t = m.clone().reshape([1, m.dim(0), m.dim(1)])?;
    Ok(g.constant(t))
}

fn unbatch<F: Real>(g: &Graph<F>, v: Var) -> Result<Tensor<F>> {
    let t = g.value(v);
    t.clone().reshape([t.dim(1), t.dim(2)])
}

/// Multi-head `softmax(Q K^T / sqrt(d_k)) V` on `[L, d_attn]` matrices.
pub fn scaled_dot_attention<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    heads: usize,
) -> Result<Tensor<F>> {
    let mut g = Graph::inference();
    let (q, k, v) = (rows(&mut g, q)?, rows(&mut g, k)?, rows(&mut g, v)?);
    let out = g.attention(q, k, v, heads)?;
    unbatch(&g, out)
}

pub fn self_attention_layer<F: Real>(z: &Tensor<F>, w: &AttentionWeights<F>) -> Result<Tensor<F>> {
    cross_attention_layer(z, z, w)
}

pub fn cross_attention_layer<F: Real>(
    z: &Tensor<F>,
    context: &Tensor<F>,
    w: &AttentionWeights<F>,
) -> Result<Tensor<F>> {
    w.validate()?;
    let mut g = Graph::inference();
    let (zq, ctx) = (rows(&mut g, z)?, rows(&mut g, context)?);
    let wv = AttnVars::constant(&mut g, w);
    let out = attend(&mut g, zq, ctx, wv)?;
    unbatch(&g, out)
}

fn check_pair<F: Real>(z_t: &Tensor<F>, z_deg: &Tensor<F>) -> Result<()> {
    if z_t.shape() != z_deg.shape() {
        return Err(shape_err!(
            "diffused features {:?} vs degraded features {:?}",
            z_t.shape(),
            z_deg.shape()
        ));
    }
    Ok(())
}

pub fn bir_extended_attention<F: Real>(
    z_t: &Tensor<F>,
    z_deg: &Tensor<F>,
    base: &AttentionWeights<F>,
    adapter: &AdapterLayer<F>,
) -> Result<Tensor<F>> {
    base.validate()?;
    adapter.validate_against(base)?;
    check_pair(z_t, z_deg)?;
    let mut g = Graph::inference();
    let (zt, zd) = (rows(&mut g, z_t)?, rows(&mut g, z_deg)?);
    let wv = AttnVars::constant(&mut g, base);
    let av = AdapterVars {
        k: g.constant_shared(adapter.w_k.clone()),
        v: g.constant_shared(adapter.w_v.clone()),
        o: g.constant_shared(adapter.w_o.clone()),
    };
    let out = adapted(&mut g, zt, zd, wv, av)?;
    unbatch(&g, out)
}

pub fn variant1_attention<F: Real>(
    z_t: &Tensor<F>,
    z_deg: &Tensor<F>,
    base: &AttentionWeights<F>,
) -> Result<Tensor<F>> {
    base.validate()?;
    check_pair(z_t, z_deg)?;
    let mut g = Graph::inference();
    let (zt, zd) = (rows(&mut g, z_t)?, rows(&mut g, z_deg)?);
    let wv = AttnVars::constant(&mut g, base);
    let out = variant1(&mut g, zt, zd, wv)?;
    unbatch(&g, out)
}

pub fn variant2_attention<F: Real>(
    z_t: &Tensor<F>,
    z_deg: &Tensor<F>,
    base: &AttentionWeights<F>,
) -> Result<Tensor<F>> {
    base.validate()?;
    check_pair(z_t, z_deg)?;
    let mut g = Graph::inference();
    let (zt, zd) = (rows(&mut g, z_t)?, rows(&mut g, z_deg)?);
    let wv = AttnVars::constant(&mut g, base);
    let out = variant2(&mut g, zt, zd, wv)?;
    unbatch(&g, out)
}
