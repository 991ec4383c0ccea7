//! A small reverse-mode automatic differentiation tape.
//!
//! Every network forward pass records its operations on a [`Graph`]. With
//! gradients disabled the graph only holds values; with gradients enabled
//! each node keeps what its backward rule needs, and [`Graph::backward`]
//! returns gradients for every leaf created with [`Graph::param`].
//!
//! Layouts: images are `[N, C, H, W]`, token sequences are `[N, L, D]`,
//! linear weights are `[D_in, D_out]` and convolution weights are
//! `[C_out, C_in, K_h, K_w]`.

use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::tensor::{gemm, gemm_ld, Mat, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

const NORM_EPS: f64 = 1e-5;

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Scale(Var, F),
    Silu(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: Vec<(F, F)>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(F, F)>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<F>,
    },
    AddChannel {
        x: Var,
        v: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Transpose12(Var),
    Upsample2(Var),
    Mse {
        pred: Var,
        target: Tensor<F>,
    },
    Dot {
        x: Var,
        weights: Tensor<F>,
    },
}

struct Node<F> {
    value: Arc<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to the parameter leaves of a graph.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Operation tape. See the module docs.
pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn silu<F: Real>(x: F) -> F {
    x / (F::one() + (-x).exp())
}

impl<F: Real> Graph<F> {
    /// A graph that records backward information.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph for inference only; `param` leaves do not require gradients.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_shared(&mut self, t: Arc<Tensor<F>>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf (when gradients are enabled).
    pub fn param(&mut self, t: Arc<Tensor<F>>) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let out = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(silu);
        let rg = self.rg(x);
        self.push(out, Op::Silu(x), rg)
    }

    /// `x @ w + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape();
        let din = *xs.last().ok_or_else(|| shape_err!("linear on a scalar"))?;
        if ws.len() != 2 || ws[0] != din {
            return Err(shape_err!("linear: input {:?} vs weight {:?}", xs, ws));
        }
        let dout = ws[1];
        if let Some(b) = b {
            if self.value(b).shape() != [dout] {
                return Err(shape_err!("linear bias {:?} vs {}", self.value(b).shape(), dout));
            }
        }
        let m = self.value(x).len() / din;
        let mut out = vec![F::zero(); m * dout];
        gemm(
            Mat::new(self.value(x).data(), m, din),
            Mat::new(self.value(w).data(), din, dout),
            F::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(dout) {
                for (o, &bb) in row.iter_mut().zip(bd) {
                    *o += bb;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, rg))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xt = self.value(x);
        let wt = self.value(w);
        let (n, ci, h, wd) = match xt.shape()[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(shape_err!("conv2d input {:?}", xt.shape())),
        };
        let (co, kh, kw) = match wt.shape()[..] {
            [co, c, kh, kw] if c == ci => (co, kh, kw),
            _ => {
                return Err(shape_err!(
                    "conv2d weight {:?} for input {:?}",
                    wt.shape(),
                    xt.shape()
                ))
            }
        };
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err!("conv2d geometry"));
        }
        let geo = ConvGeo {
            ci,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let p = geo.ho * geo.wo;
        let k = ci * kh * kw;
        let mut out = vec![F::zero(); n * co * p];
        let mut cols = vec![F::zero(); if geo.is_pointwise() { 0 } else { k * p }];
        for s in 0..n {
            let xs = &xt.data()[s * ci * h * wd..(s + 1) * ci * h * wd];
            let colv: &[F] = if geo.is_pointwise() {
                xs
            } else {
                geo.im2col(xs, &mut cols);
                &cols
            };
            gemm(
                Mat::new(wt.data(), co, k),
                Mat::new(colv, k, p),
                F::zero(),
                &mut out[s * co * p..(s + 1) * co * p],
            );
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            if bd.len() != co {
                return Err(shape_err!("conv2d bias has {} entries for {} channels", bd.len(), co));
            }
            for plane in out.chunks_mut(p).enumerate() {
                let bb = bd[plane.0 % co];
                for o in plane.1 {
                    *o += bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new([n, co, geo.ho, geo.wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Group normalization over `[N, C, H, W]` with per-channel affine terms.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xt = self.value(x);
        let (n, c) = match xt.shape()[..] {
            [n, c, _, _] => (n, c),
            _ => return Err(shape_err!("group_norm input {:?}", xt.shape())),
        };
        if groups == 0 || c % groups != 0 {
            return Err(shape_err!("{} channels do not split into {} groups", c, groups));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err!("group_norm affine terms must have {} entries", c));
        }
        let per_channel = xt.len() / (n * c);
        let block = per_channel * (c / groups);
        let (out, stats) = normalize_blocks(
            xt.data(),
            block,
            self.value(gamma).data(),
            self.value(beta).data(),
            |i| (i / per_channel) % c,
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let shape = xt.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            rg,
        ))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xt = self.value(x);
        let d = *xt
            .shape()
            .last()
            .ok_or_else(|| shape_err!("layer_norm on a scalar"))?;
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(shape_err!("layer_norm affine terms must have {} entries", d));
        }
        let (out, stats) = normalize_blocks(
            xt.data(),
            d,
            self.value(gamma).data(),
            self.value(beta).data(),
            |i| i % d,
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let shape = xt.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            rg,
        ))
    }

    /// Multi-head `softmax(Q K^T / sqrt(d_k)) V` on `[N, L, D]` inputs; heads
    /// are contiguous column blocks of width `D / heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q), self.shape(k), self.shape(v));
        let (n, lq, d) = match qs[..] {
            [n, l, d] => (n, l, d),
            _ => return Err(shape_err!("attention query {:?}", qs)),
        };
        let lk = match (ks, vs) {
            ([kn, kl, kd], [vn, vl, vd]) if *kn == n && *vn == n && *kd == d && *vd == d && kl == vl => {
                *kl
            }
            _ => {
                return Err(shape_err!(
                    "attention shapes q {:?}, k {:?}, v {:?}",
                    qs,
                    ks,
                    vs
                ))
            }
        };
        if heads == 0 || d % heads != 0 {
            return Err(shape_err!("{} heads do not divide width {}", heads, d));
        }
        if lk == 0 {
            return Err(shape_err!("attention over zero keys"));
        }
        let dk = d / heads;
        let scale = F::one() / F::of(dk as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![F::zero(); n * lq * d];
        let mut probs = vec![F::zero(); n * heads * lq * lk];
        for s in 0..n {
            for h in 0..heads {
                let p = &mut probs[(s * heads + h) * lq * lk..(s * heads + h + 1) * lq * lk];
                gemm(
                    Mat::strided(&qd[s * lq * d + h * dk..], lq, dk, d),
                    Mat::strided(&kd[s * lk * d + h * dk..], lk, dk, d).t(),
                    F::zero(),
                    p,
                );
                for row in p.chunks_mut(lk) {
                    softmax_row(row, scale);
                }
                gemm_ld(
                    Mat::new(p, lq, lk),
                    Mat::strided(&vd[s * lk * d + h * dk..], lk, dk, d),
                    F::zero(),
                    &mut out[s * lq * d + h * dk..],
                    d,
                );
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::new([n, lq, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs: if rg && self.grad_enabled { probs } else { Vec::new() },
            },
            rg,
        ))
    }

    /// `x[N, C, H, W] + v[N, C]` broadcast over space.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let xt = self.value(x);
        let (n, c) = match xt.shape()[..] {
            [n, c, _, _] => (n, c),
            _ => return Err(shape_err!("add_channel input {:?}", xt.shape())),
        };
        if self.value(v).shape() != [n, c] {
            return Err(shape_err!(
                "add_channel vector {:?} for {:?}",
                self.value(v).shape(),
                xt.shape()
            ));
        }
        let plane = xt.len() / (n * c);
        let vd = self.value(v).data();
        let mut out = xt.data().to_vec();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            for o in chunk {
                *o += vd[i];
            }
        }
        let rg = self.rg(x) || self.rg(v);
        let shape = xt.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddChannel { x, v }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| shape_err!("concat of nothing"))?);
        if axis >= first.len() {
            return Err(shape_err!("concat axis {} for rank {}", axis, first.len()));
        }
        let mut shape = first.to_vec();
        shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == shape.len()
                && s.iter()
                    .zip(&shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err!("concat {:?} onto {:?} along {}", s, first, axis));
            }
            shape[axis] += s[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err!("narrow {}..{} of axis {} in {:?}", start, start + len, axis, s));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Narrow { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// `[N, A, B] -> [N, B, A]`.
    pub fn transpose12(&mut self, x: Var) -> Result<Var> {
        let (n, a, b) = match self.shape(x)[..] {
            [n, a, b] => (n, a, b),
            _ => return Err(shape_err!("transpose12 input {:?}", self.shape(x))),
        };
        let out = transpose_batched(self.value(x).data(), n, a, b);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new([n, b, a], out)?, Op::Transpose12(x), rg))
    }

    /// Nearest-neighbour 2x upsampling of `[N, C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = match self.shape(x)[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(shape_err!("upsample2 input {:?}", self.shape(x))),
        };
        let d = self.value(x).data();
        let mut out = vec![F::zero(); n * c * h * w * 4];
        for p in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = d[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new([n, c, 2 * h, 2 * w], out)?,
            Op::Upsample2(x),
            rg,
        ))
    }

    /// Mean squared error against a constant target, as a scalar node.
    pub fn mse(&mut self, pred: Var, target: &Tensor<F>) -> Result<Var> {
        self.value(pred).expect_same_shape(target)?;
        let n = F::of(target.len() as f64);
        let loss = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<F>()
            / n;
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// `sum(x * weights)` as a scalar node.
    pub fn dot(&mut self, x: Var, weights: &Tensor<F>) -> Result<Var> {
        self.value(x).expect_same_shape(weights)?;
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum::<F>();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Dot {
                x,
                weights: weights.clone(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!("backward needs a scalar, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), F::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &gy, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += *x;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn backward_node(
        &self,
        node: &Node<F>,
        gy: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, gy.clone());
            }
            Op::Scale(x, s) => self.acc(grads, *x, gy.scale(*s)),
            Op::Silu(x) => {
                let g = self.value(*x).zip_map(gy, |x, g| {
                    let sig = F::one() / (F::one() + (-x).exp());
                    g * sig * (F::one() + x * (F::one() - sig))
                })?;
                self.acc(grads, *x, g);
            }
            Op::Linear { x, w, b } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let (din, dout) = (wt.dim(0), wt.dim(1));
                let m = xt.len() / din;
                if self.rg(*x) {
                    let mut dx = vec![F::zero(); m * din];
                    gemm(
                        Mat::new(gy.data(), m, dout),
                        Mat::new(wt.data(), din, dout).t(),
                        F::zero(),
                        &mut dx,
                    );
                    self.acc(grads, *x, Tensor::new(xt.shape().to_vec(), dx)?);
                }
                if self.rg(*w) {
                    let mut dw = vec![F::zero(); din * dout];
                    gemm(
                        Mat::new(xt.data(), m, din).t(),
                        Mat::new(gy.data(), m, dout),
                        F::zero(),
                        &mut dw,
                    );
                    self.acc(grads, *w, Tensor::new([din, dout], dw)?);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![F::zero(); dout];
                        for row in gy.data().chunks(dout) {
                            for (d, &g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        self.acc(grads, *b, Tensor::new([dout], db)?);
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let [n, ci, h, wd] = [xt.dim(0), xt.dim(1), xt.dim(2), xt.dim(3)];
                let [co, _, kh, kw] = [wt.dim(0), wt.dim(1), wt.dim(2), wt.dim(3)];
                let geo = ConvGeo {
                    ci,
                    h,
                    w: wd,
                    kh,
                    kw,
                    stride: *stride,
                    pad: *pad,
                    ho: gy.dim(2),
                    wo: gy.dim(3),
                };
                let p = geo.ho * geo.wo;
                let k = ci * kh * kw;
                let need_w = self.rg(*w);
                let need_x = self.rg(*x);
                let mut dw = vec![F::zero(); if need_w { co * k } else { 0 }];
                let mut dx = vec![F::zero(); if need_x { xt.len() } else { 0 }];
                let mut cols = vec![F::zero(); if geo.is_pointwise() { 0 } else { k * p }];
                let mut dcols = vec![F::zero(); if need_x && !geo.is_pointwise() { k * p } else { 0 }];
                for s in 0..n {
                    let gys = &gy.data()[s * co * p..(s + 1) * co * p];
                    let xs = &xt.data()[s * ci * h * wd..(s + 1) * ci * h * wd];
                    if need_w {
                        let colv: &[F] = if geo.is_pointwise() {
                            xs
                        } else {
                            geo.im2col(xs, &mut cols);
                            &cols
                        };
                        gemm(
                            Mat::new(gys, co, p),
                            Mat::new(colv, k, p).t(),
                            F::one(),
                            &mut dw,
                        );
                    }
                    if need_x {
                        let dxs = &mut dx[s * ci * h * wd..(s + 1) * ci * h * wd];
                        if geo.is_pointwise() {
                            gemm(
                                Mat::new(wt.data(), co, k).t(),
                                Mat::new(gys, co, p),
                                F::zero(),
                                dxs,
                            );
                        } else {
                            gemm(
                                Mat::new(wt.data(), co, k).t(),
                                Mat::new(gys, co, p),
                                F::zero(),
                                &mut dcols,
                            );
                            geo.col2im(&dcols, dxs);
                        }
                    }
                }
                if need_w {
                    self.acc(grads, *w, Tensor::new(wt.shape().to_vec(), dw)?);
                }
                if need_x {
                    self.acc(grads, *x, Tensor::new(xt.shape().to_vec(), dx)?);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![F::zero(); co];
                        for (i, plane) in gy.data().chunks(p).enumerate() {
                            db[i % co] += plane.iter().copied().sum::<F>();
                        }
                        self.acc(grads, *b, Tensor::new([co], db)?);
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let xt = self.value(*x);
                let (n, c) = (xt.dim(0), xt.dim(1));
                let per_channel = xt.len() / (n * c);
                let block = per_channel * (c / groups);
                self.norm_backward(
                    *x,
                    *gamma,
                    *beta,
                    stats,
                    block,
                    c,
                    |i| (i / per_channel) % c,
                    gy,
                    grads,
                )?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let d = *self.shape(*x).last().unwrap();
                self.norm_backward(*x, *gamma, *beta, stats, d, d, |i| i % d, gy, grads)?;
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qt, kt, vt) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, lq, d) = (qt.dim(0), qt.dim(1), qt.dim(2));
                let lk = kt.dim(1);
                let dk = d / heads;
                let scale = F::one() / F::of(dk as f64).sqrt();
                let mut dq = vec![F::zero(); qt.len()];
                let mut dkv = vec![F::zero(); kt.len()];
                let mut dv = vec![F::zero(); vt.len()];
                let mut dp = vec![F::zero(); lq * lk];
                let g = gy.data();
                for s in 0..n {
                    for h in 0..*heads {
                        let p = &probs[(s * heads + h) * lq * lk..(s * heads + h + 1) * lq * lk];
                        let go = s * lq * d + h * dk;
                        let gk = s * lk * d + h * dk;
                        gemm_ld(
                            Mat::new(p, lq, lk).t(),
                            Mat::strided(&g[go..], lq, dk, d),
                            F::one(),
                            &mut dv[gk..],
                            d,
                        );
                        gemm(
                            Mat::strided(&g[go..], lq, dk, d),
                            Mat::strided(&vt.data()[gk..], lk, dk, d).t(),
                            F::zero(),
                            &mut dp,
                        );
                        for (drow, prow) in dp.chunks_mut(lk).zip(p.chunks(lk)) {
                            let dotp: F = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                            for (dd, &pp) in drow.iter_mut().zip(prow) {
                                *dd = pp * (*dd - dotp) * scale;
                            }
                        }
                        gemm_ld(
                            Mat::new(&dp, lq, lk),
                            Mat::strided(&kt.data()[gk..], lk, dk, d),
                            F::one(),
                            &mut dq[go..],
                            d,
                        );
                        gemm_ld(
                            Mat::new(&dp, lq, lk).t(),
                            Mat::strided(&qt.data()[go..], lq, dk, d),
                            F::one(),
                            &mut dkv[gk..],
                            d,
                        );
                    }
                }
                self.acc(grads, *q, Tensor::new(qt.shape().to_vec(), dq)?);
                self.acc(grads, *k, Tensor::new(kt.shape().to_vec(), dkv)?);
                self.acc(grads, *v, Tensor::new(vt.shape().to_vec(), dv)?);
            }
            Op::AddChannel { x, v } => {
                self.acc(grads, *x, gy.clone());
                if self.rg(*v) {
                    let vs = self.shape(*v).to_vec();
                    let nc = vs[0] * vs[1];
                    let plane = gy.len() / nc;
                    let dv: Vec<F> = gy
                        .data()
                        .chunks(plane)
                        .map(|c| c.iter().copied().sum())
                        .collect();
                    self.acc(grads, *v, Tensor::new(vs, dv)?);
                }
            }
            Op::Concat { parts, axis } => {
                let shape = gy.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let len = ps[*axis] * inner;
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            d.extend_from_slice(&gy.data()[o * total + offset..o * total + offset + len]);
                        }
                        self.acc(grads, p, Tensor::new(ps, d)?);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let len = gy.shape()[*axis];
                let mut d = vec![F::zero(); xs.iter().product()];
                for o in 0..outer {
                    let base = (o * xs[*axis] + start) * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&gy.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(grads, *x, Tensor::new(xs, d)?);
            }
            Op::Reshape(x) => {
                let xs = self.shape(*x).to_vec();
                self.acc(grads, *x, gy.clone().reshape(xs)?);
            }
            Op::Transpose12(x) => {
                let (n, b, a) = (gy.dim(0), gy.dim(1), gy.dim(2));
                let d = transpose_batched(gy.data(), n, b, a);
                self.acc(grads, *x, Tensor::new([n, a, b], d)?);
            }
            Op::Upsample2(x) => {
                let xs = self.shape(*x).to_vec();
                let (h, w) = (xs[2], xs[3]);
                let mut d = vec![F::zero(); xs.iter().product()];
                for p in 0..xs[0] * xs[1] {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            d[(p * h + y / 2) * w + xx / 2] += gy.data()[(p * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(xs, d)?);
            }
            Op::Mse { pred, target } => {
                let s = gy.item() * F::of(2.0 / target.len() as f64);
                let g = self.value(*pred).zip_map(target, |p, t| (p - t) * s)?;
                self.acc(grads, *pred, g);
            }
            Op::Dot { x, weights } => {
                let s = gy.item();
                self.acc(grads, *x, weights.scale(s));
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &[(F, F)],
        block: usize,
        channels: usize,
        channel_of: impl Fn(usize) -> usize,
        gy: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let g = gy.data();
        let mut dgamma = vec![F::zero(); channels];
        let mut dbeta = vec![F::zero(); channels];
        let mut dx = vec![F::zero(); xd.len()];
        let inv_n = F::one() / F::of(block as f64);
        for (bi, &(mean, rstd)) in stats.iter().enumerate() {
            let range = bi * block..(bi + 1) * block;
            let mut m1 = F::zero();
            let mut m2 = F::zero();
            for i in range.clone() {
                let c = channel_of(i);
                let xhat = (xd[i] - mean) * rstd;
                let dxhat = g[i] * gd[c];
                m1 += dxhat;
                m2 += dxhat * xhat;
                dgamma[c] += g[i] * xhat;
                dbeta[c] += g[i];
            }
            m1 *= inv_n;
            m2 *= inv_n;
            for i in range {
                let c = channel_of(i);
                let xhat = (xd[i] - mean) * rstd;
                dx[i] = rstd * (g[i] * gd[c] - m1 - xhat * m2);
            }
        }
        self.acc(grads, x, Tensor::new(self.shape(x).to_vec(), dx)?);
        self.acc(grads, gamma, Tensor::new([channels], dgamma)?);
        self.acc(grads, beta, Tensor::new([channels], dbeta)?);
        Ok(())
    }
}

fn softmax_row<F: Real>(row: &mut [F], scale: F) {
    let mut max = F::neg_infinity();
    for v in row.iter_mut() {
        *v *= scale;
        max = max.max(*v);
    }
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = F::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Normalizes contiguous blocks of `block` elements and applies the affine
/// terms selected by `channel_of(flat_index)`.
fn normalize_blocks<F: Real>(
    x: &[F],
    block: usize,
    gamma: &[F],
    beta: &[F],
    channel_of: impl Fn(usize) -> usize,
) -> (Vec<F>, Vec<(F, F)>) {
    let mut out = vec![F::zero(); x.len()];
    let mut stats = Vec::with_capacity(x.len() / block);
    let inv_n = 1.0 / block as f64;
    for (bi, chunk) in x.chunks(block).enumerate() {
        let mean = chunk.iter().map(|v| v.to_f64c()).sum::<f64>() * inv_n;
        let var = chunk
            .iter()
            .map(|v| {
                let d = v.to_f64c() - mean;
                d * d
            })
            .sum::<f64>()
            * inv_n;
        let mean_f = F::of(mean);
        let rstd = F::of(1.0 / (var + NORM_EPS).sqrt());
        for (j, &v) in chunk.iter().enumerate() {
            let i = bi * block + j;
            let c = channel_of(i);
            out[i] = (v - mean_f) * rstd * gamma[c] + beta[c];
        }
        stats.push((mean_f, rstd));
    }
    (out, stats)
}

fn transpose_batched<F: Real>(d: &[F], n: usize, a: usize, b: usize) -> Vec<F> {
    let mut out = vec![F::zero(); d.len()];
    for s in 0..n {
        let src = &d[s * a * b..(s + 1) * a * b];
        let dst = &mut out[s * a * b..(s + 1) * a * b];
        for i in 0..a {
            for j in 0..b {
                dst[j * a + i] = src[i * b + j];
            }
        }
    }
    out
}

struct ConvGeo {
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeo {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<F: Real>(&self, x: &[F], cols: &mut [F]) {
        let p = self.ho * self.wo;
        for c in 0..self.ci {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * p;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut cols[row + oy * self.wo..row + (oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(F::zero());
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                F::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<F: Real>(&self, cols: &[F], dx: &mut [F]) {
        let p = self.ho * self.wo;
        for c in 0..self.ci {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * p;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + iy as usize) * self.w..][..self.w];
                        let src = &cols[row + oy * self.wo..row + (oy + 1) * self.wo];
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}
