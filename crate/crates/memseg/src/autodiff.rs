//! Reverse-mode differentiation over recorded expressions.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles; the
//! forward value of each node is produced by the plain [`Tensor`] kernels, so
//! a recorded forward pass is bit-identical to the unrecorded one.
//! [`Tape::backward`] then evaluates the derivative of a scalar loss with
//! respect to every tracked leaf by walking the record in reverse.
//!
//! Leaves come in two kinds: `param` (tracked, receives a gradient) and
//! `constant` (untracked — used for inputs and for feature-memory rows, which
//! stay outside differentiation). A node whose ancestors are all constants is
//! skipped during the reverse walk.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Recorded expression graph. Single-threaded; create one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    step: Step,
    needs_grad: bool,
}

/// Handle to a node on a tape. Copyable; tied to its tape's lifetime.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Per-leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`, if `var` was tracked and reached.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }
}

enum Step {
    Leaf,
    Relu,
    Scale(f64),
    Add,
    Matmul,
    MatmulTranspose,
    Transpose,
    Conv1x1,
    Conv3x3 { stride: usize },
    BilinearResize,
    AdaptiveAvgPool,
    ConcatChannels,
    ConcatRows,
    SoftmaxRows,
    SoftmaxChannels,
    Reshape,
    ChwToPixelRows,
    PixelRowsToChw,
    /// Mean of `−ln(max(p, clamp))` at the labelled channel of each
    /// non-ignored pixel; `labels` is the flattened target grid.
    NllFromProbs {
        labels: Vec<u8>,
        ignore: u8,
        clamp: f64,
    },
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Untracked leaf: participates in forward math, receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert(value, Vec::new(), Step::Leaf, false)
    }

    /// Tracked leaf: `backward` reports the loss derivative w.r.t. it.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.insert(value, Vec::new(), Step::Leaf, true)
    }

    fn insert(&self, value: Tensor, parents: Vec<usize>, step: Step, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            step,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, value: Tensor, parents: Vec<usize>, step: Step) -> Var<'_> {
        let needs_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].needs_grad)
        };
        self.insert(value, parents, step, needs_grad)
    }

    /// Reverse-mode derivative of a recorded scalar w.r.t. every tracked leaf.
    ///
    /// The expression must have been evaluated forward on this tape first (a
    /// `Var` is the proof of that) and `loss` must be a single-element node.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::State(
                "backward: loss was recorded on a different tape".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::State(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        // Tape order is a topological order: parents always precede children.
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let mut sink = |parent: usize, contribution: Tensor| {
                if !nodes[parent].needs_grad {
                    return;
                }
                match &mut grads[parent] {
                    Some(existing) => {
                        debug_assert_eq!(existing.shape(), contribution.shape());
                        for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                            *e += c;
                        }
                    }
                    slot => *slot = Some(contribution),
                }
            };
            propagate(node, &nodes, &upstream, &mut sink)?;
            if matches!(node.step, Step::Leaf) {
                grads[id] = Some(upstream); // keep leaf gradients
            }
        }
        Ok(Gradients { grads })
    }
}

/// Apply the vector-Jacobian product of one step, feeding per-parent
/// contributions into `sink`.
fn propagate(
    node: &Node,
    nodes: &[Node],
    upstream: &Tensor,
    sink: &mut dyn FnMut(usize, Tensor),
) -> Result<()> {
    let parent = |i: usize| -> &Tensor { &nodes[node.parents[i]].value };
    match &node.step {
        Step::Leaf => {}
        Step::Relu => {
            let x = parent(0);
            let mut g = upstream.clone();
            for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
                if xv <= 0.0 {
                    *gv = 0.0;
                }
            }
            sink(node.parents[0], g);
        }
        Step::Scale(k) => {
            sink(node.parents[0], upstream.scale(*k));
        }
        Step::Add => {
            sink(node.parents[0], upstream.clone());
            sink(node.parents[1], upstream.clone());
        }
        Step::Matmul => {
            // C = A·B  ⇒  dA = G·Bᵀ, dB = Aᵀ·G
            let (a, b) = (parent(0), parent(1));
            sink(node.parents[0], upstream.matmul_transpose(b)?);
            sink(node.parents[1], a.transpose()?.matmul(upstream)?);
        }
        Step::MatmulTranspose => {
            // C = A·Bᵀ ⇒  dA = G·B, dB = Gᵀ·A
            let (a, b) = (parent(0), parent(1));
            sink(node.parents[0], upstream.matmul(b)?);
            sink(node.parents[1], upstream.transpose()?.matmul(a)?);
        }
        Step::Transpose => {
            sink(node.parents[0], upstream.transpose()?);
        }
        Step::Conv1x1 => {
            let (x, w) = (parent(0), parent(1));
            let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let cout = w.shape()[0];
            let hw = h * wd;
            // dx = wᵀ applied per pixel
            let wt = w.transpose()?;
            sink(node.parents[0], upstream.conv1x1(&wt, &Tensor::zeros(&[cin]))?);
            // dw[oc,ic] = Σ_p g[oc,p]·x[ic,p]; db[oc] = Σ_p g[oc,p]
            let mut dw = Tensor::zeros(&[cout, cin]);
            let mut db = Tensor::zeros(&[cout]);
            for oc in 0..cout {
                let gplane = &upstream.data()[oc * hw..(oc + 1) * hw];
                db.data_mut()[oc] = gplane.iter().sum();
                for ic in 0..cin {
                    let xplane = &x.data()[ic * hw..(ic + 1) * hw];
                    dw.data_mut()[oc * cin + ic] =
                        gplane.iter().zip(xplane).map(|(g, x)| g * x).sum();
                }
            }
            sink(node.parents[1], dw);
            sink(node.parents[2], db);
        }
        Step::Conv3x3 { stride } => {
            let (x, w) = (parent(0), parent(1));
            let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let cout = w.shape()[0];
            let (oh, ow) = (node.value.shape()[1], node.value.shape()[2]);
            let mut dx = Tensor::zeros(&[cin, h, wd]);
            let mut dw = Tensor::zeros(&[cout, cin, 3, 3]);
            let mut db = Tensor::zeros(&[cout]);
            let s = *stride;
            let (lo, hi) = crate::tensor::conv_interior(s, wd, ow);
            for oc in 0..cout {
                let gplane = &upstream.data()[oc * oh * ow..(oc + 1) * oh * ow];
                db.data_mut()[oc] = gplane.iter().sum();
                for ic in 0..cin {
                    let xplane = &x.data()[ic * h * wd..(ic + 1) * h * wd];
                    for ky in 0..3usize {
                        let wbase = ((oc * cin + ic) * 3 + ky) * 3;
                        let (w0, w1, w2) =
                            (w.data()[wbase], w.data()[wbase + 1], w.data()[wbase + 2]);
                        let (mut a0, mut a1, mut a2) = (0.0, 0.0, 0.0);
                        for oy in 0..oh {
                            let iy = (s * oy + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let rbase = iy as usize * wd;
                            let g_row = &gplane[oy * ow..(oy + 1) * ow];
                            // edge columns: test each tap
                            for (ox, &g) in g_row[..lo].iter().enumerate() {
                                let anchor = s * ox;
                                if anchor >= 1 {
                                    a0 += g * xplane[rbase + anchor - 1];
                                    dx.data_mut()[ic * h * wd + rbase + anchor - 1] += w0 * g;
                                }
                                if anchor < wd {
                                    a1 += g * xplane[rbase + anchor];
                                    dx.data_mut()[ic * h * wd + rbase + anchor] += w1 * g;
                                }
                                if anchor + 1 < wd {
                                    a2 += g * xplane[rbase + anchor + 1];
                                    dx.data_mut()[ic * h * wd + rbase + anchor + 1] += w2 * g;
                                }
                            }
                            for (i, &g) in g_row[lo..hi].iter().enumerate() {
                                let ix = rbase + s * (lo + i) - 1;
                                a0 += g * xplane[ix];
                                a1 += g * xplane[ix + 1];
                                a2 += g * xplane[ix + 2];
                                let drow = &mut dx.data_mut()[ic * h * wd + ix..];
                                drow[0] += w0 * g;
                                drow[1] += w1 * g;
                                drow[2] += w2 * g;
                            }
                            for (i, &g) in g_row[hi..].iter().enumerate() {
                                let anchor = s * (hi + i);
                                if anchor >= 1 {
                                    a0 += g * xplane[rbase + anchor - 1];
                                    dx.data_mut()[ic * h * wd + rbase + anchor - 1] += w0 * g;
                                }
                                if anchor < wd {
                                    a1 += g * xplane[rbase + anchor];
                                    dx.data_mut()[ic * h * wd + rbase + anchor] += w1 * g;
                                }
                                if anchor + 1 < wd {
                                    a2 += g * xplane[rbase + anchor + 1];
                                    dx.data_mut()[ic * h * wd + rbase + anchor + 1] += w2 * g;
                                }
                            }
                        }
                        dw.data_mut()[wbase] = a0;
                        dw.data_mut()[wbase + 1] = a1;
                        dw.data_mut()[wbase + 2] = a2;
                    }
                }
            }
            sink(node.parents[0], dx);
            sink(node.parents[1], dw);
            sink(node.parents[2], db);
        }
        Step::BilinearResize => {
            let x = parent(0);
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (oh, ow) = (node.value.shape()[1], node.value.shape()[2]);
            let mut dx = Tensor::zeros(&[c, h, w]);
            if oh == h && ow == w {
                sink(node.parents[0], upstream.clone());
                return Ok(());
            }
            let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
                (0..n_out)
                    .map(|o| {
                        let src = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
                        let i0f = src.floor();
                        let frac = src - i0f;
                        let i0 = (i0f as isize).clamp(0, n_in as isize - 1) as usize;
                        let i1 = ((i0f as isize) + 1).clamp(0, n_in as isize - 1) as usize;
                        (i0, i1, frac)
                    })
                    .collect()
            };
            let ys = axis(h, oh);
            let xs = axis(w, ow);
            for ch in 0..c {
                let dplane = &mut dx.data_mut()[ch * h * w..(ch + 1) * h * w];
                let gplane = &upstream.data()[ch * oh * ow..(ch + 1) * oh * ow];
                for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let g = gplane[oy * ow + ox];
                        dplane[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                        dplane[y0 * w + x1] += g * (1.0 - fy) * fx;
                        dplane[y1 * w + x0] += g * fy * (1.0 - fx);
                        dplane[y1 * w + x1] += g * fy * fx;
                    }
                }
            }
            sink(node.parents[0], dx);
        }
        Step::AdaptiveAvgPool => {
            let x = parent(0);
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (gh, gw) = (node.value.shape()[1], node.value.shape()[2]);
            let mut dx = Tensor::zeros(&[c, h, w]);
            for ch in 0..c {
                let dplane = &mut dx.data_mut()[ch * h * w..(ch + 1) * h * w];
                for gy in 0..gh {
                    let (y0, y1) = crate::tensor::pool_span(gy, gh, h);
                    for gx in 0..gw {
                        let (x0, x1) = crate::tensor::pool_span(gx, gw, w);
                        let g = upstream.data()[(ch * gh + gy) * gw + gx]
                            / ((y1 - y0) * (x1 - x0)) as f64;
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                dplane[y * w + xx] += g;
                            }
                        }
                    }
                }
            }
            sink(node.parents[0], dx);
        }
        Step::ConcatChannels => {
            let c0 = parent(0).shape()[0];
            let (h, w) = (node.value.shape()[1], node.value.shape()[2]);
            let hw = h * w;
            let (ga, gb) = upstream.data().split_at(c0 * hw);
            let c1 = parent(1).shape()[0];
            sink(node.parents[0], Tensor::from_vec(vec![c0, h, w], ga.to_vec())?);
            sink(node.parents[1], Tensor::from_vec(vec![c1, h, w], gb.to_vec())?);
        }
        Step::ConcatRows => {
            let (r0, cols) = (parent(0).shape()[0], parent(0).shape()[1]);
            let r1 = parent(1).shape()[0];
            let (ga, gb) = upstream.data().split_at(r0 * cols);
            sink(node.parents[0], Tensor::from_vec(vec![r0, cols], ga.to_vec())?);
            sink(node.parents[1], Tensor::from_vec(vec![r1, cols], gb.to_vec())?);
        }
        Step::SoftmaxRows => {
            // dX_row = y ⊙ (g − (g·y))
            let y = &node.value;
            let (m, n) = (y.shape()[0], y.shape()[1]);
            let mut dx = Tensor::zeros(&[m, n]);
            for i in 0..m {
                let yr = &y.data()[i * n..(i + 1) * n];
                let gr = &upstream.data()[i * n..(i + 1) * n];
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                let dr = &mut dx.data_mut()[i * n..(i + 1) * n];
                for ((d, &y), &g) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = y * (g - dot);
                }
            }
            sink(node.parents[0], dx);
        }
        Step::SoftmaxChannels => {
            let y = &node.value;
            let (c, h, w) = (y.shape()[0], y.shape()[1], y.shape()[2]);
            let hw = h * w;
            let mut dx = Tensor::zeros(&[c, h, w]);
            for p in 0..hw {
                let mut dot = 0.0;
                for ch in 0..c {
                    dot += y.data()[ch * hw + p] * upstream.data()[ch * hw + p];
                }
                for ch in 0..c {
                    dx.data_mut()[ch * hw + p] =
                        y.data()[ch * hw + p] * (upstream.data()[ch * hw + p] - dot);
                }
            }
            sink(node.parents[0], dx);
        }
        Step::Reshape => {
            let shape = parent(0).shape().to_vec();
            sink(node.parents[0], upstream.clone().reshape(shape)?);
        }
        Step::ChwToPixelRows => {
            let shape = parent(0).shape();
            let (h, w) = (shape[1], shape[2]);
            sink(node.parents[0], upstream.pixel_rows_to_chw(h, w)?);
        }
        Step::PixelRowsToChw => {
            sink(node.parents[0], upstream.chw_to_pixel_rows()?);
        }
        Step::NllFromProbs {
            labels,
            ignore,
            clamp,
        } => {
            let probs = parent(0);
            let (k, h, w) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
            let hw = h * w;
            let count = labels.iter().filter(|&&l| l != *ignore).count();
            let mut dp = Tensor::zeros(&[k, h, w]);
            if count > 0 {
                let g = upstream.data()[0] / count as f64;
                for (p, &label) in labels.iter().enumerate() {
                    if label == *ignore {
                        continue;
                    }
                    let idx = label as usize * hw + p;
                    let pv = probs.data()[idx];
                    if pv > *clamp {
                        dp.data_mut()[idx] = -g / pv;
                    }
                }
            }
            sink(node.parents[0], dp);
        }
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(self) -> usize {
        self.id
    }

    /// Clone of this node's value.
    pub fn value(self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Read this node's value without cloning.
    pub fn with_value<R>(self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    fn unary(self, step: Step, value: Tensor) -> Var<'t> {
        self.tape.record(value, vec![self.id], step)
    }

    fn binary(self, rhs: Var<'t>, step: Step, value: Tensor) -> Var<'t> {
        debug_assert!(std::ptr::eq(self.tape, rhs.tape), "vars from different tapes");
        self.tape.record(value, vec![self.id, rhs.id], step)
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.with_value(|t| t.relu());
        self.unary(Step::Relu, v)
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        let v = self.with_value(|t| t.scale(k));
        self.unary(Step::Scale(k), v)
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let v = self.with_value(|a| rhs.with_value(|b| a.add(b)))?;
        Ok(self.binary(rhs, Step::Add, v))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let v = self.with_value(|a| rhs.with_value(|b| a.matmul(b)))?;
        Ok(self.binary(rhs, Step::Matmul, v))
    }

    /// `self ⊗ rhsᵀ`.
    pub fn matmul_transpose(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let v = self.with_value(|a| rhs.with_value(|b| a.matmul_transpose(b)))?;
        Ok(self.binary(rhs, Step::MatmulTranspose, v))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let v = self.with_value(|t| t.transpose())?;
        Ok(self.unary(Step::Transpose, v))
    }

    pub fn conv1x1(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let v = self.with_value(|x| {
            weight.with_value(|w| bias.with_value(|b| x.conv1x1(w, b)))
        })?;
        Ok(self
            .tape
            .record(v, vec![self.id, weight.id, bias.id], Step::Conv1x1))
    }

    pub fn conv3x3(self, weight: Var<'t>, bias: Var<'t>, stride: usize) -> Result<Var<'t>> {
        let v = self.with_value(|x| {
            weight.with_value(|w| bias.with_value(|b| x.conv3x3(w, b, stride)))
        })?;
        Ok(self.tape.record(
            v,
            vec![self.id, weight.id, bias.id],
            Step::Conv3x3 { stride },
        ))
    }

    pub fn bilinear_resize(self, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        let v = self.with_value(|t| t.bilinear_resize(out_h, out_w))?;
        Ok(self.unary(Step::BilinearResize, v))
    }

    pub fn adaptive_avg_pool(self, gh: usize, gw: usize) -> Result<Var<'t>> {
        let v = self.with_value(|t| t.adaptive_avg_pool(gh, gw))?;
        Ok(self.unary(Step::AdaptiveAvgPool, v))
    }

    pub fn concat_channels(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let v = self.with_value(|a| rhs.with_value(|b| a.concat_channels(b)))?;
        Ok(self.binary(rhs, Step::ConcatChannels, v))
    }

    pub fn concat_rows(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let v = self.with_value(|a| rhs.with_value(|b| a.concat_rows(b)))?;
        Ok(self.binary(rhs, Step::ConcatRows, v))
    }

    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let v = self.with_value(|t| t.softmax_rows())?;
        Ok(self.unary(Step::SoftmaxRows, v))
    }

    pub fn softmax_channels(self) -> Result<Var<'t>> {
        let v = self.with_value(|t| t.softmax_channels())?;
        Ok(self.unary(Step::SoftmaxChannels, v))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let v = self.with_value(|t| t.clone().reshape(shape))?;
        Ok(self.unary(Step::Reshape, v))
    }

    pub fn chw_to_pixel_rows(self) -> Result<Var<'t>> {
        let v = self.with_value(|t| t.chw_to_pixel_rows())?;
        Ok(self.unary(Step::ChwToPixelRows, v))
    }

    pub fn pixel_rows_to_chw(self, h: usize, w: usize) -> Result<Var<'t>> {
        let v = self.with_value(|t| t.pixel_rows_to_chw(h, w))?;
        Ok(self.unary(Step::PixelRowsToChw, v))
    }

    /// Mean negative log-likelihood of a `K×H×W` probability map against a
    /// flattened label grid (`ignore` pixels excluded, probabilities clamped
    /// at `1e-12`). All pixels ignored yields loss 0.
    pub fn nll_from_probs(self, labels: &[u8], ignore: u8) -> Result<Var<'t>> {
        const CLAMP: f64 = 1e-12;
        let value = self.with_value(|probs| -> Result<Tensor> {
            if probs.rank() != 3 {
                return Err(Error::shape(format!(
                    "nll_from_probs: rank-3 probs required, got {:?}",
                    probs.shape()
                )));
            }
            let (k, h, w) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
            let hw = h * w;
            if labels.len() != hw {
                return Err(Error::shape(format!(
                    "nll_from_probs: {} labels for {h}×{w} probs",
                    labels.len()
                )));
            }
            let mut sum = 0.0;
            let mut count = 0usize;
            for (p, &label) in labels.iter().enumerate() {
                if label == ignore {
                    continue;
                }
                if label as usize >= k {
                    return Err(Error::Input(format!(
                        "nll_from_probs: label {label} out of range for K={k}"
                    )));
                }
                sum += -(probs.data()[label as usize * hw + p].max(CLAMP)).ln();
                count += 1;
            }
            if count == 0 {
                log::warn!("nll_from_probs: all pixels ignored, loss is 0");
                return Ok(Tensor::scalar(0.0));
            }
            Ok(Tensor::scalar(sum / count as f64))
        })?;
        Ok(self.unary(
            Step::NllFromProbs {
                labels: labels.to_vec(),
                ignore,
                clamp: CLAMP,
            },
            value,
        ))
    }
}

pub mod fd {
    //! Central finite-difference oracle for gradient checks.

    use super::*;

    /// Max relative error between `analytic` and the central finite
    /// difference of `f` over every coordinate of `x`.
    ///
    /// The denominator is `max(|fd|, |analytic|, scale)` so that near-zero
    /// derivatives compare at absolute scale.
    pub fn max_rel_error(
        f: &mut dyn FnMut(&Tensor) -> f64,
        x: &Tensor,
        analytic: &Tensor,
        h: f64,
        scale: f64,
    ) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let fp = f(&xp);
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fm = f(&xm);
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            let denom = fd.abs().max(a.abs()).max(scale);
            worst = worst.max((fd - a).abs() / denom);
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Sum all elements of a var (test-only reduction via matmul with ones).
    fn sum_all<'t>(tape: &'t Tape, v: Var<'t>) -> Var<'t> {
        let n = v.with_value(|t| t.numel());
        let flat = v.reshape(vec![1, n]).unwrap();
        let ones = tape.constant(Tensor::full(&[n, 1], 1.0));
        flat.matmul(ones).unwrap()
    }

    #[test]
    fn conv1x1_weight_gradient_matches_fd() {
        let mut rng = crate::rng::stream(1, "ad-conv1x1");
        let x = rand_tensor(&[3, 4, 5], &mut rng);
        let w = rand_tensor(&[2, 3], &mut rng);
        let b = rand_tensor(&[2], &mut rng);

        let tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.param(w.clone()), tape.param(b.clone()));
        let y = xv.conv1x1(wv, bv).unwrap();
        let loss = sum_all(&tape, y);
        let grads = tape.backward(loss).unwrap();

        let mut f = |wt: &Tensor| {
            x.conv1x1(wt, &b).unwrap().data().iter().sum::<f64>()
        };
        let err = fd::max_rel_error(&mut f, &w, grads.get(wv).unwrap(), 1e-4, 1.0);
        assert!(err <= 1e-4, "weight grad rel err {err}");

        let mut fb = |bt: &Tensor| {
            x.conv1x1(&w, bt).unwrap().data().iter().sum::<f64>()
        };
        let err_b = fd::max_rel_error(&mut fb, &b, grads.get(bv).unwrap(), 1e-4, 1.0);
        assert!(err_b <= 1e-4, "bias grad rel err {err_b}");
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let tape = Tape::new();
        let w = tape.param(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let zero = w.scale(0.0);
        let loss = sum_all(&tape, zero);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(w).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn softmax_row_sum_gradient_matches_fd() {
        let mut rng = crate::rng::stream(2, "ad-softmax");
        let x = rand_tensor(&[3, 4], &mut rng);
        let tape = Tape::new();
        let xv = tape.param(x.clone());
        let s = xv.softmax_rows().unwrap();
        // sum of row 0 only
        let mut sel = Tensor::zeros(&[3, 4]);
        for j in 0..4 {
            sel.set2(0, j, 1.0);
        }
        let picked = s
            .reshape(vec![1, 12])
            .unwrap()
            .matmul(tape.constant(sel.reshape(vec![12, 1]).unwrap()))
            .unwrap();
        let grads = tape.backward(picked).unwrap();
        let mut f = |xt: &Tensor| xt.softmax_rows().unwrap().row(0).iter().sum::<f64>();
        let err = fd::max_rel_error(&mut f, &x, grads.get(xv).unwrap(), 1e-4, 1.0);
        assert!(err <= 1e-4, "softmax grad rel err {err}");
    }

    #[test]
    fn conv3x3_gradients_match_fd_both_strides() {
        let mut rng = crate::rng::stream(3, "ad-conv3x3");
        for stride in [1, 2] {
            let x = rand_tensor(&[2, 6, 6], &mut rng);
            let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
            let b = rand_tensor(&[3], &mut rng);
            let tape = Tape::new();
            let (xv, wv, bv) = (tape.param(x.clone()), tape.param(w.clone()), tape.param(b.clone()));
            let y = xv.conv3x3(wv, bv, stride).unwrap();
            let loss = sum_all(&tape, y);
            let grads = tape.backward(loss).unwrap();

            let mut fw = |wt: &Tensor| x.conv3x3(wt, &b, stride).unwrap().data().iter().sum::<f64>();
            let err_w = fd::max_rel_error(&mut fw, &w, grads.get(wv).unwrap(), 1e-4, 1.0);
            assert!(err_w <= 1e-4, "stride {stride} weight rel err {err_w}");

            let mut fx = |xt: &Tensor| xt.conv3x3(&w, &b, stride).unwrap().data().iter().sum::<f64>();
            let err_x = fd::max_rel_error(&mut fx, &x, grads.get(xv).unwrap(), 1e-4, 1.0);
            assert!(err_x <= 1e-4, "stride {stride} input rel err {err_x}");
        }
    }

    #[test]
    fn bilinear_and_pool_gradients_match_fd() {
        let mut rng = crate::rng::stream(4, "ad-resize");
        let x = rand_tensor(&[2, 4, 4], &mut rng);

        let tape = Tape::new();
        let xv = tape.param(x.clone());
        let y = xv.bilinear_resize(7, 3).unwrap();
        let loss = sum_all(&tape, y);
        let grads = tape.backward(loss).unwrap();
        let mut f = |xt: &Tensor| xt.bilinear_resize(7, 3).unwrap().data().iter().sum::<f64>();
        let err = fd::max_rel_error(&mut f, &x, grads.get(xv).unwrap(), 1e-4, 1.0);
        assert!(err <= 1e-4, "bilinear rel err {err}");

        let tape = Tape::new();
        let xv = tape.param(x.clone());
        let y = xv.adaptive_avg_pool(3, 2).unwrap();
        let loss = sum_all(&tape, y);
        let grads = tape.backward(loss).unwrap();
        let mut f = |xt: &Tensor| xt.adaptive_avg_pool(3, 2).unwrap().data().iter().sum::<f64>();
        let err = fd::max_rel_error(&mut f, &x, grads.get(xv).unwrap(), 1e-4, 1.0);
        assert!(err <= 1e-4, "pool rel err {err}");
    }

    #[test]
    fn nll_chain_through_softmax_matches_fd() {
        let mut rng = crate::rng::stream(5, "ad-nll");
        let logits = rand_tensor(&[3, 2, 2], &mut rng);
        let labels = vec![0u8, 2, 255, 1];

        let tape = Tape::new();
        let lv = tape.param(logits.clone());
        let probs = lv.softmax_channels().unwrap();
        let loss = probs.nll_from_probs(&labels, 255).unwrap();
        let grads = tape.backward(loss).unwrap();

        let mut f = |lt: &Tensor| {
            let p = lt.softmax_channels().unwrap();
            let hw = 4;
            let mut sum = 0.0;
            let mut n = 0;
            for (i, &lab) in labels.iter().enumerate() {
                if lab != 255 {
                    sum += -(p.data()[lab as usize * hw + i].max(1e-12)).ln();
                    n += 1;
                }
            }
            sum / n as f64
        };
        let err = fd::max_rel_error(&mut f, &logits, grads.get(lv).unwrap(), 1e-4, 1.0);
        assert!(err <= 1e-4, "nll rel err {err}");
    }

    #[test]
    fn all_ignored_nll_is_zero_with_zero_grad() {
        let tape = Tape::new();
        let p = tape.param(Tensor::full(&[2, 1, 2], 0.5));
        let loss = p.nll_from_probs(&[255, 255], 255).unwrap();
        assert_eq!(loss.value().data()[0], 0.0);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(p).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let v = tape.param(Tensor::zeros(&[2, 2]));
        let err = tape.backward(v).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn backward_rejects_foreign_tape() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let v = t1.param(Tensor::scalar(1.0));
        assert!(matches!(t2.backward(v), Err(Error::State(_))));
    }

    #[test]
    fn fanout_accumulates() {
        // loss = x·x via two paths: d/dx (x + x) = 2
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let s = x.add(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data()[0], 2.0);
    }

    #[test]
    fn attention_shaped_chain_matches_fd() {
        // softmax(q·kᵀ/√d)·v with q from a tracked projection
        let mut rng = crate::rng::stream(6, "ad-attn");
        let x = rand_tensor(&[4, 2, 2], &mut rng);
        let wq = rand_tensor(&[2, 4], &mut rng);
        let kv = rand_tensor(&[4, 2], &mut rng); // constant keys/values

        let run = |wq_t: &Tensor| -> f64 {
            let q = x.conv1x1(wq_t, &Tensor::zeros(&[2])).unwrap();
            let qr = q.chw_to_pixel_rows().unwrap();
            let scores = qr.matmul_transpose(&kv).unwrap().scale(1.0 / (2f64).sqrt());
            let attn = scores.softmax_rows().unwrap();
            let out = attn.matmul(&kv).unwrap();
            out.data().iter().sum()
        };

        let tape = Tape::new();
        let (xv, wqv) = (tape.constant(x.clone()), tape.param(wq.clone()));
        let kvv = tape.constant(kv.clone());
        let q = xv.conv1x1(wqv, tape.constant(Tensor::zeros(&[2]))).unwrap();
        let qr = q.chw_to_pixel_rows().unwrap();
        let scores = qr.matmul_transpose(kvv).unwrap().scale(1.0 / (2f64).sqrt());
        let attn = scores.softmax_rows().unwrap();
        let out = attn.matmul(kvv).unwrap();
        let loss = sum_all(&tape, out);
        let grads = tape.backward(loss).unwrap();

        let mut f = |wt: &Tensor| run(wt);
        let err = fd::max_rel_error(&mut f, &wq, grads.get(wqv).unwrap(), 1e-4, 1.0);
        assert!(err <= 1e-4, "attention chain rel err {err}");
    }
}
