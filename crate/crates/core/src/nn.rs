//! Rank-3 tensor graph with reverse-mode automatic differentiation.
//!
//! The engine records every operation on an append-only tape ([`Graph`]);
//! node parents always precede their children, so one reverse sweep of the
//! tape propagates gradients visiting each node exactly once. The operator
//! set is exactly what the network needs: 1D convolution, batch
//! normalization, activations, pooling, linear layers, dropout, feature
//! concatenation, and a fused label-smoothed cross-entropy.
//!
//! All kernels are generic over [`Scalar`] so the same code runs in `f32`
//! for training and checkpoints and in `f64` for finite-difference oracle
//! tests. Everything is deterministic given explicit RNG state; reductions
//! use a fixed left-to-right order.
//!
//! Shape violations are programmer errors and panic with a descriptive
//! message, mirroring the convention of ndarray-style numeric crates.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::fmt::{Debug, Display};

/// Element type of the tensor engine: `f32` for training, `f64` for oracles.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts from `f64`, panicking only for values outside the type's
    /// range (never for the finite constants used here).
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }
    /// Widens to `f64` for reporting and cross-precision tests.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite value")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Handle to a tensor recorded on a [`Graph`] tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

/// Train/eval switch shared by dropout, batch norm, and the mixing layer.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

struct Node<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    parents: Vec<NodeId>,
    op: Op<T>,
}

enum Op<T> {
    Leaf,
    Conv1d { stride: usize, pad: usize },
    BatchNorm { xhat: Vec<T>, invstd: Vec<T>, train: bool },
    Relu,
    Sigmoid,
    Softmax,
    Gap,
    Linear,
    Dropout { mask: Vec<T> },
    ConcatF,
    Add,
    ChannelScale,
    ChannelAffine { scale: Vec<T> },
    SmoothedCe { probs: Vec<T>, targets: Vec<T> },
    Sum,
}

/// Append-only autodiff tape over rank-2/3 tensors.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        values: Vec<T>,
        parents: Vec<NodeId>,
        op: Op<T>,
    ) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            shape,
            values,
            grad: None,
            requires_grad,
            parents,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts a constant leaf (no gradient tracked).
    pub fn constant(&mut self, shape: &[usize], values: Vec<T>) -> NodeId {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "leaf shape {:?} does not match {} values",
            shape,
            values.len()
        );
        self.push(shape.to_vec(), values, Vec::new(), Op::Leaf)
    }

    /// Inserts a differentiable leaf (`requires_grad = true`).
    pub fn leaf(&mut self, shape: &[usize], values: Vec<T>) -> NodeId {
        let id = self.constant(shape, values);
        self.nodes[id.0].requires_grad = true;
        id
    }

    fn node(&self, id: NodeId) -> &Node<T> {
        self.nodes
            .get(id.0)
            .unwrap_or_else(|| panic!("tensor {:?} was not recorded on this graph", id))
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.node(id).values
    }

    /// Accumulated gradient of `id`, if any backward pass has reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.node(id).grad.as_deref()
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        let n = self.node(id);
        assert_eq!(n.values.len(), 1, "expected scalar, got shape {:?}", n.shape);
        n.values[0]
    }

    fn dims3(&self, id: NodeId, what: &str) -> (usize, usize, usize) {
        let s = self.shape(id);
        assert_eq!(s.len(), 3, "{what}: expected rank-3 tensor, got shape {s:?}");
        (s[0], s[1], s[2])
    }

    fn dims2(&self, id: NodeId, what: &str) -> (usize, usize) {
        let s = self.shape(id);
        assert_eq!(s.len(), 2, "{what}: expected rank-2 tensor, got shape {s:?}");
        (s[0], s[1])
    }

    /// 1D cross-correlation (no kernel flip) with zero padding.
    ///
    /// `x`: `[B, Cin, T]`, `w`: `[Cout, Cin, K]`, `b`: `[Cout]` →
    /// `[B, Cout, (T + 2·pad − K)/stride + 1]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        assert!(stride >= 1, "conv1d: stride must be >= 1");
        let (bs, cin, t) = self.dims3(x, "conv1d input");
        let ws = self.shape(w);
        assert_eq!(ws.len(), 3, "conv1d: weight must be [Cout, Cin, K], got {ws:?}");
        let (cout, wcin, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(wcin, cin, "conv1d: weight Cin {wcin} != input Cin {cin}");
        assert_eq!(self.shape(b), &[cout], "conv1d: bias must be [Cout]");
        assert!(
            k <= t + 2 * pad,
            "conv1d: kernel {k} longer than padded input {}",
            t + 2 * pad
        );
        let t_out = (t + 2 * pad - k) / stride + 1;

        let mut out = vec![T::zero(); bs * cout * t_out];
        {
            let xv = &self.node(x).values;
            let wv = &self.node(w).values;
            let bv = &self.node(b).values;
            for bi in 0..bs {
                for co in 0..cout {
                    let orow = &mut out[(bi * cout + co) * t_out..(bi * cout + co + 1) * t_out];
                    orow.fill(bv[co]);
                    for ci in 0..cin {
                        let xrow = &xv[(bi * cin + ci) * t..(bi * cin + ci + 1) * t];
                        let wrow = &wv[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                        for (kk, &wk) in wrow.iter().enumerate() {
                            // valid output range for this tap: 0 <= t_in < t
                            let (lo, hi) = conv_tap_range(t, t_out, stride, pad, kk);
                            if lo >= hi {
                                continue;
                            }
                            if stride == 1 {
                                // lo guarantees lo + kk >= pad
                                let x_start = lo + kk - pad;
                                for (o, &xi) in orow[lo..hi]
                                    .iter_mut()
                                    .zip(&xrow[x_start..x_start + (hi - lo)])
                                {
                                    *o = *o + wk * xi;
                                }
                            } else {
                                let x_start = lo * stride + kk - pad;
                                for (o, xi) in orow[lo..hi]
                                    .iter_mut()
                                    .zip(xrow[x_start..].iter().step_by(stride))
                                {
                                    *o = *o + wk * *xi;
                                }
                            }
                        }
                    }
                }
            }
        }
        self.push(
            vec![bs, cout, t_out],
            out,
            vec![x, w, b],
            Op::Conv1d { stride, pad },
        )
    }

    /// Batch normalization over `(B, T)` per channel.
    ///
    /// Train mode normalizes with batch statistics and updates
    /// `running_mean`/`running_var` in place with the given momentum
    /// (running variance stored unbiased). Eval mode normalizes with the
    /// running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm1d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &mut [T],
        running_var: &mut [T],
        mode: Mode,
        momentum: T,
        eps: T,
    ) -> NodeId {
        let (bs, c, t) = self.dims3(x, "batchnorm1d input");
        assert_eq!(self.shape(gamma), &[c], "batchnorm1d: gamma must be [C]");
        assert_eq!(self.shape(beta), &[c], "batchnorm1d: beta must be [C]");
        assert_eq!(running_mean.len(), c, "batchnorm1d: running mean length");
        assert_eq!(running_var.len(), c, "batchnorm1d: running var length");
        let n = bs * t;
        assert!(n >= 1, "batchnorm1d: empty time axis");

        let mut xhat = vec![T::zero(); bs * c * t];
        let mut invstd = vec![T::zero(); c];
        let mut out = vec![T::zero(); bs * c * t];
        {
            let xv = &self.node(x).values;
            let gv = &self.node(gamma).values;
            let bv = &self.node(beta).values;
            let nf = T::of(n as f64);
            for ci in 0..c {
                let (mean, var) = match mode {
                    Mode::Train => {
                        let mut sum = T::zero();
                        for bi in 0..bs {
                            let row = &xv[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                            for &v in row {
                                sum = sum + v;
                            }
                        }
                        let mean = sum / nf;
                        let mut ss = T::zero();
                        for bi in 0..bs {
                            let row = &xv[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                            for &v in row {
                                let d = v - mean;
                                ss = ss + d * d;
                            }
                        }
                        let var = ss / nf;
                        // Unbiased estimate goes into the running buffer,
                        // matching the usual deep-learning convention.
                        let unbiased = if n > 1 {
                            ss / T::of((n - 1) as f64)
                        } else {
                            var
                        };
                        running_mean[ci] =
                            (T::one() - momentum) * running_mean[ci] + momentum * mean;
                        running_var[ci] =
                            (T::one() - momentum) * running_var[ci] + momentum * unbiased;
                        (mean, var)
                    }
                    Mode::Eval => (running_mean[ci], running_var[ci]),
                };
                let istd = T::one() / (var + eps).sqrt();
                invstd[ci] = istd;
                for bi in 0..bs {
                    let base = (bi * c + ci) * t;
                    for ti in 0..t {
                        let xh = (xv[base + ti] - mean) * istd;
                        xhat[base + ti] = xh;
                        out[base + ti] = gv[ci] * xh + bv[ci];
                    }
                }
            }
        }
        let op = Op::BatchNorm {
            xhat,
            invstd,
            train: mode == Mode::Train,
        };
        self.push(vec![bs, c, t], out, vec![x, gamma, beta], op)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v: Vec<T> = self
            .node(x)
            .values
            .iter()
            .map(|&a| if a > T::zero() { a } else { T::zero() })
            .collect();
        let shape = self.node(x).shape.clone();
        self.push(shape, v, vec![x], Op::Relu)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v: Vec<T> = self.node(x).values.iter().map(|&a| stable_sigmoid(a)).collect();
        let shape = self.node(x).shape.clone();
        self.push(shape, v, vec![x], Op::Sigmoid)
    }

    /// Softmax over the class axis of `[B, K]`; rows sum to 1.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let (bs, k) = self.dims2(x, "softmax input");
        let xv = &self.node(x).values;
        let mut out = vec![T::zero(); bs * k];
        for bi in 0..bs {
            let row = &xv[bi * k..(bi + 1) * k];
            softmax_row(row, &mut out[bi * k..(bi + 1) * k]);
        }
        self.push(vec![bs, k], out, vec![x], Op::Softmax)
    }

    /// Global average pooling over time: `[B, C, T]` → `[B, C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let (bs, c, t) = self.dims3(x, "global_avg_pool input");
        assert!(t >= 1, "global_avg_pool: empty time axis");
        let xv = &self.node(x).values;
        let tf = T::of(t as f64);
        let mut out = vec![T::zero(); bs * c];
        for bi in 0..bs {
            for ci in 0..c {
                let row = &xv[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                let mut s = T::zero();
                for &v in row {
                    s = s + v;
                }
                out[bi * c + ci] = s / tf;
            }
        }
        self.push(vec![bs, c], out, vec![x], Op::Gap)
    }

    /// Fully connected layer: `x [B, F] · wᵀ [F, O] + b [O]` → `[B, O]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (bs, f) = self.dims2(x, "linear input");
        let ws = self.shape(w);
        assert_eq!(ws.len(), 2, "linear: weight must be [O, F], got {ws:?}");
        let (o, wf) = (ws[0], ws[1]);
        assert_eq!(wf, f, "linear: weight F {wf} != input F {f}");
        assert_eq!(self.shape(b), &[o], "linear: bias must be [O]");
        let mut out = vec![T::zero(); bs * o];
        {
            let xv = &self.node(x).values;
            let wv = &self.node(w).values;
            let bv = &self.node(b).values;
            for bi in 0..bs {
                let xrow = &xv[bi * f..(bi + 1) * f];
                let orow = &mut out[bi * o..(bi + 1) * o];
                for (oi, slot) in orow.iter_mut().enumerate() {
                    let wrow = &wv[oi * f..(oi + 1) * f];
                    let mut acc = T::zero();
                    for (xi, wi) in xrow.iter().zip(wrow) {
                        acc = acc + *xi * *wi;
                    }
                    *slot = acc + bv[oi];
                }
            }
        }
        self.push(vec![bs, o], out, vec![x, w, b], Op::Linear)
    }

    /// Inverted dropout: train mode zeroes with probability `p` and scales
    /// survivors by `1/(1−p)`; eval mode (or `p == 0`) is the identity.
    pub fn dropout(&mut self, x: NodeId, p: f64, mode: Mode, rng: &mut ChaCha8Rng) -> NodeId {
        assert!((0.0..1.0).contains(&p), "dropout: p must be in [0, 1)");
        if mode == Mode::Eval || p == 0.0 {
            return x;
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.node(x).values.len())
            .map(|_| if rng.random_range(0.0..1.0) < p { T::zero() } else { keep })
            .collect();
        let v: Vec<T> = self
            .node(x)
            .values
            .iter()
            .zip(&mask)
            .map(|(&a, &m)| a * m)
            .collect();
        let shape = self.node(x).shape.clone();
        self.push(shape, v, vec![x], Op::Dropout { mask })
    }

    /// Concatenates `[B, F_i]` tensors along the feature axis, preserving
    /// argument order.
    pub fn concat_features(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "concat_features: empty input list");
        let (bs, _) = self.dims2(xs[0], "concat_features input");
        let mut f_total = 0;
        for &x in xs {
            let (b2, f) = self.dims2(x, "concat_features input");
            assert_eq!(b2, bs, "concat_features: batch size mismatch");
            f_total += f;
        }
        let mut out = vec![T::zero(); bs * f_total];
        let mut off = 0;
        for &x in xs {
            let f = self.shape(x)[1];
            let xv = &self.node(x).values;
            for bi in 0..bs {
                out[bi * f_total + off..bi * f_total + off + f]
                    .copy_from_slice(&xv[bi * f..(bi + 1) * f]);
            }
            off += f;
        }
        self.push(vec![bs, f_total], out, xs.to_vec(), Op::ConcatF)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "add: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let v: Vec<T> = self
            .node(a)
            .values
            .iter()
            .zip(&self.node(b).values)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.node(a).shape.clone();
        self.push(shape, v, vec![a, b], Op::Add)
    }

    /// Scales each channel of `x [B, C, T]` by `s [B, C]`.
    pub fn channel_scale(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let (bs, c, t) = self.dims3(x, "channel_scale input");
        assert_eq!(self.shape(s), &[bs, c], "channel_scale: scale must be [B, C]");
        let xv = &self.node(x).values;
        let sv = &self.node(s).values;
        let mut out = vec![T::zero(); bs * c * t];
        for bc in 0..bs * c {
            let sc = sv[bc];
            for ti in 0..t {
                out[bc * t + ti] = xv[bc * t + ti] * sc;
            }
        }
        self.push(vec![bs, c, t], out, vec![x, s], Op::ChannelScale)
    }

    /// Per-(instance, channel) affine map with *constant* coefficients:
    /// `out[b,c,t] = x[b,c,t]·scale[b·C+c] + shift[b·C+c]`. The coefficients
    /// are treated as constants in backward (gradients flow through `x`
    /// only), which is exactly the statistics-mixing contract.
    pub fn channel_affine(&mut self, x: NodeId, scale: Vec<T>, shift: Vec<T>) -> NodeId {
        let (bs, c, t) = self.dims3(x, "channel_affine input");
        assert_eq!(scale.len(), bs * c, "channel_affine: scale must be B*C long");
        assert_eq!(shift.len(), bs * c, "channel_affine: shift must be B*C long");
        let xv = &self.node(x).values;
        let mut out = vec![T::zero(); bs * c * t];
        for bc in 0..bs * c {
            for ti in 0..t {
                out[bc * t + ti] = xv[bc * t + ti] * scale[bc] + shift[bc];
            }
        }
        self.push(vec![bs, c, t], out, vec![x], Op::ChannelAffine { scale })
    }

    /// Fused label-smoothed cross-entropy over logits `[B, K]`, reduced by
    /// batch mean. Targets are `q = (1−ε)·onehot + ε/K`; the log-softmax is
    /// computed with the log-sum-exp shift so logits up to |z| ≈ 100 are
    /// safe.
    pub fn smoothed_cross_entropy(&mut self, logits: NodeId, labels: &[usize], eps: f64) -> NodeId {
        let (bs, k) = self.dims2(logits, "smoothed_cross_entropy logits");
        assert_eq!(labels.len(), bs, "smoothed_cross_entropy: one label per row");
        assert!((0.0..1.0).contains(&eps), "smoothed_cross_entropy: eps in [0, 1)");
        for (i, &l) in labels.iter().enumerate() {
            assert!(l < k, "smoothed_cross_entropy: label {l} out of range at row {i}");
        }
        let xv = &self.node(logits).values;
        let off = T::of(eps / k as f64);
        let on = T::of(1.0 - eps) + off;
        let mut probs = vec![T::zero(); bs * k];
        let mut targets = vec![T::zero(); bs * k];
        let mut loss = T::zero();
        for bi in 0..bs {
            let row = &xv[bi * k..(bi + 1) * k];
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut denom = T::zero();
            for &v in row {
                denom = denom + (v - mx).exp();
            }
            let lse = mx + denom.ln();
            for ki in 0..k {
                let q = if ki == labels[bi] { on } else { off };
                targets[bi * k + ki] = q;
                probs[bi * k + ki] = (row[ki] - lse).exp();
                loss = loss + q * (lse - row[ki]);
            }
        }
        loss = loss / T::of(bs as f64);
        self.push(
            vec![1],
            vec![loss],
            vec![logits],
            Op::SmoothedCe { probs, targets },
        )
    }

    /// Sum of all elements, as a scalar node (test utility and loss glue).
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut s = T::zero();
        for &v in &self.node(x).values {
            s = s + v;
        }
        self.push(vec![1], vec![s], vec![x], Op::Sum)
    }

    /// Reverse-mode sweep from scalar `loss`. Gradients accumulate into each
    /// reachable `requires_grad` node; calling backward twice doubles them.
    pub fn backward(&mut self, loss: NodeId) {
        let ln = self.node(loss);
        assert_eq!(
            ln.values.len(),
            1,
            "backward: loss must be scalar, got shape {:?}",
            ln.shape
        );
        self.backward_with(loss, vec![T::one()]);
    }

    /// Reverse-mode sweep from `node` with an explicit upstream gradient
    /// (e.g. a one-hot row to differentiate a single logit).
    pub fn backward_with(&mut self, node: NodeId, seed: Vec<T>) {
        assert_eq!(
            seed.len(),
            self.node(node).values.len(),
            "backward_with: seed gradient must match the node's element count"
        );
        let loss = node;
        let mut pass: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        pass[loss.0] = Some(seed);

        for i in (0..=loss.0).rev() {
            let Some(g) = pass[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut pass);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, gi) in acc.iter_mut().zip(&g) {
                        *a = *a + *gi;
                    }
                }
                None => node.grad = Some(g),
            }
        }
    }

    /// Adds `g`-weighted parent gradients of node `i` into `pass`.
    fn propagate(&self, i: usize, g: &[T], pass: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let mut send = |pid: NodeId, contrib: Vec<T>| {
            if !self.nodes[pid.0].requires_grad {
                return;
            }
            match &mut pass[pid.0] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&contrib) {
                        *a = *a + *c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Conv1d { stride, pad } => {
                let (x, w, b) = (node.parents[0], node.parents[1], node.parents[2]);
                let (bs, cin, t) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1], self.nodes[x.0].shape[2]);
                let (cout, k) = (self.nodes[w.0].shape[0], self.nodes[w.0].shape[2]);
                let t_out = node.shape[2];
                let (stride, pad) = (*stride, *pad);
                let xv = &self.nodes[x.0].values;
                let wv = &self.nodes[w.0].values;

                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![T::zero(); bs * cin * t];
                    for bi in 0..bs {
                        for co in 0..cout {
                            let grow = &g[(bi * cout + co) * t_out..(bi * cout + co + 1) * t_out];
                            for ci in 0..cin {
                                let dxrow = &mut dx[(bi * cin + ci) * t..(bi * cin + ci + 1) * t];
                                let wrow = &wv[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                                for (kk, &wk) in wrow.iter().enumerate() {
                                    let (lo, hi) = conv_tap_range(t, t_out, stride, pad, kk);
                                    if lo >= hi {
                                        continue;
                                    }
                                    let x_start = lo * stride + kk - pad;
                                    if stride == 1 {
                                        for (d, &gi) in dxrow[x_start..x_start + (hi - lo)]
                                            .iter_mut()
                                            .zip(&grow[lo..hi])
                                        {
                                            *d = *d + wk * gi;
                                        }
                                    } else {
                                        for (d, &gi) in dxrow[x_start..]
                                            .iter_mut()
                                            .step_by(stride)
                                            .zip(&grow[lo..hi])
                                        {
                                            *d = *d + wk * gi;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    send(x, dx);
                }
                if self.nodes[w.0].requires_grad {
                    let mut dw = vec![T::zero(); cout * cin * k];
                    for co in 0..cout {
                        for bi in 0..bs {
                            let grow = &g[(bi * cout + co) * t_out..(bi * cout + co + 1) * t_out];
                            for ci in 0..cin {
                                let xrow = &xv[(bi * cin + ci) * t..(bi * cin + ci + 1) * t];
                                let dwrow = &mut dw[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                                for (kk, slot) in dwrow.iter_mut().enumerate() {
                                    let (lo, hi) = conv_tap_range(t, t_out, stride, pad, kk);
                                    if lo >= hi {
                                        continue;
                                    }
                                    let x_start = lo * stride + kk - pad;
                                    let mut acc = T::zero();
                                    if stride == 1 {
                                        for (&gi, &xi) in grow[lo..hi]
                                            .iter()
                                            .zip(&xrow[x_start..x_start + (hi - lo)])
                                        {
                                            acc = acc + gi * xi;
                                        }
                                    } else {
                                        for (&gi, xi) in grow[lo..hi]
                                            .iter()
                                            .zip(xrow[x_start..].iter().step_by(stride))
                                        {
                                            acc = acc + gi * *xi;
                                        }
                                    }
                                    *slot = *slot + acc;
                                }
                            }
                        }
                    }
                    send(w, dw);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![T::zero(); cout];
                    for bi in 0..bs {
                        for co in 0..cout {
                            let grow = &g[(bi * cout + co) * t_out..(bi * cout + co + 1) * t_out];
                            let mut acc = T::zero();
                            for &gv in grow {
                                acc = acc + gv;
                            }
                            db[co] = db[co] + acc;
                        }
                    }
                    send(b, db);
                }
            }
            Op::BatchNorm { xhat, invstd, train } => {
                let (x, gamma, beta) = (node.parents[0], node.parents[1], node.parents[2]);
                let (bs, c, t) = (node.shape[0], node.shape[1], node.shape[2]);
                let n = bs * t;
                let nf = T::of(n as f64);
                let gv = &self.nodes[gamma.0].values;
                let train = *train;

                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![T::zero(); bs * c * t];
                    for ci in 0..c {
                        let istd = invstd[ci];
                        if train {
                            let mut sum_dxhat = T::zero();
                            let mut sum_dxhat_xhat = T::zero();
                            for bi in 0..bs {
                                let base = (bi * c + ci) * t;
                                for ti in 0..t {
                                    let dxh = g[base + ti] * gv[ci];
                                    sum_dxhat = sum_dxhat + dxh;
                                    sum_dxhat_xhat = sum_dxhat_xhat + dxh * xhat[base + ti];
                                }
                            }
                            for bi in 0..bs {
                                let base = (bi * c + ci) * t;
                                for ti in 0..t {
                                    let dxh = g[base + ti] * gv[ci];
                                    dx[base + ti] = istd
                                        * (dxh - sum_dxhat / nf
                                            - xhat[base + ti] * sum_dxhat_xhat / nf);
                                }
                            }
                        } else {
                            let scale = gv[ci] * istd;
                            for bi in 0..bs {
                                let base = (bi * c + ci) * t;
                                for ti in 0..t {
                                    dx[base + ti] = g[base + ti] * scale;
                                }
                            }
                        }
                    }
                    send(x, dx);
                }
                if self.nodes[gamma.0].requires_grad {
                    let mut dg = vec![T::zero(); c];
                    for ci in 0..c {
                        let mut acc = T::zero();
                        for bi in 0..bs {
                            let base = (bi * c + ci) * t;
                            for ti in 0..t {
                                acc = acc + g[base + ti] * xhat[base + ti];
                            }
                        }
                        dg[ci] = acc;
                    }
                    send(gamma, dg);
                }
                if self.nodes[beta.0].requires_grad {
                    let mut db = vec![T::zero(); c];
                    for ci in 0..c {
                        let mut acc = T::zero();
                        for bi in 0..bs {
                            let base = (bi * c + ci) * t;
                            for ti in 0..t {
                                acc = acc + g[base + ti];
                            }
                        }
                        db[ci] = acc;
                    }
                    send(beta, db);
                }
            }
            Op::Relu => {
                let x = node.parents[0];
                let xv = &self.nodes[x.0].values;
                let dx: Vec<T> = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                send(x, dx);
            }
            Op::Sigmoid => {
                let x = node.parents[0];
                let dx: Vec<T> = g
                    .iter()
                    .zip(&node.values)
                    .map(|(&gi, &y)| gi * y * (T::one() - y))
                    .collect();
                send(x, dx);
            }
            Op::Softmax => {
                let x = node.parents[0];
                let (bs, k) = (node.shape[0], node.shape[1]);
                let y = &node.values;
                let mut dx = vec![T::zero(); bs * k];
                for bi in 0..bs {
                    let yrow = &y[bi * k..(bi + 1) * k];
                    let grow = &g[bi * k..(bi + 1) * k];
                    let mut dot = T::zero();
                    for (yi, gi) in yrow.iter().zip(grow) {
                        dot = dot + *yi * *gi;
                    }
                    for ki in 0..k {
                        dx[bi * k + ki] = yrow[ki] * (grow[ki] - dot);
                    }
                }
                send(x, dx);
            }
            Op::Gap => {
                let x = node.parents[0];
                let (bs, c, t) = (
                    self.nodes[x.0].shape[0],
                    self.nodes[x.0].shape[1],
                    self.nodes[x.0].shape[2],
                );
                let tf = T::of(t as f64);
                let mut dx = vec![T::zero(); bs * c * t];
                for bc in 0..bs * c {
                    let gi = g[bc] / tf;
                    for ti in 0..t {
                        dx[bc * t + ti] = gi;
                    }
                }
                send(x, dx);
            }
            Op::Linear => {
                let (x, w, b) = (node.parents[0], node.parents[1], node.parents[2]);
                let (bs, f) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let o = node.shape[1];
                let xv = &self.nodes[x.0].values;
                let wv = &self.nodes[w.0].values;
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![T::zero(); bs * f];
                    for bi in 0..bs {
                        let grow = &g[bi * o..(bi + 1) * o];
                        let dxrow = &mut dx[bi * f..(bi + 1) * f];
                        for (oi, &gi) in grow.iter().enumerate() {
                            let wrow = &wv[oi * f..(oi + 1) * f];
                            for (ds, &wj) in dxrow.iter_mut().zip(wrow) {
                                *ds = *ds + gi * wj;
                            }
                        }
                    }
                    send(x, dx);
                }
                if self.nodes[w.0].requires_grad {
                    let mut dw = vec![T::zero(); o * f];
                    for bi in 0..bs {
                        let grow = &g[bi * o..(bi + 1) * o];
                        let xrow = &xv[bi * f..(bi + 1) * f];
                        for (oi, &gi) in grow.iter().enumerate() {
                            let dwrow = &mut dw[oi * f..(oi + 1) * f];
                            for (ds, &xj) in dwrow.iter_mut().zip(xrow) {
                                *ds = *ds + gi * xj;
                            }
                        }
                    }
                    send(w, dw);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![T::zero(); o];
                    for bi in 0..bs {
                        for (oi, slot) in db.iter_mut().enumerate() {
                            *slot = *slot + g[bi * o + oi];
                        }
                    }
                    send(b, db);
                }
            }
            Op::Dropout { mask } => {
                let x = node.parents[0];
                let dx: Vec<T> = g.iter().zip(mask).map(|(&gi, &m)| gi * m).collect();
                send(x, dx);
            }
            Op::ConcatF => {
                let bs = node.shape[0];
                let f_total = node.shape[1];
                let mut off = 0;
                for &p in &node.parents {
                    let f = self.nodes[p.0].shape[1];
                    if self.nodes[p.0].requires_grad {
                        let mut dp = vec![T::zero(); bs * f];
                        for bi in 0..bs {
                            dp[bi * f..(bi + 1) * f]
                                .copy_from_slice(&g[bi * f_total + off..bi * f_total + off + f]);
                        }
                        send(p, dp);
                    }
                    off += f;
                }
            }
            Op::Add => {
                send(node.parents[0], g.to_vec());
                send(node.parents[1], g.to_vec());
            }
            Op::ChannelScale => {
                let (x, s) = (node.parents[0], node.parents[1]);
                let (bs, c, t) = (node.shape[0], node.shape[1], node.shape[2]);
                let xv = &self.nodes[x.0].values;
                let sv = &self.nodes[s.0].values;
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![T::zero(); bs * c * t];
                    for bc in 0..bs * c {
                        let sc = sv[bc];
                        for ti in 0..t {
                            dx[bc * t + ti] = g[bc * t + ti] * sc;
                        }
                    }
                    send(x, dx);
                }
                if self.nodes[s.0].requires_grad {
                    let mut ds = vec![T::zero(); bs * c];
                    for bc in 0..bs * c {
                        let mut acc = T::zero();
                        for ti in 0..t {
                            acc = acc + g[bc * t + ti] * xv[bc * t + ti];
                        }
                        ds[bc] = acc;
                    }
                    send(s, ds);
                }
            }
            Op::ChannelAffine { scale } => {
                let x = node.parents[0];
                let (bs, c, t) = (node.shape[0], node.shape[1], node.shape[2]);
                let mut dx = vec![T::zero(); bs * c * t];
                for bc in 0..bs * c {
                    for ti in 0..t {
                        dx[bc * t + ti] = g[bc * t + ti] * scale[bc];
                    }
                }
                send(x, dx);
            }
            Op::SmoothedCe { probs, targets } => {
                let x = node.parents[0];
                let (bs, k) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let gs = g[0] / T::of(bs as f64);
                let dx: Vec<T> = probs
                    .iter()
                    .zip(targets)
                    .map(|(&p, &q)| gs * (p - q))
                    .collect();
                debug_assert_eq!(dx.len(), bs * k);
                send(x, dx);
            }
            Op::Sum => {
                let x = node.parents[0];
                send(x, vec![g[0]; self.nodes[x.0].values.len()]);
            }
        }
    }
}

/// Output-index range `[lo, hi)` for which `t·stride + k − pad` is a valid
/// input index in `[0, t_in)`.
fn conv_tap_range(t_in: usize, t_out: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if t_in + pad > k {
        (((t_in + pad - k - 1) / stride) + 1).min(t_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Writes the softmax of `row` into `out` with the max-shift trick.
pub fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let mut mx = row[0];
    for &v in row {
        if v > mx {
            mx = v;
        }
    }
    let mut denom = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - mx).exp();
        *o = e;
        denom = denom + e;
    }
    for o in out.iter_mut() {
        *o = *o / denom;
    }
}

/// One named state tensor: a trainable parameter or a running statistic.
#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub grad: Vec<T>,
    /// First/second optimizer moments, lazily meaningful for trainable entries.
    pub moment1: Vec<T>,
    pub moment2: Vec<T>,
    /// Running statistics are stored but not trained.
    pub trainable: bool,
    /// Biases and normalization parameters skip weight decay.
    pub decay_exempt: bool,
}

/// Ordered store of all model state. Registration order is frozen and is the
/// checkpoint serialization order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(
        &mut self,
        name: &str,
        shape: &[usize],
        values: Vec<T>,
        trainable: bool,
        decay_exempt: bool,
    ) {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "param {name}: shape/value mismatch"
        );
        assert!(
            !self.index.contains_key(name),
            "param {name}: duplicate registration"
        );
        let n = values.len();
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            values,
            grad: vec![T::zero(); n],
            moment1: vec![T::zero(); n],
            moment2: vec![T::zero(); n],
            trainable,
            decay_exempt,
        });
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> &ParamEntry<T> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.entries[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ParamEntry<T> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.entries[i]
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(T::zero());
        }
    }

    /// Total stored floats (trainable + running statistics), the checkpoint
    /// payload length.
    pub fn state_len(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    /// Trainable parameter count, as reported in efficiency summaries.
    pub fn trainable_len(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.values.len())
            .sum()
    }

    /// Flat state vector in registration order, widened to `f32` pairs via
    /// `f64` for exact round-tripping of `f32` stores.
    pub fn flatten_f32(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.state_len());
        for e in &self.entries {
            out.extend(e.values.iter().map(|v| v.as_f64() as f32));
        }
        out
    }

    /// Loads a flat state vector produced by [`Self::flatten_f32`].
    pub fn load_f32(&mut self, flat: &[f32]) {
        assert_eq!(
            flat.len(),
            self.state_len(),
            "flat state length {} does not match store {}",
            flat.len(),
            self.state_len()
        );
        let mut off = 0;
        for e in &mut self.entries {
            for v in &mut e.values {
                *v = T::of(flat[off] as f64);
                off += 1;
            }
        }
    }
}

/// Central finite-difference gradient of `f` at `x0` (step `h` per element).
/// Test oracle: independent of the tape's backward path.
pub fn numeric_grad<F>(f: F, x0: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut g = vec![0.0; x0.len()];
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let fp = f(&x);
        x[i] = x0[i] - h;
        let fm = f(&x);
        x[i] = x0[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Max relative error between `analytic` and `numeric`, with an absolute
/// floor so near-zero entries compare absolutely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst: f64 = 0.0;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let scale = a.abs().max(n.abs()).max(1.0);
        worst = worst.max((a - n).abs() / scale);
    }
    worst
}
