//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its nodes. Nodes are
//! addressed by [`Var`] handles; leaves are created with
//! [`Graph::constant`] or [`Graph::variable`]. Calling [`Graph::backward`] on
//! a scalar node accumulates `d(loss)/d(leaf)` into the `grad` buffer of
//! every leaf created with `requires_grad = true`.
//!
//! Gradients only flow along nodes that depend on a variable leaf, so a
//! forward pass built purely from constants costs nothing at backward time.
//! That is also how stop-gradient is expressed: bind a tensor as a constant.

use crate::error::{Error, Result};
use crate::kernels::{col2im3_add, gemm, im2col3, log_softmax_rows};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-channel mean and biased variance observed in one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Running estimates used by batch norm in evaluation mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of batches absorbed so far. Zero means uninitialized.
    pub updates: u64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            updates: 0,
        }
    }

    /// Exponential moving average: `running = (1 - rate) * running + rate * batch`.
    pub fn absorb(&mut self, batch: &BatchStats, rate: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - rate) * *r + rate * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - rate) * *r + rate * b;
        }
        self.updates += 1;
    }
}

/// Batch-norm behaviour for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics, optionally folding them into the
    /// running estimates.
    Train { update_stats: bool },
    /// Normalize with the running estimates.
    Eval,
}

/// A predictive distribution: `(B, C)` with rows on the probability simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution(Tensor);

impl Distribution {
    pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.rank() != 2 {
            return Err(Error::Shape(format!(
                "distribution must be (B, C), got {:?}",
                probs.dims()
            )));
        }
        let c = probs.dims()[1];
        for (b, row) in probs.data().chunks(c).enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|p| !(0.0..=1.0).contains(p))
                || (s - 1.0).abs() > Self::ROW_SUM_TOLERANCE
            {
                return Err(Error::Shape(format!(
                    "row {b} is not a probability distribution (sum {s})"
                )));
            }
        }
        Ok(Distribution(probs))
    }

    /// Row-wise softmax of `(B, C)` logits.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        if logits.rank() != 2 {
            return Err(Error::Shape(format!(
                "logits must be (B, C), got {:?}",
                logits.dims()
            )));
        }
        let logp = log_softmax_rows(logits.data(), logits.dims()[1]);
        let probs = Tensor::new(logits.dims(), logp.into_iter().map(f64::exp).collect())?;
        Ok(Distribution(probs))
    }

    pub fn probs(&self) -> &Tensor {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.dims()[1]
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
    },
    Affine {
        input: Var,
        weight: Var,
        bias: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        /// Batch statistics participate in the adjoint (train mode only).
        batch_stats: bool,
    },
    LeakyRelu {
        input: Var,
        slope: f64,
    },
    LogSoftmax {
        input: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    KlDivergence {
        logits: Var,
        target: Vec<f64>,
        probs: Vec<f64>,
    },
    AddScaled {
        a: Var,
        b: Var,
        scale: f64,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Sum {
        input: Var,
    },
    Reshape {
        input: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Its `grad` buffer is populated by [`Graph::backward`]
    /// when `requires_grad` is set.
    pub fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        value.grad = None;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated into a leaf by the last [`Graph::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// 3x3 convolution, stride 1, zero padding 1.
    ///
    /// `input (B, Cin, H, W)`, `weight (Cout, Cin, 3, 3)`, `bias (Cout)`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, bi) = (self.value(input), self.value(weight), self.value(bias));
        let &[batch, cin, h, width] = x.dims() else {
            return shape_err(format!("conv2d input must be rank 4, got {:?}", x.dims()));
        };
        let &[cout, wcin, 3, 3] = w.dims() else {
            return shape_err(format!("conv2d weight must be (Cout, Cin, 3, 3), got {:?}", w.dims()));
        };
        if wcin != cin {
            return shape_err(format!(
                "conv2d input has {cin} channels but weight expects {wcin}"
            ));
        }
        if bi.dims() != [cout] {
            return shape_err(format!("conv2d bias must be ({cout}), got {:?}", bi.dims()));
        }
        let hw = h * width;
        let k = cin * 9;
        let mut out = vec![0.0; batch * cout * hw];
        let mut cols = vec![0.0; k * hw];
        for b in 0..batch {
            im2col3(x.item(b), cin, h, width, &mut cols);
            let ob = &mut out[b * cout * hw..(b + 1) * cout * hw];
            gemm(cout, k, hw, w.data(), (k, 1), &cols, (hw, 1), 0.0, ob);
            for (co, row) in ob.chunks_mut(hw).enumerate() {
                let bias = bi.data()[co];
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
        let value = Tensor::new(&[batch, cout, h, width], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        ))
    }

    /// 2x2 max pooling with stride 2. Ties resolve to the first cell in
    /// row-major order.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let &[batch, c, h, w] = x.dims() else {
            return shape_err(format!("max_pool2 input must be rank 4, got {:?}", x.dims()));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(format!("max_pool2 needs even spatial dims, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(batch * c * oh * ow);
        let mut argmax = Vec::with_capacity(batch * c * oh * ow);
        let data = x.data();
        for plane in 0..batch * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let cells = [
                        base + 2 * i * w + 2 * j,
                        base + 2 * i * w + 2 * j + 1,
                        base + (2 * i + 1) * w + 2 * j,
                        base + (2 * i + 1) * w + 2 * j + 1,
                    ];
                    let mut best = cells[0];
                    for &cell in &cells[1..] {
                        if data[cell] > data[best] {
                            best = cell;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(&[batch, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2 { input, argmax }, &[input]))
    }

    /// Mean over the spatial window: `(B, C, H, W) -> (B, C, 1, 1)`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let &[batch, c, h, w] = x.dims() else {
            return shape_err(format!(
                "global_avg_pool input must be rank 4, got {:?}",
                x.dims()
            ));
        };
        let n = (h * w) as f64;
        let out = x
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / n)
            .collect();
        let value = Tensor::new(&[batch, c, 1, 1], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { input }, &[input]))
    }

    /// `input (B, Din) * weight(Dout, Din)^T + bias (Dout)`.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, bi) = (self.value(input), self.value(weight), self.value(bias));
        let &[batch, din] = x.dims() else {
            return shape_err(format!("affine input must be (B, Din), got {:?}", x.dims()));
        };
        let &[dout, wdin] = w.dims() else {
            return shape_err(format!("affine weight must be (Dout, Din), got {:?}", w.dims()));
        };
        if wdin != din || bi.dims() != [dout] {
            return shape_err(format!(
                "affine shapes disagree: input {:?}, weight {:?}, bias {:?}",
                x.dims(),
                w.dims(),
                bi.dims()
            ));
        }
        let mut out = vec![0.0; batch * dout];
        gemm(batch, din, dout, x.data(), (din, 1), w.data(), (1, din), 0.0, &mut out);
        for row in out.chunks_mut(dout) {
            row.iter_mut().zip(bi.data()).for_each(|(v, b)| *v += b);
        }
        let value = Tensor::new(&[batch, dout], out)?;
        Ok(self.push(
            value,
            Op::Affine {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        ))
    }

    pub fn reshape(&mut self, input: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(dims)?;
        Ok(self.push(value, Op::Reshape { input }, &[input]))
    }

    /// Batch normalization over `(B, C, ...)` using the statistics of this
    /// batch (biased variance). Returns the batch statistics alongside.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (batch, c, spatial) = self.check_norm_shapes(input, gamma, beta)?;
        let n = batch * spatial;
        if n < 2 {
            return shape_err(format!(
                "batch_norm in train mode needs at least 2 values per channel, got {n}"
            ));
        }
        let x = self.value(input).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..batch {
            for ch in 0..c {
                let s = &x[(b * c + ch) * spatial..][..spatial];
                mean[ch] += s.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for b in 0..batch {
            for ch in 0..c {
                let s = &x[(b * c + ch) * spatial..][..spatial];
                var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let stats = BatchStats { mean, var };
        let var = self.normalize(input, gamma, beta, &stats.mean, inv_std, true)?;
        Ok((var, stats))
    }

    /// Batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &RunningStats,
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _) = self.check_norm_shapes(input, gamma, beta)?;
        if stats.updates == 0 {
            return Err(Error::UninitializedStats("batch_norm".into()));
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return shape_err(format!(
                "running statistics have {} channels, input has {c}",
                stats.mean.len()
            ));
        }
        let inv_std = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.normalize(input, gamma, beta, &stats.mean, inv_std, false)
    }

    /// Batch normalization in either mode. In train mode with
    /// `update_stats`, the batch statistics are folded into `state` at
    /// `rate`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        state: &mut RunningStats,
        eps: f64,
        rate: f64,
    ) -> Result<Var> {
        match mode {
            NormMode::Train { update_stats } => {
                let (out, stats) = self.batch_norm_train(input, gamma, beta, eps)?;
                if update_stats {
                    state.absorb(&stats, rate);
                }
                Ok(out)
            }
            NormMode::Eval => self.batch_norm_eval(input, gamma, beta, state, eps),
        }
    }

    fn check_norm_shapes(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let x = self.value(input);
        if x.rank() < 2 {
            return shape_err(format!("batch_norm input must be (B, C, ...), got {:?}", x.dims()));
        }
        let (batch, c) = (x.dims()[0], x.dims()[1]);
        if self.value(gamma).dims() != [c] || self.value(beta).dims() != [c] {
            return shape_err(format!(
                "batch_norm affine parameters must be ({c}), got {:?} and {:?}",
                self.value(gamma).dims(),
                self.value(beta).dims()
            ));
        }
        Ok((batch, c, x.len() / (batch * c)))
    }

    fn normalize(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Result<Var> {
        let x = self.value(input);
        let (c, spatial) = (x.dims()[1], x.len() / (x.dims()[0] * x.dims()[1]));
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        let planes = x.data().chunks_exact(spatial).zip(xhat.chunks_exact_mut(spatial));
        for (i, ((src, xh), dst)) in planes.zip(out.chunks_exact_mut(spatial)).enumerate() {
            let ch = i % c;
            let (m, is, gc, bc) = (mean[ch], inv_std[ch], g[ch], bt[ch]);
            for ((v, h), o) in src.iter().zip(xh.iter_mut()).zip(dst.iter_mut()) {
                *h = (v - m) * is;
                *o = gc * *h + bc;
            }
        }
        let value = Tensor::new(x.dims(), out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[input, gamma, beta],
        ))
    }

    /// `x` for `x >= 0`, `slope * x` otherwise. The derivative at exactly 0
    /// is `slope`.
    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let value = self
            .value(input)
            .map(|v| if v >= 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu { input, slope }, &[input])
    }

    pub fn log_softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.rank() != 2 || x.dims()[1] < 2 {
            return shape_err(format!("log_softmax needs (B, C>=2), got {:?}", x.dims()));
        }
        let value = Tensor::new(x.dims(), log_softmax_rows(x.data(), x.dims()[1]))?;
        Ok(self.push(value, Op::LogSoftmax { input }, &[input]))
    }

    /// Batch-mean negative log-likelihood of `labels` under softmax(`logits`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        if x.rank() != 2 || x.dims()[0] != labels.len() {
            return shape_err(format!(
                "cross_entropy logits {:?} vs {} labels",
                x.dims(),
                labels.len()
            ));
        }
        let classes = x.dims()[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let logp = log_softmax_rows(x.data(), classes);
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(b, &l)| logp[b * classes + l])
            .sum::<f64>()
            / labels.len() as f64;
        let probs = logp.into_iter().map(f64::exp).collect();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Batch mean of `KL(p || softmax(q_logits))`. `p` is a constant; the
    /// gradient flows into `q_logits` only. `0 * log 0` is taken as 0.
    pub fn kl_divergence(&mut self, p: &Distribution, q_logits: Var) -> Result<Var> {
        let q = self.value(q_logits);
        if q.dims() != p.probs().dims() {
            return shape_err(format!(
                "kl_divergence target {:?} vs logits {:?}",
                p.probs().dims(),
                q.dims()
            ));
        }
        let (batch, classes) = (q.dims()[0], q.dims()[1]);
        let logq = log_softmax_rows(q.data(), classes);
        let mut total = 0.0;
        for (pv, lq) in p.probs().data().iter().zip(&logq) {
            if *pv > 0.0 {
                total += pv * (pv.ln() - lq);
            }
        }
        let probs = logq.into_iter().map(f64::exp).collect();
        Ok(self.push(
            Tensor::scalar(total / batch as f64),
            Op::KlDivergence {
                logits: q_logits,
                target: p.probs().data().to_vec(),
                probs,
            },
            &[q_logits],
        ))
    }

    /// `a + scale * b`.
    pub fn add_scaled(&mut self, a: Var, b: Var, scale: f64) -> Result<Var> {
        let value = self.value(a).add_scaled(self.value(b), scale)?;
        Ok(self.push(value, Op::AddScaled { a, b, scale }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_scaled(a, b, 1.0)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let value = self.value(input).map(|v| v * factor);
        self.push(value, Op::Scale { input, factor }, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { input }, &[input])
    }

    /// Accumulates `d(loss)/d(leaf)` into the grad buffer of every leaf that
    /// requires a gradient. Leaves the loss does not depend on receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.dims().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                leaf_grads.push((i, g));
                continue;
            }
            self.backprop_node(i, &g, &mut adj);
        }
        for n in self.nodes.iter_mut().filter(|n| n.requires_grad) {
            if let Op::Leaf = n.op {
                let len = n.value.len();
                n.value.grad.get_or_insert_with(|| vec![0.0; len]);
            }
        }
        for (i, g) in leaf_grads {
            let buf = self.nodes[i].value.grad.as_mut().expect("allocated above");
            buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Returns the adjoint buffer of `v` if it needs one.
        let slot = |adj: &mut [Option<Vec<f64>>], v: Var| -> Option<usize> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            if adj[v.0].is_none() {
                adj[v.0] = Some(vec![0.0; nodes[v.0].value.len()]);
            }
            Some(v.0)
        };
        macro_rules! buf {
            ($adj:expr, $idx:expr) => {
                $adj[$idx].as_mut().expect("slot allocated")
            };
        }
        match &nodes[i].op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),
            Op::Conv2d {
                input,
                weight,
                bias,
            } => {
                let x = &nodes[input.0].value;
                let w = &nodes[weight.0].value;
                let &[batch, cin, h, width] = x.dims() else { unreachable!() };
                let cout = w.dims()[0];
                let (hw, k) = (h * width, cin * 9);
                let sx = slot(adj, *input);
                let sw = slot(adj, *weight);
                let sb = slot(adj, *bias);
                let mut cols = vec![0.0; k * hw];
                for b in 0..batch {
                    let gb = &g[b * cout * hw..(b + 1) * cout * hw];
                    if let Some(s) = sb {
                        let db = buf!(adj, s);
                        for (co, row) in gb.chunks(hw).enumerate() {
                            db[co] += row.iter().sum::<f64>();
                        }
                    }
                    if let Some(s) = sw {
                        im2col3(x.item(b), cin, h, width, &mut cols);
                        gemm(cout, hw, k, gb, (hw, 1), &cols, (1, hw), 1.0, buf!(adj, s));
                    }
                    if let Some(s) = sx {
                        gemm(k, cout, hw, w.data(), (1, k), gb, (hw, 1), 0.0, &mut cols);
                        let dx = buf!(adj, s);
                        col2im3_add(&cols, cin, h, width, &mut dx[b * cin * hw..(b + 1) * cin * hw]);
                    }
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if let Some(s) = slot(adj, *input) {
                    let dx = buf!(adj, s);
                    for (&src, gv) in argmax.iter().zip(g) {
                        dx[src] += gv;
                    }
                }
            }
            Op::GlobalAvgPool { input } => {
                if let Some(s) = slot(adj, *input) {
                    let x = &nodes[input.0].value;
                    let hw = x.dims()[2] * x.dims()[3];
                    let dx = buf!(adj, s);
                    for (plane, gv) in dx.chunks_mut(hw).zip(g) {
                        let share = gv / hw as f64;
                        plane.iter_mut().for_each(|v| *v += share);
                    }
                }
            }
            Op::Affine {
                input,
                weight,
                bias,
            } => {
                let x = &nodes[input.0].value;
                let w = &nodes[weight.0].value;
                let (batch, din, dout) = (x.dims()[0], x.dims()[1], w.dims()[0]);
                if let Some(s) = slot(adj, *bias) {
                    let db = buf!(adj, s);
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
                if let Some(s) = slot(adj, *weight) {
                    // dW (dout x din) += g^T (dout x batch) * x (batch x din)
                    gemm(dout, batch, din, g, (1, dout), x.data(), (din, 1), 1.0, buf!(adj, s));
                }
                if let Some(s) = slot(adj, *input) {
                    // dx (batch x din) += g (batch x dout) * W (dout x din)
                    gemm(batch, dout, din, g, (dout, 1), w.data(), (din, 1), 1.0, buf!(adj, s));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let x = &nodes[input.0].value;
                let (batch, c) = (x.dims()[0], x.dims()[1]);
                let spatial = x.len() / (batch * c);
                let gam = nodes[gamma.0].value.data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (i, (gp, xp)) in g.chunks_exact(spatial).zip(xhat.chunks_exact(spatial)).enumerate() {
                    let ch = i % c;
                    sum_g[ch] += gp.iter().sum::<f64>();
                    sum_gx[ch] += gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
                }
                if let Some(s) = slot(adj, *beta) {
                    buf!(adj, s).iter_mut().zip(&sum_g).for_each(|(d, v)| *d += v);
                }
                if let Some(s) = slot(adj, *gamma) {
                    buf!(adj, s).iter_mut().zip(&sum_gx).for_each(|(d, v)| *d += v);
                }
                if let Some(s) = slot(adj, *input) {
                    let dx = buf!(adj, s);
                    let n = (batch * spatial) as f64;
                    let planes = dx.chunks_exact_mut(spatial).zip(g.chunks_exact(spatial));
                    for (i, ((dp, gp), xp)) in planes.zip(xhat.chunks_exact(spatial)).enumerate() {
                        let ch = i % c;
                        let scale = gam[ch] * inv_std[ch];
                        if *batch_stats {
                            let (mg, mgx) = (sum_g[ch] / n, sum_gx[ch] / n);
                            for ((d, gv), xh) in dp.iter_mut().zip(gp).zip(xp) {
                                *d += scale * (gv - mg - xh * mgx);
                            }
                        } else {
                            for (d, gv) in dp.iter_mut().zip(gp) {
                                *d += scale * gv;
                            }
                        }
                    }
                }
            }
            Op::LeakyRelu { input, slope } => {
                if let Some(s) = slot(adj, *input) {
                    let x = nodes[input.0].value.data();
                    let dx = buf!(adj, s);
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(x) {
                        *d += if *xv > 0.0 { *gv } else { slope * gv };
                    }
                }
            }
            Op::LogSoftmax { input } => {
                if let Some(s) = slot(adj, *input) {
                    let out = nodes[i].value.data();
                    let classes = nodes[i].value.dims()[1];
                    let dx = buf!(adj, s);
                    for ((drow, grow), orow) in dx
                        .chunks_mut(classes)
                        .zip(g.chunks(classes))
                        .zip(out.chunks(classes))
                    {
                        let gsum: f64 = grow.iter().sum();
                        for ((d, gv), o) in drow.iter_mut().zip(grow).zip(orow) {
                            *d += gv - o.exp() * gsum;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if let Some(s) = slot(adj, *logits) {
                    let classes = probs.len() / labels.len();
                    let scale = g[0] / labels.len() as f64;
                    let dx = buf!(adj, s);
                    for (b, &l) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == l { 1.0 } else { 0.0 };
                            dx[b * classes + c] += scale * (probs[b * classes + c] - onehot);
                        }
                    }
                }
            }
            Op::KlDivergence {
                logits,
                target,
                probs,
            } => {
                if let Some(s) = slot(adj, *logits) {
                    let dims = nodes[logits.0].value.dims();
                    let (batch, classes) = (dims[0], dims[1]);
                    let scale = g[0] / batch as f64;
                    let dx = buf!(adj, s);
                    for b in 0..batch {
                        let row = b * classes..(b + 1) * classes;
                        let mass: f64 = target[row.clone()].iter().sum();
                        for idx in row {
                            dx[idx] += scale * (mass * probs[idx] - target[idx]);
                        }
                    }
                }
            }
            Op::AddScaled { a, b, scale } => {
                if let Some(s) = slot(adj, *a) {
                    buf!(adj, s).iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if let Some(s) = slot(adj, *b) {
                    buf!(adj, s).iter_mut().zip(g).for_each(|(d, v)| *d += scale * v);
                }
            }
            Op::Scale { input, factor } => {
                if let Some(s) = slot(adj, *input) {
                    buf!(adj, s).iter_mut().zip(g).for_each(|(d, v)| *d += factor * v);
                }
            }
            Op::Sum { input } => {
                if let Some(s) = slot(adj, *input) {
                    buf!(adj, s).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Reshape { input } => {
                if let Some(s) = slot(adj, *input) {
                    buf!(adj, s).iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
            }
        }
    }
}
