//! Tape-based reverse-mode differentiation over tensor primitives.
//!
//! Each primitive computes its forward value immediately and records what
//! its adjoint needs. [`GradTape::backward`] replays the records in reverse
//! application order, once.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{self, BatchNormConfig, BatchStats, Mode, RunningStats};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d { x: Var, w: Var, b: Var, padding: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Affine { x: Var, w: Var, b: Var },
    Relu { x: Var },
    Scale { x: Var, mask: Vec<f64> },
    Add { a: Var, b: Var },
    Transpose { x: Var },
    Reshape { x: Var },
    Softmax { x: Var },
    WeightedTimeSum { alpha: Var, f: Var },
    Concat { parts: Vec<Var> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    SumSquares { x: Var },
    Dot { x: Var, c: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of primitive applications.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    replayed: bool,
}

/// Result of one backward pass: the adjoint of every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
    order: Vec<Var>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. Values not on any path to
    /// the loss have an all-zero gradient.
    pub fn get(&self, v: Var) -> &Tensor {
        &self.grads[v.0]
    }

    /// Non-leaf records in the order their adjoints were propagated.
    pub fn visit_order(&self) -> &[Var] {
        &self.order
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clears all records so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.replayed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.replayed {
            return Err(Error::TapeConsumed);
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Convolution over `[B, C_in, T]`; see [`ops::conv1d`].
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, padding: usize) -> Result<Var> {
        let y = ops::conv1d(self.value(x), self.value(w), self.value(b), padding)?;
        self.push(y, Op::Conv1d { x, w, b, padding })
    }

    /// Batch norm over `[B, C, T]`. In train mode the batch statistics are
    /// returned so the caller can fold them into its running statistics.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        running: Option<&RunningStats>,
        cfg: &BatchNormConfig,
    ) -> Result<(Var, Option<BatchStats>)> {
        let mut scratch = running.cloned();
        // validates shapes and eps, and the eval-mode preconditions
        let y = ops::batchnorm1d(self.value(x), self.value(gamma), self.value(beta), mode, &mut scratch, cfg)?;
        let (mean, var, stats) = match mode {
            Mode::Train => {
                let stats = ops::batch_stats(self.value(x));
                (stats.mean.clone(), stats.var.clone(), Some(stats))
            }
            Mode::Eval => {
                let rs = running.ok_or(Error::UninitializedStats)?;
                (rs.mean.clone(), rs.var.clone(), None)
            }
        };
        let inv_std = ops::inv_std(&var, cfg.eps);
        let node = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train: mode == Mode::Train,
            },
        )?;
        Ok((node, stats))
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::affine(self.value(x), self.value(w), self.value(b))?;
        self.push(y, Op::Affine { x, w, b })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu { x })
    }

    /// Inverted dropout; identity (and no record) in eval mode or with `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        ops::check_dropout_p(p)?;
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let mask = ops::dropout_mask(self.value(x).numel(), p, rng);
        let mut y = self.value(x).clone();
        for (v, m) in y.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.push(y, Op::Scale { x, mask })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::InvalidArgument(format!(
                "add: shapes {:?} and {:?} differ",
                va.shape(),
                vb.shape()
            )));
        }
        let mut y = va.clone();
        y.add_assign(vb);
        self.push(y, Op::Add { a, b })
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rank() < 2 {
            return Err(Error::Rank {
                op: "transpose_last2",
                expected: 2,
                actual: self.value(x).rank(),
            });
        }
        let y = self.value(x).transpose_last2();
        self.push(y, Op::Transpose { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        self.push(y, Op::Reshape { x })
    }

    /// Row-wise masked softmax over the last axis of `[B, T]` scores.
    /// `mask`, when given, is row-major `[B, T]`.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_rank("masked_softmax", 2)?;
        let t = xv.shape()[1];
        if let Some(m) = mask {
            if m.len() != xv.numel() {
                return Err(Error::shape("masked_softmax", "mask", xv.numel(), m.len()));
            }
        }
        let mut y = Tensor::zeros(xv.shape());
        for (r, out) in y.data_mut().chunks_mut(t).enumerate() {
            let row_mask = mask.map(|m| &m[r * t..(r + 1) * t]);
            ops::softmax_row(&xv.data()[r * t..(r + 1) * t], row_mask, out)?;
        }
        self.push(y, Op::Softmax { x })
    }

    /// `y[b, :] = sum_t alpha[b, t] * f[b, t, :]` for `alpha: [B, T]`, `f: [B, T, D]`.
    pub fn weighted_time_sum(&mut self, alpha: Var, f: Var) -> Result<Var> {
        let (av, fv) = (self.value(alpha), self.value(f));
        av.expect_rank("weighted_time_sum weights", 2)?;
        fv.expect_rank("weighted_time_sum features", 3)?;
        let (b, t, d) = (fv.shape()[0], fv.shape()[1], fv.shape()[2]);
        if av.shape()[0] != b {
            return Err(Error::shape("weighted_time_sum", "batch", b, av.shape()[0]));
        }
        if av.shape()[1] != t {
            return Err(Error::shape("weighted_time_sum", "time", t, av.shape()[1]));
        }
        let mut y = vec![0.0; b * d];
        for bi in 0..b {
            let out = &mut y[bi * d..(bi + 1) * d];
            for ti in 0..t {
                let a = av.data()[bi * t + ti];
                if a == 0.0 {
                    continue;
                }
                let row = &fv.data()[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                for (o, v) in out.iter_mut().zip(row) {
                    *o += a * v;
                }
            }
        }
        let y = Tensor::new(vec![b, d], y)?;
        self.push(y, Op::WeightedTimeSum { alpha, f })
    }

    /// Concatenates rank-2 `[B, D_i]` values along the last axis, in order.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero parts".into()))?;
        let b = self.value(*first).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            v.expect_rank("concat", 2)?;
            if v.shape()[0] != b {
                return Err(Error::shape("concat", "batch", b, v.shape()[0]));
            }
            widths.push(v.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut y = vec![0.0; b * total];
        for bi in 0..b {
            let mut offset = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                y[bi * total + offset..bi * total + offset + w]
                    .copy_from_slice(&self.value(p).data()[bi * w..(bi + 1) * w]);
                offset += w;
            }
        }
        let y = Tensor::new(vec![b, total], y)?;
        self.push(y, Op::Concat { parts: parts.to_vec() })
    }

    /// Mean cross-entropy of `[B, K]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy_with_probs(self.value(logits), labels)?;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares { x })
    }

    /// `sum(x * c)` for a constant `c` of the same shape.
    pub fn dot(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.value(x).shape() != c.shape() {
            return Err(Error::InvalidArgument(format!(
                "dot: shapes {:?} and {:?} differ",
                self.value(x).shape(),
                c.shape()
            )));
        }
        let s = self.value(x).data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
        self.push(Tensor::scalar(s), Op::Dot { x, c: c.clone() })
    }

    /// Propagates adjoints from the scalar `loss` back through every record.
    ///
    /// The tape can be replayed only once; [`reset`](Self::reset) it before
    /// recording the next pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.replayed {
            return Err(Error::TapeConsumed);
        }
        let lv = self.value(loss);
        let loss_shape = lv.shape().to_vec();
        if lv.numel() != 1 {
            return Err(Error::InvalidArgument(format!("loss must be scalar, got shape {:?}", lv.shape())));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        self.replayed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&loss_shape, 1.0));
        let mut order = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !matches!(node.op, Op::Leaf) {
                order.push(Var(i));
            }
            self.propagate(&node.op, &node.value, &dy, &mut grads);
            grads[i] = Some(dy);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.unwrap_or_else(|| Tensor::zeros(n.value.shape())))
            .collect();
        Ok(Gradients { grads, order })
    }

    fn propagate(&self, op: &Op, y: &Tensor, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, g: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        match op {
            Op::Leaf => {}
            Op::Conv1d { x, w, b, padding } => {
                let (dx, dw, db) = ops::conv1d_backward(self.value(*x), self.value(*w), *padding, dy);
                acc(*x, dx);
                acc(*w, dw);
                acc(*b, db);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let backward = if *train {
                    ops::batchnorm_train_backward
                } else {
                    ops::batchnorm_eval_backward
                };
                let (dx, dg, db) = backward(self.value(*x), self.value(*gamma), mean, inv_std, dy);
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::Affine { x, w, b } => {
                let (dx, dw, db) = ops::affine_backward(self.value(*x), self.value(*w), dy);
                acc(*x, dx);
                acc(*w, dw);
                acc(*b, db);
            }
            Op::Relu { x } => {
                let mut dx = dy.clone();
                for (d, v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if *v <= 0.0 {
                        *d = 0.0;
                    }
                }
                acc(*x, dx);
            }
            Op::Scale { x, mask } => {
                let mut dx = dy.clone();
                for (d, m) in dx.data_mut().iter_mut().zip(mask) {
                    *d *= m;
                }
                acc(*x, dx);
            }
            Op::Add { a, b } => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::Transpose { x } => acc(*x, dy.transpose_last2()),
            Op::Reshape { x } => {
                let shape = self.value(*x).shape().to_vec();
                acc(*x, dy.clone().reshape(&shape).expect("same numel"));
            }
            Op::Softmax { x } => {
                let t = y.shape()[1];
                let mut dx = Tensor::zeros(y.shape());
                for ((yr, dyr), dxr) in y
                    .data()
                    .chunks(t)
                    .zip(dy.data().chunks(t))
                    .zip(dx.data_mut().chunks_mut(t))
                {
                    let inner: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
                    for j in 0..t {
                        dxr[j] = yr[j] * (dyr[j] - inner);
                    }
                }
                acc(*x, dx);
            }
            Op::WeightedTimeSum { alpha, f } => {
                let (av, fv) = (self.value(*alpha), self.value(*f));
                let (b, t, d) = (fv.shape()[0], fv.shape()[1], fv.shape()[2]);
                let mut da = Tensor::zeros(av.shape());
                let mut df = Tensor::zeros(fv.shape());
                for bi in 0..b {
                    let g = &dy.data()[bi * d..(bi + 1) * d];
                    for ti in 0..t {
                        let base = (bi * t + ti) * d;
                        let frow = &fv.data()[base..base + d];
                        da.data_mut()[bi * t + ti] = frow.iter().zip(g).map(|(a, b)| a * b).sum();
                        let a = av.data()[bi * t + ti];
                        for (o, gv) in df.data_mut()[base..base + d].iter_mut().zip(g) {
                            *o = a * gv;
                        }
                    }
                }
                acc(*alpha, da);
                acc(*f, df);
            }
            Op::Concat { parts } => {
                let b = y.shape()[0];
                let total = y.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let mut g = Vec::with_capacity(b * w);
                    for bi in 0..b {
                        g.extend_from_slice(&dy.data()[bi * total + offset..bi * total + offset + w]);
                    }
                    acc(p, Tensor::new(vec![b, w], g).expect("concat part shape"));
                    offset += w;
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let scale = dy.data()[0] / labels.len() as f64;
                let k = probs.len() / labels.len();
                let mut g = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    g[r * k + l] -= 1.0;
                }
                for v in g.iter_mut() {
                    *v *= scale;
                }
                acc(*logits, Tensor::new(vec![labels.len(), k], g).expect("logit grad shape"));
            }
            Op::SumSquares { x } => {
                let s = 2.0 * dy.data()[0];
                acc(*x, self.value(*x).map(|v| s * v));
            }
            Op::Dot { x, c } => {
                let s = dy.data()[0];
                acc(*x, c.map(|v| s * v));
            }
        }
    }
}
