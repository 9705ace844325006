//! Layer primitives used by the model, as plain functions on [`Tensor`]s.
//!
//! The forward functions here are the reference semantics; [`crate::tape`]
//! records the same kernels and adds their adjoints.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Whether layers run with batch statistics and dropout (`Train`) or with
/// frozen running statistics and no dropout (`Eval`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchNormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Per-channel running mean and (unbiased) variance of a batch norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    /// The conventional starting point: zero mean, unit variance.
    pub fn standard(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential moving average update from one training batch.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        let n = batch.count as f64;
        let correction = n / (n - 1.0);
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - momentum) * self.mean[c] + momentum * batch.mean[c];
            self.var[c] = (1.0 - momentum) * self.var[c] + momentum * batch.var[c] * correction;
        }
    }
}

/// Statistics of one training batch: per-channel mean, biased variance and
/// the number of values each was computed over.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

// ---------------------------------------------------------------- conv1d

pub(crate) fn conv_out_len(t: usize, k: usize, padding: usize) -> usize {
    t + 2 * padding + 1 - k
}

/// Validates conv1d operand shapes and returns `(B, C_in, T, C_out, k, T_out)`.
pub(crate) fn conv1d_dims(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    x.expect_rank("conv1d", 3)?;
    weight.expect_rank("conv1d weight", 3)?;
    let (b, c_in, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, w_in, k) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
    if w_in != c_in {
        return Err(Error::shape("conv1d", "in_channels", w_in, c_in));
    }
    if bias.shape() != [c_out] {
        return Err(Error::shape("conv1d", "bias", c_out, bias.numel()));
    }
    if k != 1 && k != 3 {
        return Err(Error::InvalidArgument(format!("conv1d kernel size {k} not in {{1, 3}}")));
    }
    if padding > 1 {
        return Err(Error::InvalidArgument(format!("conv1d padding {padding} not in {{0, 1}}")));
    }
    if t + 2 * padding < k {
        return Err(Error::shape("conv1d", "time", k, t + 2 * padding));
    }
    Ok((b, c_in, t, c_out, k, conv_out_len(t, k, padding)))
}

/// Valid output range `[lo, hi)` for kernel tap `kappa` (shift `kappa - padding`).
#[inline]
fn tap_range(kappa: usize, padding: usize, t_in: usize, t_out: usize) -> (usize, usize, isize) {
    let shift = kappa as isize - padding as isize;
    let lo = (-shift).max(0) as usize;
    let hi = (t_in as isize - shift).min(t_out as isize).max(0) as usize;
    (lo, hi, shift)
}

/// 1-D convolution over `[B, C_in, T]` (or `[C_in, T]`) with zero padding.
///
/// `y[o, t] = bias[o] + sum_{i, k} weight[o, i, k] * x_pad[i, t + k]`.
pub fn conv1d(x: &Tensor, weight: &Tensor, bias: &Tensor, padding: usize) -> Result<Tensor> {
    if x.rank() == 2 {
        let (c, t) = (x.shape()[0], x.shape()[1]);
        let y = conv1d(&x.clone().reshape(&[1, c, t])?, weight, bias, padding)?;
        let (co, to) = (y.shape()[1], y.shape()[2]);
        return y.reshape(&[co, to]);
    }
    let (b, c_in, t, c_out, k, t_out) = conv1d_dims(x, weight, bias, padding)?;
    let xd = x.data();
    let wd = weight.data();
    let bd = bias.data();
    let mut y = vec![0.0; b * c_out * t_out];
    y.par_chunks_mut(t_out).enumerate().for_each(|(row, yr)| {
        let (bi, o) = (row / c_out, row % c_out);
        yr.fill(bd[o]);
        for i in 0..c_in {
            let xr = &xd[(bi * c_in + i) * t..(bi * c_in + i + 1) * t];
            for kappa in 0..k {
                let w = wd[(o * c_in + i) * k + kappa];
                let (lo, hi, shift) = tap_range(kappa, padding, t, t_out);
                for tt in lo..hi {
                    yr[tt] += w * xr[(tt as isize + shift) as usize];
                }
            }
        }
    });
    Tensor::new(vec![b, c_out, t_out], y)
}

/// Adjoints of [`conv1d`] for a `[B, C_out, T_out]` upstream gradient.
pub(crate) fn conv1d_backward(
    x: &Tensor,
    weight: &Tensor,
    padding: usize,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (b, c_in, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, _, k) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
    let t_out = dy.shape()[2];
    let (xd, wd, dyd) = (x.data(), weight.data(), dy.data());

    let mut dx = vec![0.0; b * c_in * t];
    dx.par_chunks_mut(t).enumerate().for_each(|(row, dxr)| {
        let (bi, i) = (row / c_in, row % c_in);
        for o in 0..c_out {
            let dyr = &dyd[(bi * c_out + o) * t_out..(bi * c_out + o + 1) * t_out];
            for kappa in 0..k {
                let w = wd[(o * c_in + i) * k + kappa];
                let (lo, hi, shift) = tap_range(kappa, padding, t, t_out);
                for tt in lo..hi {
                    dxr[(tt as isize + shift) as usize] += w * dyr[tt];
                }
            }
        }
    });

    let mut dw = vec![0.0; c_out * c_in * k];
    dw.par_chunks_mut(c_in * k).enumerate().for_each(|(o, dwo)| {
        for bi in 0..b {
            let dyr = &dyd[(bi * c_out + o) * t_out..(bi * c_out + o + 1) * t_out];
            for i in 0..c_in {
                let xr = &xd[(bi * c_in + i) * t..(bi * c_in + i + 1) * t];
                for kappa in 0..k {
                    let (lo, hi, shift) = tap_range(kappa, padding, t, t_out);
                    let mut acc = 0.0;
                    for tt in lo..hi {
                        acc += dyr[tt] * xr[(tt as isize + shift) as usize];
                    }
                    dwo[i * k + kappa] += acc;
                }
            }
        }
    });

    let mut db = vec![0.0; c_out];
    for bi in 0..b {
        for (o, acc) in db.iter_mut().enumerate() {
            *acc += dyd[(bi * c_out + o) * t_out..(bi * c_out + o + 1) * t_out].iter().sum::<f64>();
        }
    }

    (
        Tensor::new(vec![b, c_in, t], dx).expect("dx shape"),
        Tensor::new(vec![c_out, c_in, k], dw).expect("dw shape"),
        Tensor::new(vec![c_out], db).expect("db shape"),
    )
}

// ------------------------------------------------------------- batchnorm

fn bn_check(x: &Tensor, gamma: &Tensor, beta: &Tensor, cfg: &BatchNormConfig) -> Result<(usize, usize, usize)> {
    x.expect_rank("batchnorm1d", 3)?;
    let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if gamma.shape() != [c] {
        return Err(Error::shape("batchnorm1d", "gamma", c, gamma.numel()));
    }
    if beta.shape() != [c] {
        return Err(Error::shape("batchnorm1d", "beta", c, beta.numel()));
    }
    if !(cfg.eps > 0.0) {
        return Err(Error::InvalidArgument(format!("batchnorm eps must be > 0, got {}", cfg.eps)));
    }
    Ok((b, c, t))
}

/// Per-channel mean and biased variance over the batch and time axes.
pub(crate) fn batch_stats(x: &Tensor) -> BatchStats {
    let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xd = x.data();
    let n = (b * t) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let rows = (0..b).map(|bi| &xd[(bi * c + ch) * t..(bi * c + ch + 1) * t]);
        let m = rows.clone().flatten().sum::<f64>() / n;
        let v = rows.flatten().map(|&v| (v - m) * (v - m)).sum::<f64>() / n;
        mean[ch] = m;
        var[ch] = v;
    }
    BatchStats {
        mean,
        var,
        count: b * t,
    }
}

/// Applies `gamma * (x - mean) * inv_std + beta` per channel.
pub(crate) fn bn_apply(x: &Tensor, gamma: &Tensor, beta: &Tensor, mean: &[f64], inv_std: &[f64]) -> Tensor {
    let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (g, be) = (gamma.data(), beta.data());
    let mut y = x.clone();
    for (row, yr) in y.data_mut().chunks_mut(t).enumerate() {
        let ch = row % c;
        let (m, s) = (mean[ch], inv_std[ch] * g[ch]);
        for v in yr.iter_mut() {
            *v = (*v - m) * s + be[ch];
        }
    }
    debug_assert_eq!(y.numel(), b * c * t);
    y
}

pub(crate) fn inv_std(var: &[f64], eps: f64) -> Vec<f64> {
    var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect()
}

/// Batch normalization over `[B, C, T]`.
///
/// In `Train` mode the input is normalized with its own per-channel mean and
/// biased variance and `running` is updated by exponential moving average
/// (with the unbiased variance). An empty `running` starts from zero mean
/// and unit variance. In `Eval` mode the running statistics are used as-is
/// and left untouched; they must be present.
pub fn batchnorm1d(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mode: Mode,
    running: &mut Option<RunningStats>,
    cfg: &BatchNormConfig,
) -> Result<Tensor> {
    let (b, c, t) = bn_check(x, gamma, beta, cfg)?;
    match mode {
        Mode::Train => {
            if b * t < 2 {
                return Err(Error::InvalidArgument(
                    "batchnorm1d in train mode needs more than one value per channel".into(),
                ));
            }
            let stats = batch_stats(x);
            let y = bn_apply(x, gamma, beta, &stats.mean, &inv_std(&stats.var, cfg.eps));
            running
                .get_or_insert_with(|| RunningStats::standard(c))
                .update(&stats, cfg.momentum);
            Ok(y)
        }
        Mode::Eval => {
            let rs = running.as_ref().ok_or(Error::UninitializedStats)?;
            if rs.mean.len() != c || rs.var.len() != c {
                return Err(Error::shape("batchnorm1d", "running_stats", c, rs.mean.len()));
            }
            if rs.var.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::InvalidArgument("running variance must be >= 0".into()));
            }
            Ok(bn_apply(x, gamma, beta, &rs.mean, &inv_std(&rs.var, cfg.eps)))
        }
    }
}

/// Adjoints of train-mode batch norm (statistics depend on `x`).
pub(crate) fn batchnorm_train_backward(
    x: &Tensor,
    gamma: &Tensor,
    mean: &[f64],
    inv: &[f64],
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = (b * t) as f64;
    let (xd, dyd, g) = (x.data(), dy.data(), gamma.data());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for row in 0..b * c {
        let ch = row % c;
        for j in 0..t {
            let idx = row * t + j;
            let xhat = (xd[idx] - mean[ch]) * inv[ch];
            dgamma[ch] += dyd[idx] * xhat;
            dbeta[ch] += dyd[idx];
        }
    }
    let mut dx = vec![0.0; b * c * t];
    for row in 0..b * c {
        let ch = row % c;
        // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
        let s1 = g[ch] * dbeta[ch];
        let s2 = g[ch] * dgamma[ch];
        for j in 0..t {
            let idx = row * t + j;
            let xhat = (xd[idx] - mean[ch]) * inv[ch];
            dx[idx] = inv[ch] / n * (n * g[ch] * dyd[idx] - s1 - xhat * s2);
        }
    }
    (
        Tensor::new(vec![b, c, t], dx).expect("dx shape"),
        Tensor::new(vec![c], dgamma).expect("dgamma shape"),
        Tensor::new(vec![c], dbeta).expect("dbeta shape"),
    )
}

/// Adjoints of eval-mode batch norm (statistics are constants).
pub(crate) fn batchnorm_eval_backward(
    x: &Tensor,
    gamma: &Tensor,
    mean: &[f64],
    inv: &[f64],
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (xd, dyd, g) = (x.data(), dy.data(), gamma.data());
    let mut dx = vec![0.0; b * c * t];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for row in 0..b * c {
        let ch = row % c;
        for j in 0..t {
            let idx = row * t + j;
            dx[idx] = dyd[idx] * g[ch] * inv[ch];
            dgamma[ch] += dyd[idx] * (xd[idx] - mean[ch]) * inv[ch];
            dbeta[ch] += dyd[idx];
        }
    }
    (
        Tensor::new(vec![b, c, t], dx).expect("dx shape"),
        Tensor::new(vec![c], dgamma).expect("dgamma shape"),
        Tensor::new(vec![c], dbeta).expect("dbeta shape"),
    )
}

// ---------------------------------------------------------------- affine

/// `y = x · weightᵀ + bias` over the trailing axis of `x`.
pub fn affine(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    weight.expect_rank("affine weight", 2)?;
    let (d_out, d_in) = (weight.shape()[0], weight.shape()[1]);
    if x.last_dim() != d_in {
        return Err(Error::shape("affine", "in_features", d_in, x.last_dim()));
    }
    if bias.shape() != [d_out] {
        return Err(Error::shape("affine", "bias", d_out, bias.numel()));
    }
    let rows = x.numel() / d_in;
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    let mut y = vec![0.0; rows * d_out];
    y.par_chunks_mut(d_out).enumerate().for_each(|(r, yr)| {
        let xr = &xd[r * d_in..(r + 1) * d_in];
        for (o, yo) in yr.iter_mut().enumerate() {
            let wr = &wd[o * d_in..(o + 1) * d_in];
            *yo = bd[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
        }
    });
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = d_out;
    Tensor::new(shape, y)
}

pub(crate) fn affine_backward(x: &Tensor, weight: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (d_out, d_in) = (weight.shape()[0], weight.shape()[1]);
    let rows = x.numel() / d_in;
    let (xd, wd, dyd) = (x.data(), weight.data(), dy.data());
    let mut dx = vec![0.0; rows * d_in];
    dx.par_chunks_mut(d_in).enumerate().for_each(|(r, dxr)| {
        for o in 0..d_out {
            let g = dyd[r * d_out + o];
            if g != 0.0 {
                for (d, w) in dxr.iter_mut().zip(&wd[o * d_in..(o + 1) * d_in]) {
                    *d += g * w;
                }
            }
        }
    });
    let mut dw = vec![0.0; d_out * d_in];
    dw.par_chunks_mut(d_in).enumerate().for_each(|(o, dwr)| {
        for r in 0..rows {
            let g = dyd[r * d_out + o];
            if g != 0.0 {
                for (d, xv) in dwr.iter_mut().zip(&xd[r * d_in..(r + 1) * d_in]) {
                    *d += g * xv;
                }
            }
        }
    });
    let mut db = vec![0.0; d_out];
    for r in 0..rows {
        for o in 0..d_out {
            db[o] += dyd[r * d_out + o];
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("dx shape"),
        Tensor::new(vec![d_out, d_in], dw).expect("dw shape"),
        Tensor::new(vec![d_out], db).expect("db shape"),
    )
}

// ---------------------------------------------------- pointwise & softmax

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Inverted-dropout keep mask: each entry is `0` with probability `p`,
/// otherwise `1 / (1 - p)`. With `p == 0` no randomness is consumed.
pub(crate) fn dropout_mask<R: Rng + ?Sized>(numel: usize, p: f64, rng: &mut R) -> Vec<f64> {
    if p == 0.0 {
        return vec![1.0; numel];
    }
    let scale = 1.0 / (1.0 - p);
    (0..numel)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
        .collect()
}

pub(crate) fn check_dropout_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("dropout probability {p} not in [0, 1)")));
    }
    Ok(())
}

/// Inverted dropout. `Eval` mode returns the input unchanged.
pub fn dropout<R: Rng + ?Sized>(x: &Tensor, p: f64, mode: Mode, rng: &mut R) -> Result<Tensor> {
    check_dropout_p(p)?;
    match mode {
        Mode::Eval => Ok(x.clone()),
        Mode::Train => {
            let mask = dropout_mask(x.numel(), p, rng);
            let mut y = x.clone();
            for (v, m) in y.data_mut().iter_mut().zip(&mask) {
                *v *= m;
            }
            Ok(y)
        }
    }
}

/// Max-subtracted masked softmax of one row, written into `out`.
pub(crate) fn softmax_row(scores: &[f64], mask: Option<&[bool]>, out: &mut [f64]) -> Result<()> {
    let keep = |t: usize| mask.is_none_or(|m| m[t]);
    let max = (0..scores.len())
        .filter(|&t| keep(t))
        .map(|t| scores[t])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptyMask);
    }
    let mut total = 0.0;
    for t in 0..scores.len() {
        out[t] = if keep(t) { (scores[t] - max).exp() } else { 0.0 };
        total += out[t];
    }
    for v in out.iter_mut() {
        *v /= total;
    }
    Ok(())
}

/// Softmax over a 1-D score sequence. Masked-out entries get weight zero.
pub fn softmax_over_time(scores: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    scores.expect_rank("softmax_over_time", 1)?;
    if let Some(m) = mask {
        if m.len() != scores.numel() {
            return Err(Error::shape("softmax_over_time", "time", scores.numel(), m.len()));
        }
    }
    let mut out = vec![0.0; scores.numel()];
    softmax_row(scores.data(), mask, &mut out)?;
    Tensor::new(vec![out.len()], out)
}

// ---------------------------------------------------------- cross entropy

/// Mean negative log-likelihood of `labels` under `softmax(logits)`, for
/// `logits` of shape `[B, K]`. Label 0 is bonafide, 1 is spoof.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy_with_probs(logits, labels)?.0)
}

pub(crate) fn cross_entropy_with_probs(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    logits.expect_rank("cross_entropy", 2)?;
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::shape("cross_entropy", "batch", b, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("cross_entropy logits".into()));
    }
    let mut probs = vec![0.0; b * k];
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits.data()[r * k..(r + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum_exp.ln();
        // -log p = lse - z; computed as ln_1p where possible for small losses
        let others: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != label)
            .map(|(_, v)| (v - row[label]).exp())
            .sum();
        loss += if others.is_finite() { others.ln_1p() } else { lse - row[label] };
        for j in 0..k {
            probs[r * k + j] = (row[j] - lse).exp();
        }
    }
    Ok((loss / b as f64, probs))
}
