//! Straightforward reference implementations, written without reference to
//! the library kernels.

use emoanti::model::{Ablation, EmoAntiModel, LayerFeatures};
use emoanti::ops::RunningStats;
use emoanti::Tensor;

/// Row-major `[rows, cols]` matrix as nested vectors.
pub type Mat = Vec<Vec<f64>>;

pub fn mat_from(t: &Tensor) -> Mat {
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

/// `x: [C_in][T]`, `w: [C_out, C_in, k]` tensor. Builds the zero-padded
/// signal explicitly and sums every window.
pub fn conv1d(x: &Mat, w: &Tensor, bias: &[f64], padding: usize) -> Mat {
    let (c_out, c_in, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    assert_eq!(x.len(), c_in);
    let t = x[0].len();
    let padded: Mat = x
        .iter()
        .map(|row| {
            let mut p = vec![0.0; padding];
            p.extend_from_slice(row);
            p.extend(std::iter::repeat_n(0.0, padding));
            p
        })
        .collect();
    let t_out = t + 2 * padding + 1 - k;
    (0..c_out)
        .map(|o| {
            (0..t_out)
                .map(|tt| {
                    let mut acc = bias[o];
                    for (i, row) in padded.iter().enumerate() {
                        for kk in 0..k {
                            acc += w.data()[(o * c_in + i) * k + kk] * row[tt + kk];
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Eval-mode batch norm of one utterance `[C][T]`.
pub fn batchnorm_eval(x: &Mat, gamma: &[f64], beta: &[f64], stats: &RunningStats, eps: f64) -> Mat {
    x.iter()
        .enumerate()
        .map(|(c, row)| {
            let s = (stats.var[c] + eps).sqrt();
            row.iter().map(|v| gamma[c] * (v - stats.mean[c]) / s + beta[c]).collect()
        })
        .collect()
}

/// Train-mode batch norm over a batch of utterances `[B][C][T]`, with the
/// per-channel mean and biased variance it used.
pub fn batchnorm_train(x: &[Mat], gamma: &[f64], beta: &[f64], eps: f64) -> (Vec<Mat>, Vec<f64>, Vec<f64>) {
    let c = x[0].len();
    let mut means = vec![0.0; c];
    let mut vars = vec![0.0; c];
    for ch in 0..c {
        let vals: Vec<f64> = x.iter().flat_map(|u| u[ch].iter().copied()).collect();
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        means[ch] = m;
        vars[ch] = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    }
    let y = x
        .iter()
        .map(|u| {
            u.iter()
                .enumerate()
                .map(|(ch, row)| {
                    let s = (vars[ch] + eps).sqrt();
                    row.iter().map(|v| gamma[ch] * (v - means[ch]) / s + beta[ch]).collect()
                })
                .collect()
        })
        .collect();
    (y, means, vars)
}

pub fn relu(x: &Mat) -> Mat {
    x.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

pub fn transpose(x: &Mat) -> Mat {
    (0..x[0].len()).map(|j| x.iter().map(|r| r[j]).collect()).collect()
}

/// `W x + b` for a `[D_out, D_in]` weight tensor.
pub fn affine(x: &[f64], w: &Tensor, b: &[f64]) -> Vec<f64> {
    let d_in = w.shape()[1];
    assert_eq!(x.len(), d_in);
    (0..w.shape()[0])
        .map(|o| b[o] + (0..d_in).map(|i| w.data()[o * d_in + i] * x[i]).sum::<f64>())
        .collect()
}

/// Softmax written as `1 / sum_j exp(s_j - s_i)`, which never forms a large
/// exponent for the winning entries. Masked entries get weight zero.
pub fn softmax(scores: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let on = |i: usize| mask.is_none_or(|m| m[i]);
    (0..scores.len())
        .map(|i| {
            if !on(i) {
                return 0.0;
            }
            let denom: f64 = (0..scores.len()).filter(|&j| on(j)).map(|j| (scores[j] - scores[i]).exp()).sum();
            1.0 / denom
        })
        .collect()
}

fn param<'a>(model: &'a EmoAntiModel, name: &str) -> &'a Tensor {
    let id = model.params().find(name).unwrap_or_else(|| panic!("no parameter `{name}`"));
    model.params().get(id)
}

/// Eval-mode residual block on one utterance `[d_in][T]`, composed from the
/// reference primitives. Returns `(h_conv1, h_conv2, h_residual, f)`.
pub fn block_eval(model: &EmoAntiModel, i: usize, x: &Mat) -> (Mat, Mat, Mat, Mat) {
    let p = |s: &str| param(model, &format!("block{i}.{s}"));
    let eps = model.config().batchnorm.eps;
    let stats = |slot: usize| model.running_stats()[slot].clone().expect("running stats");
    let blk = &model.blocks()[i];
    let c1 = conv1d(x, p("conv1.weight"), p("conv1.bias").data(), 1);
    let h1 = batchnorm_eval(&c1, p("bn1.gamma").data(), p("bn1.beta").data(), &stats(blk.bn1.stats_slot), eps);
    let c2 = conv1d(&relu(&h1), p("conv2.weight"), p("conv2.bias").data(), 1);
    let h2 = batchnorm_eval(&c2, p("bn2.gamma").data(), p("bn2.beta").data(), &stats(blk.bn2.stats_slot), eps);
    let res = if model.params().find(&format!("block{i}.proj.weight")).is_some() {
        conv1d(x, p("proj.weight"), p("proj.bias").data(), 0)
    } else {
        x.clone()
    };
    let f = relu(&add(&h2, &res));
    (h1, h2, res, f)
}

/// Attention pooling of time-major `[T][D]` frames with subnet `attn{i}`.
/// Returns `(scores, weights, pooled)`.
pub fn attention(model: &EmoAntiModel, i: usize, frames: &Mat) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let p = |s: &str| param(model, &format!("attn{i}.{s}"));
    let scores: Vec<f64> = frames
        .iter()
        .map(|f| {
            let h: Vec<f64> = affine(f, p("w1"), p("b1").data()).into_iter().map(|v| v.max(0.0)).collect();
            affine(&h, p("w2"), p("b2").data())[0]
        })
        .collect();
    let alpha = softmax(&scores, None);
    let d = frames[0].len();
    let pooled = (0..d).map(|j| frames.iter().zip(&alpha).map(|(f, a)| a * f[j]).sum()).collect();
    (scores, alpha, pooled)
}

/// Eval-mode classifier: `W2 relu(W1 x + b1) + b2`.
pub fn head(model: &EmoAntiModel, fused: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = affine(fused, param(model, "head.w1"), param(model, "head.b1").data())
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    affine(&h, param(model, "head.w2"), param(model, "head.b2").data())
}

/// Channel-major block-1 input of one utterance.
pub fn model_input(model: &EmoAntiModel, feats: &LayerFeatures) -> Mat {
    let (t, c) = (feats.frames(), feats.channels());
    let mut x = vec![vec![0.0; t]; c];
    for l in model.config().input_layers() {
        let layer = feats.layer(l);
        for ti in 0..t {
            for ch in 0..c {
                x[ch][ti] += layer[ti * c + ch];
            }
        }
    }
    x
}

/// Eval-mode logits of one utterance, from reference pieces only.
pub fn model_logits(model: &EmoAntiModel, feats: &LayerFeatures) -> Vec<f64> {
    let x = model_input(model, feats);
    let mut fused = Vec::new();
    match model.config().ablation {
        Ablation::Full => {
            let mut h = x;
            for i in 0..model.blocks().len() {
                let (_, _, _, f) = block_eval(model, i, &h);
                fused.extend(attention(model, i, &transpose(&f)).2);
                h = f;
            }
        }
        Ablation::NoCrfe => fused.extend(attention(model, 0, &transpose(&x)).2),
    }
    head(model, &fused)
}

// ------------------------------------------------------------------ metrics

/// `(threshold, P_miss, P_fa)` by counting every class member at every
/// candidate threshold.
pub fn det_brute(bona: &[f64], spoof: &[f64]) -> Vec<(f64, f64, f64)> {
    let mut thr: Vec<f64> = bona.iter().chain(spoof).copied().collect();
    thr.sort_by(f64::total_cmp);
    thr.dedup();
    let mut all = vec![f64::NEG_INFINITY];
    all.extend(thr);
    all.push(f64::INFINITY);
    all.into_iter()
        .map(|s| {
            let miss = bona.iter().filter(|&&b| b < s).count() as f64 / bona.len() as f64;
            let fa = spoof.iter().filter(|&&x| x >= s).count() as f64 / spoof.len() as f64;
            (s, miss, fa)
        })
        .collect()
}

/// EER where the polyline through the brute-force DET vertices crosses
/// `P_miss = P_fa`.
pub fn eer_brute(bona: &[f64], spoof: &[f64]) -> f64 {
    let det = det_brute(bona, spoof);
    for w in det.windows(2) {
        let (d0, d1) = (w[0].1 - w[0].2, w[1].1 - w[1].2);
        if d0 == 0.0 {
            return w[0].1;
        }
        if d0 < 0.0 && d1 >= 0.0 {
            let lambda = -d0 / (d1 - d0);
            return w[0].1 + lambda * (w[1].1 - w[0].1);
        }
    }
    det.last().unwrap().1
}

/// Minimum normalized t-DCF over the brute-force DET vertices.
pub fn min_tdcf_brute(bona: &[f64], spoof: &[f64], c0: f64, c1: f64, c2: f64) -> f64 {
    let norm = c0 + c1.min(c2);
    det_brute(bona, spoof)
        .into_iter()
        .map(|(_, m, f)| (c0 + c1 * m + c2 * f) / norm)
        .fold(f64::INFINITY, f64::min)
}

/// Nearest-centroid scores (higher = more bonafide) on time-averaged
/// block-1 input features.
pub fn centroid_scores(train: &[(LayerFeatures, bool)], test: &[LayerFeatures], layer: usize) -> Vec<f64> {
    let avg = |f: &LayerFeatures| -> Vec<f64> {
        let (t, c) = (f.frames(), f.channels());
        let l = f.layer(layer);
        (0..c).map(|ch| (0..t).map(|ti| l[ti * c + ch]).sum::<f64>() / t as f64).collect()
    };
    let centroid = |bonafide: bool| -> Vec<f64> {
        let members: Vec<Vec<f64>> = train.iter().filter(|(_, b)| *b == bonafide).map(|(f, _)| avg(f)).collect();
        let c = members[0].len();
        (0..c).map(|j| members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64).collect()
    };
    let (cb, cs) = (centroid(true), centroid(false));
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    test.iter()
        .map(|f| {
            let v = avg(f);
            dist(&v, &cs) - dist(&v, &cb)
        })
        .collect()
}
