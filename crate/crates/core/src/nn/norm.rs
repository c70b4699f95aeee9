use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const GLN_EPS: f64 = 1e-8;

/// How batch normalization picks its statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics without touching running statistics (frozen models
    /// that run alongside a training student).
    BatchStats,
    /// Running statistics.
    Eval,
}

/// Updated running statistics produced by a training-mode forward.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn channel_layout(x: &Tensor, c: usize, what: &str) -> Result<(usize, usize)> {
    let shape = x.shape();
    if shape.len() < 2 || shape[1] != c {
        return Err(Error::shape(
            "channel axis",
            format!("{what}: input {shape:?} does not have {c} channels on axis 1"),
        ));
    }
    let b = shape[0];
    let plane: usize = shape[2..].iter().product();
    Ok((b, plane))
}

/// Per-channel normalization over batch and spatial axes.
///
/// Returns the normalized tensor and, in [`BnMode::Train`], the updated
/// running statistics (momentum [`BN_MOMENTUM`], unbiased variance).
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
    mode: BnMode,
) -> Result<(Tensor, Option<RunningStats>)> {
    let c = gamma.numel();
    if beta.numel() != c || running_mean.len() != c || running_var.len() != c {
        return Err(Error::shape("channel axis", "batch-norm parameters disagree on channel count"));
    }
    let (b, plane) = channel_layout(x, c, "batch_norm")?;
    let n = b * plane;
    if n == 0 {
        return Err(Error::InvalidArgument("batch_norm on a zero-size batch".into()));
    }
    let data = x.data();
    let idx = move |bb: usize, ch: usize| (bb * c + ch) * plane;

    let (mean, var) = match mode {
        BnMode::Eval => (running_mean.to_vec(), running_var.to_vec()),
        BnMode::Train | BnMode::BatchStats => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for bb in 0..b {
                    s += data[idx(bb, ch)..idx(bb, ch) + plane].iter().sum::<f64>();
                }
                let mu = s / n as f64;
                let mut v = 0.0;
                for bb in 0..b {
                    v += data[idx(bb, ch)..idx(bb, ch) + plane]
                        .iter()
                        .map(|x| (x - mu).powi(2))
                        .sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = v / n as f64;
            }
            (mean, var)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; data.len()];
    let mut out = vec![0.0; data.len()];
    for bb in 0..b {
        for ch in 0..c {
            let o = idx(bb, ch);
            let (g, be) = (gamma.data()[ch], beta.data()[ch]);
            for p in o..o + plane {
                let h = (data[p] - mean[ch]) * inv_std[ch];
                xhat[p] = h;
                out[p] = g * h + be;
            }
        }
    }

    let stats = (mode == BnMode::Train).then(|| {
        let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
        RunningStats {
            mean: running_mean
                .iter()
                .zip(&mean)
                .map(|(r, m)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * m)
                .collect(),
            var: running_var
                .iter()
                .zip(&var)
                .map(|(r, v)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * v * unbias)
                .collect(),
        }
    });

    let gc = gamma.clone();
    let batch_stats = mode != BnMode::Eval;
    let y = Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |gy| {
            let mut gx = vec![0.0; gy.len()];
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for ch in 0..c {
                let g = gc.data()[ch];
                let (mut sum_d, mut sum_dh) = (0.0, 0.0);
                for bb in 0..b {
                    let o = idx(bb, ch);
                    for p in o..o + plane {
                        sum_d += gy[p];
                        sum_dh += gy[p] * xhat[p];
                    }
                }
                ggamma[ch] = sum_dh;
                gbeta[ch] = sum_d;
                for bb in 0..b {
                    let o = idx(bb, ch);
                    for p in o..o + plane {
                        gx[p] = if batch_stats {
                            g * inv_std[ch] / n as f64
                                * (n as f64 * gy[p] - sum_d - xhat[p] * sum_dh)
                        } else {
                            g * inv_std[ch] * gy[p]
                        };
                    }
                }
            }
            vec![Some(gx), Some(ggamma), Some(gbeta)]
        },
    );
    Ok((y, stats))
}

/// Global layer normalization: each batch element is normalized over all of
/// its channel and spatial positions, then scaled and shifted per channel.
pub fn gln(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let c = gamma.numel();
    if beta.numel() != c {
        return Err(Error::shape("channel axis", "gLN gamma and beta disagree"));
    }
    let (b, plane) = channel_layout(x, c, "gln")?;
    let per = c * plane;
    if per == 0 {
        return Err(Error::InvalidArgument("gln on an empty tensor".into()));
    }
    let data = x.data();
    let mut xhat = vec![0.0; data.len()];
    let mut out = vec![0.0; data.len()];
    let mut inv_stds = vec![0.0; b];
    for bb in 0..b {
        let item = &data[bb * per..(bb + 1) * per];
        let mu = item.iter().sum::<f64>() / per as f64;
        let var = item.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / per as f64;
        let inv = 1.0 / (var + GLN_EPS).sqrt();
        inv_stds[bb] = inv;
        for ch in 0..c {
            let (g, be) = (gamma.data()[ch], beta.data()[ch]);
            for p in 0..plane {
                let i = bb * per + ch * plane + p;
                let h = (data[i] - mu) * inv;
                xhat[i] = h;
                out[i] = g * h + be;
            }
        }
    }
    let gc = gamma.clone();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |gy| {
            let mut gx = vec![0.0; gy.len()];
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for bb in 0..b {
                let (mut sum_d, mut sum_dh) = (0.0, 0.0);
                for ch in 0..c {
                    for p in 0..plane {
                        let i = bb * per + ch * plane + p;
                        let d = gy[i] * gc.data()[ch];
                        sum_d += d;
                        sum_dh += d * xhat[i];
                        ggamma[ch] += gy[i] * xhat[i];
                        gbeta[ch] += gy[i];
                    }
                }
                let n = per as f64;
                for ch in 0..c {
                    for p in 0..plane {
                        let i = bb * per + ch * plane + p;
                        let d = gy[i] * gc.data()[ch];
                        gx[i] = inv_stds[bb] / n * (n * d - sum_d - xhat[i] * sum_dh);
                    }
                }
            }
            vec![Some(gx), Some(ggamma), Some(gbeta)]
        },
    ))
}

/// Rescales each `(cos, sin)` pair on axis 1 of `[B, 2, T, F]` to unit length.
pub fn normalize_pairs(x: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 4 || shape[1] != 2 {
        return Err(Error::shape("channel axis", format!("expected [B, 2, T, F], got {shape:?}")));
    }
    let (b, plane) = (shape[0], shape[2] * shape[3]);
    let data = x.data();
    let mut out = vec![0.0; data.len()];
    let mut norms = vec![0.0; b * plane];
    for bb in 0..b {
        for p in 0..plane {
            let (i, j) = (bb * 2 * plane + p, bb * 2 * plane + plane + p);
            let r = (data[i] * data[i] + data[j] * data[j]).sqrt().max(1e-12);
            norms[bb * plane + p] = r;
            out[i] = data[i] / r;
            out[j] = data[j] / r;
        }
    }
    let yc = out.clone();
    Ok(Tensor::from_op(shape.to_vec(), out, vec![x.clone()], move |gy| {
        let mut gx = vec![0.0; gy.len()];
        for bb in 0..b {
            for p in 0..plane {
                let (i, j) = (bb * 2 * plane + p, bb * 2 * plane + plane + p);
                let r = norms[bb * plane + p];
                // d(u/|u|) = (I - y yᵀ)/|u|
                let dot = gy[i] * yc[i] + gy[j] * yc[j];
                gx[i] = (gy[i] - dot * yc[i]) / r;
                gx[j] = (gy[j] - dot * yc[j]) / r;
            }
        }
        vec![Some(gx)]
    }))
}
