//! Reconstruction, distillation, and total training losses.
//!
//! Batched losses take optional valid frame counts per item; frames past an
//! item's length never contribute. Batch values are means over items.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EncoderTaps;
use crate::nn::tensor::{self as t, Tensor};

/// Magnitude term of the reconstruction loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MagLoss {
    /// Euclidean norm of the difference over all valid bins.
    #[default]
    L2Norm,
    /// Mean squared difference over valid bins.
    Mse,
}

/// How the left and right tap differences are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KdForm {
    /// `‖(S_L − O_L) + (S_R − O_R)‖₁`: differences summed inside the norm.
    #[default]
    Literal,
    /// `‖S_L − O_L‖₁ + ‖S_R − O_R‖₁`.
    Separate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Phase-term weight in the reconstruction loss.
    pub alpha: f64,
    /// Weight of the distillation ratio in the total loss.
    pub beta: f64,
    /// Floor of the distillation ratio's denominator.
    pub kd_eps: f64,
    pub mag_loss: MagLoss,
    pub kd_form: KdForm,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            kd_eps: 1e-8,
            mag_loss: MagLoss::L2Norm,
            kd_form: KdForm::Literal,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if !self.kd_eps.is_finite() || self.kd_eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("kd_eps = {} must be finite and > 0", self.kd_eps)));
        }
        Ok(())
    }
}

fn check_finite(what: &str, x: &Tensor) -> Result<()> {
    if x.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} contains non-finite values")))
    }
}

fn lengths_or_full(lengths: Option<&[usize]>, b: usize, frames: usize) -> Result<Vec<usize>> {
    match lengths {
        None => Ok(vec![frames; b]),
        Some(l) if l.len() != b => Err(Error::shape("batch axis", format!("{} lengths for batch of {b}", l.len()))),
        Some(l) => {
            if let Some(&bad) = l.iter().find(|&&n| n == 0 || n > frames) {
                return Err(Error::shape("time axis", format!("valid length {bad} outside 1..={frames}")));
            }
            Ok(l.to_vec())
        }
    }
}

/// 0/1 weights over `[B, C, T, F]` marking frames `t < lengths[b]`.
pub fn frame_mask(shape: &[usize], lengths: &[usize]) -> Result<Tensor> {
    let [b, c, frames, f]: [usize; 4] = shape
        .try_into()
        .map_err(|_| Error::shape("mask", format!("expected rank 4, got {shape:?}")))?;
    let lengths = lengths_or_full(Some(lengths), b, frames)?;
    let mut m = vec![0.0; b * c * frames * f];
    for (bb, &len) in lengths.iter().enumerate() {
        for cc in 0..c {
            let o = (bb * c + cc) * frames * f;
            m[o..o + len * f].fill(1.0);
        }
    }
    Tensor::new(shape.to_vec(), m)
}

fn check_magnitudes(mag_est: &Tensor, mag_gt: &Tensor) -> Result<[usize; 4]> {
    let s: [usize; 4] = mag_est
        .shape()
        .try_into()
        .map_err(|_| Error::shape("magnitude", format!("expected [B, 1, T, F], got {:?}", mag_est.shape())))?;
    if s[1] != 1 || s[0] == 0 {
        return Err(Error::shape("magnitude", format!("expected [B, 1, T, F], got {s:?}")));
    }
    if mag_gt.shape() != s {
        return Err(Error::shape("magnitude", format!("estimate {s:?} vs truth {:?}", mag_gt.shape())));
    }
    check_finite("magnitude estimate", mag_est)?;
    check_finite("magnitude truth", mag_gt)?;
    Ok(s)
}

/// Per-item magnitude term `[B]` over valid bins.
fn magnitude_term(mag_est: &Tensor, mag_gt: &Tensor, lengths: &[usize], mag_loss: MagLoss) -> Result<Tensor> {
    let s = mag_est.shape();
    let mask = frame_mask(s, lengths)?;
    let diff = t::mul(&t::sub(mag_est, &mag_gt.detach())?, &mask)?;
    let sq = t::sum_per_item(&t::square(&diff))?;
    Ok(match mag_loss {
        MagLoss::L2Norm => t::sqrt(&sq),
        MagLoss::Mse => {
            let inv = lengths.iter().map(|&n| 1.0 / (n * s[3]) as f64).collect();
            t::mul(&sq, &Tensor::new(vec![s[0]], inv)?)?
        }
    })
}

/// Magnitude term of the reconstruction loss alone, averaged over the batch.
pub fn magnitude_loss(mag_est: &Tensor, mag_gt: &Tensor, lengths: Option<&[usize]>, mag_loss: MagLoss) -> Result<Tensor> {
    let [b, _, frames, _] = check_magnitudes(mag_est, mag_gt)?;
    let lengths = lengths_or_full(lengths, b, frames)?;
    Ok(t::mean(&magnitude_term(mag_est, mag_gt, &lengths, mag_loss)?))
}

/// Reconstruction loss on `mag: [B, 1, T, F]` and `phase: [B, 2, T, F]`:
/// `‖M̂ − M‖₂ − α/(T·F) · Σ M·⟨P̂, P⟩` per item, averaged over the batch.
///
/// `T` is each item's valid length. Gradients reach `mag_est` and
/// `phase_est`; the ground truths are treated as constants.
pub fn reconstruction_loss(
    mag_est: &Tensor,
    mag_gt: &Tensor,
    phase_est: &Tensor,
    phase_gt: &Tensor,
    lengths: Option<&[usize]>,
    alpha: f64,
    mag_loss: MagLoss,
) -> Result<Tensor> {
    let s = check_magnitudes(mag_est, mag_gt)?;
    let [b, _, frames, f] = s;
    let ps = [b, 2, frames, f];
    for (what, p) in [("phase estimate", phase_est), ("phase truth", phase_gt)] {
        if p.shape() != ps {
            return Err(Error::shape(what, format!("expected {ps:?}, got {:?}", p.shape())));
        }
        check_finite(what, p)?;
    }
    let lengths = lengths_or_full(lengths, b, frames)?;
    let mag_term = magnitude_term(mag_est, mag_gt, &lengths, mag_loss)?;

    // Σ_c P̂_c · (mask · M · P_c), one constant weight per bin and channel.
    let mask = frame_mask(&s, &lengths)?;
    let (m, p, w) = (mag_gt.data(), phase_gt.data(), mask.data());
    let plane = frames * f;
    let mut weight = vec![0.0; b * 2 * plane];
    for bb in 0..b {
        for ch in 0..2 {
            for i in 0..plane {
                let k = bb * plane + i;
                weight[(bb * 2 + ch) * plane + i] = w[k] * m[k] * p[(bb * 2 + ch) * plane + i];
            }
        }
    }
    let cos = t::sum_per_item(&t::mul(phase_est, &Tensor::new(ps.to_vec(), weight)?)?)?;
    let scale: Vec<f64> = lengths.iter().map(|&n| alpha / (n * f) as f64).collect();
    let cos = t::mul(&cos, &Tensor::new(vec![b], scale)?)?;
    Ok(t::mean(&t::sub(&mag_term, &cos)?))
}

fn stage_mismatch(stage: usize, detail: String) -> Error {
    Error::TapMismatch { stage, detail }
}

/// Feature-matching loss between student taps and a frozen model's taps,
/// summed over the five stages and averaged over the batch. `other` is
/// detached, so no gradient reaches the frozen model.
pub fn kd_loss(student: &EncoderTaps, other: &EncoderTaps, lengths: Option<&[usize]>, form: KdForm) -> Result<Tensor> {
    let n = student.left.len();
    if [student.right.len(), other.left.len(), other.right.len()] != [n; 3] || n == 0 {
        return Err(stage_mismatch(0, "tap lists differ in length".into()));
    }
    let mut total: Option<Tensor> = None;
    for i in 0..n {
        let shape = student.left[i].shape();
        for (what, x) in [
            ("student right", &student.right[i]),
            ("other left", &other.left[i]),
            ("other right", &other.right[i]),
        ] {
            if x.shape() != shape {
                return Err(stage_mismatch(
                    i + 1,
                    format!("student left {shape:?} vs {what} {:?}", x.shape()),
                ));
            }
        }
        if shape.len() != 4 {
            return Err(stage_mismatch(i + 1, format!("expected rank-4 taps, got {shape:?}")));
        }
        let b = shape[0];
        let lengths = lengths_or_full(lengths, b, shape[2])?;
        let mask = frame_mask(shape, &lengths)?;
        let dl = t::sub(&student.left[i], &other.left[i].detach())?;
        let dr = t::sub(&student.right[i], &other.right[i].detach())?;
        let stage = match form {
            KdForm::Literal => t::sum(&t::abs(&t::mul(&t::add(&dl, &dr)?, &mask)?)),
            KdForm::Separate => t::add(
                &t::sum(&t::abs(&t::mul(&dl, &mask)?)),
                &t::sum(&t::abs(&t::mul(&dr, &mask)?)),
            )?,
        };
        let stage = t::scale(&stage, 1.0 / b as f64);
        total = Some(match total {
            None => stage,
            Some(acc) => t::add(&acc, &stage)?,
        });
    }
    Ok(total.expect("at least one stage"))
}

fn check_scalar(what: &str, x: &Tensor) -> Result<()> {
    if x.numel() != 1 {
        return Err(Error::NonScalarLoss(x.shape().to_vec()));
    }
    if !x.item().is_finite() {
        return Err(Error::NonFinite(format!("{what} is {}", x.item())));
    }
    if x.item() < 0.0 {
        return Err(Error::InvalidArgument(format!("{what} = {} is negative", x.item())));
    }
    Ok(())
}

/// Distillation ratio `l_ts / max(l_bs, kd_eps)`.
pub fn kd_total(l_ts: &Tensor, l_bs: &Tensor, kd_eps: f64) -> Result<Tensor> {
    check_scalar("teacher-student loss", l_ts)?;
    check_scalar("bad-student loss", l_bs)?;
    if kd_eps.is_nan() || kd_eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("kd_eps = {kd_eps} must be > 0")));
    }
    t::div(&t::reshape(l_ts, vec![])?, &t::clamp_min(&t::reshape(l_bs, vec![])?, kd_eps))
}

/// `l_rl + β · l_kd_total`.
pub fn total_loss(l_rl: &Tensor, l_kd_total: &Tensor, beta: f64) -> Result<Tensor> {
    if l_rl.numel() != 1 || l_kd_total.numel() != 1 {
        return Err(Error::NonScalarLoss(if l_rl.numel() != 1 {
            l_rl.shape().to_vec()
        } else {
            l_kd_total.shape().to_vec()
        }));
    }
    t::add(&t::reshape(l_rl, vec![])?, &t::scale(&t::reshape(l_kd_total, vec![])?, beta))
}
