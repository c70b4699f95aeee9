//! Adam, batch padding, and the three training phases: binaural teacher,
//! monaural bad student, and the distilled student.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{stft, Spectrogram, StftConfig};
use crate::datasim::LoadedRecord;
use crate::error::{Error, Result};
use crate::losses::{kd_loss, kd_total, magnitude_loss, reconstruction_loss, total_loss, KdForm, LossWeights};
use crate::model::{spectrogram_planes, EncoderTaps, ModelConfig, ModelKind, Sjen, MIN_FRAMES};
use crate::nn::{BnMode, Binding, ParamStore, Tensor};

/// Which network a training run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPhase {
    Teacher,
    BadStudent,
    Student,
}

impl TrainPhase {
    pub fn kind(self) -> ModelKind {
        match self {
            TrainPhase::Teacher => ModelKind::Teacher,
            TrainPhase::BadStudent => ModelKind::BadStudent,
            TrainPhase::Student => ModelKind::Student,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Start the student from the bad student's parameters.
    pub warm_start: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 4,
            epochs: 20,
            seed: 0,
            weights: LossWeights::default(),
            warm_start: false,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return bad(format!("learning_rate = {} must be finite and > 0", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return bad(format!("adam betas ({}, {}) must lie in [0, 1)", a.beta1, a.beta2));
        }
        if !a.eps.is_finite() || a.eps <= 0.0 {
            return bad(format!("adam eps = {} must be finite and > 0", a.eps));
        }
        self.weights.validate()
    }
}

/// Moment accumulators for every trainable parameter, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub step: u64,
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let trainable: Vec<_> = store.iter().filter(|p| p.trainable).collect();
        Self {
            cfg,
            step: 0,
            names: trainable.iter().map(|p| p.name.clone()).collect(),
            m: trainable.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: trainable.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.m[i].as_slice())
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.v[i].as_slice())
    }
}

/// One bias-corrected Adam update. `grads` must list the trainable
/// parameters in store order, as [`Binding::grads`] does. A non-finite
/// gradient aborts the step before anything changes.
pub fn adam_step(store: &mut ParamStore, grads: &[(String, Vec<f64>)], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != state.names.len() {
        return Err(Error::shape(
            "gradients",
            format!("{} gradients for {} trainable parameters", grads.len(), state.names.len()),
        ));
    }
    for ((name, g), (expected, m)) in grads.iter().zip(state.names.iter().zip(&state.m)) {
        if name != expected || g.len() != m.len() {
            return Err(Error::shape(
                name.clone(),
                format!("gradient of length {} does not match {expected} ({})", g.len(), m.len()),
            ));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}[{i}] is {}", g[i])));
        }
    }
    let AdamConfig { beta1, beta2, eps } = state.cfg;
    state.step += 1;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for (i, (name, g)) in grads.iter().enumerate() {
        let p = store
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for k in 0..g.len() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
            p.data[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Magnitude and planar phase of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Planes {
    pub frames: usize,
    pub bins: usize,
    pub mag: Vec<f64>,
    pub phase: Vec<f64>,
}

impl Planes {
    pub fn from_spectrogram(s: &Spectrogram) -> Self {
        let (mag, phase) = spectrogram_planes(s);
        Self {
            frames: s.frames(),
            bins: s.bins(),
            mag,
            phase,
        }
    }
}

/// Time-padded batch: magnitude `[B, 1, T, F]`, phase `[B, 2, T, F]`.
#[derive(Debug, Clone)]
pub struct PaddedBatch {
    pub mag: Tensor,
    pub phase: Tensor,
    pub lengths: Vec<usize>,
}

impl PaddedBatch {
    /// 0/1 validity per `(item, frame)`.
    pub fn mask(&self) -> Vec<Vec<bool>> {
        let t = self.mag.shape()[2];
        self.lengths.iter().map(|&n| (0..t).map(|i| i < n).collect()).collect()
    }
}

/// Pads every utterance in time to the longest one (and to at least
/// `min_frames`). Padded bins have zero magnitude and unit phase `(1, 0)`.
pub fn pad_planes(items: &[&Planes], min_frames: usize) -> Result<PaddedBatch> {
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot pad an empty batch".into()))?;
    let f = first.bins;
    if let Some(p) = items.iter().find(|p| p.bins != f) {
        return Err(Error::shape("frequency axis", format!("{} bins vs {f}", p.bins)));
    }
    if let Some(p) = items.iter().find(|p| p.frames == 0) {
        return Err(Error::shape("time axis", format!("utterance with {} frames", p.frames)));
    }
    let t = items.iter().map(|p| p.frames).max().unwrap_or(0).max(min_frames);
    let b = items.len();
    let mut mag = vec![0.0; b * t * f];
    let mut phase = vec![0.0; b * 2 * t * f];
    for (i, p) in items.iter().enumerate() {
        let n = p.frames * f;
        mag[i * t * f..i * t * f + n].copy_from_slice(&p.mag);
        let cos = &mut phase[i * 2 * t * f..(i * 2 + 1) * t * f];
        cos[..n].copy_from_slice(&p.phase[..n]);
        cos[n..].fill(1.0);
        phase[(i * 2 + 1) * t * f..(i * 2 + 1) * t * f + n].copy_from_slice(&p.phase[n..]);
    }
    Ok(PaddedBatch {
        mag: Tensor::new(vec![b, 1, t, f], mag)?,
        phase: Tensor::new(vec![b, 2, t, f], phase)?,
        lengths: items.iter().map(|p| p.frames).collect(),
    })
}

pub fn pad_batch(utterances: &[&Spectrogram], min_frames: usize) -> Result<PaddedBatch> {
    let planes: Vec<Planes> = utterances.iter().map(|s| Planes::from_spectrogram(s)).collect();
    pad_planes(&planes.iter().collect::<Vec<_>>(), min_frames)
}

/// Spectrogram planes of one training record.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub id: String,
    pub noisy: Planes,
    pub left: Planes,
    pub right: Planes,
    pub clean: Planes,
}

pub fn prepare_examples(records: &[LoadedRecord], cfg: &StftConfig) -> Result<Vec<TrainExample>> {
    records
        .iter()
        .map(|r| {
            let planes = |w| stft(w, cfg).map(|s| Planes::from_spectrogram(&s));
            Ok(TrainExample {
                id: r.row.id.clone(),
                noisy: planes(&r.mono)?,
                left: planes(&r.left)?,
                right: planes(&r.right)?,
                clean: planes(&r.clean)?,
            })
        })
        .collect()
}

/// Loss components of one step. Unused components are zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct StepLosses {
    pub l_rl: f64,
    pub l_ts: f64,
    pub l_bs: f64,
    pub l_kd_total: f64,
    pub l_total: f64,
}

/// One row of the training log: epoch means of the step losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_rl: f64,
    pub l_ts: f64,
    pub l_bs: f64,
    pub l_kd_total: f64,
    pub l_total: f64,
    pub wall_seconds: f64,
}

pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for row in log {
        w.serialize(row).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub struct TrainOutcome {
    pub model: Sjen,
    pub log: Vec<EpochLog>,
    /// Losses of every step, computed before that step's update.
    pub steps: Vec<StepLosses>,
}

struct Batch {
    noisy: PaddedBatch,
    left: PaddedBatch,
    right: PaddedBatch,
    clean: PaddedBatch,
}

fn make_batch(examples: &[&TrainExample]) -> Result<Batch> {
    let pad = |get: fn(&TrainExample) -> &Planes| {
        pad_planes(&examples.iter().map(|e| get(e)).collect::<Vec<_>>(), MIN_FRAMES)
    };
    Ok(Batch {
        noisy: pad(|e| &e.noisy)?,
        left: pad(|e| &e.left)?,
        right: pad(|e| &e.right)?,
        clean: pad(|e| &e.clean)?,
    })
}

fn finite(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} is {v}")))
    }
}

fn train_loop(
    model: &mut Sjen,
    examples: &[TrainExample],
    cfg: &TrainConfig,
    step: impl Fn(&Binding, &Batch) -> Result<(Tensor, StepLosses)>,
) -> Result<(Vec<EpochLog>, Vec<StepLosses>)> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no training records".into()));
    }
    let mut adam = AdamState::new(&model.params, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let start = Instant::now();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let (mut log, mut steps) = (Vec::new(), Vec::new());
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = StepLosses::default();
        let mut n = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = make_batch(&chunk.iter().map(|&i| &examples[i]).collect::<Vec<_>>())?;
            let (grads, stats, losses) = {
                let bind = model.bind(true, BnMode::Train);
                let (total, losses) = step(&bind, &batch)?;
                finite(&format!("loss at epoch {epoch}, step {}", steps.len() + 1), losses.l_total)?;
                total.backward()?;
                (bind.grads(), bind.take_stats(), losses)
            };
            adam_step(&mut model.params, &grads, &mut adam, cfg.learning_rate)?;
            model.params.apply_stats(&stats)?;
            steps.push(losses);
            acc.l_rl += losses.l_rl;
            acc.l_ts += losses.l_ts;
            acc.l_bs += losses.l_bs;
            acc.l_kd_total += losses.l_kd_total;
            acc.l_total += losses.l_total;
            n += 1;
        }
        let k = n as f64;
        let row = EpochLog {
            epoch,
            l_rl: acc.l_rl / k,
            l_ts: acc.l_ts / k,
            l_bs: acc.l_bs / k,
            l_kd_total: acc.l_kd_total / k,
            l_total: acc.l_total / k,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: l_total {:.6} l_rl {:.6}", row.l_total, row.l_rl);
        log.push(row);
    }
    Ok((log, steps))
}

fn new_model(kind: ModelKind, model_cfg: &ModelConfig, examples: &[TrainExample], seed: u64) -> Result<Sjen> {
    if let Some(e) = examples.iter().find(|e| e.noisy.bins != model_cfg.freq_bins) {
        return Err(Error::shape(
            "frequency axis",
            format!("record {} has {} bins, model expects {}", e.id, e.noisy.bins, model_cfg.freq_bins),
        ));
    }
    Sjen::new(kind, model_cfg, seed)
}

/// Binaural teacher trained on the magnitude term alone.
pub fn train_teacher(examples: &[TrainExample], model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut model = new_model(ModelKind::Teacher, model_cfg, examples, cfg.seed)?;
    let arch = model.arch().clone();
    let w = cfg.weights;
    let (log, steps) = train_loop(&mut model, examples, cfg, |bind, b| {
        let (mag, _) = arch.magnitude(bind, &b.left.mag, &b.right.mag)?;
        let l = magnitude_loss(&mag, &b.clean.mag, Some(&b.clean.lengths), w.mag_loss)?;
        let v = l.item();
        Ok((l, StepLosses { l_rl: v, l_total: v, ..Default::default() }))
    })?;
    Ok(TrainOutcome { model, log, steps })
}

/// Monaural SJEN trained on the reconstruction loss alone.
pub fn train_bad_student(examples: &[TrainExample], model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut model = new_model(ModelKind::BadStudent, model_cfg, examples, cfg.seed)?;
    let arch = model.arch().clone();
    let w = cfg.weights;
    let (log, steps) = train_loop(&mut model, examples, cfg, |bind, b| {
        let out = arch.sjen(bind, &b.noisy.mag, &b.noisy.phase)?;
        let l = reconstruction_loss(
            &out.mag,
            &b.clean.mag,
            &out.phase,
            &b.clean.phase,
            Some(&b.clean.lengths),
            w.alpha,
            w.mag_loss,
        )?;
        let v = l.item();
        Ok((l, StepLosses { l_rl: v, l_total: v, ..Default::default() }))
    })?;
    Ok(TrainOutcome { model, log, steps })
}

/// SJEN trained on `L_RL + β · L_TS / L_BS` against a frozen teacher and a
/// frozen bad student. Only the student's parameters are bound as leaves.
pub fn train_student(
    examples: &[TrainExample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    teacher: &Sjen,
    bad_student: &Sjen,
) -> Result<TrainOutcome> {
    if teacher.kind() != ModelKind::Teacher {
        return Err(Error::InvalidArgument(format!("expected a teacher, got {}", teacher.kind().as_str())));
    }
    if bad_student.kind() != ModelKind::BadStudent {
        return Err(Error::InvalidArgument(format!(
            "expected a bad student, got {}",
            bad_student.kind().as_str()
        )));
    }
    let mut model = new_model(ModelKind::Student, model_cfg, examples, cfg.seed)?;
    if cfg.warm_start {
        model.params.copy_from(&bad_student.params)?;
    }
    let arch = model.arch().clone();
    let w = cfg.weights;
    let (log, steps) = train_loop(&mut model, examples, cfg, |bind, b| {
        let out = arch.sjen(bind, &b.noisy.mag, &b.noisy.phase)?;
        let l_rl = reconstruction_loss(
            &out.mag,
            &b.clean.mag,
            &out.phase,
            &b.clean.phase,
            Some(&b.clean.lengths),
            w.alpha,
            w.mag_loss,
        )?;
        let lengths = Some(b.noisy.lengths.as_slice());
        let t_taps = frozen_taps(teacher, |bd| teacher.arch().magnitude(bd, &b.left.mag, &b.right.mag))?;
        let b_taps = frozen_taps(bad_student, |bd| {
            bad_student.arch().magnitude(bd, &b.noisy.mag, &b.noisy.mag)
        })?;
        let l_ts = kd_loss(&out.taps, &t_taps, lengths, w.kd_form)?;
        let l_bs = kd_loss(&out.taps, &b_taps, lengths, w.kd_form)?;
        let l_kdt = kd_total(&l_ts, &l_bs, w.kd_eps)?;
        let losses = StepLosses {
            l_rl: l_rl.item(),
            l_ts: l_ts.item(),
            l_bs: l_bs.item(),
            l_kd_total: l_kdt.item(),
            l_total: 0.0,
        };
        let total = if w.beta == 0.0 { l_rl } else { total_loss(&l_rl, &l_kdt, w.beta)? };
        Ok((total.clone(), StepLosses { l_total: total.item(), ..losses }))
    })?;
    Ok(TrainOutcome { model, log, steps })
}

fn frozen_taps(model: &Sjen, f: impl FnOnce(&Binding) -> Result<(Tensor, EncoderTaps)>) -> Result<EncoderTaps> {
    let bind = model.bind(false, BnMode::BatchStats);
    Ok(f(&bind)?.1.detach())
}

/// Mean per-utterance distance between `model`'s taps on the monaural mix
/// and the teacher's taps on the binaural pair, in inference mode.
pub fn mean_teacher_distance(model: &Sjen, teacher: &Sjen, examples: &[TrainExample], form: KdForm) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no records".into()));
    }
    let mut total = 0.0;
    for e in examples {
        let b = make_batch(&[e])?;
        let lengths = Some(b.noisy.lengths.as_slice());
        let mb = model.bind(false, BnMode::Eval);
        let (_, s_taps) = model.arch().magnitude(&mb, &b.noisy.mag, &b.noisy.mag)?;
        let tb = teacher.bind(false, BnMode::Eval);
        let (_, t_taps) = teacher.arch().magnitude(&tb, &b.left.mag, &b.right.mag)?;
        total += kd_loss(&s_taps, &t_taps, lengths, form)?.item();
    }
    Ok(total / examples.len() as f64)
}
