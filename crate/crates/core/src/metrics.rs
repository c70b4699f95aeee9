//! Evaluation metrics: STOI, SI-SDR, parameter and multiply-accumulate
//! counts, real-time factor, and per-condition reports.

use std::fmt::Write as _;
use std::time::Instant;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::audio::{StftConfig, Waveform};
use crate::datasim::LoadedRecord;
use crate::error::{Error, Result};
use crate::model::{enhance, ModelConfig, ModelKind, Sjen, PHASE_KERNEL_A, PHASE_KERNEL_B, STAGES};
use crate::nn::ParamStore;

const STOI_FS: u32 = 10_000;
const STOI_FRAME: usize = 256;
const STOI_NFFT: usize = 512;
const STOI_BANDS: usize = 15;
const STOI_MIN_FREQ: f64 = 150.0;
/// Frames per short-time segment (384 ms).
const STOI_SEGMENT: usize = 30;
const STOI_BETA_DB: f64 = -15.0;
const STOI_DYN_RANGE_DB: f64 = 40.0;

/// SI-SDR values are clamped to `±SI_SDR_CAP_DB`.
pub const SI_SDR_CAP_DB: f64 = 60.0;

fn bessel_i0(x: f64) -> f64 {
    let (mut sum, mut term, mut k) = (1.0, 1.0, 1.0);
    while term > 1e-17 * sum {
        term *= (x / (2.0 * k)).powi(2);
        sum += term;
        k += 1.0;
    }
    sum
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Rational polyphase resampling with a Kaiser-windowed sinc low-pass
/// (β = 5, half-length 10·max(up, down)), delay compensated.
pub fn resample(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to {
        return x.to_vec();
    }
    let g = gcd(from, to);
    let (up, down) = ((to / g) as usize, (from / g) as usize);
    let max_rate = up.max(down);
    let half = 10 * max_rate;
    let cutoff = 1.0 / max_rate as f64;
    let n_taps = 2 * half + 1;
    let mut h: Vec<f64> = (0..n_taps)
        .map(|i| {
            let m = i as f64 - half as f64;
            let sinc = if m == 0.0 {
                1.0
            } else {
                let a = std::f64::consts::PI * cutoff * m;
                a.sin() / a
            };
            let r = m / half as f64;
            cutoff * sinc * bessel_i0(5.0 * (1.0 - r * r).max(0.0).sqrt()) / bessel_i0(5.0)
        })
        .collect();
    let dc: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v *= up as f64 / dc);

    let out_len = (x.len() * up).div_ceil(down);
    (0..out_len)
        .map(|k| {
            // Upsampled position of output k, filter centred on it.
            let centre = k * down + half;
            let lo = centre.saturating_sub(n_taps - 1).div_ceil(up);
            let hi = (centre / up).min(x.len().saturating_sub(1));
            (lo..=hi).filter(|&n| n < x.len()).map(|n| x[n] * h[centre - n * up]).sum()
        })
        .collect()
}

fn hann_interior(len: usize) -> Vec<f64> {
    // Periodic-free Hann of len + 2 points with the zero endpoints dropped.
    (1..=len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (len + 1) as f64).cos())
        .collect()
}

fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hop = STOI_FRAME / 2;
    let w = hann_interior(STOI_FRAME);
    let starts: Vec<usize> = (0..=x.len().saturating_sub(STOI_FRAME)).step_by(hop).collect();
    if x.len() < STOI_FRAME {
        return (Vec::new(), Vec::new());
    }
    let frame = |s: &[f64], i: usize| -> Vec<f64> { w.iter().zip(&s[i..i + STOI_FRAME]).map(|(a, b)| a * b).collect() };
    let energy = |f: &[f64]| 20.0 * (f.iter().map(|v| v * v).sum::<f64>().sqrt() + f64::EPSILON).log10();
    let xf: Vec<Vec<f64>> = starts.iter().map(|&i| frame(x, i)).collect();
    let yf: Vec<Vec<f64>> = starts.iter().map(|&i| frame(y, i)).collect();
    let e: Vec<f64> = xf.iter().map(|f| energy(f)).collect();
    let top = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let keep: Vec<usize> = (0..e.len()).filter(|&i| top - STOI_DYN_RANGE_DB - e[i] < 0.0).collect();
    let ola = |frames: &[Vec<f64>]| {
        if keep.is_empty() {
            return Vec::new();
        }
        let mut out = vec![0.0; (keep.len() - 1) * hop + STOI_FRAME];
        for (j, &i) in keep.iter().enumerate() {
            for (o, v) in out[j * hop..j * hop + STOI_FRAME].iter_mut().zip(&frames[i]) {
                *o += v;
            }
        }
        out
    };
    (ola(&xf), ola(&yf))
}

/// One-third octave band energies `[band][frame]`.
fn third_octave(x: &[f64], obm: &[(usize, usize)]) -> Vec<Vec<f64>> {
    let hop = STOI_FRAME / 2;
    let w = hann_interior(STOI_FRAME);
    let fft = FftPlanner::new().plan_fft_forward(STOI_NFFT);
    // Frames start at 0, hop, ... while start < len - frame.
    let n_frames = if x.len() > STOI_FRAME { (x.len() - STOI_FRAME).div_ceil(hop) } else { 0 };
    let mut bands = vec![Vec::with_capacity(n_frames); STOI_BANDS];
    let mut buf = vec![Complex64::new(0.0, 0.0); STOI_NFFT];
    for f in 0..n_frames {
        buf.fill(Complex64::new(0.0, 0.0));
        for i in 0..STOI_FRAME {
            buf[i].re = w[i] * x[f * hop + i];
        }
        fft.process(&mut buf);
        for (band, &(lo, hi)) in bands.iter_mut().zip(obm) {
            band.push(buf[lo..hi].iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt());
        }
    }
    bands
}

fn band_bins() -> Vec<(usize, usize)> {
    let bins = STOI_NFFT / 2 + 1;
    let freq = |i: usize| i as f64 * STOI_FS as f64 / STOI_NFFT as f64;
    let nearest = |target: f64| {
        (0..bins)
            .min_by(|&a, &b| (freq(a) - target).powi(2).total_cmp(&(freq(b) - target).powi(2)))
            .expect("non-empty")
    };
    (0..STOI_BANDS)
        .map(|k| {
            let k = k as f64;
            (
                nearest(STOI_MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0)),
                nearest(STOI_MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0)),
            )
        })
        .collect()
}

fn check_pair(clean: &Waveform, processed: &Waveform) -> Result<()> {
    if clean.sample_rate() != processed.sample_rate() {
        return Err(Error::InvalidArgument(format!(
            "sample rates differ: {} vs {}",
            clean.sample_rate(),
            processed.sample_rate()
        )));
    }
    if clean.len() != processed.len() {
        return Err(Error::InvalidWaveform(format!(
            "lengths differ: {} vs {} samples",
            clean.len(),
            processed.len()
        )));
    }
    Ok(())
}

/// Short-time objective intelligibility: mean correlation of clipped,
/// normalized one-third-octave envelopes over 384 ms segments, computed
/// at 10 kHz after dropping frames more than 40 dB below the loudest.
pub fn stoi(clean: &Waveform, processed: &Waveform) -> Result<f64> {
    check_pair(clean, processed)?;
    let x = resample(clean.samples(), clean.sample_rate(), STOI_FS);
    let y = resample(processed.samples(), processed.sample_rate(), STOI_FS);
    let (x, y) = remove_silent_frames(&x, &y);
    let obm = band_bins();
    let (xb, yb) = (third_octave(&x, &obm), third_octave(&y, &obm));
    let frames = xb[0].len();
    if frames < STOI_SEGMENT {
        // Samples at 10 kHz: non-silent input vs. what one segment needs.
        return Err(Error::TooShort {
            len: x.len(),
            min: STOI_FRAME + STOI_SEGMENT * STOI_FRAME / 2,
        });
    }
    let clip = 10f64.powf(-STOI_BETA_DB / 20.0);
    let eps = f64::EPSILON;
    let mut total = 0.0;
    let segments = frames - STOI_SEGMENT + 1;
    for m in 0..segments {
        for j in 0..STOI_BANDS {
            let xs = &xb[j][m..m + STOI_SEGMENT];
            let ys = &yb[j][m..m + STOI_SEGMENT];
            let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let k = norm(xs) / (norm(ys) + eps);
            let yp: Vec<f64> = ys.iter().zip(xs).map(|(y, x)| (y * k).min(x * (1.0 + clip))).collect();
            let centred = |v: &[f64]| {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                let c: Vec<f64> = v.iter().map(|a| a - mean).collect();
                let n = norm(&c) + eps;
                c.into_iter().map(|a| a / n).collect::<Vec<f64>>()
            };
            total += centred(xs).iter().zip(centred(&yp)).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(total / (STOI_BANDS * segments) as f64)
}

/// Scale-invariant SDR in dB, clamped to `±SI_SDR_CAP_DB`.
pub fn si_sdr(clean: &Waveform, processed: &Waveform) -> Result<f64> {
    check_pair(clean, processed)?;
    let (s, e) = (clean.samples(), processed.samples());
    let ss: f64 = s.iter().map(|v| v * v).sum();
    if ss == 0.0 {
        return Err(Error::InvalidWaveform("SI-SDR reference is silent".into()));
    }
    let a = s.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() / ss;
    let target: f64 = a * a * ss;
    let residual: f64 = s.iter().zip(e).map(|(s, e)| (e - a * s).powi(2)).sum();
    let db = if residual == 0.0 {
        SI_SDR_CAP_DB
    } else if target == 0.0 {
        -SI_SDR_CAP_DB
    } else {
        10.0 * (target / residual).log10()
    };
    Ok(db.clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

/// Trainable scalars, skipping parameters whose name starts with any of
/// `frozen`.
pub fn count_params(params: &ParamStore, frozen: &[&str]) -> usize {
    params
        .iter()
        .filter(|p| p.trainable && !frozen.iter().any(|f| p.name.starts_with(f)))
        .map(|p| p.data.len())
        .sum()
}

/// Multiply-accumulates of one single-item forward pass over `frames`
/// frames, counting convolutions, transposed convolutions (on their input
/// grid), LSTM and linear maps. Normalization and pointwise work is free.
pub fn count_flops(cfg: &ModelConfig, kind: ModelKind, frames: usize) -> Result<u64> {
    cfg.validate()?;
    let f = cfg.freqs()?;
    let ch = cfg.channels;
    let (kt, kf) = cfg.kernel;
    // Causal padding grows the time axis by kt - 1 before the chomp.
    let t_conv = frames + kt - 1;
    let mut macs = 0usize;
    for i in 0..STAGES {
        let cin = if i == 0 { 1 } else { ch[i - 1] };
        macs += 2 * cin * ch[i] * kt * kf * t_conv * f[i + 1];
    }
    let h = cfg.lstm_hidden()?;
    macs += cfg.lstm_layers * frames * 4 * (h + h) * h;
    for j in 0..STAGES {
        let stage = STAGES - 1 - j;
        let cin = if j == 0 { 3 * ch[stage] } else { 2 * ch[stage] };
        let cout = if stage == 0 { 1 } else { ch[stage - 1] };
        macs += cin * cout * kt * kf * frames * f[stage + 1];
    }
    if kind.has_phase() {
        let (w, plane) = (cfg.phase_width, frames * cfg.freq_bins);
        macs += (w / 2 + 2 * (w / 2) + 2 * w) * plane;
        let (a, b) = (PHASE_KERNEL_A, PHASE_KERNEL_B);
        macs += cfg.phase_blocks * w * w * (a.0 * a.1 + b.0 * b.1) * plane;
    }
    Ok(macs as u64)
}

/// Monotonic time source in seconds.
pub trait Clock {
    fn now(&mut self) -> f64;
}

pub struct SystemClock(Instant);

impl Default for SystemClock {
    fn default() -> Self {
        Self(Instant::now())
    }
}

impl Clock for SystemClock {
    fn now(&mut self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median over `repeats` runs of `run`'s wall time divided by
/// `audio_secs`.
pub fn measure_rtf_with(
    clock: &mut impl Clock,
    repeats: usize,
    audio_secs: f64,
    mut run: impl FnMut() -> Result<()>,
) -> Result<f64> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be >= 1".into()));
    }
    if !(audio_secs > 0.0 && audio_secs.is_finite()) {
        return Err(Error::InvalidArgument(format!("audio duration {audio_secs} s")));
    }
    let mut ratios = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = clock.now();
        run()?;
        ratios.push((clock.now() - t0) / audio_secs);
    }
    Ok(median(ratios))
}

/// Real-time factor of waveform-to-waveform enhancement.
pub fn measure_rtf(model: &Sjen, cfg: &StftConfig, waveform: &Waveform, repeats: usize) -> Result<f64> {
    measure_rtf_with(&mut SystemClock::default(), repeats, waveform.duration_secs(), || {
        enhance(model, cfg, waveform).map(|_| ())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub system: String,
    pub snr_db: f64,
    pub stoi_percent: f64,
    pub si_sdr_db: f64,
    pub n_utterances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelStats {
    /// Giga multiply-accumulates per second of audio.
    pub flops_g: f64,
    pub params_m: f64,
    /// Left out of deterministic reports.
    pub rtf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub model: String,
    /// One row per SNR condition.
    pub rows: Vec<EvalRow>,
    /// Unprocessed mixtures, one row per SNR condition.
    pub baseline: Vec<EvalRow>,
    pub stats: Option<ModelStats>,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model: {}", self.model);
        let _ = writeln!(s, "{:<12} {:>8} {:>10} {:>11} {:>6}", "system", "snr_db", "stoi_%", "si_sdr_db", "n");
        for r in self.baseline.iter().chain(&self.rows) {
            let _ = writeln!(
                s,
                "{:<12} {:>8.1} {:>10.2} {:>11.2} {:>6}",
                r.system, r.snr_db, r.stoi_percent, r.si_sdr_db, r.n_utterances
            );
        }
        if let Some(st) = &self.stats {
            let rtf = st.rtf.map_or_else(|| "-".to_string(), |r| format!("{r:.4}"));
            let _ = writeln!(
                s,
                "FLOPs (G MAC/s audio) {:.4}  Param. (M) {:.4}  RTF {rtf}",
                st.flops_g, st.params_m
            );
        }
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in self.baseline.iter().chain(&self.rows) {
            w.serialize(r).map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

fn condition_rows(
    system: &str,
    records: &[LoadedRecord],
    conditions: &[f64],
    scores: &[(f64, f64)],
) -> Result<Vec<EvalRow>> {
    conditions
        .iter()
        .map(|&snr| {
            let picked: Vec<&(f64, f64)> = records
                .iter()
                .zip(scores)
                .filter(|(r, _)| r.row.snr_db == snr)
                .map(|(_, s)| s)
                .collect();
            if picked.is_empty() {
                return Err(Error::InvalidArgument(format!("no test records at {snr} dB SNR")));
            }
            let n = picked.len() as f64;
            Ok(EvalRow {
                system: system.into(),
                snr_db: snr,
                stoi_percent: (100.0 * picked.iter().map(|s| s.0).sum::<f64>() / n).clamp(0.0, 100.0),
                si_sdr_db: picked.iter().map(|s| s.1).sum::<f64>() / n,
                n_utterances: picked.len(),
            })
        })
        .collect()
}

/// Scores any waveform enhancer per SNR condition next to the unprocessed
/// mixtures.
pub fn evaluate_with(
    name: &str,
    records: &[LoadedRecord],
    conditions: &[f64],
    enhancer: impl Fn(&LoadedRecord) -> Result<Waveform>,
) -> Result<EvalReport> {
    if conditions.is_empty() {
        return Err(Error::InvalidArgument("no SNR conditions".into()));
    }
    let score = |clean: &Waveform, w: &Waveform| -> Result<(f64, f64)> { Ok((stoi(clean, w)?, si_sdr(clean, w)?)) };
    let mut processed = Vec::with_capacity(records.len());
    let mut unprocessed = Vec::with_capacity(records.len());
    for r in records {
        unprocessed.push(score(&r.clean, &r.mono)?);
        processed.push(score(&r.clean, &enhancer(r)?)?);
    }
    Ok(EvalReport {
        model: name.into(),
        rows: condition_rows(name, records, conditions, &processed)?,
        baseline: condition_rows("unprocessed", records, conditions, &unprocessed)?,
        stats: None,
    })
}

/// Enhances every record with `model` and scores it per condition. The
/// report carries FLOPs and parameter counts but no timing.
pub fn evaluate(model: &Sjen, cfg: &StftConfig, records: &[LoadedRecord], conditions: &[f64]) -> Result<EvalReport> {
    let mut report = evaluate_with(model.kind().as_str(), records, conditions, |r| enhance(model, cfg, &r.mono))?;
    let sr = records.first().map_or(16_000, |r| r.clean.sample_rate());
    report.stats = Some(model_stats(model, cfg, sr, None)?);
    Ok(report)
}

/// FLOPs per second of audio at `sample_rate` and parameter count.
pub fn model_stats(model: &Sjen, cfg: &StftConfig, sample_rate: u32, rtf: Option<f64>) -> Result<ModelStats> {
    let frames = cfg.frames_for(sample_rate as usize);
    Ok(ModelStats {
        flops_g: count_flops(model.config(), model.kind(), frames)? as f64 / 1e9,
        params_m: count_params(&model.params, &[]) as f64 / 1e6,
        rtf,
    })
}
