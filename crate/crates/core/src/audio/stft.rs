use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};

/// Analysis/synthesis window shape. All windows are periodic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Rect,
    Hann,
    /// Square root of the periodic Hann window; its square overlap-adds to a
    /// constant at 50% overlap.
    SqrtHann,
}

impl WindowKind {
    pub fn weights(self, len: usize) -> Vec<f64> {
        (0..len)
            .map(|n| {
                let hann = 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos();
                match self {
                    WindowKind::Rect => 1.0,
                    WindowKind::Hann => hann,
                    WindowKind::SqrtHann => hann.sqrt(),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawStftConfig {
    window_len: usize,
    hop: usize,
    fft_len: usize,
    window: WindowKind,
}

/// Frame geometry and window of the STFT. Construction checks that the
/// squared window overlap-adds to a constant at the chosen hop, so every
/// valid config can be inverted by [`istft`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawStftConfig", into = "RawStftConfig")]
pub struct StftConfig {
    window_len: usize,
    hop: usize,
    fft_len: usize,
    kind: WindowKind,
    window: Vec<f64>,
    cola_gain: f64,
}

impl TryFrom<RawStftConfig> for StftConfig {
    type Error = Error;

    fn try_from(raw: RawStftConfig) -> Result<Self> {
        StftConfig::new(raw.window_len, raw.hop, raw.fft_len, raw.window)
    }
}

impl From<StftConfig> for RawStftConfig {
    fn from(cfg: StftConfig) -> Self {
        RawStftConfig {
            window_len: cfg.window_len,
            hop: cfg.hop,
            fft_len: cfg.fft_len,
            window: cfg.kind,
        }
    }
}

impl Default for StftConfig {
    /// 20 ms root-Hann frames with 10 ms hop at 16 kHz (161 bins).
    fn default() -> Self {
        StftConfig::new(320, 160, 320, WindowKind::SqrtHann).expect("default STFT config is COLA")
    }
}

const COLA_TOL: f64 = 1e-10;

impl StftConfig {
    pub fn new(window_len: usize, hop: usize, fft_len: usize, kind: WindowKind) -> Result<Self> {
        if hop == 0 || hop > window_len || window_len > fft_len {
            return Err(Error::InvalidStftConfig(format!(
                "need 0 < hop <= window_len <= fft_len, got hop={hop} window_len={window_len} fft_len={fft_len}"
            )));
        }
        let window = kind.weights(window_len);
        let profile = cola_profile(&window, hop);
        let max = profile.iter().cloned().fold(f64::MIN, f64::max);
        let min = profile.iter().cloned().fold(f64::MAX, f64::min);
        if max <= 0.0 || max - min > COLA_TOL * max.max(1.0) {
            return Err(Error::InvalidStftConfig(format!(
                "{kind:?} window of {window_len} samples is not constant-overlap-add at hop {hop} \
                 (squared-window sum ranges over [{min}, {max}])"
            )));
        }
        Ok(Self {
            window_len,
            hop,
            fft_len,
            kind,
            window,
            cola_gain: max,
        })
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn fft_len(&self) -> usize {
        self.fft_len
    }

    pub fn kind(&self) -> WindowKind {
        self.kind
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Number of frequency bins, `fft_len / 2 + 1`.
    pub fn bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    /// Frames produced for a signal of `len` samples (0 if shorter than a window).
    pub fn frames_for(&self, len: usize) -> usize {
        if len < self.window_len {
            0
        } else {
            1 + (len - self.window_len) / self.hop
        }
    }

    /// Length of the overlap-add synthesis output for `frames` frames.
    pub fn synthesis_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.window_len
        }
    }

    /// Squared-window overlap sum for each phase `0..hop`.
    pub fn cola_profile(&self) -> Vec<f64> {
        cola_profile(&self.window, self.hop)
    }

    /// The constant value of the squared-window overlap sum.
    pub fn cola_gain(&self) -> f64 {
        self.cola_gain
    }

    /// Sample range of a `frames`-frame synthesis in which every sample is
    /// covered by the full set of overlapping windows.
    pub fn cola_interior(&self, frames: usize) -> std::ops::Range<usize> {
        let start = self.window_len - self.hop;
        let end = frames * self.hop;
        start..end.max(start)
    }
}

fn cola_profile(window: &[f64], hop: usize) -> Vec<f64> {
    (0..hop)
        .map(|n| window.iter().skip(n).step_by(hop).map(|w| w * w).sum())
        .collect()
}

/// Magnitude/phase decomposition of a complex STFT.
///
/// `magnitude` is a row-major `frames x bins` grid; `phase` stores the
/// `(cos θ, sin θ)` unit vector of each bin interleaved, `frames x bins x 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    frames: usize,
    bins: usize,
    magnitude: Vec<f64>,
    phase: Vec<f64>,
    config: StftConfig,
    sample_rate: u32,
}

const UNIT_TOL: f64 = 1e-6;

impl Spectrogram {
    /// Builds a spectrogram from planes, checking non-negativity and the
    /// unit-norm phase invariant.
    pub fn from_parts(
        frames: usize,
        magnitude: Vec<f64>,
        phase: Vec<f64>,
        config: StftConfig,
        sample_rate: u32,
    ) -> Result<Self> {
        let bins = config.bins();
        if magnitude.len() != frames * bins {
            return Err(Error::shape(
                "magnitude",
                format!("expected {frames}x{bins} values, got {}", magnitude.len()),
            ));
        }
        if phase.len() != frames * bins * 2 {
            return Err(Error::shape(
                "phase",
                format!("expected {frames}x{bins}x2 values, got {}", phase.len()),
            ));
        }
        if let Some(i) = magnitude.iter().position(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "magnitude bin {i} is negative or not finite"
            )));
        }
        for (i, p) in phase.chunks_exact(2).enumerate() {
            let norm2 = p[0] * p[0] + p[1] * p[1];
            if !((norm2 - 1.0).abs() <= UNIT_TOL) {
                return Err(Error::InvalidArgument(format!(
                    "phase bin {i} is not a unit vector (|p|² = {norm2})"
                )));
            }
        }
        Ok(Self {
            frames,
            bins,
            magnitude,
            phase,
            config,
            sample_rate,
        })
    }

    fn from_complex(
        frames: usize,
        spectrum: &[Complex64],
        config: StftConfig,
        sample_rate: u32,
    ) -> Self {
        let mut magnitude = Vec::with_capacity(spectrum.len());
        let mut phase = Vec::with_capacity(spectrum.len() * 2);
        for c in spectrum {
            let m = c.norm();
            magnitude.push(m);
            if m > 0.0 {
                phase.push(c.re / m);
                phase.push(c.im / m);
            } else {
                phase.push(1.0);
                phase.push(0.0);
            }
        }
        Self {
            frames,
            bins: config.bins(),
            magnitude,
            phase,
            config,
            sample_rate,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn magnitude(&self) -> &[f64] {
        &self.magnitude
    }

    pub fn phase(&self) -> &[f64] {
        &self.phase
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn mag_at(&self, t: usize, f: usize) -> f64 {
        self.magnitude[t * self.bins + f]
    }

    pub fn phase_at(&self, t: usize, f: usize) -> (f64, f64) {
        let i = 2 * (t * self.bins + f);
        (self.phase[i], self.phase[i + 1])
    }

    /// Complex value of every bin, row-major.
    pub fn to_complex(&self) -> Vec<Complex64> {
        self.magnitude
            .iter()
            .zip(self.phase.chunks_exact(2))
            .map(|(m, p)| Complex64::new(m * p[0], m * p[1]))
            .collect()
    }
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    let mut planner = FftPlanner::new();
    if inverse {
        planner.plan_fft_inverse(len)
    } else {
        planner.plan_fft_forward(len)
    }
}

/// Windowed DFT of every full frame; analysis starts at sample 0 with no
/// centre padding.
pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    let x = w.samples();
    if x.len() < cfg.window_len {
        return Err(Error::TooShort {
            len: x.len(),
            min: cfg.window_len,
        });
    }
    let frames = cfg.frames_for(x.len());
    let bins = cfg.bins();
    let fft = plan(cfg.fft_len, false);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_len];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut out = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        let start = t * cfg.hop;
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for (n, (s, wv)) in x[start..start + cfg.window_len]
            .iter()
            .zip(&cfg.window)
            .enumerate()
        {
            buf[n].re = s * wv;
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        out.extend_from_slice(&buf[..bins]);
    }
    Ok(Spectrogram::from_complex(
        frames,
        &out,
        cfg.clone(),
        w.sample_rate(),
    ))
}

/// Weighted overlap-add inverse of [`stft`].
pub fn istft(s: &Spectrogram) -> Result<Waveform> {
    let cfg = &s.config;
    let n = cfg.fft_len;
    let out_len = cfg.synthesis_len(s.frames).max(1);
    let mut out = vec![0.0; out_len];
    let ifft = plan(n, true);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    let spectrum = s.to_complex();
    let scale = 1.0 / (n as f64 * cfg.cola_gain);
    for t in 0..s.frames {
        let row = &spectrum[t * s.bins..(t + 1) * s.bins];
        for (k, c) in row.iter().enumerate() {
            buf[k] = *c;
        }
        // Hermitian mirror for the negative frequencies.
        for k in s.bins..n {
            buf[k] = row[n - k].conj();
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let start = t * cfg.hop;
        for (i, wv) in cfg.window.iter().enumerate() {
            out[start + i] += buf[i].re * wv * scale;
        }
    }
    Waveform::new(out, s.sample_rate)
}
