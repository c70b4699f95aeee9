//! Seeded synthetic stand-ins for speech, noise, and binaural impulse
//! responses.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Harmonic tone complex with a gliding pitch, vibrato, three formant
/// bumps, and syllable-rate amplitude modulation.
pub fn speech_like(rng: &mut impl Rng, len: usize, sample_rate: u32) -> Vec<f64> {
    let sr = sample_rate as f64;
    let f0_start: f64 = rng.random_range(90.0..250.0);
    let f0_end = f0_start * rng.random_range(0.8..1.25);
    let vib_rate: f64 = rng.random_range(4.0..7.0);
    let vib_depth: f64 = rng.random_range(0.005..0.03);
    let formants = [
        (rng.random_range(300.0..900.0), 120.0),
        (rng.random_range(900.0..2500.0), 200.0),
        (rng.random_range(2500.0..3500.0), 300.0),
    ];
    let syl_rate: f64 = rng.random_range(3.0..6.0);
    let syl_phase: f64 = rng.random_range(0.0..2.0 * PI);
    let top = (0.45 * sr).min(5000.0);
    let n_harm = ((top / f0_start.max(f0_end)) as usize).max(1);
    let gains: Vec<f64> = (1..=n_harm)
        .map(|k| {
            let f = k as f64 * f0_start;
            let env: f64 = formants
                .iter()
                .map(|&(c, bw): &(f64, f64)| (-0.5 * ((f - c) / bw).powi(2)).exp())
                .sum();
            (0.2 + env) / k as f64
        })
        .collect();
    let phases: Vec<f64> = (0..n_harm).map(|_| rng.random_range(0.0..2.0 * PI)).collect();

    let mut out = Vec::with_capacity(len);
    let mut theta = 0.0;
    for n in 0..len {
        let tt = n as f64 / sr;
        let frac = if len > 1 { n as f64 / (len - 1) as f64 } else { 0.0 };
        let f0 = (f0_start + (f0_end - f0_start) * frac) * (1.0 + vib_depth * (2.0 * PI * vib_rate * tt).sin());
        theta += 2.0 * PI * f0 / sr;
        let mut s = 0.0;
        for (k, (g, p)) in gains.iter().zip(&phases).enumerate() {
            if (k + 1) as f64 * f0 < 0.5 * sr {
                s += g * ((k + 1) as f64 * theta + p).sin();
            }
        }
        let am = 0.55 + 0.45 * (2.0 * PI * syl_rate * tt + syl_phase).sin();
        out.push(s * am);
    }
    out
}

/// Spectral colour of a synthetic noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseColor {
    White,
    Pink,
    Brown,
    Violet,
    /// Two-pole resonance at a random centre frequency.
    Band,
}

impl NoiseColor {
    pub const ALL: [NoiseColor; 5] = [
        NoiseColor::White,
        NoiseColor::Pink,
        NoiseColor::Brown,
        NoiseColor::Violet,
        NoiseColor::Band,
    ];
}

pub fn colored_noise(rng: &mut impl Rng, len: usize, color: NoiseColor, sample_rate: u32) -> Vec<f64> {
    let white: Vec<f64> = (0..len + 1).map(|_| rng.sample(StandardNormal)).collect();
    match color {
        NoiseColor::White => white[..len].to_vec(),
        NoiseColor::Pink => {
            // Paul Kellet's economy pinking filter.
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            white[..len]
                .iter()
                .map(|&w| {
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        NoiseColor::Brown => {
            let mut y = 0.0;
            white[..len]
                .iter()
                .map(|&w| {
                    y = 0.98 * y + w;
                    y
                })
                .collect()
        }
        NoiseColor::Violet => white.windows(2).map(|w| w[1] - w[0]).collect(),
        NoiseColor::Band => {
            let fc: f64 = rng.random_range(200.0..(0.4 * sample_rate as f64).min(4000.0));
            let r = 0.97;
            let a1 = 2.0 * r * (2.0 * PI * fc / sample_rate as f64).cos();
            let a2 = -r * r;
            let (mut y1, mut y2) = (0.0, 0.0);
            white[..len]
                .iter()
                .map(|&w| {
                    let y = w + a1 * y1 + a2 * y2;
                    y2 = y1;
                    y1 = y;
                    y
                })
                .collect()
        }
    }
}

/// Left/right impulse responses of one synthetic source direction.
#[derive(Debug, Clone, PartialEq)]
pub struct BinauralIr {
    pub azimuth_deg: f64,
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

/// Direct path with interaural time and level differences, followed by
/// sparse exponentially decaying reflections.
pub fn binaural_ir(rng: &mut impl Rng, len: usize, sample_rate: u32) -> BinauralIr {
    let len = len.max(1);
    let az: f64 = rng.random_range(-90.0..90.0);
    let s = az.to_radians().sin();
    let itd = (0.00066 * s * sample_rate as f64).round() as isize;
    let ild_db = 6.0 * s;
    let base: usize = rng.random_range(0..4.min(len));
    let mut left = vec![0.0; len];
    let mut right = vec![0.0; len];
    // Positive azimuth: source on the right, so the right ear leads.
    let dl = (base as isize + itd.max(0)) as usize;
    let dr = (base as isize + (-itd).max(0)) as usize;
    let gl = 10f64.powf(-ild_db.max(0.0) / 20.0);
    let gr = 10f64.powf(ild_db.min(0.0) / 20.0);
    if dl < len {
        left[dl] = gl;
    }
    if dr < len {
        right[dr] = gr;
    }
    let tau = len as f64 / rng.random_range(3.0..6.0);
    let reflections = rng.random_range(4..=12);
    for _ in 0..reflections {
        for h in [&mut left, &mut right] {
            let d = rng.random_range(0..len);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            h[d] += sign * 0.5 * (-(d as f64) / tau).exp() * rng.random_range(0.2..1.0);
        }
    }
    BinauralIr {
        azimuth_deg: az,
        left,
        right,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generators_are_seeded_and_finite() {
        let gen = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = speech_like(&mut rng, 1600, 16000);
            let n: Vec<Vec<f64>> = NoiseColor::ALL.iter().map(|&c| colored_noise(&mut rng, 1600, c, 16000)).collect();
            let h = binaural_ir(&mut rng, 128, 16000);
            (s, n, h)
        };
        let a = gen(3);
        assert_eq!(a, gen(3));
        assert_ne!(a.0, gen(4).0);
        assert!(a.0.iter().all(|v| v.is_finite()) && a.0.iter().any(|&v| v != 0.0));
        for n in &a.1 {
            assert_eq!(n.len(), 1600);
            assert!(n.iter().all(|v| v.is_finite()));
        }
        assert_eq!(a.2.left.len(), 128);
    }
}
