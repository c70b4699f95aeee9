use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sjen::audio::{istft, stft, Waveform};
use sjen::datasim::synth::speech_like;
use sjen::losses::{reconstruction_loss, LossWeights};
use sjen::metrics::{count_flops, si_sdr, stoi};
use sjen::model::{ModelKind, Preset};
use sjen::trainer::{pad_planes, Planes};

fn noise(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let n: f64 = b.iter().map(|y| y * y).sum();
    (d / n).sqrt()
}

fn planes(seed: u64, frames: usize, bins: usize) -> Planes {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = frames * bins;
    let a: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    Planes {
        frames,
        bins,
        mag: (0..n).map(|_| rng.random_range(0.0..2.0)).collect(),
        phase: a.iter().map(|v| v.cos()).chain(a.iter().map(|v| v.sin())).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stft_round_trip_on_interior(seed in any::<u64>(), len in 400usize..4000, p in 0usize..3) {
        let cfg = Preset::ALL[p].stft();
        prop_assume!(len >= cfg.window_len() + cfg.hop());
        let w = Waveform::new(noise(seed, len), 16000).unwrap();
        let s = stft(&w, &cfg).unwrap();
        let y = istft(&s).unwrap();
        let r = cfg.cola_interior(s.frames());
        prop_assert!(rel_l2(&y.samples()[r.clone()], &w.samples()[r]) <= 1e-6);
    }

    #[test]
    fn si_sdr_ignores_positive_gain(seed in any::<u64>(), gain in 0.01f64..100.0) {
        let x = Waveform::new(noise(seed, 800), 16000).unwrap();
        let y = Waveform::new(
            x.samples().iter().zip(noise(seed ^ 1, 800)).map(|(a, b)| a + 0.4 * b).collect(),
            16000,
        )
        .unwrap();
        let a = si_sdr(&x, &y).unwrap();
        let b = si_sdr(&x, &y.scaled(gain).unwrap()).unwrap();
        prop_assert!((a - b).abs() <= 1e-9);
    }

    #[test]
    fn flops_are_affine_in_frames(t in 1usize..200, p in 0usize..3, k in 0usize..2) {
        let kind = [ModelKind::Teacher, ModelKind::Student][k];
        let cfg = Preset::ALL[p].model();
        let c = |n| count_flops(&cfg, kind, n).unwrap();
        prop_assert_eq!(c(2 * t) - c(t), c(3 * t) - c(2 * t));
    }

    #[test]
    fn padding_never_changes_an_items_loss(l1 in 1usize..12, l2 in 1usize..12, seed in 0u64..1000) {
        let w = LossWeights::default();
        let (ta, tb) = (planes(seed, l1, 3), planes(seed + 1, l2, 3));
        let (ea, eb) = (planes(seed + 2, l1, 3), planes(seed + 3, l2, 3));
        let loss = |t: &[&Planes], e: &[&Planes]| {
            let (t, e) = (pad_planes(t, 0).unwrap(), pad_planes(e, 0).unwrap());
            reconstruction_loss(&e.mag, &t.mag, &e.phase, &t.phase, Some(&t.lengths), w.alpha, w.mag_loss)
                .unwrap()
                .item()
        };
        let both = loss(&[&ta, &tb], &[&ea, &eb]);
        let solo = 0.5 * (loss(&[&ta], &[&ea]) + loss(&[&tb], &[&eb]));
        prop_assert!((both - solo).abs() <= 1e-12 * (1.0 + solo.abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn stoi_ignores_processed_gain(seed in any::<u64>(), db in -20.0f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Waveform::new(speech_like(&mut rng, 12000, 16000), 16000).unwrap();
        let y = Waveform::new(
            x.samples().iter().zip(noise(seed, 12000)).map(|(a, b)| a + 0.2 * b).collect(),
            16000,
        )
        .unwrap();
        let a = stoi(&x, &y).unwrap();
        let b = stoi(&x, &y.scaled(10f64.powf(db / 20.0)).unwrap()).unwrap();
        prop_assert!((a - b).abs() <= 1e-6);
    }
}
