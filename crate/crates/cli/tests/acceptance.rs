//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

#[path = "../../core/tests/common/grad_suite.rs"]
mod grad_suite;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sjen::audio::{istft, stft, Waveform};
use sjen::datasim::{
    colored_noise, draw_spec, load_records, mix_binaural, mix_mono, scale_noise, simulate, snr_db, speech_like,
    synth_corpus, NoiseColor, SimConfig, Split, MANIFEST_NAME,
};
use sjen::losses::{kd_loss, kd_total, reconstruction_loss, total_loss, KdForm, MagLoss};
use sjen::metrics::{count_flops, count_params, si_sdr, stoi};
use sjen::model::{enhance, EncoderTaps, ModelKind, Preset, Sjen, MIN_FRAMES};
use sjen::nn::{macs, BnMode, Tensor};
use sjen::trainer::{
    mean_teacher_distance, prepare_examples, train_bad_student, train_student, train_teacher, TrainConfig,
    TrainExample, TrainOutcome,
};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut n = 0;
    for seed in 1..=3 {
        for c in grad_suite::all_checks(seed).map_err(e2s)? {
            n += 1;
            if c.worst > worst.0 || worst.1.is_empty() {
                worst = (c.worst, format!("{} at {} (seed {seed})", c.name, c.worst_tensor));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        worst.0 <= grad_suite::TOLERANCE && secs <= 120.0,
        format!("{n} checks over 3 seeds, worst relative error {:.2e} ({}), {secs:.1} s", worst.0, worst.1),
    )
}

fn stft_round_trip() -> Outcome {
    let mut worst_cola = 0.0f64;
    for p in Preset::ALL {
        let cfg = p.stft();
        for v in cfg.cola_profile() {
            worst_cola = worst_cola.max((v - cfg.cola_gain()).abs());
        }
    }
    let cfg = Preset::PaperShape.stft();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x: Vec<f64> = (0..16_000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Waveform::new(x, 16_000).map_err(e2s)?;
        let s = stft(&w, &cfg).map_err(e2s)?;
        let y = istft(&s).map_err(e2s)?;
        let r = cfg.cola_interior(s.frames());
        let (a, b) = (&y.samples()[r.clone()], &w.samples()[r]);
        let d: f64 = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum();
        let n: f64 = b.iter().map(|q| q * q).sum();
        worst = worst.max((d / n).sqrt());
    }
    ensure(
        worst <= 1e-6 && worst_cola <= 1e-10,
        format!("worst round-trip error {worst:.2e} on 100 signals, COLA deviation {worst_cola:.2e}"),
    )
}

fn mixtures() -> Outcome {
    let cfg = SimConfig::default();
    let (mut snr_err, mut rms_err) = (0.0f64, 0.0f64);
    let mut delta_ok = true;
    let delta = [1.0];
    for i in 0..1000 {
        let spec = draw_spec(&cfg, Split::Train, 7, i);
        let r = simulate(&cfg, &spec).map_err(e2s)?;
        snr_err = snr_err.max((snr_db(&r.clean, &r.noise) - spec.snr_db).abs());
        let target = 10f64.powf(spec.epsilon_db / 20.0);
        rms_err = rms_err.max((r.clean.rms() - target).abs() / target);
        let mono = mix_mono(&r.clean, &r.noise).map_err(e2s)?;
        let (l, rr) = mix_binaural(&r.clean, &r.noise, &delta, &delta, &delta, &delta).map_err(e2s)?;
        let bits = |w: &Waveform| w.samples().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        delta_ok &= bits(&l) == bits(&mono) && bits(&rr) == bits(&mono) && bits(&mono) == bits(&r.mono);
    }
    ensure(
        snr_err <= 0.01 && rms_err <= 1e-12 && delta_ok,
        format!("1000 specs: SNR error {snr_err:.2e} dB, RMS error {rms_err:.2e}, delta mix bitwise {delta_ok}"),
    )
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shapes = [[2, 4, 6, 9], [2, 8, 6, 5], [2, 8, 6, 3], [2, 16, 6, 2], [2, 16, 6, 1]];
    let taps = EncoderTaps {
        left: shapes.iter().map(|s| random_tensor(&mut rng, s, -1.0, 1.0)).collect(),
        right: shapes.iter().map(|s| random_tensor(&mut rng, s, -1.0, 1.0)).collect(),
    };
    let kd = kd_loss(&taps, &taps, None, KdForm::Literal).map_err(e2s)?.item();

    let (b, tt, f) = (2, 7, 9);
    let m = random_tensor(&mut rng, &[b, 1, tt, f], 0.0, 3.0);
    let angles: Vec<f64> = (0..b * tt * f).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut phase = vec![0.0; b * 2 * tt * f];
    for bb in 0..b {
        for i in 0..tt * f {
            let a = angles[bb * tt * f + i];
            phase[(bb * 2) * tt * f + i] = a.cos();
            phase[(bb * 2 + 1) * tt * f + i] = a.sin();
        }
    }
    let p = Tensor::new(vec![b, 2, tt, f], phase).unwrap();
    let rl = reconstruction_loss(&m, &m, &p, &p, None, 1.0, MagLoss::L2Norm).map_err(e2s)?.item();
    let mean_m = m.data().iter().sum::<f64>() / m.numel() as f64;
    let rl_err = (rl + mean_m).abs();

    let ratio = kd_total(&Tensor::scalar(2.0), &Tensor::scalar(4.0), 1e-8).map_err(e2s)?.item();
    let total = total_loss(&Tensor::scalar(1.0), &Tensor::scalar(0.5), 0.1).map_err(e2s)?.item();
    ensure(
        kd == 0.0 && rl_err <= 1e-12 && (ratio - 0.5).abs() <= 1e-12 && (total - 1.05).abs() <= 1e-12,
        format!("kd(x, x) = {kd}, reconstruction + mean(M) = {rl_err:.1e}, kd_total = {ratio}, total = {total}"),
    )
}

fn corpus(dir: &Path, split: Split, n: usize, secs: f64, seed: u64) -> Result<Vec<TrainExample>, String> {
    let cfg = SimConfig {
        duration_secs: secs,
        ..Default::default()
    };
    let sub = dir.join(split.as_str());
    synth_corpus(&cfg, &sub, split, n, seed).map_err(e2s)?;
    let recs = load_records(&sub.join(MANIFEST_NAME)).map_err(e2s)?;
    prepare_examples(&recs, &Preset::Tiny.stft()).map_err(e2s)
}

fn reduction(o: &TrainOutcome) -> f64 {
    let first = o.steps.first().map_or(f64::NAN, |s| s.l_total);
    let last = o.steps.last().map_or(f64::NAN, |s| s.l_total);
    1.0 - last / first
}

fn toy_training() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(e2s)?;
    let sim = SimConfig {
        duration_secs: 0.125,
        ..Default::default()
    };
    synth_corpus(&sim, dir.path(), Split::Train, 8, 1).map_err(e2s)?;
    let recs = load_records(&dir.path().join(MANIFEST_NAME)).map_err(e2s)?;
    let p = Preset::Tiny;
    let ex = prepare_examples(&recs, &p.stft()).map_err(e2s)?;
    let cfg = TrainConfig {
        learning_rate: 0.003,
        batch_size: 8,
        epochs: 200,
        seed: 1,
        ..Default::default()
    };
    let t = train_teacher(&ex, &p.model(), &cfg).map_err(e2s)?;
    let b = train_bad_student(&ex, &p.model(), &cfg).map_err(e2s)?;
    let s = train_student(&ex, &p.model(), &cfg, &t.model, &b.model).map_err(e2s)?;
    let mut gain = 0.0;
    for r in &recs {
        let e = enhance(&s.model, &p.stft(), &r.mono).map_err(e2s)?;
        gain += si_sdr(&r.clean, &e).map_err(e2s)? - si_sdr(&r.clean, &r.mono).map_err(e2s)?;
    }
    gain /= recs.len() as f64;
    let red = [reduction(&t), reduction(&b), reduction(&s)];
    let secs = start.elapsed().as_secs_f64();
    ensure(
        red.iter().all(|&r| r >= 0.9) && s.steps.len() <= 200 && gain >= 3.0 && secs <= 600.0,
        format!(
            "reductions teacher {:.1}%, bad student {:.1}%, student {:.1}% in {} steps; student SI-SDR gain {gain:.2} dB; {secs:.0} s",
            100.0 * red[0],
            100.0 * red[1],
            100.0 * red[2],
            s.steps.len()
        ),
    )
}

fn distillation_helps() -> Outcome {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let train = corpus(dir.path(), Split::Train, 8, 0.0625, 1)?;
    let test = corpus(dir.path(), Split::Test, 16, 0.0625, 1)?;
    let m = Preset::Tiny.model();
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..5 {
        let cfg = TrainConfig {
            learning_rate: 0.003,
            batch_size: 8,
            epochs: 100,
            seed,
            ..Default::default()
        };
        let t = train_teacher(&train, &m, &cfg).map_err(e2s)?.model;
        let b = train_bad_student(&train, &m, &cfg).map_err(e2s)?.model;
        let s = train_student(&train, &m, &cfg, &t, &b).map_err(e2s)?.model;
        let ds = mean_teacher_distance(&s, &t, &test, KdForm::Literal).map_err(e2s)?;
        let db = mean_teacher_distance(&b, &t, &test, KdForm::Literal).map_err(e2s)?;
        wins += usize::from(ds < db);
        pairs.push(format!("{ds:.0}/{db:.0}"));
    }
    ensure(
        wins >= 4,
        format!("student closer to teacher on {wins}/5 seeds (student/bad: {})", pairs.join(", ")),
    )
}

fn noisy_at(clean: &Waveform, noise: &Waveform, snr: f64) -> Result<Waveform, String> {
    let v = scale_noise(noise, clean, snr).map_err(e2s)?;
    mix_mono(clean, &v).map_err(e2s)
}

/// Trainable parameter count of the tiny student, layer by layer.
fn tiny_hand_count() -> usize {
    let conv = |cin: usize, cout: usize, kt: usize, kf: usize| cin * cout * kt * kf + cout;
    let bn = |c: usize| 2 * c;
    let ch = [4, 8, 8, 16, 16];
    let mut encoder = 0;
    let mut cin = 1;
    for &c in &ch {
        encoder += conv(cin, c, 2, 3) + bn(c);
        cin = c;
    }
    // Last stage is 16 channels on 1 bin; both channels feed the LSTM.
    let h = 2 * 16;
    let lstm = 2 * (4 * h * (h + h) + 4 * h);
    let decoder = conv(48, 16, 2, 3) + bn(16)
        + conv(32, 8, 2, 3) + bn(8)
        + conv(16, 8, 2, 3) + bn(8)
        + conv(16, 4, 2, 3) + bn(4)
        + conv(8, 1, 2, 3);
    let w = 4;
    let phase = conv(1, w / 2, 1, 1) + conv(2, w / 2, 1, 1) + 3 * (conv(w, w, 5, 3) + conv(w, w, 25, 1)) + conv(w, 2, 1, 1) + 2 * 2;
    2 * encoder + lstm + decoder + phase
}

fn metrics_sanity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Waveform::new(speech_like(&mut rng, 16_000, 16_000), 16_000).map_err(e2s)?;
    let self_stoi = stoi(&x, &x).map_err(e2s)?;

    let mut monotone = 0;
    let mut broken = Vec::new();
    for trial in 0..20 {
        let clean = Waveform::new(speech_like(&mut rng, 16_000, 16_000), 16_000).map_err(e2s)?;
        let color = NoiseColor::ALL[trial % NoiseColor::ALL.len()];
        let noise = Waveform::new(colored_noise(&mut rng, clean.len(), color, 16_000), 16_000).map_err(e2s)?;
        let mut scores = Vec::new();
        for snr in [-10.0, 0.0, 10.0] {
            scores.push(stoi(&clean, &noisy_at(&clean, &noise, snr)?).map_err(e2s)?);
        }
        if scores[0] < scores[1] && scores[1] < scores[2] {
            monotone += 1;
        } else {
            broken.push(format!("{color:?} {scores:.3?}"));
        }
    }

    let s: Vec<f64> = (0..4000).map(|n| (0.01 * n as f64).sin() + 0.3).collect();
    let r0: Vec<f64> = (0..4000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ss: f64 = s.iter().map(|v| v * v).sum();
    let proj = r0.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / ss;
    let r: Vec<f64> = r0.iter().zip(&s).map(|(a, b)| a - proj * b).collect();
    let rr: f64 = r.iter().map(|v| v * v).sum();
    let k = (ss / 100.0 / rr).sqrt();
    let est: Vec<f64> = s.iter().zip(&r).map(|(a, b)| a + k * b).collect();
    let sdr = si_sdr(
        &Waveform::new(s, 16_000).map_err(e2s)?,
        &Waveform::new(est, 16_000).map_err(e2s)?,
    )
    .map_err(e2s)?;

    let mut flops_ok = true;
    for p in Preset::ALL {
        let cfg = p.model();
        for kind in [ModelKind::Teacher, ModelKind::Student] {
            let m = Sjen::new(kind, &cfg, 0).map_err(e2s)?;
            let frames = MIN_FRAMES;
            let x = Tensor::zeros(vec![1, 1, frames, cfg.freq_bins]);
            let mut ph = vec![0.0; 2 * frames * cfg.freq_bins];
            ph[..frames * cfg.freq_bins].fill(1.0);
            let ph = Tensor::new(vec![1, 2, frames, cfg.freq_bins], ph).unwrap();
            let bind = m.bind(false, BnMode::Eval);
            let (res, counted) = macs::count(|| {
                if kind.has_phase() {
                    m.arch().sjen(&bind, &x, &ph).map(|_| ())
                } else {
                    m.arch().magnitude(&bind, &x, &x).map(|_| ())
                }
            });
            res.map_err(e2s)?;
            flops_ok &= count_flops(&cfg, kind, frames).map_err(e2s)? == counted;
        }
    }

    let tiny = Sjen::new(ModelKind::Student, &Preset::Tiny.model(), 0).map_err(e2s)?;
    let (counted, hand) = (count_params(&tiny.params, &[]), tiny_hand_count());
    ensure(
        self_stoi >= 0.999 && monotone == 20 && (sdr - 20.0).abs() <= 0.01 && flops_ok && counted == hand,
        format!(
            "stoi(x, x) = {self_stoi:.5}, monotone {monotone}/20 {broken:?}, orthogonal SI-SDR {sdr:.4} dB, flops match counter {flops_ok}, tiny params {counted} vs hand {hand}"
        ),
    )
}

fn sjen(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_sjen")).args(args).output().map_err(e2s)?;
    if !out.status.success() {
        return Err(format!("sjen {args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn pipeline(dir: &Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let config = dir.join("run.toml");
    std::fs::write(
        &config,
        "seed = 5\npreset = \"tiny\"\n\n[sim]\nduration_secs = 0.6\n\n[corpus]\nn_train = 4\nn_test = 4\n\n[train]\nepochs = 1\nbatch_size = 2\n",
    )
    .map_err(e2s)?;
    let c = config.to_str().unwrap();
    let ck = |n: &str| dir.join("checkpoints").join(format!("{n}.ckpt")).to_string_lossy().into_owned();
    sjen(&["simulate", "--config", c])?;
    sjen(&["train", "teacher", "--config", c])?;
    sjen(&["train", "bad-student", "--config", c])?;
    sjen(&[
        "train",
        "student",
        "--config",
        c,
        "--teacher",
        &ck("teacher"),
        "--bad-student",
        &ck("bad-student"),
    ])?;
    let report = dir.join("reports").join("student.csv");
    sjen(&[
        "evaluate",
        "--config",
        c,
        "--ckpt",
        &ck("student"),
        "--format",
        "csv",
        "--out",
        report.to_str().unwrap(),
    ])?;
    let mut ckpts = Vec::new();
    for n in ["teacher", "bad-student", "student"] {
        ckpts.extend(std::fs::read(ck(n)).map_err(e2s)?);
    }
    Ok((ckpts, std::fs::read(report).map_err(e2s)?))
}

fn reproducible_pipeline() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(e2s)?, tempfile::tempdir().map_err(e2s)?);
    let (ca, ra) = pipeline(a.path())?;
    let (cb, rb) = pipeline(b.path())?;
    ensure(
        ca == cb && ra == rb,
        format!("{} checkpoint bytes and {} report bytes; identical: {}", ca.len(), ra.len(), ca == cb && ra == rb),
    )
}

const REFERENCE_PARAMS: f64 = 1.56e6;

fn bench_triples() -> Outcome {
    let out = sjen(&["bench", "--seconds", "1", "--repeats", "1"])?;
    let mut found = Vec::new();
    for p in Preset::ALL {
        let line = out
            .lines()
            .find(|l| l.starts_with(&format!("{} ", p.name())))
            .ok_or_else(|| format!("no bench line for {p}"))?;
        let complete = ["params", "FLOPs", "RTF"].iter().all(|k| line.contains(k));
        found.push((p, complete, line.to_string()));
    }
    let paper = Sjen::new(ModelKind::Student, &Preset::PaperShape.model(), 0).map_err(e2s)?;
    let n = count_params(&paper.params, &[]);
    for (_, _, l) in &found {
        println!("    {l}");
    }
    ensure(
        found.iter().all(|(_, ok, _)| *ok),
        format!(
            "triples for {} presets; paper-shape {n} params = {:.2}x the 1.56M reference (see README)",
            found.len(),
            n as f64 / REFERENCE_PARAMS
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient checks", gradients),
        ("STFT round trip and COLA", stft_round_trip),
        ("mixture levels and delta mixing", mixtures),
        ("loss identities", loss_identities),
        ("toy training", toy_training),
        ("distillation beats bad student", distillation_helps),
        ("metrics sanity", metrics_sanity),
        ("bitwise-reproducible CLI pipeline", reproducible_pipeline),
        ("bench triples", bench_triples),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = format!("{}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let res = run();
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(d) => println!("criterion {id} {name}: PASS ({d}) [{secs:.1} s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {id} {name}: FAIL ({d}) [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
