//! Finite-difference checks of every layer, both sub-modules, and every
//! loss. Shared by the integration tests and the acceptance target.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sjen::losses::{kd_loss, kd_total, magnitude_loss, reconstruction_loss, total_loss, KdForm, MagLoss};
use sjen::model::{EncoderTaps, ModelKind, Preset, Sjen, MIN_FRAMES};
use sjen::nn::gradcheck::{check_inputs, check_store, GradCheckConfig, GradCheckReport};
use sjen::nn::tensor as t;
use sjen::nn::{batch_norm, chomp_time, conv2d, deconv2d, gln, linear, lstm_forward, normalize_pairs};
use sjen::nn::{BnMode, LstmParams, Tensor};
use sjen::Result;

pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub worst: f64,
    pub worst_tensor: String,
}

impl Check {
    fn new(name: &str, r: GradCheckReport) -> Self {
        Self {
            name: name.into(),
            worst: r.worst(),
            worst_tensor: r.worst_name().into(),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> (Vec<usize>, Vec<f64>) {
    let n = shape.iter().product();
    (shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn input(name: &'static str, (s, d): (Vec<usize>, Vec<f64>)) -> (&'static str, Vec<usize>, Vec<f64>) {
    (name, s, d)
}

/// `Σ y ⊙ r` for a fixed random `r`, so every output element matters.
fn probe(y: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let (s, d) = uniform(&mut rng, y.shape(), -1.0, 1.0);
    Ok(t::sum(&t::mul(y, &Tensor::new(s, d)?)?))
}

fn unit_pairs(rng: &mut ChaCha8Rng, b: usize, frames: usize, f: usize) -> Tensor {
    let n = frames * f;
    let mut d = vec![0.0; b * 2 * n];
    for bb in 0..b {
        for i in 0..n {
            let a: f64 = rng.random_range(-3.1..3.1);
            d[bb * 2 * n + i] = a.cos();
            d[bb * 2 * n + n + i] = a.sin();
        }
    }
    Tensor::new(vec![b, 2, frames, f], d).expect("shape")
}

pub fn layer_checks(seed: u64) -> Result<Vec<Check>> {
    let cfg = GradCheckConfig {
        seed,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<(&'static str, Vec<usize>, Vec<f64>)>, f: &dyn Fn(&[Tensor]) -> Result<Tensor>| -> Result<()> {
        out.push(Check::new(name, check_inputs(&inputs, &cfg, f)?));
        Ok(())
    };

    run(
        "conv2d",
        vec![
            input("x", uniform(&mut rng, &[2, 2, 5, 7], -1.0, 1.0)),
            input("weight", uniform(&mut rng, &[3, 2, 2, 3], -0.5, 0.5)),
            input("bias", uniform(&mut rng, &[3], -0.5, 0.5)),
        ],
        &|v| probe(&conv2d(&v[0], &v[1], Some(&v[2]), (1, 2), (1, 1))?, seed),
    )?;
    run(
        "deconv2d",
        vec![
            input("x", uniform(&mut rng, &[2, 3, 4, 4], -1.0, 1.0)),
            input("weight", uniform(&mut rng, &[3, 2, 2, 3], -0.5, 0.5)),
            input("bias", uniform(&mut rng, &[2], -0.5, 0.5)),
        ],
        &|v| probe(&deconv2d(&v[0], &v[1], Some(&v[2]), (1, 2), (0, 1), (0, 1))?, seed),
    )?;
    run(
        "chomp_time",
        vec![input("x", uniform(&mut rng, &[1, 2, 6, 3], -1.0, 1.0))],
        &|v| probe(&chomp_time(&v[0], 2)?, seed),
    )?;
    for (name, mode) in [("batch_norm/train", BnMode::Train), ("batch_norm/eval", BnMode::Eval)] {
        let (rm, rv) = (vec![0.1, -0.2, 0.3], vec![0.5, 1.5, 2.0]);
        run(
            name,
            vec![
                input("x", uniform(&mut rng, &[3, 3, 4, 2], -2.0, 2.0)),
                input("gamma", uniform(&mut rng, &[3], 0.5, 1.5)),
                input("beta", uniform(&mut rng, &[3], -0.5, 0.5)),
            ],
            &|v| probe(&batch_norm(&v[0], &v[1], &v[2], &rm, &rv, mode)?.0, seed),
        )?;
    }
    run(
        "gln",
        vec![
            input("x", uniform(&mut rng, &[2, 2, 4, 3], -2.0, 2.0)),
            input("gamma", uniform(&mut rng, &[2], 0.5, 1.5)),
            input("beta", uniform(&mut rng, &[2], -0.5, 0.5)),
        ],
        &|v| probe(&gln(&v[0], &v[1], &v[2])?, seed),
    )?;
    run(
        "linear",
        vec![
            input("x", uniform(&mut rng, &[2, 3, 4], -1.0, 1.0)),
            input("weight", uniform(&mut rng, &[4, 5], -0.5, 0.5)),
            input("bias", uniform(&mut rng, &[5], -0.5, 0.5)),
        ],
        &|v| probe(&linear(&v[0], &v[1], &v[2])?, seed),
    )?;
    run(
        "lstm",
        vec![
            input("x", uniform(&mut rng, &[2, 4, 3], -1.0, 1.0)),
            input("w_ih", uniform(&mut rng, &[3, 8], -0.7, 0.7)),
            input("w_hh", uniform(&mut rng, &[2, 8], -0.7, 0.7)),
            input("bias", uniform(&mut rng, &[8], -0.5, 0.5)),
            input("h0", uniform(&mut rng, &[2, 2], -0.5, 0.5)),
            input("c0", uniform(&mut rng, &[2, 2], -0.5, 0.5)),
        ],
        &|v| {
            let p = LstmParams {
                w_ih: v[1].clone(),
                w_hh: v[2].clone(),
                bias: v[3].clone(),
            };
            probe(&lstm_forward(&v[0], &p, &v[4], &v[5])?, seed)
        },
    )?;
    run(
        "normalize_pairs",
        vec![input("x", uniform(&mut rng, &[2, 2, 3, 3], 0.2, 1.5))],
        &|v| probe(&normalize_pairs(&v[0])?, seed),
    )?;
    let pointwise: [(&str, fn(&Tensor) -> Tensor, f64, f64); 7] = [
        ("elu", t::elu, -2.0, 2.0),
        ("softplus", t::softplus, -3.0, 3.0),
        ("sigmoid", t::sigmoid, -3.0, 3.0),
        ("tanh", t::tanh, -2.0, 2.0),
        ("sqrt", t::sqrt, 0.2, 2.0),
        ("abs", t::abs, 0.1, 2.0),
        ("square", t::square, -2.0, 2.0),
    ];
    for (name, f, lo, hi) in pointwise {
        let mut x = uniform(&mut rng, &[3, 4], lo, hi);
        if name == "abs" {
            // Both sides of the kink, never at it.
            x.1.iter_mut().step_by(2).for_each(|v| *v = -*v);
        }
        run(name, vec![input("x", x)], &|v| probe(&f(&v[0]), seed))?;
    }
    run(
        "matmul/concat/permute/slice",
        vec![
            input("a", uniform(&mut rng, &[3, 4], -1.0, 1.0)),
            input("b", uniform(&mut rng, &[4, 2], -1.0, 1.0)),
        ],
        &|v| {
            let m = t::matmul(&v[0], &v[1])?;
            let c = t::concat(&[m.clone(), t::square(&m)], 1)?;
            let p = t::permute(&t::reshape(&c, vec![1, 3, 4])?, &[2, 1, 0])?;
            probe(&t::slice(&p, 0, 1, 3)?, seed)
        },
    )?;
    Ok(out)
}

fn random_magnitude(rng: &mut ChaCha8Rng, b: usize, frames: usize, f: usize) -> Tensor {
    let (s, d) = uniform(rng, &[b, 1, frames, f], 0.0, 2.0);
    Tensor::new(s, d).expect("shape")
}

/// Magnitude network, phase network, and full monaural network on the
/// tiny preset, checked on a sample of coordinates of every tensor.
pub fn submodule_checks(seed: u64) -> Result<Vec<Check>> {
    let cfg = GradCheckConfig {
        seed,
        coords_per_tensor: Some(3),
        ..Default::default()
    };
    let mc = Preset::Tiny.model();
    let (b, frames, f) = (2, MIN_FRAMES, mc.freq_bins);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let left = random_magnitude(&mut rng, b, frames, f);
    let right = random_magnitude(&mut rng, b, frames, f);
    let noisy = unit_pairs(&mut rng, b, frames, f);
    let mut out = Vec::new();

    let teacher = Sjen::new(ModelKind::Teacher, &mc, seed)?;
    let r = check_store(&teacher.params, BnMode::Train, &cfg, |bind| {
        let (m, _) = teacher.arch().magnitude(bind, &left, &right)?;
        probe(&m, seed)
    })?;
    out.push(Check::new("magnitude sub-module", r));

    let student = Sjen::new(ModelKind::Student, &mc, seed + 1)?;
    let r = check_store(&student.params, BnMode::Train, &cfg, |bind| {
        probe(&student.arch().phase(bind, &left, &noisy)?, seed)
    })?;
    out.push(Check::new("phase sub-module", r));

    let r = check_store(&student.params, BnMode::Train, &cfg, |bind| {
        let o = student.arch().sjen(bind, &left, &noisy)?;
        Ok(t::add(&probe(&o.mag, seed)?, &probe(&o.phase, seed + 7)?)?)
    })?;
    out.push(Check::new("monaural network", r));
    Ok(out)
}

fn taps(rng: &mut ChaCha8Rng, shapes: &[[usize; 4]]) -> Vec<(Vec<usize>, Vec<f64>)> {
    shapes.iter().map(|s| uniform(rng, s, -1.0, 1.0)).collect()
}

pub fn loss_checks(seed: u64) -> Result<Vec<Check>> {
    let cfg = GradCheckConfig {
        seed,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let (b, frames, f) = (2, 6, 5);
    let lengths = [6, 4];
    let mag_gt = random_magnitude(&mut rng, b, frames, f);
    let phase_gt = unit_pairs(&mut rng, b, frames, f);

    for (name, ml) in [("reconstruction/l2", MagLoss::L2Norm), ("reconstruction/mse", MagLoss::Mse)] {
        let r = check_inputs(
            &[
                input("mag_est", uniform(&mut rng, &[b, 1, frames, f], 0.0, 2.0)),
                input("phase_est", uniform(&mut rng, &[b, 2, frames, f], -1.0, 1.0)),
            ],
            &cfg,
            |v| reconstruction_loss(&v[0], &mag_gt, &v[1], &phase_gt, Some(&lengths), 1.0, ml),
        )?;
        out.push(Check::new(name, r));
    }
    let r = check_inputs(
        &[input("mag_est", uniform(&mut rng, &[b, 1, frames, f], 0.0, 2.0))],
        &cfg,
        |v| magnitude_loss(&v[0], &mag_gt, Some(&lengths), MagLoss::L2Norm),
    )?;
    out.push(Check::new("magnitude", r));

    let shapes: Vec<[usize; 4]> = (0..5).map(|i| [b, 1 + i % 2, frames, 5 - i]).collect();
    let other = |rng: &mut ChaCha8Rng| -> Result<EncoderTaps> {
        let mk = |v: Vec<(Vec<usize>, Vec<f64>)>| v.into_iter().map(|(s, d)| Tensor::new(s, d)).collect::<Result<Vec<_>>>();
        Ok(EncoderTaps {
            left: mk(taps(rng, &shapes))?,
            right: mk(taps(rng, &shapes))?,
        })
    };
    let teacher = other(&mut rng)?;
    let bad = other(&mut rng)?;
    let names = ["l1", "l2", "l3", "l4", "l5", "r1", "r2", "r3", "r4", "r5"];
    let student_inputs: Vec<_> = taps(&mut rng, &shapes)
        .into_iter()
        .chain(taps(&mut rng, &shapes))
        .zip(names)
        .map(|((s, d), n)| (n, s, d))
        .collect();
    let as_taps = |v: &[Tensor]| EncoderTaps {
        left: v[..5].to_vec(),
        right: v[5..].to_vec(),
    };
    for (name, form) in [("kd/literal", KdForm::Literal), ("kd/separate", KdForm::Separate)] {
        let r = check_inputs(&student_inputs, &cfg, |v| kd_loss(&as_taps(v), &teacher, Some(&lengths), form))?;
        out.push(Check::new(name, r));
    }
    let r = check_inputs(
        &[
            input("l_ts", (vec![], vec![rng.random_range(0.5..2.0)])),
            input("l_bs", (vec![], vec![rng.random_range(0.5..2.0)])),
        ],
        &cfg,
        |v| kd_total(&v[0], &v[1], 1e-8),
    )?;
    out.push(Check::new("kd_total", r));
    let r = check_inputs(
        &[
            input("l_rl", (vec![], vec![rng.random_range(-1.0..1.0)])),
            input("l_kd", (vec![], vec![rng.random_range(0.5..2.0)])),
        ],
        &cfg,
        |v| total_loss(&v[0], &v[1], 0.1),
    )?;
    out.push(Check::new("total", r));
    let mag_in = uniform(&mut rng, &[b, 1, frames, f], 0.0, 2.0);
    let phase_in = uniform(&mut rng, &[b, 2, frames, f], -1.0, 1.0);
    let mut composed = student_inputs.clone();
    composed.push(("mag_est", mag_in.0, mag_in.1));
    composed.push(("phase_est", phase_in.0, phase_in.1));
    let r = check_inputs(&composed, &cfg, |v| {
        let s = as_taps(&v[..10]);
        let l_rl = reconstruction_loss(&v[10], &mag_gt, &v[11], &phase_gt, Some(&lengths), 1.0, MagLoss::L2Norm)?;
        let l_ts = kd_loss(&s, &teacher, Some(&lengths), KdForm::Literal)?;
        let l_bs = kd_loss(&s, &bad, Some(&lengths), KdForm::Literal)?;
        total_loss(&l_rl, &kd_total(&l_ts, &l_bs, 1e-8)?, 0.1)
    })?;
    out.push(Check::new("total composed", r));
    Ok(out)
}

pub fn all_checks(seed: u64) -> Result<Vec<Check>> {
    let mut v = layer_checks(seed)?;
    v.extend(submodule_checks(seed)?);
    v.extend(loss_checks(seed)?);
    Ok(v)
}
