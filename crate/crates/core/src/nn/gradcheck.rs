//! Central finite-difference gradient checking.
//!
//! The reference derivative only ever calls the forward function, so it is
//! independent of every backward closure it checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::norm::BnMode;
use super::params::{Binding, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Check at most this many coordinates per tensor (all when `None`).
    pub coords_per_tensor: Option<usize>,
    pub seed: u64,
    /// Lower bound of the relative-error denominator as a fraction of the
    /// global gradient norm over all checked tensors, so tensors whose
    /// true gradient vanishes are judged against the overall scale.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_tensor: None,
            seed: 0,
            floor: 1e-6,
        }
    }
}

/// Relative error `|a - n|₂ / max(|a|₂, |n|₂, floor·|∇f|₂)` per checked
/// tensor, where `|∇f|₂` spans every checked tensor.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_tensor: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn worst_name(&self) -> &str {
        self.per_tensor
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(n, _)| n.as_str())
            .unwrap_or("")
    }
}

fn rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

fn global_norm(grads: impl Iterator<Item = Vec<f64>>) -> f64 {
    grads.flatten().map(|g| g * g).sum::<f64>().sqrt()
}

fn coords(n: usize, cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match cfg.coords_per_tensor {
        Some(k) if k < n => {
            let mut v = sample(rng, n, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    }
}

/// Checks `f` with respect to each free input tensor.
pub fn check_inputs(
    inputs: &[(&str, Vec<usize>, Vec<f64>)],
    cfg: &GradCheckConfig,
    f: impl Fn(&[Tensor]) -> Result<Tensor>,
) -> Result<GradCheckReport> {
    let leaves = inputs
        .iter()
        .map(|(_, s, d)| Tensor::param(s.clone(), d.clone()))
        .collect::<Result<Vec<_>>>()?;
    f(&leaves)?.backward()?;
    let floor = cfg.floor * global_norm(leaves.iter().filter_map(|l| l.grad()));
    let eval = |which: usize, coord: usize, delta: f64| -> Result<f64> {
        let ts = inputs
            .iter()
            .enumerate()
            .map(|(i, (_, s, d))| {
                let mut d = d.clone();
                if i == which {
                    d[coord] += delta;
                }
                Tensor::new(s.clone(), d)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(f(&ts)?.item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut per_tensor = Vec::new();
    for (i, (name, _, data)) in inputs.iter().enumerate() {
        let grad = leaves[i].grad().unwrap_or_else(|| vec![0.0; data.len()]);
        let cs = coords(data.len(), cfg, &mut rng);
        let mut a = Vec::with_capacity(cs.len());
        let mut n = Vec::with_capacity(cs.len());
        for &c in &cs {
            let fd = (eval(i, c, cfg.step)? - eval(i, c, -cfg.step)?) / (2.0 * cfg.step);
            a.push(grad[c]);
            n.push(fd);
        }
        per_tensor.push((name.to_string(), rel_err(&a, &n, floor)));
    }
    Ok(GradCheckReport { per_tensor })
}

/// Checks a scalar function of a model's trainable parameters.
///
/// `f` receives a binding in `mode`; the perturbed evaluations use frozen
/// bindings so no gradient bookkeeping happens there.
pub fn check_store(
    store: &ParamStore,
    mode: BnMode,
    cfg: &GradCheckConfig,
    f: impl Fn(&Binding) -> Result<Tensor>,
) -> Result<GradCheckReport> {
    let bind = Binding::new(store, true, mode);
    f(&bind)?.backward()?;
    let grads = bind.grads();
    let floor = cfg.floor * global_norm(grads.iter().map(|(_, g)| g.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut per_tensor = Vec::new();
    let mut work = store.clone();
    for (name, grad) in grads {
        let cs = coords(grad.len(), cfg, &mut rng);
        let mut a = Vec::with_capacity(cs.len());
        let mut n = Vec::with_capacity(cs.len());
        for &c in &cs {
            let orig = work.get(&name).expect("same store").data[c];
            let mut at = |v: f64| -> Result<f64> {
                work.get_mut(&name).expect("same store").data[c] = v;
                let b = Binding::new(&work, false, mode);
                Ok(f(&b)?.item())
            };
            let plus = at(orig + cfg.step)?;
            let minus = at(orig - cfg.step)?;
            work.get_mut(&name).expect("same store").data[c] = orig;
            a.push(grad[c]);
            n.push((plus - minus) / (2.0 * cfg.step));
        }
        per_tensor.push((name, rel_err(&a, &n, floor)));
    }
    Ok(GradCheckReport { per_tensor })
}
