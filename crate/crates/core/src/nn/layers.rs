//! Layer specifications, parameter initialization, and the dense layers
//! (linear, LSTM) built from tensor primitives.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{conv2d, deconv2d};
use super::norm::{batch_norm, gln};
use super::params::{Binding, ParamStore};
use super::tensor::{self as t, Tensor};
use crate::error::{Error, Result};

/// Shape description of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    },
    /// Transposed convolution; `output_padding` is resolved from the target
    /// geometry at call time.
    Deconv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    },
    BatchNorm { channels: usize },
    Elu,
    Lstm { input: usize, hidden: usize },
    Linear { input: usize, output: usize },
    Gln { channels: usize },
}

/// Forget-gate bias at initialization.
pub const LSTM_FORGET_BIAS: f64 = 1.0;

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let sizes: Vec<usize> = match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                ..
            }
            | LayerSpec::Deconv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                ..
            } => vec![in_ch, out_ch, kernel.0, kernel.1, stride.0, stride.1],
            LayerSpec::BatchNorm { channels } | LayerSpec::Gln { channels } => vec![channels],
            LayerSpec::Elu => vec![],
            LayerSpec::Lstm { input, hidden } => vec![input, hidden],
            LayerSpec::Linear { input, output } => vec![input, output],
        };
        if sizes.contains(&0) {
            return Err(Error::InvalidLayer(format!("{self:?} has a zero size")));
        }
        Ok(())
    }

    /// Trainable scalars this layer owns.
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            }
            | LayerSpec::Deconv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => in_ch * out_ch * kernel.0 * kernel.1 + out_ch,
            LayerSpec::BatchNorm { channels } | LayerSpec::Gln { channels } => 2 * channels,
            LayerSpec::Elu => 0,
            LayerSpec::Lstm { input, hidden } => 4 * hidden * (input + hidden + 1),
            LayerSpec::Linear { input, output } => input * output + output,
        }
    }

    /// Adds this layer's parameters to `store` under `prefix`, drawing
    /// weights from uniform(-sqrt(1/fan_in), sqrt(1/fan_in)).
    pub fn init(&self, prefix: &str, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.validate()?;
        let name = |s: &str| format!("{prefix}.{s}");
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => {
                let bound = (1.0 / (in_ch * kernel.0 * kernel.1) as f64).sqrt();
                store.push_uniform(name("weight"), vec![out_ch, in_ch, kernel.0, kernel.1], bound, rng)?;
                store.push_uniform(name("bias"), vec![out_ch], bound, rng)?;
            }
            LayerSpec::Deconv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => {
                let bound = (1.0 / (out_ch * kernel.0 * kernel.1) as f64).sqrt();
                store.push_uniform(name("weight"), vec![in_ch, out_ch, kernel.0, kernel.1], bound, rng)?;
                store.push_uniform(name("bias"), vec![out_ch], bound, rng)?;
            }
            LayerSpec::BatchNorm { channels } => {
                store.push_const(name("gamma"), vec![channels], 1.0, true)?;
                store.push_const(name("beta"), vec![channels], 0.0, true)?;
                store.push_const(name("running_mean"), vec![channels], 0.0, false)?;
                store.push_const(name("running_var"), vec![channels], 1.0, false)?;
            }
            LayerSpec::Gln { channels } => {
                store.push_const(name("gamma"), vec![channels], 1.0, true)?;
                store.push_const(name("beta"), vec![channels], 0.0, true)?;
            }
            LayerSpec::Elu => {}
            LayerSpec::Lstm { input, hidden } => {
                let bi = (1.0 / input as f64).sqrt();
                let bh = (1.0 / hidden as f64).sqrt();
                store.push_uniform(name("w_ih"), vec![input, 4 * hidden], bi, rng)?;
                store.push_uniform(name("w_hh"), vec![hidden, 4 * hidden], bh, rng)?;
                store.push_uniform(name("bias"), vec![4 * hidden], bh, rng)?;
                let b = store.get_mut(&name("bias")).expect("just inserted");
                b.data[hidden..2 * hidden].fill(LSTM_FORGET_BIAS);
            }
            LayerSpec::Linear { input, output } => {
                let bound = (1.0 / input as f64).sqrt();
                store.push_uniform(name("weight"), vec![input, output], bound, rng)?;
                store.push_uniform(name("bias"), vec![output], bound, rng)?;
            }
        }
        Ok(())
    }
}

/// A layer spec bound to a parameter-name prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
}

impl Layer {
    pub fn new(name: impl Into<String>, spec: LayerSpec) -> Self {
        Self {
            name: name.into(),
            spec,
        }
    }

    fn p(&self, bind: &Binding, s: &str) -> Result<Tensor> {
        bind.tensor(&format!("{}.{s}", self.name))
    }

    /// Applies the layer. Transposed convolutions use zero output padding;
    /// see [`Layer::forward_to`].
    pub fn forward(&self, bind: &Binding, x: &Tensor) -> Result<Tensor> {
        self.forward_to(bind, x, (0, 0))
    }

    /// Like [`Layer::forward`], passing `output_padding` to transposed
    /// convolutions.
    pub fn forward_to(
        &self,
        bind: &Binding,
        x: &Tensor,
        output_padding: (usize, usize),
    ) -> Result<Tensor> {
        match self.spec {
            LayerSpec::Conv2d {
                stride, padding, ..
            } => conv2d(
                x,
                &self.p(bind, "weight")?,
                Some(&self.p(bind, "bias")?),
                stride,
                padding,
            ),
            LayerSpec::Deconv2d {
                stride, padding, ..
            } => deconv2d(
                x,
                &self.p(bind, "weight")?,
                Some(&self.p(bind, "bias")?),
                stride,
                padding,
                output_padding,
            ),
            LayerSpec::BatchNorm { .. } => {
                let (y, stats) = batch_norm(
                    x,
                    &self.p(bind, "gamma")?,
                    &self.p(bind, "beta")?,
                    bind.buffer(&format!("{}.running_mean", self.name))?,
                    bind.buffer(&format!("{}.running_var", self.name))?,
                    bind.bn_mode(),
                )?;
                if let Some(stats) = stats {
                    bind.record_stats(&self.name, stats);
                }
                Ok(y)
            }
            LayerSpec::Elu => Ok(t::elu(x)),
            LayerSpec::Gln { .. } => gln(x, &self.p(bind, "gamma")?, &self.p(bind, "beta")?),
            LayerSpec::Linear { .. } => {
                linear(x, &self.p(bind, "weight")?, &self.p(bind, "bias")?)
            }
            LayerSpec::Lstm { hidden, .. } => {
                let b = x.shape().first().copied().unwrap_or(0);
                let zeros = Tensor::zeros(vec![b, hidden]);
                lstm_forward(
                    x,
                    &LstmParams {
                        w_ih: self.p(bind, "w_ih")?,
                        w_hh: self.p(bind, "w_hh")?,
                        bias: self.p(bind, "bias")?,
                    },
                    &zeros,
                    &zeros,
                )
            }
        }
    }
}

/// Affine map over the last axis: `x: [..., D_in]`, `w: [D_in, D_out]`, `b: [D_out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[d_in, d_out], Some(&last)) = (w.shape(), x.shape().last()) else {
        return Err(Error::shape("linear", format!("weight {:?}, input {:?}", w.shape(), x.shape())));
    };
    if last != d_in {
        return Err(Error::shape(
            "last axis",
            format!("input has {last} features, weight expects {d_in}"),
        ));
    }
    let rows = x.numel() / d_in;
    let flat = t::reshape(x, vec![rows, d_in])?;
    let y = t::add_bias(&t::matmul(&flat, w)?, b)?;
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("non-empty") = d_out;
    t::reshape(&y, shape)
}

/// LSTM weights with gates packed in the order input, forget, cell, output.
pub struct LstmParams {
    /// `[D, 4H]`
    pub w_ih: Tensor,
    /// `[H, 4H]`
    pub w_hh: Tensor,
    /// `[4H]`
    pub bias: Tensor,
}

/// Runs the LSTM recurrence over `x: [B, T, D]` and returns every hidden
/// state, `[B, T, H]`.
pub fn lstm_forward(x: &Tensor, p: &LstmParams, h0: &Tensor, c0: &Tensor) -> Result<Tensor> {
    let &[b, steps, d] = x.shape() else {
        return Err(Error::shape("lstm input", format!("expected [B, T, D], got {:?}", x.shape())));
    };
    let &[wd, four_h] = p.w_ih.shape() else {
        return Err(Error::shape("lstm w_ih", format!("{:?}", p.w_ih.shape())));
    };
    let h = four_h / 4;
    if wd != d || four_h % 4 != 0 {
        return Err(Error::shape(
            "lstm feature axis",
            format!("input has {d} features, w_ih is {:?}", p.w_ih.shape()),
        ));
    }
    if p.w_hh.shape() != [h, four_h] || p.bias.shape() != [four_h] {
        return Err(Error::shape(
            "lstm hidden axis",
            format!("w_hh {:?}, bias {:?} for hidden {h}", p.w_hh.shape(), p.bias.shape()),
        ));
    }
    if h0.shape() != [b, h] || c0.shape() != [b, h] {
        return Err(Error::shape(
            "lstm state",
            format!("h0 {:?}, c0 {:?}, expected [{b}, {h}]", h0.shape(), c0.shape()),
        ));
    }
    if steps == 0 {
        return Err(Error::shape("time axis", "LSTM needs at least one step"));
    }
    let xp = t::add_bias(&t::matmul(&t::reshape(x, vec![b * steps, d])?, &p.w_ih)?, &p.bias)?;
    let xp = t::reshape(&xp, vec![b, steps, four_h])?;
    let mut hs = h0.clone();
    let mut cs = c0.clone();
    let mut outputs = Vec::with_capacity(steps);
    for step in 0..steps {
        let gates = t::add(&t::select(&xp, 1, step)?, &t::matmul(&hs, &p.w_hh)?)?;
        let i = t::sigmoid(&t::slice(&gates, 1, 0, h)?);
        let f = t::sigmoid(&t::slice(&gates, 1, h, 2 * h)?);
        let g = t::tanh(&t::slice(&gates, 1, 2 * h, 3 * h)?);
        let o = t::sigmoid(&t::slice(&gates, 1, 3 * h, 4 * h)?);
        cs = t::add(&t::mul(&f, &cs)?, &t::mul(&i, &g)?)?;
        hs = t::mul(&o, &t::tanh(&cs))?;
        outputs.push(hs.clone());
    }
    t::stack(&outputs, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect())
            .unwrap()
    }

    #[test]
    fn zero_lstm_outputs_zero() {
        let (b, steps, d, h) = (2, 4, 3, 5);
        let p = LstmParams {
            w_ih: Tensor::zeros(vec![d, 4 * h]),
            w_hh: Tensor::zeros(vec![h, 4 * h]),
            bias: Tensor::zeros(vec![4 * h]),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_t(&mut rng, &[b, steps, d], 1.0);
        let z = Tensor::zeros(vec![b, h]);
        let y = lstm_forward(&x, &p, &z, &z).unwrap();
        assert_eq!(y.shape(), &[b, steps, h]);
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_step_matches_hand_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (d, h) = (3, 2);
        let p = LstmParams {
            w_ih: rand_t(&mut rng, &[d, 4 * h], 0.5),
            w_hh: rand_t(&mut rng, &[h, 4 * h], 0.5),
            bias: rand_t(&mut rng, &[4 * h], 0.5),
        };
        let x = rand_t(&mut rng, &[1, 1, d], 1.0);
        let h0 = rand_t(&mut rng, &[1, h], 1.0);
        let c0 = rand_t(&mut rng, &[1, h], 1.0);
        let y = lstm_forward(&x, &p, &h0, &c0).unwrap();
        let pre = |j: usize| -> f64 {
            let mut a = p.bias.data()[j];
            for k in 0..d {
                a += x.data()[k] * p.w_ih.data()[k * 4 * h + j];
            }
            for k in 0..h {
                a += h0.data()[k] * p.w_hh.data()[k * 4 * h + j];
            }
            a
        };
        for u in 0..h {
            let i = sig(pre(u));
            let f = sig(pre(h + u));
            let g = pre(2 * h + u).tanh();
            let o = sig(pre(3 * h + u));
            let c = f * c0.data()[u] + i * g;
            let expect = o * c.tanh();
            assert!((y.data()[u] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn bias_only_lstm_follows_scalar_recurrence() {
        // Zero weights: every unit runs c_t = σ(bf) c_{t-1} + σ(bi) tanh(bg), h_t = σ(bo) tanh(c_t).
        let h = 1;
        let bias = [0.3, -0.7, 1.1, 0.5];
        let p = LstmParams {
            w_ih: Tensor::zeros(vec![2, 4]),
            w_hh: Tensor::zeros(vec![h, 4]),
            bias: Tensor::new(vec![4], bias.to_vec()).unwrap(),
        };
        let x = Tensor::zeros(vec![1, 6, 2]);
        let z = Tensor::zeros(vec![1, 1]);
        let y = lstm_forward(&x, &p, &z, &z).unwrap();
        let mut c = 0.0;
        for step in 0..6 {
            c = sig(bias[1]) * c + sig(bias[0]) * bias[2].tanh();
            let expect = sig(bias[3]) * c.tanh();
            assert!((y.data()[step] - expect).abs() < 1e-14);
        }
        // Converges to the fixed point c* = σ(bi) tanh(bg) / (1 - σ(bf)).
        let c_star = sig(bias[0]) * bias[2].tanh() / (1.0 - sig(bias[1]));
        assert!((c - c_star).abs() < 0.1);
    }

    #[test]
    fn linear_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_t(&mut rng, &[2, 3, 4], 1.0);
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 5] = 1.0;
        }
        let w = Tensor::new(vec![4, 4], eye).unwrap();
        let zb = Tensor::zeros(vec![4]);
        assert_eq!(linear(&x, &w, &zb).unwrap().data(), x.data());
        let b = Tensor::new(vec![2], vec![0.5, -1.5]).unwrap();
        let y = linear(&x, &Tensor::zeros(vec![4, 2]), &b).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2]);
        for row in y.data().chunks(2) {
            assert_eq!(row, &[0.5, -1.5]);
        }
    }

    #[test]
    fn linear_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_t(&mut rng, &[5, 3], 1.0);
        let w = rand_t(&mut rng, &[3, 2], 1.0);
        let b = rand_t(&mut rng, &[2], 1.0);
        let y = linear(&x, &w, &b).unwrap();
        for r in 0..5 {
            for c in 0..2 {
                let mut acc = b.data()[c];
                for k in 0..3 {
                    acc += x.data()[r * 3 + k] * w.data()[k * 2 + c];
                }
                assert!((y.data()[r * 2 + c] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn param_counts() {
        assert_eq!(LayerSpec::Linear { input: 3, output: 2 }.param_count(), 8);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let specs = [
            LayerSpec::Lstm { input: 3, hidden: 4 },
            LayerSpec::Conv2d {
                in_ch: 2,
                out_ch: 3,
                kernel: (2, 3),
                stride: (1, 2),
                padding: (1, 1),
            },
            LayerSpec::BatchNorm { channels: 3 },
        ];
        for (i, s) in specs.iter().enumerate() {
            s.init(&format!("l{i}"), &mut store, &mut rng).unwrap();
        }
        let expected: usize = specs.iter().map(LayerSpec::param_count).sum();
        assert_eq!(store.trainable_count(), expected);
        let bias = &store.get("l0.bias").unwrap().data;
        assert!(bias[4..8].iter().all(|v| *v == LSTM_FORGET_BIAS));
        assert!(LayerSpec::Linear { input: 0, output: 2 }.validate().is_err());
    }
}
