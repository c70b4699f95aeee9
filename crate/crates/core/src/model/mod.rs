//! SJEN magnitude and phase sub-modules, the binaural teacher, and the
//! spectrogram-level forward/reconstruct helpers.
//!
//! Encoder tap shapes for a `[B, 1, T, F]` input are `[B, C_i, T, F_i]`,
//! where `F_i` follows [`ModelConfig::freqs`]:
//!
//! | stage | paper-shape (F = 161) | tiny (F = 17) | micro (F = 9) |
//! |-------|-----------------------|---------------|---------------|
//! | 1     | 16 × 80               | 4 × 9         | 2 × 5         |
//! | 2     | 32 × 39               | 8 × 5         | 2 × 3         |
//! | 3     | 48 × 19               | 8 × 3         | 2 × 2         |
//! | 4     | 64 × 9                | 16 × 2        | 2 × 1         |
//! | 5     | 80 × 4                | 16 × 1        | 2 × 1         |
//!
//! (channels × frequency; time is preserved by causal padding.)

mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{ModelConfig, Preset, MIN_FRAMES, PHASE_KERNEL_A, PHASE_KERNEL_B, STAGES};

use crate::audio::{istft, stft, Spectrogram, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::nn::tensor::{self as t, Tensor};
use crate::nn::{chomp_time, normalize_pairs, Binding, BnMode, Checkpoint, Layer, LayerSpec, ParamStore};

/// Which network a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Binaural magnitude network.
    Teacher,
    /// Monaural SJEN trained with distillation.
    Student,
    /// Monaural SJEN trained with the reconstruction loss only.
    BadStudent,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Teacher => "teacher",
            ModelKind::Student => "student",
            ModelKind::BadStudent => "bad_student",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(ModelKind::Teacher),
            "student" => Ok(ModelKind::Student),
            "bad_student" => Ok(ModelKind::BadStudent),
            _ => Err(Error::Checkpoint(format!("unknown model kind {s:?}"))),
        }
    }

    pub fn has_phase(self) -> bool {
        self != ModelKind::Teacher
    }
}

/// Per-stage encoder outputs of both channels.
#[derive(Debug, Clone)]
pub struct EncoderTaps {
    pub left: Vec<Tensor>,
    pub right: Vec<Tensor>,
}

impl EncoderTaps {
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.left.iter().map(|t| t.shape().to_vec()).collect()
    }

    /// Constant copies, cut off from any graph.
    pub fn detach(&self) -> Self {
        Self {
            left: self.left.iter().map(Tensor::detach).collect(),
            right: self.right.iter().map(Tensor::detach).collect(),
        }
    }
}

/// Output of a monaural SJEN forward on batched tensors.
pub struct SjenOutput {
    /// `[B, 1, T, F]`, non-negative.
    pub mag: Tensor,
    /// `[B, 2, T, F]`, unit `(cos, sin)` pairs.
    pub phase: Tensor,
    pub taps: EncoderTaps,
}

#[derive(Debug, Clone)]
struct PhaseLayers {
    mag_proj: Layer,
    pha_proj: Layer,
    blocks: Vec<(Layer, Layer)>,
    res_proj: Layer,
    norm: Layer,
}

/// Layer graph of one network, derived from its [`ModelConfig`].
#[derive(Debug, Clone)]
pub struct Arch {
    cfg: ModelConfig,
    freqs: Vec<usize>,
    enc: [Vec<(Layer, Layer)>; 2],
    lstm: Vec<Layer>,
    dec: Vec<(Layer, Option<Layer>)>,
    phase: Option<PhaseLayers>,
}

fn conv(name: String, in_ch: usize, out_ch: usize, kernel: (usize, usize), padding: (usize, usize)) -> Layer {
    Layer::new(
        name,
        LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride: (1, 1),
            padding,
        },
    )
}

impl Arch {
    pub fn new(cfg: &ModelConfig, kind: ModelKind) -> Result<Self> {
        cfg.validate()?;
        let freqs = cfg.freqs()?;
        let ch = cfg.channels;
        let enc = ["enc_l", "enc_r"].map(|side| {
            (0..STAGES)
                .map(|i| {
                    let in_ch = if i == 0 { 1 } else { ch[i - 1] };
                    let c = Layer::new(
                        format!("mag.{side}.{i}.conv"),
                        LayerSpec::Conv2d {
                            in_ch,
                            out_ch: ch[i],
                            kernel: cfg.kernel,
                            stride: cfg.stride,
                            padding: (cfg.kernel.0 - 1, cfg.freq_padding),
                        },
                    );
                    let bn = Layer::new(format!("mag.{side}.{i}.bn"), LayerSpec::BatchNorm { channels: ch[i] });
                    (c, bn)
                })
                .collect()
        });
        let hidden = cfg.lstm_hidden()?;
        let lstm = (0..cfg.lstm_layers)
            .map(|j| {
                Layer::new(
                    format!("mag.lstm.{j}"),
                    LayerSpec::Lstm {
                        input: hidden,
                        hidden,
                    },
                )
            })
            .collect();
        let dec = (0..STAGES)
            .map(|j| {
                let stage = STAGES - 1 - j;
                let in_ch = if j == 0 { 3 * ch[stage] } else { 2 * ch[stage] };
                let out_ch = if stage == 0 { 1 } else { ch[stage - 1] };
                let d = Layer::new(
                    format!("mag.dec.{j}.deconv"),
                    LayerSpec::Deconv2d {
                        in_ch,
                        out_ch,
                        kernel: cfg.kernel,
                        stride: cfg.stride,
                        padding: (0, cfg.freq_padding),
                    },
                );
                let bn = (stage > 0)
                    .then(|| Layer::new(format!("mag.dec.{j}.bn"), LayerSpec::BatchNorm { channels: out_ch }));
                (d, bn)
            })
            .collect();
        let phase = kind.has_phase().then(|| {
            let w = cfg.phase_width;
            let (ka, kb) = (PHASE_KERNEL_A, PHASE_KERNEL_B);
            PhaseLayers {
                mag_proj: conv("phase.mag_proj".into(), 1, w / 2, (1, 1), (0, 0)),
                pha_proj: conv("phase.pha_proj".into(), 2, w / 2, (1, 1), (0, 0)),
                blocks: (0..cfg.phase_blocks)
                    .map(|k| {
                        (
                            conv(format!("phase.block.{k}.a"), w, w, ka, (ka.0 / 2, ka.1 / 2)),
                            conv(format!("phase.block.{k}.b"), w, w, kb, (kb.0 / 2, kb.1 / 2)),
                        )
                    })
                    .collect(),
                res_proj: conv("phase.res_proj".into(), w, 2, (1, 1), (0, 0)),
                norm: Layer::new("phase.gln", LayerSpec::Gln { channels: 2 }),
            }
        });
        Ok(Self {
            cfg: cfg.clone(),
            freqs,
            enc,
            lstm,
            dec,
            phase,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Every layer, in forward order.
    pub fn layers(&self) -> Vec<&Layer> {
        let mut out = Vec::new();
        for side in &self.enc {
            for (c, bn) in side {
                out.extend([c, bn]);
            }
        }
        out.extend(&self.lstm);
        for (d, bn) in &self.dec {
            out.push(d);
            out.extend(bn);
        }
        if let Some(p) = &self.phase {
            out.extend([&p.mag_proj, &p.pha_proj]);
            for (a, b) in &p.blocks {
                out.extend([a, b]);
            }
            out.extend([&p.res_proj, &p.norm]);
        }
        out
    }

    fn check_input(&self, x: &Tensor, what: &str, channels: usize) -> Result<[usize; 4]> {
        let s: [usize; 4] = x
            .shape()
            .try_into()
            .map_err(|_| Error::shape(what, format!("expected [B, {channels}, T, F], got {:?}", x.shape())))?;
        if s[1] != channels || s[3] != self.cfg.freq_bins || s[0] == 0 || s[2] == 0 {
            return Err(Error::shape(
                what,
                format!(
                    "expected [B, {channels}, T, {}] with B, T >= 1, got {s:?}",
                    self.cfg.freq_bins
                ),
            ));
        }
        Ok(s)
    }

    fn encoder(&self, bind: &Binding, side: usize, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut h = x.clone();
        let mut taps = Vec::with_capacity(STAGES);
        for (c, bn) in &self.enc[side] {
            h = chomp_time(&c.forward(bind, &h)?, self.cfg.kernel.0 - 1)?;
            h = t::elu(&bn.forward(bind, &h)?);
            taps.push(h.clone());
        }
        Ok((h, taps))
    }

    /// Dual-encoder magnitude network: `[B, 1, T, F]` per channel to a
    /// `[B, 1, T, F]` magnitude estimate and the encoder taps.
    pub fn magnitude(&self, bind: &Binding, left: &Tensor, right: &Tensor) -> Result<(Tensor, EncoderTaps)> {
        let [b, _, frames, _] = self.check_input(left, "left input", 1)?;
        if left.shape() != right.shape() {
            return Err(Error::shape(
                "right input",
                format!("left is {:?}, right is {:?}", left.shape(), right.shape()),
            ));
        }
        let (hl, tl) = self.encoder(bind, 0, left)?;
        let (hr, tr) = self.encoder(bind, 1, right)?;
        let (c5, f5) = (self.cfg.channels[STAGES - 1], self.freqs[STAGES]);
        let flat = |h: &Tensor| t::reshape(&t::permute(h, &[0, 2, 1, 3])?, vec![b, frames, c5 * f5]);
        let mut seq = t::concat(&[flat(&hl)?, flat(&hr)?], 2)?;
        for l in &self.lstm {
            seq = l.forward(bind, &seq)?;
        }
        let mut h = t::permute(&t::reshape(&seq, vec![b, frames, 2 * c5, f5])?, &[0, 2, 1, 3])?;
        let (k, s, p) = (self.cfg.kernel.1, self.cfg.stride.1, self.cfg.freq_padding);
        for (j, (d, bn)) in self.dec.iter().enumerate() {
            let stage = STAGES - 1 - j;
            let skip = t::add(&tl[stage], &tr[stage])?;
            h = t::concat(&[h, skip], 1)?;
            let base = (self.freqs[stage + 1] - 1) * s + k - 2 * p;
            let out_pad = self.freqs[stage].checked_sub(base).filter(|&o| o < s).ok_or_else(|| {
                Error::InvalidLayer(format!(
                    "decoder stage {j} cannot reach {} bins from {}",
                    self.freqs[stage],
                    self.freqs[stage + 1]
                ))
            })?;
            h = chomp_time(&d.forward_to(bind, &h, (0, out_pad))?, self.cfg.kernel.0 - 1)?;
            h = match bn {
                Some(bn) => t::elu(&bn.forward(bind, &h)?),
                None => t::softplus(&h),
            };
        }
        Ok((
            h,
            EncoderTaps {
                left: tl,
                right: tr,
            },
        ))
    }

    /// Phase network: fuses `mag: [B, 1, T, F]` with `noisy: [B, 2, T, F]`
    /// and returns unit phase pairs `[B, 2, T, F]`.
    pub fn phase(&self, bind: &Binding, mag: &Tensor, noisy: &Tensor) -> Result<Tensor> {
        let p = self
            .phase
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("this network has no phase sub-module".into()))?;
        let [b, _, frames, _] = self.check_input(noisy, "noisy phase", 2)?;
        if mag.shape() != [b, 1, frames, self.cfg.freq_bins] {
            return Err(Error::shape(
                "magnitude input",
                format!("{:?} does not match phase {:?}", mag.shape(), noisy.shape()),
            ));
        }
        if frames < MIN_FRAMES {
            return Err(Error::shape(
                "time axis",
                format!("{frames} frames is shorter than the {MIN_FRAMES}-frame phase kernel; zero-pad the input"),
            ));
        }
        let mut h = t::concat(
            &[p.mag_proj.forward(bind, mag)?, p.pha_proj.forward(bind, noisy)?],
            1,
        )?;
        for (a, bl) in &p.blocks {
            let r = bl.forward(bind, &t::elu(&a.forward(bind, &h)?))?;
            h = t::add(&h, &r)?;
        }
        let r = p.norm.forward(bind, &p.res_proj.forward(bind, &h)?)?;
        normalize_pairs(&t::add(noisy, &r)?)
    }

    /// Monaural SJEN: the noisy magnitude feeds both encoders.
    pub fn sjen(&self, bind: &Binding, mag: &Tensor, noisy_phase: &Tensor) -> Result<SjenOutput> {
        let [_, _, frames, _] = self.check_input(mag, "noisy magnitude", 1)?;
        if self.phase.is_some() && frames < MIN_FRAMES {
            return Err(Error::shape(
                "time axis",
                format!("{frames} frames is shorter than the {MIN_FRAMES}-frame phase kernel; zero-pad the input"),
            ));
        }
        let (m, taps) = self.magnitude(bind, mag, mag)?;
        let phase = self.phase(bind, &m, noisy_phase)?;
        Ok(SjenOutput { mag: m, phase, taps })
    }
}

/// A network's identity, architecture, and parameters.
pub struct Sjen {
    kind: ModelKind,
    arch: Arch,
    pub params: ParamStore,
}

impl Sjen {
    /// Fresh network with seeded uniform initialization.
    pub fn new(kind: ModelKind, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let arch = Arch::new(cfg, kind)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for l in arch.layers() {
            l.spec.init(&l.name, &mut params, &mut rng)?;
        }
        Ok(Self { kind, arch, params })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.cfg
    }

    /// Binds the parameters for one forward pass.
    pub fn bind(&self, trainable: bool, mode: BnMode) -> Binding<'_> {
        Binding::new(&self.params, trainable, mode)
    }

    pub fn to_checkpoint(&self, stft: &StftConfig) -> Checkpoint {
        let meta = serde_json::json!({ "model": self.config(), "stft": stft });
        Checkpoint {
            kind: self.kind.as_str().into(),
            meta: meta.to_string(),
            params: self.params.clone(),
        }
    }

    /// Rebuilds a network and its STFT configuration from a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, StftConfig)> {
        #[derive(Deserialize)]
        struct Meta {
            model: ModelConfig,
            stft: StftConfig,
        }
        let kind = ModelKind::parse(&ck.kind)?;
        let meta: Meta = serde_json::from_str(&ck.meta)
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        if meta.stft.bins() != meta.model.freq_bins {
            return Err(Error::Checkpoint(format!(
                "STFT yields {} bins, model expects {}",
                meta.stft.bins(),
                meta.model.freq_bins
            )));
        }
        let mut m = Self::new(kind, &meta.model, 0)?;
        if ck.params.len() != m.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, architecture has {}",
                ck.params.len(),
                m.params.len()
            )));
        }
        m.params.copy_from(&ck.params)?;
        Ok((m, meta.stft))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<(Self, StftConfig)> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Magnitude `[T*F]` and planar phase `[2*T*F]` (all cos, then all sin).
pub fn spectrogram_planes(s: &Spectrogram) -> (Vec<f64>, Vec<f64>) {
    let n = s.frames() * s.bins();
    let mut phase = vec![0.0; 2 * n];
    for (i, pair) in s.phase().chunks(2).enumerate() {
        phase[i] = pair[0];
        phase[n + i] = pair[1];
    }
    (s.magnitude().to_vec(), phase)
}

/// Estimated magnitude and interleaved unit phase on a `T × F` grid.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub frames: usize,
    pub bins: usize,
    pub magnitude: Vec<f64>,
    pub phase: Vec<f64>,
    pub taps: EncoderTaps,
}

fn single(s: &Spectrogram) -> Result<(Tensor, Tensor)> {
    let (m, p) = spectrogram_planes(s);
    let (tt, f) = (s.frames(), s.bins());
    Ok((Tensor::new(vec![1, 1, tt, f], m)?, Tensor::new(vec![1, 2, tt, f], p)?))
}

/// Inference-mode SJEN on one spectrogram.
pub fn sjen_forward(model: &Sjen, noisy: &Spectrogram) -> Result<Estimate> {
    if !model.kind.has_phase() {
        return Err(Error::InvalidArgument("sjen_forward needs a student or bad-student network".into()));
    }
    let (m, p) = single(noisy)?;
    let bind = model.bind(false, BnMode::Eval);
    let out = model.arch.sjen(&bind, &m, &p)?;
    let n = noisy.frames() * noisy.bins();
    let ph = out.phase.data();
    let phase = (0..n).flat_map(|i| [ph[i], ph[n + i]]).collect();
    Ok(Estimate {
        frames: noisy.frames(),
        bins: noisy.bins(),
        magnitude: out.mag.to_vec(),
        phase,
        taps: out.taps,
    })
}

/// Inference-mode teacher on a binaural spectrogram pair.
pub fn teacher_forward(model: &Sjen, left: &Spectrogram, right: &Spectrogram) -> Result<(Vec<f64>, EncoderTaps)> {
    if (left.frames(), left.bins()) != (right.frames(), right.bins()) {
        return Err(Error::shape(
            "right input",
            format!(
                "left is {}x{}, right is {}x{}",
                left.frames(),
                left.bins(),
                right.frames(),
                right.bins()
            ),
        ));
    }
    let (l, _) = single(left)?;
    let (r, _) = single(right)?;
    let bind = model.bind(false, BnMode::Eval);
    let (m, taps) = model.arch.magnitude(&bind, &l, &r)?;
    Ok((m.to_vec(), taps))
}

/// Composes magnitude and interleaved unit phase into a waveform.
pub fn reconstruct(
    magnitude: &[f64],
    phase: &[f64],
    frames: usize,
    cfg: &StftConfig,
    sample_rate: u32,
) -> Result<Waveform> {
    let s = Spectrogram::from_parts(frames, magnitude.to_vec(), phase.to_vec(), cfg.clone(), sample_rate)?;
    istft(&s)
}

/// Waveform-to-waveform enhancement: STFT, SJEN, ISTFT. Inputs shorter than
/// the phase kernel are zero-padded in time; the output has the input length.
pub fn enhance(model: &Sjen, cfg: &StftConfig, noisy: &Waveform) -> Result<Waveform> {
    let mut padded = noisy.clone();
    let min_len = cfg.synthesis_len(MIN_FRAMES);
    if padded.len() < min_len {
        padded = padded.fit_to_len(min_len)?;
    }
    let spec = stft(&padded, cfg)?;
    let est = sjen_forward(model, &spec)?;
    reconstruct(&est.magnitude, &est.phase, est.frames, cfg, noisy.sample_rate())?.fit_to_len(noisy.len())
}
