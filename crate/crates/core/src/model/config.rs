use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::audio::{StftConfig, WindowKind};
use crate::error::{Error, Result};

/// Number of encoder (and decoder) stages.
pub const STAGES: usize = 5;
/// Time × frequency kernels of the two convolutions in a phase residual block.
pub const PHASE_KERNEL_A: (usize, usize) = (5, 3);
pub const PHASE_KERNEL_B: (usize, usize) = (25, 1);
/// Shortest input, in frames, accepted by the phase sub-module.
pub const MIN_FRAMES: usize = PHASE_KERNEL_B.0;

/// Architecture of one SJEN-family network.
///
/// The LSTM hidden size is not a free parameter: it equals the flattened
/// bottleneck size of the two concatenated encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Frequency bins of the input spectrogram.
    pub freq_bins: usize,
    /// Output channels of encoder stages 1..=5.
    pub channels: [usize; STAGES],
    /// Encoder/decoder kernel (time, freq).
    pub kernel: (usize, usize),
    /// Encoder/decoder stride (time, freq). Time stride must be 1.
    pub stride: (usize, usize),
    /// Zero padding on each side of the frequency axis per stage.
    pub freq_padding: usize,
    pub lstm_layers: usize,
    /// Internal channels of the phase sub-module (even).
    pub phase_width: usize,
    pub phase_blocks: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.channels.contains(&0) {
            return bad(format!("encoder channels {:?} contain a zero", self.channels));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return bad(format!("kernel {:?} has a zero size", self.kernel));
        }
        if self.stride.0 != 1 || self.stride.1 == 0 {
            return bad(format!("stride {:?}: time stride must be 1", self.stride));
        }
        if self.lstm_layers == 0 {
            return bad("lstm_layers must be >= 1".into());
        }
        if self.phase_width < 2 || self.phase_width % 2 != 0 {
            return bad(format!("phase_width {} must be even and >= 2", self.phase_width));
        }
        if self.phase_blocks == 0 {
            return bad("phase_blocks must be >= 1".into());
        }
        self.freqs().map(|_| ())
    }

    /// Frequency extent at the input and after each encoder stage
    /// (`STAGES + 1` entries).
    pub fn freqs(&self) -> Result<Vec<usize>> {
        let mut f = vec![self.freq_bins];
        for i in 0..STAGES {
            let padded = f[i] + 2 * self.freq_padding;
            if padded < self.kernel.1 {
                return Err(Error::InvalidArgument(format!(
                    "{} frequency bins are too few: stage {} sees {padded} padded bins for kernel width {}",
                    self.freq_bins,
                    i + 1,
                    self.kernel.1
                )));
            }
            f.push((padded - self.kernel.1) / self.stride.1 + 1);
        }
        Ok(f)
    }

    /// Flattened features per frame of one encoder's bottleneck.
    pub fn bottleneck(&self) -> Result<usize> {
        Ok(self.channels[STAGES - 1] * self.freqs()?[STAGES])
    }

    pub fn lstm_hidden(&self) -> Result<usize> {
        Ok(2 * self.bottleneck()?)
    }
}

/// Named architecture and STFT bundles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Two channels per stage on 9 bins; for gradient checks.
    Micro,
    /// Desk-scale toy model on 17 bins.
    Tiny,
    /// Full 5-stage widths on the 161-bin default STFT.
    PaperShape,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Micro, Preset::Tiny, Preset::PaperShape];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Micro => "micro",
            Preset::Tiny => "tiny",
            Preset::PaperShape => "paper-shape",
        }
    }

    pub fn stft(self) -> StftConfig {
        let (n, hop) = match self {
            Preset::Micro => (16, 8),
            Preset::Tiny => (32, 16),
            Preset::PaperShape => (320, 160),
        };
        StftConfig::new(n, hop, n, WindowKind::SqrtHann).expect("preset STFT is COLA")
    }

    pub fn model(self) -> ModelConfig {
        let freq_bins = self.stft().bins();
        match self {
            Preset::Micro => ModelConfig {
                freq_bins,
                channels: [2; STAGES],
                kernel: (2, 3),
                stride: (1, 2),
                freq_padding: 1,
                lstm_layers: 2,
                phase_width: 4,
                phase_blocks: 3,
            },
            Preset::Tiny => ModelConfig {
                freq_bins,
                channels: [4, 8, 8, 16, 16],
                kernel: (2, 3),
                stride: (1, 2),
                freq_padding: 1,
                lstm_layers: 2,
                phase_width: 4,
                phase_blocks: 3,
            },
            Preset::PaperShape => ModelConfig {
                freq_bins,
                channels: [16, 32, 48, 64, 80],
                kernel: (2, 3),
                stride: (1, 2),
                freq_padding: 0,
                lstm_layers: 2,
                phase_width: 8,
                phase_blocks: 3,
            },
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown preset {s:?}; expected one of micro, tiny, paper-shape"
                ))
            })
    }
}
