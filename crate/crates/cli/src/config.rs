//! TOML run configuration with line-numbered errors.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sjen::audio::StftConfig;
use sjen::datasim::SimConfig;
use sjen::model::{ModelConfig, Preset};
use sjen::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: PathBuf,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{l}: {}", self.path.display(), self.message),
            None => write!(f, "{}: {}", self.path.display(), self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus_dir: "corpus".into(),
            checkpoint_dir: "checkpoints".into(),
            report_dir: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSize {
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for CorpusSize {
    fn default() -> Self {
        Self { n_train: 64, n_test: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_preset")]
    preset: Preset,
    stft: Option<StftConfig>,
    #[serde(default)]
    sim: SimConfig,
    #[serde(default)]
    corpus: CorpusSize,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    paths: Paths,
}

fn default_preset() -> Preset {
    Preset::Tiny
}

/// Everything one pipeline run needs. `seed` drives both simulation and
/// training; relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: Preset,
    pub stft: StftConfig,
    pub model: ModelConfig,
    pub sim: SimConfig,
    pub corpus: CorpusSize,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let preset = default_preset();
        let seed = 0;
        Self {
            seed,
            preset,
            stft: preset.stft(),
            model: preset.model(),
            sim: SimConfig::default(),
            corpus: CorpusSize::default(),
            train: TrainConfig {
                seed,
                ..Default::default()
            },
            paths: Paths::default(),
        }
    }
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of the first `key =` assignment, optionally inside `[section]`.
fn line_of_key(text: &str, section: Option<&str>, key: &str) -> Option<usize> {
    let mut current: Option<String> = None;
    for (i, line) in text.lines().enumerate() {
        let l = line.trim();
        if let Some(name) = l.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            current = Some(name.trim().to_string());
            continue;
        }
        let in_section = match section {
            Some(s) => current.as_deref() == Some(s),
            None => current.is_none(),
        };
        if in_section && l.split('=').next().map(str::trim) == Some(key) {
            return Some(i + 1);
        }
    }
    None
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let err = |line: Option<usize>, message: String| ConfigError {
            path: path.to_path_buf(),
            line,
            message,
        };
        let raw: RawRunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of_offset(text, s.start));
            err(line, e.message().to_string())
        })?;
        if line_of_key(text, Some("train"), "seed").is_some() {
            return Err(err(
                line_of_key(text, Some("train"), "seed"),
                "train.seed is not allowed; the top-level seed drives every stage".into(),
            ));
        }
        let stft = raw.stft.unwrap_or_else(|| raw.preset.stft());
        let mut model = raw.preset.model();
        if stft.bins() != model.freq_bins {
            return Err(err(
                line_of_key(text, Some("stft"), "fft_len"),
                format!(
                    "STFT yields {} bins but preset {} expects {}",
                    stft.bins(),
                    raw.preset,
                    model.freq_bins
                ),
            ));
        }
        model.freq_bins = stft.bins();
        let mut train = raw.train;
        train.seed = raw.seed;
        let located = |section: &str, e: sjen::Error| {
            let msg = e.to_string();
            let sections = [section.to_string(), format!("{section}.weights"), format!("{section}.adam")];
            let line = msg
                .split(|c: char| !(c.is_alphanumeric() || c == '_'))
                .filter(|w| w.contains('_') || w.len() > 2)
                .find_map(|key| sections.iter().find_map(|s| line_of_key(text, Some(s), key)))
                .or_else(|| text.lines().position(|l| l.trim() == format!("[{section}]")).map(|i| i + 1));
            err(line, format!("[{section}] {msg}"))
        };
        raw.sim.validate().map_err(|e| located("sim", e))?;
        train.validate().map_err(|e| located("train", e))?;
        if raw.corpus.n_train == 0 {
            return Err(err(line_of_key(text, Some("corpus"), "n_train"), "n_train must be >= 1".into()));
        }
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        let paths = Paths {
            corpus_dir: resolve(&raw.paths.corpus_dir),
            checkpoint_dir: resolve(&raw.paths.checkpoint_dir),
            report_dir: resolve(&raw.paths.report_dir),
        };
        Ok(Self {
            seed: raw.seed,
            preset: raw.preset,
            stft,
            model,
            sim: raw.sim,
            corpus: raw.corpus,
            train,
            paths,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            path: path.to_path_buf(),
            line: None,
            message: format!("cannot read: {e}"),
        })?;
        Self::parse(&text, path)
    }
}
