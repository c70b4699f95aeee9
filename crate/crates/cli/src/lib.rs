//! Commands behind the `sjen` binary.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sjen::audio::{read_wav, write_wav, SampleFormat, StftConfig, Waveform};
use sjen::datasim::{load_records, speech_like, synth_corpus, Split, MANIFEST_NAME};
use sjen::metrics::{count_params, evaluate, measure_rtf, model_stats};
use sjen::model::{enhance, ModelKind, Preset, Sjen};
use sjen::trainer::{prepare_examples, train_bad_student, train_student, train_teacher, write_log_csv, TrainPhase};

pub use config::{ConfigError, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Run(#[from] sjen::Error),
}

impl CliError {
    /// 1 usage or configuration, 2 data or shape, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Run(e) if e.is_data_error() => 2,
            CliError::Run(_) => 3,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Run(sjen::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

pub struct SimulateArgs {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
    pub force: bool,
}

/// Writes `train/` and `test/` corpora with their manifests.
pub fn cmd_simulate(cfg: &RunConfig, args: &SimulateArgs) -> CliResult<String> {
    let out = args.out.clone().unwrap_or_else(|| cfg.paths.corpus_dir.clone());
    let non_empty = fs::read_dir(&out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty {
        if !args.force {
            return Err(CliError::Usage(format!(
                "{} exists and is not empty; pass --force to replace it",
                out.display()
            )));
        }
        fs::remove_dir_all(&out).map_err(|e| io_err(&out, e))?;
    }
    let seed = args.seed.unwrap_or(cfg.seed);
    let n_train = args.n_train.unwrap_or(cfg.corpus.n_train);
    let n_test = args.n_test.unwrap_or(cfg.corpus.n_test);
    let mut lines = Vec::new();
    for (split, n) in [(Split::Train, n_train), (Split::Test, n_test)] {
        let rows = synth_corpus(&cfg.sim, &out.join(split.as_str()), split, n, seed)?;
        lines.push(format!("{}: {} records", split.as_str(), rows.len()));
    }
    Ok(lines.join("\n"))
}

pub struct TrainArgs {
    pub phase: TrainPhase,
    pub manifest: Option<PathBuf>,
    pub ckpt_out: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
    pub bad_student: Option<PathBuf>,
}

fn phase_name(p: TrainPhase) -> &'static str {
    match p {
        TrainPhase::Teacher => "teacher",
        TrainPhase::BadStudent => "bad-student",
        TrainPhase::Student => "student",
    }
}

fn load_frozen(path: &Path, want: ModelKind, cfg: &RunConfig) -> CliResult<Sjen> {
    let (m, stft) = Sjen::load(path)?;
    if m.kind() != want {
        return Err(CliError::Usage(format!(
            "{} holds a {} network, expected {}",
            path.display(),
            m.kind().as_str(),
            want.as_str()
        )));
    }
    if stft != cfg.stft {
        return Err(CliError::Run(sjen::Error::Checkpoint(format!(
            "{} was trained with a different STFT",
            path.display()
        ))));
    }
    Ok(m)
}

/// Trains one phase; writes the checkpoint and a per-epoch CSV log next to it.
pub fn cmd_train(cfg: &RunConfig, args: &TrainArgs) -> CliResult<String> {
    let frozen = match args.phase {
        TrainPhase::Student => match (&args.teacher, &args.bad_student) {
            (Some(t), Some(b)) => Some((
                load_frozen(t, ModelKind::Teacher, cfg)?,
                load_frozen(b, ModelKind::BadStudent, cfg)?,
            )),
            _ => {
                return Err(CliError::Usage(
                    "the student phase needs both --teacher and --bad-student checkpoints".into(),
                ))
            }
        },
        _ => None,
    };
    let manifest = args
        .manifest
        .clone()
        .unwrap_or_else(|| cfg.paths.corpus_dir.join(Split::Train.as_str()).join(MANIFEST_NAME));
    let records = load_records(&manifest)?;
    let examples = prepare_examples(&records, &cfg.stft)?;
    let outcome = match (args.phase, &frozen) {
        (TrainPhase::Teacher, _) => train_teacher(&examples, &cfg.model, &cfg.train)?,
        (TrainPhase::BadStudent, _) => train_bad_student(&examples, &cfg.model, &cfg.train)?,
        (TrainPhase::Student, Some((t, b))) => train_student(&examples, &cfg.model, &cfg.train, t, b)?,
        (TrainPhase::Student, None) => unreachable!("checked above"),
    };
    let ckpt = args
        .ckpt_out
        .clone()
        .unwrap_or_else(|| cfg.paths.checkpoint_dir.join(format!("{}.ckpt", phase_name(args.phase))));
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    outcome.model.to_checkpoint(&cfg.stft).save(&ckpt)?;
    let log_path = ckpt.with_extension("csv");
    write_log_csv(&log_path, &outcome.log)?;
    let last = outcome.log.last().expect("at least one epoch");
    Ok(format!(
        "{}: {} epochs, final l_total {:.6}; wrote {} and {}",
        phase_name(args.phase),
        outcome.log.len(),
        last.l_total,
        ckpt.display(),
        log_path.display()
    ))
}

pub fn cmd_enhance(ckpt: &Path, input: &Path, output: &Path) -> CliResult<String> {
    let (model, stft) = Sjen::load(ckpt)?;
    let mut channels = read_wav(input)?;
    if channels.len() != 1 {
        return Err(CliError::Run(sjen::Error::InvalidArgument(format!(
            "{} has {} channels; enhancement takes a mono mixture",
            input.display(),
            channels.len()
        ))));
    }
    let noisy = channels.remove(0);
    let out = enhance(&model, &stft, &noisy)?;
    write_wav(output, &[&out], SampleFormat::Float32)?;
    Ok(format!("wrote {} ({} samples)", output.display(), out.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
}

pub struct EvaluateArgs {
    pub ckpt: PathBuf,
    pub manifest: Option<PathBuf>,
    pub format: ReportFormat,
    pub out: Option<PathBuf>,
}

/// Scores a checkpoint on the test manifest; returns the rendered report.
pub fn cmd_evaluate(cfg: &RunConfig, args: &EvaluateArgs) -> CliResult<String> {
    let (model, stft) = Sjen::load(&args.ckpt)?;
    if !model.kind().has_phase() {
        return Err(CliError::Usage("evaluate needs a student or bad-student checkpoint".into()));
    }
    let manifest = args
        .manifest
        .clone()
        .unwrap_or_else(|| cfg.paths.corpus_dir.join(Split::Test.as_str()).join(MANIFEST_NAME));
    let records = load_records(&manifest)?;
    let report = evaluate(&model, &stft, &records, &cfg.sim.test_snrs_db)?;
    let text = match args.format {
        ReportFormat::Table => report.to_table(),
        ReportFormat::Csv => report.to_csv()?,
    };
    if let Some(out) = &args.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        fs::write(out, &text).map_err(|e| io_err(out, e))?;
    }
    Ok(text)
}

pub struct BenchArgs {
    pub ckpt: Option<PathBuf>,
    pub preset: Option<Preset>,
    pub seconds: f64,
    pub repeats: usize,
}

fn bench_line(label: &str, model: &Sjen, stft: &StftConfig, args: &BenchArgs) -> CliResult<String> {
    let audio = speech_waveform(args.seconds)?;
    let rtf = measure_rtf(model, stft, &audio, args.repeats)?;
    let stats = model_stats(model, stft, audio.sample_rate(), Some(rtf))?;
    Ok(format!(
        "{label} {}: params {} ({:.4} M), FLOPs {:.4} G MAC/s, RTF {rtf:.4}",
        model.kind().as_str(),
        count_params(&model.params, &[]),
        stats.params_m,
        stats.flops_g,
    ))
}

/// Parameters, multiply-accumulates per second of audio, and real-time
/// factor, for one checkpoint or for freshly initialized presets.
pub fn cmd_bench(args: &BenchArgs) -> CliResult<String> {
    if !(args.seconds > 0.0 && args.seconds.is_finite()) || args.repeats == 0 {
        return Err(CliError::Usage("--seconds must be > 0 and --repeats >= 1".into()));
    }
    let mut lines = vec!["# FLOPs are multiply-accumulates per second of 16 kHz audio".to_string()];
    if let Some(path) = &args.ckpt {
        let (model, stft) = Sjen::load(path)?;
        lines.push(bench_line(&path.display().to_string(), &model, &stft, args)?);
    } else {
        let presets: Vec<Preset> = args.preset.map_or_else(|| Preset::ALL.to_vec(), |p| vec![p]);
        for p in presets {
            let model = Sjen::new(ModelKind::Student, &p.model(), 0)?;
            lines.push(bench_line(p.name(), &model, &p.stft(), args)?);
        }
    }
    Ok(lines.join("\n"))
}

/// Fixed synthetic speech for timing runs.
fn speech_waveform(seconds: f64) -> sjen::Result<Waveform> {
    const SR: u32 = 16_000;
    let len = (seconds * SR as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Waveform::new(speech_like(&mut rng, len, SR), SR)
}
