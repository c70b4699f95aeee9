//! Python bindings: models, corpus simulation, training and metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use sjen::audio::{StftConfig, Waveform};
use sjen::datasim::{load_records, synth_corpus, SimConfig, Split};
use sjen::metrics;
use sjen::model::{self, ModelKind, Preset, Sjen};
use sjen::trainer::{self, TrainConfig};

fn to_py(e: sjen::Error) -> PyErr {
    match e {
        sjen::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        sjen::Error::NonFinite(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_preset(name: &str) -> PyResult<Preset> {
    name.parse().map_err(to_py)
}

fn parse_kind(name: &str) -> PyResult<ModelKind> {
    ModelKind::parse(&name.replace('-', "_")).map_err(|_| {
        PyValueError::new_err(format!(
            "unknown model kind {name:?}; expected teacher, bad_student or student"
        ))
    })
}

fn waveform(samples: Vec<f64>, sample_rate: u32) -> PyResult<Waveform> {
    Waveform::new(samples, sample_rate).map_err(to_py)
}

/// A teacher, bad-student or student network with its STFT settings.
#[pyclass(unsendable, name = "Model")]
pub struct PyModel {
    inner: Sjen,
    stft: StftConfig,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (kind, preset = "tiny", seed = 0))]
    fn new(kind: &str, preset: &str, seed: u64) -> PyResult<Self> {
        let p = parse_preset(preset)?;
        Ok(Self {
            inner: Sjen::new(parse_kind(kind)?, &p.model(), seed).map_err(to_py)?,
            stft: p.stft(),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, stft) = Sjen::load(path).map_err(to_py)?;
        Ok(Self { inner, stft })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.to_checkpoint(&self.stft).save(path).map_err(to_py)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind().as_str()
    }

    #[getter]
    fn freq_bins(&self) -> usize {
        self.stft.bins()
    }

    fn num_params(&self) -> usize {
        metrics::count_params(&self.inner.params, &[])
    }

    /// Multiply-accumulates per second of audio.
    #[pyo3(signature = (sample_rate = 16000))]
    fn flops_per_second(&self, sample_rate: u32) -> PyResult<u64> {
        let frames = self.stft.frames_for(sample_rate as usize);
        metrics::count_flops(self.inner.config(), self.inner.kind(), frames).map_err(to_py)
    }

    /// Enhances a mono signal; returns a signal of the same length.
    #[pyo3(signature = (samples, sample_rate = 16000))]
    fn enhance(&self, samples: Vec<f64>, sample_rate: u32) -> PyResult<Vec<f64>> {
        let w = waveform(samples, sample_rate)?;
        Ok(model::enhance(&self.inner, &self.stft, &w).map_err(to_py)?.into_samples())
    }

    fn __repr__(&self) -> String {
        format!("Model(kind={:?}, params={})", self.kind(), self.num_params())
    }
}

/// Writes `n` simulated records and a manifest into `out_dir`.
#[pyfunction]
#[pyo3(signature = (out_dir, split, n, seed = 0, duration_secs = 1.0))]
fn simulate(out_dir: PathBuf, split: &str, n: usize, seed: u64, duration_secs: f64) -> PyResult<PathBuf> {
    let split = match split {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(PyValueError::new_err(format!("split must be train or test, got {other:?}"))),
    };
    let cfg = SimConfig {
        duration_secs,
        ..Default::default()
    };
    synth_corpus(&cfg, &out_dir, split, n, seed).map_err(to_py)?;
    Ok(out_dir.join(sjen::datasim::MANIFEST_NAME))
}

/// Trains one phase on a manifest. The student needs both frozen models.
#[pyfunction]
#[pyo3(signature = (
    phase, manifest, preset = "tiny", epochs = 20, learning_rate = 0.001, batch_size = 4, seed = 0,
    teacher = None, bad_student = None
))]
#[allow(clippy::too_many_arguments)]
fn train(
    phase: &str,
    manifest: PathBuf,
    preset: &str,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
    teacher: Option<PyRef<'_, PyModel>>,
    bad_student: Option<PyRef<'_, PyModel>>,
) -> PyResult<PyModel> {
    let p = parse_preset(preset)?;
    let cfg = TrainConfig {
        epochs,
        learning_rate,
        batch_size,
        seed,
        ..Default::default()
    };
    let records = load_records(&manifest).map_err(to_py)?;
    let ex = trainer::prepare_examples(&records, &p.stft()).map_err(to_py)?;
    let outcome = match parse_kind(phase)? {
        ModelKind::Teacher => trainer::train_teacher(&ex, &p.model(), &cfg),
        ModelKind::BadStudent => trainer::train_bad_student(&ex, &p.model(), &cfg),
        ModelKind::Student => match (&teacher, &bad_student) {
            (Some(t), Some(b)) => trainer::train_student(&ex, &p.model(), &cfg, &t.inner, &b.inner),
            _ => return Err(PyValueError::new_err("the student phase needs teacher and bad_student")),
        },
    }
    .map_err(to_py)?;
    Ok(PyModel {
        inner: outcome.model,
        stft: p.stft(),
    })
}

#[pyfunction]
#[pyo3(signature = (reference, estimate, sample_rate = 16000))]
fn si_sdr(reference: Vec<f64>, estimate: Vec<f64>, sample_rate: u32) -> PyResult<f64> {
    metrics::si_sdr(&waveform(reference, sample_rate)?, &waveform(estimate, sample_rate)?).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (clean, processed, sample_rate = 16000))]
fn stoi(clean: Vec<f64>, processed: Vec<f64>, sample_rate: u32) -> PyResult<f64> {
    metrics::stoi(&waveform(clean, sample_rate)?, &waveform(processed, sample_rate)?).map_err(to_py)
}

#[pymodule]
fn pysjen(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(si_sdr, m)?)?;
    m.add_function(wrap_pyfunction!(stoi, m)?)?;
    m.add("PRESETS", Preset::ALL.map(|p| p.name()).to_vec())?;
    Ok(())
}
