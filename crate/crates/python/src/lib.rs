//! Python bindings: `import dca_fusion`.
//!
//! Matrices cross the boundary as lists of rows. Feature matrices are
//! `d x L` (one column per clip), as in the Rust crate.

use std::path::PathBuf;

use dca_core::fusion::{self, FeatureSequence, FusionMode, FusionParams, Modality};
use dca_core::io;
use dca_core::metrics;
use dca_core::numcore::Matrix;
use dca_core::synthdata::{self, GeneratorConfig};
use dca_core::trainer::{self, HyperParams, RunResult};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: io::IoError) -> PyErr {
    match e {
        io::IoError::Fs { .. } => PyIOError::new_err(e.to_string()),
        other => value_err(other),
    }
}

fn parse_mode(mode: &str) -> PyResult<FusionMode> {
    mode.parse().map_err(value_err)
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.to_rows()
}

fn from_rows(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(value_err)
}

fn features(modality: Modality, rows: Vec<Vec<f64>>) -> PyResult<FeatureSequence> {
    FeatureSequence::new(modality, from_rows(rows)?).map_err(value_err)
}

/// Deserializes keyword arguments into `T` through Python's `json` module,
/// so unknown keys are rejected just like in a config file.
fn from_kwargs<T: serde::de::DeserializeOwned + Default>(
    py: Python<'_>,
    kwargs: Option<&Bound<'_, PyDict>>,
) -> PyResult<T> {
    match kwargs {
        None => Ok(T::default()),
        Some(d) => {
            let text: String = py.import("json")?.call_method1("dumps", (d,))?.extract()?;
            serde_json::from_str(&text).map_err(value_err)
        }
    }
}

/// A generated or loaded train/validation split.
#[pyclass(module = "dca_fusion", frozen)]
struct Dataset {
    inner: synthdata::Dataset,
}

impl Dataset {
    fn split(&self, split: &str) -> PyResult<&[synthdata::LabeledSequence]> {
        match split {
            "train" => Ok(&self.inner.train),
            "val" => Ok(&self.inner.val),
            other => Err(value_err(format!("unknown split `{other}` (train or val)"))),
        }
    }
}

#[pymethods]
impl Dataset {
    /// Reads `train.avfs` and `val.avfs` from `directory`.
    #[staticmethod]
    fn load(directory: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: synthdata::Dataset {
                train: io::read_avfs(&directory.join("train.avfs")).map_err(io_err)?,
                val: io::read_avfs(&directory.join("val.avfs")).map_err(io_err)?,
            },
        })
    }

    fn save(&self, directory: PathBuf) -> PyResult<()> {
        std::fs::create_dir_all(&directory).map_err(|e| PyIOError::new_err(e.to_string()))?;
        io::write_avfs(&directory.join("train.avfs"), &self.inner.train).map_err(io_err)?;
        io::write_avfs(&directory.join("val.avfs"), &self.inner.val).map_err(io_err)
    }

    #[getter]
    fn n_train(&self) -> usize {
        self.inner.train.len()
    }

    #[getter]
    fn n_val(&self) -> usize {
        self.inner.val.len()
    }

    /// `(d_a, d_v)`, or `None` when both splits are empty.
    #[getter]
    fn dims(&self) -> Option<(usize, usize)> {
        self.inner.dims()
    }

    /// One sequence as a dict with `xa`, `xv`, `valence`, `arousal`,
    /// `corrupted_audio` and `corrupted_visual`.
    fn sequence<'py>(
        &self,
        py: Python<'py>,
        split: &str,
        index: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let seqs = self.split(split)?;
        let s = seqs.get(index).ok_or_else(|| {
            value_err(format!(
                "index {index} out of range for {} sequences",
                seqs.len()
            ))
        })?;
        let d = PyDict::new(py);
        d.set_item("xa", to_rows(s.xa.features()))?;
        d.set_item("xv", to_rows(s.xv.features()))?;
        d.set_item("valence", s.labels.valence().to_vec())?;
        d.set_item("arousal", s.labels.arousal().to_vec())?;
        d.set_item("corrupted_audio", s.mask.audio.clone())?;
        d.set_item("corrupted_visual", s.mask.visual.clone())?;
        Ok(d)
    }

    fn __len__(&self) -> usize {
        self.inner.train.len() + self.inner.val.len()
    }

    fn __repr__(&self) -> String {
        let dims = self
            .inner
            .dims()
            .map_or("empty".to_string(), |(a, v)| format!("d_a={a}, d_v={v}"));
        format!(
            "Dataset(n_train={}, n_val={}, {dims})",
            self.inner.train.len(),
            self.inner.val.len()
        )
    }
}

/// Fusion parameters plus the mode they were trained for.
#[pyclass(module = "dca_fusion", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Model {
    mode: FusionMode,
    params: FusionParams,
}

#[pymethods]
impl Model {
    /// Freshly initialised parameters.
    #[new]
    #[pyo3(signature = (d_a, d_v, mode="dca", seed=0, temperature=0.1))]
    fn new(d_a: usize, d_v: usize, mode: &str, seed: u64, temperature: f64) -> PyResult<Self> {
        if d_a == 0 || d_v == 0 {
            return Err(value_err("dimensions must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            mode: parse_mode(mode)?,
            params: FusionParams::init(d_a, d_v, temperature, &mut rng),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (mode, params) = io::read_model(&path).map_err(io_err)?;
        Ok(Self { mode, params })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_model(&path, self.mode, &self.params).map_err(io_err)
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.mode.name()
    }

    #[getter]
    fn temperature(&self) -> f64 {
        self.params.temperature
    }

    /// Parameter matrices by name.
    fn parameters<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        let p = &self.params;
        for (name, m) in ["w", "gate_audio", "gate_visual", "head_w", "head_b"]
            .iter()
            .zip(p.matrices())
        {
            d.set_item(name, to_rows(m))?;
        }
        Ok(d)
    }

    /// Forward pass on one sequence. Returns `fused` (`(d_a + d_v) x L`),
    /// `predictions` (`2 x L`, valence then arousal) and, for DCA, per-clip
    /// `gates_audio` / `gates_visual` rows of `[unattended, attended]`.
    fn forward<'py>(
        &self,
        py: Python<'py>,
        xa: Vec<Vec<f64>>,
        xv: Vec<Vec<f64>>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let xa = features(Modality::Audio, xa)?;
        let xv = features(Modality::Visual, xv)?;
        let out = fusion::fuse_forward(&xa, &xv, &self.params, self.mode).map_err(value_err)?;
        let preds = fusion::predict(&out.fused, &self.params.head_w, &self.params.head_b)
            .map_err(value_err)?;
        let d = PyDict::new(py);
        d.set_item("fused", to_rows(&out.fused))?;
        d.set_item("predictions", to_rows(&preds.to_matrix()))?;
        if let Some(g) = out.gates {
            d.set_item("gates_audio", to_rows(&g.audio.scores))?;
            d.set_item("gates_visual", to_rows(&g.visual.scores))?;
        }
        Ok(d)
    }

    /// Writes per-clip gate scores on the validation split to a CSV file.
    fn export_gates(&self, dataset: &Dataset, path: PathBuf) -> PyResult<()> {
        io::export_gate_scores(self.mode, &self.params, &dataset.inner.val, &path).map_err(io_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(mode={}, d_a={}, d_v={}, temperature={})",
            self.mode.name(),
            self.params.d_a(),
            self.params.d_v(),
            self.params.temperature
        )
    }
}

/// Outcome of one training run.
#[pyclass(module = "dca_fusion", frozen)]
struct Run {
    inner: RunResult,
}

#[pymethods]
impl Run {
    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode.name()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn ccc_valence(&self) -> f64 {
        self.inner.ccc_valence
    }

    #[getter]
    fn ccc_arousal(&self) -> f64 {
        self.inner.ccc_arousal
    }

    #[getter]
    fn epochs_to_best(&self) -> usize {
        self.inner.epochs_to_best
    }

    #[getter]
    fn loss_history(&self) -> Vec<f64> {
        self.inner.loss_history.clone()
    }

    #[getter]
    fn val_history(&self) -> Vec<f64> {
        self.inner.val_history.clone()
    }

    #[getter]
    fn model(&self) -> Model {
        Model {
            mode: self.inner.mode,
            params: self.inner.final_params.clone(),
        }
    }

    /// Attended-gate statistics as a JSON string, or `None` for CA runs.
    #[getter]
    fn gate_stats(&self) -> Option<String> {
        self.inner
            .gate_stats
            .as_ref()
            .map(|g| serde_json::to_string(g).expect("plain numbers"))
    }

    fn __repr__(&self) -> String {
        format!(
            "Run(mode={}, seed={}, ccc_valence={:.4}, ccc_arousal={:.4})",
            self.inner.mode.name(),
            self.inner.seed,
            self.inner.ccc_valence,
            self.inner.ccc_arousal
        )
    }
}

/// Synthetic dataset; keyword arguments are generator config fields.
#[pyfunction]
#[pyo3(signature = (**config))]
fn generate(py: Python<'_>, config: Option<&Bound<'_, PyDict>>) -> PyResult<Dataset> {
    let cfg: GeneratorConfig = from_kwargs(py, config)?;
    let inner = py.detach(|| synthdata::generate(&cfg)).map_err(value_err)?;
    Ok(Dataset { inner })
}

/// Trains one model; keyword arguments are hyperparameter fields.
#[pyfunction]
#[pyo3(signature = (dataset, mode="dca", **hyper))]
fn train(
    py: Python<'_>,
    dataset: &Dataset,
    mode: &str,
    hyper: Option<&Bound<'_, PyDict>>,
) -> PyResult<Run> {
    let mode = parse_mode(mode)?;
    let hyper: HyperParams = from_kwargs(py, hyper)?;
    let inner = py
        .detach(|| trainer::train(mode, &dataset.inner, &hyper))
        .map_err(value_err)?;
    Ok(Run { inner })
}

/// Every `(mode, seed)` pair on one dataset, modes outermost.
#[pyfunction]
#[pyo3(signature = (dataset, seeds, modes=vec!["ca".to_string(), "dca".to_string()], **hyper))]
fn ablate(
    py: Python<'_>,
    dataset: &Dataset,
    seeds: Vec<u64>,
    modes: Vec<String>,
    hyper: Option<&Bound<'_, PyDict>>,
) -> PyResult<Vec<Run>> {
    let modes = modes
        .iter()
        .map(|m| parse_mode(m))
        .collect::<PyResult<Vec<_>>>()?;
    let hyper: HyperParams = from_kwargs(py, hyper)?;
    let table = py
        .detach(|| trainer::ablate(&dataset.inner, &seeds, &modes, &hyper))
        .map_err(value_err)?;
    Ok(table.runs.into_iter().map(|inner| Run { inner }).collect())
}

/// Concordance correlation coefficient of two equal-length sequences.
#[pyfunction]
fn ccc(pred: Vec<f64>, gold: Vec<f64>) -> PyResult<f64> {
    metrics::ccc(&pred, &gold)
        .map(|a| a.value)
        .map_err(value_err)
}

/// Row-wise softmax of `L x 2` gate logits at `temperature`.
#[pyfunction]
#[pyo3(signature = (logits, temperature=0.1))]
fn gate_scores(logits: Vec<Vec<f64>>, temperature: f64) -> PyResult<Vec<Vec<f64>>> {
    let g = fusion::gate_scores(&from_rows(logits)?, temperature).map_err(value_err)?;
    Ok(to_rows(&g.scores))
}

/// Largest relative error between analytic and finite-difference gradients
/// over `configs` random problems.
#[pyfunction]
#[pyo3(signature = (seed=0, configs=20, mode="dca"))]
fn gradient_check(py: Python<'_>, seed: u64, configs: u64, mode: &str) -> PyResult<f64> {
    let mode = parse_mode(mode)?;
    py.detach(|| {
        let mut worst: f64 = 0.0;
        for k in 0..configs {
            let report = trainer::gradient_probe(seed + k, mode, trainer::LossKind::Ccc)?;
            worst = worst.max(report.max_relative_error);
        }
        Ok::<_, trainer::TrainError>(worst)
    })
    .map_err(value_err)
}

/// Writes `results.csv` rows for `runs`.
#[pyfunction]
fn write_results(runs: &Bound<'_, PyList>, path: PathBuf) -> PyResult<()> {
    let runs = runs
        .iter()
        .map(|r| Ok(r.cast::<Run>()?.get().inner.clone()))
        .collect::<PyResult<Vec<_>>>()?;
    io::write_results_csv(&path, &runs).map_err(io_err)
}

#[pymodule]
fn dca_fusion(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_class::<Run>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(ccc, m)?)?;
    m.add_function(wrap_pyfunction!(gate_scores, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    m.add_function(wrap_pyfunction!(write_results, m)?)?;
    Ok(())
}
