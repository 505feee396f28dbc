//! Python bindings: corpus generation and scoring, grid geometry, schedules,
//! FLOPs accounting, training runs, and sampling from checkpoints.

use std::path::Path;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

use foresight::alignment::{lambda_at as core_lambda_at, ScheduleSpec};
use foresight::checkpoint::Checkpoint;
use foresight::corpus::{coherence_score, generate_sample, make_splits, CorpusConfig, TokenGrid};
use foresight::eval::{eval_validation, flops_estimate, reference_flops_configs, EncoderCost};
use foresight::geometry::{neighborhood as core_neighborhood, GridShape, Layout};
use foresight::rng;
use foresight::sampler::{load_for_sampling, sample_grid, SampleParams};
use foresight::trainer::run_training;
use foresight::{ArModel, Error, ForesightConfig, RunConfig};

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Numeric(m) => PyArithmeticError::new_err(m),
        Error::Io { .. } => PyOSError::new_err(err.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_layout(layout: &str) -> PyResult<Layout> {
    match layout {
        "1d" => Ok(Layout::Raster),
        "2d" => Ok(Layout::Grid),
        other => Err(PyValueError::new_err(format!("layout must be '1d' or '2d', got {other:?}"))),
    }
}

/// Corpus settings; the defaults match the library defaults.
#[pyclass(name = "CorpusConfig", from_py_object)]
#[derive(Clone)]
struct PyCorpusConfig {
    inner: CorpusConfig,
}

#[pymethods]
impl PyCorpusConfig {
    #[new]
    #[pyo3(signature = (vocab_size=64, height=16, width=16, num_classes=8, palette_size=4, noise_p=0.1, seed=0))]
    fn new(
        vocab_size: usize,
        height: usize,
        width: usize,
        num_classes: usize,
        palette_size: usize,
        noise_p: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let inner = CorpusConfig {
            vocab_size,
            height,
            width,
            num_classes,
            palette_size,
            noise_p,
            seed,
        };
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    /// `count` grids of class `class_id` as `(class, tokens)` pairs.
    fn generate(&self, class_id: usize, count: usize, seed: u64) -> PyResult<Vec<(usize, Vec<u16>)>> {
        let mut r = rng::stream(seed, &[class_id as u64]);
        (0..count)
            .map(|_| {
                generate_sample(&self.inner, class_id, &mut r)
                    .map(|g| (g.class_label, g.tokens))
                    .map_err(to_py)
            })
            .collect()
    }

    /// First `n` grids of the training or validation split.
    fn split(&self, which: &str, n: usize) -> PyResult<Vec<(usize, Vec<u16>)>> {
        let (train, val) = make_splits(&self.inner, n.max(1), n.max(1)).map_err(to_py)?;
        let s = match which {
            "train" => train,
            "val" => val,
            other => return Err(PyValueError::new_err(format!("split must be 'train' or 'val', got {other:?}"))),
        };
        Ok(s.iter().take(n).map(|g| (g.class_label, g.tokens)).collect())
    }

    /// Coherence score of a grid in `[0, 1]`.
    fn coherence(&self, tokens: Vec<u16>) -> PyResult<f64> {
        if tokens.len() != self.inner.height * self.inner.width {
            return Err(PyValueError::new_err("token count does not match the grid shape"));
        }
        let grid = TokenGrid { class_label: 0, tokens };
        Ok(coherence_score(&grid, &self.inner).score)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.height, self.inner.width)
    }
}

/// A trained backbone loaded from a checkpoint; only sampling-time weights.
#[pyclass(name = "Model")]
struct PyModel {
    model: ArModel,
    params: Vec<f32>,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ckpt = Checkpoint::load(Path::new(path)).map_err(to_py)?;
        let (model, params) = load_for_sampling(&ckpt).map_err(to_py)?;
        Ok(Self { model, params })
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.model.num_params()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.model.cfg.height, self.model.cfg.width)
    }

    #[getter]
    fn null_class(&self) -> usize {
        self.model.cfg.null_class()
    }

    #[pyo3(signature = (class_id, seed=0, cfg_scale=2.0, temperature=1.0, top_k=0, top_p=1.0))]
    fn sample(
        &self,
        py: Python<'_>,
        class_id: usize,
        seed: u64,
        cfg_scale: f64,
        temperature: f64,
        top_k: usize,
        top_p: f64,
    ) -> PyResult<Vec<u16>> {
        let sp = SampleParams {
            cfg_scale,
            temperature,
            top_k,
            top_p,
            seed,
        };
        py.detach(|| sample_grid(&self.model, &self.params, class_id, &sp))
            .map(|g| g.tokens)
            .map_err(to_py)
    }

    /// Mean next-token loss (nats) over `(class, tokens)` grids.
    fn validation_loss(&self, grids: Vec<(usize, Vec<u16>)>) -> PyResult<f64> {
        let grids: Vec<TokenGrid> = grids
            .into_iter()
            .map(|(class_label, tokens)| TokenGrid { class_label, tokens })
            .collect();
        eval_validation(&self.model, &self.params, &grids).map_err(to_py)
    }
}

/// K nearest not-yet-generated positions of anchor `n`.
#[pyfunction]
#[pyo3(signature = (n, k, height, width, layout="2d"))]
fn neighborhood(n: usize, k: usize, height: usize, width: usize, layout: &str) -> PyResult<Vec<usize>> {
    let shape = GridShape::new(height, width).map_err(to_py)?;
    core_neighborhood(n, k, shape, parse_layout(layout)?)
        .map(|nb| nb.targets)
        .map_err(to_py)
}

/// Alignment weight at `progress` in `[0, 1]` for a `const`, `step` or
/// `cosine` schedule.
#[pyfunction]
#[pyo3(signature = (kind, start, end=None, progress=0.0, switch_fraction=0.5))]
fn lambda_at(kind: &str, start: f64, end: Option<f64>, progress: f64, switch_fraction: f64) -> PyResult<f64> {
    let end = end.unwrap_or(start);
    let spec = match kind {
        "const" => ScheduleSpec::constant(start),
        "step" => ScheduleSpec::step(start, end, switch_fraction),
        "cosine" => ScheduleSpec::cosine(start, end),
        other => return Err(PyValueError::new_err(format!("unknown schedule {other:?}"))),
    };
    Ok(core_lambda_at(&spec, progress))
}

/// Per-sample training FLOPs at the reference scale for `mode` in
/// `none`, `implicit`, `explicit`: `(baseline, total, overhead_pct)`.
#[pyfunction]
fn reference_flops(mode: &str) -> PyResult<(f64, f64, f64)> {
    let (model, implicit, explicit) = reference_flops_configs();
    let f = match mode {
        "none" => ForesightConfig::none(),
        "implicit" => implicit,
        "explicit" => explicit,
        other => return Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
    };
    let r = flops_estimate(&model, &f, EncoderCost::Cached);
    Ok((r.baseline, r.total, r.overhead_pct))
}

/// The default run configuration as TOML text.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().to_toml()
}

/// Trains from TOML configuration text into `out_dir`; returns the final
/// checkpoint path and per-step `(step, ntp, total)` tuples.
#[pyfunction]
#[pyo3(signature = (config_toml, out_dir, steps=None))]
fn train(py: Python<'_>, config_toml: &str, out_dir: &str, steps: Option<usize>) -> PyResult<(String, Vec<(u64, f64, f64)>)> {
    let mut cfg = RunConfig::parse(config_toml).map_err(to_py)?;
    if let Some(s) = steps {
        cfg.train.total_steps = s;
    }
    let outcome = py.detach(|| run_training(&cfg, Path::new(out_dir), None)).map_err(to_py)?;
    let rows = outcome
        .metrics
        .iter()
        .map(|m| (m.step, m.ntp_loss, m.total_loss))
        .collect();
    Ok((outcome.final_checkpoint.display().to_string(), rows))
}

#[pymodule]
fn foresight_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCorpusConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(neighborhood, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_at, m)?)?;
    m.add_function(wrap_pyfunction!(reference_flops, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
