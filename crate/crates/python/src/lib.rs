//! Python bindings: attention blocks, the identity suites, scenes, training
//! and the complexity formulas.
//!
//! Matrices cross the boundary as lists of rows.

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dnllab::analysis::{self, SuiteConfig};
use dnllab::attention::{self, BlockParams, Variant};
use dnllab::autograd::{DEFAULT_STEP, DEFAULT_TOL};
use dnllab::bench;
use dnllab::gradcheck as gc;
use dnllab::io::WeightsFile;
use dnllab::scene::{self, SceneConfig};
use dnllab::train::{self, ToyModel, TrainConfig};
use dnllab::{Error, FeatureMap, Tensor};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        Error::Shape { .. } | Error::Invalid(_) | Error::Domain(_) | Error::Format { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Tensor::new(vec![r, c], rows.into_iter().flatten().collect()).map_err(to_py)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    match t.shape() {
        [_, c] => t.data().chunks(*c).map(<[f64]>::to_vec).collect(),
        _ => vec![t.data().to_vec()],
    }
}

fn variant(name: &str) -> PyResult<Variant> {
    name.parse().map_err(to_py)
}

/// Names of the six block variants.
#[pyfunction]
fn variants() -> Vec<&'static str> {
    Variant::ALL.iter().map(|v| v.name()).collect()
}

/// One attention block with its own weights.
#[pyclass(name = "Block")]
struct PyBlock {
    variant: Variant,
    params: BlockParams,
}

#[pymethods]
impl PyBlock {
    /// Freshly initialised block: `Wout` and `Wm` start at zero.
    #[new]
    #[pyo3(signature = (variant, channels, seed = 0))]
    fn new(variant: &str, channels: usize, seed: u64) -> PyResult<Self> {
        let v = self::variant(variant)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = BlockParams::init(channels, v, &mut rng).map_err(to_py)?;
        Ok(PyBlock { variant: v, params })
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.variant.name()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.params.channels()
    }

    fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Named weight matrices.
    fn weights(&self) -> Vec<(&'static str, Vec<Vec<f64>>)> {
        self.params
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, rows(t)))
            .collect()
    }

    /// Replaces one weight matrix, keeping its shape.
    fn set_weight(&mut self, name: &str, value: Vec<Vec<f64>>) -> PyResult<()> {
        let t = matrix(value)?;
        let p = &mut self.params;
        let slot = match name {
            "wq" => &mut p.wq,
            "wk" => &mut p.wk,
            "wv" => &mut p.wv,
            "wout" => &mut p.wout,
            "wm" => {
                p.wm.as_mut()
                    .ok_or_else(|| PyValueError::new_err("this variant has no wm"))?
            }
            _ => return Err(PyValueError::new_err(format!("unknown weight {name:?}"))),
        };
        if slot.shape() != t.shape() {
            return Err(PyValueError::new_err(format!(
                "expected shape {:?}, got {:?}",
                slot.shape(),
                t.shape()
            )));
        }
        *slot = t;
        Ok(())
    }

    /// Runs the block on `x` (`C` rows of `height·width` pixels) and returns
    /// `{"y", "total", "pairwise", "unary"}`.
    fn forward<'py>(
        &self,
        py: Python<'py>,
        x: Vec<Vec<f64>>,
        height: usize,
        width: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let fm = FeatureMap::from_matrix(&matrix(x)?, height, width).map_err(to_py)?;
        let (y, d) = attention::block_forward(&fm, &self.params, self.variant).map_err(to_py)?;
        let out = PyDict::new(py);
        out.set_item("y", rows(&y.to_matrix()))?;
        out.set_item("total", rows(&d.total))?;
        out.set_item("pairwise", rows(&d.pairwise_norm))?;
        out.set_item("unary", d.unary_norm.data().to_vec())?;
        Ok(out)
    }

    fn __repr__(&self) -> String {
        format!(
            "Block({}, channels={})",
            self.variant,
            self.params.channels()
        )
    }
}

/// Names of the identity suites, in reporting order.
#[pyfunction]
fn suites() -> Vec<&'static str> {
    analysis::suites().iter().map(|s| s.name).collect()
}

/// Runs one identity suite and returns its report as a dict.
#[pyfunction]
#[pyo3(signature = (name, seed = 0, instances = None))]
fn run_suite<'py>(
    py: Python<'py>,
    name: &str,
    seed: u64,
    instances: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let suite = analysis::suites()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown suite {name:?}")))?;
    let r = suite
        .execute(&SuiteConfig { seed, instances })
        .map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("name", r.name)?;
    out.set_item("max_abs_error", r.max_abs_error)?;
    out.set_item("instances", r.instances_tested)?;
    out.set_item("tol", r.tol)?;
    out.set_item("pass", r.pass)?;
    Ok(out)
}

/// Splits `QᵀK` into whitened pairwise, key-unary, query-bias and constant
/// parts; `q` and `k` are `[d, HW]`.
#[pyfunction]
fn whiten_split<'py>(
    py: Python<'py>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
) -> PyResult<Bound<'py, PyDict>> {
    let s = analysis::whiten_split(&matrix(q)?, &matrix(k)?).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("pairwise", rows(&s.pairwise))?;
    out.set_item("key_unary", s.key_unary.clone())?;
    out.set_item("query_bias", s.query_bias.clone())?;
    out.set_item("const_bias", s.const_bias)?;
    Ok(out)
}

/// Finite-difference gradient check of a block variant or `"model"`;
/// returns `(pass, max_rel_error)`.
#[pyfunction(name = "gradcheck")]
#[pyo3(signature = (target, size = "4x3x3", seed = 0))]
fn run_gradcheck(target: &str, size: &str, seed: u64) -> PyResult<(bool, f64)> {
    let t: gc::Target = target.parse().map_err(to_py)?;
    let dims = gc::parse_size(size).map_err(to_py)?;
    let r = gc::check(t, dims, seed, DEFAULT_STEP, DEFAULT_TOL).map_err(to_py)?;
    Ok((r.pass, r.max_rel_error))
}

#[pyfunction]
fn param_count(variant: &str, channels: u64) -> PyResult<u64> {
    bench::param_count(self::variant(variant)?, channels).map_err(to_py)
}

/// Closed-form FLOP count; `None` for variants without one.
#[pyfunction]
fn flop_formula(variant: &str, channels: u64, pixels: u64) -> PyResult<Option<u128>> {
    bench::flop_formula(self::variant(variant)?, channels, pixels).map_err(to_py)
}

/// Multiply-adds executed by one forward pass.
#[pyfunction]
fn flop_measure(variant: &str, channels: usize, height: usize, width: usize) -> PyResult<u64> {
    bench::flop_measure(self::variant(variant)?, channels, height, width).map_err(to_py)
}

/// `(space, time)` overhead of DNL over NL in percent, 4 significant digits.
#[pyfunction]
fn overhead(channels: u64, pixels: u64) -> PyResult<(String, String)> {
    let r = &bench::overhead_report(channels, &[pixels]).map_err(to_py)?[0];
    Ok((bench::percent_sig4(&r.space), bench::percent_sig4(&r.time)))
}

/// A synthetic scene as `{"features", "labels", "boundary", "height", "width"}`.
#[pyfunction]
#[pyo3(signature = (seed, height = 32, width = 32, categories = 4))]
fn generate_scene<'py>(
    py: Python<'py>,
    seed: u64,
    height: usize,
    width: usize,
    categories: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = SceneConfig {
        height,
        width,
        categories,
        ..SceneConfig::default()
    };
    let s = scene::generate_scene(seed, &cfg).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("features", rows(&s.features.to_matrix()))?;
    out.set_item("labels", s.labels.labels().to_vec())?;
    out.set_item("boundary", s.boundary.bits().to_vec())?;
    out.set_item("height", height)?;
    out.set_item("width", width)?;
    Ok(out)
}

#[pyfunction]
#[pyo3(signature = (pred, gt, categories))]
fn miou(pred: Vec<usize>, gt: Vec<usize>, categories: usize) -> PyResult<f64> {
    let n = pred.len();
    let p = dnllab::metrics::LabelMap::new(1, n, categories, pred).map_err(to_py)?;
    let g = dnllab::metrics::LabelMap::new(1, gt.len(), categories, gt).map_err(to_py)?;
    train::miou(&p, &g).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (iteration, max_iterations, base, power = 0.9))]
fn poly_lr(iteration: usize, max_iterations: usize, base: f64, power: f64) -> PyResult<f64> {
    train::poly_lr(iteration, max_iterations, base, power).map_err(to_py)
}

/// `(iteration, lr, loss, train_miou, val_miou)`.
type TracePoint = (usize, f64, f64, f64, f64);

/// The toy segmentation model.
#[pyclass(name = "ToyModel")]
struct PyToyModel {
    config: TrainConfig,
    model: ToyModel,
}

#[pymethods]
impl PyToyModel {
    /// Trains from `key = value` overrides of the default config and
    /// returns the model; `trace` holds the checkpoints.
    #[staticmethod]
    #[pyo3(signature = (**overrides))]
    fn train(
        py: Python<'_>,
        overrides: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<(Self, Vec<TracePoint>)> {
        let mut cfg = TrainConfig::default();
        if let Some(kw) = overrides {
            for (k, v) in kw.iter() {
                cfg.set(&k.extract::<String>()?, &v.str()?.to_cow()?)
                    .map_err(to_py)?;
            }
        }
        cfg.validate().map_err(to_py)?;
        let run = cfg.clone();
        let (outcome, _, _) = py.detach(move || train::train_run(&run)).map_err(to_py)?;
        let trace = outcome
            .trace
            .iter()
            .map(|t| (t.iter, t.lr, t.loss, t.train_miou, t.val_miou))
            .collect();
        Ok((
            PyToyModel {
                config: cfg,
                model: outcome.model,
            },
            trace,
        ))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let w = WeightsFile::load(std::path::Path::new(path)).map_err(to_py)?;
        let (config, model) = ToyModel::from_weights(&w).map_err(to_py)?;
        Ok(PyToyModel { config, model })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.model
            .to_weights(&self.config)
            .save(std::path::Path::new(path))
            .map_err(to_py)
    }

    /// Resolved configuration as `(key, value)` pairs.
    fn config(&self) -> Vec<(String, String)> {
        self.config.pairs()
    }

    /// Per-pixel class predictions for a scene's features.
    fn predict(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        let s = &self.config.scene;
        let fm = FeatureMap::from_matrix(&matrix(features)?, s.height, s.width).map_err(to_py)?;
        Ok(self.model.predict(&fm).map_err(to_py)?.labels().to_vec())
    }

    /// Attention rows `[HW][HW]` of the trained block.
    fn attention(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let s = &self.config.scene;
        let fm = FeatureMap::from_matrix(&matrix(features)?, s.height, s.width).map_err(to_py)?;
        Ok(rows(&self.model.attention(&fm).map_err(to_py)?.total))
    }
}

#[pymodule]
fn pydnllab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBlock>()?;
    m.add_class::<PyToyModel>()?;
    m.add_function(wrap_pyfunction!(variants, m)?)?;
    m.add_function(wrap_pyfunction!(suites, m)?)?;
    m.add_function(wrap_pyfunction!(run_suite, m)?)?;
    m.add_function(wrap_pyfunction!(whiten_split, m)?)?;
    m.add_function(wrap_pyfunction!(run_gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(flop_formula, m)?)?;
    m.add_function(wrap_pyfunction!(flop_measure, m)?)?;
    m.add_function(wrap_pyfunction!(overhead, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(poly_lr, m)?)?;
    Ok(())
}
