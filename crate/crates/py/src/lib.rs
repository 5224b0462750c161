//! Python module `deepbound`: datasets, models, plane profiles, the bounded
//! attack and its baselines, and image metrics.
//!
//! Images cross the boundary as flat `list[float]` in channel-major order
//! with shape `(3, 32, 32)`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use deepbound::attack::{
    bim_attack, calibrate_epsilon, d2b_attack, search_step, AttackConfig, AttackResult, BarrierKind, BimConfig, Mode,
    Throttle, ThrottlePlane,
};
use deepbound::bounds::BoundKind;
use deepbound::data::{generate_dataset, LabeledDataset};
use deepbound::model::{Arch, Model, ModelSpec, INPUT_SHAPE};
use deepbound::plane::{enumerate_planes, find_plane, Plane};
use deepbound::profile::{profile_plane, PlaneProfile};
use deepbound::quantile::NeuronDistribution;
use deepbound::train::{train, TrainConfig};
use deepbound::weights::{load_model, save_model};
use deepbound::{metrics, Error, Tensor};

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        3 => PyIOError::new_err(e.to_string()),
        4 => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn image(pixels: Vec<f32>) -> PyResult<Tensor> {
    Tensor::new(INPUT_SHAPE.to_vec(), pixels).map_err(to_py)
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

#[pyclass(name = "Dataset", module = "deepbound")]
struct PyDataset {
    inner: LabeledDataset,
}

#[pymethods]
impl PyDataset {
    /// Renders `per_class` images of each of the ten classes.
    #[staticmethod]
    fn generate(seed: u64, per_class: usize) -> PyResult<Self> {
        Ok(PyDataset { inner: generate_dataset(seed, per_class).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(PyDataset { inner: LabeledDataset::import(&dir).map_err(to_py)? })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.export(&dir).map_err(to_py)
    }

    /// `(train, held_out)` with an 80/20 split.
    fn split(&self) -> (Self, Self) {
        let (a, b) = self.inner.split();
        (PyDataset { inner: a }, PyDataset { inner: b })
    }

    fn image(&self, i: usize) -> PyResult<Vec<f32>> {
        self.inner.images.get(i).map(|t| t.data().to_vec()).ok_or_else(|| PyValueError::new_err("index out of range"))
    }

    fn label(&self, i: usize) -> PyResult<usize> {
        self.inner.labels.get(i).copied().ok_or_else(|| PyValueError::new_err("index out of range"))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Model", module = "deepbound")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// Untrained model with weights drawn from `seed`.
    #[staticmethod]
    fn init(arch: &str, seed: u64) -> PyResult<Self> {
        Ok(PyModel { inner: Model::init(ModelSpec::new(parse::<Arch>(arch)?), seed).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel { inner: load_model(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&self.inner, &path).map_err(to_py)
    }

    #[getter]
    fn arch(&self) -> String {
        self.inner.spec.arch.to_string()
    }

    fn logits(&self, pixels: Vec<f32>) -> PyResult<Vec<f32>> {
        Ok(self.inner.logits(&image(pixels)?).map_err(to_py)?.into_data())
    }

    fn predict(&self, pixels: Vec<f32>) -> PyResult<usize> {
        self.inner.predict(&image(pixels)?).map_err(to_py)
    }

    /// `(id, name, neuron_count)` of every candidate throttle plane.
    fn planes(&self) -> Vec<(usize, String, usize)> {
        enumerate_planes(&self.inner.graph).into_iter().map(|p| (p.id, p.name, p.neuron_count)).collect()
    }
}

/// Trains on the first 80% of `data`; returns the model and held-out accuracy.
#[pyfunction]
#[pyo3(signature = (arch, data, seed, epochs = 30, lr = 0.02))]
fn train_model(arch: &str, data: &PyDataset, seed: u64, epochs: usize, lr: f32) -> PyResult<(PyModel, f64)> {
    let cfg = TrainConfig { epochs, lr, seed, ..TrainConfig::default() };
    let (model, report) = train(&ModelSpec::new(parse::<Arch>(arch)?), &data.inner, &cfg).map_err(to_py)?;
    Ok((PyModel { inner: model }, report.accuracy))
}

#[pyclass(name = "Distribution", module = "deepbound")]
struct PyDistribution {
    inner: NeuronDistribution,
}

#[pymethods]
impl PyDistribution {
    #[new]
    fn new(samples: Vec<f32>) -> PyResult<Self> {
        Ok(PyDistribution { inner: NeuronDistribution::from_samples(&samples).map_err(to_py)? })
    }

    fn cdf(&self, y: f32) -> f64 {
        self.inner.cdf(y)
    }

    fn quantile(&self, p: f64) -> f32 {
        self.inner.quantile(p)
    }

    /// `(low, high)` admissible interval around `y_nat`.
    #[pyo3(signature = (y_nat, eps, kind = "quantile"))]
    fn bound(&self, y_nat: f32, eps: f64, kind: &str) -> PyResult<(f32, f32)> {
        let iv = match parse::<BoundKind>(kind)? {
            BoundKind::Quantile => deepbound::bounds::quantile_bound(&self.inner, y_nat, eps),
            BoundKind::MinMax => deepbound::bounds::minmax_bound(&self.inner, y_nat, eps),
        }
        .map_err(to_py)?;
        Ok((iv.low, iv.high))
    }
}

/// Activation distributions of one plane of one model.
#[pyclass(name = "PlaneProfile", module = "deepbound")]
struct PyPlaneProfile {
    plane: Plane,
    inner: PlaneProfile,
}

#[pymethods]
impl PyPlaneProfile {
    /// Profiles plane `name` of `model` over every image of `data`.
    #[new]
    fn new(model: &PyModel, data: &PyDataset, name: &str) -> PyResult<Self> {
        let planes = enumerate_planes(&model.inner.graph);
        let plane = find_plane(&planes, name).ok_or_else(|| PyValueError::new_err(format!("unknown plane {name:?}")))?.clone();
        let inner = profile_plane(&model.inner, &data.inner.images, &plane).map_err(to_py)?;
        Ok(PyPlaneProfile { plane, inner })
    }

    #[getter]
    fn name(&self) -> &str {
        &self.plane.name
    }

    #[getter]
    fn normality(&self) -> f64 {
        self.inner.aggregate
    }

    fn __len__(&self) -> usize {
        self.inner.neuron_count()
    }
}

#[pyclass(name = "AttackResult", module = "deepbound", get_all)]
struct PyAttackResult {
    x_adv: Vec<f32>,
    success: bool,
    confidence: f64,
    iterations: usize,
    feasible: bool,
    occupancy: f64,
    quantile_distance: f64,
    step: f64,
    consistent: bool,
}

impl From<AttackResult> for PyAttackResult {
    fn from(r: AttackResult) -> Self {
        PyAttackResult {
            quantile_distance: r.quantile_distances.iter().copied().fold(0.0, f64::max),
            x_adv: r.x_adv.into_data(),
            success: r.success,
            confidence: r.confidence,
            iterations: r.iterations,
            feasible: r.feasible,
            occupancy: r.occupancy,
            step: r.step,
            consistent: r.consistent,
        }
    }
}

fn throttle<'a>(model: &'a PyModel, profile: &'a PyPlaneProfile, kind: &str, eps: f64) -> PyResult<Throttle<'a>> {
    let tp = ThrottlePlane { plane: &profile.plane, profile: &profile.inner, kind: parse(kind)?, eps };
    Throttle::new(&model.inner, vec![tp]).map_err(to_py)
}

fn attack_config(mode: &str, barrier: &str, iters: usize, step: f64, alpha: f64) -> PyResult<AttackConfig> {
    let mut cfg = AttackConfig {
        mode: parse::<Mode>(mode)?,
        barrier: parse::<BarrierKind>(barrier)?,
        max_iters: iters,
        step,
        ..AttackConfig::default()
    };
    cfg.weights.alpha = alpha;
    Ok(cfg)
}

/// Bounded-distribution attack on `model` with the plane of `profile` held
/// within `eps` of its natural value.
#[pyfunction]
#[pyo3(signature = (model, profile, pixels, label, eps, kind = "quantile", mode = "untargeted", step = 1.0 / 255.0, iters = 1000, barrier = "poly", alpha = 10.0))]
#[allow(clippy::too_many_arguments)]
fn d2b(
    model: &PyModel,
    profile: &PyPlaneProfile,
    pixels: Vec<f32>,
    label: usize,
    eps: f64,
    kind: &str,
    mode: &str,
    step: f64,
    iters: usize,
    barrier: &str,
    alpha: f64,
) -> PyResult<PyAttackResult> {
    let th = throttle(model, profile, kind, eps)?;
    let cfg = attack_config(mode, barrier, iters, step, alpha)?;
    Ok(d2b_attack(&image(pixels)?, label, &model.inner, &th, &cfg).map_err(to_py)?.into())
}

/// Largest step in `[lo, hi]` whose short probe runs on `samples` stay in
/// bounds; `samples` is a list of `(pixels, label)`.
#[pyfunction]
#[pyo3(signature = (model, profile, samples, eps, kind = "quantile", mode = "untargeted", lo = 0.0, hi = 0.01, probes = 20, probe_iters = 25))]
#[allow(clippy::too_many_arguments)]
fn find_step(
    model: &PyModel,
    profile: &PyPlaneProfile,
    samples: Vec<(Vec<f32>, usize)>,
    eps: f64,
    kind: &str,
    mode: &str,
    lo: f64,
    hi: f64,
    probes: usize,
    probe_iters: usize,
) -> PyResult<f64> {
    let th = throttle(model, profile, kind, eps)?;
    let cfg = attack_config(mode, "poly", probe_iters, 0.0, AttackConfig::default().weights.alpha)?;
    let samples: Vec<(Tensor, usize)> = samples.into_iter().map(|(p, l)| Ok((image(p)?, l))).collect::<PyResult<_>>()?;
    Ok(search_step(&samples, &model.inner, &th, &cfg, (lo, hi), probes, probe_iters).map_err(to_py)?.step)
}

/// Pixel-bounded iterative sign-gradient attack with `l_inf` radius `eps`.
#[pyfunction]
#[pyo3(signature = (model, pixels, label, eps = 0.04, mode = "untargeted"))]
fn bim(model: &PyModel, pixels: Vec<f32>, label: usize, eps: f64, mode: &str) -> PyResult<PyAttackResult> {
    let cfg = BimConfig::with_eps(parse(mode)?, eps);
    Ok(bim_attack(&image(pixels)?, label, &model.inner, &cfg, None).map_err(to_py)?.into())
}

/// Mean quantile distance the pixel-bounded attack induces at the plane.
#[pyfunction]
#[pyo3(signature = (model, profile, samples, bim_eps = 0.04, mode = "untargeted"))]
fn calibrate(model: &PyModel, profile: &PyPlaneProfile, samples: Vec<(Vec<f32>, usize)>, bim_eps: f64, mode: &str) -> PyResult<f64> {
    let samples: Vec<(Tensor, usize)> = samples.into_iter().map(|(p, l)| Ok((image(p)?, l))).collect::<PyResult<_>>()?;
    let cfg = BimConfig::with_eps(parse(mode)?, bim_eps);
    let eps = calibrate_epsilon(&model.inner, &[(&profile.plane, &profile.inner)], &model.inner, &samples, &cfg).map_err(to_py)?;
    Ok(eps[0])
}

#[pyfunction]
fn ssim(a: Vec<f32>, b: Vec<f32>) -> PyResult<f64> {
    metrics::ssim(&image(a)?, &image(b)?).map_err(to_py)
}

/// `(l2 on the 0-255 scale, l_inf on the 0-1 scale)`.
#[pyfunction]
fn pixel_distances(a: Vec<f32>, b: Vec<f32>) -> PyResult<(f64, f64)> {
    metrics::pixel_distances(&image(a)?, &image(b)?).map_err(to_py)
}

#[pymodule]
#[pyo3(name = "deepbound")]
fn deepbound_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyDistribution>()?;
    m.add_class::<PyPlaneProfile>()?;
    m.add_class::<PyAttackResult>()?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(d2b, m)?)?;
    m.add_function(wrap_pyfunction!(find_step, m)?)?;
    m.add_function(wrap_pyfunction!(bim, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(pixel_distances, m)?)?;
    Ok(())
}
