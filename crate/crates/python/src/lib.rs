//! Python bindings (`import kdist`).

use std::path::PathBuf;

use kernel_distortion as kd;
use kd::{AssignmentScale, Combiner, Error, PriorMode, SelectionConfig, VarianceParams};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// A labeled image set with pixels in [0, 1].
#[pyclass(name = "ImageSet", frozen)]
struct PyImageSet(kd::LabeledImageSet);

#[pymethods]
impl PyImageSet {
    #[new]
    #[pyo3(signature = (images, labels, width, height, class_count=None))]
    fn new(
        images: Vec<Vec<f64>>,
        labels: Vec<usize>,
        width: usize,
        height: usize,
        class_count: Option<usize>,
    ) -> PyResult<Self> {
        let set = match class_count {
            Some(m) => kd::LabeledImageSet::new(images, labels, width, height, m),
            None => kd::LabeledImageSet::with_inferred_classes(images, labels, width, height),
        };
        set.map(Self).map_err(err)
    }

    #[staticmethod]
    fn load_idx(images: PathBuf, labels: PathBuf) -> PyResult<Self> {
        kd::load_idx(images, labels).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load_delimited(path: PathBuf, width: usize, height: usize) -> PyResult<Self> {
        kd::load_delimited(path, width, height).map(Self).map_err(err)
    }

    fn pad(&self, margin: usize) -> Self {
        Self(kd::pad_margin(&self.0, margin))
    }

    /// Seeded stratified split: `(per_class from each class, the rest)`.
    fn split(&self, per_class: usize, seed: u64) -> PyResult<(Self, Self)> {
        let (a, b) = kd::stratified_sample(&self.0, per_class, seed).map_err(err)?;
        Ok((Self(a), Self(b)))
    }

    fn images(&self) -> Vec<Vec<f64>> {
        self.0.images().to_vec()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.0.labels().to_vec()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.0.class_count()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "ImageSet({} images, {}x{}, {} classes)",
            self.0.len(),
            self.0.width(),
            self.0.height(),
            self.0.class_count()
        )
    }
}

/// The distortion-subspace basis of one kernel center.
#[pyclass(name = "Basis", frozen)]
struct PyBasis(kd::DistortionBasis);

#[pymethods]
impl PyBasis {
    #[getter]
    fn center(&self) -> Vec<f64> {
        self.0.center().iter().copied().collect()
    }

    #[getter]
    fn x_tilde(&self) -> Vec<f64> {
        self.0.x_tilde().iter().copied().collect()
    }

    /// Columns of `U`, each a list of length `dimension`.
    #[getter]
    fn u(&self) -> Vec<Vec<f64>> {
        self.0.u().column_iter().map(|c| c.iter().copied().collect()).collect()
    }

    #[getter]
    fn q(&self) -> usize {
        self.0.q()
    }

    /// Log-density of `x` under this kernel.
    #[pyo3(signature = (x, sigma_d2=0.9, sigma_o2=0.03))]
    fn log_density(&self, x: Vec<f64>, sigma_d2: f64, sigma_o2: f64) -> PyResult<f64> {
        let v = VarianceParams::new(sigma_d2, sigma_o2).map_err(err)?;
        kd::log_kernel_density(&x, &self.0, &v).map_err(err)
    }
}

#[pyfunction]
#[pyo3(signature = (center, width, height, poly_order=3, subspace_dim=40, step=0.5))]
fn distortion_basis(
    center: Vec<f64>,
    width: usize,
    height: usize,
    poly_order: u32,
    subspace_dim: usize,
    step: f64,
) -> PyResult<PyBasis> {
    let builder = kd::BasisBuilder::new(width, height, step, poly_order, subspace_dim).map_err(err)?;
    builder.build(&center).map(PyBasis).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (x, basis, sigma_d2=0.9, sigma_o2=0.03))]
fn log_kernel_density(x: Vec<f64>, basis: &PyBasis, sigma_d2: f64, sigma_o2: f64) -> PyResult<f64> {
    basis.log_density(x, sigma_d2, sigma_o2)
}

#[pyclass(name = "Metrics", frozen, get_all)]
struct PyMetrics {
    error_rate: f64,
    confusion: Vec<Vec<usize>>,
    per_class_error: Vec<f64>,
    report: String,
}

impl From<kd::Metrics> for PyMetrics {
    fn from(m: kd::Metrics) -> Self {
        Self {
            error_rate: m.error_rate,
            report: m.to_report(),
            confusion: m.confusion,
            per_class_error: m.per_class_error,
        }
    }
}

#[pyclass(name = "Classifier", frozen)]
struct PyClassifier(kd::Classifier);

#[pymethods]
impl PyClassifier {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        kd::load_model(path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        kd::save_model(&self.0, path).map_err(err)
    }

    fn log_likelihoods(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.log_likelihoods(&x).map_err(err)
    }

    fn posterior(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        kd::posterior(&x, &self.0).map_err(err)
    }

    fn predict(&self, x: Vec<f64>) -> PyResult<usize> {
        kd::predict(&x, &self.0).map_err(err)
    }

    fn posteriors(&self, py: Python<'_>, set: &PyImageSet) -> PyResult<Vec<Vec<f64>>> {
        py.detach(|| kd::classify::posteriors(&set.0, &self.0)).map_err(err)
    }

    fn evaluate(&self, py: Python<'_>, set: &PyImageSet) -> PyResult<PyMetrics> {
        py.detach(|| kd::evaluate(&set.0, &self.0))
            .map(PyMetrics::from)
            .map_err(err)
    }

    /// A copy with different variances and the same kernels and weights.
    fn with_variances(&self, sigma_d2: f64, sigma_o2: f64) -> PyResult<Self> {
        let v = VarianceParams::new(sigma_d2, sigma_o2).map_err(err)?;
        Ok(Self(self.0.with_variances(v)))
    }

    /// Basis of kernel `k` in class `m`.
    fn kernel_basis(&self, m: usize, k: usize) -> PyResult<PyBasis> {
        self.0
            .models()
            .get(m)
            .and_then(|model| model.kernels().get(k))
            .map(|kernel| PyBasis(kernel.basis.clone()))
            .ok_or_else(|| PyValueError::new_err(format!("no kernel {k} in class {m}")))
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.0.class_count()
    }

    #[getter]
    fn kernel_count(&self) -> usize {
        self.0.kernel_count()
    }

    #[getter]
    fn subspace_dim(&self) -> usize {
        self.0.subspace_dim()
    }

    #[getter]
    fn log_priors(&self) -> Vec<f64> {
        self.0.log_priors().to_vec()
    }

    fn __repr__(&self) -> String {
        format!(
            "Classifier({} classes x {} kernels, q={}, {}x{})",
            self.0.class_count(),
            self.0.kernel_count(),
            self.0.subspace_dim(),
            self.0.width(),
            self.0.height()
        )
    }
}

/// Selects kernels for every class. Returns the classifier and, per class,
/// the log-likelihood history (initialization first).
#[pyfunction]
#[pyo3(signature = (
    set, kernels=100, iterations=500, poly_order=3, subspace_dim=40,
    sigma_d2=0.9, sigma_o2=0.03, seed=0, assignment_scale="auto", priors="empirical", step=0.5
))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    set: &PyImageSet,
    kernels: usize,
    iterations: usize,
    poly_order: u32,
    subspace_dim: usize,
    sigma_d2: f64,
    sigma_o2: f64,
    seed: u64,
    assignment_scale: &str,
    priors: &str,
    step: f64,
) -> PyResult<(PyClassifier, Vec<Vec<f64>>)> {
    let config = SelectionConfig {
        kernel_count: kernels,
        iterations,
        assignment_scale: assignment_scale.parse::<AssignmentScale>().map_err(err)?,
        seed,
        poly_order,
        subspace_dim,
        variances: VarianceParams::new(sigma_d2, sigma_o2).map_err(err)?,
        step,
    };
    let priors: PriorMode = priors.parse().map_err(err)?;
    let (clf, traces) = py.detach(|| kd::train(&set.0, &config, priors)).map_err(err)?;
    Ok((PyClassifier(clf), traces.iter().map(|t| t.history()).collect()))
}

fn table(rows: Vec<Vec<f64>>, name: &str) -> PyResult<kd::PosteriorTable> {
    kd::PosteriorTable::new(rows, name).map_err(err)
}

#[pyfunction]
fn cascade(p_d: Vec<f64>, p_g: Vec<f64>, tau: f64) -> usize {
    kd::cascade(&p_d, &p_g, tau)
}

#[pyfunction]
fn stack(p_d: Vec<f64>, p_g: Vec<f64>, w: f64) -> usize {
    kd::stack(&p_d, &p_g, w)
}

/// Error of a combiner (`"cascade"` or `"stack"`) at one parameter.
#[pyfunction]
fn hybrid_error(mode: &str, param: f64, p_d: Vec<Vec<f64>>, p_g: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    let combiner: Combiner = mode.parse().map_err(err)?;
    kd::hybrid::hybrid_error(combiner, param, &table(p_d, "d")?, &table(p_g, "g")?, &labels).map_err(err)
}

/// k-fold tuning of the combiner parameter. Returns `(best, mean fold error)`.
#[pyfunction]
#[pyo3(signature = (mode, p_d, p_g, labels, grid=None, folds=10, seed=0))]
fn tune(
    mode: &str,
    p_d: Vec<Vec<f64>>,
    p_g: Vec<Vec<f64>>,
    labels: Vec<usize>,
    grid: Option<Vec<f64>>,
    folds: usize,
    seed: u64,
) -> PyResult<(f64, f64)> {
    let combiner: Combiner = mode.parse().map_err(err)?;
    let grid = grid.unwrap_or_else(kd::hybrid::default_grid);
    let r = kd::tune(combiner, &table(p_d, "d")?, &table(p_g, "g")?, &labels, &grid, folds, seed).map_err(err)?;
    Ok((r.best, r.best_error))
}

#[pymodule]
fn kdist(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImageSet>()?;
    m.add_class::<PyBasis>()?;
    m.add_class::<PyClassifier>()?;
    m.add_class::<PyMetrics>()?;
    m.add_function(wrap_pyfunction!(distortion_basis, m)?)?;
    m.add_function(wrap_pyfunction!(log_kernel_density, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(cascade, m)?)?;
    m.add_function(wrap_pyfunction!(stack, m)?)?;
    m.add_function(wrap_pyfunction!(hybrid_error, m)?)?;
    m.add_function(wrap_pyfunction!(tune, m)?)?;
    Ok(())
}
