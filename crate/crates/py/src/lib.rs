//! Python bindings: clouds, the full pipeline, registration and the
//! synthetic-trial harness.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use gcskel_core::cloud::{self as core_cloud, CloudFormat, Vec3};
use gcskel_core::link::SkeletonGraph;
use gcskel_core::pipeline::{self, ClusterCount, K1Setting, PipelineConfig, PipelineRun};
use gcskel_core::register::{self, RegConfig, RegistrationReport};
use gcskel_core::synth::{self, NormalsMode, Sampling, TrialConfig};
use gcskel_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::InvalidArgument(_) | Error::Format { .. } | Error::EmptyInput(_) => PyValueError::new_err(e.to_string()),
        Error::Stage { ref source, .. } if matches!(**source, Error::InvalidArgument(_) | Error::Format { .. } | Error::EmptyInput(_)) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn vecs(v: &[[f64; 3]]) -> Vec<Vec3> {
    v.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect()
}

fn arr(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn format_of(path: &Path) -> PyResult<CloudFormat> {
    CloudFormat::from_path(path).ok_or_else(|| PyValueError::new_err(format!("cannot tell the format of {}", path.display())))
}

/// A point set with optional unit normals.
#[pyclass(module = "gcskel", name = "PointCloud", skip_from_py_object)]
#[derive(Clone)]
pub struct PyPointCloud {
    pub inner: core_cloud::PointCloud,
}

#[pymethods]
impl PyPointCloud {
    #[new]
    #[pyo3(signature = (positions, normals = None))]
    fn new(positions: Vec<[f64; 3]>, normals: Option<Vec<[f64; 3]>>) -> PyResult<Self> {
        let inner = match normals {
            Some(n) => core_cloud::PointCloud::from_oriented(&vecs(&positions), &vecs(&n)),
            None => core_cloud::PointCloud::from_positions(&vecs(&positions)),
        }
        .map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Reads an `.xyz`, `.xyzn` or ASCII `.ply` file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let format = format_of(&path)?;
        Ok(Self {
            inner: core_cloud::load_cloud(&path, format).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let format = format_of(&path)?;
        std::fs::write(&path, core_cloud::write_cloud(&self.inner, format)).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("PointCloud({} points, normals={})", self.inner.len(), self.inner.has_normals())
    }

    #[getter]
    fn has_normals(&self) -> bool {
        self.inner.has_normals()
    }

    fn positions(&self) -> Vec<[f64; 3]> {
        self.inner.positions().map(|p| arr(&p)).collect()
    }

    fn normals(&self) -> Option<Vec<[f64; 3]>> {
        self.inner
            .has_normals()
            .then(|| (0..self.inner.len()).map(|i| arr(&self.inner.normal(i))).collect())
    }
}

/// One of the built-in test shapes: "cylinder", "t-junction" or "quadruped".
#[pyfunction]
#[pyo3(signature = (name, points = 5000))]
fn fixture(name: &str, points: usize) -> PyResult<PyPointCloud> {
    let fx = match name {
        "cylinder" => synth::fixtures::cylinder(points),
        "t-junction" => synth::fixtures::t_junction(points),
        "quadruped" => synth::fixtures::quadruped(points),
        other => return Err(PyValueError::new_err(format!("unknown fixture `{other}`"))),
    }
    .map_err(to_py)?;
    Ok(PyPointCloud { inner: fx.cloud })
}

/// Run settings. Unspecified options keep their defaults.
#[pyclass(module = "gcskel", name = "Config", skip_from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    pub inner: PipelineConfig,
}

#[pymethods]
impl PyConfig {
    /// `k1` is a coverage percentage or `"auto"`.
    #[new]
    #[pyo3(signature = (clusters = 100, k1 = None, k2 = 5.0, seed = 7, use_input_normals = true))]
    fn new(clusters: usize, k1: Option<&Bound<'_, PyAny>>, k2: f64, seed: u64, use_input_normals: bool) -> PyResult<Self> {
        let k1 = match k1 {
            None => K1Setting::Auto,
            Some(v) => match v.extract::<f64>() {
                Ok(p) => K1Setting::Percent(p),
                Err(_) => v.extract::<String>()?.parse().map_err(to_py)?,
            },
        };
        let inner = PipelineConfig {
            clusters: ClusterCount::Fixed(clusters),
            k1,
            k2,
            seed,
            use_input_normals,
            ..Default::default()
        };
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Reads a TOML or JSON config file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: PipelineConfig::load(&path).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.inner).expect("config serializes")
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn clusters(&self) -> usize {
        self.inner.clusters.resolve()
    }

    #[getter]
    fn k2(&self) -> f64 {
        self.inner.k2
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }
}

/// A skeleton graph: vertices, edges and their roles.
#[pyclass(module = "gcskel", name = "Skeleton", skip_from_py_object)]
#[derive(Clone)]
pub struct PySkeleton {
    pub inner: SkeletonGraph,
}

#[pymethods]
impl PySkeleton {
    #[getter]
    fn vertices(&self) -> Vec<[f64; 3]> {
        self.inner.vertices.iter().map(|v| arr(&v.position)).collect()
    }

    #[getter]
    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.edges.iter().map(|e| (e.a, e.b)).collect()
    }

    fn leaves(&self) -> Vec<usize> {
        self.inner.leaves()
    }

    fn is_connected(&self) -> bool {
        self.inner.is_connected()
    }

    fn to_obj(&self) -> String {
        self.inner.to_obj()
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("skeleton serializes")
    }

    fn __repr__(&self) -> String {
        format!(
            "Skeleton({} vertices, {} edges, {} leaves)",
            self.inner.vertices.len(),
            self.inner.edges.len(),
            self.inner.leaves().len()
        )
    }
}

/// The outcome of a pipeline run.
#[pyclass(module = "gcskel", name = "Run")]
pub struct PyRun {
    pub inner: PipelineRun,
}

#[pymethods]
impl PyRun {
    #[getter]
    fn k1(&self) -> f64 {
        self.inner.k1
    }

    #[getter]
    fn n_candidates(&self) -> usize {
        self.inner.candidates.len()
    }

    #[getter]
    fn selected_ids(&self) -> Vec<usize> {
        self.inner.selected_ids()
    }

    #[getter]
    fn skeleton(&self) -> PySkeleton {
        PySkeleton {
            inner: self.inner.link.skeleton.clone(),
        }
    }

    /// Axis polyline of every candidate part, keyed by part id.
    fn part_axes(&self) -> Vec<(usize, Vec<[f64; 3]>)> {
        self.inner
            .candidates
            .iter()
            .map(|p| (p.id, p.axis.iter().map(arr).collect()))
            .collect()
    }

    /// Sorted member point indices of a candidate part.
    fn part_members(&self, id: usize) -> PyResult<Vec<usize>> {
        self.inner
            .candidates
            .iter()
            .find(|p| p.id == id)
            .map(|p| p.member_set.clone())
            .ok_or_else(|| PyValueError::new_err(format!("no candidate part {id}")))
    }

    /// Seed clusters that produced no part, with the reason.
    fn failures(&self) -> Vec<(usize, String)> {
        self.inner.failures.iter().map(|f| (f.cluster, f.reason.clone())).collect()
    }
}

/// Runs every stage on an in-memory cloud without writing files.
#[pyfunction]
#[pyo3(signature = (cloud, config = None))]
fn run(py: Python<'_>, cloud: &PyPointCloud, config: Option<&PyConfig>) -> PyResult<PyRun> {
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    let cloud = cloud.inner.clone();
    let inner = py.detach(move || pipeline::run_on_cloud(&cloud, &cfg)).map_err(to_py)?;
    Ok(PyRun { inner })
}

/// Runs the pipeline on a cloud file and writes artifacts to `output`.
#[pyfunction]
#[pyo3(signature = (input, output, config = None))]
fn run_pipeline(py: Python<'_>, input: PathBuf, output: PathBuf, config: Option<&PyConfig>) -> PyResult<PyRun> {
    let cfg = PipelineConfig {
        input: Some(input),
        output: Some(output),
        ..config.map(|c| c.inner.clone()).unwrap_or_default()
    };
    let inner = py.detach(move || pipeline::run_pipeline(&cfg)).map_err(to_py)?;
    Ok(PyRun { inner })
}

/// Fitted similarity carrying Y onto X, plus fit diagnostics.
#[pyclass(module = "gcskel", name = "Registration")]
pub struct PyRegistration {
    pub inner: RegistrationReport,
}

#[pymethods]
impl PyRegistration {
    #[getter]
    fn rotation(&self) -> [[f64; 3]; 3] {
        let r = &self.inner.params.rotation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
        ]
    }

    #[getter]
    fn scale(&self) -> f64 {
        self.inner.params.scale
    }

    #[getter]
    fn translation(&self) -> [f64; 3] {
        arr(&self.inner.params.translation)
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.params.alpha
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.params.sigma
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    #[getter]
    fn mean_best_match_angle(&self) -> f64 {
        self.inner.mean_best_match_angle
    }

    #[getter]
    fn nll_history(&self) -> Vec<f64> {
        self.inner.nll_history.clone()
    }
}

/// Registers `y` onto `x`; both need normals.
#[pyfunction(name = "register")]
#[pyo3(signature = (x, y, use_normals = true))]
fn register_py(py: Python<'_>, x: &PyPointCloud, y: &PyPointCloud, use_normals: bool) -> PyResult<PyRegistration> {
    let cfg = RegConfig {
        use_normals,
        ..Default::default()
    };
    let (x, y) = (x.inner.clone(), y.inner.clone());
    let inner = py.detach(move || register::register(&x, &y, &cfg)).map_err(to_py)?;
    Ok(PyRegistration { inner })
}

/// Registration trials on random synthetic cylinders; returns CSV text.
#[pyfunction]
#[pyo3(signature = (trials = 100, sampling = "random", normals = "both", seed = 7))]
fn synth_trials(py: Python<'_>, trials: usize, sampling: &str, normals: &str, seed: u64) -> PyResult<String> {
    let sampling: Sampling = sampling.parse().map_err(to_py)?;
    let normals: NormalsMode = normals.parse().map_err(to_py)?;
    let cfg = TrialConfig {
        sampling,
        ..Default::default()
    };
    let records = py.detach(move || synth::run_trials(trials, normals, &cfg, seed)).map_err(to_py)?;
    Ok(synth::trials_csv(&records))
}

#[pymodule]
pub fn gcskel(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPointCloud>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PySkeleton>()?;
    m.add_class::<PyRun>()?;
    m.add_class::<PyRegistration>()?;
    m.add_function(wrap_pyfunction!(fixture, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(register_py, m)?)?;
    m.add_function(wrap_pyfunction!(synth_trials, m)?)?;
    Ok(())
}
