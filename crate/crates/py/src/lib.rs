//! Python bindings: volumes, uncertainty maps, lesion extraction, the GCNN,
//! evaluation metrics, scene generation and the full pipeline.

use std::collections::HashMap;
use std::path::PathBuf;

use lesionuq::eval::{self, LesionKey, ScoredLesion};
use lesionuq::gcnn::{self, TrainConfig, Variant};
use lesionuq::graph::{read_graph_dataset, FeatureScaler};
use lesionuq::pipeline::{run_pipeline as run, PipelineConfig};
use lesionuq::synth::{generate_scene as generate, SynthConfig};
use lesionuq::{lesion, maps, Dims, Error};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(lesionuq, LesionUqError, PyException);
create_exception!(lesionuq, ConfigError, LesionUqError);
create_exception!(lesionuq, DataError, LesionUqError);
create_exception!(lesionuq, NumericError, LesionUqError);

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        2 => ConfigError::new_err(e.to_string()),
        3 => DataError::new_err(e.to_string()),
        _ => NumericError::new_err(e.to_string()),
    }
}

fn dims_of(shape: (usize, usize, usize)) -> PyResult<Dims> {
    Dims::new(shape.0, shape.1, shape.2).map_err(to_py)
}

fn shape_of(d: Dims) -> (usize, usize, usize) {
    (d.nx, d.ny, d.nz)
}

/// Real-valued volume, x fastest. `dims` is `(nx, ny, nz)`.
#[pyclass(name = "Volume", module = "lesionuq", from_py_object)]
#[derive(Clone)]
struct PyVolume(lesionuq::Volume);

#[pymethods]
impl PyVolume {
    #[new]
    fn new(dims: (usize, usize, usize), data: Vec<f64>) -> PyResult<Self> {
        lesionuq::Volume::new(dims_of(dims)?, data)
            .map(PyVolume)
            .map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        lesionuq::Volume::load(path).map(PyVolume).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(path).map_err(to_py)
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        shape_of(self.0.dims())
    }

    fn tolist(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn at(&self, x: usize, y: usize, z: usize) -> PyResult<f64> {
        let d = self.0.dims();
        if x >= d.nx || y >= d.ny || z >= d.nz {
            return Err(pyo3::exceptions::PyIndexError::new_err(
                "voxel out of range",
            ));
        }
        Ok(self.0.at(d.linear(x, y, z)))
    }

    fn __len__(&self) -> usize {
        self.0.data().len()
    }

    fn __repr__(&self) -> String {
        format!("Volume(dims={:?})", self.dims())
    }
}

/// Integer label volume (masks, component labelings).
#[pyclass(name = "LabelVolume", module = "lesionuq", from_py_object)]
#[derive(Clone)]
struct PyLabelVolume(lesionuq::LabelVolume);

#[pymethods]
impl PyLabelVolume {
    #[new]
    fn new(dims: (usize, usize, usize), data: Vec<u32>) -> PyResult<Self> {
        lesionuq::LabelVolume::new(dims_of(dims)?, data)
            .map(PyLabelVolume)
            .map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        lesionuq::LabelVolume::load(path)
            .map(PyLabelVolume)
            .map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(path).map_err(to_py)
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        shape_of(self.0.dims())
    }

    fn tolist(&self) -> Vec<u32> {
        self.0.data().to_vec()
    }

    fn count_foreground(&self) -> usize {
        self.0.count_foreground()
    }

    fn __len__(&self) -> usize {
        self.0.data().len()
    }

    fn __repr__(&self) -> String {
        format!("LabelVolume(dims={:?})", self.dims())
    }
}

#[pyclass(name = "Lesion", module = "lesionuq", get_all, skip_from_py_object)]
struct PyLesion {
    id: u32,
    size: usize,
    iou_adj: f64,
    tp: bool,
    voxels: Vec<usize>,
}

#[pymethods]
impl PyLesion {
    fn __repr__(&self) -> String {
        format!(
            "Lesion(id={}, size={}, iou_adj={:.4}, tp={})",
            self.id,
            self.size,
            self.iou_adj,
            if self.tp { "True" } else { "False" }
        )
    }
}

/// A lesion graph as stored in the JSONL dataset.
#[pyclass(name = "LesionGraph", module = "lesionuq", from_py_object)]
#[derive(Clone)]
struct PyGraph(lesionuq::graph::LesionGraph);

#[pymethods]
impl PyGraph {
    #[getter]
    fn scan_id(&self) -> &str {
        &self.0.scan_id
    }
    #[getter]
    fn lesion_id(&self) -> u32 {
        self.0.lesion_id
    }
    #[getter]
    fn n_nodes(&self) -> usize {
        self.0.n_nodes()
    }
    #[getter]
    fn n_features(&self) -> usize {
        self.0.n_features
    }
    #[getter]
    fn edges(&self) -> Vec<(u32, u32)> {
        self.0.edges.iter().map(|e| (e[0], e[1])).collect()
    }
    #[getter]
    fn iou_adj(&self) -> f64 {
        self.0.iou_adj
    }
    #[getter]
    fn tp(&self) -> bool {
        self.0.tp
    }
    fn features(&self) -> Vec<Vec<f64>> {
        (0..self.0.n_nodes())
            .map(|i| self.0.row(i).to_vec())
            .collect()
    }
}

#[pyclass(name = "GcnnModel", module = "lesionuq", skip_from_py_object)]
struct PyGcnnModel(gcnn::GcnnModel);

#[pymethods]
impl PyGcnnModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        gcnn::GcnnModel::load(path).map(PyGcnnModel).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(path).map_err(to_py)
    }

    #[getter]
    fn variant(&self) -> String {
        self.0.variant.to_string()
    }

    #[getter]
    fn n_parameters(&self) -> usize {
        self.0.params.data.len()
    }

    /// FP probability (classification) or `1 - IoU_hat` (regression).
    fn predict(&self, graph: &PyGraph) -> PyResult<f64> {
        self.0.predict_uncertainty(&graph.0).map_err(to_py)
    }
}

/// Mean probability, entropy, variance and PCS uncertainty maps.
#[pyfunction]
fn compute_maps<'py>(py: Python<'py>, samples: Vec<PyVolume>) -> PyResult<Bound<'py, PyDict>> {
    let ens =
        lesionuq::McEnsemble::new(samples.into_iter().map(|v| v.0).collect()).map_err(to_py)?;
    let m = maps::compute_maps(&ens).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("mean_prob", PyVolume(m.mean_prob))?;
    d.set_item("entropy", PyVolume(m.entropy))?;
    d.set_item("variance", PyVolume(m.variance))?;
    d.set_item("pcs_uncertainty", PyVolume(m.pcs_uncertainty))?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (mean_prob, threshold = maps::DEFAULT_THRESHOLD))]
fn binarize(mean_prob: &PyVolume, threshold: f64) -> PyResult<PyLabelVolume> {
    maps::binarize(&mean_prob.0, threshold)
        .map(PyLabelVolume)
        .map_err(to_py)
}

#[pyfunction]
fn binary_entropy(p: f64) -> f64 {
    maps::binary_entropy(p)
}

#[pyfunction]
fn pcs_uncertainty(p: f64) -> f64 {
    maps::pcs_uncertainty(p)
}

/// 26-connected component labeling; returns `(labels, count)`.
#[pyfunction]
fn connected_components(mask: &PyLabelVolume) -> PyResult<(PyLabelVolume, usize)> {
    let cc = lesion::connected_components_26(&mask.0).map_err(to_py)?;
    Ok((PyLabelVolume(cc.labels), cc.count as usize))
}

#[pyfunction]
#[pyo3(signature = (pred, gt, epsilon = lesion::DEFAULT_EPSILON))]
fn extract_lesions(
    pred: &PyLabelVolume,
    gt: &PyLabelVolume,
    epsilon: f64,
) -> PyResult<Vec<PyLesion>> {
    let (_, lesions) = lesion::extract_lesions(&pred.0, &gt.0, epsilon).map_err(to_py)?;
    Ok(lesions
        .into_iter()
        .map(|l| PyLesion {
            id: l.id,
            size: l.size(),
            iou_adj: l.iou_adj,
            tp: l.tp,
            voxels: l.voxels,
        })
        .collect())
}

#[pyfunction]
fn dice(pred: &PyLabelVolume, gt: &PyLabelVolume) -> PyResult<f64> {
    lesion::dice(&pred.0, &gt.0).map_err(to_py)
}

/// Accuracy-Confidence curve of scores against TP flags. Returns
/// `(auc_percent, [(tau, fp_norm, tp_norm), ...])`; ties are broken by input
/// position.
#[pyfunction]
fn accuracy_confidence(
    uncertainty: Vec<f64>,
    tp: Vec<bool>,
) -> PyResult<(f64, Vec<(f64, f64, f64)>)> {
    if uncertainty.len() != tp.len() {
        return Err(to_py(Error::Input(
            "uncertainty and tp lengths differ".into(),
        )));
    }
    let recs: Vec<ScoredLesion> = uncertainty
        .iter()
        .zip(&tp)
        .enumerate()
        .map(|(i, (&u, &t))| ScoredLesion {
            key: LesionKey::new("", i as u32),
            uncertainty: u,
            tp: t,
        })
        .collect();
    let (points, auc) = eval::accuracy_confidence_curve(&recs).map_err(to_py)?;
    Ok((
        auc,
        points
            .iter()
            .map(|p| (p.tau, p.fp_norm, p.tp_norm))
            .collect(),
    ))
}

#[pyfunction]
fn spearman_rho(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    eval::spearman_rho(&a, &b).map_err(to_py)
}

#[pyfunction]
fn read_graphs(path: PathBuf) -> PyResult<Vec<PyGraph>> {
    let ds = read_graph_dataset(path).map_err(to_py)?;
    Ok(ds.graphs.into_iter().map(PyGraph).collect())
}

#[pyfunction]
#[pyo3(signature = (graphs, variant = "classification", epochs = 200, seed = 0))]
fn train_gcnn(
    py: Python<'_>,
    graphs: Vec<PyGraph>,
    variant: &str,
    epochs: usize,
    seed: u64,
) -> PyResult<PyGcnnModel> {
    let cfg = TrainConfig {
        variant: variant.parse::<Variant>().map_err(to_py)?,
        epochs,
        seed,
        ..Default::default()
    };
    let graphs: Vec<_> = graphs.into_iter().map(|g| g.0).collect();
    let (model, _) = py.detach(|| gcnn::train(&graphs, &cfg)).map_err(to_py)?;
    Ok(PyGcnnModel(model))
}

/// Standardization statistics of a graph set, as `(mean, std)` per feature.
#[pyfunction]
fn feature_scaler(graphs: Vec<PyGraph>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let graphs: Vec<_> = graphs.into_iter().map(|g| g.0).collect();
    let s = FeatureScaler::fit(&graphs).map_err(to_py)?;
    Ok((s.mean, s.std))
}

/// One synthetic scene. `config` is TOML with `SynthConfig` keys.
#[pyfunction]
#[pyo3(signature = (index = 0, seed = 0, config = None))]
fn generate_scene<'py>(
    py: Python<'py>,
    index: u64,
    seed: u64,
    config: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg: SynthConfig = match config {
        Some(t) => lesionuq::pipeline::parse_toml(t).map_err(to_py)?,
        None => SynthConfig::default(),
    };
    cfg.seed = seed;
    let scene = py.detach(|| generate(&cfg, index)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("scan_id", scene.manifest.scan_id.clone())?;
    d.set_item("gt", PyLabelVolume(scene.gt))?;
    d.set_item("intensity", PyVolume(scene.intensity))?;
    let samples: Vec<PyVolume> = scene
        .ensemble
        .samples()
        .iter()
        .cloned()
        .map(PyVolume)
        .collect();
    d.set_item("samples", samples)?;
    Ok(d)
}

/// Run the whole pipeline; returns `{method: (auc_percent, spearman_rho)}`.
#[pyfunction]
#[pyo3(signature = (config = None, out = None))]
fn run_pipeline(
    py: Python<'_>,
    config: Option<&str>,
    out: Option<PathBuf>,
) -> PyResult<HashMap<String, (f64, f64)>> {
    let mut cfg = match config {
        Some(t) => PipelineConfig::from_toml_str(t).map_err(to_py)?,
        None => PipelineConfig::default(),
    };
    if let Some(o) = out {
        cfg.paths.out = o;
    }
    let outcome = py.detach(|| run(&cfg)).map_err(to_py)?;
    Ok(outcome
        .report
        .methods
        .into_iter()
        .map(|m| (m.method, (m.auc, m.spearman_rho)))
        .collect())
}

#[pymodule]
#[pyo3(name = "lesionuq")]
fn lesionuq_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("LesionUqError", py.get_type::<LesionUqError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("DataError", py.get_type::<DataError>())?;
    m.add("NumericError", py.get_type::<NumericError>())?;
    m.add_class::<PyVolume>()?;
    m.add_class::<PyLabelVolume>()?;
    m.add_class::<PyLesion>()?;
    m.add_class::<PyGraph>()?;
    m.add_class::<PyGcnnModel>()?;
    m.add_function(wrap_pyfunction!(compute_maps, m)?)?;
    m.add_function(wrap_pyfunction!(binarize, m)?)?;
    m.add_function(wrap_pyfunction!(binary_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(pcs_uncertainty, m)?)?;
    m.add_function(wrap_pyfunction!(connected_components, m)?)?;
    m.add_function(wrap_pyfunction!(extract_lesions, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy_confidence, m)?)?;
    m.add_function(wrap_pyfunction!(spearman_rho, m)?)?;
    m.add_function(wrap_pyfunction!(read_graphs, m)?)?;
    m.add_function(wrap_pyfunction!(train_gcnn, m)?)?;
    m.add_function(wrap_pyfunction!(feature_scaler, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
