//! Python bindings: datasets, episodes, backbones, training and evaluation.

use std::collections::BTreeMap;
use std::path::PathBuf;

use mtl_core::checkpoint::ModelBundle;
use mtl_core::config::RunConfig;
use mtl_core::episodes::{generate_synthetic, sample_episode, Dataset, Episode, EpisodeShape, MetaSplit, SyntheticGeometry};
use mtl_core::meta::{gamma_schedule, hardest_class, meta_test, sample_tasks, train, MetaConfig, TrainOutcome};
use mtl_core::models::{ss_param_count, ExtractorConfig, FeatureExtractor, VariantSpec};
use mtl_core::pretrain::{lr_schedule, pretrain, PretrainConfig};
use mtl_core::{Rng, Tape, Tensor};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn config(overrides: Option<BTreeMap<String, String>>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::default();
    for (k, v) in overrides.unwrap_or_default() {
        cfg.set(&k, &v).map_err(err)?;
    }
    Ok(cfg)
}

fn split(name: &str) -> PyResult<MetaSplit> {
    name.parse().map_err(err)
}

fn variant(name: &str) -> PyResult<VariantSpec> {
    name.parse().map_err(err)
}

/// Dense row-major f64 array.
#[pyclass(name = "Tensor", module = "mtl", frozen)]
struct PyTensor(Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(PyTensor(Tensor::new(&shape, data).map_err(err)?))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn numel(&self) -> usize {
        self.0.numel()
    }

    fn checksum(&self) -> u64 {
        self.0.checksum()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

/// Labelled image collection with its meta-train/val/test class split.
#[pyclass(name = "Dataset", module = "mtl", frozen)]
struct PyDataset(Dataset);

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (classes=100, per_class=60, channels=3, height=16, width=16, seed=0))]
    fn synthetic(classes: usize, per_class: usize, channels: usize, height: usize, width: usize, seed: u64) -> PyResult<Self> {
        let ds = generate_synthetic(
            classes,
            per_class,
            (channels, height, width),
            &SyntheticGeometry::default(),
            &mut Rng::new(seed),
        )
        .map_err(err)?;
        Ok(PyDataset(ds))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset(Dataset::load(&path).map_err(err)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        self.0.dims()
    }

    fn classes(&self, split_name: &str) -> PyResult<Vec<u32>> {
        Ok(self.0.classes(split(split_name)?).to_vec())
    }

    fn images(&self, indices: Vec<usize>) -> PyResult<PyTensor> {
        Ok(PyTensor(self.0.images(&indices).map_err(err)?))
    }

    fn sample_episode(&self, split_name: &str, way: usize, shot: usize, query: usize, seed: u64) -> PyResult<PyEpisode> {
        let shape = EpisodeShape { way, shot, query };
        let ep = sample_episode(&self.0, split(split_name)?, shape, &mut Rng::new(seed)).map_err(err)?;
        Ok(PyEpisode(ep))
    }
}

/// One N-way K-shot task: sample indices and episode labels.
#[pyclass(name = "Episode", module = "mtl", frozen)]
struct PyEpisode(Episode);

#[pymethods]
impl PyEpisode {
    #[getter]
    fn class_map(&self) -> Vec<u32> {
        self.0.class_map.clone()
    }

    #[getter]
    fn train(&self) -> (Vec<usize>, Vec<usize>) {
        (self.0.train.clone(), self.0.train_labels.clone())
    }

    #[getter]
    fn test(&self) -> (Vec<usize>, Vec<usize>) {
        (self.0.test.clone(), self.0.test_labels.clone())
    }
}

/// Convolutional backbone.
#[pyclass(name = "FeatureExtractor", module = "mtl", frozen)]
struct PyExtractor(FeatureExtractor);

#[pymethods]
impl PyExtractor {
    #[staticmethod]
    #[pyo3(signature = (in_channels=3, filters=16, blocks=4, kernel=3, seed=0))]
    fn init(in_channels: usize, filters: usize, blocks: usize, kernel: usize, seed: u64) -> Self {
        let cfg = ExtractorConfig { in_channels, filters, blocks, kernel };
        PyExtractor(FeatureExtractor::init(&cfg, &mut Rng::new(seed)))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyExtractor(ModelBundle::load(&path).map_err(err)?.extractor))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        ModelBundle { extractor: self.0.clone(), ss: None, head: None, tag: None }
            .save(&path)
            .map_err(err)
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.0.embedding_dim()
    }

    #[getter]
    fn num_blocks(&self) -> usize {
        self.0.num_blocks()
    }

    fn checksum(&self) -> u64 {
        self.0.checksum()
    }

    fn is_frozen(&self) -> bool {
        self.0.is_frozen()
    }

    /// (SS count, conv weight+bias count, ratio as "num/den").
    fn ss_param_count(&self) -> PyResult<(u64, u64, String)> {
        let c = ss_param_count(&self.0).map_err(err)?;
        Ok((c.ss_count, c.ft_count, c.ratio.to_string()))
    }
}

/// A trained model: backbone plus optional SS parameters and head.
#[pyclass(name = "Model", module = "mtl", frozen)]
struct PyModel(ModelBundle);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel(ModelBundle::load(&path).map_err(err)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    #[getter]
    fn variant(&self) -> Option<String> {
        self.0.tag.map(|t| t.variant.to_string())
    }

    #[getter]
    fn extractor(&self) -> PyExtractor {
        PyExtractor(self.0.extractor.clone())
    }

    fn has_ss(&self) -> bool {
        self.0.ss.is_some()
    }
}

/// Result of meta-training.
#[pyclass(name = "TrainResult", module = "mtl", frozen)]
struct PyTrainResult(TrainOutcome);

#[pymethods]
impl PyTrainResult {
    #[getter]
    fn best(&self) -> PyModel {
        PyModel(self.0.best.clone())
    }

    #[getter]
    fn last(&self) -> PyModel {
        PyModel(self.0.last.clone())
    }

    /// (normal meta-batches, val accuracy, ci95) per validation point.
    #[getter]
    fn val_curve(&self) -> Vec<(u64, f64, f64)> {
        self.0.val_curve.iter().map(|p| (p.iteration, p.val_acc, p.ci95)).collect()
    }

    #[getter]
    fn log(&self) -> Vec<String> {
        self.0.log.clone()
    }

    /// (iteration, phase, task, test loss, mean accuracy, hardest class) per task.
    #[getter]
    fn rows(&self) -> Vec<(u64, String, usize, f64, f64, u32)> {
        self.0
            .rows
            .iter()
            .map(|r| (r.iteration, r.phase.to_string(), r.task_idx, r.test_loss, r.mean_acc, r.hardest_class))
            .collect()
    }
}

/// (iteration, lr, loss, acc)
type CurveRow = (u64, f64, f64, f64);

/// Pre-train a backbone on the meta-train classes. Returns the frozen
/// extractor and (iteration, lr, loss, acc) per step.
#[pyfunction(name = "pretrain")]
#[pyo3(signature = (dataset, seed=0, overrides=None))]
fn py_pretrain(
    dataset: &PyDataset,
    seed: u64,
    overrides: Option<BTreeMap<String, String>>,
) -> PyResult<(PyExtractor, Vec<CurveRow>)> {
    let cfg: PretrainConfig = config(overrides)?.pretrain;
    let m = pretrain(&dataset.0, &cfg, &mut Rng::new(seed)).map_err(err)?;
    let curve = m.curve.iter().map(|p| (p.iteration, p.lr, p.loss, p.acc)).collect();
    Ok((PyExtractor(m.extractor), curve))
}

/// Meta-train `variant` from a pre-trained backbone.
#[pyfunction(name = "meta_train")]
#[pyo3(signature = (dataset, extractor, variant_name, seed=0, hard_tasks=false, overrides=None))]
fn py_meta_train(
    dataset: &PyDataset,
    extractor: &PyExtractor,
    variant_name: &str,
    seed: u64,
    hard_tasks: bool,
    overrides: Option<BTreeMap<String, String>>,
) -> PyResult<PyTrainResult> {
    let mut cfg = config(overrides)?.train;
    cfg.curriculum.enabled = hard_tasks;
    let out = train(&dataset.0, &extractor.0, variant(variant_name)?, &cfg, &Rng::new(seed)).map_err(err)?;
    Ok(PyTrainResult(out))
}

/// Mean accuracy and 95% half-width over `tasks` test-split episodes.
#[pyfunction(name = "meta_test")]
#[pyo3(signature = (dataset, model, tasks=100, seed=0, variant_name=None, overrides=None))]
fn py_meta_test(
    dataset: &PyDataset,
    model: &PyModel,
    tasks: usize,
    seed: u64,
    variant_name: Option<&str>,
    overrides: Option<BTreeMap<String, String>>,
) -> PyResult<(f64, f64)> {
    let mut meta: MetaConfig = config(overrides)?.train.meta;
    let v = match (variant_name, model.0.tag) {
        (Some(n), _) => variant(n)?,
        (None, Some(tag)) => {
            meta.bn_mode = tag.bn;
            tag.variant
        }
        (None, None) => return Err(PyValueError::new_err("model has no variant tag; pass variant_name")),
    };
    let root = Rng::new(seed);
    let eps = sample_tasks(&dataset.0, MetaSplit::Test, meta.shape(), tasks, &mut root.split_named("test")).map_err(err)?;
    let s = meta_test(&dataset.0, &eps, &model.0, v, &meta, &root.split_named("test-heads"), 1).map_err(err)?;
    Ok((s.mean_acc, s.ci95))
}

/// 2-D convolution of NCHW input with KCHW weights.
#[pyfunction]
#[pyo3(signature = (x, weight, bias, stride=1, pad=0))]
fn conv2d(x: &PyTensor, weight: &PyTensor, bias: &PyTensor, stride: usize, pad: usize) -> PyResult<PyTensor> {
    let mut t = Tape::new();
    let (xv, wv, bv) = (t.constant(&x.0), t.constant(&weight.0), t.constant(&bias.0));
    let y = t.conv2d(xv, wv, bv, stride, pad).map_err(err)?;
    Ok(PyTensor(t.value(y).clone()))
}

/// Pre-training learning rate at `iteration` under the default schedule.
#[pyfunction(name = "lr_schedule")]
fn py_lr_schedule(iteration: u64) -> f64 {
    lr_schedule(iteration, &PretrainConfig::default())
}

/// Meta learning rate at `iteration` under the default schedule.
#[pyfunction(name = "gamma_schedule")]
fn py_gamma_schedule(iteration: u64) -> f64 {
    gamma_schedule(iteration, &MetaConfig::default())
}

/// Index of the lowest accuracy, lowest index on ties.
#[pyfunction(name = "hardest_class")]
fn py_hardest_class(acc: Vec<f64>) -> PyResult<usize> {
    if acc.is_empty() {
        return Err(PyValueError::new_err("empty accuracy list"));
    }
    Ok(hardest_class(&acc))
}

#[pymodule]
fn mtl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyEpisode>()?;
    m.add_class::<PyExtractor>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainResult>()?;
    m.add_function(wrap_pyfunction!(py_pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(py_meta_train, m)?)?;
    m.add_function(wrap_pyfunction!(py_meta_test, m)?)?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(py_lr_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(py_gamma_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(py_hardest_class, m)?)?;
    m.add("VARIANTS", VariantSpec::NAMES.to_vec())?;
    Ok(())
}
