//! Python bindings: tensors, patch scoring, the SPAIR block, the full model,
//! window-attention helpers, metrics and the dataset/training pipeline.

use std::path::{Path, PathBuf};

use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spairswin::checkpoint::Checkpoint;
use spairswin::dataset::{LabelMap, Split, SplitManifest};
use spairswin::metrics::{EvalRecord, EvalReport, Level};
use spairswin::model::{ModelConfig, SpairSwin};
use spairswin::nn::{Forward, Mode, ParamStore};
use spairswin::patch::{self, PatchConfig, PatchManifest, Selector};
use spairswin::pipeline::{self, GradModule, RunConfig, PATCH_DIR};
use spairswin::spair::{Spair, SpairConfig};
use spairswin::synth::SynthConfig;
use spairswin::train::TrainConfig;
use spairswin::{swin, Error, Graph, Tensor};

create_exception!(pyspairswin, LeakageError, PyRuntimeError);
create_exception!(pyspairswin, GradCheckError, PyRuntimeError);

fn err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Io { .. } => PyIOError::new_err(msg),
        Error::Leakage(_) => LeakageError::new_err(msg),
        Error::GradCheckFailed { .. } => GradCheckError::new_err(msg),
        Error::Shape { .. }
        | Error::InvalidAxis { .. }
        | Error::InvalidArgument(_)
        | Error::Config(_)
        | Error::LabelOutOfRange { .. }
        | Error::NonScalar(_) => PyValueError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_u64().map(|u| u.into_pyobject(py)) {
            Some(u) => u?.into_any(),
            None => match n.as_i64() {
                Some(i) => i.into_pyobject(py)?.into_any(),
                None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
            },
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(a) => {
            let items = a.iter().map(|x| json_to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any()
        }
        Value::Object(m) => {
            let d = PyDict::new(py);
            for (k, x) in m {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let value = serde_json::to_value(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_to_py(py, &value)
}

fn selector(name: &str) -> PyResult<Selector> {
    match name {
        "entropy" => Ok(Selector::EntropyDesc),
        "homogeneity" => Ok(Selector::Homogeneity),
        "random" => Ok(Selector::Random),
        _ => Err(PyValueError::new_err(format!(
            "selector must be entropy, homogeneity or random, got `{name}`"
        ))),
    }
}

fn level(name: &str) -> PyResult<Level> {
    match name {
        "patch" => Ok(Level::Patch),
        "image" => Ok(Level::Image),
        _ => Err(PyValueError::new_err(format!("level must be patch or image, got `{name}`"))),
    }
}

fn split_arg(name: &str) -> PyResult<Option<Split>> {
    match name {
        "train" => Ok(Some(Split::Train)),
        "test" => Ok(Some(Split::Test)),
        "all" => Ok(None),
        _ => Err(PyValueError::new_err(format!("split must be train, test or all, got `{name}`"))),
    }
}

fn model_config(preset: &str, size: usize, num_classes: usize, init_seed: u64) -> PyResult<ModelConfig> {
    let cfg = match preset {
        "desk" => ModelConfig::desk(size, num_classes),
        "tiny" => ModelConfig::tiny(size, num_classes),
        _ => return Err(PyValueError::new_err(format!("preset must be desk or tiny, got `{preset}`"))),
    };
    let cfg = ModelConfig { init_seed, ..cfg };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// Dense row-major f64 array.
#[pyclass(name = "Tensor", module = "pyspairswin", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    pub inner: Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: Tensor::new(shape, data).map_err(err)?,
        })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        PyTensor {
            inner: Tensor::zeros(shape),
        }
    }

    /// Normal samples with the given standard deviation, seeded.
    #[staticmethod]
    #[pyo3(signature = (shape, std=1.0, seed=0))]
    fn randn(shape: Vec<usize>, std: f64, seed: u64) -> Self {
        PyTensor {
            inner: Tensor::randn(shape, std, &mut ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn at(&self, index: Vec<usize>) -> PyResult<f64> {
        let s = self.inner.shape();
        if index.len() != s.len() || index.iter().zip(s).any(|(i, n)| i >= n) {
            return Err(PyValueError::new_err(format!("index {index:?} out of range for shape {s:?}")));
        }
        Ok(self.inner.at(&index))
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: self.inner.reshape(shape).map_err(err)?,
        })
    }

    fn max_abs_diff(&self, other: &PyTensor) -> PyResult<f64> {
        if self.inner.shape() != other.inner.shape() {
            return Err(PyValueError::new_err("shapes differ"));
        }
        Ok(self.inner.max_abs_diff(&other.inner))
    }

    fn sum(&self) -> f64 {
        self.inner.data().iter().sum()
    }

    fn __len__(&self) -> usize {
        self.inner.shape().first().copied().unwrap_or(1)
    }

    fn __eq__(&self, other: &PyTensor) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

fn tensor(t: Tensor) -> PyTensor {
    PyTensor { inner: t }
}

/// Shannon entropy (nats) of an 8-bit grayscale tile.
#[pyfunction]
fn patch_entropy(gray: Vec<u8>) -> f64 {
    patch::patch_entropy(&gray)
}

/// Mean per-channel standard deviation of an interleaved RGB tile.
#[pyfunction]
fn homogeneity_score(rgb: Vec<u8>) -> PyResult<f64> {
    if !rgb.len().is_multiple_of(3) {
        return Err(PyValueError::new_err("RGB data length must be a multiple of 3"));
    }
    Ok(patch::homogeneity_score(&rgb))
}

#[pyfunction]
fn to_grayscale(rgb: Vec<u8>) -> PyResult<Vec<u8>> {
    if !rgb.len().is_multiple_of(3) {
        return Err(PyValueError::new_err("RGB data length must be a multiple of 3"));
    }
    Ok(patch::to_grayscale(&rgb))
}

/// Scores every tile of an image and marks the selected ones. Returns one
/// dict per tile in raster order.
#[pyfunction]
#[pyo3(signature = (path, k=256, patches=20, selector="entropy", seed=0))]
fn score_image<'py>(
    py: Python<'py>,
    path: PathBuf,
    k: usize,
    patches: usize,
    selector: &str,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = PatchConfig {
        k,
        patches,
        selector: self::selector(selector)?,
        seed,
        ..PatchConfig::default()
    };
    cfg.validate().map_err(err)?;
    let img = patch::RgbImage::open(&path).map_err(err)?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let grid = patch::score_image(&id, &img, &cfg).map_err(err)?;
    to_py(py, &grid.records)
}

#[pyfunction]
fn window_partition(x: &PyTensor, window: usize) -> PyResult<PyTensor> {
    let mut g = Graph::new();
    let v = g.leaf(x.inner.clone()).map_err(err)?;
    let out = swin::window_partition(&mut g, v, window).map_err(err)?;
    Ok(tensor(g.value(out).clone()))
}

#[pyfunction]
fn window_reverse(windows: &PyTensor, window: usize, height: usize, width: usize) -> PyResult<PyTensor> {
    let mut g = Graph::new();
    let v = g.leaf(windows.inner.clone()).map_err(err)?;
    let out = swin::window_reverse(&mut g, v, window, height, width).map_err(err)?;
    Ok(tensor(g.value(out).clone()))
}

/// Additive mask `[windows, w², w²]` for shifted-window attention.
#[pyfunction]
fn attention_mask(height: usize, width: usize, window: usize, shift: usize) -> PyResult<PyTensor> {
    swin::attention_mask(height, width, window, shift).map(tensor).map_err(err)
}

/// SPAIR feature-enhancement block with its own parameters.
#[pyclass(name = "Spair", module = "pyspairswin")]
pub struct PySpair {
    store: ParamStore,
    block: Spair,
}

#[pymethods]
impl PySpair {
    #[new]
    #[pyo3(signature = (channels=3, expansion=4, dw_kernel=3, att_kernel=7, attention_rescale=true, seed=0))]
    fn new(
        channels: usize,
        expansion: usize,
        dw_kernel: usize,
        att_kernel: usize,
        attention_rescale: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let config = SpairConfig {
            channels,
            expansion,
            dw_kernel,
            att_kernel,
            attention_rescale,
            ..SpairConfig::default()
        };
        let mut store = ParamStore::new();
        let block = Spair::new(&mut store, "spair", config, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(err)?;
        Ok(PySpair { store, block })
    }

    /// `[B, C, H, W] → [B, C, H, W]`. Train mode normalizes with batch
    /// statistics (running statistics are not updated).
    #[pyo3(signature = (x, train=false))]
    fn forward(&self, x: &PyTensor, train: bool) -> PyResult<PyTensor> {
        self.run(x, train, |b, cx, v| b.forward(cx, v))
    }

    /// Softmax attention map `[B, 1, H, W]` before rescaling.
    fn attention_map(&self, x: &PyTensor) -> PyResult<PyTensor> {
        self.run(x, false, |b, cx, v| b.attention_probs(cx, v))
    }

    fn num_parameters(&self) -> usize {
        self.store.trainable_ids().iter().map(|&id| self.store.get(id).len()).sum()
    }
}

impl PySpair {
    fn run(
        &self,
        x: &PyTensor,
        train: bool,
        f: impl FnOnce(&Spair, &mut Forward<'_>, spairswin::Var) -> spairswin::Result<spairswin::Var>,
    ) -> PyResult<PyTensor> {
        let mut g = Graph::new();
        let mode = if train { Mode::Train } else { Mode::Eval };
        let mut cx = Forward::new(&mut g, &self.store, mode);
        let v = cx.constant(x.inner.clone()).map_err(err)?;
        let out = f(&self.block, &mut cx, v).map_err(err)?;
        Ok(tensor(g.value(out).clone()))
    }
}

/// SPAIR block followed by the windowed-attention classifier.
#[pyclass(name = "Model", module = "pyspairswin")]
pub struct PyModel {
    inner: SpairSwin,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (preset="desk", size=256, num_classes=4, init_seed=0))]
    fn new(preset: &str, size: usize, num_classes: usize, init_seed: u64) -> PyResult<Self> {
        let cfg = model_config(preset, size, num_classes, init_seed)?;
        Ok(PyModel {
            inner: SpairSwin::new(cfg).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_config_json(text: &str) -> PyResult<Self> {
        let cfg: ModelConfig = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyModel {
            inner: SpairSwin::new(cfg).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(err)?;
        Ok(PyModel {
            inner: SpairSwin::from_checkpoint(&ckpt).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.to_checkpoint(serde_json::Value::Null).save(&path).map_err(err)
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.config).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.input_size()
    }

    fn num_parameters(&self) -> usize {
        let s = &self.inner.store;
        s.trainable_ids().iter().map(|&id| s.get(id).len()).sum()
    }

    /// Raw class scores `[B, K]` for images `[B, 3, S, S]` in eval mode.
    fn logits(&self, py: Python<'_>, images: &PyTensor) -> PyResult<PyTensor> {
        let x = images.inner.clone();
        py.detach(|| self.inner.logits(&x)).map(tensor).map_err(err)
    }

    fn predict_proba(&self, py: Python<'_>, images: &PyTensor) -> PyResult<PyTensor> {
        let x = images.inner.clone();
        py.detach(|| self.inner.predict_proba(&x)).map(tensor).map_err(err)
    }

    /// Class indices for 8-bit interleaved RGB tiles of `input_size²` pixels.
    fn classify_tiles(&self, py: Python<'_>, tiles: Vec<Vec<u8>>) -> PyResult<Vec<usize>> {
        let s = self.inner.input_size();
        let named: Vec<(String, usize, Vec<u8>)> =
            tiles.into_iter().enumerate().map(|(i, t)| (format!("t{i}"), 0, t)).collect();
        let data = spairswin::data::PatchDataset::from_tiles(s, &named).map_err(err)?;
        let probs = py
            .detach(|| spairswin::train::predict(&self.inner, &data, 64, 1))
            .map_err(err)?;
        Ok(probs.iter().map(|p| spairswin::train::argmax(p)).collect())
    }

    fn __repr__(&self) -> String {
        let s = &self.inner.config.swin;
        format!(
            "Model(input_size={}, num_classes={}, embed_dim={}, depths={:?}, window={})",
            s.input_size, s.num_classes, s.embed_dim, s.depths, s.window
        )
    }
}

/// PLA, ILA and macro F1 for `(image_id, patch_index, label, predicted)`
/// records. Returns the full report as a dict.
#[pyfunction]
#[pyo3(signature = (records, num_classes, f1_level="patch"))]
fn evaluate_records<'py>(
    py: Python<'py>,
    records: Vec<(String, usize, usize, usize)>,
    num_classes: usize,
    f1_level: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let recs: Vec<EvalRecord> = records
        .into_iter()
        .map(|(image_id, patch_index, label, predicted)| EvalRecord {
            image_id,
            patch_index,
            label,
            predicted,
            probs: None,
        })
        .collect();
    let names: Vec<String> = (0..num_classes).map(|c| format!("class_{c}")).collect();
    let report = EvalReport::from_records(&recs, &names, level(f1_level)?).map_err(err)?;
    to_py(py, &report)
}

/// One AdamW step on flat lists at 1-based step `t`. Returns `(p, m, v)`.
#[pyfunction]
#[pyo3(signature = (p, g, m, v, t, lr=1e-4, weight_decay=0.01, beta1=0.9, beta2=0.999, eps=1e-8))]
#[allow(clippy::too_many_arguments)]
fn adamw_update(
    mut p: Vec<f64>,
    g: Vec<f64>,
    mut m: Vec<f64>,
    mut v: Vec<f64>,
    t: u64,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if g.len() != p.len() || m.len() != p.len() || v.len() != p.len() {
        return Err(PyValueError::new_err("p, g, m and v must have equal lengths"));
    }
    if t == 0 {
        return Err(PyValueError::new_err("step t is 1-based"));
    }
    let cfg = TrainConfig {
        lr,
        weight_decay,
        beta1,
        beta2,
        eps,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(err)?;
    spairswin::train::adamw_update(&mut p, &g, &mut m, &mut v, t, &cfg);
    Ok((p, m, v))
}

/// Finite-difference gradient checks. Returns `{module: max_rel_error}`;
/// raises `GradCheckError` when any parameter exceeds `tolerance`.
#[pyfunction]
#[pyo3(signature = (module="all", h=1e-5, tolerance=1e-4, seed=0))]
fn gradcheck<'py>(py: Python<'py>, module: &str, h: f64, tolerance: f64, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let m = match module {
        "spair" => GradModule::Spair,
        "swin" => GradModule::Swin,
        "all" => GradModule::All,
        _ => return Err(PyValueError::new_err(format!("module must be spair, swin or all, got `{module}`"))),
    };
    let reports = py.detach(|| pipeline::cmd_gradcheck(m, h, tolerance, seed)).map_err(err)?;
    let out = PyDict::new(py);
    let mut worst = 0.0f64;
    for (name, r) in &reports {
        out.set_item(name, r.max_rel_error())?;
        worst = worst.max(r.max_rel_error());
    }
    if reports.iter().any(|(_, r)| !r.passed()) {
        return Err(err(Error::GradCheckFailed {
            max_error: worst,
            tolerance,
        }));
    }
    Ok(out)
}

/// Writes a synthetic camera dataset and its `labels.json` under `out`.
#[pyfunction]
#[pyo3(signature = (out, classes=4, images_per_class=200, size=64, seed=0, amplitude=2.0))]
fn synth(py: Python<'_>, out: PathBuf, classes: usize, images_per_class: usize, size: usize, seed: u64, amplitude: f64) -> PyResult<Vec<String>> {
    let cfg = SynthConfig {
        classes,
        images_per_class,
        width: size,
        height: size,
        seed,
        trace_amplitude: amplitude,
        ..SynthConfig::default()
    };
    let map = py.detach(|| pipeline::cmd_synth(&cfg, &out)).map_err(err)?;
    Ok(map.class_names())
}

/// Stratified split of the images under `root` (classes from
/// `root/labels.json` unless `labels` is given). Returns per-class counts.
#[pyfunction]
#[pyo3(signature = (root, out, seed=0, ratio=0.8, labels=None))]
fn split<'py>(
    py: Python<'py>,
    root: PathBuf,
    out: PathBuf,
    seed: u64,
    ratio: f64,
    labels: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let labels = LabelMap::load(&labels.unwrap_or_else(|| root.join("labels.json"))).map_err(err)?;
    let mut rc = RunConfig::new("split");
    rc.dataset_root = Some(root.display().to_string());
    rc.seed = Some(seed);
    rc.ratio = Some(ratio);
    let m = py
        .detach(|| pipeline::cmd_split(&root, &labels, seed, ratio, false, &out, &rc))
        .map_err(err)?;
    to_py(py, &m.header.class_counts)
}

/// Tiles, scores and selects patches; writes `out/patches.jsonl` and the
/// selected tiles under `out/patches/`. Returns the manifest header.
#[pyfunction]
#[pyo3(signature = (root, split, out, k=256, patches=20, selector="entropy", seed=0, workers=1))]
#[allow(clippy::too_many_arguments)]
fn extract<'py>(
    py: Python<'py>,
    root: PathBuf,
    split: PathBuf,
    out: PathBuf,
    k: usize,
    patches: usize,
    selector: &str,
    seed: u64,
    workers: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = PatchConfig {
        k,
        patches,
        selector: self::selector(selector)?,
        seed,
        ..PatchConfig::default()
    };
    let sm = SplitManifest::read(&split).map_err(err)?;
    let mut rc = RunConfig::new("extract");
    rc.dataset_root = Some(root.display().to_string());
    rc.patch = Some(cfg.clone());
    let m = py
        .detach(|| pipeline::cmd_extract(&root, &sm, &cfg, &out, workers.max(1), &rc))
        .map_err(err)?;
    to_py(py, &m.header)
}

/// Raises `LeakageError` when an image appears in both splits.
#[pyfunction]
fn verify(split: PathBuf, manifest: PathBuf) -> PyResult<()> {
    let sm = SplitManifest::read(&split).map_err(err)?;
    let pm = PatchManifest::read(&manifest).map_err(err)?;
    pipeline::cmd_verify(&sm, &pm).map(|_| ()).map_err(err)
}

fn patch_dir(manifest: &Path) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(PATCH_DIR)
}

/// Trains on the train split of a patch manifest and validates on its test
/// split. Checkpoints and the log go to `out`. Returns the per-epoch log.
#[pyfunction]
#[pyo3(signature = (manifest, out, preset="desk", epochs=30, lr=1e-4, batch_size=32, weight_decay=0.01, seed=0, workers=1))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    manifest: PathBuf,
    out: PathBuf,
    preset: &str,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    weight_decay: f64,
    seed: u64,
    workers: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let pm = PatchManifest::read(&manifest).map_err(err)?;
    let model = model_config(preset, pm.header.config.k, pm.header.class_names.len(), seed)?;
    let cfg = TrainConfig {
        lr,
        epochs,
        batch_size,
        weight_decay,
        seed,
        ..TrainConfig::default()
    };
    let mut rc = RunConfig::new("train");
    rc.patch = Some(pm.header.config.clone());
    rc.model = Some(model.clone());
    rc.train = Some(cfg.clone());
    let dir = patch_dir(&manifest);
    let run = py
        .detach(|| pipeline::cmd_train(&pm, &dir, &model, &cfg, &out, None, workers.max(1), &rc))
        .map_err(err)?;
    to_py(py, &run.outcome.log)
}

/// Evaluates a checkpoint on a split of a patch manifest; writes the report
/// files to `out` and returns the report.
#[pyfunction]
#[pyo3(signature = (checkpoint, manifest, out, split="test", f1_level="patch", workers=1))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    manifest: PathBuf,
    out: PathBuf,
    split: &str,
    f1_level: &str,
    workers: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let pm = PatchManifest::read(&manifest).map_err(err)?;
    let model = SpairSwin::from_checkpoint(&Checkpoint::load(&checkpoint).map_err(err)?).map_err(err)?;
    let (split, level) = (split_arg(split)?, level(f1_level)?);
    let mut rc = RunConfig::new("eval");
    rc.model = Some(model.config.clone());
    let dir = patch_dir(&manifest);
    let (report, _) = py
        .detach(|| {
            pipeline::cmd_eval(
                &model,
                &pm,
                &dir,
                split,
                &pm.header.class_names,
                level,
                &out,
                false,
                workers.max(1),
                &rc,
            )
        })
        .map_err(err)?;
    to_py(py, &report)
}

#[pymodule]
pub fn pyspairswin(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", spairswin::VERSION)?;
    m.add("LeakageError", m.py().get_type::<LeakageError>())?;
    m.add("GradCheckError", m.py().get_type::<GradCheckError>())?;
    m.add_class::<PyTensor>()?;
    m.add_class::<PySpair>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(patch_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(homogeneity_score, m)?)?;
    m.add_function(wrap_pyfunction!(to_grayscale, m)?)?;
    m.add_function(wrap_pyfunction!(score_image, m)?)?;
    m.add_function(wrap_pyfunction!(window_partition, m)?)?;
    m.add_function(wrap_pyfunction!(window_reverse, m)?)?;
    m.add_function(wrap_pyfunction!(attention_mask, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_records, m)?)?;
    m.add_function(wrap_pyfunction!(adamw_update, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(split, m)?)?;
    m.add_function(wrap_pyfunction!(extract, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
