//! Python bindings: tensors, masks, the feature memory, models and the
//! train/infer/eval entry points.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use memseg::data::{
    generate_synthetic, load_clip, DatasetManifest, GenConfig, SegmentationMask, Split,
};
use memseg::error::Error;
use memseg::eval::ConfusionMatrix;
use memseg::memory::{FeatureMemory, MomentumSchedule, TransformPath};
use memseg::model::{Model, ModelConfig};
use memseg::pipeline::{
    argmax_mask, decoder_a_forward, ensemble, first_pass_forward, multi_stage_infer,
    GuidanceMask, GuidanceSource, InferenceConfig, ProbabilityMap,
};
use memseg::temporal::TemporalMemory;
use memseg::train::{AugmentationConfig, TrainConfig, Trainer};
use memseg::Tensor;

fn to_py_err(err: Error) -> PyErr {
    match err {
        Error::Config(_) | Error::Input(_) | Error::Shape(_) => {
            PyValueError::new_err(err.to_string())
        }
        Error::Io { .. } | Error::Format { .. } | Error::Manifest(_) => {
            PyIOError::new_err(err.to_string())
        }
        Error::State(_) => PyRuntimeError::new_err(err.to_string()),
    }
}

trait OrPyErr<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPyErr<T> for memseg::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py_err)
    }
}

/// Dense row-major tensor of f64 values.
#[pyclass(name = "Tensor")]
#[derive(Clone)]
struct PyTensor {
    inner: Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: Tensor::from_vec(shape, data).py()?,
        })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        PyTensor {
            inner: Tensor::zeros(&shape),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn matmul(&self, rhs: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: self.inner.matmul(&rhs.inner).py()?,
        })
    }

    fn softmax_rows(&self) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: self.inner.softmax_rows().py()?,
        })
    }

    fn hflip(&self) -> PyTensor {
        PyTensor {
            inner: self.inner.hflip(),
        }
    }

    fn bilinear_resize(&self, out_h: usize, out_w: usize) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: self.inner.bilinear_resize(out_h, out_w).py()?,
        })
    }

    fn cosine_similarity(&self, b: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: self.inner.cosine_similarity(&b.inner).py()?,
        })
    }

    /// Serialize in the 32-bit tensor exchange format.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_mstf(&path).py()
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: Tensor::load_mstf(&path).py()?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Per-pixel class labels (255 = ignore).
#[pyclass(name = "Mask")]
#[derive(Clone)]
struct PyMask {
    inner: SegmentationMask,
}

#[pymethods]
impl PyMask {
    #[new]
    fn new(height: usize, width: usize, labels: Vec<u8>) -> PyResult<Self> {
        Ok(PyMask {
            inner: SegmentationMask::from_labels(height, width, labels).py()?,
        })
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    fn labels(&self) -> Vec<u8> {
        self.inner.labels().to_vec()
    }

    fn hflip(&self) -> PyMask {
        PyMask {
            inner: self.inner.hflip(),
        }
    }

    fn disagreement(&self, other: &PyMask) -> PyResult<usize> {
        self.inner.disagreement(&other.inner).py()
    }

    fn __repr__(&self) -> String {
        format!("Mask({}x{})", self.inner.height(), self.inner.width())
    }
}

/// Dataset-level K×C class-representation memory.
#[pyclass(name = "FeatureMemory")]
struct PyFeatureMemory {
    inner: FeatureMemory,
}

#[pymethods]
impl PyFeatureMemory {
    #[new]
    #[pyo3(signature = (k, c, momentum = 0.1))]
    fn new(k: usize, c: usize, momentum: f64) -> Self {
        PyFeatureMemory {
            inner: FeatureMemory::new(k, c, MomentumSchedule::constant(momentum)),
        }
    }

    #[getter]
    fn t(&self) -> u64 {
        self.inner.t()
    }

    fn matrix(&self) -> PyTensor {
        PyTensor {
            inner: self.inner.matrix().clone(),
        }
    }

    /// Per-image class summary (the transform feeding the moving average).
    fn transform(&self, features: &PyTensor, gt: &PyMask) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: self
                .inner
                .transform(&features.inner, &gt.inner, TransformPath::UpsampleFeatures)
                .py()?,
        })
    }

    /// Moving-average update from the previous iteration's features.
    fn update(&mut self, features: &PyTensor, gt: &PyMask) -> PyResult<()> {
        self.inner
            .update(&features.inner, &gt.inner, TransformPath::UpsampleFeatures)
            .py()
    }

    /// Per-pixel row lookup under a guidance mask, at `h×w` resolution.
    fn gather(&self, guidance: &PyMask, h: usize, w: usize) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: self.inner.gather(&guidance.inner, h, w).py()?,
        })
    }
}

/// A trained (or freshly initialized) segmentation model.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (variant, k, embed_dim = 16, seed = 0))]
    fn new(variant: &str, k: usize, embed_dim: usize, seed: u64) -> PyResult<Self> {
        let config = ModelConfig {
            k,
            embed_dim,
            variant: variant.parse().py()?,
            ..ModelConfig::default()
        };
        Ok(PyModel {
            inner: Model::init(config, seed).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<PyModel> {
        Ok(PyModel {
            inner: Model::load(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py()
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.config.variant.to_string()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.config.k
    }

    /// Head-only class probabilities for a `3×H×W` frame.
    fn first_pass(&self, frame: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: first_pass_forward(&self.inner, &frame.inner)
                .py()?
                .tensor()
                .clone(),
        })
    }

    /// Decoder-A probabilities under an explicit guidance mask.
    fn forward_guided(&self, frame: &PyTensor, guidance: &PyMask) -> PyResult<PyTensor> {
        let g = GuidanceMask::new(guidance.inner.clone(), GuidanceSource::GroundTruth);
        Ok(PyTensor {
            inner: decoder_a_forward(&self.inner, &frame.inner, &g)
                .py()?
                .tensor()
                .clone(),
        })
    }

    /// Decoder-B probabilities over a frame sequence; the temporal buffer
    /// rolls internally.
    fn forward_temporal(&self, frames: Vec<PyTensor>) -> PyResult<Vec<PyTensor>> {
        let mut tmem = TemporalMemory::new(self.inner.config.temporal_window);
        let mut out = Vec::with_capacity(frames.len());
        for frame in &frames {
            let (probs, next) =
                memseg::pipeline::decoder_b_forward(&self.inner, &frame.inner, &tmem).py()?;
            tmem = next;
            out.push(PyTensor {
                inner: probs.tensor().clone(),
            });
        }
        Ok(out)
    }
}

/// Generate the synthetic moving-shapes dataset on disk.
#[pyfunction]
#[pyo3(signature = (root, seed = 0, n_videos = 50, frames_per_video = 8, height = 64, width = 64, k = 5, train_fraction = 0.8))]
#[allow(clippy::too_many_arguments)]
fn generate_dataset(
    root: PathBuf,
    seed: u64,
    n_videos: usize,
    frames_per_video: usize,
    height: usize,
    width: usize,
    k: usize,
    train_fraction: f64,
) -> PyResult<()> {
    let cfg = GenConfig {
        n_videos,
        frames_per_video,
        height,
        width,
        k,
        train_fraction,
        ..GenConfig::default()
    };
    generate_synthetic(&root, seed, &cfg).py()?;
    Ok(())
}

/// Video ids of a dataset split ("train" or "val").
#[pyfunction]
fn list_videos(root: PathBuf, split: &str) -> PyResult<Vec<String>> {
    let manifest = DatasetManifest::load(&root).py()?;
    let split = match split {
        "train" => Split::Train,
        "val" => Split::Val,
        other => return Err(PyValueError::new_err(format!("unknown split '{other}'"))),
    };
    Ok(manifest
        .split_videos(split)
        .iter()
        .map(|v| v.id.clone())
        .collect())
}

/// Load one video: `(frames, masks)`.
#[pyfunction]
fn load_video(root: PathBuf, id: &str) -> PyResult<(Vec<PyTensor>, Vec<PyMask>)> {
    let manifest = DatasetManifest::load(&root).py()?;
    let clip = load_clip(&manifest, id).py()?;
    Ok((
        clip.frames
            .into_iter()
            .map(|inner| PyTensor { inner })
            .collect(),
        clip.masks.into_iter().map(|inner| PyMask { inner }).collect(),
    ))
}

/// Train a variant; returns the per-step losses and writes a checkpoint.
#[pyfunction]
#[pyo3(signature = (data_root, checkpoint, variant, steps, seed = 0, embed_dim = 16, lr = 1e-3))]
fn train_model(
    data_root: PathBuf,
    checkpoint: PathBuf,
    variant: &str,
    steps: usize,
    seed: u64,
    embed_dim: usize,
    lr: f64,
) -> PyResult<Vec<f64>> {
    let manifest = DatasetManifest::load(&data_root).py()?;
    let config = ModelConfig {
        k: manifest.k,
        embed_dim,
        variant: variant.parse().py()?,
        ..ModelConfig::default()
    };
    let model = Model::init(config, seed).py()?;
    let train_cfg = TrainConfig {
        lr,
        max_steps: Some(steps),
        seed,
        ..TrainConfig::default()
    };
    let mut trainer =
        Trainer::new(model, &manifest, train_cfg, AugmentationConfig::default()).py()?;
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        losses.push(trainer.step().py()?.loss);
    }
    trainer.save_checkpoint(&checkpoint).py()?;
    Ok(losses)
}

/// Multi-stage video inference; returns per-stage masks
/// (`stages[s][frame]`) for one video.
#[pyfunction]
#[pyo3(signature = (checkpoint, data_root, video_id, stages = 0, scales = None, flip = false))]
fn infer_video(
    checkpoint: PathBuf,
    data_root: PathBuf,
    video_id: &str,
    stages: usize,
    scales: Option<Vec<f64>>,
    flip: bool,
) -> PyResult<Vec<Vec<PyMask>>> {
    let manifest = DatasetManifest::load(&data_root).py()?;
    let model = Model::load(&checkpoint).py()?;
    let clip = load_clip(&manifest, video_id).py()?;
    let cfg = InferenceConfig {
        scales: scales.unwrap_or_else(|| vec![1.0]),
        flip,
        stages,
    };
    let result = multi_stage_infer(&model, &clip, stages, &cfg).py()?;
    Ok(result
        .stages
        .into_iter()
        .map(|round| {
            round
                .into_iter()
                .map(|s| PyMask { inner: s.mask })
                .collect()
        })
        .collect())
}

/// Add two probability maps and take the per-pixel argmax.
#[pyfunction]
fn ensemble_probs(a: &PyTensor, b: &PyTensor) -> PyResult<PyMask> {
    let pa = ProbabilityMap::new(a.inner.clone()).py()?;
    let pb = ProbabilityMap::new(b.inner.clone()).py()?;
    Ok(PyMask {
        inner: ensemble(&pa, &pb).py()?,
    })
}

/// Per-pixel argmax of a probability map.
#[pyfunction]
fn argmax(probs: &PyTensor) -> PyResult<PyMask> {
    let p = ProbabilityMap::new(probs.inner.clone()).py()?;
    Ok(PyMask {
        inner: argmax_mask(&p),
    })
}

/// mIoU / pixel accuracy / per-class IoU of predictions against ground truth.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    preds: Vec<PyMask>,
    gts: Vec<PyMask>,
    k: usize,
) -> PyResult<Bound<'py, PyDict>> {
    if preds.len() != gts.len() {
        return Err(PyValueError::new_err(format!(
            "{} predictions vs {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(k);
    for (p, g) in preds.iter().zip(&gts) {
        cm.accumulate(&p.inner, &g.inner).py()?;
    }
    let report = cm.report();
    let dict = PyDict::new(py);
    dict.set_item("miou", report.miou)?;
    dict.set_item("pixel_acc", report.pixel_acc)?;
    dict.set_item("per_class_iou", report.per_class_iou)?;
    Ok(dict)
}

#[pymodule]
fn memseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyMask>()?;
    m.add_class::<PyFeatureMemory>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(list_videos, m)?)?;
    m.add_function(wrap_pyfunction!(load_video, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(infer_video, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble_probs, m)?)?;
    m.add_function(wrap_pyfunction!(argmax, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
