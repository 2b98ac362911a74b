//! Python bindings. Configs cross the boundary as JSON strings; boxes are
//! `(cx, cy, w, h)` tuples in normalized coordinates.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;

use weakvid::detector::DetectorConfig;
use weakvid::ema::EpochMetrics;
use weakvid::evaluation::match_detections;
use weakvid::experiment::{run_grid, summarize, ExperimentSettings, GridOutput, RunSpec, Variant};
use weakvid::pseudo_labels::{PseudoLabel, PseudoLabelSet};
use weakvid::synthetic::{generate_splits, GeneratorConfig};
use weakvid::types::{EvalConfig, SplitRole};
use weakvid::{BoundingBox, DatasetSplit, Detection, Frame, ParameterVector, PseudoLabelConfig, TsmrConfig};

type PyBox = (f64, f64, f64, f64);

fn to_py(e: weakvid::Error) -> PyErr {
    match e {
        weakvid::Error::InvalidInput(m) => PyValueError::new_err(m),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn parse<T: DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("bad config: {e}"))),
    }
}

fn bbox(b: PyBox) -> PyResult<BoundingBox> {
    BoundingBox::new(b.0, b.1, b.2, b.3).map_err(to_py)
}

fn unbox(b: &BoundingBox) -> PyBox {
    (b.cx, b.cy, b.w, b.h)
}

fn role(name: &str) -> PyResult<SplitRole> {
    SplitRole::ALL
        .into_iter()
        .find(|r| r.name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown split {name:?}")))
}

/// The four video splits.
#[pyclass(name = "Dataset", module = "pyweakvid")]
struct PyDataset {
    inner: DatasetSplit,
}

#[pymethods]
impl PyDataset {
    /// Synthesizes all splits from a generator config.
    #[staticmethod]
    #[pyo3(signature = (config=None))]
    fn generate(config: Option<&str>) -> PyResult<Self> {
        let cfg: GeneratorConfig = parse(config)?;
        Ok(Self { inner: generate_splits(&cfg).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: weakvid::io::read_dataset(&path).map_err(to_py)? })
    }

    #[pyo3(signature = (path, force=false))]
    fn save(&self, path: PathBuf, force: bool) -> PyResult<()> {
        weakvid::io::write_dataset(&path, &self.inner, force).map_err(to_py)
    }

    fn num_videos(&self, split: &str) -> PyResult<usize> {
        Ok(self.inner.videos(role(split)?).len())
    }

    /// `(video_id, video_label)` per video of a split.
    fn videos(&self, split: &str) -> PyResult<Vec<(String, Option<bool>)>> {
        Ok(self.inner.videos(role(split)?).iter().map(|v| (v.video_id.clone(), v.video_label)).collect())
    }

    /// Pixels of one frame, row-major, with its width and height.
    fn frame(&self, split: &str, video: usize, t: usize) -> PyResult<(Vec<f32>, usize, usize)> {
        let f = self.get_frame(split, video, t)?;
        Ok((f.pixels.clone(), f.width, f.height))
    }

    /// Ground-truth boxes for a frame, or `None` for weakly labeled videos.
    fn boxes(&self, split: &str, video: usize, t: usize) -> PyResult<Option<Vec<PyBox>>> {
        let v = self.video(split, video)?;
        Ok(v.annotations.as_ref().map(|_| v.boxes_at(t).iter().map(unbox).collect()))
    }

    fn __repr__(&self) -> String {
        let n: Vec<String> = SplitRole::ALL.iter().map(|r| format!("{}={}", r.name(), self.inner.videos(*r).len())).collect();
        format!("Dataset({})", n.join(", "))
    }
}

impl PyDataset {
    fn video(&self, split: &str, video: usize) -> PyResult<&weakvid::VideoRecord> {
        self.inner.videos(role(split)?).get(video).ok_or_else(|| PyValueError::new_err("video index out of range"))
    }

    fn get_frame(&self, split: &str, video: usize, t: usize) -> PyResult<&Frame> {
        self.video(split, video)?.frames.get(t).ok_or_else(|| PyValueError::new_err("frame index out of range"))
    }
}

/// The grid detector. Parameters are plain float lists.
#[pyclass(name = "Detector", module = "pyweakvid")]
struct PyDetector {
    inner: weakvid::Detector,
}

#[pymethods]
impl PyDetector {
    #[new]
    #[pyo3(signature = (width=64, height=64, config=None))]
    fn new(width: usize, height: usize, config: Option<&str>) -> PyResult<Self> {
        let cfg: DetectorConfig = parse(config)?;
        Ok(Self { inner: weakvid::Detector::new(width, height, cfg).map_err(to_py)? })
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn grid(&self) -> (usize, usize) {
        (self.inner.grid_w(), self.inner.grid_h())
    }

    fn init_params(&self, seed: u64) -> Vec<f64> {
        weakvid::training::initial_state(&self.inner, seed).theta.as_slice().to_vec()
    }

    /// Post-NMS detections `(box, confidence)` for one frame.
    #[pyo3(signature = (params, pixels, width, height, conf_threshold=0.001, nms_iou=0.45))]
    fn detect(
        &self,
        params: Vec<f64>,
        pixels: Vec<f32>,
        width: usize,
        height: usize,
        conf_threshold: f64,
        nms_iou: f64,
    ) -> PyResult<Vec<(PyBox, f64)>> {
        let frame = Frame::new(width, height, pixels).map_err(to_py)?;
        let dets = self.inner.detect(&ParameterVector(params), &frame, conf_threshold, nms_iou).map_err(to_py)?;
        Ok(dets.iter().map(|d| (unbox(&d.bbox), d.confidence)).collect())
    }

    /// mAP@0.5 on an annotated split.
    #[pyo3(signature = (params, dataset, split="test"))]
    fn evaluate(&self, params: Vec<f64>, dataset: &PyDataset, split: &str) -> PyResult<f64> {
        let videos = dataset.inner.videos(role(split)?);
        weakvid::evaluation::evaluate_map(&self.inner, &ParameterVector(params), videos, &EvalConfig::default()).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Detector(grid={}x{}, params={})", self.inner.grid_w(), self.inner.grid_h(), self.inner.num_params())
    }
}

#[pyfunction]
fn iou(a: PyBox, b: PyBox) -> PyResult<f64> {
    Ok(weakvid::nms::iou(&bbox(a)?, &bbox(b)?))
}

/// AP over pooled frames. `detections[i]` holds `(box, confidence)` pairs
/// and `ground_truth[i]` the boxes of frame `i`.
#[pyfunction]
#[pyo3(signature = (detections, ground_truth, iou_threshold=0.5))]
fn average_precision(detections: Vec<Vec<(PyBox, f64)>>, ground_truth: Vec<Vec<PyBox>>, iou_threshold: f64) -> PyResult<f64> {
    if detections.len() != ground_truth.len() {
        return Err(PyValueError::new_err("one detection list is needed per ground-truth frame"));
    }
    let mut results = Vec::with_capacity(detections.len());
    for (dets, gts) in detections.into_iter().zip(ground_truth) {
        let dets = dets.into_iter().map(|(b, c)| Ok(Detection::new(bbox(b)?, c, 0))).collect::<PyResult<Vec<_>>>()?;
        let gts = gts.into_iter().map(bbox).collect::<PyResult<Vec<_>>>()?;
        results.push(match_detections(&dets, &gts, iou_threshold));
    }
    weakvid::evaluation::average_precision(&results).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (m_t, m_s, config=None))]
fn adaptive_alpha_e(m_t: f64, m_s: f64, config: Option<&str>) -> PyResult<f64> {
    let cfg: TsmrConfig = parse(config)?;
    Ok(weakvid::ema::adaptive_alpha_e(&EpochMetrics::new(m_t, m_s), &cfg))
}

#[pyfunction]
#[pyo3(signature = (m_t, m_s, config=None))]
fn inverse_alpha(m_t: f64, m_s: f64, config: Option<&str>) -> PyResult<f64> {
    let cfg: TsmrConfig = parse(config)?;
    Ok(weakvid::ema::inverse_alpha(&EpochMetrics::new(m_t, m_s), &cfg))
}

/// Per-frame maximum confidence and their mean over the clip.
#[pyfunction]
fn aggregate_video_confidence(confidences: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, f64)> {
    let unit = BoundingBox { cx: 0.5, cy: 0.5, w: 0.1, h: 0.1 };
    let dets: Vec<Vec<Detection>> =
        confidences.iter().map(|f| f.iter().map(|&c| Detection::new(unit, c, 0)).collect()).collect();
    let v = weakvid::losses::aggregate_video_confidence(&dets).map_err(to_py)?;
    Ok((v.per_frame_max, v.video_score))
}

#[pyfunction]
fn loss_v_weak(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    weakvid::losses::loss_v_weak(&scores, &labels).map_err(to_py)
}

/// Final pseudo-labels `(box, confidence, weight)` per frame from teacher
/// candidates. `config` is a pseudo-label config in JSON.
#[pyfunction]
#[pyo3(signature = (candidates, video_label=None, config=None))]
fn finalize_pseudo_labels(
    candidates: Vec<Vec<(PyBox, f64)>>,
    video_label: Option<bool>,
    config: Option<&str>,
) -> PyResult<Vec<Vec<(PyBox, f64, f64)>>> {
    let cfg: PseudoLabelConfig = parse(config)?;
    cfg.validate().map_err(to_py)?;
    let mut frames = Vec::with_capacity(candidates.len());
    for f in candidates {
        let labels = f
            .into_iter()
            .map(|(b, c)| Ok(PseudoLabel { bbox: bbox(b)?, confidence: c, weight: 1.0, cell: 0 }))
            .collect::<PyResult<Vec<_>>>()?;
        frames.push(labels);
    }
    let out = weakvid::pseudo_labels::finalize(&PseudoLabelSet { frames }, video_label, &cfg);
    Ok(out.frames.iter().map(|f| f.iter().map(|l| (unbox(&l.bbox), l.confidence, l.weight)).collect()).collect())
}

/// Trains the given variants for each seed, sharing one burn-in per seed.
/// Returns one dict per run and one per variant summary.
#[pyfunction]
#[pyo3(signature = (dataset, variants, seeds, settings=None, detector=None))]
fn run_experiment<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    variants: Vec<String>,
    seeds: Vec<u64>,
    settings: Option<&str>,
    detector: Option<&str>,
) -> PyResult<(Vec<Bound<'py, PyDict>>, Vec<Bound<'py, PyDict>>)> {
    let settings: ExperimentSettings = parse(settings)?;
    let det_cfg: DetectorConfig = parse(detector)?;
    let size = dataset.inner.test.first().and_then(|v| v.frames.first()).map(|f| (f.width, f.height)).unwrap_or((64, 64));
    let det = weakvid::Detector::new(size.0, size.1, det_cfg).map_err(to_py)?;
    let specs = variants
        .iter()
        .map(|v| v.parse::<Variant>().map(RunSpec::new).map_err(|e| PyValueError::new_err(e.to_string())))
        .collect::<PyResult<Vec<_>>>()?;
    let split = dataset.inner.clone();
    let results = py
        .detach(|| run_grid(&det, &split, &settings, &specs, &seeds, &GridOutput::default()))
        .map_err(to_py)?;
    let runs = results
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("label", &r.label)?;
            d.set_item("seed", r.seed)?;
            d.set_item("fraction", r.fraction)?;
            d.set_item("val_map", r.val_map)?;
            d.set_item("test_map", r.test_map)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    let summary = summarize(&results)
        .iter()
        .map(|s| {
            let d = PyDict::new(py);
            d.set_item("label", &s.label)?;
            d.set_item("runs", s.runs)?;
            d.set_item("test_mean", s.test_mean)?;
            d.set_item("test_std", s.test_std)?;
            d.set_item("val_mean", s.val_mean)?;
            d.set_item("val_std", s.val_std)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((runs, summary))
}

#[pymodule]
fn pyweakvid(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyDetector>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(adaptive_alpha_e, m)?)?;
    m.add_function(wrap_pyfunction!(inverse_alpha, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_video_confidence, m)?)?;
    m.add_function(wrap_pyfunction!(loss_v_weak, m)?)?;
    m.add_function(wrap_pyfunction!(finalize_pseudo_labels, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("VARIANTS", Variant::ALL.iter().map(|v| v.name()).collect::<Vec<_>>())?;
    Ok(())
}
