//! A small single-scale grid detector with hand-written backpropagation.
//!
//! Three stride-2 3x3 convolutions take a `H x W` frame to an `H/8 x W/8`
//! grid. The first two are followed by a leaky ReLU; the last is a linear
//! per-cell head producing `[objectness logit, tx, ty, tw, th]`. Boxes decode
//! as `cx = (col + sigmoid(tx)) / G`, `cy = (row + sigmoid(ty)) / G`,
//! `w = min(prior * exp(tw), 1)`, `h` likewise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dual::Scalar;
use crate::error::{invalid, Error, Result};
use crate::nms::nms;
use crate::types::{BoundingBox, Detection, Frame};

/// Outputs per grid cell.
pub const CELL_OUTPUTS: usize = 5;
/// Pixels per grid cell along each axis.
pub const CELL_SIZE: usize = 8;
const LEAK: f64 = 0.1;
const MIN_SIZE: f64 = 1e-6;

/// Flat view of every detector weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector(pub Vec<f64>);

impl ParameterVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ParameterVector, scale: f64) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }
}

/// Head output for one frame, laid out cell-major: `values[cell * 5 + k]`
/// with `k` indexing `[logit, tx, ty, tw, th]` and cells in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPrediction {
    pub grid_w: usize,
    pub grid_h: usize,
    pub values: Vec<f64>,
}

impl RawPrediction {
    pub fn zeros(grid_w: usize, grid_h: usize) -> Self {
        Self { grid_w, grid_h, values: vec![0.0; grid_w * grid_h * CELL_OUTPUTS] }
    }

    pub fn num_cells(&self) -> usize {
        self.grid_w * self.grid_h
    }

    #[inline]
    pub fn cell(&self, cell: usize) -> &[f64] {
        &self.values[cell * CELL_OUTPUTS..(cell + 1) * CELL_OUTPUTS]
    }

    #[inline]
    pub fn cell_mut(&mut self, cell: usize) -> &mut [f64] {
        &mut self.values[cell * CELL_OUTPUTS..(cell + 1) * CELL_OUTPUTS]
    }

    pub fn logit(&self, cell: usize) -> f64 {
        self.values[cell * CELL_OUTPUTS]
    }

    pub fn confidence(&self, cell: usize) -> f64 {
        sigmoid(self.logit(cell))
    }

    /// Cell that contains a normalized point.
    pub fn cell_of(&self, cx: f64, cy: f64) -> usize {
        let col = ((cx * self.grid_w as f64).floor() as usize).min(self.grid_w - 1);
        let row = ((cy * self.grid_h as f64).floor() as usize).min(self.grid_h - 1);
        row * self.grid_w + col
    }

    pub fn decode_box(&self, cell: usize, prior: f64) -> BoundingBox {
        let v = self.cell(cell);
        let [cx, cy, w, h] = decode_cell(cell, self.grid_w, self.grid_h, prior, [v[1], v[2], v[3], v[4]]);
        BoundingBox { cx, cy, w, h }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Decodes raw `[tx, ty, tw, th]` of a cell into `[cx, cy, w, h]`.
pub fn decode_cell<S: Scalar>(cell: usize, grid_w: usize, grid_h: usize, prior: f64, t: [S; 4]) -> [S; 4] {
    let col = (cell % grid_w) as f64;
    let row = (cell / grid_w) as f64;
    let size = |raw: S| {
        // exp overflows past ~709; anything above ln(1/prior) clips to 1 anyway
        if raw.value() > (1.0 / prior).ln() {
            S::constant(1.0)
        } else {
            (raw.exp() * prior).max(S::constant(MIN_SIZE))
        }
    };
    [
        (t[0].sigmoid() + col) * (1.0 / grid_w as f64),
        (t[1].sigmoid() + row) * (1.0 / grid_h as f64),
        size(t[2]),
        size(t[3]),
    ]
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of [`sigmoid`].
#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Layer widths and decoding prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub channels1: usize,
    pub channels2: usize,
    /// Box size prior, as a fraction of the frame.
    pub size_prior: f64,
    /// Initial objectness bias.
    pub objectness_bias: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { channels1: 8, channels2: 16, size_prior: 0.2, objectness_bias: -3.0 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    cin: usize,
    cout: usize,
    /// Offset of this layer's weights in the parameter vector; biases follow.
    offset: usize,
}

impl Conv {
    fn weights(&self) -> usize {
        self.cout * self.cin * 9
    }
    fn len(&self) -> usize {
        self.weights() + self.cout
    }
}

/// Activations kept by [`Detector::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    pre1: Vec<f64>,
    act1: Vec<f64>,
    pre2: Vec<f64>,
    act2: Vec<f64>,
}

/// Result of a differentiable objective evaluated on a batch of predictions.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    /// d(value)/d(prediction values), one entry per prediction, same layout.
    pub wrt_predictions: Vec<Vec<f64>>,
    /// Any direct dependence of the loss on the parameters.
    pub wrt_params: Option<ParameterVector>,
}

impl LossValue {
    pub fn constant(value: f64, preds: &[RawPrediction]) -> Self {
        Self { value, wrt_predictions: preds.iter().map(|p| vec![0.0; p.values.len()]).collect(), wrt_params: None }
    }
}

/// Architecture description for a fixed frame size.
#[derive(Debug, Clone)]
pub struct Detector {
    pub width: usize,
    pub height: usize,
    pub config: DetectorConfig,
    layers: [Conv; 3],
}

impl Detector {
    pub fn new(width: usize, height: usize, config: DetectorConfig) -> Result<Self> {
        if width == 0 || height == 0 || width % CELL_SIZE != 0 || height % CELL_SIZE != 0 {
            return Err(invalid(format!("frame size {width}x{height} is not a multiple of {CELL_SIZE}")));
        }
        if config.channels1 == 0 || config.channels2 == 0 || !(config.size_prior > 0.0 && config.size_prior <= 1.0) {
            return Err(invalid("invalid detector configuration"));
        }
        let l1 = Conv { cin: 1, cout: config.channels1, offset: 0 };
        let l2 = Conv { cin: config.channels1, cout: config.channels2, offset: l1.len() };
        let head = Conv { cin: config.channels2, cout: CELL_OUTPUTS, offset: l1.len() + l2.len() };
        Ok(Self { width, height, config, layers: [l1, l2, head] })
    }

    /// Default architecture for 64x64 frames.
    pub fn default_64() -> Self {
        Self::new(64, 64, DetectorConfig::default()).expect("valid default")
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Conv::len).sum()
    }

    pub fn grid_w(&self) -> usize {
        self.width / CELL_SIZE
    }

    pub fn grid_h(&self) -> usize {
        self.height / CELL_SIZE
    }

    pub fn num_cells(&self) -> usize {
        self.grid_w() * self.grid_h()
    }

    pub fn size_prior(&self) -> f64 {
        self.config.size_prior
    }

    /// He-normal convolution weights, small head weights, zero biases except
    /// the objectness bias.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterVector {
        let mut p = vec![0.0; self.num_params()];
        for (i, layer) in self.layers.iter().enumerate() {
            let std = if i == 2 { 0.01 } else { (2.0 / (layer.cin * 9) as f64).sqrt() };
            let normal = Normal::new(0.0, std).expect("positive std");
            for w in &mut p[layer.offset..layer.offset + layer.weights()] {
                *w = normal.sample(rng);
            }
        }
        let head = self.layers[2];
        p[head.offset + head.weights()] = self.config.objectness_bias;
        ParameterVector(p)
    }

    pub fn check_params(&self, params: &ParameterVector) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(invalid(format!(
                "parameter vector has length {}, detector expects {}",
                params.len(),
                self.num_params()
            )));
        }
        Ok(())
    }

    fn check_frame(&self, frame: &Frame) -> Result<()> {
        if frame.width != self.width || frame.height != self.height || frame.pixels.len() != self.width * self.height {
            return Err(invalid(format!(
                "frame is {}x{}, detector expects {}x{}",
                frame.width, frame.height, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn forward(&self, params: &ParameterVector, frame: &Frame) -> Result<RawPrediction> {
        self.forward_cached(params, frame).map(|(pred, _)| pred)
    }

    pub fn forward_cached(&self, params: &ParameterVector, frame: &Frame) -> Result<(RawPrediction, ForwardCache)> {
        self.check_params(params)?;
        self.check_frame(frame)?;
        let p = params.as_slice();
        let [l1, l2, head] = self.layers;
        let (h0, w0) = (self.height, self.width);

        let input: Vec<f64> = frame.pixels.iter().map(|&v| v as f64).collect();
        let pre1 = conv_s2_forward(&input, h0, w0, p, l1);
        let act1 = pre1.iter().map(|&v| leaky(v)).collect::<Vec<_>>();
        let pre2 = conv_s2_forward(&act1, h0 / 2, w0 / 2, p, l2);
        let act2 = pre2.iter().map(|&v| leaky(v)).collect::<Vec<_>>();
        let out = conv_s2_forward(&act2, h0 / 4, w0 / 4, p, head);

        let cells = self.num_cells();
        let mut pred = RawPrediction::zeros(self.grid_w(), self.grid_h());
        for k in 0..CELL_OUTPUTS {
            for c in 0..cells {
                pred.values[c * CELL_OUTPUTS + k] = out[k * cells + c];
            }
        }
        Ok((pred, ForwardCache { input, pre1, act1, pre2, act2 }))
    }

    /// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(prediction).
    pub fn backward(&self, params: &ParameterVector, cache: &ForwardCache, dpred: &[f64], grad: &mut [f64]) {
        let p = params.as_slice();
        let [l1, l2, head] = self.layers;
        let (h0, w0) = (self.height, self.width);
        let cells = self.num_cells();

        let mut dout = vec![0.0; CELL_OUTPUTS * cells];
        for k in 0..CELL_OUTPUTS {
            for c in 0..cells {
                dout[k * cells + c] = dpred[c * CELL_OUTPUTS + k];
            }
        }

        let mut dact2 = vec![0.0; cache.act2.len()];
        conv_s2_backward(&cache.act2, h0 / 4, w0 / 4, p, head, &dout, grad, Some(&mut dact2));
        for (d, &z) in dact2.iter_mut().zip(&cache.pre2) {
            *d *= leaky_grad(z);
        }
        let mut dact1 = vec![0.0; cache.act1.len()];
        conv_s2_backward(&cache.act1, h0 / 2, w0 / 2, p, l2, &dact2, grad, Some(&mut dact1));
        for (d, &z) in dact1.iter_mut().zip(&cache.pre1) {
            *d *= leaky_grad(z);
        }
        conv_s2_backward(&cache.input, h0, w0, p, l1, &dact1, grad, None);
    }

    /// Value and gradient of `loss_fn` over a batch of frames.
    pub fn gradient<F>(&self, params: &ParameterVector, batch: &[&Frame], loss_fn: F) -> Result<(f64, ParameterVector)>
    where
        F: FnOnce(&[RawPrediction]) -> Result<LossValue>,
    {
        let mut preds = Vec::with_capacity(batch.len());
        let mut caches = Vec::with_capacity(batch.len());
        for frame in batch {
            let (pred, cache) = self.forward_cached(params, frame)?;
            preds.push(pred);
            caches.push(cache);
        }
        let loss = loss_fn(&preds)?;
        if !loss.value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", loss.value)));
        }
        if loss.wrt_predictions.len() != preds.len() {
            return Err(invalid("loss gradient count does not match batch"));
        }
        let mut grad = match loss.wrt_params {
            Some(g) => {
                self.check_params(&g)?;
                g
            }
            None => ParameterVector::zeros(self.num_params()),
        };
        for (cache, dpred) in caches.iter().zip(&loss.wrt_predictions) {
            if dpred.iter().all(|&d| d == 0.0) {
                continue;
            }
            self.backward(params, cache, dpred, &mut grad.0);
        }
        if !grad.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        Ok((loss.value, grad))
    }

    /// Candidate detections with confidence strictly above `conf_threshold`.
    pub fn decode(&self, pred: &RawPrediction, conf_threshold: f64) -> Vec<Detection> {
        decode(pred, conf_threshold, self.size_prior())
    }

    /// Forward, decode and NMS for one frame.
    pub fn detect(&self, params: &ParameterVector, frame: &Frame, conf_threshold: f64, nms_iou: f64) -> Result<Vec<Detection>> {
        let pred = self.forward(params, frame)?;
        Ok(nms(&self.decode(&pred, conf_threshold), nms_iou))
    }
}

/// Candidate extraction: every cell whose confidence exceeds the threshold.
pub fn decode(pred: &RawPrediction, conf_threshold: f64, prior: f64) -> Vec<Detection> {
    (0..pred.num_cells())
        .filter_map(|cell| {
            let conf = pred.confidence(cell);
            (conf > conf_threshold).then(|| Detection::new(pred.decode_box(cell, prior), conf, cell))
        })
        .collect()
}

#[inline]
fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAK * x
    }
}

#[inline]
fn leaky_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAK
    }
}

/// Splits each input row into even and odd columns so that every stride-2
/// tap reads a contiguous run. Row `r` keeps even columns in `[0, w/2)` and
/// odd columns in `[w/2, w)`.
fn split_columns(input: &[f64], rows: usize, w: usize) -> Vec<f64> {
    let half = w / 2;
    let mut out = vec![0.0; input.len()];
    for r in 0..rows {
        let src = &input[r * w..(r + 1) * w];
        let (even, odd) = out[r * w..(r + 1) * w].split_at_mut(half);
        for x in 0..half {
            even[x] = src[2 * x];
            odd[x] = src[2 * x + 1];
        }
    }
    out
}

fn merge_columns(split: &[f64], rows: usize, w: usize, out: &mut [f64]) {
    let half = w / 2;
    for r in 0..rows {
        let (even, odd) = split[r * w..(r + 1) * w].split_at(half);
        let dst = &mut out[r * w..(r + 1) * w];
        for x in 0..half {
            dst[2 * x] += even[x];
            dst[2 * x + 1] += odd[x];
        }
    }
}

/// Source offset within a split row, first output column, and run length for
/// tap `kx`: input column `2*ox + kx - 1` is odd `ox - 1` for `kx = 0`, even
/// `ox` for `kx = 1` and odd `ox` for `kx = 2`.
#[inline]
fn tap_range(kx: usize, ow: usize) -> (usize, usize, usize) {
    match kx {
        0 => (ow, 1, ow - 1),
        1 => (0, 0, ow),
        _ => (ow, 0, ow),
    }
}

/// 3x3 convolution, stride 2, zero padding 1. Input `[cin][h][w]`, output
/// `[cout][h/2][w/2]`. With stride 2 and even sizes only the top row and left
/// column of taps ever fall outside the input.
fn conv_s2_forward(input: &[f64], h: usize, w: usize, params: &[f64], layer: Conv) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let split = split_columns(input, layer.cin * h, w);
    let weights = &params[layer.offset..layer.offset + layer.weights()];
    let bias = &params[layer.offset + layer.weights()..layer.offset + layer.len()];
    let mut out = vec![0.0; layer.cout * oh * ow];
    for (o, plane) in out.chunks_exact_mut(oh * ow).enumerate() {
        plane.fill(bias[o]);
        for i in 0..layer.cin {
            let src = &split[i * h * w..(i + 1) * h * w];
            for ky in 0..3 {
                let oy0 = usize::from(ky == 0);
                for kx in 0..3 {
                    let wv = weights[((o * layer.cin + i) * 3 + ky) * 3 + kx];
                    let (base, ox0, n) = tap_range(kx, ow);
                    for oy in oy0..oh {
                        let row = &src[(2 * oy + ky - 1) * w + base..][..n];
                        let dst = &mut plane[oy * ow + ox0..][..n];
                        for (d, s) in dst.iter_mut().zip(row) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_s2_backward(
    input: &[f64],
    h: usize,
    w: usize,
    params: &[f64],
    layer: Conv,
    dout: &[f64],
    grad: &mut [f64],
    dinput: Option<&mut [f64]>,
) {
    let (oh, ow) = (h / 2, w / 2);
    let split = split_columns(input, layer.cin * h, w);
    let mut dsplit = dinput.as_ref().map(|_| vec![0.0; input.len()]);
    let wbase = layer.offset;
    let bbase = layer.offset + layer.weights();
    for (o, dplane) in dout.chunks_exact(oh * ow).enumerate() {
        grad[bbase + o] += dplane.iter().sum::<f64>();
        for i in 0..layer.cin {
            let src = &split[i * h * w..(i + 1) * h * w];
            for ky in 0..3 {
                let oy0 = usize::from(ky == 0);
                for kx in 0..3 {
                    let widx = wbase + ((o * layer.cin + i) * 3 + ky) * 3 + kx;
                    let wv = params[widx];
                    let (base, ox0, n) = tap_range(kx, ow);
                    let mut acc = 0.0;
                    for oy in oy0..oh {
                        let r = (2 * oy + ky - 1) * w + base;
                        let drow = &dplane[oy * ow + ox0..][..n];
                        acc += drow.iter().zip(&src[r..r + n]).map(|(d, s)| d * s).sum::<f64>();
                        if let Some(ds) = dsplit.as_mut() {
                            for (d, g) in ds[i * h * w + r..][..n].iter_mut().zip(drow) {
                                *d += wv * g;
                            }
                        }
                    }
                    grad[widx] += acc;
                }
            }
        }
    }
    if let (Some(ds), Some(di)) = (dsplit, dinput) {
        merge_columns(&ds, layer.cin * h, w, di);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise_frame(seed: u64, w: usize, h: usize) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::new(w, h, (0..w * h).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    fn small() -> Detector {
        Detector::new(16, 16, DetectorConfig { channels1: 3, channels2: 4, ..Default::default() }).unwrap()
    }

    #[test]
    fn zero_params_give_half_confidence_everywhere() {
        let det = Detector::default_64();
        let pred = det.forward(&ParameterVector::zeros(det.num_params()), &noise_frame(1, 64, 64)).unwrap();
        assert_eq!(pred.num_cells(), 64);
        for c in 0..64 {
            assert_eq!(pred.confidence(c), 0.5);
        }
        assert!(det.decode(&pred, 0.5).is_empty());
        assert_eq!(det.decode(&pred, 0.0).len(), 64);
        assert!(det.decode(&pred, 1.0).is_empty());
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let det = Detector::default_64();
        let params = det.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        let f = noise_frame(2, 64, 64);
        let a = det.forward(&params, &f).unwrap();
        let b = det.forward(&params, &f.clone()).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
        for det in det.decode(&a, 0.0) {
            assert!(det.bbox.is_valid());
        }
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let det = Detector::default_64();
        let params = ParameterVector::zeros(det.num_params());
        assert!(det.forward(&params, &Frame::filled(32, 64, 0.0)).is_err());
        assert!(det.forward(&ParameterVector::zeros(3), &Frame::filled(64, 64, 0.0)).is_err());
        assert!(Detector::new(60, 64, DetectorConfig::default()).is_err());
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let det = small();
        let params = det.init_params(&mut ChaCha8Rng::seed_from_u64(4));
        let f = noise_frame(5, 16, 16);
        let (v, g) = det.gradient(&params, &[&f], |p| Ok(LossValue::constant(3.0, p))).unwrap();
        assert_eq!(v, 3.0);
        assert!(g.0.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn half_squared_norm_has_params_as_gradient() {
        let det = small();
        let params = det.init_params(&mut ChaCha8Rng::seed_from_u64(4));
        let f = noise_frame(5, 16, 16);
        let (_, g) = det
            .gradient(&params, &[&f], |p| {
                let mut l = LossValue::constant(params.norm().powi(2) / 2.0, p);
                l.wrt_params = Some(params.clone());
                Ok(l)
            })
            .unwrap();
        assert_eq!(g, params);
    }

    #[test]
    fn backward_matches_finite_differences_for_linear_readout() {
        let det = small();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = det.init_params(&mut rng);
        let f = noise_frame(6, 16, 16);
        let n = det.num_cells() * CELL_OUTPUTS;
        let coef: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |p: &ParameterVector| -> f64 {
            let pred = det.forward(p, &f).unwrap();
            pred.values.iter().zip(&coef).map(|(a, b)| a * b).sum()
        };
        let (_, g) = det
            .gradient(&params, &[&f], |_| {
                Ok(LossValue { value: 0.0, wrt_predictions: vec![coef.clone()], wrt_params: None })
            })
            .unwrap();
        let step = 1e-5;
        let mut num = vec![0.0; params.len()];
        for (i, out) in num.iter_mut().enumerate() {
            let mut plus = params.clone();
            plus.0[i] += step;
            let mut minus = params.clone();
            minus.0[i] -= step;
            *out = (objective(&plus) - objective(&minus)) / (2.0 * step);
        }
        let err: f64 = num.iter().zip(&g.0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(err / scale < 1e-6, "relative error {}", err / scale);
    }
}
