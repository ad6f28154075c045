//! Crop classifier: preprocessing, a one-hidden-layer network with hand-written
//! backpropagation, and AdamW training.

use crate::annotate::BBox;
use crate::Label;
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MODEL_FORMAT: &str = "sdg-mlp";
pub const MODEL_VERSION: u32 = 1;
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("box {bbox} outside {width}x{height} image")]
    BoxOutsideImage { bbox: BBox, width: u32, height: u32 },
    #[error("feature length {got} does not match model input {expected}")]
    Shape { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty batch")]
    EmptyBatch,
    #[error("training set needs both classes (pass: {pass}, fail: {fail})")]
    SingleClass { pass: usize, fail: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("invalid preprocessing spec: {0}")]
    Preprocess(String),
    #[error("model file {path}: {reason}")]
    ModelFile { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessSpec {
    pub crop_size: u32,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub flip_probability: f64,
    pub brightness_jitter: f64,
    pub contrast_jitter: f64,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            crop_size: 32,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
            flip_probability: 0.5,
            brightness_jitter: 0.1,
            contrast_jitter: 0.1,
        }
    }
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<(), LearnerError> {
        let err = |m: &str| Err(LearnerError::Preprocess(m.into()));
        if !(1..=224).contains(&self.crop_size) {
            return err("crop_size must be in 1..=224");
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return err("std entries must be positive");
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return err("flip_probability must be in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.brightness_jitter) || !(0.0..1.0).contains(&self.contrast_jitter) {
            return err("jitter factors must be in [0, 1)");
        }
        Ok(())
    }

    pub fn feature_len(&self) -> usize {
        3 * (self.crop_size * self.crop_size) as usize
    }
}

/// Cropped and resized region, channel-major, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: u32,
    pub data: Vec<f32>,
}

/// Per-image train-time draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub flip: bool,
    pub brightness: f64,
    pub contrast: f64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        flip: false,
        brightness: 1.0,
        contrast: 1.0,
    };

    pub fn draw(spec: &PreprocessSpec, rng: &mut impl Rng) -> Self {
        let flip = rng.gen_bool(spec.flip_probability);
        let b = spec.brightness_jitter;
        let c = spec.contrast_jitter;
        Jitter {
            flip,
            brightness: if b > 0.0 { rng.gen_range(1.0 - b..=1.0 + b) } else { 1.0 },
            contrast: if c > 0.0 { rng.gen_range(1.0 - c..=1.0 + c) } else { 1.0 },
        }
    }
}

/// Crops `bbox` and bilinearly resizes it to `crop_size` square (half-pixel centres,
/// edge-clamped).
pub fn extract_patch(image: &RgbImage, bbox: &BBox, spec: &PreprocessSpec) -> Result<Patch, LearnerError> {
    if bbox.x_min >= bbox.x_max || bbox.y_min >= bbox.y_max || bbox.x_max > image.width() || bbox.y_max > image.height() {
        return Err(LearnerError::BoxOutsideImage {
            bbox: *bbox,
            width: image.width(),
            height: image.height(),
        });
    }
    let s = spec.crop_size as usize;
    let (bw, bh) = (bbox.width() as f64, bbox.height() as f64);
    let axis = |i: usize, extent: f64, origin: u32, len: u32| {
        let v = ((i as f64 + 0.5) * extent / s as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = v.floor() as u32;
        let i1 = (i0 + 1).min(len - 1);
        (origin + i0, origin + i1, v - i0 as f64)
    };
    let xs: Vec<_> = (0..s).map(|i| axis(i, bw, bbox.x_min, bbox.width())).collect();
    let ys: Vec<_> = (0..s).map(|i| axis(i, bh, bbox.y_min, bbox.height())).collect();
    let mut data = vec![0.0f32; 3 * s * s];
    for (yi, &(y0, y1, ty)) in ys.iter().enumerate() {
        for (xi, &(x0, x1, tx)) in xs.iter().enumerate() {
            let (a, b) = (image.get_pixel(x0, y0), image.get_pixel(x1, y0));
            let (c, d) = (image.get_pixel(x0, y1), image.get_pixel(x1, y1));
            for ch in 0..3 {
                let top = a[ch] as f64 * (1.0 - tx) + b[ch] as f64 * tx;
                let bottom = c[ch] as f64 * (1.0 - tx) + d[ch] as f64 * tx;
                data[ch * s * s + yi * s + xi] = ((top * (1.0 - ty) + bottom * ty) / 255.0) as f32;
            }
        }
    }
    Ok(Patch {
        size: spec.crop_size,
        data,
    })
}

/// Mirrors a patch left to right.
pub fn flip_horizontal(patch: &Patch) -> Patch {
    let s = patch.size as usize;
    let mut data = patch.data.clone();
    for row in data.chunks_mut(s) {
        row.reverse();
    }
    Patch { size: patch.size, data }
}

/// Applies `jitter` (flip, brightness scale, contrast blend toward the mean grey level),
/// then normalizes each channel, writing `3·s²` features into `out`.
pub fn featurize(patch: &Patch, spec: &PreprocessSpec, jitter: Jitter, out: &mut [f64]) {
    let s = patch.size as usize;
    let plane = s * s;
    debug_assert_eq!(out.len(), 3 * plane);
    for ch in 0..3 {
        for y in 0..s {
            for x in 0..s {
                let src_x = if jitter.flip { s - 1 - x } else { x };
                out[ch * plane + y * s + x] = patch.data[ch * plane + y * s + src_x] as f64;
            }
        }
    }
    if jitter.brightness != 1.0 {
        for v in out.iter_mut() {
            *v = (*v * jitter.brightness).clamp(0.0, 1.0);
        }
    }
    if jitter.contrast != 1.0 {
        let (r, g, b) = (&out[..plane], &out[plane..2 * plane], &out[2 * plane..]);
        let grey: f64 = (0..plane).map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).sum::<f64>() / plane as f64;
        for v in out.iter_mut() {
            *v = (grey + jitter.contrast * (*v - grey)).clamp(0.0, 1.0);
        }
    }
    for ch in 0..3 {
        let (m, sd) = (spec.mean[ch], spec.std[ch]);
        for v in &mut out[ch * plane..(ch + 1) * plane] {
            *v = (*v - m) / sd;
        }
    }
}

/// Full preprocessing of one crop. In eval mode the result is deterministic and the
/// seed is ignored.
pub fn preprocess(image: &RgbImage, bbox: &BBox, spec: &PreprocessSpec, seed: u64, train_mode: bool) -> Result<Vec<f64>, LearnerError> {
    let patch = extract_patch(image, bbox, spec)?;
    let jitter = if train_mode {
        Jitter::draw(spec, &mut ChaCha8Rng::seed_from_u64(seed))
    } else {
        Jitter::NONE
    };
    let mut out = vec![0.0; spec.feature_len()];
    featurize(&patch, spec, jitter, &mut out);
    Ok(out)
}

/// Dense `input → hidden (ReLU) → 2 (softmax)` network. Weight matrices are row-major
/// with one row per output unit. Also used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub input_dim: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            input_dim,
            hidden,
            w1: vec![0.0; hidden * input_dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; NUM_CLASSES * hidden],
            b2: vec![0.0; NUM_CLASSES],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(input_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(input_dim, hidden);
        let a1 = (6.0 / (input_dim + hidden) as f64).sqrt();
        p.w1.iter_mut().for_each(|w| *w = rng.gen_range(-a1..=a1));
        let a2 = (6.0 / (hidden + NUM_CLASSES) as f64).sqrt();
        p.w2.iter_mut().for_each(|w| *w = rng.gen_range(-a2..=a2));
        p
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn blocks(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn blocks_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &[f64]) -> Result<(), LearnerError> {
        if x.len() != self.input_dim {
            return Err(LearnerError::Shape {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LearnerError::NonFinite("input features"));
        }
        Ok(())
    }

    fn hidden_pre(&self, x: &[f64]) -> Vec<f64> {
        self.w1
            .chunks_exact(self.input_dim)
            .zip(&self.b1)
            .map(|(row, b)| b + dot(row, x))
            .collect()
    }

    fn logits(&self, h: &[f64]) -> [f64; 2] {
        let mut z = [0.0; 2];
        for (k, zk) in z.iter_mut().enumerate() {
            *zk = self.b2[k] + self.w2[k * self.hidden..(k + 1) * self.hidden].iter().zip(h).map(|(w, v)| w * v).sum::<f64>();
        }
        z
    }
}

/// Dot product with four independent partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(u, v)| u * v).sum();
    for (u, v) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += u[k] * v[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn softmax2(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let e = [(z[0] - m).exp(), (z[1] - m).exp()];
    let s = e[0] + e[1];
    [e[0] / s, e[1] / s]
}

fn log_softmax2(z: [f64; 2], k: usize) -> f64 {
    let m = z[0].max(z[1]);
    z[k] - m - ((z[0] - m).exp() + (z[1] - m).exp()).ln()
}

/// Class probabilities `[p_pass, p_fail]`.
pub fn forward(params: &ModelParams, x: &[f64]) -> Result<[f64; 2], LearnerError> {
    params.check_input(x)?;
    let h: Vec<f64> = params.hidden_pre(x).into_iter().map(|v| v.max(0.0)).collect();
    let p = softmax2(params.logits(&h));
    if p.iter().any(|v| !v.is_finite()) {
        return Err(LearnerError::NonFinite("probabilities"));
    }
    Ok(p)
}

/// Gradients of the mean cross-entropy over the batch, and that mean loss.
pub fn backward(params: &ModelParams, inputs: &[&[f64]], labels: &[Label]) -> Result<(ModelParams, f64), LearnerError> {
    if inputs.is_empty() {
        return Err(LearnerError::EmptyBatch);
    }
    assert_eq!(inputs.len(), labels.len(), "batch inputs and labels differ in length");
    let (d, hd) = (params.input_dim, params.hidden);
    let mut g = ModelParams::zeros(d, hd);
    let mut loss = 0.0;
    let mut dh = vec![0.0; hd];
    for (x, &y) in inputs.iter().zip(labels) {
        params.check_input(x)?;
        let pre = params.hidden_pre(x);
        let h: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let z = params.logits(&h);
        let k = y.class_index();
        loss -= log_softmax2(z, k);
        let p = softmax2(z);
        let dz = [p[0] - (k == 0) as u8 as f64, p[1] - (k == 1) as u8 as f64];
        for c in 0..NUM_CLASSES {
            g.b2[c] += dz[c];
            for (gw, hv) in g.w2[c * hd..(c + 1) * hd].iter_mut().zip(&h) {
                *gw += dz[c] * hv;
            }
        }
        for j in 0..hd {
            dh[j] = if pre[j] > 0.0 {
                dz[0] * params.w2[j] + dz[1] * params.w2[hd + j]
            } else {
                0.0
            };
        }
        for (j, &dj) in dh.iter().enumerate() {
            if dj == 0.0 {
                continue;
            }
            g.b1[j] += dj;
            for (gw, xv) in g.w1[j * d..(j + 1) * d].iter_mut().zip(x.iter()) {
                *gw += dj * xv;
            }
        }
    }
    let n = inputs.len() as f64;
    for block in g.blocks_mut() {
        block.iter_mut().for_each(|v| *v /= n);
    }
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(LearnerError::NonFinite("loss"));
    }
    Ok((g, loss))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub hidden: usize,
    /// Derived from the run's master seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
            epochs: 30,
            hidden: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        let err = |m: &str| Err(LearnerError::Config(m.into()));
        if self.batch_size == 0 {
            return err("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err("learning_rate must be positive");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return err("beta1 and beta2 must lie in (0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return err("epsilon must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return err("weight_decay must be non-negative");
        }
        if self.hidden == 0 {
            return err("hidden must be positive");
        }
        Ok(())
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let z = ModelParams::zeros(params.input_dim, params.hidden);
        Self { m: z.clone(), v: z }
    }
}

/// Moments of weights that stop receiving gradient decay geometrically into subnormal
/// range, where arithmetic is orders of magnitude slower; their contribution is far
/// below one ulp of any weight, so they are cut to zero.
#[inline]
fn flush_subnormal(v: f64) -> f64 {
    if v.abs() < f64::MIN_POSITIVE {
        0.0
    } else {
        v
    }
}

/// One AdamW update at step `t ≥ 1` with decoupled weight decay.
pub fn adamw_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, t: u64, cfg: &TrainConfig) {
    assert!(t >= 1, "AdamW step counter starts at 1");
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let (lr, b1, b2, eps, wd) = (cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon, cfg.weight_decay);
    let [pw1, pb1, pw2, pb2] = params.blocks_mut();
    let [mw1, mb1, mw2, mb2] = state.m.blocks_mut();
    let [vw1, vb1, vw2, vb2] = state.v.blocks_mut();
    for (((p, g), m), v) in [pw1, pb1, pw2, pb2]
        .into_iter()
        .zip(grads.blocks())
        .zip([mw1, mb1, mw2, mb2])
        .zip([vw1, vb1, vw2, vb2])
    {
        let n = p.len();
        let (g, m, v) = (&g[..n], &mut m[..n], &mut v[..n]);
        for (((pi, &gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = flush_subnormal(b1 * *mi + (1.0 - b1) * gi);
            *vi = flush_subnormal(b2 * *vi + (1.0 - b2) * gi * gi);
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *pi);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean training loss of each epoch.
    pub loss_history: Vec<f64>,
}

/// Minibatch AdamW training. `features(i, rng, out)` writes sample `i`'s feature vector
/// and may draw augmentation from `rng`.
pub fn train_with<F>(labels: &[Label], input_dim: usize, cfg: &TrainConfig, mut features: F) -> Result<TrainOutcome, LearnerError>
where
    F: FnMut(usize, &mut ChaCha8Rng, &mut [f64]),
{
    cfg.validate()?;
    let pass = labels.iter().filter(|&&l| l == Label::Pass).count();
    let fail = labels.len() - pass;
    if pass == 0 || fail == 0 {
        return Err(LearnerError::SingleClass { pass, fail });
    }
    let mut params = ModelParams::init(input_dim, cfg.hidden, cfg.seed);
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_7EA1);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut buf = vec![0.0; cfg.batch_size * input_dim];
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut t = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            for (slot, &i) in batch.iter().enumerate() {
                features(i, &mut rng, &mut buf[slot * input_dim..(slot + 1) * input_dim]);
            }
            let inputs: Vec<&[f64]> = buf.chunks_exact(input_dim).take(batch.len()).collect();
            let ys: Vec<Label> = batch.iter().map(|&i| labels[i]).collect();
            let (grads, loss) = backward(&params, &inputs, &ys)?;
            t += 1;
            adamw_step(&mut params, &grads, &mut state, t, cfg);
            epoch_loss += loss * batch.len() as f64;
        }
        history.push(epoch_loss / labels.len() as f64);
    }
    if !params.is_finite() {
        return Err(LearnerError::NonFinite("parameters"));
    }
    Ok(TrainOutcome {
        params,
        loss_history: history,
    })
}

/// Trains on fixed feature vectors (no augmentation).
pub fn train(inputs: &[Vec<f64>], labels: &[Label], cfg: &TrainConfig) -> Result<TrainOutcome, LearnerError> {
    let dim = inputs.first().map_or(0, Vec::len);
    if let Some(bad) = inputs.iter().find(|x| x.len() != dim) {
        return Err(LearnerError::Shape {
            expected: dim,
            got: bad.len(),
        });
    }
    train_with(labels, dim, cfg, |i, _, out| out.copy_from_slice(&inputs[i]))
}

/// Trains on cached patches with per-epoch flip and colour jitter.
pub fn train_patches(patches: &[Patch], labels: &[Label], spec: &PreprocessSpec, cfg: &TrainConfig) -> Result<TrainOutcome, LearnerError> {
    spec.validate()?;
    train_with(labels, spec.feature_len(), cfg, |i, rng, out| {
        let jitter = Jitter::draw(spec, rng);
        featurize(&patches[i], spec, jitter, out);
    })
}

/// Most probable class and its probability; exact ties go to fail.
pub fn predict(params: &ModelParams, x: &[f64]) -> Result<(Label, f64), LearnerError> {
    let p = forward(params, x)?;
    Ok(if p[0] > p[1] { (Label::Pass, p[0]) } else { (Label::Fail, p[1]) })
}

pub fn predict_patch(params: &ModelParams, patch: &Patch, spec: &PreprocessSpec) -> Result<(Label, f64), LearnerError> {
    let mut x = vec![0.0; spec.feature_len()];
    featurize(patch, spec, Jitter::NONE, &mut x);
    predict(params, &x)
}

pub fn predict_image(params: &ModelParams, image: &RgbImage, bbox: &BBox, spec: &PreprocessSpec) -> Result<(Label, f64), LearnerError> {
    predict_patch(params, &extract_patch(image, bbox, spec)?, spec)
}

pub fn predict_batch(params: &ModelParams, inputs: &[Vec<f64>]) -> Result<Vec<(Label, f64)>, LearnerError> {
    inputs.iter().map(|x| predict(params, x)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    version: u32,
    input_dim: usize,
    hidden: usize,
    classes: usize,
    crop_size: u32,
}

/// Writes a JSON header line followed by little-endian `f64` values (w1, b1, w2, b2).
pub fn save_model(path: &Path, params: &ModelParams, spec: &PreprocessSpec) -> Result<(), LearnerError> {
    let header = ModelHeader {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        input_dim: params.input_dim,
        hidden: params.hidden,
        classes: NUM_CLASSES,
        crop_size: spec.crop_size,
    };
    let mut bytes = serde_json::to_vec(&header).expect("header serializes");
    bytes.push(b'\n');
    bytes.reserve(8 * params.param_count());
    for block in params.blocks() {
        for v in block {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let fail = |e: std::io::Error| LearnerError::ModelFile {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let mut f = fs::File::create(path).map_err(fail)?;
    f.write_all(&bytes).map_err(fail)
}

/// Reads a model written by [`save_model`], returning it with its crop size.
pub fn load_model(path: &Path) -> Result<(ModelParams, u32), LearnerError> {
    let bad = |reason: String| LearnerError::ModelFile {
        path: path.display().to_string(),
        reason,
    };
    let f = fs::File::open(path).map_err(|e| bad(e.to_string()))?;
    let mut r = BufReader::new(f);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| bad(e.to_string()))?;
    let header: ModelHeader = serde_json::from_str(line.trim_end()).map_err(|e| bad(format!("header: {e}")))?;
    if header.format != MODEL_FORMAT || header.version != MODEL_VERSION || header.classes != NUM_CLASSES {
        return Err(bad(format!(
            "unsupported format {} v{} with {} classes",
            header.format, header.version, header.classes
        )));
    }
    let mut params = ModelParams::zeros(header.input_dim, header.hidden);
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| bad(e.to_string()))?;
    if rest.len() != 8 * params.param_count() {
        return Err(bad(format!("expected {} parameter bytes, found {}", 8 * params.param_count(), rest.len())));
    }
    let mut values = rest.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    for block in params.blocks_mut() {
        for v in block.iter_mut() {
            *v = values.next().expect("length checked");
        }
    }
    if !params.is_finite() {
        return Err(bad("non-finite parameter".into()));
    }
    Ok((params, header.crop_size))
}
