//! Per-tool spoof scorers and the guidance sentence built from their output.
//!
//! Each expert is a logistic regression over a fixed 84-dimensional texture
//! descriptor of a tool-result raster. Training runs mini-batch Adam over
//! standardized features; the standardization is folded back into the
//! stored weights so prediction needs only the raw features.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::Raster;
use crate::trajectory::Cls;
use crate::vistools::ToolId;

pub const INTENSITY_BINS: usize = 64;
pub const MAGNITUDE_BINS: usize = 16;
pub const FEATURE_DIM: usize = INTENSITY_BINS + 4 + MAGNITUDE_BINS;
pub const DECISION_THRESHOLD: f64 = 0.5;

const FEATURE_NAME: &str = "hist64-grad4-mag16";
const FEATURE_VERSION: u32 = 1;
const LOGIT_CLAMP: f64 = 30.0;
/// Largest gradient magnitude on [0,1] intensities with half-differences.
const MAX_MAGNITUDE: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("image {width}x{height} is smaller than 3x3")]
    ImageTooSmall { width: u32, height: u32 },
    #[error("experts take single-channel input, got {0} channels")]
    NotGrayscale(u8),
    #[error("need at least 2 examples per class, got {real} real and {spoof} spoof")]
    InsufficientData { real: usize, spoof: usize },
    #[error("training data contains a single class")]
    DegenerateLabels,
    #[error("feature spec mismatch: {0}")]
    FeatureSpecMismatch(String),
    #[error("probability {0} is not in [0, 1]")]
    InvalidProbability(f64),
    #[error("ZoomInTool has no expert")]
    NoExpertForZoom,
    #[error("no expert loaded for {0}")]
    MissingExpert(ToolId),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub name: String,
    pub version: u32,
    pub dim: usize,
}

impl FeatureSpec {
    pub fn current() -> Self {
        Self {
            name: FEATURE_NAME.to_string(),
            version: FEATURE_VERSION,
            dim: FEATURE_DIM,
        }
    }
}

/// Descriptor of a grayscale raster:
///
/// * 64-bin intensity histogram (L1-normalized),
/// * mean and variance of |∂x| and |∂y|,
/// * 16-bin gradient-magnitude histogram over `[0, 1/√2]` (L1-normalized).
///
/// Intensities are scaled to `[0, 1]` and gradients are half central
/// differences taken at interior pixels.
pub fn extract_features(img: &Raster) -> Result<Vec<f64>, ExpertError> {
    if !img.is_gray() {
        return Err(ExpertError::NotGrayscale(img.channels()));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w < 3 || h < 3 {
        return Err(ExpertError::ImageTooSmall {
            width: img.width(),
            height: img.height(),
        });
    }
    let data = img.data();
    let mut feats = vec![0.0; FEATURE_DIM];

    for &v in data {
        feats[(v >> 2) as usize] += 1.0;
    }
    let n = data.len() as f64;
    feats[..INTENSITY_BINS].iter_mut().for_each(|c| *c /= n);

    let px = |x: usize, y: usize| f64::from(data[y * w + x]) / 255.0;
    let interior = ((w - 2) * (h - 2)) as f64;
    let mut gx_abs = Vec::with_capacity((w - 2) * (h - 2));
    let mut gy_abs = Vec::with_capacity(gx_abs.capacity());
    let mag_off = INTENSITY_BINS + 4;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = (px(x + 1, y) - px(x - 1, y)) / 2.0;
            let gy = (px(x, y + 1) - px(x, y - 1)) / 2.0;
            gx_abs.push(gx.abs());
            gy_abs.push(gy.abs());
            let mag = gx.hypot(gy);
            let bin = ((mag / MAX_MAGNITUDE * MAGNITUDE_BINS as f64) as usize).min(MAGNITUDE_BINS - 1);
            feats[mag_off + bin] += 1.0;
        }
    }
    feats[mag_off..].iter_mut().for_each(|c| *c /= interior);
    let (mx, vx) = mean_var(&gx_abs);
    let (my, vy) = mean_var(&gy_abs);
    feats[INTENSITY_BINS..INTENSITY_BINS + 4].copy_from_slice(&[mx, vx, my, vy]);
    Ok(feats)
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertModel {
    pub tool: ToolId,
    pub feature_spec: FeatureSpec,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl ExpertModel {
    /// All-zero model: predicts 0.5 everywhere.
    pub fn neutral(tool: ToolId) -> Result<Self, ExpertError> {
        Self::new(tool, vec![0.0; FEATURE_DIM], 0.0)
    }

    pub fn new(tool: ToolId, weights: Vec<f64>, bias: f64) -> Result<Self, ExpertError> {
        let m = Self {
            tool,
            feature_spec: FeatureSpec::current(),
            weights,
            bias,
        };
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<(), ExpertError> {
        if self.tool == ToolId::ZoomIn {
            return Err(ExpertError::NoExpertForZoom);
        }
        let spec = FeatureSpec::current();
        if self.feature_spec != spec {
            return Err(ExpertError::FeatureSpecMismatch(format!(
                "model uses {} v{}, runtime provides {} v{}",
                self.feature_spec.name, self.feature_spec.version, spec.name, spec.version
            )));
        }
        if self.weights.len() != spec.dim {
            return Err(ExpertError::FeatureSpecMismatch(format!(
                "{} weights for a {}-dimensional feature",
                self.weights.len(),
                spec.dim
            )));
        }
        if !self.bias.is_finite() || self.weights.iter().any(|w| !w.is_finite()) {
            return Err(ExpertError::FeatureSpecMismatch("non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn logit(&self, features: &[f64]) -> f64 {
        let z: f64 = self.weights.iter().zip(features).map(|(w, x)| w * x).sum::<f64>() + self.bias;
        z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExpertError> {
        let path = path.as_ref();
        let io = |message: String| ExpertError::Io {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        let model: Self = serde_json::from_str(&text).map_err(|e| io(e.to_string()))?;
        model.check()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ExpertError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("model serializes");
        std::fs::write(path, text + "\n").map_err(|e| ExpertError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Spoof probability `σ(w·φ(img) + b)`, strictly inside (0, 1).
pub fn predict(model: &ExpertModel, img: &Raster) -> Result<f64, ExpertError> {
    model.check()?;
    let feats = extract_features(img)?;
    Ok(sigmoid(model.logit(&feats)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn d_epochs() -> usize {
    10
}
fn d_lr() -> f64 {
    1e-3
}
fn d_batch() -> usize {
    32
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: d_epochs(),
            lr: d_lr(),
            batch_size: d_batch(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: ExpertModel,
    pub train_accuracy: f64,
    /// Mean binary cross-entropy on the full set before training and after
    /// each epoch.
    pub losses: Vec<f64>,
}

/// Spoof is the positive class.
fn target(label: Cls) -> f64 {
    match label {
        Cls::Spoof => 1.0,
        Cls::Real => 0.0,
    }
}

pub fn train_expert(
    tool: ToolId,
    data: &[(Raster, Cls)],
    cfg: &TrainConfig,
) -> Result<TrainReport, ExpertError> {
    if tool == ToolId::ZoomIn {
        return Err(ExpertError::NoExpertForZoom);
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(ExpertError::InvalidConfig(
            "epochs, batch_size and lr must be positive".into(),
        ));
    }
    let spoof = data.iter().filter(|(_, c)| *c == Cls::Spoof).count();
    let real = data.len() - spoof;
    if real == 0 || spoof == 0 {
        return Err(ExpertError::DegenerateLabels);
    }
    if real < 2 || spoof < 2 {
        return Err(ExpertError::InsufficientData { real, spoof });
    }

    let feats = data
        .iter()
        .map(|(img, _)| extract_features(img))
        .collect::<Result<Vec<_>, _>>()?;
    let ys: Vec<f64> = data.iter().map(|(_, c)| target(*c)).collect();

    let n = feats.len() as f64;
    let mut mu = vec![0.0; FEATURE_DIM];
    let mut sd = vec![0.0; FEATURE_DIM];
    for f in &feats {
        for (m, x) in mu.iter_mut().zip(f) {
            *m += x / n;
        }
    }
    for f in &feats {
        for ((s, x), m) in sd.iter_mut().zip(f).zip(&mu) {
            *s += (x - m).powi(2) / n;
        }
    }
    for s in &mut sd {
        *s = if s.sqrt() > 1e-12 { s.sqrt() } else { 1.0 };
    }
    let zs: Vec<Vec<f64>> = feats
        .iter()
        .map(|f| f.iter().zip(&mu).zip(&sd).map(|((x, m), s)| (x - m) / s).collect())
        .collect();

    let mut w = vec![0.0; FEATURE_DIM];
    let mut b = 0.0;
    let mut adam = Adam::new(FEATURE_DIM + 1, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..zs.len()).collect();
    let mut losses = vec![mean_bce(&zs, &ys, &w, b)];
    let mut grad = vec![0.0; FEATURE_DIM + 1];

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let err = sigmoid(dot(&w, &zs[i]) + b) - ys[i];
                for (g, x) in grad.iter_mut().zip(&zs[i]) {
                    *g += err * x;
                }
                grad[FEATURE_DIM] += err;
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam.step(&grad, |k, delta| {
                if k < FEATURE_DIM {
                    w[k] -= delta;
                } else {
                    b -= delta;
                }
            });
        }
        losses.push(mean_bce(&zs, &ys, &w, b));
    }

    let weights: Vec<f64> = w.iter().zip(&sd).map(|(wi, s)| wi / s).collect();
    let bias = b - weights.iter().zip(&mu).map(|(wi, m)| wi * m).sum::<f64>();
    let model = ExpertModel::new(tool, weights, bias)?;

    let correct = feats
        .iter()
        .zip(&ys)
        .filter(|(f, y)| {
            let p = sigmoid(model.logit(f));
            (p >= DECISION_THRESHOLD) == (**y > 0.5)
        })
        .count();
    Ok(TrainReport {
        model,
        train_accuracy: correct as f64 / n,
        losses,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mean_bce(zs: &[Vec<f64>], ys: &[f64], w: &[f64], b: f64) -> f64 {
    let total: f64 = zs
        .iter()
        .zip(ys)
        .map(|(z, y)| {
            let logit = dot(w, z) + b;
            // log(1 + e^z) − y·z, written to stay finite for large |z|
            logit.max(0.0) + (-logit.abs()).exp().ln_1p() - y * logit
        })
        .sum();
    total / zs.len() as f64
}

struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(dim: usize, lr: f64) -> Self {
        Self {
            lr,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    fn step(&mut self, grad: &[f64], mut apply: impl FnMut(usize, f64)) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (k, &g) in grad.iter().enumerate() {
            self.m[k] = Self::BETA1 * self.m[k] + (1.0 - Self::BETA1) * g;
            self.v[k] = Self::BETA2 * self.v[k] + (1.0 - Self::BETA2) * g * g;
            let m_hat = self.m[k] / c1;
            let v_hat = self.v[k] / c2;
            apply(k, self.lr * m_hat / (v_hat.sqrt() + Self::EPS));
        }
    }
}

/// `This is the result of {Tool}. The expert predicts {N}% there's spoof trace`
/// with `N = ⌊100p + ½⌋`.
pub fn guidance_text(tool: ToolId, p: f64) -> Result<String, ExpertError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(ExpertError::InvalidProbability(p));
    }
    let pct = (100.0 * p + 0.5).floor() as u32;
    Ok(format!(
        "This is the result of {}. The expert predicts {pct}% there's spoof trace",
        tool.wire_name()
    ))
}

/// One model per non-zoom tool.
#[derive(Debug, Clone, Default)]
pub struct ExpertSet {
    models: BTreeMap<ToolId, ExpertModel>,
}

impl ExpertSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Neutral models for every tool that takes an expert.
    pub fn neutral() -> Self {
        let mut set = Self::new();
        for t in ToolId::ALL.into_iter().filter(|t| t.has_expert()) {
            set.insert(ExpertModel::neutral(t).expect("neutral model is valid"));
        }
        set
    }

    pub fn insert(&mut self, model: ExpertModel) {
        self.models.insert(model.tool, model);
    }

    pub fn get(&self, tool: ToolId) -> Option<&ExpertModel> {
        self.models.get(&tool)
    }

    /// Loads `<dir>/<ToolName>.json` for every tool that takes an expert.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, ExpertError> {
        let mut set = Self::new();
        for t in ToolId::ALL.into_iter().filter(|t| t.has_expert()) {
            let path = dir.as_ref().join(format!("{}.json", t.wire_name()));
            let model = ExpertModel::load(&path)?;
            if model.tool != t {
                return Err(ExpertError::Io {
                    path,
                    message: format!("file holds the {} expert", model.tool),
                });
            }
            set.insert(model);
        }
        Ok(set)
    }

    /// Every tool that takes an expert has one.
    pub fn is_complete(&self) -> bool {
        ToolId::ALL
            .into_iter()
            .filter(|t| t.has_expert())
            .all(|t| self.models.contains_key(&t))
    }

    pub fn predict(&self, tool: ToolId, img: &Raster) -> Result<f64, ExpertError> {
        if tool == ToolId::ZoomIn {
            return Err(ExpertError::NoExpertForZoom);
        }
        let model = self.get(tool).ok_or(ExpertError::MissingExpert(tool))?;
        predict(model, img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn checker(side: u32) -> Raster {
        Raster::from_fn(side, side, |x, y| if (x / 2 + y / 2) % 2 == 0 { 0 } else { 255 }).unwrap()
    }

    #[test]
    fn constant_image_features() {
        let f = extract_features(&Raster::filled(10, 10, 1, 130).unwrap()).unwrap();
        assert_eq!(f[130 >> 2], 1.0);
        assert_eq!(&f[64..68], &[0.0; 4]);
        assert!((f[68] - 1.0).abs() < 1e-12);
        assert_eq!(f.len(), 84);
    }

    #[test]
    fn checkerboard_fills_top_magnitude_bin() {
        let f = extract_features(&checker(16)).unwrap();
        assert!((f[83] - 1.0).abs() < 1e-9, "top bin {}", f[83]);
        // every |∂| equals one half
        assert!((f[64] - 0.5).abs() < 1e-12 && f[65].abs() < 1e-12);
        assert!((f[66] - 0.5).abs() < 1e-12 && f[67].abs() < 1e-12);
    }

    #[test]
    fn histograms_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (w, h) = (rng.random_range(3..30), rng.random_range(3..30));
            let img = Raster::from_fn(w, h, |_, _| rng.random()).unwrap();
            let f = extract_features(&img).unwrap();
            assert!((f[..64].iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((f[68..].iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_small_and_rgb() {
        assert!(matches!(
            extract_features(&Raster::filled(2, 5, 1, 0).unwrap()),
            Err(ExpertError::ImageTooSmall { .. })
        ));
        assert!(matches!(
            extract_features(&Raster::filled(5, 5, 3, 0).unwrap()),
            Err(ExpertError::NotGrayscale(3))
        ));
    }

    #[test]
    fn neutral_predicts_half_and_bias_is_monotone() {
        let img = checker(8);
        let m = ExpertModel::neutral(ToolId::Fft).unwrap();
        assert_eq!(predict(&m, &img).unwrap(), 0.5);
        let mut prev = 0.0;
        for b in [-3.0, -1.0, 0.0, 0.5, 2.0] {
            let m = ExpertModel::new(ToolId::Fft, vec![0.1; FEATURE_DIM], b).unwrap();
            let p = predict(&m, &img).unwrap();
            assert!(p > prev && p < 1.0);
            prev = p;
        }
    }

    #[test]
    fn extreme_logits_stay_open() {
        let img = checker(8);
        for s in [1e6, -1e6] {
            let m = ExpertModel::new(ToolId::Lbp, vec![s; FEATURE_DIM], s).unwrap();
            let p = predict(&m, &img).unwrap();
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn model_validation() {
        assert!(matches!(ExpertModel::neutral(ToolId::ZoomIn), Err(ExpertError::NoExpertForZoom)));
        assert!(matches!(
            ExpertModel::new(ToolId::Hog, vec![0.0; 3], 0.0),
            Err(ExpertError::FeatureSpecMismatch(_))
        ));
        let mut m = ExpertModel::neutral(ToolId::Hog).unwrap();
        m.feature_spec.version = 99;
        assert!(matches!(predict(&m, &checker(8)), Err(ExpertError::FeatureSpecMismatch(_))));
    }

    #[test]
    fn guidance() {
        assert_eq!(
            guidance_text(ToolId::Fft, 0.87).unwrap(),
            "This is the result of FFTTool. The expert predicts 87% there's spoof trace"
        );
        assert!(guidance_text(ToolId::Lbp, 0.0).unwrap().contains("predicts 0% "));
        assert!(guidance_text(ToolId::Hog, 0.555).unwrap().contains("predicts 56% "));
        assert!(guidance_text(ToolId::Hog, 1.0).unwrap().contains("predicts 100% "));
        assert!(guidance_text(ToolId::Hog, 1.01).is_err());
        assert!(guidance_text(ToolId::Hog, f64::NAN).is_err());
    }

    #[test]
    fn training_data_checks() {
        let img = checker(8);
        let one_class: Vec<_> = (0..4).map(|_| (img.clone(), Cls::Real)).collect();
        assert!(matches!(
            train_expert(ToolId::Fft, &one_class, &TrainConfig::default()),
            Err(ExpertError::DegenerateLabels)
        ));
        let lopsided = vec![
            (img.clone(), Cls::Real),
            (img.clone(), Cls::Real),
            (img.clone(), Cls::Spoof),
        ];
        assert!(matches!(
            train_expert(ToolId::Fft, &lopsided, &TrainConfig::default()),
            Err(ExpertError::InsufficientData { real: 2, spoof: 1 })
        ));
    }

    #[test]
    fn model_json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = ExpertModel::new(ToolId::Wavelet, (0..84).map(|i| i as f64 * 0.1).collect(), -0.3).unwrap();
        let path = dir.path().join("WaveletTransformTool.json");
        m.save(&path).unwrap();
        assert_eq!(ExpertModel::load(&path).unwrap(), m);
    }
}
