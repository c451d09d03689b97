//! Patch-scoring metrics over (predicted, ground-truth) pairs.
//!
//! Five scores drive the hard-patch mining: zipper (gradient mismatch away
//! from edges), grid (spurious gradients on flat ground truth), plain L1,
//! perceptual feature distance, and edge-response distance. All are sums, not
//! means; mining works on quantiles so absolute scale does not matter.

mod extractor;

pub use extractor::FeatureExtractor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{edge_map, grad_abs, Patch};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricConfig {
    /// Edge-difference threshold for the non-edge mask.
    pub eps1: f64,
    /// Gradient gate threshold in the grid metric.
    pub eps2: f64,
    /// Sigmoid scale in the grid metric's flatness weight.
    pub alpha: f64,
    /// One grid-metric sub-category is mined per listed gate value.
    pub grid_eps2_variants: Vec<f64>,
    /// Seed for the perceptual feature extractor.
    pub fx_seed: u64,
    /// Extractor tap `(stage, conv-within-stage)`; features are taken
    /// post-activation and each stage has a single convolution.
    pub fx_stage: (usize, usize),
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            eps1: 0.1,
            eps2: 0.02,
            alpha: 0.05,
            grid_eps2_variants: vec![0.01, 0.02, 0.05],
            fx_seed: 1,
            fx_stage: (2, 1),
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eps1 <= 0.0 || self.eps2 <= 0.0 || self.alpha <= 0.0 {
            return Err(Error::InvalidConfig(
                "metric thresholds eps1, eps2, alpha must be > 0".into(),
            ));
        }
        if self.grid_eps2_variants.iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidConfig("grid_eps2_variants must be > 0".into()));
        }
        if self.fx_stage.0 == 0 {
            return Err(Error::InvalidConfig("fx_stage is 1-based".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Zipper,
    Grid,
    L1,
    Perceptual,
    Edge,
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] = [
        MetricKind::Zipper,
        MetricKind::Grid,
        MetricKind::L1,
        MetricKind::Perceptual,
        MetricKind::Edge,
    ];

    pub fn label(self) -> &'static str {
        match self {
            MetricKind::Zipper => "zipper",
            MetricKind::Grid => "grid",
            MetricKind::L1 => "l1",
            MetricKind::Perceptual => "perceptual",
            MetricKind::Edge => "edge",
        }
    }
}

/// One scored patch; `patch_ref` indexes into whatever ref list produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchScore {
    pub kind: MetricKind,
    pub value: f64,
    pub patch_ref: usize,
}

/// Boolean per-pixel mask, `H x W`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }
}

fn check_shapes(pred: &Patch, gt: &Patch) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(Error::ShapeMismatch(format!(
            "pred {}x{} vs gt {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

/// True where the edge responses of prediction and ground truth differ by
/// less than `eps1`: the places where no real edge disagreement exists.
pub fn non_edge_mask(pred: &Patch, gt: &Patch, cfg: &MetricConfig) -> Result<Mask> {
    check_shapes(pred, gt)?;
    let ep = edge_map(pred)?;
    let eg = edge_map(gt)?;
    let data = ep
        .data()
        .iter()
        .zip(eg.data())
        .map(|(a, b)| (a - b).abs() < cfg.eps1)
        .collect();
    Ok(Mask { height: pred.height(), width: pred.width(), data })
}

/// Gradient-magnitude mismatch summed over non-edge pixels; flags the
/// alternating on/off patterns that appear near edges.
pub fn zipper_metric(pred: &Patch, gt: &Patch, cfg: &MetricConfig) -> Result<f64> {
    check_shapes(pred, gt)?;
    let mask = non_edge_mask(pred, gt, cfg)?;
    let gp = grad_abs(pred)?;
    let gg = grad_abs(gt)?;
    let mut sum = 0.0;
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            if mask.get(y, x) {
                for c in 0..3 {
                    sum += (gp.get(y, x, c) - gg.get(y, x, c)).abs();
                }
            }
        }
    }
    Ok(sum)
}

#[inline]
fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Prediction gradients weighted by ground-truth flatness, gated at `eps2`.
/// On perfectly flat ground truth the weight attains its maximum 0.5
/// (`alpha / 0` is taken as +inf, so the logistic saturates at 1).
pub fn grid_metric_with_gate(pred: &Patch, gt: &Patch, alpha: f64, eps2: f64) -> Result<f64> {
    check_shapes(pred, gt)?;
    let gp = grad_abs(pred)?;
    let gg = grad_abs(gt)?;
    let mut sum = 0.0;
    for (p, g) in gp.data().iter().zip(gg.data()) {
        if *p > eps2 {
            sum += 2.0 * p * (logistic(alpha / g) - 0.5);
        }
    }
    Ok(sum)
}

pub fn grid_metric(pred: &Patch, gt: &Patch, cfg: &MetricConfig) -> Result<f64> {
    grid_metric_with_gate(pred, gt, cfg.alpha, cfg.eps2)
}

/// Plain photometric distance: sum of absolute differences over all elements.
pub fn l1_metric(pred: &Patch, gt: &Patch) -> Result<f64> {
    check_shapes(pred, gt)?;
    Ok(pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b).abs()).sum())
}

/// Squared Euclidean distance between extractor feature maps.
pub fn perceptual_metric(
    pred: &Patch,
    gt: &Patch,
    fx: &FeatureExtractor,
    cfg: &MetricConfig,
) -> Result<f64> {
    check_shapes(pred, gt)?;
    let stage = cfg.fx_stage.0;
    let (_, _, _, fp) = fx.features(pred, stage)?;
    let (_, _, _, fg) = fx.features(gt, stage)?;
    Ok(fp.iter().zip(&fg).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Sum of absolute edge-response differences.
pub fn edge_metric(pred: &Patch, gt: &Patch) -> Result<f64> {
    check_shapes(pred, gt)?;
    let ep = edge_map(pred)?;
    let eg = edge_map(gt)?;
    Ok(ep.data().iter().zip(eg.data()).map(|(a, b)| (a - b).abs()).sum())
}

/// Dispatch over the five metric kinds.
pub fn score_patch(
    kind: MetricKind,
    pred: &Patch,
    gt: &Patch,
    cfg: &MetricConfig,
    fx: &FeatureExtractor,
    patch_ref: usize,
) -> Result<PatchScore> {
    let value = match kind {
        MetricKind::Zipper => zipper_metric(pred, gt, cfg)?,
        MetricKind::Grid => grid_metric(pred, gt, cfg)?,
        MetricKind::L1 => l1_metric(pred, gt)?,
        MetricKind::Perceptual => perceptual_metric(pred, gt, fx, cfg)?,
        MetricKind::Edge => edge_metric(pred, gt)?,
    };
    Ok(PatchScore { kind, value, patch_ref })
}
