//! Dynamic class-specific pseudo-labelling and the segmentation objective.
//!
//! Per batch, the snapshot's confidence statistics for each old class decide
//! a class threshold; confident snapshot predictions become pseudo labels
//! that fill the background of the current-step ground truth.
//!
//! Class ids in this module are model output channels; `0` is background and
//! doubles as "unlabelled" in pseudo masks.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PseudoLabelMode {
    /// No pseudo labels: plain current-step ground truth.
    None,
    /// One threshold for every class.
    Fixed,
    /// Per-class, per-batch thresholds.
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcplConfig {
    /// Floor threshold `Γ`.
    pub big_gamma: f64,
    /// Fluctuation ratio `σ`.
    pub sigma: f64,
    /// Minimum confidence `ε`.
    pub epsilon: f64,
    pub mode: PseudoLabelMode,
    /// Threshold used by [`PseudoLabelMode::Fixed`].
    pub fixed_threshold: f64,
}

impl Default for DcplConfig {
    fn default() -> Self {
        Self {
            big_gamma: 0.7,
            sigma: 4.0,
            epsilon: 0.5,
            mode: PseudoLabelMode::Dynamic,
            fixed_threshold: 0.7,
        }
    }
}

impl DcplConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= self.big_gamma && self.big_gamma < 1.0) {
            return Err(Error::config(
                "train.dcpl",
                "need 0 < epsilon <= big_gamma < 1",
            ));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config("train.dcpl.sigma", "must be > 0"));
        }
        if !(self.fixed_threshold >= 0.0 && self.fixed_threshold < 1.0) {
            return Err(Error::config("train.dcpl.fixed_threshold", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Per-pixel class probabilities of a batch, `B×K×H×W` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub batch: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ProbMap {
    pub fn new(batch: usize, classes: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * classes * height * width {
            return Err(Error::Shape(format!(
                "{} probabilities for a {batch}x{classes}x{height}x{width} map",
                data.len()
            )));
        }
        Ok(Self {
            batch,
            classes,
            height,
            width,
            data,
        })
    }

    /// Softmax over dim 1 of `B×K×H×W` logits, copied to host memory.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let (b, k, h, w) = logits.dims4()?;
        let probs = crate::dada::softmax_channels(&logits.detach())?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        Self::new(b, k, h, w, probs)
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn num_pixels(&self) -> usize {
        self.batch * self.plane()
    }

    /// Probability of class `c` at flat pixel `i` (batch-major).
    pub fn prob(&self, i: usize, c: usize) -> f64 {
        let plane = self.plane();
        let (b, p) = (i / plane, i % plane);
        self.data[(b * self.classes + c) * plane + p]
    }

    /// Arg-max class of pixel `i`; ties go to the lowest class index.
    pub fn argmax(&self, i: usize) -> (usize, f64) {
        let mut best = (0, self.prob(i, 0));
        for c in 1..self.classes {
            let p = self.prob(i, c);
            if p > best.1 {
                best = (c, p);
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassStats {
    pub class_id: usize,
    pub u_low: f64,
    pub u_high: f64,
    pub u_mean: f64,
    pub pixel_count: usize,
    pub delta: f64,
}

impl ClassStats {
    /// No pixel was assigned to the class; the score fields are meaningless.
    pub fn is_undefined(&self) -> bool {
        self.pixel_count == 0
    }
}

/// Score statistics of class `c` over the pixels whose arg-max is `c`.
pub fn class_score_stats(probs: &ProbMap, class_id: usize) -> ClassStats {
    let mut low = f64::INFINITY;
    let mut high = f64::NEG_INFINITY;
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..probs.num_pixels() {
        let (arg, p) = probs.argmax(i);
        if arg == class_id {
            low = low.min(p);
            high = high.max(p);
            sum += p;
            count += 1;
        }
    }
    if count == 0 {
        return ClassStats {
            class_id,
            u_low: 0.0,
            u_high: 0.0,
            u_mean: 0.0,
            pixel_count: 0,
            delta: 0.0,
        };
    }
    // the running mean can drift outside [low, high] by an ulp
    let mean = (sum / count as f64).clamp(low, high);
    ClassStats {
        class_id,
        u_low: low,
        u_high: high,
        u_mean: mean,
        pixel_count: count,
        delta: (high - low).abs(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdBranch {
    /// Stable, confident class: threshold at its lowest score.
    Stable,
    /// Fluctuating but confident: at least `Γ`.
    Unstable,
    /// Low confidence or no pixels: `Γ`.
    Fallback,
}

impl ThresholdBranch {
    pub fn as_str(self) -> &'static str {
        match self {
            ThresholdBranch::Stable => "stable",
            ThresholdBranch::Unstable => "unstable",
            ThresholdBranch::Fallback => "fallback",
        }
    }
}

/// Class threshold and the branch that produced it. A zero score range
/// counts as infinitely stable.
pub fn dynamic_threshold_branch(stats: &ClassStats, cfg: &DcplConfig) -> (f64, ThresholdBranch) {
    if stats.is_undefined() || stats.u_low < cfg.epsilon {
        return (cfg.big_gamma, ThresholdBranch::Fallback);
    }
    let stable = stats.delta == 0.0 || stats.u_mean / stats.delta >= cfg.sigma;
    if stable {
        (stats.u_low, ThresholdBranch::Stable)
    } else {
        (cfg.big_gamma.max(stats.u_low), ThresholdBranch::Unstable)
    }
}

pub fn dynamic_threshold(stats: &ClassStats, cfg: &DcplConfig) -> f64 {
    dynamic_threshold_branch(stats, cfg).0
}

/// Thresholds indexed by class channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Thresholds(pub Vec<Option<f64>>);

impl Thresholds {
    pub fn get(&self, class: usize) -> Option<f64> {
        self.0.get(class).copied().flatten()
    }

    pub fn uniform(classes: &[usize], tau: f64) -> Self {
        let len = classes.iter().max().map_or(0, |m| m + 1);
        let mut t = vec![None; len];
        for &c in classes {
            t[c] = Some(tau);
        }
        Thresholds(t)
    }
}

/// One row of the per-batch threshold table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdRow {
    pub stats: ClassStats,
    pub tau: f64,
    pub branch: ThresholdBranch,
}

/// Statistics and thresholds for every class in `classes`.
pub fn batch_thresholds(probs: &ProbMap, classes: &[usize], cfg: &DcplConfig) -> (Thresholds, Vec<ThresholdRow>) {
    let mut rows = Vec::with_capacity(classes.len());
    let len = classes.iter().max().map_or(0, |m| m + 1);
    let mut t = vec![None; len];
    for &c in classes {
        let stats = class_score_stats(probs, c);
        let (tau, branch) = dynamic_threshold_branch(&stats, cfg);
        t[c] = Some(tau);
        rows.push(ThresholdRow { stats, tau, branch });
    }
    (Thresholds(t), rows)
}

/// Label pixel `i` with `c` iff `c` is its arg-max and `p_i(c) > τ_c`.
/// Pixels whose arg-max has no threshold (background included) stay 0.
pub fn generate_pseudo_labels(probs: &ProbMap, thresholds: &Thresholds) -> Vec<usize> {
    (0..probs.num_pixels())
        .map(|i| {
            let (c, p) = probs.argmax(i);
            match thresholds.get(c) {
                Some(tau) if c != 0 && p > tau => c,
                _ => 0,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSource {
    GroundTruth,
    Pseudo,
    Background,
}

/// Per-pixel supervision: fused labels and where each came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionMask {
    pub labels: Vec<usize>,
    pub source: Vec<LabelSource>,
}

impl SupervisionMask {
    /// Ground truth alone; unlabelled pixels supervise background.
    pub fn from_ground_truth(gt: &[usize]) -> Self {
        let source = gt
            .iter()
            .map(|&g| {
                if g != 0 {
                    LabelSource::GroundTruth
                } else {
                    LabelSource::Background
                }
            })
            .collect();
        Self {
            labels: gt.to_vec(),
            source,
        }
    }
}

/// Ground truth wins; pseudo labels fill what it leaves as background.
pub fn fuse_labels(pseudo: &[usize], gt_current: &[usize]) -> Result<SupervisionMask> {
    if pseudo.len() != gt_current.len() {
        return Err(Error::Shape(format!(
            "pseudo mask has {} pixels, ground truth {}",
            pseudo.len(),
            gt_current.len()
        )));
    }
    let mut labels = Vec::with_capacity(pseudo.len());
    let mut source = Vec::with_capacity(pseudo.len());
    for (&p, &g) in pseudo.iter().zip(gt_current) {
        if g != 0 {
            labels.push(g);
            source.push(LabelSource::GroundTruth);
        } else if p != 0 {
            labels.push(p);
            source.push(LabelSource::Pseudo);
        } else {
            labels.push(0);
            source.push(LabelSource::Background);
        }
    }
    Ok(SupervisionMask { labels, source })
}

/// Mean per-pixel cross-entropy of `B×(K+1)×H×W` logits against channel
/// labels (batch-major, row-major within each image).
pub fn seg_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, k, h, w) = logits.dims4()?;
    if labels.len() != b * h * w {
        return Err(Error::Shape(format!(
            "{} labels for {b}x{h}x{w} logits",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelRange {
            label: bad as u32,
            channels: k,
        });
    }
    let plane = h * w;
    let mut onehot = vec![0f64; b * k * plane];
    for (i, &l) in labels.iter().enumerate() {
        let (bi, p) = (i / plane, i % plane);
        onehot[(bi * k + l) * plane + p] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (b, k, h, w), logits.device())?.to_dtype(logits.dtype())?;
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let log_z = shifted.exp()?.sum_keepdim(1)?.log()?;
    let log_p = shifted.broadcast_sub(&log_z)?;
    let nll = (onehot * log_p)?.sum_all()?.neg()?;
    Ok((nll / (b * plane) as f64)?)
}

/// Integrated objective: segmentation only at step 0, otherwise the unit sum.
pub fn total_loss(seg: &Tensor, dada: &Tensor, arcl: &Tensor, step: usize) -> Result<Tensor> {
    for (name, t) in [("seg", seg), ("dada", dada), ("arcl", arcl)] {
        let v = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !v.is_finite() {
            return Err(Error::Numeric {
                what: format!("{name} loss ({v})"),
                iter: None,
            });
        }
    }
    if step == 0 {
        Ok(seg.clone())
    } else {
        Ok(((seg + dada)? + arcl)?)
    }
}
