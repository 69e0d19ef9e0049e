//! Asymmetric region-wise contrastive learning.
//!
//! For each sampled old class the anchor region comes from the frozen
//! snapshot's features where the snapshot predicts that class; the positive
//! region is where the live model predicts it and the negative region is
//! where the live model predicts any current-step class. Regions are ranked
//! by prediction confidence, truncated to a common pixel count, flattened,
//! and fed to a margin triplet objective.
//!
//! Class ids in this module are model output channels.

use candle_core::{DType, Tensor};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dada::softmax_channels;
use crate::error::{Error, Result};
use crate::model::{StepSnapshot, TapModel, TapOutput};

/// Added under the square root so the distance stays differentiable at zero.
pub const DISTANCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArclConfig {
    pub margin: f64,
    pub max_anchor_classes: usize,
    pub enabled: bool,
}

impl Default for ArclConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            max_anchor_classes: 10,
            enabled: true,
        }
    }
}

impl ArclConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) {
            return Err(Error::config("train.arcl.margin", "must be >= 0"));
        }
        if self.max_anchor_classes == 0 {
            return Err(Error::config("train.arcl.max_anchor_classes", "must be >= 1"));
        }
        Ok(())
    }
}

/// Arg-max prediction map with the winning probability per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PredMap {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
    pub confidence: Vec<f64>,
}

impl PredMap {
    pub fn new(
        batch: usize,
        height: usize,
        width: usize,
        labels: Vec<usize>,
        confidence: Vec<f64>,
    ) -> Result<Self> {
        let n = batch * height * width;
        if labels.len() != n || confidence.len() != n {
            return Err(Error::Shape(format!(
                "prediction map of {batch}x{height}x{width} needs {n} labels and confidences"
            )));
        }
        Ok(Self {
            batch,
            height,
            width,
            labels,
            confidence,
        })
    }

    /// Arg-max over channels of `B×K×H×W` logits; ties go to the lowest channel.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let (b, k, h, w) = logits.dims4()?;
        let probs = softmax_channels(&logits.detach())?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        let plane = h * w;
        let mut labels = Vec::with_capacity(b * plane);
        let mut confidence = Vec::with_capacity(b * plane);
        for bi in 0..b {
            for i in 0..plane {
                let mut best = 0;
                let mut best_p = f64::NEG_INFINITY;
                for c in 0..k {
                    let p = probs[(bi * k + c) * plane + i];
                    if p > best_p {
                        best = c;
                        best_p = p;
                    }
                }
                labels.push(best);
                confidence.push(best_p);
            }
        }
        Self::new(b, h, w, labels, confidence)
    }

    /// Pixel indices predicted as any of `classes`, most confident first,
    /// row-major order among equal confidences.
    fn ranked_region(&self, classes: &[usize]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.labels.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        idx.sort_by(|&a, &b| {
            self.confidence[b]
                .partial_cmp(&self.confidence[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx
    }
}

/// Binary region of one class in a prediction map.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMask {
    pub class_id: usize,
    pub mask: Vec<bool>,
}

impl ClassMask {
    pub fn pixel_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

pub fn class_mask(pred: &PredMap, class_id: usize) -> ClassMask {
    ClassMask {
        class_id,
        mask: pred.labels.iter().map(|&l| l == class_id).collect(),
    }
}

/// Flattened, length-aligned anchor/positive/negative region embeddings.
pub struct RegionEmbeddingTriple {
    pub class_id: usize,
    /// Snapshot features, detached.
    pub anchor: Tensor,
    pub positive: Tensor,
    pub negative: Tensor,
    /// Elements per vector: embedding width times the kept pixel count.
    pub length: usize,
}

fn gather_pixels(feats: &Tensor, pixels: &[usize]) -> Result<Tensor> {
    let (b, n, h, w) = feats.dims4()?;
    let rows = feats.permute((0, 2, 3, 1))?.reshape((b * h * w, n))?;
    let idx: Vec<u32> = pixels.iter().map(|&p| p as u32).collect();
    let idx = Tensor::from_vec(idx, pixels.len(), feats.device())?;
    Ok(rows.index_select(&idx, 0)?.flatten_all()?)
}

/// Build the triple for `anchor_class`, or `None` when any of the three
/// regions is empty in this batch.
pub fn select_region_embeddings(
    snapshot_feats: &Tensor,
    live_feats: &Tensor,
    snapshot_preds: &PredMap,
    live_preds: &PredMap,
    anchor_class: usize,
    negative_classes: &[usize],
) -> Result<Option<RegionEmbeddingTriple>> {
    let (b, n, h, w) = live_feats.dims4()?;
    if snapshot_feats.dims() != live_feats.dims() {
        return Err(Error::Shape(format!(
            "snapshot features {:?} vs live features {:?}",
            snapshot_feats.dims(),
            live_feats.dims()
        )));
    }
    for p in [snapshot_preds, live_preds] {
        if (p.batch, p.height, p.width) != (b, h, w) {
            return Err(Error::Shape(format!(
                "prediction map {}x{}x{} does not match features {b}x{h}x{w}",
                p.batch, p.height, p.width
            )));
        }
    }
    if negative_classes.contains(&anchor_class) {
        return Err(Error::Contract(format!(
            "anchor class {anchor_class} is also a negative class"
        )));
    }
    let anchor_px = snapshot_preds.ranked_region(&[anchor_class]);
    let positive_px = live_preds.ranked_region(&[anchor_class]);
    let negative_px = live_preds.ranked_region(negative_classes);
    let keep = anchor_px.len().min(positive_px.len()).min(negative_px.len());
    if keep == 0 {
        return Ok(None);
    }
    Ok(Some(RegionEmbeddingTriple {
        class_id: anchor_class,
        anchor: gather_pixels(&snapshot_feats.detach(), &anchor_px[..keep])?,
        positive: gather_pixels(live_feats, &positive_px[..keep])?,
        negative: gather_pixels(live_feats, &negative_px[..keep])?,
        length: keep * n,
    }))
}

fn distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(((a - b)?.sqr()?.sum_all()? + DISTANCE_EPS)?.sqrt()?)
}

/// `max(d(a, p) - d(a, n) + m, 0)` with unnormalized Euclidean distance.
pub fn triplet_term(triple: &RegionEmbeddingTriple, margin: f64) -> Result<Tensor> {
    let d_pos = distance(&triple.anchor, &triple.positive)?;
    let d_neg = distance(&triple.anchor, &triple.negative)?;
    Ok(((d_pos - d_neg)? + margin)?.relu()?)
}

pub struct ArclLoss {
    pub loss: Tensor,
    /// Anchor classes sampled this batch, in sampling order.
    pub sampled: Vec<usize>,
    pub classes_used: usize,
    pub skipped: usize,
}

impl ArclLoss {
    /// Every sampled class was skipped, so the loss is vacuously zero.
    pub fn skipped_all(&self) -> bool {
        self.classes_used == 0
    }
}

/// ARCL from precomputed forward passes. `old_classes` are the snapshot's
/// foreground channels, `new_classes` the channels added at this step.
pub fn arcl_from_outputs<R: Rng + ?Sized>(
    old: &TapOutput,
    new: &TapOutput,
    old_classes: &[usize],
    new_classes: &[usize],
    cfg: &ArclConfig,
    rng: &mut R,
) -> Result<ArclLoss> {
    cfg.validate()?;
    if old_classes.is_empty() || new_classes.is_empty() {
        return Err(Error::Contract(
            "region contrast needs old and new classes (step >= 1)".into(),
        ));
    }
    let snapshot_preds = PredMap::from_logits(&old.coarse_logits)?;
    let live_preds = PredMap::from_logits(&new.coarse_logits)?;
    let amount = cfg.max_anchor_classes.min(old_classes.len());
    let sampled: Vec<usize> = index::sample(rng, old_classes.len(), amount)
        .into_iter()
        .map(|i| old_classes[i])
        .collect();

    let mut total = Tensor::zeros((), new.out_embedding.dtype(), new.out_embedding.device())?;
    let mut used = 0;
    for &class in &sampled {
        let triple = select_region_embeddings(
            &old.out_embedding,
            &new.out_embedding,
            &snapshot_preds,
            &live_preds,
            class,
            new_classes,
        )?;
        if let Some(t) = triple {
            total = (total + triplet_term(&t, cfg.margin)?)?;
            used += 1;
        }
    }
    if used == 0 {
        log::debug!("SKIPPED_ALL: no anchor class had all three regions");
    } else {
        total = (total / used as f64)?;
    }
    Ok(ArclLoss {
        loss: total,
        skipped: sampled.len() - used,
        classes_used: used,
        sampled,
    })
}

pub fn arcl_loss<R: Rng + ?Sized>(
    snapshot: &StepSnapshot,
    model: &TapModel,
    batch: &Tensor,
    old_classes: &[usize],
    new_classes: &[usize],
    cfg: &ArclConfig,
    rng: &mut R,
) -> Result<ArclLoss> {
    if old_classes.is_empty() {
        return Err(Error::Contract("region contrast is undefined at step 0".into()));
    }
    let old = snapshot.forward(batch)?;
    let new = model.forward_with_taps(batch)?;
    arcl_from_outputs(&old, &new, old_classes, new_classes, cfg, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn feats(data: Vec<f64>, b: usize, n: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(data, (b, n, h, w), &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn mask_saturation_and_absence() {
        let p = PredMap::new(1, 2, 2, vec![3; 4], vec![0.9; 4]).unwrap();
        assert!(class_mask(&p, 3).mask.iter().all(|&m| m));
        assert_eq!(class_mask(&p, 1).pixel_count(), 0);
    }

    #[test]
    fn checkerboard_mask() {
        let labels: Vec<usize> = (0..16).map(|i| 1 + ((i / 4 + i % 4) % 2)).collect();
        let p = PredMap::new(1, 4, 4, labels.clone(), vec![0.5; 16]).unwrap();
        let m = class_mask(&p, 1);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(m.mask[y * 4 + x], (x + y) % 2 == 0);
            }
        }
    }

    #[test]
    fn truncates_to_smallest_region() {
        // 6x8 map: anchor class 1 on 12 snapshot pixels, 9 live pixels,
        // negative class 2 on 20 live pixels
        let (h, w, n) = (6, 8, 3);
        let mut snap_labels = vec![0; h * w];
        let mut live_labels = vec![0; h * w];
        snap_labels[..12].iter_mut().for_each(|l| *l = 1);
        live_labels[..9].iter_mut().for_each(|l| *l = 1);
        live_labels[20..40].iter_mut().for_each(|l| *l = 2);
        let conf: Vec<f64> = (0..h * w).map(|i| 0.5 + (i % 7) as f64 / 20.0).collect();
        let sp = PredMap::new(1, h, w, snap_labels, conf.clone()).unwrap();
        let lp = PredMap::new(1, h, w, live_labels, conf).unwrap();
        let f = feats((0..n * h * w).map(|i| i as f64).collect(), 1, n, h, w);
        let t = select_region_embeddings(&f, &f, &sp, &lp, 1, &[2]).unwrap().unwrap();
        assert_eq!(t.length, n * 9);
        for v in [&t.anchor, &t.positive, &t.negative] {
            assert_eq!(v.dims(), &[n * 9]);
        }
    }

    #[test]
    fn empty_positive_region_skips() {
        let sp = PredMap::new(1, 2, 2, vec![1, 1, 0, 0], vec![0.9; 4]).unwrap();
        let lp = PredMap::new(1, 2, 2, vec![2, 0, 0, 0], vec![0.9; 4]).unwrap();
        let f = feats(vec![0.0; 8], 1, 2, 2, 2);
        assert!(select_region_embeddings(&f, &f, &sp, &lp, 1, &[2]).unwrap().is_none());
    }

    #[test]
    fn identical_predictions_give_equal_anchor_and_positive() {
        let p = PredMap::new(1, 2, 2, vec![1, 2, 1, 0], vec![0.7, 0.8, 0.9, 0.6]).unwrap();
        let f = feats((0..8).map(|i| i as f64 * 0.5).collect(), 1, 2, 2, 2);
        let t = select_region_embeddings(&f, &f, &p, &p, 1, &[2]).unwrap().unwrap();
        assert_eq!(
            t.anchor.to_vec1::<f64>().unwrap(),
            t.positive.to_vec1::<f64>().unwrap()
        );
        // most confident class-1 pixel is index 2 (0.9)
        assert_eq!(t.anchor.to_vec1::<f64>().unwrap(), vec![1.0, 3.0]);
    }

    #[test]
    fn shape_errors() {
        let p = PredMap::new(1, 2, 2, vec![1; 4], vec![0.9; 4]).unwrap();
        let a = feats(vec![0.0; 8], 1, 2, 2, 2);
        let b = feats(vec![0.0; 18], 1, 2, 3, 3);
        let err = select_region_embeddings(&a, &b, &p, &p, 1, &[2]).err().unwrap();
        assert_eq!(err.code(), "SHAPE_ERROR");
        let c = feats(vec![0.0; 18], 1, 2, 3, 3);
        let err = select_region_embeddings(&c, &c, &p, &p, 1, &[2]).err().unwrap();
        assert_eq!(err.code(), "SHAPE_ERROR");
    }

    fn triple(a: &[f64], p: &[f64], n: &[f64]) -> RegionEmbeddingTriple {
        let t = |v: &[f64]| Tensor::from_vec(v.to_vec(), v.len(), &Device::Cpu).unwrap();
        RegionEmbeddingTriple {
            class_id: 1,
            anchor: t(a),
            positive: t(p),
            negative: t(n),
            length: a.len(),
        }
    }

    #[test]
    fn triplet_hand_values() {
        // d(a, p) = 0, d(a, n) = 2, m = 1
        let t = triplet_term(&triple(&[0.0, 0.0], &[0.0, 0.0], &[2.0, 0.0]), 1.0).unwrap();
        assert_eq!(scalar(&t), 0.0);
        let t = triplet_term(&triple(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]), 1.0).unwrap();
        assert!((scalar(&t) - 1.0).abs() < 1e-9);
        // d(a, p) = 3, d(a, n) = 1 -> 3
        let t = triplet_term(&triple(&[0.0], &[3.0], &[1.0]), 1.0).unwrap();
        assert!((scalar(&t) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn all_absent_is_vacuous() {
        let coarse = |labels: &[usize]| {
            // 3 channels, 1x2x2, strongly favour `labels`
            let mut data = vec![0.0; 12];
            for (i, &l) in labels.iter().enumerate() {
                data[l * 4 + i] = 5.0;
            }
            Tensor::from_vec(data, (1, 3, 2, 2), &Device::Cpu).unwrap()
        };
        let f = feats(vec![1.0; 8], 1, 2, 2, 2);
        let out = |labels: &[usize]| TapOutput {
            layer_embeddings: vec![],
            layer_logits: vec![],
            out_embedding: f.clone(),
            coarse_logits: coarse(labels),
            logits: coarse(labels),
        };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        // snapshot never predicts class 1
        let r = arcl_from_outputs(
            &out(&[0, 0, 0, 0]),
            &out(&[1, 2, 0, 0]),
            &[1],
            &[2],
            &ArclConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(r.skipped_all());
        assert_eq!(scalar(&r.loss), 0.0);
        assert_eq!(r.skipped, 1);

        let err = arcl_from_outputs(
            &out(&[0; 4]),
            &out(&[0; 4]),
            &[],
            &[2],
            &ArclConfig::default(),
            &mut rng,
        )
        .err()
        .unwrap();
        assert_eq!(err.code(), "CONTRACT_ERROR");
    }
}
