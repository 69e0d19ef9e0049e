//! Per-step training loop, optimizer and evaluation.

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arcl::arcl_from_outputs;
use crate::config::TrainConfig;
use crate::dada::dada_from_outputs;
use crate::dcpl::{
    batch_thresholds, fuse_labels, generate_pseudo_labels, seg_loss, total_loss, ProbMap,
    PseudoLabelMode, ThresholdRow, Thresholds,
};
use crate::error::{Error, Result};
use crate::eval::ConfusionMatrix;
use crate::model::{StepSnapshot, TapModel};
use crate::schedule::{remap_for_eval, remap_labels, ClassId, LabeledSample, TaskSchedule};

/// `base_lr · (1 − iter/total)^power`.
pub fn poly_lr(iter: usize, total_iters: usize, base_lr: f64, power: f64) -> f64 {
    assert!(iter <= total_iters, "iteration {iter} beyond {total_iters}");
    if total_iters == 0 {
        return base_lr;
    }
    base_lr * (1.0 - iter as f64 / total_iters as f64).powf(power)
}

/// SGD with momentum and L2 weight decay folded into the gradient.
pub struct Sgd {
    vars: Vec<Var>,
    velocity: Vec<Option<Tensor>>,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    pub fn new(vars: Vec<Var>, momentum: f64, weight_decay: f64) -> Self {
        let velocity = vec![None; vars.len()];
        Self {
            vars,
            velocity,
            momentum,
            weight_decay,
        }
    }

    /// `g ← ∇ + wd·θ; v ← μ·v + g (v ← g on the first step); θ ← θ − lr·v`.
    /// Variables without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        for (var, vel) in self.vars.iter().zip(self.velocity.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let mut g = g.clone();
            if self.weight_decay != 0.0 {
                g = (g + (var.as_tensor() * self.weight_decay)?)?;
            }
            let v = match vel.take() {
                Some(prev) if self.momentum != 0.0 => ((prev * self.momentum)? + g)?,
                _ => g,
            };
            var.set(&(var.as_tensor() - (&v * lr)?)?)?;
            *vel = Some(v);
        }
        Ok(())
    }
}

/// One batch: sample indices and whether each is mirrored.
pub type BatchPlan = Vec<(usize, bool)>;

/// Visiting order for every epoch of a step: a fresh shuffle per epoch,
/// cut into batches (the last one may be short), plus per-sample flips.
pub fn epoch_plan(
    num_samples: usize,
    epochs: usize,
    batch_size: usize,
    hflip: bool,
    seed: u64,
    step: usize,
) -> Vec<Vec<BatchPlan>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * step as u64);
    (0..epochs)
        .map(|_| {
            let mut order: Vec<usize> = (0..num_samples).collect();
            order.shuffle(&mut rng);
            let flips: Vec<bool> = order.iter().map(|_| hflip && rng.random_bool(0.5)).collect();
            let items: Vec<(usize, bool)> = order.into_iter().zip(flips).collect();
            items.chunks(batch_size).map(<[_]>::to_vec).collect()
        })
        .collect()
}

fn sampling_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * step as u64 + 1);
    rng
}

/// Training view of one step: images and current-step labels as channels.
pub struct StepData {
    pub samples: Vec<LabeledSample>,
    pub labels: Vec<Vec<usize>>,
}

impl StepData {
    /// Select the samples of `step` and map their `C^t` labels to channels;
    /// everything else becomes background.
    pub fn build(all: &[LabeledSample], schedule: &TaskSchedule, step: usize) -> Result<Self> {
        let idx = schedule.select_step_samples(all, step)?;
        let mut samples = Vec::with_capacity(idx.len());
        let mut labels = Vec::with_capacity(idx.len());
        for i in idx {
            let s = remap_labels(&all[i], schedule, step)?;
            labels.push(to_channels(&s.mask, schedule));
            samples.push(s);
        }
        Ok(Self { samples, labels })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stack a batch, mirroring where requested.
    pub fn batch(&self, model: &TapModel, plan: &[(usize, bool)]) -> Result<(Tensor, Vec<usize>)> {
        let first = &self.samples[plan[0].0];
        let (h, w) = (first.height, first.width);
        let mut images = Vec::with_capacity(plan.len());
        let mut labels = Vec::with_capacity(plan.len() * h * w);
        for &(i, flip) in plan {
            let s = &self.samples[i];
            if (s.height, s.width) != (h, w) {
                return Err(Error::Shape(format!(
                    "batch mixes {h}x{w} and {}x{} images",
                    s.height, s.width
                )));
            }
            if flip {
                images.push(s.hflip().image);
                let l = &self.labels[i];
                for y in 0..h {
                    labels.extend(l[y * w..(y + 1) * w].iter().rev());
                }
            } else {
                images.push(s.image.clone());
                labels.extend_from_slice(&self.labels[i]);
            }
        }
        let refs: Vec<&[f32]> = images.iter().map(Vec::as_slice).collect();
        Ok((model.images_to_tensor(&refs, h, w)?, labels))
    }
}

fn to_channels(mask: &[ClassId], schedule: &TaskSchedule) -> Vec<usize> {
    let table = schedule.channel_table();
    mask.iter()
        .map(|&c| table.get(c as usize).copied().flatten().unwrap_or(0))
        .collect()
}

/// Loss terms and learning rate of one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterMetrics {
    pub iter: usize,
    pub lr: f64,
    pub seg: f64,
    pub il_d: f64,
    pub ol_d: f64,
    pub dada_total: f64,
    pub arcl: f64,
    pub total: f64,
    pub arcl_classes_used: usize,
    pub arcl_skipped: usize,
}

pub const METRICS_HEADER: &str =
    "iter,lr,seg,il_d,ol_d,dada_total,arcl,total,arcl_classes_used,arcl_skipped";

pub fn metrics_csv(rows: &[IterMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.iter,
            r.lr,
            r.seg,
            r.il_d,
            r.ol_d,
            r.dada_total,
            r.arcl,
            r.total,
            r.arcl_classes_used,
            r.arcl_skipped
        ));
    }
    out
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Pseudo-label thresholds for one batch from the snapshot's probabilities.
pub fn pseudo_thresholds(
    probs: &ProbMap,
    old_channels: &[usize],
    cfg: &TrainConfig,
) -> Option<(Thresholds, Vec<ThresholdRow>)> {
    match cfg.dcpl.mode {
        PseudoLabelMode::None => None,
        PseudoLabelMode::Fixed => Some((
            Thresholds::uniform(old_channels, cfg.dcpl.fixed_threshold),
            Vec::new(),
        )),
        PseudoLabelMode::Dynamic => Some(batch_thresholds(probs, old_channels, &cfg.dcpl)),
    }
}

/// Train `model` on one step. At step 0 `snapshot` must be `None`; later
/// steps need the frozen model of the previous step, and `model` must
/// already predict every class learned through `step`.
pub fn train_incremental_step(
    model: &mut TapModel,
    snapshot: Option<&StepSnapshot>,
    data: &StepData,
    schedule: &TaskSchedule,
    step: usize,
    cfg: &TrainConfig,
) -> Result<Vec<IterMetrics>> {
    match (step, snapshot) {
        (0, Some(_)) => {
            return Err(Error::Contract("step 0 trains without a snapshot".into()));
        }
        (s, None) if s > 0 => {
            return Err(Error::Contract(format!("step {s} needs the previous snapshot")));
        }
        (s, Some(snap)) if snap.step_index() + 1 != s => {
            return Err(Error::Contract(format!(
                "snapshot of step {} used at step {s}",
                snap.step_index()
            )));
        }
        _ => {}
    }
    if model.num_classes_now() != schedule.classes_after(step) {
        return Err(Error::Contract(format!(
            "model predicts {} classes, step {step} needs {}",
            model.num_classes_now(),
            schedule.classes_after(step)
        )));
    }
    if data.is_empty() {
        log::warn!("step {step} has no training samples");
        return Ok(Vec::new());
    }

    let epochs = cfg.epochs_for_step(step);
    let plan = epoch_plan(data.len(), epochs, cfg.batch_size, cfg.hflip, cfg.seed, step);
    let total_iters: usize = plan.iter().map(Vec::len).sum();
    let mut rng = sampling_rng(cfg.seed, step);
    let mut sgd = Sgd::new(model.trainable_vars(), cfg.momentum, cfg.weight_decay);

    let old_channels: Vec<usize> = (1..=schedule.learned_before(step).len()).collect();
    let new_channels: Vec<usize> =
        (old_channels.len() + 1..=schedule.learned_through(step).len()).collect();
    let dada_cfg = cfg.dada.resolve(epochs, model.num_taps());

    let mut metrics = Vec::with_capacity(total_iters);
    let mut iter = 0;
    for (epoch, batches) in plan.iter().enumerate() {
        for batch in batches {
            let lr = poly_lr(iter, total_iters, cfg.lr_for_step(step), cfg.poly_power);
            let (x, gt) = data.batch(model, batch)?;
            let new = model.forward_with_taps(&x)?;
            let zero = Tensor::zeros((), new.logits.dtype(), new.logits.device())?;
            let mut row = IterMetrics {
                iter,
                lr,
                seg: 0.0,
                il_d: 0.0,
                ol_d: 0.0,
                dada_total: 0.0,
                arcl: 0.0,
                total: 0.0,
                arcl_classes_used: 0,
                arcl_skipped: 0,
            };
            let (seg, dada, arcl) = match snapshot {
                None => (seg_loss(&new.logits, &gt)?, zero.clone(), zero),
                Some(snap) => {
                    let old = snap.forward(&x)?;
                    let probs = ProbMap::from_logits(&old.logits)?;
                    let labels = match pseudo_thresholds(&probs, &old_channels, cfg) {
                        Some((t, _)) => fuse_labels(&generate_pseudo_labels(&probs, &t), &gt)?.labels,
                        None => gt,
                    };
                    let seg = seg_loss(&new.logits, &labels)?;
                    let dada = if cfg.dada.enabled() {
                        let d = dada_from_outputs(&old, &new, epoch, &dada_cfg)?;
                        row.il_d = scalar(&d.il_d)?;
                        row.ol_d = scalar(&d.ol_d)?;
                        d.total
                    } else {
                        zero.clone()
                    };
                    let arcl = if cfg.arcl.enabled {
                        let a = arcl_from_outputs(
                            &old,
                            &new,
                            &old_channels,
                            &new_channels,
                            &cfg.arcl,
                            &mut rng,
                        )?;
                        row.arcl_classes_used = a.classes_used;
                        row.arcl_skipped = a.skipped;
                        a.loss
                    } else {
                        zero
                    };
                    (seg, dada, arcl)
                }
            };
            let loss = total_loss(&seg, &dada, &arcl, step).map_err(|e| match e {
                Error::Numeric { what, .. } => Error::Numeric {
                    what,
                    iter: Some(iter),
                },
                other => other,
            })?;
            row.seg = scalar(&seg)?;
            row.dada_total = scalar(&dada)?;
            row.arcl = scalar(&arcl)?;
            row.total = scalar(&loss)?;
            let grads = loss.backward()?;
            sgd.step(&grads, lr)?;
            log::trace!("step {step} iter {iter}: total {}", row.total);
            metrics.push(row);
            iter += 1;
        }
    }
    Ok(metrics)
}

/// Channel predictions of a batch mapped back to class ids.
pub fn predict_classes(model: &TapModel, x: &Tensor, schedule: &TaskSchedule) -> Result<Vec<ClassId>> {
    let out = model.forward_with_taps(x)?;
    let pred = out
        .logits
        .detach()
        .argmax_keepdim(1)?
        .flatten_all()?
        .to_vec1::<u32>()?;
    Ok(pred
        .into_iter()
        .map(|ch| schedule.class_of_channel(ch as usize))
        .collect())
}

/// Confusion matrix over `val` after `step`: classes not yet learned are
/// scored as background.
pub fn evaluate(
    model: &TapModel,
    val: &[LabeledSample],
    schedule: &TaskSchedule,
    step: usize,
    batch_size: usize,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(schedule.max_class_id() as usize + 1);
    for chunk in val.chunks(batch_size.max(1)) {
        let remapped = chunk
            .iter()
            .map(|s| remap_for_eval(s, schedule, step))
            .collect::<Result<Vec<_>>>()?;
        let (h, w) = (remapped[0].height, remapped[0].width);
        if remapped.iter().any(|s| (s.height, s.width) != (h, w)) {
            // Mixed sizes: score one at a time.
            for s in &remapped {
                let x = model.images_to_tensor(&[&s.image], s.height, s.width)?;
                cm.accumulate(&s.mask, &predict_classes(model, &x, schedule)?)?;
            }
            continue;
        }
        let refs: Vec<&[f32]> = remapped.iter().map(|s| s.image.as_slice()).collect();
        let x = model.images_to_tensor(&refs, h, w)?;
        let pred = predict_classes(model, &x, schedule)?;
        let gt: Vec<ClassId> = remapped.iter().flat_map(|s| s.mask.iter().copied()).collect();
        cm.accumulate(&gt, &pred)?;
    }
    Ok(cm)
}
