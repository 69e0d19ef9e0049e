//! Incremental class partitions and per-step ground-truth views.
//!
//! Class IDs are the dataset's own label values; background is always `0`.
//! The model's output channels follow the learning order: channel `0` is
//! background and channel `j` is `class_order[j - 1]`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ClassId = u32;

pub const BACKGROUND: ClassId = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Step-t images are those with at least one pixel of a step-t class;
    /// they may also contain past and future classes (labelled background).
    Overlapped,
    /// Step-t images contain step-t pixels and nothing outside `C^{0:t}`.
    Disjoint,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSchedule {
    class_order: Vec<ClassId>,
    step_sizes: Vec<usize>,
    protocol: Protocol,
    /// Prefix offsets into `class_order`; `offsets[t]..offsets[t + 1]` is step t.
    offsets: Vec<usize>,
}

/// Validates and builds a schedule. Step 0 is the initial (offline) step.
pub fn build_schedule(
    class_order: &[ClassId],
    step_sizes: &[usize],
    protocol: Protocol,
) -> Result<TaskSchedule> {
    if step_sizes.is_empty() {
        return Err(Error::ScheduleMismatch("no steps given".into()));
    }
    if let Some(t) = step_sizes.iter().position(|&s| s == 0) {
        return Err(Error::ScheduleMismatch(format!("step {t} has size 0")));
    }
    let total: usize = step_sizes.iter().sum();
    if total != class_order.len() {
        return Err(Error::ScheduleMismatch(format!(
            "step sizes sum to {total} but {} classes are ordered",
            class_order.len()
        )));
    }
    let mut seen = HashSet::new();
    for &c in class_order {
        if c == BACKGROUND {
            return Err(Error::Contract(
                "background id 0 cannot appear in the class order".into(),
            ));
        }
        if !seen.insert(c) {
            return Err(Error::DuplicateClass(c));
        }
    }
    let mut offsets = Vec::with_capacity(step_sizes.len() + 1);
    offsets.push(0);
    for &s in step_sizes {
        offsets.push(offsets.last().unwrap() + s);
    }
    Ok(TaskSchedule {
        class_order: class_order.to_vec(),
        step_sizes: step_sizes.to_vec(),
        protocol,
        offsets,
    })
}

impl TaskSchedule {
    pub fn num_steps(&self) -> usize {
        self.step_sizes.len()
    }

    pub fn protocol(&self) -> Protocol {
        self.protocol
    }

    pub fn class_order(&self) -> &[ClassId] {
        &self.class_order
    }

    pub fn step_sizes(&self) -> &[usize] {
        &self.step_sizes
    }

    /// Largest class id in the schedule (the confusion matrix is sized by it).
    pub fn max_class_id(&self) -> ClassId {
        self.class_order.iter().copied().max().unwrap_or(BACKGROUND)
    }

    fn check_step(&self, step: usize) -> Result<()> {
        if step >= self.num_steps() {
            return Err(Error::Contract(format!(
                "step {step} outside schedule of {} steps",
                self.num_steps()
            )));
        }
        Ok(())
    }

    /// `C^t`: classes introduced at `step`.
    pub fn step_classes(&self, step: usize) -> &[ClassId] {
        &self.class_order[self.offsets[step]..self.offsets[step + 1]]
    }

    /// `C^{1:t}`: every non-background class learned up to and including `step`.
    pub fn learned_through(&self, step: usize) -> &[ClassId] {
        &self.class_order[..self.offsets[step + 1]]
    }

    /// `C^{1:t-1}`: classes learned before `step`.
    pub fn learned_before(&self, step: usize) -> &[ClassId] {
        &self.class_order[..self.offsets[step]]
    }

    /// Number of foreground classes the model predicts after `step`.
    pub fn classes_after(&self, step: usize) -> usize {
        self.offsets[step + 1]
    }

    /// Output channel for a class id, if the class is scheduled.
    pub fn channel_of(&self, class: ClassId) -> Option<usize> {
        if class == BACKGROUND {
            return Some(0);
        }
        self.class_order
            .iter()
            .position(|&c| c == class)
            .map(|p| p + 1)
    }

    pub fn class_of_channel(&self, channel: usize) -> ClassId {
        if channel == 0 {
            BACKGROUND
        } else {
            self.class_order[channel - 1]
        }
    }

    /// Lookup table from class id to output channel (`None` for unscheduled ids).
    pub fn channel_table(&self) -> Vec<Option<usize>> {
        let mut table = vec![None; self.max_class_id() as usize + 1];
        table[0] = Some(0);
        for (i, &c) in self.class_order.iter().enumerate() {
            table[c as usize] = Some(i + 1);
        }
        table
    }

    /// Whether an (original, un-remapped) sample belongs to the training set of `step`.
    pub fn sample_in_step(&self, mask: &[ClassId], step: usize) -> bool {
        let current = self.step_classes(step);
        let has_current = mask.iter().any(|c| current.contains(c));
        match self.protocol {
            Protocol::Overlapped => has_current,
            Protocol::Disjoint => {
                let allowed = self.learned_through(step);
                has_current
                    && mask
                        .iter()
                        .all(|&c| c == BACKGROUND || allowed.contains(&c))
            }
        }
    }

    /// Indices of the samples that form the training set of `step`.
    pub fn select_step_samples(&self, samples: &[LabeledSample], step: usize) -> Result<Vec<usize>> {
        self.check_step(step)?;
        Ok(samples
            .iter()
            .enumerate()
            .filter(|(_, s)| self.sample_in_step(&s.mask, step))
            .map(|(i, _)| i)
            .collect())
    }
}

/// One image with its dense label map.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel-major `channels × height × width` pixel values.
    pub image: Vec<f32>,
    /// Row-major `height × width` class ids.
    pub mask: Vec<ClassId>,
}

impl LabeledSample {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        image: Vec<f32>,
        mask: Vec<ClassId>,
    ) -> Result<Self> {
        if image.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "image has {} values, expected {channels}x{height}x{width}",
                image.len()
            )));
        }
        if mask.len() != height * width {
            return Err(Error::Shape(format!(
                "mask has {} values, expected {height}x{width}",
                mask.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            image,
            mask,
        })
    }

    /// Mirror image and mask left-to-right.
    pub fn hflip(&self) -> Self {
        let (h, w) = (self.height, self.width);
        let mut image = self.image.clone();
        for c in 0..self.channels {
            for y in 0..h {
                let row = &mut image[(c * h + y) * w..(c * h + y + 1) * w];
                row.reverse();
            }
        }
        let mut mask = self.mask.clone();
        for y in 0..h {
            mask[y * w..(y + 1) * w].reverse();
        }
        Self {
            image,
            mask,
            ..*self
        }
    }

    fn keep_only(&self, keep: &[ClassId]) -> Self {
        let mask = self
            .mask
            .iter()
            .map(|&c| if keep.contains(&c) { c } else { BACKGROUND })
            .collect();
        Self {
            mask,
            image: self.image.clone(),
            ..*self
        }
    }
}

/// Training view of a sample at `step`: only `C^t` keeps its labels.
pub fn remap_labels(
    sample: &LabeledSample,
    schedule: &TaskSchedule,
    step: usize,
) -> Result<LabeledSample> {
    schedule.check_step(step)?;
    Ok(sample.keep_only(schedule.step_classes(step)))
}

/// Evaluation view after `step`: every class learned so far keeps its label,
/// future classes become background.
pub fn remap_for_eval(
    sample: &LabeledSample,
    schedule: &TaskSchedule,
    step: usize,
) -> Result<LabeledSample> {
    schedule.check_step(step)?;
    Ok(sample.keep_only(schedule.learned_through(step)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(mask: Vec<ClassId>, h: usize, w: usize) -> LabeledSample {
        LabeledSample::new(1, h, w, vec![0.0; h * w], mask).unwrap()
    }

    #[test]
    fn fifteen_one_schedule() {
        let order: Vec<ClassId> = (1..=20).collect();
        let s = build_schedule(&order, &[15, 1, 1, 1, 1, 1], Protocol::Overlapped).unwrap();
        assert_eq!(s.num_steps(), 6);
        assert_eq!(s.step_classes(0), &order[..15]);
        for t in 1..6 {
            assert_eq!(s.step_classes(t), &[15 + t as ClassId]);
        }
        assert_eq!(s.learned_before(3), &order[..17]);
    }

    #[test]
    fn single_step_schedule() {
        let s = build_schedule(&[1], &[1], Protocol::Disjoint).unwrap();
        assert_eq!(s.num_steps(), 1);
        assert_eq!(s.step_classes(0), &[1]);
        assert!(s.learned_before(0).is_empty());
    }

    #[test]
    fn permuted_order_partitions() {
        let s = build_schedule(&[3, 1, 2], &[2, 1], Protocol::Overlapped).unwrap();
        assert_eq!(s.step_classes(0), &[3, 1]);
        assert_eq!(s.step_classes(1), &[2]);
        assert_eq!(s.channel_of(3), Some(1));
        assert_eq!(s.channel_of(2), Some(3));
        assert_eq!(s.class_of_channel(2), 1);
        assert_eq!(s.channel_table(), vec![Some(0), Some(2), Some(3), Some(1)]);
    }

    #[test]
    fn schedule_errors() {
        let e = build_schedule(&[1, 2, 3], &[2, 2], Protocol::Overlapped).unwrap_err();
        assert_eq!(e.code(), "SCHEDULE_MISMATCH");
        let e = build_schedule(&[1, 2, 2], &[2, 1], Protocol::Overlapped).unwrap_err();
        assert_eq!(e.code(), "DUPLICATE_CLASS");
        let e = build_schedule(&[1, 2], &[2, 0], Protocol::Overlapped).unwrap_err();
        assert_eq!(e.code(), "SCHEDULE_MISMATCH");
        let e = build_schedule(&[0, 2], &[2], Protocol::Overlapped).unwrap_err();
        assert_eq!(e.code(), "CONTRACT_ERROR");
    }

    #[test]
    fn remap_keeps_only_current_classes() {
        let order: Vec<ClassId> = (1..=20).collect();
        let s = build_schedule(&order, &[15, 1, 1, 1, 1, 1], Protocol::Overlapped).unwrap();
        let x = sample(vec![1, 16, 0, 16, 1, 17], 2, 3);
        let r = remap_labels(&x, &s, 1).unwrap();
        assert_eq!(r.mask, vec![0, 16, 0, 16, 0, 0]);
        assert_eq!(r.image, x.image);

        let bg = sample(vec![0; 6], 2, 3);
        assert_eq!(remap_labels(&bg, &s, 3).unwrap(), bg);
        assert!(remap_labels(&bg, &s, 6).is_err());
    }

    #[test]
    fn remap_matches_pixel_loop() {
        let s = build_schedule(&[1, 2, 3], &[2, 1], Protocol::Overlapped).unwrap();
        let mask: Vec<ClassId> = (0..16).map(|i| (i * 7 % 4) as ClassId).collect();
        let x = sample(mask.clone(), 4, 4);
        let r = remap_labels(&x, &s, 0).unwrap();
        for (i, &c) in mask.iter().enumerate() {
            let expected = if c == 1 || c == 2 { c } else { 0 };
            assert_eq!(r.mask[i], expected);
        }
        assert!(!r.mask.contains(&3));
    }

    #[test]
    fn protocol_membership() {
        let s = build_schedule(&[1, 2, 3], &[1, 1, 1], Protocol::Disjoint).unwrap();
        let o = build_schedule(&[1, 2, 3], &[1, 1, 1], Protocol::Overlapped).unwrap();
        let only_old = [0, 1, 1];
        let old_and_new = [0, 1, 2];
        let with_future = [0, 2, 3];
        assert!(s.sample_in_step(&only_old, 0));
        assert!(!s.sample_in_step(&old_and_new, 0));
        assert!(s.sample_in_step(&old_and_new, 1));
        assert!(!s.sample_in_step(&with_future, 1));
        assert!(o.sample_in_step(&with_future, 1));
        assert!(!o.sample_in_step(&only_old, 1));
    }

    #[test]
    fn hflip_mirrors_rows() {
        let x = LabeledSample::new(1, 1, 3, vec![0.1, 0.2, 0.3], vec![1, 0, 2]).unwrap();
        let f = x.hflip();
        assert_eq!(f.image, vec![0.3, 0.2, 0.1]);
        assert_eq!(f.mask, vec![2, 0, 1]);
        assert_eq!(f.hflip(), x);
    }
}
