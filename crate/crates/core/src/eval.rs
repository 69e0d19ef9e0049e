//! Confusion matrices, mean IoU and step-wise forgetting reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::schedule::{ClassId, TaskSchedule, BACKGROUND};

/// Square pixel-count matrix indexed by class id; rows are ground truth,
/// columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    size: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            counts: vec![0; size * size],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let size = rows.len();
        if rows.iter().any(|r| r.len() != size) {
            return Err(Error::Shape("confusion matrix rows must be square".into()));
        }
        Ok(Self {
            size,
            counts: rows.concat(),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.size + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Count one pixel per (gt, pred) pair.
    pub fn accumulate(&mut self, gt: &[ClassId], pred: &[ClassId]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::Shape(format!(
                "{} ground-truth pixels vs {} predictions",
                gt.len(),
                pred.len()
            )));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            let (g, p) = (g as usize, p as usize);
            if g >= self.size || p >= self.size {
                return Err(Error::LabelRange {
                    label: g.max(p) as u32,
                    channels: self.size,
                });
            }
            self.counts[g * self.size + p] += 1;
        }
        Ok(())
    }

    /// Element-wise sum; associative and commutative.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.size != self.size {
            return Err(Error::Shape(format!(
                "cannot merge {}x{} into {}x{}",
                other.size, other.size, self.size, self.size
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)` for one class, `None` when the class never
    /// occurs in either ground truth or prediction.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.get(class, class);
        let row: u64 = (0..self.size).map(|p| self.get(class, p)).sum();
        let col: u64 = (0..self.size).map(|g| self.get(g, class)).sum();
        let denom = row + col - tp;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    /// CSV with one row per ground-truth class.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for g in 0..self.size {
            let row: Vec<String> = (0..self.size).map(|p| self.get(g, p).to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows: Vec<Vec<u64>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .map(|v| {
                        v.trim()
                            .parse::<u64>()
                            .map_err(|e| Error::Checkpoint(format!("bad confusion entry `{v}`: {e}")))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        Self::from_rows(&rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouResult {
    /// Mean over the classes with a defined IoU; `None` if there are none.
    pub miou: Option<f64>,
    pub per_class: BTreeMap<ClassId, f64>,
    /// Classes left out because they never occur in ground truth or prediction.
    pub excluded: Vec<ClassId>,
}

pub fn miou(cm: &ConfusionMatrix, class_set: &[ClassId]) -> Result<MiouResult> {
    if class_set.is_empty() {
        return Err(Error::Contract("mIoU over an empty class set".into()));
    }
    let mut per_class = BTreeMap::new();
    let mut excluded = Vec::new();
    for &c in class_set {
        if c as usize >= cm.size() {
            return Err(Error::LabelRange {
                label: c,
                channels: cm.size(),
            });
        }
        match cm.iou(c as usize) {
            Some(v) => {
                per_class.insert(c, v);
            }
            None => excluded.push(c),
        }
    }
    let miou = (!per_class.is_empty())
        .then(|| per_class.values().sum::<f64>() / per_class.len() as f64);
    Ok(MiouResult {
        miou,
        per_class,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupIous {
    /// Classes of step 0 (plus background when counted).
    pub initial_classes: Option<f64>,
    /// Classes added after step 0; `None` at step 0.
    pub incremented_classes: Option<f64>,
    pub all: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub per_class_iou: BTreeMap<ClassId, f64>,
    pub group_ious: GroupIous,
    pub learned_so_far: BTreeSet<ClassId>,
}

fn group_mean(per_class: &BTreeMap<ClassId, f64>, members: &[ClassId]) -> Option<f64> {
    let vals: Vec<f64> = members.iter().filter_map(|c| per_class.get(c).copied()).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Group means of each step's confusion matrix. `include_background` adds
/// class 0 to the initial and all-class groups.
pub fn stepwise_report(
    history: &[ConfusionMatrix],
    schedule: &TaskSchedule,
    include_background: bool,
) -> Result<Vec<StepReport>> {
    if history.len() > schedule.num_steps() {
        return Err(Error::ScheduleMismatch(format!(
            "{} confusion matrices for a {}-step schedule",
            history.len(),
            schedule.num_steps()
        )));
    }
    let bg: &[ClassId] = if include_background { &[BACKGROUND] } else { &[] };
    let initial: Vec<ClassId> = bg.iter().chain(schedule.step_classes(0)).copied().collect();
    let mut reports = Vec::with_capacity(history.len());
    for (step, cm) in history.iter().enumerate() {
        let learned: Vec<ClassId> = bg
            .iter()
            .chain(schedule.learned_through(step))
            .copied()
            .collect();
        let result = miou(cm, &learned)?;
        let incremented = &schedule.learned_through(step)[schedule.step_classes(0).len()..];
        reports.push(StepReport {
            step,
            group_ious: GroupIous {
                initial_classes: group_mean(&result.per_class, &initial),
                incremented_classes: group_mean(&result.per_class, incremented),
                all: group_mean(&result.per_class, &learned),
            },
            per_class_iou: result.per_class,
            learned_so_far: learned.into_iter().collect(),
        });
    }
    Ok(reports)
}

pub const REPORT_HEADER: &str = "step,class_or_group,iou";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl StepReport {
    /// CSV rows: one per class, then the `initial`, `incremented` and `all`
    /// groups. Undefined values are left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for (c, v) in &self.per_class_iou {
            let _ = writeln!(out, "{},{c},{v}", self.step);
        }
        let g = &self.group_ious;
        for (name, v) in [
            ("initial", g.initial_classes),
            ("incremented", g.incremented_classes),
            ("all", g.all),
        ] {
            let _ = writeln!(out, "{},{name},{}", self.step, fmt_opt(v));
        }
        out
    }
}

/// Group rows of a step report CSV, kept as the raw strings written.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportRow {
    pub step: usize,
    pub learned: usize,
    pub initial: String,
    pub incremented: String,
    pub all: String,
}

pub fn parse_report_csv(text: &str) -> Result<ReportRow> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(Error::Checkpoint("report CSV has an unexpected header".into()));
    }
    let mut step = None;
    let mut classes = 0;
    let mut groups: BTreeMap<String, String> = BTreeMap::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.splitn(3, ',').collect();
        if fields.len() != 3 {
            return Err(Error::Checkpoint(format!("malformed report row `{line}`")));
        }
        let s: usize = fields[0]
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad step in `{line}`")))?;
        step = Some(s);
        if fields[1].parse::<ClassId>().is_ok() {
            classes += 1;
        } else {
            groups.insert(fields[1].to_string(), fields[2].to_string());
        }
    }
    let step = step.ok_or_else(|| Error::Checkpoint("empty report CSV".into()))?;
    let take = |k: &str| groups.get(k).cloned().unwrap_or_default();
    Ok(ReportRow {
        step,
        learned: classes,
        initial: take("initial"),
        incremented: take("incremented"),
        all: take("all"),
    })
}

/// Fixed-width text table of step reports, one row per step.
pub fn format_report_table(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>4}  {:>7}  {:>22}  {:>22}  {:>22}",
        "step", "classes", "initial", "incremented", "all"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:>4}  {:>7}  {:>22}  {:>22}  {:>22}",
            r.step,
            r.learned,
            if r.initial.is_empty() { "-" } else { &r.initial },
            if r.incremented.is_empty() { "-" } else { &r.incremented },
            if r.all.is_empty() { "-" } else { &r.all },
        );
    }
    out
}
