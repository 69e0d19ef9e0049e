//! End-to-end runs: data, step loop, artifacts and resumption.
//!
//! Layout under the output root:
//!
//! ```text
//! <hash>/config.toml
//! <hash>/step_<t>/metrics.csv
//! <hash>/step_<t>/confusion.csv
//! <hash>/step_<t>/report.csv
//! <hash>/step_<t>/model.ckpt     (written last; marks the step complete)
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::Device;

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::config::{DatasetConfig, ExperimentConfig, TrainConfig};
use crate::dataset::{generate_synthetic_dataset, load_voc_format};
use crate::dcpl::{batch_thresholds, ProbMap};
use crate::error::{Error, Result};
use crate::eval::{format_report_table, parse_report_csv, stepwise_report, ConfusionMatrix, ReportRow, StepReport};
use crate::model::{freeze_snapshot, TapModel};
use crate::plot::{render_miou_chart, Series, GROUP_COLORS};
use crate::schedule::{LabeledSample, TaskSchedule};
use crate::trainer::{epoch_plan, evaluate, metrics_csv, train_incremental_step, IterMetrics, StepData};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from the latest complete step instead of starting over.
    pub resume: bool,
    /// Stop after this many steps.
    pub max_steps: Option<usize>,
    /// Replaces the config's `output_dir`.
    pub output_root: Option<PathBuf>,
    /// Replaces `train.seed`.
    pub seed: Option<u64>,
}

pub struct ExperimentReport {
    pub run_dir: PathBuf,
    pub config_hash: String,
    pub metrics: Vec<Vec<IterMetrics>>,
    pub confusion: Vec<ConfusionMatrix>,
    pub reports: Vec<StepReport>,
}

/// Training and validation samples described by the config.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    match &cfg.dataset {
        DatasetConfig::Synthetic(d) => Ok((
            generate_synthetic_dataset(d.seed, &d.spec(d.images_per_class))?,
            generate_synthetic_dataset(d.val_seed(), &d.spec(d.val_images_per_class))?,
        )),
        DatasetConfig::Voc(d) => {
            let max = cfg.build_schedule()?.max_class_id();
            Ok((load_voc_format(&d.train_root, max)?, load_voc_format(&d.val_root, max)?))
        }
    }
}

fn step_dir(run_dir: &Path, step: usize) -> PathBuf {
    run_dir.join(format!("step_{step}"))
}

/// Seed for the classifier rows added at `step`.
pub fn extension_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0xa076_1d64_78bd_642f)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn step_complete(run_dir: &Path, step: usize) -> bool {
    let d = step_dir(run_dir, step);
    ["metrics.csv", "confusion.csv", "report.csv", "model.ckpt"]
        .iter()
        .all(|f| d.join(f).is_file())
}

/// Parse metrics written by [`metrics_csv`].
fn parse_metrics(text: &str) -> Result<Vec<IterMetrics>> {
    let bad = |l: &str| Error::Checkpoint(format!("malformed metrics row `{l}`"));
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 10 {
                return Err(bad(l));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(l));
            let int = |i: usize| f[i].parse::<usize>().map_err(|_| bad(l));
            Ok(IterMetrics {
                iter: int(0)?,
                lr: num(1)?,
                seg: num(2)?,
                il_d: num(3)?,
                ol_d: num(4)?,
                dada_total: num(5)?,
                arcl: num(6)?,
                total: num(7)?,
                arcl_classes_used: int(8)?,
                arcl_skipped: int(9)?,
            })
        })
        .collect()
}

/// Outcome of one step of the incremental procedure.
pub struct StepResult {
    pub metrics: Vec<IterMetrics>,
    pub confusion: ConfusionMatrix,
}

/// Run step `step` on `model`: freeze the snapshot and grow the classifier
/// (from step 1 on), train, then evaluate on `val`.
pub fn run_step(
    model: &mut TapModel,
    step: usize,
    schedule: &TaskSchedule,
    cfg: &TrainConfig,
    train: &[LabeledSample],
    val: &[LabeledSample],
) -> Result<StepResult> {
    let snapshot = if step == 0 {
        None
    } else {
        let snap = freeze_snapshot(model, step - 1)?;
        model.extend_classifier(
            schedule.step_classes(step).len(),
            extension_seed(cfg.seed, step),
        )?;
        Some(snap)
    };
    let data = StepData::build(train, schedule, step)?;
    log::info!("step {step}: {} training samples", data.len());
    let metrics = train_incremental_step(model, snapshot.as_ref(), &data, schedule, step, cfg)?;
    let confusion = evaluate(model, val, schedule, step, cfg.batch_size)?;
    Ok(StepResult { metrics, confusion })
}

/// Load, validate and run a config file.
pub fn run_experiment_file(path: &Path, opts: &RunOptions) -> Result<ExperimentReport> {
    let cfg = ExperimentConfig::load(path)?;
    run_experiment(&cfg, opts)
}

pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentReport> {
    let mut cfg = cfg.clone();
    if let Some(seed) = opts.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    let schedule = cfg.build_schedule()?;
    let hash = cfg.config_hash();
    let root = opts.output_root.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let run_dir = root.join(&hash);
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;

    let config_path = run_dir.join("config.toml");
    if opts.resume && config_path.is_file() {
        let stored = ExperimentConfig::load(&config_path)?;
        if stored.config_hash() != hash {
            return Err(Error::ResumeMismatch {
                expected: hash,
                found: stored.config_hash(),
            });
        }
    }
    if !opts.resume {
        for entry in std::fs::read_dir(&run_dir).map_err(|e| Error::io(&run_dir, e))? {
            let path = entry.map_err(|e| Error::io(&run_dir, e))?.path();
            let is_step = path
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("step_"));
            if is_step && path.is_dir() {
                std::fs::remove_dir_all(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
    }
    write(&config_path, &cfg.to_toml_string())?;

    let (train, val) = load_datasets(&cfg)?;
    let steps = opts
        .max_steps
        .map_or(schedule.num_steps(), |k| k.min(schedule.num_steps()));
    let device = Device::Cpu;

    let mut metrics = Vec::new();
    let mut confusion = Vec::new();
    let mut model = None;
    if opts.resume {
        let done = (0..steps).take_while(|&t| step_complete(&run_dir, t)).count();
        if done > 0 {
            for t in 0..done {
                let d = step_dir(&run_dir, t);
                metrics.push(parse_metrics(&read(&d.join("metrics.csv"))?)?);
                confusion.push(ConfusionMatrix::from_csv(&read(&d.join("confusion.csv"))?)?);
            }
            let (m, meta) = load_checkpoint(&step_dir(&run_dir, done - 1).join("model.ckpt"), &device)?;
            if meta.config_hash != hash {
                return Err(Error::ResumeMismatch {
                    expected: hash,
                    found: meta.config_hash,
                });
            }
            log::info!("resuming {} after step {}", run_dir.display(), done - 1);
            model = Some(m);
        }
    }

    let start = metrics.len();
    let mut model = match model {
        Some(m) => m,
        None => TapModel::new(
            &cfg.train.model,
            schedule.step_classes(0).len(),
            cfg.train.seed,
            &device,
        )?,
    };
    for step in start..steps {
        let result = run_step(&mut model, step, &schedule, &cfg.train, &train, &val)?;
        confusion.push(result.confusion);
        let report = stepwise_report(&confusion, &schedule, cfg.train.eval_background)?
            .pop()
            .expect("one report per step");

        let d = step_dir(&run_dir, step);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        write(&d.join("metrics.csv"), &metrics_csv(&result.metrics))?;
        write(&d.join("confusion.csv"), &confusion[step].to_csv())?;
        write(&d.join("report.csv"), &report.to_csv())?;
        let meta = CheckpointMeta {
            step_index: step,
            classes_seen: schedule.learned_through(step).to_vec(),
            config_hash: hash.clone(),
            model_config: cfg.train.model.clone(),
            num_classes_now: model.num_classes_now(),
        };
        save_checkpoint(&model, &meta, &d.join("model.ckpt"))?;
        log::info!("step {step}: all-class mIoU {:?}", report.group_ious.all);
        metrics.push(result.metrics);
    }

    let reports = stepwise_report(&confusion, &schedule, cfg.train.eval_background)?;
    Ok(ExperimentReport {
        run_dir,
        config_hash: hash,
        metrics,
        confusion,
        reports,
    })
}

/// Group rows of every step report in `run_dir`, in step order.
pub fn read_run_reports(run_dir: &Path) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for step in 0.. {
        let path = step_dir(run_dir, step).join("report.csv");
        if !path.is_file() {
            break;
        }
        rows.push(parse_report_csv(&read(&path)?)?);
    }
    if rows.is_empty() {
        return Err(Error::EmptyRun(run_dir.to_path_buf()));
    }
    Ok(rows)
}

/// The step-wise table printed by `report`.
pub fn report_table(run_dir: &Path) -> Result<String> {
    Ok(format_report_table(&read_run_reports(run_dir)?))
}

/// mIoU of each class group against the number of learned classes.
pub fn plot_run(run_dir: &Path, path: &Path) -> Result<()> {
    let rows = read_run_reports(run_dir)?;
    let value = |s: &str| s.parse::<f64>().ok();
    let series: Vec<Series> = [
        ("initial", 0usize),
        ("incremented", 1),
        ("all", 2),
    ]
    .into_iter()
    .map(|(name, i)| Series {
        name: name.to_string(),
        color: GROUP_COLORS[i],
        points: rows
            .iter()
            .map(|r| {
                let v = match i {
                    0 => &r.initial,
                    1 => &r.incremented,
                    _ => &r.all,
                };
                (r.learned as f64, value(v))
            })
            .collect(),
    })
    .collect();
    render_miou_chart(&series, path)
}

pub const THRESHOLD_HEADER: &str = "batch,class_id,u_low,u_high,u_mean,n_c,tau,branch";

/// Dynamic thresholds the step-`step` training loop would derive from the
/// snapshot of step `step − 1`, for the first `max_batches` batches.
pub fn dump_thresholds(run_dir: &Path, step: usize, max_batches: usize) -> Result<String> {
    if step == 0 {
        return Err(Error::Contract("thresholds exist from step 1 on".into()));
    }
    let cfg = ExperimentConfig::load(&run_dir.join("config.toml"))?;
    let schedule: TaskSchedule = cfg.build_schedule()?;
    if step >= schedule.num_steps() {
        return Err(Error::ScheduleMismatch(format!(
            "step {step} outside a {}-step schedule",
            schedule.num_steps()
        )));
    }
    let ckpt = step_dir(run_dir, step - 1).join("model.ckpt");
    let (snapshot, _) = load_checkpoint(&ckpt, &Device::Cpu)?;
    let (train, _) = load_datasets(&cfg)?;
    let data = StepData::build(&train, &schedule, step)?;
    let old_channels: Vec<usize> = (1..=schedule.learned_before(step).len()).collect();
    let tc = &cfg.train;
    let plan = epoch_plan(data.len(), 1, tc.batch_size, tc.hflip, tc.seed, step);

    let mut out = String::from(THRESHOLD_HEADER);
    out.push('\n');
    for (b, batch) in plan.iter().flatten().take(max_batches).enumerate() {
        let (x, _) = data.batch(&snapshot, batch)?;
        let probs = ProbMap::from_logits(&snapshot.forward_with_taps(&x)?.logits)?;
        let (_, rows) = batch_thresholds(&probs, &old_channels, &tc.dcpl);
        for r in rows {
            let s = r.stats;
            let _ = writeln!(
                out,
                "{b},{},{},{},{},{},{},{}",
                schedule.class_of_channel(s.class_id),
                s.u_low,
                s.u_high,
                s.u_mean,
                s.pixel_count,
                r.tau,
                r.branch.as_str()
            );
        }
    }
    Ok(out)
}
