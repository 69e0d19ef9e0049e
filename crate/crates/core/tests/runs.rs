use std::fs;
use std::path::Path;

use candle_core::Device;

use incrseg::checkpoint::load_checkpoint;
use incrseg::config::ExperimentConfig;
use incrseg::experiment::{read_run_reports, run_experiment, RunOptions};
use incrseg::schedule::Protocol;

fn small_config(protocol: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(&format!(
        r#"
[dataset.synthetic]
seed = 4
num_classes = 4
images_per_class = 3
val_images_per_class = 2
height = 32
width = 32
min_radius = 5
max_radius = 8
max_shapes = 2

[schedule]
class_order = [3, 1, 4, 2]
step_sizes = [2, 1, 1]
protocol = "{protocol}"

[train]
seed = 5
batch_size = 4
epochs_per_step = 1

[train.model]
stage_widths = [8, 12, 16, 16]
tap_width = 8
embed_width = 16
"#
    ))
    .unwrap()
}

fn opts(root: &Path) -> RunOptions {
    RunOptions {
        output_root: Some(root.to_path_buf()),
        ..RunOptions::default()
    }
}

const STEP_FILES: [&str; 4] = ["metrics.csv", "confusion.csv", "report.csv", "model.ckpt"];

fn step_files(run_dir: &Path, step: usize) -> Vec<Vec<u8>> {
    STEP_FILES
        .iter()
        .map(|f| fs::read(run_dir.join(format!("step_{step}")).join(f)).unwrap())
        .collect()
}

fn assert_same_step(a: &Path, b: &Path, step: usize) {
    for (name, (x, y)) in STEP_FILES.iter().zip(step_files(a, step).iter().zip(step_files(b, step))) {
        if name.ends_with(".csv") {
            assert_eq!(String::from_utf8_lossy(x), String::from_utf8_lossy(&y), "step {step} {name}");
        }
    }
    // checkpoint header order is not fixed; compare what it holds
    let ckpt = |dir: &Path| {
        let (model, meta) = load_checkpoint(&dir.join(format!("step_{step}/model.ckpt")), &Device::Cpu).unwrap();
        let mut tensors: Vec<(String, Vec<u8>)> = model
            .state_dict()
            .unwrap()
            .into_iter()
            .map(|(k, t)| {
                let bits = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
                (k, bits.iter().flat_map(|v| v.to_le_bytes()).collect())
            })
            .collect();
        tensors.sort();
        (meta, tensors)
    };
    assert!(ckpt(a) == ckpt(b), "step {step} checkpoints differ");
}

#[test]
fn resuming_after_a_lost_checkpoint_reproduces_the_step() {
    let root = tempfile::tempdir().unwrap();
    let cfg = small_config("overlapped");
    let full = run_experiment(&cfg, &opts(root.path())).unwrap();
    let saved = tempfile::tempdir().unwrap();
    fs::create_dir(saved.path().join("step_2")).unwrap();
    for f in STEP_FILES {
        fs::copy(full.run_dir.join("step_2").join(f), saved.path().join("step_2").join(f)).unwrap();
    }

    fs::remove_file(full.run_dir.join("step_2/model.ckpt")).unwrap();
    let resumed = run_experiment(
        &cfg,
        &RunOptions {
            resume: true,
            ..opts(root.path())
        },
    )
    .unwrap();
    assert_same_step(&resumed.run_dir, saved.path(), 2);
    assert_eq!(resumed.metrics, full.metrics);
    assert_eq!(resumed.confusion, full.confusion);
}

#[test]
fn step_limit_then_resume_matches_an_uninterrupted_run() {
    let cfg = small_config("disjoint");
    let a = tempfile::tempdir().unwrap();
    let full = run_experiment(&cfg, &opts(a.path())).unwrap();

    let b = tempfile::tempdir().unwrap();
    let partial = run_experiment(
        &cfg,
        &RunOptions {
            max_steps: Some(1),
            ..opts(b.path())
        },
    )
    .unwrap();
    assert!(partial.run_dir.join("step_0/model.ckpt").is_file());
    assert!(!partial.run_dir.join("step_1").exists());
    assert_eq!(partial.reports.len(), 1);

    let finished = run_experiment(
        &cfg,
        &RunOptions {
            resume: true,
            ..opts(b.path())
        },
    )
    .unwrap();
    for step in 0..3 {
        assert_same_step(&finished.run_dir, &full.run_dir, step);
    }
    assert_eq!(read_run_reports(&finished.run_dir).unwrap().len(), 3);
}

#[test]
fn resume_rejects_a_different_stored_config() {
    let root = tempfile::tempdir().unwrap();
    let cfg = small_config("overlapped");
    let report = run_experiment(
        &cfg,
        &RunOptions {
            max_steps: Some(1),
            ..opts(root.path())
        },
    )
    .unwrap();
    let mut other = cfg.clone();
    other.train.base_lr = 0.5;
    fs::write(report.run_dir.join("config.toml"), other.to_toml_string()).unwrap();
    let Err(err) = run_experiment(
        &cfg,
        &RunOptions {
            resume: true,
            ..opts(root.path())
        },
    ) else {
        panic!("resume accepted a mismatched config");
    };
    assert_eq!(err.code(), "RESUME_MISMATCH");
}

#[test]
fn fresh_run_clears_stale_steps() {
    let root = tempfile::tempdir().unwrap();
    let cfg = small_config("overlapped");
    let first = run_experiment(&cfg, &opts(root.path())).unwrap();
    assert!(first.run_dir.join("step_2").is_dir());
    let second = run_experiment(
        &cfg,
        &RunOptions {
            max_steps: Some(1),
            ..opts(root.path())
        },
    )
    .unwrap();
    assert_eq!(first.run_dir, second.run_dir);
    assert!(!second.run_dir.join("step_1").exists());
}

#[test]
fn six_step_single_class_schedule_runs_end_to_end() {
    let mut cfg = small_config("overlapped");
    if let incrseg::config::DatasetConfig::Synthetic(d) = &mut cfg.dataset {
        d.num_classes = 7;
        d.images_per_class = 2;
        d.val_images_per_class = 1;
    }
    cfg.schedule.class_order = vec![2, 5, 1, 7, 3, 6, 4];
    cfg.schedule.step_sizes = vec![2, 1, 1, 1, 1, 1];
    cfg.schedule.protocol = Protocol::Overlapped;
    let root = tempfile::tempdir().unwrap();
    let report = run_experiment(&cfg, &opts(root.path())).unwrap();
    assert_eq!(report.reports.len(), 6);
    for (step, r) in report.reports.iter().enumerate() {
        assert_eq!(r.step, step);
        // background plus the classes seen so far
        assert_eq!(r.learned_so_far.len(), step + 3);
        assert!(r.group_ious.all.is_some());
        if step > 0 {
            assert!(r.group_ious.incremented_classes.is_some());
        }
    }
    let rows = read_run_reports(&report.run_dir).unwrap();
    assert_eq!(rows.iter().map(|r| r.learned).collect::<Vec<_>>(), vec![3, 4, 5, 6, 7, 8]);
}

#[test]
fn shipped_configs_load_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&path).unwrap();
            cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 2);
}
