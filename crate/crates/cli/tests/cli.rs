use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn incrseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_incrseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("INCRSEG_OUT")
        .output()
        .unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn write_config(dir: &Path, data: &Path, step_sizes: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    let body = format!(
        r#"output_dir = "{out}"

[dataset.voc]
train_root = "{train}"
val_root = "{val}"

[schedule]
class_order = [1, 2, 3, 4]
step_sizes = {step_sizes}
protocol = "overlapped"

[train]
batch_size = 4
epochs_per_step = 1

[train.model]
stage_widths = [8, 12, 16, 16]
tap_width = 8
embed_width = 16
"#,
        out = dir.join("runs").display(),
        train = data.join("train").display(),
        val = data.join("val").display(),
    );
    std::fs::write(&path, body).unwrap();
    path
}

fn gen_data(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let out = incrseg(&[
        "gen-data",
        data.to_str().unwrap(),
        "--num-classes",
        "4",
        "--images-per-class",
        "2",
        "--val-images-per-class",
        "1",
        "--height",
        "32",
        "--width",
        "32",
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    data
}

fn run_dir_from(stdout: &str) -> PathBuf {
    PathBuf::from(stdout.lines().last().unwrap().trim())
}

#[test]
fn bad_step_sizes_exit_with_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), tmp.path(), "[2, 1]");
    let out = incrseg(&["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = text(&out.stderr);
    assert!(err.contains("CONFIG_ERROR"), "{err}");
    assert!(err.contains("schedule.step_sizes"), "{err}");
}

#[test]
fn report_on_empty_directory_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = incrseg(&["report", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("EMPTY_RUN"));
}

#[test]
fn missing_config_file_exits_nonzero() {
    let out = incrseg(&["run", "/nonexistent/exp.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("IO_ERROR"));
}

#[test]
fn generated_data_runs_reports_and_dumps_thresholds() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_data(tmp.path());
    assert!(std::fs::read_dir(data.join("train")).unwrap().count() > 0);
    let cfg = write_config(tmp.path(), &data, "[2, 1, 1]");

    let out = incrseg(&["run", cfg.to_str().unwrap(), "--steps", "1"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    let run_dir = run_dir_from(&stdout);
    assert!(stdout.starts_with("step 0: all-class mIoU"));
    assert!(run_dir.join("step_0/model.ckpt").is_file());
    assert!(!run_dir.join("step_1").exists());

    let out = incrseg(&["run", cfg.to_str().unwrap(), "--resume"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert_eq!(run_dir_from(&text(&out.stdout)), run_dir);
    assert!(run_dir.join("step_2/model.ckpt").is_file());

    let out = incrseg(&["report", run_dir.to_str().unwrap(), "--plot"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let table = text(&out.stdout);
    assert_eq!(table.lines().filter(|l| l.trim_start().starts_with(char::is_numeric)).count(), 3, "{table}");
    let png = std::fs::read(run_dir.join("miou.png")).unwrap();
    assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");

    let out = incrseg(&["dump-thresholds", run_dir.to_str().unwrap(), "--step", "1", "--batches", "1"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let csv = text(&out.stdout);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("batch,class_id,u_low,u_high,u_mean,n_c,tau,branch"));
    // one row per old foreground class in the single batch
    assert_eq!(lines.count(), 2, "{csv}");

    let out = incrseg(&["dump-thresholds", run_dir.to_str().unwrap(), "--step", "0"]);
    assert!(!out.status.success());
}

#[test]
fn seed_override_gets_its_own_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_data(tmp.path());
    let cfg = write_config(tmp.path(), &data, "[2, 1, 1]");
    let a = incrseg(&["run", cfg.to_str().unwrap(), "--steps", "1", "--seed", "7"]);
    let b = incrseg(&["run", cfg.to_str().unwrap(), "--steps", "1"]);
    assert!(a.status.success() && b.status.success());
    assert_ne!(run_dir_from(&text(&a.stdout)), run_dir_from(&text(&b.stdout)));
}
