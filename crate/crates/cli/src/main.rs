use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use incrseg::dataset::{generate_synthetic_dataset, write_voc_format, SyntheticSpec};
use incrseg::experiment::{dump_thresholds, plot_run, report_table, run_experiment_file, RunOptions};
use incrseg::Error;

#[derive(Parser)]
#[command(name = "incrseg", version, about = "Class-incremental semantic segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every step of a config and write artifacts.
    Run {
        config: PathBuf,
        /// Continue from the latest complete step.
        #[arg(long)]
        resume: bool,
        /// Override `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Run only the first K steps.
        #[arg(long, value_name = "K")]
        steps: Option<usize>,
    },
    /// Print the step-wise mIoU table of a run directory.
    Report {
        run_dir: PathBuf,
        /// Also write `miou.png` into the run directory.
        #[arg(long)]
        plot: bool,
    },
    /// Write a synthetic dataset as `train/` and `val/` image and mask folders.
    GenData {
        out_dir: PathBuf,
        #[arg(long, default_value_t = 5)]
        num_classes: usize,
        #[arg(long, default_value_t = 40)]
        images_per_class: usize,
        #[arg(long, default_value_t = 10)]
        val_images_per_class: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the pseudo-label thresholds of a step as CSV.
    DumpThresholds {
        run_dir: PathBuf,
        #[arg(long)]
        step: usize,
        #[arg(long, default_value_t = 4)]
        batches: usize,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config { .. } | Error::EmptyRun(_)) => 2,
        Some(Error::Numeric { .. }) => 3,
        _ => 1,
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            config,
            resume,
            seed,
            steps,
        } => {
            let opts = RunOptions {
                resume,
                max_steps: steps,
                output_root: std::env::var_os("INCRSEG_OUT").map(PathBuf::from),
                seed,
            };
            let report = run_experiment_file(&config, &opts)?;
            for r in &report.reports {
                let all = r.group_ious.all.map_or("-".to_string(), |v| format!("{:.2}", v * 100.0));
                println!("step {}: all-class mIoU {all}", r.step);
            }
            println!("{}", report.run_dir.display());
        }
        Command::Report { run_dir, plot } => {
            print!("{}", report_table(&run_dir)?);
            if plot {
                let path = run_dir.join("miou.png");
                plot_run(&run_dir, &path)?;
                eprintln!("wrote {}", path.display());
            }
        }
        Command::GenData {
            out_dir,
            num_classes,
            images_per_class,
            val_images_per_class,
            height,
            width,
            seed,
        } => {
            for (split, count, split_seed) in [
                ("train", images_per_class, seed),
                ("val", val_images_per_class, seed.wrapping_add(1)),
            ] {
                let spec = SyntheticSpec::new(num_classes, count, height, width);
                let samples = generate_synthetic_dataset(split_seed, &spec)?;
                let root = out_dir.join(split);
                write_voc_format(&samples, &root, split)
                    .with_context(|| format!("writing {}", root.display()))?;
                eprintln!("wrote {} samples to {}", samples.len(), root.display());
            }
        }
        Command::DumpThresholds {
            run_dir,
            step,
            batches,
        } => print!("{}", dump_thresholds(&run_dir, step, batches)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = err
                .downcast_ref::<Error>()
                .map_or(String::new(), |e| format!("[{}] ", e.code()));
            eprintln!("error: {code}{err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
