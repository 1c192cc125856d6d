//! `mmga`: generate data, pre-train, fine-tune, evaluate and report.
//!
//! Every command prints one JSON line on success. Failures print one line
//! `{"error": <kind>, "message": <text>}` to stderr and exit nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use mmga_core::config::{self, DatasetConfig, TrainConfig};
use mmga_core::eval::Task;
use mmga_core::run::{self, Unfreeze};
use mmga_core::train::gradcheck::{check_all, tiny_instance};
use mmga_core::Error;

/// Largest relative error a gradient check may report.
const GRADCHECK_TOL: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "mmga", version, about = "Multimodal graph-aligned user representation pre-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Content,
    Fans,
}

#[derive(Clone, Copy, ValueEnum)]
enum Size {
    Tiny,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train on a dataset directory.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classifier on the pre-trained user representation.
    Finetune {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Also update the encoders.
        #[arg(long)]
        unfreeze: bool,
        #[arg(long, default_value_t = 20)]
        unfreeze_steps: usize,
        #[arg(long, default_value_t = 1e-4)]
        unfreeze_lr: f64,
    },
    /// Alignment statistics and, optionally, held-out link AUC.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        link_auc: bool,
    },
    /// Finite-difference check of every loss against every parameter group.
    Gradcheck {
        #[arg(long, value_enum)]
        size: Size,
        /// Coordinates checked per parameter array; 0 checks all.
        #[arg(long, default_value_t = 16)]
        coords: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarize a run into report.json and loss plots.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn execute(cmd: Command) -> Result<serde_json::Value, Error> {
    Ok(match cmd {
        Command::GenData { config, out } => {
            let cfg: DatasetConfig = match config {
                Some(p) => config::load(&p)?,
                None => DatasetConfig::default(),
            };
            let manifest = run::gen_data(&cfg, &out)?;
            json!({"command": "gen-data", "out": out, "files": manifest.files.len()})
        }
        Command::Pretrain { data, config, out } => {
            let cfg: TrainConfig = match config {
                Some(p) => config::load(&p)?,
                None => TrainConfig::default(),
            };
            let info = run::pretrain_run(&data, &cfg, &out)?;
            json!({"command": "pretrain", "out": out, "steps": info.steps})
        }
        Command::Finetune {
            run: dir,
            task,
            unfreeze,
            unfreeze_steps,
            unfreeze_lr,
        } => {
            let task = match task {
                TaskArg::Content => Task::Content,
                TaskArg::Fans => Task::Fans,
            };
            let u = unfreeze.then_some(Unfreeze {
                steps: unfreeze_steps,
                learning_rate: unfreeze_lr,
            });
            let r = run::finetune_run(&dir, task, u)?;
            json!({
                "command": "finetune",
                "task": task.name(),
                "accuracy": r.full.metrics.accuracy,
                "macro_f1": r.full.metrics.macro_f1,
                "auc": r.full.auc,
            })
        }
        Command::Eval { run: dir, link_auc } => {
            let (e, auc) = run::eval_run(&dir, link_auc)?;
            json!({
                "command": "eval",
                "image_alignment_gap": e.image_alignment.gap,
                "text_alignment_gap": e.text_alignment.gap,
                "link_auc": auc.map(|a| a.trained),
            })
        }
        Command::Gradcheck { size: Size::Tiny, coords, seed } => {
            let inst = tiny_instance(seed)?;
            let checks = check_all(&inst, 1e-4, (coords > 0).then_some(coords))?;
            let worst = checks
                .iter()
                .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
                .expect("non-empty");
            let value = json!({
                "command": "gradcheck",
                "checks": checks.len(),
                "max_rel_error": worst.report.max_rel_error,
                "worst": format!("{}/{}", worst.component, worst.group),
            });
            if worst.report.max_rel_error >= GRADCHECK_TOL {
                return Err(Error::GradientCheck(format!(
                    "{} on {}/{}",
                    worst.report.max_rel_error, worst.component, worst.group
                )));
            }
            value
        }
        Command::Report { run: dir } => {
            let r = run::report_run(&dir)?;
            json!({"command": "report", "steps": r.steps, "plots": r.plots.len()})
        }
    })
}

fn fail(kind: &str, message: &str) -> ExitCode {
    eprintln!("{}", json!({"error": kind, "message": message.replace('\n', " ")}));
    ExitCode::from(if kind == "usage" { 2 } else { 1 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return fail("usage", first.trim_start_matches("error: "));
        }
    };
    match execute(cli.command) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}
