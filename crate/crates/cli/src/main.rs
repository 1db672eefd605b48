use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qskd_cli::commands;
use qskd_cli::{CliResult, RunConfig};

/// Query-selection knowledge distillation on a desk-scale detection transformer.
#[derive(Parser, Debug)]
#[command(name = "qskd", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; defaults are used for anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path override such as `train.epochs=3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for training, benchmark and gradient-check randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a detector without a teacher.
    Train {
        /// Continue from this checkpoint stem up to `train.epochs`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Distill a teacher into a student.
    Distill {
        /// Teacher checkpoint stem; trained from `teacher.*` when absent.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Run ablation suites over several seeds.
    Ablate {
        /// Suite name; repeatable (components, enc-threshold, adapter, dec, lambda-agfd).
        #[arg(long = "suite")]
        suites: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Teacher checkpoint stem; trained from `teacher.*` when absent.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Time local against global prediction matching.
    BenchMatching {
        #[arg(long)]
        n_q: Option<usize>,
        #[arg(long)]
        n_gt: Option<usize>,
        #[arg(long, allow_hyphen_values = true)]
        tau: Option<f64>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Average queries per object across GIoU thresholds.
    Stats {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated thresholds.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        thresholds: Vec<f64>,
    },
    /// Write per-query attention heatmaps and the foreground mask of one scene.
    MaskDump {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scene_index: Option<u64>,
    },
    /// Finite-difference check of every loss's gradient.
    GradCheck {
        #[arg(long)]
        instances: Option<usize>,
        /// Break the backward rule of this op kind (test hook).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn json(v: impl serde::Serialize) -> String {
    serde_json::to_string(&v).expect("plain value")
}

fn run(cli: Cli) -> CliResult<()> {
    let mut o = cli.common.overrides.clone();
    let mut set = |k: &str, v: String| o.push(format!("{k}={v}"));
    if let Some(s) = cli.common.seed {
        for k in ["train.seed", "bench.seed", "grad_check.seed"] {
            set(k, s.to_string());
        }
    }
    if let Some(p) = &cli.common.out {
        set("output_dir", json(p));
    }
    match &cli.command {
        Command::Train { .. } => {}
        Command::GradCheck { instances, .. } => {
            if let Some(v) = instances {
                set("grad_check.instances", v.to_string());
            }
        }
        Command::Distill { teacher } => {
            if let Some(t) = teacher {
                set("teacher.checkpoint", json(t));
            }
        }
        Command::Ablate { suites, seeds, teacher } => {
            if !suites.is_empty() {
                set("ablate.suites", json(suites));
            }
            if !seeds.is_empty() {
                set("ablate.seeds", json(seeds));
            }
            if let Some(t) = teacher {
                set("teacher.checkpoint", json(t));
            }
        }
        Command::BenchMatching { n_q, n_gt, tau, trials } => {
            if let Some(v) = n_q {
                set("bench.n_q", v.to_string());
            }
            if let Some(v) = n_gt {
                set("bench.n_gt", v.to_string());
            }
            if let Some(v) = tau {
                set("bench.tau", json(v));
            }
            if let Some(v) = trials {
                set("bench.trials", v.to_string());
            }
        }
        Command::Stats { checkpoint, thresholds } => {
            if let Some(c) = checkpoint {
                set("stats.checkpoint", json(c));
            }
            if !thresholds.is_empty() {
                set("stats.thresholds", json(thresholds));
            }
        }
        Command::MaskDump { checkpoint, scene_index } => {
            if let Some(c) = checkpoint {
                set("mask_dump.checkpoint", json(c));
            }
            if let Some(v) = scene_index {
                set("mask_dump.scene_index", v.to_string());
            }
        }
    }
    let cfg = RunConfig::load(cli.common.config.as_deref(), &o)?;
    match cli.command {
        Command::Train { resume } => commands::train(&cfg, resume.as_deref()).map(drop),
        Command::Distill { .. } => commands::distill(&cfg).map(drop),
        Command::Ablate { .. } => commands::ablate(&cfg).map(drop),
        Command::BenchMatching { .. } => commands::bench_matching(&cfg).map(drop),
        Command::Stats { .. } => commands::stats(&cfg).map(drop),
        Command::MaskDump { .. } => commands::mask_dump(&cfg).map(drop),
        Command::GradCheck { inject_fault, .. } => {
            let fault = inject_fault.as_deref().map(commands::parse_op_kind).transpose()?;
            commands::grad_check(&cfg, fault).map(drop)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qskd: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
