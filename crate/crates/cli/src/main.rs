//! `reinrec`: generate logged data, train corrected policies, evaluate
//! them in simulation, and run the experiment recipes.
//!
//! Exit status: 0 success, 2 config error, 3 data error, 4 numerical
//! failure (including a failed gradient check).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use reinrec::harness::{self, ExperimentConfig};
use reinrec::policy::{ServeMode, TensorId};
use reinrec::{Error, Result};

#[derive(Parser)]
#[command(name = "reinrec", version, about = "Off-policy corrected REINFORCE for recommendation, in simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (flat TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    /// Root for default output paths.
    #[arg(long, env = "REINREC_OUT", default_value = "runs", hide_env_values = true)]
    out_root: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a behavior policy and write a logged dataset.
    GenerateData {
        #[command(flatten)]
        common: Common,
        /// Dataset file to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a policy on a logged dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset produced by `generate-data`.
        #[arg(long)]
        data: PathBuf,
        /// Run directory to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint in the simulator.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated set sizes.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        k: Vec<usize>,
        #[arg(long, value_enum, default_value_t = ModeArg::Both)]
        mode: ModeArg,
        /// Metrics CSV to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One run per value of the config's sweep axis per seed.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients for every mode.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Corrupts one tensor's analytic gradient (checker self-test).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Run the recipe named in the config.
    Recipe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Deterministic,
    Stochastic,
    Both,
}

impl ModeArg {
    fn modes(self) -> Vec<ServeMode> {
        match self {
            ModeArg::Deterministic => vec![ServeMode::Deterministic],
            ModeArg::Stochastic => vec![ServeMode::Stochastic],
            ModeArg::Both => vec![ServeMode::Deterministic, ServeMode::Stochastic],
        }
    }
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        Ok(match self.seed {
            Some(seed) => cfg.with_seed(seed),
            None => cfg,
        })
    }

    fn default_out(&self, cfg: &ExperimentConfig, name: &str) -> PathBuf {
        self.out_root.join(format!("{name}-{}", cfg.hash()))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { common, out } => {
            let cfg = common.load()?;
            let out = out.unwrap_or_else(|| common.default_out(&cfg, "data").with_extension("csv"));
            let s = harness::cmd_generate_data(&cfg, &out, common.force)?;
            println!("wrote {} events in {} trajectories to {}", s.events, s.trajectories, out.display());
        }
        Command::Train { common, data, out } => {
            let cfg = common.load()?;
            let out = out.unwrap_or_else(|| common.default_out(&cfg, "train"));
            let s = harness::cmd_train(&cfg, &data, &out, common.force)?;
            println!(
                "trained {} steps; mean weight variance {:.4}; run in {}",
                s.steps_completed,
                s.mean_weight_var,
                out.display()
            );
        }
        Command::Evaluate {
            common,
            checkpoint,
            k,
            mode,
            out,
        } => {
            let cfg = common.load()?;
            let out = out.unwrap_or_else(|| common.default_out(&cfg, "eval").with_extension("csv"));
            let rows = harness::cmd_evaluate(&cfg, &checkpoint, &k, &mode.modes(), &out, common.force)?;
            for r in &rows {
                let (lo, hi) = r.ci95();
                println!(
                    "{:<13} K={:<3} reward {:.4} (95% CI {:.4} .. {:.4})",
                    r.mode.to_string(),
                    r.k,
                    r.metrics.mean_reward,
                    lo,
                    hi
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Sweep { common, out } => {
            let cfg = common.load()?;
            let out = out.unwrap_or_else(|| common.default_out(&cfg, "sweep"));
            let rows = harness::cmd_sweep(&cfg, &out, common.force)?;
            for r in &rows {
                println!(
                    "{}={:<10} metric {:.5} +/- {:.5} ({} runs)",
                    cfg.sweep_axis.map(|a| a.to_string()).unwrap_or_default(),
                    r.value,
                    r.metric_mean,
                    r.metric_stderr,
                    r.runs
                );
            }
            println!("wrote {}", out.display());
        }
        Command::GradCheck { common, inject_fault } => {
            let cfg = common.load()?;
            let fault = inject_fault
                .map(|name| {
                    TensorId::from_name(&name)
                        .ok_or_else(|| Error::Config(format!("unknown tensor `{name}`")))
                })
                .transpose()?;
            let rows = harness::cmd_grad_check(&cfg, fault)?;
            let mut failed = Vec::new();
            for r in &rows {
                let worst = r.report.worst.as_ref().map(|w| w.tensor.to_string()).unwrap_or_default();
                println!(
                    "{:<9} max_rel_error {:.3e}  worst {:<4} {}",
                    r.mode.to_string(),
                    r.report.max_rel_error,
                    worst,
                    if r.passed { "PASS" } else { "FAIL" }
                );
                if !r.passed {
                    let tensors: Vec<String> = r
                        .report
                        .failing_tensors(cfg.grad_check_tolerance)
                        .iter()
                        .map(|t| t.to_string())
                        .collect();
                    failed.push(format!("{}: {}", r.mode, tensors.join(", ")));
                }
            }
            if !failed.is_empty() {
                return Err(Error::NumericalFailure {
                    tensor: failed.join("; "),
                    detail: format!("gradient check above tolerance {}", cfg.grad_check_tolerance),
                });
            }
        }
        Command::Recipe { common, out } => {
            let cfg = common.load()?;
            let out = out.unwrap_or_else(|| common.default_out(&cfg, "recipe"));
            let summary = harness::cmd_recipe(&cfg, &out, common.force)?;
            println!("{summary}");
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
