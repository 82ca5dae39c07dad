use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sdpo_core::harness::{self, all_seeds_aborted, parse_assignment, ExperimentConfig, PlotOptions};
use sdpo_core::{verify, Error, Result};

#[derive(Parser)]
#[command(name = "sdpo", version, about = "Policy optimization with sample dropout on toy environments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its logs.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Run one experiment per value of a config key.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Config key to vary.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
    },
    /// Run the built-in oracle and property checks.
    Verify {
        /// Smaller Monte-Carlo sample sizes.
        #[arg(long)]
        quick: bool,
    },
    /// Write the long-format tables behind the comparison figures.
    ExportPlots {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "runs/plots")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Trpo,
    Ppo,
    Espo,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    #[value(name = "two_side")]
    TwoSide,
    Left,
    Right,
    Kl,
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds to run (repeatable or comma-separated); replaces the config's list.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Config override, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, value_enum)]
    algo: Option<AlgoArg>,
    #[arg(long, value_enum)]
    sd: Option<Switch>,
    #[arg(long, value_enum)]
    rule: Option<RuleArg>,
}

impl Common {
    /// File pairs, then `--set`, then the dedicated flags.
    fn pairs(&self) -> Result<Vec<(String, String)>> {
        let mut pairs = match &self.config {
            Some(p) => ExperimentConfig::parse_pairs(&std::fs::read_to_string(p)?)?,
            None => Vec::new(),
        };
        for s in &self.set {
            pairs.push(parse_assignment(s)?);
        }
        let mut push = |k: &str, v: &str| pairs.push((k.to_string(), v.to_string()));
        if let Some(a) = self.algo {
            push(
                "algo",
                match a {
                    AlgoArg::Trpo => "trpo",
                    AlgoArg::Ppo => "ppo",
                    AlgoArg::Espo => "espo",
                },
            );
        }
        if let Some(s) = self.sd {
            push("sd", if matches!(s, Switch::On) { "on" } else { "off" });
        }
        if let Some(r) = self.rule {
            push(
                "rule",
                match r {
                    RuleArg::TwoSide => "two_side",
                    RuleArg::Left => "left",
                    RuleArg::Right => "right",
                    RuleArg::Kl => "kl",
                },
            );
        }
        if !self.seed.is_empty() {
            let seeds: Vec<String> = self.seed.iter().map(u64::to_string).collect();
            push("seeds", &seeds.join(","));
        }
        Ok(pairs)
    }

    fn config(&self) -> Result<ExperimentConfig> {
        let cfg = ExperimentConfig::from_pairs(&self.pairs()?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn execute(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run { common, out } => {
            let cfg = common.config()?;
            let logs = harness::run_experiment(&cfg, Some(&out))?;
            for log in &logs {
                let last = log.final_row();
                println!(
                    "seed {}: iterations {}, final exact_return {}, final eval_return {}, numerical aborts {}",
                    log.seed,
                    log.rows.len(),
                    fmt_opt(last.and_then(|r| r.exact_return)),
                    fmt_opt(last.and_then(|r| r.eval_return)),
                    log.numerical_aborts
                );
            }
            println!("logs written to {}", out.display());
            Ok(if all_seeds_aborted(&logs) {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            })
        }
        Command::Sweep {
            common,
            param,
            values,
            out,
        } => {
            let cfg = common.config()?;
            let table = harness::sweep(&cfg, &param, &values, Some(&out))?;
            println!("{} rows written to {}", table.len(), out.join("sweep.csv").display());
            let aborted = !table.is_empty() && table.iter().all(|r| r.status != "ok");
            Ok(if aborted { ExitCode::from(2) } else { ExitCode::SUCCESS })
        }
        Command::Verify { quick } => {
            let checks = verify::run_checks(quick);
            let mut failed = 0;
            for c in &checks {
                println!("{} {:<40} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            println!("{} of {} checks passed", checks.len() - failed, checks.len());
            Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::ExportPlots { common, out } => {
            let pairs = common.pairs()?;
            harness::export_plots(&pairs, &out, &PlotOptions::default())?;
            println!("figure tables written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("SDPO_LOG_LEVEL", "warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numerical { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
