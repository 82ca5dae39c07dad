//! Long-format tables behind the comparison figures.
//!
//! Each file has columns `variant, seed, iteration, env_steps, metric, value`:
//!
//! - `variance.csv`: ESPO vs SD-ESPO, `empirical_variance` and `avg_ratio_deviation`
//! - `ratio_range.csv`: all six algorithms, `log_ratio_min` and `log_ratio_max`
//! - `one_side.csv`: SD-PPO and SD-ESPO with two-side, left and right rules, `return`,
//!   `empirical_variance`, `ratio_min`, `ratio_max`
//! - `threshold.csv`: SD-PPO and SD-ESPO over a grid of thresholds, `return`
//!
//! `return` is the exact return on tabular environments and the training return elsewhere.

use std::path::Path;

use serde::Serialize;

use super::{run_experiment, write_csv, ExperimentConfig, LogRow};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct PlotOptions {
    pub ppo_deltas: Vec<f64>,
    pub espo_deltas: Vec<f64>,
}

impl Default for PlotOptions {
    fn default() -> Self {
        Self {
            ppo_deltas: vec![0.5, 1.0, 2.0],
            espo_deltas: vec![0.1, 0.25, 0.5],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct PlotRow {
    variant: String,
    seed: u64,
    iteration: usize,
    env_steps: usize,
    metric: &'static str,
    value: Option<f64>,
}

type Metric = (&'static str, fn(&LogRow) -> Option<f64>);

fn return_of(r: &LogRow) -> Option<f64> {
    r.exact_return.or(r.train_return)
}

fn run_variant(
    base: &[(String, String)],
    name: &str,
    overrides: &[(&str, String)],
    metrics: &[Metric],
    table: &mut Vec<PlotRow>,
) -> Result<()> {
    let mut pairs = base.to_vec();
    pairs.extend(overrides.iter().map(|(k, v)| (k.to_string(), v.clone())));
    let cfg = ExperimentConfig::from_pairs(&pairs)?;
    cfg.validate()?;
    log::info!("export-plots: running {name}");
    for log in run_experiment(&cfg, None)? {
        for row in &log.rows {
            for (metric, get) in metrics {
                table.push(PlotRow {
                    variant: name.to_string(),
                    seed: log.seed,
                    iteration: row.iteration,
                    env_steps: row.env_steps,
                    metric,
                    value: get(row),
                });
            }
        }
    }
    Ok(())
}

/// Runs the figure variants and writes one table per figure into `out`. Each variant is
/// built from `base` (config pairs as read from a file plus overrides) with the variant's
/// algorithm, dropout switch and rule applied last, so per-algorithm defaults still hold
/// for keys `base` leaves unset.
pub fn export_plots(base: &[(String, String)], out: &Path, options: &PlotOptions) -> Result<()> {
    ExperimentConfig::from_pairs(base)?.validate()?;
    std::fs::create_dir_all(out)?;
    let algo_with = |algo: &str, sd: bool| vec![("algo", algo.to_string()), ("sd", if sd { "on" } else { "off" }.to_string())];

    let mut variance_rows = Vec::new();
    let variance: [Metric; 2] = [
        ("empirical_variance", |r| r.empirical_variance),
        ("avg_ratio_deviation", |r| r.avg_ratio_deviation),
    ];
    for (name, sd) in [("ESPO", false), ("SD-ESPO", true)] {
        run_variant(base, name, &algo_with("espo", sd), &variance, &mut variance_rows)?;
    }
    write_csv(&out.join("variance.csv"), &variance_rows)?;

    let mut range_rows = Vec::new();
    let range: [Metric; 2] = [
        ("log_ratio_min", |r| r.ratio_min.map(f64::ln)),
        ("log_ratio_max", |r| r.ratio_max.map(f64::ln)),
    ];
    for algo in ["trpo", "ppo", "espo"] {
        for sd in [false, true] {
            let name = format!("{}{}", if sd { "SD-" } else { "" }, algo.to_uppercase());
            run_variant(base, &name, &algo_with(algo, sd), &range, &mut range_rows)?;
        }
    }
    write_csv(&out.join("ratio_range.csv"), &range_rows)?;

    let mut one_side_rows = Vec::new();
    let one_side: [Metric; 4] = [
        ("return", return_of),
        ("empirical_variance", |r| r.empirical_variance),
        ("ratio_min", |r| r.ratio_min),
        ("ratio_max", |r| r.ratio_max),
    ];
    for algo in ["ppo", "espo"] {
        for (rule, label) in [("two_side", ""), ("left", "LSD-"), ("right", "RSD-")] {
            let name = if label.is_empty() {
                format!("SD-{}", algo.to_uppercase())
            } else {
                format!("{label}{}", algo.to_uppercase())
            };
            let mut o = algo_with(algo, true);
            o.push(("rule", rule.to_string()));
            run_variant(base, &name, &o, &one_side, &mut one_side_rows)?;
        }
    }
    write_csv(&out.join("one_side.csv"), &one_side_rows)?;

    let mut threshold_rows = Vec::new();
    let ret: [Metric; 1] = [("return", return_of)];
    for (algo, deltas) in [("ppo", &options.ppo_deltas), ("espo", &options.espo_deltas)] {
        run_variant(base, &algo.to_uppercase(), &algo_with(algo, false), &ret, &mut threshold_rows)?;
        for d in deltas {
            let mut o = algo_with(algo, true);
            o.push(("rule", "two_side".into()));
            o.push(("delta", d.to_string()));
            run_variant(base, &format!("SD-{} delta={d}", algo.to_uppercase()), &o, &ret, &mut threshold_rows)?;
        }
    }
    write_csv(&out.join("threshold.csv"), &threshold_rows)?;
    Ok(())
}
