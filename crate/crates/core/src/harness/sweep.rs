use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{run_experiment, write_csv, ExperimentConfig, CONFIG_KEYS};
use crate::error::{Error, Result};

/// One row of the long-format sweep table, keyed by (value, seed, iteration).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: String,
    pub seed: u64,
    pub iteration: usize,
    pub env_steps: usize,
    pub status: String,
    pub train_return: Option<f64>,
    pub eval_return: Option<f64>,
    pub exact_return: Option<f64>,
    pub empirical_variance: Option<f64>,
    pub avg_ratio_deviation: Option<f64>,
    pub dropout_fraction: Option<f64>,
    pub log_ratio_min: Option<f64>,
    pub log_ratio_max: Option<f64>,
}

/// Runs `config` once per value of `parameter`. With `out`, each value gets its own run
/// directory `<parameter>=<value>/` and the table is written to `sweep.csv`.
pub fn sweep(config: &ExperimentConfig, parameter: &str, values: &[String], out: Option<&Path>) -> Result<Vec<SweepRow>> {
    if !CONFIG_KEYS.contains(&parameter) {
        return Err(Error::config(format!("unknown sweep parameter '{parameter}'")));
    }
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    let configs = values
        .iter()
        .map(|v| {
            let mut c = config.clone();
            c.set(parameter, v)?;
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = Vec::new();
    for (value, cfg) in values.iter().zip(&configs) {
        let dir = out.map(|o| o.join(format!("{parameter}={value}")));
        for log in run_experiment(cfg, dir.as_deref())? {
            table.extend(log.rows.iter().map(|r| SweepRow {
                parameter: parameter.to_string(),
                value: value.clone(),
                seed: log.seed,
                iteration: r.iteration,
                env_steps: r.env_steps,
                status: r.status.clone(),
                train_return: r.train_return,
                eval_return: r.eval_return,
                exact_return: r.exact_return,
                empirical_variance: r.empirical_variance,
                avg_ratio_deviation: r.avg_ratio_deviation,
                dropout_fraction: r.dropout_fraction,
                log_ratio_min: r.ratio_min.map(f64::ln),
                log_ratio_max: r.ratio_max.map(f64::ln),
            }));
        }
    }
    if let Some(o) = out {
        std::fs::create_dir_all(o)?;
        write_csv(&o.join("sweep.csv"), &table)?;
    }
    Ok(table)
}
