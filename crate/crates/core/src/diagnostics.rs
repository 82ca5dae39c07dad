//! Importance-sampling variance diagnostics over optimized minibatches.
//!
//! Every JSON-lines record written by the harness is one [`DiagnosticsRecord`]:
//!
//! | field | meaning |
//! |---|---|
//! | `iteration` | outer iteration (0-based) |
//! | `epoch` | epoch within the update (0-based) |
//! | `surrogate_estimate` | mean of r·A over retained samples |
//! | `empirical_variance` | population variance of r·A over retained samples |
//! | `variance_bound` | ξ̂²·mean(r²) − mean(r·A)² over retained samples |
//! | `mean_ratio` | mean ratio over all samples |
//! | `avg_ratio_deviation` | mean \|r − 1\| over all samples |
//! | `ratio_min`, `ratio_max` | ratio extremes over all samples |
//! | `log_ratio_min`, `log_ratio_max` | natural logs of the extremes |
//! | `dropout_fraction` | dropped / total |
//! | `xi` | max \|A\| over retained samples |
//! | `samples`, `kept` | sample counts |
//!
//! Statistics pool every minibatch of the epoch. Epochs whose samples were all dropped
//! report 0 for the retained-sample statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizers::MinibatchDump;

/// Mean and population variance of `rᵢ·Aᵢ`.
pub fn empirical_is_variance(ratios: &[f64], advantages: &[f64]) -> Result<(f64, f64)> {
    check(ratios, advantages, 2)?;
    let n = ratios.len() as f64;
    let products: Vec<f64> = ratios.iter().zip(advantages).map(|(r, a)| r * a).collect();
    let mean = products.iter().sum::<f64>() / n;
    let var = products.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok((mean, var))
}

/// `ξ̂²·mean(r²) − mean(r·A)²` with `ξ̂ = max|Aᵢ|`.
pub fn variance_bound(ratios: &[f64], advantages: &[f64]) -> Result<f64> {
    check(ratios, advantages, 1)?;
    let n = ratios.len() as f64;
    let xi = max_abs(advantages);
    let mean_sq = ratios.iter().map(|r| r * r).sum::<f64>() / n;
    let mean_ra = ratios.iter().zip(advantages).map(|(r, a)| r * a).sum::<f64>() / n;
    Ok(xi * xi * mean_sq - mean_ra * mean_ra)
}

/// `mean |rᵢ − 1|`
pub fn avg_ratio_deviation(ratios: &[f64]) -> Result<f64> {
    nonempty(ratios)?;
    Ok(ratios.iter().map(|r| (r - 1.0).abs()).sum::<f64>() / ratios.len() as f64)
}

/// The mean ratio ω̄.
pub fn mean_ratio(ratios: &[f64]) -> Result<f64> {
    nonempty(ratios)?;
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioRange {
    pub min: f64,
    pub max: f64,
    pub log_min: f64,
    pub log_max: f64,
}

pub fn ratio_range(ratios: &[f64]) -> Result<RatioRange> {
    nonempty(ratios)?;
    let min = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let max = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(RatioRange {
        min,
        max,
        log_min: min.ln(),
        log_max: max.ln(),
    })
}

fn max_abs(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn nonempty(ratios: &[f64]) -> Result<()> {
    if ratios.is_empty() {
        return Err(Error::input("diagnostics need at least one sample"));
    }
    Ok(())
}

fn check(ratios: &[f64], advantages: &[f64], min_len: usize) -> Result<()> {
    if ratios.len() != advantages.len() {
        return Err(Error::input("ratios and advantages differ in length"));
    }
    if ratios.len() < min_len {
        return Err(Error::input(format!("need at least {min_len} samples")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub surrogate_estimate: f64,
    pub empirical_variance: f64,
    pub variance_bound: f64,
    pub mean_ratio: f64,
    pub avg_ratio_deviation: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub log_ratio_min: f64,
    pub log_ratio_max: f64,
    pub dropout_fraction: f64,
    pub xi: f64,
    pub samples: usize,
    pub kept: usize,
}

impl DiagnosticsRecord {
    /// Pools the given minibatches (normally one epoch's worth).
    pub fn from_dumps(iteration: usize, epoch: usize, dumps: &[&MinibatchDump]) -> Result<Self> {
        let mut ratios = Vec::new();
        let mut kept_r = Vec::new();
        let mut kept_a = Vec::new();
        for d in dumps {
            ratios.extend_from_slice(&d.ratios);
            for ((r, a), k) in d.ratios.iter().zip(&d.advantages).zip(&d.keep) {
                if *k {
                    kept_r.push(*r);
                    kept_a.push(*a);
                }
            }
        }
        let range = ratio_range(&ratios)?;
        let (surrogate_estimate, empirical_variance) = match kept_r.len() {
            0 => (0.0, 0.0),
            1 => (kept_r[0] * kept_a[0], 0.0),
            _ => empirical_is_variance(&kept_r, &kept_a)?,
        };
        let bound = if kept_r.is_empty() { 0.0 } else { variance_bound(&kept_r, &kept_a)? };
        Ok(Self {
            iteration,
            epoch,
            surrogate_estimate,
            empirical_variance,
            variance_bound: bound,
            mean_ratio: mean_ratio(&ratios)?,
            avg_ratio_deviation: avg_ratio_deviation(&ratios)?,
            ratio_min: range.min,
            ratio_max: range.max,
            log_ratio_min: range.log_min,
            log_ratio_max: range.log_max,
            dropout_fraction: 1.0 - kept_r.len() as f64 / ratios.len() as f64,
            xi: max_abs(&kept_a),
            samples: ratios.len(),
            kept: kept_r.len(),
        })
    }
}

/// One record per epoch present in `dumps`, in epoch order.
pub fn records_from_dumps(iteration: usize, dumps: &[MinibatchDump]) -> Result<Vec<DiagnosticsRecord>> {
    let mut epochs: Vec<usize> = dumps.iter().map(|d| d.epoch).collect();
    epochs.dedup();
    epochs
        .into_iter()
        .map(|e| {
            let group: Vec<&MinibatchDump> = dumps.iter().filter(|d| d.epoch == e).collect();
            DiagnosticsRecord::from_dumps(iteration, e, &group)
        })
        .collect()
}
