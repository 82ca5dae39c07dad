use crate::diff::ParamVector;
use crate::error::{Error, Result};

const CLIP: f64 = 10.0;
const VAR_EPS: f64 = 1e-8;

/// Running mean and variance of a vector stream (parallel-update form).
#[derive(Debug, Clone, PartialEq)]
pub struct RunningNorm {
    mean: Vec<f64>,
    var: Vec<f64>,
    count: f64,
}

impl RunningNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            count: 1e-4,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    pub fn count(&self) -> f64 {
        self.count
    }

    pub fn update(&mut self, x: &[f64]) {
        let total = self.count + 1.0;
        for ((m, v), xi) in self.mean.iter_mut().zip(&mut self.var).zip(x) {
            let delta = xi - *m;
            let m2 = *v * self.count + delta * delta * self.count / total;
            *m += delta / total;
            *v = m2 / total;
        }
        self.count = total;
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.var)
            .map(|((xi, m), v)| ((xi - m) / (v + VAR_EPS).sqrt()).clamp(-CLIP, CLIP))
            .collect()
    }

    /// Segments `{prefix}.mean`, `{prefix}.var`, `{prefix}.count`.
    pub fn to_params(&self, prefix: &str) -> ParamVector {
        let d = self.dim();
        let mut pv = ParamVector::zeros(&[
            (format!("{prefix}.mean"), d),
            (format!("{prefix}.var"), d),
            (format!("{prefix}.count"), 1),
        ]);
        let v = pv.values_mut();
        v[..d].copy_from_slice(&self.mean);
        v[d..2 * d].copy_from_slice(&self.var);
        v[2 * d] = self.count;
        pv
    }

    pub fn from_params(pv: &ParamVector, prefix: &str) -> Result<Self> {
        let get = |suffix: &str| {
            pv.segment(&format!("{prefix}.{suffix}"))
                .ok_or_else(|| Error::parse(format!("checkpoint lacks {prefix}.{suffix}")))
        };
        let mean = get("mean")?.to_vec();
        let var = get("var")?.to_vec();
        let count = get("count")?;
        if mean.len() != var.len() || count.len() != 1 {
            return Err(Error::parse("inconsistent normalizer segments"));
        }
        Ok(Self {
            mean,
            var,
            count: count[0],
        })
    }
}

/// Scales rewards by the running standard deviation of the discounted return.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardScaler {
    gamma: f64,
    ret: f64,
    stats: RunningNorm,
}

impl RewardScaler {
    pub fn new(gamma: f64) -> Self {
        Self {
            gamma,
            ret: 0.0,
            stats: RunningNorm::new(1),
        }
    }

    /// Scaled reward; `episode_end` resets the running return after this step.
    pub fn scale(&mut self, reward: f64, episode_end: bool) -> f64 {
        self.ret = self.ret * self.gamma + reward;
        self.stats.update(&[self.ret]);
        let scaled = (reward / (self.stats.var[0] + VAR_EPS).sqrt()).clamp(-CLIP, CLIP);
        if episode_end {
            self.ret = 0.0;
        }
        scaled
    }
}
