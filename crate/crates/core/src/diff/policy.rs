//! Stochastic policy heads on top of an [`Mlp`] backbone.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::mlp::{Mlp, MlpSpec};
use super::params::ParamVector;

pub const LOG_STD_SEGMENT: &str = "log_std";

/// Gain for hidden layers at initialization.
pub const HIDDEN_GAIN: f64 = 1.0;
/// Gain for the policy output layer; keeps the initial policy close to uniform.
pub const POLICY_OUTPUT_GAIN: f64 = 0.01;
pub const VALUE_OUTPUT_GAIN: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Categorical { action_count: usize },
    DiagGaussian { action_dim: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    pub backbone: MlpSpec,
}

impl PolicySpec {
    pub fn categorical(obs_dim: usize, hidden: Vec<usize>, action_count: usize) -> Self {
        Self {
            kind: PolicyKind::Categorical { action_count },
            backbone: MlpSpec::new(obs_dim, hidden, action_count),
        }
    }

    pub fn gaussian(obs_dim: usize, hidden: Vec<usize>, action_dim: usize) -> Self {
        Self {
            kind: PolicyKind::DiagGaussian { action_dim },
            backbone: MlpSpec::new(obs_dim, hidden, action_dim),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let want = match self.kind {
            PolicyKind::Categorical { action_count } => action_count,
            PolicyKind::DiagGaussian { action_dim } => action_dim,
        };
        if want == 0 || self.backbone.output_dim != want {
            return Err(Error::config(format!(
                "policy head needs backbone output {want}, got {}",
                self.backbone.output_dim
            )));
        }
        Ok(())
    }

    /// Backbone layout followed by the gaussian log-std vector, if any.
    pub fn layout(&self) -> Vec<(String, usize)> {
        let mut layout = self.backbone.layout();
        if let PolicyKind::DiagGaussian { action_dim } = self.kind {
            layout.push((LOG_STD_SEGMENT.to_string(), action_dim));
        }
        layout
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

/// Per-state distribution parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum DistributionParams {
    Categorical { logits: Vec<f64> },
    Gaussian { mean: Vec<f64>, log_std: Vec<f64> },
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

impl DistributionParams {
    pub fn probs(&self) -> Option<Vec<f64>> {
        match self {
            DistributionParams::Categorical { logits } => Some(softmax(logits)),
            DistributionParams::Gaussian { .. } => None,
        }
    }

    pub fn log_prob(&self, action: &Action) -> Result<f64> {
        match (self, action) {
            (DistributionParams::Categorical { logits }, Action::Discrete(a)) => {
                if *a >= logits.len() {
                    return Err(Error::input(format!(
                        "action {a} out of range for {} actions",
                        logits.len()
                    )));
                }
                Ok(log_softmax(logits)[*a])
            }
            (DistributionParams::Gaussian { mean, log_std }, Action::Continuous(x)) => {
                if x.len() != mean.len() {
                    return Err(Error::input(format!(
                        "action has dim {}, policy expects {}",
                        x.len(),
                        mean.len()
                    )));
                }
                Ok(mean
                    .iter()
                    .zip(log_std)
                    .zip(x)
                    .map(|((m, s), a)| {
                        let z = (a - m) * (-s).exp();
                        -0.5 * z * z - s - HALF_LN_2PI
                    })
                    .sum())
            }
            _ => Err(Error::input("action kind does not match policy kind")),
        }
    }

    /// `KL(self ‖ other)` in closed form.
    pub fn kl(&self, other: &DistributionParams) -> Result<f64> {
        match (self, other) {
            (
                DistributionParams::Categorical { logits: p },
                DistributionParams::Categorical { logits: q },
            ) if p.len() == q.len() => {
                let lp = log_softmax(p);
                let lq = log_softmax(q);
                Ok(lp
                    .iter()
                    .zip(&lq)
                    .map(|(a, b)| a.exp() * (a - b))
                    .sum::<f64>()
                    .max(0.0))
            }
            (
                DistributionParams::Gaussian { mean: m0, log_std: s0 },
                DistributionParams::Gaussian { mean: m1, log_std: s1 },
            ) if m0.len() == m1.len() => Ok(m0
                .iter()
                .zip(s0)
                .zip(m1.iter().zip(s1))
                .map(|((m0, s0), (m1, s1))| gaussian_kl_1d(*m0, *s0, *m1, *s1))
                .sum::<f64>()
                .max(0.0)),
            _ => Err(Error::config("KL between mismatched distributions")),
        }
    }

    pub fn entropy(&self) -> f64 {
        match self {
            DistributionParams::Categorical { logits } => {
                let lp = log_softmax(logits);
                -lp.iter().map(|l| l.exp() * l).sum::<f64>()
            }
            DistributionParams::Gaussian { log_std, .. } => log_std
                .iter()
                .map(|s| s + 0.5 * (2.0 * PI * std::f64::consts::E).ln())
                .sum(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Action {
        match self {
            DistributionParams::Categorical { logits } => {
                let probs = softmax(logits);
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return Action::Discrete(i);
                    }
                }
                Action::Discrete(probs.len() - 1)
            }
            DistributionParams::Gaussian { mean, log_std } => Action::Continuous(
                mean.iter()
                    .zip(log_std)
                    .map(|(m, s)| {
                        let eps: f64 = rng.sample(StandardNormal);
                        m + s.exp() * eps
                    })
                    .collect(),
            ),
        }
    }

    /// Most likely action.
    pub fn mode(&self) -> Action {
        match self {
            DistributionParams::Categorical { logits } => {
                let mut best = 0;
                for (i, l) in logits.iter().enumerate() {
                    if *l > logits[best] {
                        best = i;
                    }
                }
                Action::Discrete(best)
            }
            DistributionParams::Gaussian { mean, .. } => Action::Continuous(mean.clone()),
        }
    }
}

/// `KL(N(m0, e^{s0}) ‖ N(m1, e^{s1}))`.
pub(crate) fn gaussian_kl_1d(m0: f64, s0: f64, m1: f64, s1: f64) -> f64 {
    let d = m0 - m1;
    s1 - s0 + ((2.0 * s0).exp() + d * d) / (2.0 * (2.0 * s1).exp()) - 0.5
}

/// A [`PolicySpec`] bound to its backbone network.
#[derive(Debug, Clone)]
pub struct Policy {
    spec: PolicySpec,
    net: Mlp,
}

impl Policy {
    pub fn new(spec: PolicySpec) -> Result<Self> {
        spec.validate()?;
        let net = Mlp::new(spec.backbone.clone())?;
        Ok(Self { spec, net })
    }

    pub fn spec(&self) -> &PolicySpec {
        &self.spec
    }

    pub fn kind(&self) -> PolicyKind {
        self.spec.kind
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn obs_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count() + self.extra_dim()
    }

    /// Number of head parameters outside the backbone (gaussian log-std).
    pub fn extra_dim(&self) -> usize {
        match self.spec.kind {
            PolicyKind::Categorical { .. } => 0,
            PolicyKind::DiagGaussian { action_dim } => action_dim,
        }
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector::zeros(&self.spec.layout())
    }

    /// Orthogonal backbone initialization and zero log-std.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut params = self.zeros();
        let backbone = self.net.init_params(rng, HIDDEN_GAIN, POLICY_OUTPUT_GAIN);
        params.values_mut()[..backbone.len()].copy_from_slice(&backbone);
        params
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::config(format!(
                "policy needs {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        Ok(())
    }

    /// Builds distribution parameters from a raw backbone output and the head parameters.
    pub fn head(&self, output: Vec<f64>, params: &[f64]) -> DistributionParams {
        match self.spec.kind {
            PolicyKind::Categorical { .. } => DistributionParams::Categorical { logits: output },
            PolicyKind::DiagGaussian { action_dim } => {
                let start = self.net.param_count();
                DistributionParams::Gaussian {
                    mean: output,
                    log_std: params[start..start + action_dim].to_vec(),
                }
            }
        }
    }

    pub fn distribution(&self, params: &ParamVector, state: &[f64]) -> Result<DistributionParams> {
        self.check_params(params)?;
        let out = self.net.forward(params.values(), state)?;
        Ok(self.head(out, params.values()))
    }

    pub fn log_prob(&self, params: &ParamVector, state: &[f64], action: &Action) -> Result<f64> {
        self.distribution(params, state)?.log_prob(action)
    }

    /// `KL(π_old(·|s) ‖ π_new(·|s))`.
    pub fn kl_divergence(
        &self,
        params_old: &ParamVector,
        params_new: &ParamVector,
        state: &[f64],
    ) -> Result<f64> {
        let old = self.distribution(params_old, state)?;
        let new = self.distribution(params_new, state)?;
        old.kl(&new)
    }

    /// Validates that `action` fits this policy.
    pub fn check_action(&self, action: &Action) -> Result<()> {
        match (self.spec.kind, action) {
            (PolicyKind::Categorical { action_count }, Action::Discrete(a)) if *a < action_count => {
                Ok(())
            }
            (PolicyKind::DiagGaussian { action_dim }, Action::Continuous(x))
                if x.len() == action_dim =>
            {
                Ok(())
            }
            _ => Err(Error::input(format!("invalid action {action:?} for policy"))),
        }
    }
}

pub fn log_prob(
    policy: &PolicySpec,
    params: &ParamVector,
    state: &[f64],
    action: &Action,
) -> Result<f64> {
    Policy::new(policy.clone())?.log_prob(params, state, action)
}

pub fn kl_divergence(
    policy: &PolicySpec,
    params_old: &ParamVector,
    params_new: &ParamVector,
    state: &[f64],
) -> Result<f64> {
    Policy::new(policy.clone())?.kl_divergence(params_old, params_new, state)
}
