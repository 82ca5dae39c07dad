//! Policy and value update rules: TRPO, PPO, ESPO and their sample-dropout variants.

mod adam;
mod config;
mod first_order;
mod trpo;
mod value;

pub use adam::Adam;
pub use config::{learning_rate, Algo, AlgoConfig, LrDecay};
pub use first_order::{espo_update, ppo_loss, ppo_update};
pub use trpo::{conjugate_gradient, trpo_update};
pub use value::{value_loss_and_gradient, value_update};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Action, Mlp, MlpSpec, ParamVector, Policy, PolicySpec};
use crate::diff::policy::{HIDDEN_GAIN, VALUE_OUTPUT_GAIN};
use crate::error::{Error, Result};
use crate::estimation::Batch;

/// Samples consumed by one update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateData {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
    pub log_prob_old: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl UpdateData {
    pub fn new(
        states: Vec<Vec<f64>>,
        actions: Vec<Action>,
        log_prob_old: Vec<f64>,
        advantages: Vec<f64>,
        returns: Vec<f64>,
    ) -> Result<Self> {
        let n = states.len();
        if actions.len() != n || log_prob_old.len() != n || advantages.len() != n || returns.len() != n {
            return Err(Error::config("update data arrays must have equal length"));
        }
        Ok(Self {
            states,
            actions,
            log_prob_old,
            advantages,
            returns,
        })
    }

    pub fn from_batch(batch: &Batch) -> Self {
        Self {
            states: batch.states(),
            actions: batch.actions(),
            log_prob_old: batch.log_prob_old(),
            advantages: batch.advantages.clone(),
            returns: batch.returns.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            states: indices.iter().map(|&i| self.states[i].clone()).collect(),
            actions: indices.iter().map(|&i| self.actions[i].clone()).collect(),
            log_prob_old: indices.iter().map(|&i| self.log_prob_old[i]).collect(),
            advantages: indices.iter().map(|&i| self.advantages[i]).collect(),
            returns: indices.iter().map(|&i| self.returns[i]).collect(),
        }
    }
}

/// Ratios, advantages and mask of one optimized minibatch, kept for diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinibatchDump {
    pub epoch: usize,
    pub ratios: Vec<f64>,
    pub advantages: Vec<f64>,
    pub keep: Vec<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    /// Full-batch surrogate mean(r·A) before and after the update.
    pub surrogate_before: f64,
    pub surrogate_after: f64,
    /// Mean KL(old ‖ new) over the batch after the update.
    pub kl_mean: f64,
    pub epochs_run: usize,
    pub early_stopped: bool,
    pub minibatches_skipped: usize,
    pub minibatches_total: usize,
    /// Backtracking steps tried (TRPO).
    pub line_search_steps: usize,
    /// Whether a TRPO step was taken; always true for first-order rules.
    pub accepted: bool,
    /// Full-batch mean |r − 1| at each early-stop check (ESPO).
    pub deviations: Vec<f64>,
    /// Mean value loss over the value steps taken.
    pub value_loss: f64,
    #[serde(skip)]
    pub dumps: Vec<MinibatchDump>,
}

/// Policy and value networks with their optimizer state.
#[derive(Debug, Clone)]
pub struct Learner {
    pub policy: Policy,
    pub params: ParamVector,
    pub value_net: Mlp,
    pub value_params: ParamVector,
    pub policy_adam: Adam,
    pub value_adam: Adam,
}

impl Learner {
    pub fn new<R: Rng + ?Sized>(policy_spec: PolicySpec, value_spec: MlpSpec, rng: &mut R) -> Result<Self> {
        let policy = Policy::new(policy_spec)?;
        if value_spec.output_dim != 1 {
            return Err(Error::config("value network must have a single output"));
        }
        let value_net = Mlp::new(value_spec)?;
        let params = policy.init_params(rng);
        let mut value_params = ParamVector::zeros(&value_net.spec().layout());
        value_params
            .values_mut()
            .copy_from_slice(&value_net.init_params(rng, HIDDEN_GAIN, VALUE_OUTPUT_GAIN));
        Ok(Self::from_parts(policy, params, value_net, value_params))
    }

    pub fn from_parts(policy: Policy, params: ParamVector, value_net: Mlp, value_params: ParamVector) -> Self {
        let policy_adam = Adam::new(params.len());
        let value_adam = Adam::new(value_params.len());
        Self {
            policy,
            params,
            value_net,
            value_params,
            policy_adam,
            value_adam,
        }
    }

    pub fn value(&self, state: &[f64]) -> Result<f64> {
        Ok(self.value_net.forward(self.value_params.values(), state)?[0])
    }

    /// Runs the configured rule. `lr` is the current first-order learning rate.
    /// On error the learner is restored to its state before the call.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        data: &UpdateData,
        config: &AlgoConfig,
        lr: f64,
        rng: &mut R,
    ) -> Result<UpdateReport> {
        let snapshot = self.clone();
        let result = match config.algo {
            Algo::Ppo => ppo_update(self, data, config, lr, rng),
            Algo::Espo => espo_update(self, data, config, lr, rng),
            Algo::Trpo => trpo_update(self, data, config),
        };
        if result.is_err() {
            *self = snapshot;
        }
        result
    }
}

/// Empirical terms of the surrogate-based lower bound on policy improvement for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImprovementTerms {
    /// mean(r·A)
    pub surrogate: f64,
    /// C · mean|r − 1|
    pub correction: f64,
    /// ξγ/(1−γ)
    pub c: f64,
    /// max |A|
    pub xi: f64,
}

pub fn improvement_terms(ratios: &[f64], advantages: &[f64], gamma: f64) -> Result<ImprovementTerms> {
    if ratios.is_empty() || ratios.len() != advantages.len() {
        return Err(Error::input("improvement terms need a non-empty aligned batch"));
    }
    let n = ratios.len() as f64;
    let xi = advantages.iter().fold(0.0_f64, |m, a| m.max(a.abs()));
    let c = xi * gamma / (1.0 - gamma);
    let surrogate = ratios.iter().zip(advantages).map(|(r, a)| r * a).sum::<f64>() / n;
    let deviation = ratios.iter().map(|r| (r - 1.0).abs()).sum::<f64>() / n;
    Ok(ImprovementTerms {
        surrogate,
        correction: c * deviation,
        c,
        xi,
    })
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}
