use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::DropoutRule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Trpo,
    Ppo,
    Espo,
}

impl Algo {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "trpo" => Ok(Algo::Trpo),
            "ppo" => Ok(Algo::Ppo),
            "espo" => Ok(Algo::Espo),
            other => Err(Error::config(format!("unknown algorithm '{other}' (trpo, ppo, espo)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Algo::Trpo => "trpo",
            Algo::Ppo => "ppo",
            Algo::Espo => "espo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrDecay {
    Linear,
    None,
}

impl LrDecay {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(LrDecay::Linear),
            "none" | "constant" => Ok(LrDecay::None),
            other => Err(Error::config(format!("unknown lr decay '{other}' (linear, none)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LrDecay::Linear => "linear",
            LrDecay::None => "none",
        }
    }
}

/// Learning rate for `iteration` (0-based) of `total_iterations`; linear decay reaches 0
/// exactly at `iteration == total_iterations`.
pub fn learning_rate(initial: f64, decay: LrDecay, iteration: usize, total_iterations: usize) -> f64 {
    match decay {
        LrDecay::None => initial,
        LrDecay::Linear => {
            if total_iterations == 0 || iteration >= total_iterations {
                0.0
            } else {
                initial * (1.0 - iteration as f64 / total_iterations as f64)
            }
        }
    }
}

/// Update-rule settings. [`AlgoConfig::defaults`] fills in the MuJoCo column of the
/// published hyperparameter tables for each algorithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgoConfig {
    pub algo: Algo,
    /// Enables sample dropout (the SD- variant).
    pub sd: bool,
    pub rule: DropoutRule,
    /// PPO clip range ε.
    pub epsilon: f64,
    /// TRPO KL radius ρ_tr.
    pub rho_tr: f64,
    /// ESPO early-stop threshold δ_es on the batch-mean ratio deviation.
    pub delta_es: f64,
    /// Epochs K.
    pub epochs: usize,
    /// Minibatch size L.
    pub minibatch: usize,
    /// Batch size N.
    pub batch: usize,
    pub lr: f64,
    pub lr_decay: LrDecay,
    pub gamma: f64,
    pub lambda: f64,
    pub cg_iters: usize,
    pub damping: f64,
    pub backtrack_coef: f64,
    pub backtrack_iters: usize,
    /// Full-batch value iterations after each TRPO step.
    pub value_iters: usize,
    /// TRPO value learning rate (PPO/ESPO share the policy schedule).
    pub value_lr: f64,
}

impl AlgoConfig {
    pub fn defaults(algo: Algo) -> Self {
        let base = Self {
            algo,
            sd: false,
            rule: DropoutRule::two_side(1.0).expect("positive"),
            epsilon: 0.2,
            rho_tr: 0.001,
            delta_es: 0.25,
            epochs: 10,
            minibatch: 512,
            batch: 2048,
            lr: 3e-4,
            lr_decay: LrDecay::Linear,
            gamma: 0.99,
            lambda: 0.95,
            cg_iters: 10,
            damping: 0.1,
            backtrack_coef: 0.8,
            backtrack_iters: 10,
            value_iters: 80,
            value_lr: 1e-3,
        };
        match algo {
            Algo::Ppo => base,
            Algo::Espo => Self {
                minibatch: 64,
                rule: DropoutRule::two_side(0.25).expect("positive"),
                ..base
            },
            Algo::Trpo => Self {
                batch: 4000,
                minibatch: 4000,
                epochs: 1,
                lambda: 0.97,
                rule: DropoutRule::kl(0.001).expect("positive"),
                ..base
            },
        }
    }

    /// The dropout rule when sample dropout is enabled.
    pub fn sd_rule(&self) -> Option<DropoutRule> {
        self.sd.then_some(self.rule)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v > 0.0 && !v.is_nan() {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be > 0, got {v}")))
            }
        };
        match self.algo {
            Algo::Ppo => positive(self.epsilon, "epsilon")?,
            Algo::Trpo => {
                positive(self.rho_tr, "rho_tr")?;
                positive(self.damping, "damping")?;
                if !(0.0..1.0).contains(&self.backtrack_coef) || self.backtrack_coef == 0.0 {
                    return Err(Error::config("backtrack_coef must lie in (0, 1)"));
                }
                if self.cg_iters == 0 {
                    return Err(Error::config("cg_iters must be >= 1"));
                }
            }
            Algo::Espo => positive(self.delta_es, "delta_es")?,
        }
        if self.batch == 0 || self.minibatch == 0 || self.epochs == 0 {
            return Err(Error::config("batch, minibatch and epochs must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("gamma and lambda must lie in [0, 1]"));
        }
        if self.lr < 0.0 || self.value_lr < 0.0 || !self.lr.is_finite() || !self.value_lr.is_finite() {
            return Err(Error::config("learning rates must be finite and >= 0"));
        }
        Ok(())
    }
}
