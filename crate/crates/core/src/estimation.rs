//! Per-batch quantities between rollout and optimization: advantages, returns,
//! importance ratios and sample-dropout masks.

use serde::{Deserialize, Serialize};

use crate::diff::{Action, DistributionParams, Mlp, ParamVector, Policy};
use crate::envs::Transition;
use crate::error::{Error, Result};

/// Generalized advantage estimates.
///
/// `values` holds `V(s_0) … V(s_{n-1})` plus one trailing bootstrap value for the state that
/// follows the final step. A `done` step neither bootstraps nor propagates later residuals.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    let n = rewards.len();
    if values.len() != n + 1 || dones.len() != n {
        return Err(Error::config(format!(
            "gae needs n rewards, n dones and n+1 values (got {}, {}, {})",
            n,
            dones.len(),
            values.len()
        )));
    }
    gae_with_bootstrap(
        rewards,
        &values[..n],
        &values[1..],
        dones,
        dones,
        gamma,
        lambda,
    )
}

/// GAE with separate bootstrap values and termination/truncation flags.
///
/// `δ_t = r_t + γ·V(s'_t)·(1 − terminated_t) − V(s_t)` and
/// `A_t = δ_t + γλ·(1 − episode_end_t)·A_{t+1}`.
pub fn gae_with_bootstrap(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    terminated: &[bool],
    episode_end: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>> {
    let n = rewards.len();
    if [values.len(), next_values.len(), terminated.len(), episode_end.len()]
        .iter()
        .any(|&l| l != n)
    {
        return Err(Error::config("gae inputs must have equal length"));
    }
    if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config("gamma and lambda must lie in [0, 1]"));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let bootstrap = if terminated[t] { 0.0 } else { next_values[t] };
        let delta = rewards[t] + gamma * bootstrap - values[t];
        let carry = if episode_end[t] { 0.0 } else { next_adv };
        adv[t] = delta + gamma * lambda * carry;
        next_adv = adv[t];
    }
    Ok(adv)
}

const ADV_EPS: f64 = 1e-8;

/// `(a − mean) / (std + 1e-8)` with population statistics over the whole slice.
pub fn normalize_advantages(advantages: &[f64]) -> Result<Vec<f64>> {
    let n = advantages.len();
    if n < 2 {
        return Err(Error::input("advantage normalization needs at least 2 samples"));
    }
    let mean = advantages.iter().sum::<f64>() / n as f64;
    let var = advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    Ok(advantages.iter().map(|a| (a - mean) / (std + ADV_EPS)).collect())
}

/// Importance ratios `π_θ(a|s) / π_old(a|s)` from stored old log-probabilities.
pub fn ratios(
    policy: &Policy,
    params: &ParamVector,
    states: &[Vec<f64>],
    actions: &[Action],
    log_prob_old: &[f64],
) -> Result<Vec<f64>> {
    if states.len() != actions.len() || actions.len() != log_prob_old.len() {
        return Err(Error::config("ratio inputs must have equal length"));
    }
    states
        .iter()
        .zip(actions)
        .zip(log_prob_old)
        .enumerate()
        .map(|(i, ((s, a), lp_old))| {
            let lp = policy.log_prob(params, s, a)?;
            let r = (lp - lp_old).exp();
            if r.is_finite() {
                Ok(r)
            } else {
                Err(Error::numerical(i, format!("non-finite ratio (log π = {lp}, old = {lp_old})")))
            }
        })
        .collect()
}

/// Per-sample distribution parameters under `params`.
pub fn distributions(
    policy: &Policy,
    params: &ParamVector,
    states: &[Vec<f64>],
) -> Result<Vec<DistributionParams>> {
    states.iter().map(|s| policy.distribution(params, s)).collect()
}

/// Per-state `KL(old ‖ new)` for precomputed old distributions.
pub fn kl_per_sample(
    policy: &Policy,
    params_new: &ParamVector,
    states: &[Vec<f64>],
    old: &[DistributionParams],
) -> Result<Vec<f64>> {
    states
        .iter()
        .zip(old)
        .map(|(s, o)| o.kl(&policy.distribution(params_new, s)?))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    TwoSide,
    LeftSide,
    RightSide,
    Kl,
}

impl DropoutMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "two_side" => Ok(DropoutMode::TwoSide),
            "left" | "left_side" => Ok(DropoutMode::LeftSide),
            "right" | "right_side" => Ok(DropoutMode::RightSide),
            "kl" => Ok(DropoutMode::Kl),
            other => Err(Error::config(format!(
                "unknown dropout rule '{other}' (two_side, left, right, kl)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DropoutMode::TwoSide => "two_side",
            DropoutMode::LeftSide => "left",
            DropoutMode::RightSide => "right",
            DropoutMode::Kl => "kl",
        }
    }
}

/// Sample-dropout indicator. Ratio modes use `threshold` as δ, KL mode as ρ.
/// Retention is strict: a sample exactly at the threshold is dropped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutRule {
    mode: DropoutMode,
    threshold: f64,
}

impl DropoutRule {
    pub fn new(mode: DropoutMode, threshold: f64) -> Result<Self> {
        if threshold.is_nan() || threshold <= 0.0 {
            return Err(Error::config(format!(
                "dropout threshold must be > 0, got {threshold}"
            )));
        }
        Ok(Self { mode, threshold })
    }

    pub fn two_side(delta: f64) -> Result<Self> {
        Self::new(DropoutMode::TwoSide, delta)
    }

    pub fn kl(rho: f64) -> Result<Self> {
        Self::new(DropoutMode::Kl, rho)
    }

    pub fn mode(&self) -> DropoutMode {
        self.mode
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn needs_kl(&self) -> bool {
        self.mode == DropoutMode::Kl
    }

    /// Whether one sample is retained.
    pub fn keeps(&self, ratio: f64, kl: f64) -> bool {
        let d = self.threshold;
        match self.mode {
            DropoutMode::TwoSide => (ratio - 1.0).abs() < d,
            DropoutMode::LeftSide => 1.0 - ratio < d,
            DropoutMode::RightSide => ratio - 1.0 < d,
            DropoutMode::Kl => kl < d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropoutMask {
    pub keep: Vec<bool>,
    pub kept_count: usize,
    pub dropout_fraction: f64,
}

impl DropoutMask {
    pub fn from_keep(keep: Vec<bool>) -> Self {
        let kept_count = keep.iter().filter(|k| **k).count();
        let dropout_fraction = if keep.is_empty() {
            0.0
        } else {
            1.0 - kept_count as f64 / keep.len() as f64
        };
        Self {
            keep,
            kept_count,
            dropout_fraction,
        }
    }

    pub fn all(n: usize) -> Self {
        Self::from_keep(vec![true; n])
    }

    pub fn is_empty(&self) -> bool {
        self.kept_count == 0
    }
}

/// Applies `rule` to every sample. KL mode requires `kl_per_sample`.
pub fn dropout_mask(
    rule: &DropoutRule,
    ratios: &[f64],
    kl_per_sample: Option<&[f64]>,
) -> Result<DropoutMask> {
    let keep = if rule.needs_kl() {
        let kl = kl_per_sample.ok_or_else(|| Error::config("KL dropout needs per-sample KL"))?;
        if kl.len() != ratios.len() {
            return Err(Error::config("KL and ratio arrays differ in length"));
        }
        kl.iter().map(|k| rule.keeps(f64::NAN, *k)).collect()
    } else {
        ratios.iter().map(|r| rule.keeps(*r, f64::NAN)).collect()
    };
    Ok(DropoutMask::from_keep(keep))
}

/// Rollout data with value-based targets.
#[derive(Debug, Clone)]
pub struct Batch {
    pub transitions: Vec<Transition>,
    /// Advantage estimates (normalized when requested at build time).
    pub advantages: Vec<f64>,
    /// Value targets `A + V(s)` computed from unnormalized advantages.
    pub returns: Vec<f64>,
    pub values_old: Vec<f64>,
}

impl Batch {
    /// Runs the value network over the batch and computes GAE advantages and returns.
    /// `rewards` overrides the raw transition rewards (e.g. scaled rewards).
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        transitions: Vec<Transition>,
        rewards: Option<&[f64]>,
        value_net: &Mlp,
        value_params: &ParamVector,
        gamma: f64,
        lambda: f64,
        normalize: bool,
    ) -> Result<Self> {
        let raw: Vec<f64>;
        let rewards = match rewards {
            Some(r) => r,
            None => {
                raw = transitions.iter().map(|t| t.reward).collect();
                &raw
            }
        };
        let v = |s: &Vec<f64>| -> Result<f64> { Ok(value_net.forward(value_params.values(), s)?[0]) };
        let values_old = transitions.iter().map(|t| v(&t.state)).collect::<Result<Vec<_>>>()?;
        let next_values = transitions
            .iter()
            .map(|t| v(&t.next_state))
            .collect::<Result<Vec<_>>>()?;
        let terminated: Vec<bool> = transitions.iter().map(|t| t.terminated).collect();
        let ends: Vec<bool> = transitions.iter().map(Transition::episode_end).collect();
        let adv = gae_with_bootstrap(rewards, &values_old, &next_values, &terminated, &ends, gamma, lambda)?;
        let returns: Vec<f64> = adv.iter().zip(&values_old).map(|(a, v)| a + v).collect();
        let advantages = if normalize && adv.len() >= 2 {
            normalize_advantages(&adv)?
        } else {
            adv
        };
        if let Some(i) = advantages.iter().position(|a| !a.is_finite()) {
            return Err(Error::numerical(i, "non-finite advantage"));
        }
        Ok(Self {
            transitions,
            advantages,
            returns,
            values_old,
        })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn states(&self) -> Vec<Vec<f64>> {
        self.transitions.iter().map(|t| t.state.clone()).collect()
    }

    pub fn actions(&self) -> Vec<Action> {
        self.transitions.iter().map(|t| t.action.clone()).collect()
    }

    pub fn log_prob_old(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.log_prob_old).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lambda_zero_is_td_residual() {
        let r = [1.0, -0.5, 2.0];
        let v = [0.3, 0.1, -0.2, 0.7];
        let a = gae(&r, &v, &[false, false, false], 0.9, 0.0).unwrap();
        for t in 0..3 {
            assert_eq!(a[t], r[t] + 0.9 * v[t + 1] - v[t]);
        }
    }

    #[test]
    fn zero_everything_gives_zero() {
        let a = gae(&[0.0; 5], &[0.0; 6], &[false, true, false, false, false], 0.99, 0.95).unwrap();
        assert!(a.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn lambda_one_zero_values_is_reward_to_go() {
        let r = [1.0, 2.0, 3.0, 4.0];
        let a = gae(&r, &[0.0; 5], &[false, false, false, true], 0.5, 1.0).unwrap();
        assert_eq!(a, vec![1.0 + 1.0 + 0.75 + 0.5, 2.0 + 1.5 + 1.0, 3.0 + 2.0, 4.0]);
    }

    #[test]
    fn done_blocks_bootstrap_and_carry() {
        let a = gae(&[1.0, 1.0], &[0.0, 5.0, 9.0], &[true, false], 0.9, 0.9).unwrap();
        assert_eq!(a[0], 1.0);
        assert_eq!(a[1], 1.0 + 0.9 * 9.0 - 5.0);
    }

    #[test]
    fn normalization_edge_cases() {
        assert!(normalize_advantages(&[3.0; 4]).unwrap().iter().all(|x| *x == 0.0));
        let n = normalize_advantages(&[-1.0, 1.0]).unwrap();
        assert!((n[0] + 1.0).abs() < 1e-7 && (n[1] - 1.0).abs() < 1e-7);
        assert!(normalize_advantages(&[1.0]).is_err());
    }

    #[test]
    fn mask_arithmetic() {
        let two = DropoutRule::two_side(0.25).unwrap();
        let left = DropoutRule::new(DropoutMode::LeftSide, 0.25).unwrap();
        assert!(two.keeps(1.0, 0.0));
        assert!(!two.keeps(1.3, 0.0));
        assert!(left.keeps(1.3, 0.0));
        let m = dropout_mask(&DropoutRule::two_side(1.0).unwrap(), &[0.5, 1.9, 2.1], None).unwrap();
        assert_eq!(m.keep, vec![true, true, false]);
        assert_eq!(m.kept_count, 2);
        assert!((m.dropout_fraction - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn boundary_samples_are_dropped() {
        let rule = DropoutRule::two_side(0.5).unwrap();
        assert!(!rule.keeps(1.5, 0.0));
        assert!(!rule.keeps(0.5, 0.0));
        let kl = DropoutRule::kl(0.01).unwrap();
        assert!(!kl.keeps(1.0, 0.01));
        assert!(kl.keeps(1.0, 0.009));
    }

    #[test]
    fn kl_mode_needs_kl_values() {
        let rule = DropoutRule::kl(0.1).unwrap();
        assert!(dropout_mask(&rule, &[1.0], None).is_err());
        let m = dropout_mask(&rule, &[1.0, 1.0], Some(&[0.05, 0.2])).unwrap();
        assert_eq!(m.keep, vec![true, false]);
    }

    #[test]
    fn invalid_thresholds() {
        assert!(DropoutRule::two_side(0.0).is_err());
        assert!(DropoutRule::two_side(-1.0).is_err());
        assert!(DropoutRule::two_side(f64::NAN).is_err());
        assert!(DropoutRule::two_side(f64::INFINITY).unwrap().keeps(1e300, 0.0));
    }

    proptest! {
        #[test]
        fn two_side_is_left_and_right(
            ratios in prop::collection::vec(0.0f64..5.0, 1..50),
            delta in 0.01f64..2.0,
        ) {
            let two = dropout_mask(&DropoutRule::new(DropoutMode::TwoSide, delta).unwrap(), &ratios, None).unwrap();
            let left = dropout_mask(&DropoutRule::new(DropoutMode::LeftSide, delta).unwrap(), &ratios, None).unwrap();
            let right = dropout_mask(&DropoutRule::new(DropoutMode::RightSide, delta).unwrap(), &ratios, None).unwrap();
            for i in 0..ratios.len() {
                prop_assert_eq!(two.keep[i], left.keep[i] && right.keep[i]);
                prop_assert_eq!(two.keep[i], (ratios[i] - 1.0).abs() < delta);
            }
            prop_assert_eq!(two.kept_count, two.keep.iter().filter(|k| **k).count());
        }

        #[test]
        fn normalized_moments(adv in prop::collection::vec(-100.0f64..100.0, 2..60)) {
            let spread = adv.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - adv.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assume!(spread > 1e-3);
            let n = normalize_advantages(&adv).unwrap();
            let m = n.iter().sum::<f64>() / n.len() as f64;
            let s = (n.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n.len() as f64).sqrt();
            prop_assert!(m.abs() < 1e-10);
            prop_assert!((1.0 - 1e-6..=1.0 + 1e-12).contains(&s));
        }
    }
}
