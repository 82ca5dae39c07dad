//! Toy environments with exact oracles, and trajectory collection.

pub mod mdp;
pub mod normalize;
pub mod pointmass;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diff::{Action, ParamVector, Policy, PolicyKind};
use crate::error::{Error, Result};

pub use mdp::{chain5, gridworld4x4, DiscreteMdp, ExactValues};
pub use normalize::{RewardScaler, RunningNorm};
pub use pointmass::PointMass;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub observation: Vec<f64>,
    pub reward: f64,
    /// The episode reached a terminal state (no bootstrapping past it).
    pub terminated: bool,
    /// The episode was cut at the horizon (bootstrapping still applies).
    pub truncated: bool,
}

pub trait Environment: Send {
    fn name(&self) -> &str;
    fn observation_dim(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    fn horizon(&self) -> usize;
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    fn step(&mut self, action: &Action, rng: &mut ChaCha8Rng) -> Result<Step>;

    /// The underlying tabular MDP, when the environment has an exact oracle.
    fn mdp(&self) -> Option<&DiscreteMdp> {
        None
    }
}

/// Episodic wrapper around a [`DiscreteMdp`] with one-hot observations.
#[derive(Debug, Clone)]
pub struct DiscreteEnv {
    name: String,
    mdp: DiscreteMdp,
    state: usize,
    t: usize,
}

impl DiscreteEnv {
    pub fn new(name: impl Into<String>, mdp: DiscreteMdp) -> Result<Self> {
        mdp.validate()?;
        if mdp.horizon == 0 {
            return Err(Error::config("horizon must be >= 1"));
        }
        Ok(Self {
            name: name.into(),
            mdp,
            state: 0,
            t: 0,
        })
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn one_hot(&self, s: usize) -> Vec<f64> {
        one_hot(self.mdp.n_states, s)
    }
}

pub fn one_hot(n: usize, s: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[s] = 1.0;
    v
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

impl Environment for DiscreteEnv {
    fn name(&self) -> &str {
        &self.name
    }

    fn observation_dim(&self) -> usize {
        self.mdp.n_states
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(self.mdp.n_actions)
    }

    fn horizon(&self) -> usize {
        self.mdp.horizon
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.state = sample_index(&self.mdp.initial_dist, rng);
        self.t = 0;
        self.one_hot(self.state)
    }

    fn step(&mut self, action: &Action, rng: &mut ChaCha8Rng) -> Result<Step> {
        let a = match action {
            Action::Discrete(a) if *a < self.mdp.n_actions => *a,
            other => return Err(Error::input(format!("invalid action {other:?}"))),
        };
        let reward = self.mdp.r(self.state, a);
        self.state = sample_index(self.mdp.p(self.state, a), rng);
        self.t += 1;
        let terminated = self.mdp.terminal[self.state];
        Ok(Step {
            observation: self.one_hot(self.state),
            reward,
            terminated,
            truncated: !terminated && self.t >= self.mdp.horizon,
        })
    }

    fn mdp(&self) -> Option<&DiscreteMdp> {
        Some(&self.mdp)
    }
}

pub const ENV_NAMES: &[&str] = &["chain5", "gridworld4x4", "pointmass"];

/// Builds an environment by name; `file:<path>` loads a tabular MDP from its text format.
pub fn make_env(name: &str) -> Result<Box<dyn Environment>> {
    match name {
        "chain5" => Ok(Box::new(DiscreteEnv::new(name, chain5())?)),
        "gridworld4x4" => Ok(Box::new(DiscreteEnv::new(name, gridworld4x4())?)),
        "pointmass" => Ok(Box::new(PointMass::default())),
        other => match other.strip_prefix("file:") {
            Some(path) => Ok(Box::new(DiscreteEnv::new(other, DiscreteMdp::load(path)?)?)),
            None => Err(Error::config(format!(
                "unknown environment '{other}' (expected one of {ENV_NAMES:?} or file:<path>)"
            ))),
        },
    }
}

/// One environment step as seen by the sampling policy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Transition {
    /// Observation fed to the policy (normalized when normalization is on).
    pub state: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminated: bool,
    pub truncated: bool,
    /// `log π(a|s)` under the sampling policy, frozen at collection time.
    pub log_prob_old: f64,
}

impl Transition {
    pub fn episode_end(&self) -> bool {
        self.terminated || self.truncated
    }
}

/// Persistent sampler: keeps the environment mid-episode between calls and owns the
/// observation normalizer.
pub struct Collector {
    env: Box<dyn Environment>,
    rng: ChaCha8Rng,
    obs_norm: Option<RunningNorm>,
    current: Option<Vec<f64>>,
    episode_return: f64,
    finished: Vec<f64>,
}

impl Collector {
    pub fn new(env: Box<dyn Environment>, rng: ChaCha8Rng, normalize_obs: bool) -> Self {
        let obs_norm = normalize_obs.then(|| RunningNorm::new(env.observation_dim()));
        Self {
            env,
            rng,
            obs_norm,
            current: None,
            episode_return: 0.0,
            finished: Vec::new(),
        }
    }

    pub fn env(&self) -> &dyn Environment {
        self.env.as_ref()
    }

    pub fn obs_norm(&self) -> Option<&RunningNorm> {
        self.obs_norm.as_ref()
    }

    fn observe(&mut self, raw: Vec<f64>) -> Vec<f64> {
        match &mut self.obs_norm {
            Some(norm) => {
                norm.update(&raw);
                norm.normalize(&raw)
            }
            None => raw,
        }
    }

    /// Undiscounted returns of episodes completed since the last call.
    pub fn take_finished_returns(&mut self) -> Vec<f64> {
        std::mem::take(&mut self.finished)
    }

    pub fn collect(
        &mut self,
        policy: &Policy,
        params: &ParamVector,
        n_steps: usize,
    ) -> Result<Vec<Transition>> {
        check_compatible(self.env.as_ref(), policy)?;
        let mut out = Vec::with_capacity(n_steps);
        for _ in 0..n_steps {
            let state = match self.current.take() {
                Some(s) => s,
                None => {
                    let raw = self.env.reset(&mut self.rng);
                    self.episode_return = 0.0;
                    self.observe(raw)
                }
            };
            let dist = policy.distribution(params, &state)?;
            let action = dist.sample(&mut self.rng);
            let log_prob_old = dist.log_prob(&action)?;
            let step = self.env.step(&action, &mut self.rng)?;
            let next_state = self.observe(step.observation);
            self.episode_return += step.reward;
            let t = Transition {
                state,
                action,
                reward: step.reward,
                next_state,
                terminated: step.terminated,
                truncated: step.truncated,
                log_prob_old,
            };
            if t.episode_end() {
                self.finished.push(self.episode_return);
                self.current = None;
            } else {
                self.current = Some(t.next_state.clone());
            }
            out.push(t);
        }
        Ok(out)
    }
}

fn check_compatible(env: &dyn Environment, policy: &Policy) -> Result<()> {
    if env.observation_dim() != policy.obs_dim() {
        return Err(Error::config(format!(
            "environment observations have dim {}, policy expects {}",
            env.observation_dim(),
            policy.obs_dim()
        )));
    }
    let ok = match (env.action_space(), policy.kind()) {
        (ActionSpace::Discrete(n), PolicyKind::Categorical { action_count }) => n == action_count,
        (ActionSpace::Continuous(d), PolicyKind::DiagGaussian { action_dim }) => d == action_dim,
        _ => false,
    };
    if !ok {
        return Err(Error::config("policy head does not match environment action space"));
    }
    Ok(())
}

/// `n_steps` transitions from a fresh environment, resetting on episode end.
/// Deterministic in `seed`; no observation normalization.
pub fn rollout(
    env: Box<dyn Environment>,
    policy: &Policy,
    params: &ParamVector,
    n_steps: usize,
    seed: u64,
) -> Result<Vec<Transition>> {
    if n_steps == 0 {
        return Err(Error::config("rollout needs n_steps >= 1"));
    }
    Collector::new(env, ChaCha8Rng::seed_from_u64(seed), false).collect(policy, params, n_steps)
}

/// `π(·|s)` for every state of a tabular MDP, observing one-hot states through `norm`.
pub fn policy_table(
    policy: &Policy,
    params: &ParamVector,
    mdp: &DiscreteMdp,
    norm: Option<&RunningNorm>,
) -> Result<Vec<Vec<f64>>> {
    (0..mdp.n_states)
        .map(|s| {
            let raw = one_hot(mdp.n_states, s);
            let obs = match norm {
                Some(n) => n.normalize(&raw),
                None => raw,
            };
            policy
                .distribution(params, &obs)?
                .probs()
                .ok_or_else(|| Error::config("tabular MDPs need a categorical policy"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::PolicySpec;

    #[test]
    fn degenerate_mdp_rollout() {
        let mdp = DiscreteMdp {
            n_states: 1,
            n_actions: 2,
            transition: vec![1.0, 1.0],
            reward: vec![0.5, -1.0],
            gamma: 0.9,
            initial_dist: vec![1.0],
            horizon: 7,
            terminal: vec![false],
        };
        let env = DiscreteEnv::new("one", mdp).unwrap();
        let policy = Policy::new(PolicySpec::categorical(1, vec![4], 2)).unwrap();
        let params = policy.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let ts = rollout(Box::new(env), &policy, &params, 30, 5).unwrap();
        assert_eq!(ts.len(), 30);
        for t in &ts {
            assert_eq!(t.state, vec![1.0]);
            let Action::Discrete(a) = t.action else { panic!() };
            assert_eq!(t.reward, [0.5, -1.0][a]);
        }
        assert_eq!(ts.iter().filter(|t| t.truncated).count(), 4);
    }

    #[test]
    fn unknown_env_name() {
        assert!(matches!(make_env("cartpole"), Err(Error::Config(_))));
        for name in ENV_NAMES {
            make_env(name).unwrap();
        }
    }

    #[test]
    fn mismatched_policy_rejected() {
        let policy = Policy::new(PolicySpec::gaussian(2, vec![4], 1)).unwrap();
        let params = policy.zeros();
        assert!(rollout(make_env("chain5").unwrap(), &policy, &params, 3, 0).is_err());
    }

    #[test]
    fn normalized_collector_keeps_state_chain() {
        let policy = Policy::new(PolicySpec::gaussian(2, vec![4], 1)).unwrap();
        let params = policy.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let mut c = Collector::new(make_env("pointmass").unwrap(), ChaCha8Rng::seed_from_u64(1), true);
        let ts = c.collect(&policy, &params, 250).unwrap();
        for w in ts.windows(2) {
            if !w[0].episode_end() {
                assert_eq!(w[0].next_state, w[1].state);
            }
        }
        assert_eq!(c.take_finished_returns().len(), 2);
    }
}
