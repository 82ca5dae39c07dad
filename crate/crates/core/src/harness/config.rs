//! Flat `key = value` experiment configuration.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are ignored. The
//! `algo` key is applied first and selects the per-algorithm defaults; every other key
//! then overrides one field. Later occurrences of a key win, so command-line overrides
//! appended after the file contents take precedence.
//!
//! | key | meaning | default |
//! |---|---|---|
//! | `env` | `chain5`, `gridworld4x4`, `pointmass` or `file:<path>` | `chain5` |
//! | `algo` | `trpo`, `ppo`, `espo` | `ppo` |
//! | `sd` | sample dropout on/off | `off` |
//! | `rule` | `two_side`, `left`, `right`, `kl` | `kl` for TRPO, else `two_side` |
//! | `delta` | dropout threshold (δ, or ρ for `kl`); `inf` allowed | per algorithm |
//! | `epsilon` | PPO clip range | 0.2 |
//! | `rho_tr` | TRPO KL radius | 0.001 |
//! | `delta_es` | ESPO early-stop threshold | 0.25 |
//! | `epochs`, `minibatch`, `batch` | K, L, N | per algorithm |
//! | `lr`, `lr_decay` | initial rate, `linear` or `none` | 3e-4, `linear` |
//! | `gamma`, `lambda` | discount, GAE λ | 0.99, per algorithm |
//! | `cg_iters`, `damping`, `backtrack_coef`, `backtrack_iters` | TRPO solver | 10, 0.1, 0.8, 10 |
//! | `value_iters`, `value_lr` | TRPO value fit | 80, 1e-3 |
//! | `total_steps` | environment steps; multiple of `batch` | 50 × `batch` |
//! | `seeds` | comma-separated list | `0` |
//! | `eval_interval` | iterations between evaluations (0 = final only) | 10 |
//! | `eval_episodes` | episodes per evaluation | 20 |
//! | `normalize_obs`, `normalize_reward`, `normalize_adv` | preprocessing toggles | `on` |
//! | `hidden` | comma-separated hidden widths | `64,64` |
//! | `activation` | `tanh` or `relu` | `tanh` |
//! | `checkpoint` | write final parameters | `on` |
//! | `dump_minibatches` | write per-minibatch ratio dumps | `off` |

use std::fmt::Write as _;
use std::path::Path;

use crate::diff::Activation;
use crate::error::{Error, Result};
use crate::estimation::{DropoutMode, DropoutRule};
use crate::optimizers::{Algo, AlgoConfig, LrDecay};

pub const CONFIG_KEYS: &[&str] = &[
    "env",
    "algo",
    "sd",
    "rule",
    "delta",
    "epsilon",
    "rho_tr",
    "delta_es",
    "epochs",
    "minibatch",
    "batch",
    "lr",
    "lr_decay",
    "gamma",
    "lambda",
    "cg_iters",
    "damping",
    "backtrack_coef",
    "backtrack_iters",
    "value_iters",
    "value_lr",
    "total_steps",
    "seeds",
    "eval_interval",
    "eval_episodes",
    "normalize_obs",
    "normalize_reward",
    "normalize_adv",
    "hidden",
    "activation",
    "checkpoint",
    "dump_minibatches",
];

const DEFAULT_ITERATIONS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: String,
    pub algo: AlgoConfig,
    /// `None` means [`DEFAULT_ITERATIONS`] batches.
    pub total_steps: Option<usize>,
    pub seeds: Vec<u64>,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub normalize_obs: bool,
    pub normalize_reward: bool,
    pub normalize_adv: bool,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub checkpoint: bool,
    pub dump_minibatches: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_algo(Algo::Ppo)
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected on/off, got '{v}'"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse '{v}'")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Ratio-rule threshold used when switching an algorithm onto a ratio rule.
fn ratio_default(algo: Algo) -> f64 {
    match algo {
        Algo::Ppo => 1.0,
        Algo::Espo | Algo::Trpo => 0.25,
    }
}

const KL_DEFAULT: f64 = 0.001;

impl ExperimentConfig {
    pub fn for_algo(algo: Algo) -> Self {
        Self {
            env: "chain5".into(),
            algo: AlgoConfig::defaults(algo),
            total_steps: None,
            seeds: vec![0],
            eval_interval: 10,
            eval_episodes: 20,
            normalize_obs: true,
            normalize_reward: true,
            normalize_adv: true,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            checkpoint: true,
            dump_minibatches: false,
        }
    }

    /// Splits text into `(key, value)` pairs.
    pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
        text.lines()
            .enumerate()
            .map(|(i, l)| (i, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
            .map(|(i, l)| {
                parse_assignment(l).map_err(|_| Error::config(format!("line {}: expected key = value, got '{l}'", i + 1)))
            })
            .collect()
    }

    /// Builds a config from pairs; `algo` is applied first, then the rest in order.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let algo = match pairs.iter().rev().find(|(k, _)| k == "algo") {
            Some((_, v)) => Algo::parse(v)?,
            None => Algo::Ppo,
        };
        let mut cfg = Self::for_algo(algo);
        for (k, v) in pairs.iter().filter(|(k, _)| k != "algo") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&Self::parse_pairs(text)?)
    }

    /// Reads `path` (when given) and applies `overrides` (`key=value` strings) after it.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut pairs = match path {
            Some(p) => Self::parse_pairs(&std::fs::read_to_string(p)?)?,
            None => Vec::new(),
        };
        for o in overrides {
            pairs.push(parse_assignment(o)?);
        }
        let cfg = Self::from_pairs(&pairs)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let a = &mut self.algo;
        match key {
            "env" => self.env = v.to_string(),
            "algo" => {
                let algo = Algo::parse(v)?;
                if algo != a.algo {
                    *a = AlgoConfig::defaults(algo);
                }
            }
            "sd" => a.sd = parse_bool(key, v)?,
            "rule" => {
                let mode = DropoutMode::parse(v)?;
                let was_kl = a.rule.mode() == DropoutMode::Kl;
                let is_kl = mode == DropoutMode::Kl;
                let threshold = if was_kl == is_kl {
                    a.rule.threshold()
                } else if is_kl {
                    KL_DEFAULT
                } else {
                    ratio_default(a.algo)
                };
                a.rule = DropoutRule::new(mode, threshold)?;
            }
            "delta" => {
                let t = if v == "inf" { f64::INFINITY } else { parse_num(key, v)? };
                a.rule = DropoutRule::new(a.rule.mode(), t)?;
            }
            "epsilon" => a.epsilon = parse_num(key, v)?,
            "rho_tr" => a.rho_tr = parse_num(key, v)?,
            "delta_es" => a.delta_es = parse_num(key, v)?,
            "epochs" => a.epochs = parse_num(key, v)?,
            "minibatch" => a.minibatch = parse_num(key, v)?,
            "batch" => a.batch = parse_num(key, v)?,
            "lr" => a.lr = parse_num(key, v)?,
            "lr_decay" => a.lr_decay = LrDecay::parse(v)?,
            "gamma" => a.gamma = parse_num(key, v)?,
            "lambda" => a.lambda = parse_num(key, v)?,
            "cg_iters" => a.cg_iters = parse_num(key, v)?,
            "damping" => a.damping = parse_num(key, v)?,
            "backtrack_coef" => a.backtrack_coef = parse_num(key, v)?,
            "backtrack_iters" => a.backtrack_iters = parse_num(key, v)?,
            "value_iters" => a.value_iters = parse_num(key, v)?,
            "value_lr" => a.value_lr = parse_num(key, v)?,
            "total_steps" => self.total_steps = Some(parse_num(key, v)?),
            "seeds" => self.seeds = parse_list(key, v)?,
            "eval_interval" => self.eval_interval = parse_num(key, v)?,
            "eval_episodes" => self.eval_episodes = parse_num(key, v)?,
            "normalize_obs" => self.normalize_obs = parse_bool(key, v)?,
            "normalize_reward" => self.normalize_reward = parse_bool(key, v)?,
            "normalize_adv" => self.normalize_adv = parse_bool(key, v)?,
            "hidden" => self.hidden = parse_list(key, v)?,
            "activation" => self.activation = Activation::parse(v)?,
            "checkpoint" => self.checkpoint = parse_bool(key, v)?,
            "dump_minibatches" => self.dump_minibatches = parse_bool(key, v)?,
            other => {
                return Err(Error::config(format!(
                    "unknown config key '{other}' (known: {})",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps.unwrap_or(DEFAULT_ITERATIONS * self.algo.batch)
    }

    pub fn iterations(&self) -> usize {
        self.total_steps() / self.algo.batch.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.algo.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if !self.total_steps().is_multiple_of(self.algo.batch) {
            return Err(Error::config(format!(
                "total_steps {} is not a multiple of batch {}",
                self.total_steps(),
                self.algo.batch
            )));
        }
        if self.algo.batch < 2 && self.normalize_adv {
            return Err(Error::config("advantage normalization needs batch >= 2"));
        }
        if self.eval_episodes == 0 {
            return Err(Error::config("eval_episodes must be >= 1"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden widths must be >= 1"));
        }
        crate::envs::make_env(&self.env)?;
        Ok(())
    }

    /// Every key with its current value, one `key = value` line each.
    pub fn to_text(&self) -> String {
        let a = &self.algo;
        let delta = if a.rule.threshold().is_infinite() {
            "inf".to_string()
        } else {
            a.rule.threshold().to_string()
        };
        let values: Vec<(&str, String)> = vec![
            ("env", self.env.clone()),
            ("algo", a.algo.name().into()),
            ("sd", on_off(a.sd).into()),
            ("rule", a.rule.mode().name().into()),
            ("delta", delta),
            ("epsilon", a.epsilon.to_string()),
            ("rho_tr", a.rho_tr.to_string()),
            ("delta_es", a.delta_es.to_string()),
            ("epochs", a.epochs.to_string()),
            ("minibatch", a.minibatch.to_string()),
            ("batch", a.batch.to_string()),
            ("lr", a.lr.to_string()),
            ("lr_decay", a.lr_decay.name().into()),
            ("gamma", a.gamma.to_string()),
            ("lambda", a.lambda.to_string()),
            ("cg_iters", a.cg_iters.to_string()),
            ("damping", a.damping.to_string()),
            ("backtrack_coef", a.backtrack_coef.to_string()),
            ("backtrack_iters", a.backtrack_iters.to_string()),
            ("value_iters", a.value_iters.to_string()),
            ("value_lr", a.value_lr.to_string()),
            ("total_steps", self.total_steps().to_string()),
            ("seeds", join(&self.seeds)),
            ("eval_interval", self.eval_interval.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("normalize_obs", on_off(self.normalize_obs).into()),
            ("normalize_reward", on_off(self.normalize_reward).into()),
            ("normalize_adv", on_off(self.normalize_adv).into()),
            ("hidden", join(&self.hidden)),
            ("activation", self.activation.name().into()),
            ("checkpoint", on_off(self.checkpoint).into()),
            ("dump_minibatches", on_off(self.dump_minibatches).into()),
        ];
        let mut out = String::new();
        for (k, v) in values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Parses one `key=value` (or `key = value`) assignment.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::config(format!("expected key=value, got '{s}'")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::config(format!("empty key in '{s}'")));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn algo_defaults_then_overrides() {
        let cfg = ExperimentConfig::parse("batch = 512\nalgo = espo\n# comment\nsd = on\n").unwrap();
        assert_eq!(cfg.algo.algo, Algo::Espo);
        assert_eq!(cfg.algo.batch, 512);
        assert_eq!(cfg.algo.minibatch, 64);
        assert!(cfg.algo.sd);
        assert_eq!(cfg.total_steps(), 50 * 512);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig::for_algo(Algo::Trpo);
        cfg.set("seeds", "3,1,4").unwrap();
        cfg.set("delta", "inf").unwrap();
        cfg.set("env", "pointmass").unwrap();
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, ExperimentConfig { total_steps: Some(cfg.total_steps()), ..cfg });
    }

    #[test]
    fn later_values_win() {
        let cfg = ExperimentConfig::load(None, &["lr=0.1".into(), "lr = 0.2".into()]).unwrap();
        assert_eq!(cfg.algo.lr, 0.2);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ExperimentConfig::parse("nonsense = 1").is_err());
        assert!(ExperimentConfig::parse("no equals sign").is_err());
        assert!(ExperimentConfig::parse("epochs = many").is_err());
        let cfg = ExperimentConfig::parse("batch = 100\ntotal_steps = 150").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig::parse("seeds = ").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig::parse("env = cartpole").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn switching_rule_family_resets_threshold() {
        let mut cfg = ExperimentConfig::for_algo(Algo::Ppo);
        cfg.set("rule", "left").unwrap();
        assert_eq!(cfg.algo.rule.threshold(), 1.0);
        cfg.set("rule", "kl").unwrap();
        assert_eq!(cfg.algo.rule.threshold(), 0.001);
        cfg.set("delta", "0.02").unwrap();
        cfg.set("rule", "kl").unwrap();
        assert_eq!(cfg.algo.rule.threshold(), 0.02);
    }

    #[test]
    fn zero_steps_is_valid() {
        let cfg = ExperimentConfig::parse("total_steps = 0").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.iterations(), 0);
    }
}
