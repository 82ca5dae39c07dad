//! Tabular MDPs with exact policy evaluation.
//!
//! # Text format
//!
//! ```text
//! # lines starting with '#' are comments
//! states 3
//! actions 2
//! gamma 0.9
//! horizon 100
//! initial 1 0 0                # ρ₀ over states
//! terminal 2                   # optional: indices of terminal states
//! reward                       # n_states rows of n_actions values: r(s, ·)
//! 0 1
//! 0 0
//! 0 0
//! transition                   # n_states·n_actions rows, row (s, a) at index s·n_actions + a,
//! 0 1 0                        # each holding P(· | s, a) over next states
//! ...
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `P(s'|s,a)` at `(s * n_actions + a) * n_states + s'`.
    pub transition: Vec<f64>,
    /// `r(s,a)` at `s * n_actions + a`.
    pub reward: Vec<f64>,
    pub gamma: f64,
    pub initial_dist: Vec<f64>,
    pub horizon: usize,
    /// Entering a terminal state ends the episode.
    pub terminal: Vec<bool>,
}

/// Exact state values, action values and advantages for one policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactValues {
    pub v: Vec<f64>,
    /// `Q(s,a)` at `s * n_actions + a`.
    pub q: Vec<f64>,
    /// `A(s,a) = Q(s,a) − V(s)`, same layout as `q`.
    pub advantage: Vec<f64>,
}

impl ExactValues {
    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.q[s * (self.q.len() / self.v.len()) + a]
    }

    pub fn advantage(&self, s: usize, a: usize) -> f64 {
        self.advantage[s * (self.advantage.len() / self.v.len()) + a]
    }
}

impl DiscreteMdp {
    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n_states, self.n_actions);
        if n == 0 || m == 0 {
            return Err(Error::config("MDP needs at least one state and action"));
        }
        if self.transition.len() != n * m * n
            || self.reward.len() != n * m
            || self.initial_dist.len() != n
            || self.terminal.len() != n
        {
            return Err(Error::config("MDP tensor shapes are inconsistent"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config(format!(
                "discount must lie in [0, 1), got {}",
                self.gamma
            )));
        }
        for row in 0..n * m {
            let p = &self.transition[row * n..(row + 1) * n];
            if p.iter().any(|x| *x < 0.0 || !x.is_finite()) {
                return Err(Error::config(format!("transition row {row} has invalid entries")));
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > SUM_TOL {
                return Err(Error::config(format!("transition row {row} sums to {sum}")));
            }
        }
        let sum: f64 = self.initial_dist.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL || self.initial_dist.iter().any(|x| *x < 0.0) {
            return Err(Error::config(format!("initial distribution sums to {sum}")));
        }
        if self.reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::config("non-finite reward"));
        }
        Ok(())
    }

    pub fn p(&self, s: usize, a: usize) -> &[f64] {
        let row = s * self.n_actions + a;
        &self.transition[row * self.n_states..(row + 1) * self.n_states]
    }

    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    fn check_policy(&self, policy: &[Vec<f64>]) -> Result<()> {
        if policy.len() != self.n_states || policy.iter().any(|row| row.len() != self.n_actions) {
            return Err(Error::config("policy table shape does not match MDP"));
        }
        for (s, row) in policy.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|x| *x < 0.0) {
                return Err(Error::config(format!("policy row {s} sums to {sum}")));
            }
        }
        Ok(())
    }

    /// Solves the Bellman linear system `(I − γ P_π) V = r_π`.
    pub fn exact_values(&self, policy: &[Vec<f64>]) -> Result<ExactValues> {
        if self.gamma >= 1.0 || self.gamma < 0.0 {
            return Err(Error::config(format!(
                "Bellman system is singular for discount {}",
                self.gamma
            )));
        }
        self.validate()?;
        self.check_policy(policy)?;
        let (n, m) = (self.n_states, self.n_actions);
        let mut system = DMatrix::<f64>::identity(n, n);
        let mut rhs = DVector::<f64>::zeros(n);
        for s in 0..n {
            for a in 0..m {
                let pi = policy[s][a];
                rhs[s] += pi * self.r(s, a);
                for (s2, p) in self.p(s, a).iter().enumerate() {
                    system[(s, s2)] -= self.gamma * pi * p;
                }
            }
        }
        let v = system
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::config("Bellman system is singular"))?;
        let v: Vec<f64> = v.iter().copied().collect();
        let mut q = vec![0.0; n * m];
        let mut advantage = vec![0.0; n * m];
        for s in 0..n {
            for a in 0..m {
                let next: f64 = self.p(s, a).iter().zip(&v).map(|(p, vv)| p * vv).sum();
                q[s * m + a] = self.r(s, a) + self.gamma * next;
                advantage[s * m + a] = q[s * m + a] - v[s];
            }
        }
        Ok(ExactValues { v, q, advantage })
    }

    /// `J(π) = ρ₀ᵀ V^π`.
    pub fn exact_return(&self, policy: &[Vec<f64>]) -> Result<f64> {
        let values = self.exact_values(policy)?;
        Ok(self
            .initial_dist
            .iter()
            .zip(&values.v)
            .map(|(p, v)| p * v)
            .sum())
    }

    /// Discounted state-visitation distribution `d_π = (1−γ) ρ₀ᵀ (I − γ P_π)⁻¹`.
    pub fn discounted_visitation(&self, policy: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.validate()?;
        self.check_policy(policy)?;
        let n = self.n_states;
        let mut system = DMatrix::<f64>::identity(n, n);
        for s in 0..n {
            for a in 0..self.n_actions {
                for (s2, p) in self.p(s, a).iter().enumerate() {
                    // transpose: row s2 collects inflow into s2
                    system[(s2, s)] -= self.gamma * policy[s][a] * p;
                }
            }
        }
        let rho = DVector::from_vec(self.initial_dist.clone());
        let d = system
            .lu()
            .solve(&rho)
            .ok_or_else(|| Error::config("visitation system is singular"))?;
        Ok(d.iter().map(|x| x * (1.0 - self.gamma)).collect())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty());
        let mut n_states = None;
        let mut n_actions = None;
        let mut gamma = None;
        let mut horizon = None;
        let mut initial = None;
        let mut terminal_idx: Vec<usize> = Vec::new();
        let mut reward = None;
        let mut transition = None;

        fn nums(line: &str) -> Result<Vec<f64>> {
            line.split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| Error::parse(format!("bad number '{t}'")))
                })
                .collect()
        }

        while let Some(line) = lines.next() {
            let mut parts = line.splitn(2, char::is_whitespace);
            let key = parts.next().unwrap_or("");
            let rest = parts.next().unwrap_or("").trim();
            let count = |v: Option<usize>, what: &str| {
                v.ok_or_else(|| Error::parse(format!("'{what}' must precede tables")))
            };
            match key {
                "states" => n_states = Some(parse_usize(rest)?),
                "actions" => n_actions = Some(parse_usize(rest)?),
                "gamma" => {
                    gamma = Some(
                        rest.parse::<f64>()
                            .map_err(|_| Error::parse(format!("bad gamma '{rest}'")))?,
                    )
                }
                "horizon" => horizon = Some(parse_usize(rest)?),
                "initial" => initial = Some(nums(rest)?),
                "terminal" => {
                    terminal_idx = rest
                        .split_whitespace()
                        .map(parse_usize)
                        .collect::<Result<_>>()?
                }
                "reward" => {
                    let (n, m) = (count(n_states, "states")?, count(n_actions, "actions")?);
                    let mut r = Vec::with_capacity(n * m);
                    for _ in 0..n {
                        let row = nums(lines.next().ok_or_else(|| Error::parse("missing reward row"))?)?;
                        if row.len() != m {
                            return Err(Error::parse(format!("reward row needs {m} values")));
                        }
                        r.extend(row);
                    }
                    reward = Some(r);
                }
                "transition" => {
                    let (n, m) = (count(n_states, "states")?, count(n_actions, "actions")?);
                    let mut p = Vec::with_capacity(n * m * n);
                    for _ in 0..n * m {
                        let row = nums(
                            lines
                                .next()
                                .ok_or_else(|| Error::parse("missing transition row"))?,
                        )?;
                        if row.len() != n {
                            return Err(Error::parse(format!("transition row needs {n} values")));
                        }
                        p.extend(row);
                    }
                    transition = Some(p);
                }
                other => return Err(Error::parse(format!("unknown key '{other}'"))),
            }
        }

        let n = n_states.ok_or_else(|| Error::parse("missing 'states'"))?;
        let mut terminal = vec![false; n];
        for t in terminal_idx {
            *terminal
                .get_mut(t)
                .ok_or_else(|| Error::parse(format!("terminal state {t} out of range")))? = true;
        }
        let mdp = DiscreteMdp {
            n_states: n,
            n_actions: n_actions.ok_or_else(|| Error::parse("missing 'actions'"))?,
            transition: transition.ok_or_else(|| Error::parse("missing 'transition'"))?,
            reward: reward.ok_or_else(|| Error::parse("missing 'reward'"))?,
            gamma: gamma.ok_or_else(|| Error::parse("missing 'gamma'"))?,
            initial_dist: initial.ok_or_else(|| Error::parse("missing 'initial'"))?,
            horizon: horizon.ok_or_else(|| Error::parse("missing 'horizon'"))?,
            terminal,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let join = |xs: &[f64]| {
            xs.iter()
                .map(|x| format!("{x:?}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut out = String::new();
        out.push_str(&format!("states {}\n", self.n_states));
        out.push_str(&format!("actions {}\n", self.n_actions));
        out.push_str(&format!("gamma {:?}\n", self.gamma));
        out.push_str(&format!("horizon {}\n", self.horizon));
        out.push_str(&format!("initial {}\n", join(&self.initial_dist)));
        let terminals: Vec<String> = (0..self.n_states)
            .filter(|s| self.terminal[*s])
            .map(|s| s.to_string())
            .collect();
        if !terminals.is_empty() {
            out.push_str(&format!("terminal {}\n", terminals.join(" ")));
        }
        out.push_str("reward\n");
        for s in 0..self.n_states {
            let row = &self.reward[s * self.n_actions..(s + 1) * self.n_actions];
            out.push_str(&join(row));
            out.push('\n');
        }
        out.push_str("transition\n");
        for row in self.transition.chunks(self.n_states) {
            out.push_str(&join(row));
            out.push('\n');
        }
        out
    }
}

fn parse_usize(s: &str) -> Result<usize> {
    s.trim()
        .parse::<usize>()
        .map_err(|_| Error::parse(format!("bad count '{s}'")))
}

/// Five-state stochastic chain: action 0 moves forward, action 1 returns to the start.
/// The intended move happens with probability 0.8, otherwise the other one does.
/// Forward at the end state pays 1.0; returning pays 0.2. Rewards are expectations
/// over the slip.
pub fn chain5() -> DiscreteMdp {
    const N: usize = 5;
    const SLIP: f64 = 0.2;
    const END_REWARD: f64 = 1.0;
    const BACK_REWARD: f64 = 0.2;
    let mut transition = vec![0.0; N * 2 * N];
    let mut reward = vec![0.0; N * 2];
    for s in 0..N {
        let forward = (s + 1).min(N - 1);
        let forward_reward = if s == N - 1 { END_REWARD } else { 0.0 };
        for a in 0..2 {
            let p_forward = if a == 0 { 1.0 - SLIP } else { SLIP };
            let row = (s * 2 + a) * N;
            transition[row + forward] += p_forward;
            transition[row] += 1.0 - p_forward;
            reward[s * 2 + a] = p_forward * forward_reward + (1.0 - p_forward) * BACK_REWARD;
        }
    }
    let mut initial_dist = vec![0.0; N];
    initial_dist[0] = 1.0;
    DiscreteMdp {
        n_states: N,
        n_actions: 2,
        transition,
        reward,
        gamma: 0.99,
        initial_dist,
        horizon: 100,
        terminal: vec![false; N],
    }
}

/// 4×4 grid with four moves (up, right, down, left) and a 0.1 chance of a uniformly
/// random move. The start is the top-left cell; any action taken in the bottom-right goal
/// pays 1 and moves to an absorbing terminal state (index 16).
pub fn gridworld4x4() -> DiscreteMdp {
    const W: usize = 4;
    const CELLS: usize = W * W;
    const N: usize = CELLS + 1;
    const EXIT: usize = CELLS;
    const GOAL: usize = CELLS - 1;
    const NOISE: f64 = 0.1;
    let moves: [(isize, isize); 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];
    let mut transition = vec![0.0; N * 4 * N];
    let mut reward = vec![0.0; N * 4];
    for s in 0..N {
        for a in 0..4 {
            let row = (s * 4 + a) * N;
            if s == EXIT || s == GOAL {
                transition[row + EXIT] = 1.0;
                if s == GOAL {
                    reward[s * 4 + a] = 1.0;
                }
                continue;
            }
            let (r, c) = ((s / W) as isize, (s % W) as isize);
            for (b, (dr, dc)) in moves.iter().enumerate() {
                let p = if b == a { 1.0 - NOISE } else { 0.0 } + NOISE / 4.0;
                let (nr, nc) = (r + dr, c + dc);
                let next = if (0..W as isize).contains(&nr) && (0..W as isize).contains(&nc) {
                    (nr as usize) * W + nc as usize
                } else {
                    s
                };
                transition[row + next] += p;
            }
        }
    }
    let mut initial_dist = vec![0.0; N];
    initial_dist[0] = 1.0;
    let mut terminal = vec![false; N];
    terminal[EXIT] = true;
    DiscreteMdp {
        n_states: N,
        n_actions: 4,
        transition,
        reward,
        gamma: 0.99,
        initial_dist,
        horizon: 50,
        terminal,
    }
}
