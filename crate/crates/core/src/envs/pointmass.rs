use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diff::Action;
use crate::error::{Error, Result};

use super::{ActionSpace, Environment, Step};

/// One-dimensional point mass driven by a bounded force toward the origin.
///
/// State is `(position, velocity)`; forces are clipped to `[−max_force, max_force]` and the
/// state to `±state_bound`. Reward is `−(pos² + 0.1·force²)`.
#[derive(Debug, Clone)]
pub struct PointMass {
    pub dt: f64,
    pub max_force: f64,
    pub state_bound: f64,
    pub init_range: f64,
    pub horizon: usize,
    pos: f64,
    vel: f64,
    t: usize,
}

impl Default for PointMass {
    fn default() -> Self {
        Self {
            dt: 0.1,
            max_force: 1.0,
            state_bound: 5.0,
            init_range: 1.0,
            horizon: 100,
            pos: 0.0,
            vel: 0.0,
            t: 0,
        }
    }
}

impl PointMass {
    pub fn state(&self) -> [f64; 2] {
        [self.pos, self.vel]
    }
}

impl Environment for PointMass {
    fn name(&self) -> &str {
        "pointmass"
    }

    fn observation_dim(&self) -> usize {
        2
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous(1)
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.pos = rng.gen_range(-self.init_range..=self.init_range);
        self.vel = 0.0;
        self.t = 0;
        vec![self.pos, self.vel]
    }

    fn step(&mut self, action: &Action, _rng: &mut ChaCha8Rng) -> Result<Step> {
        let force = match action {
            Action::Continuous(x) if x.len() == 1 => {
                if !x[0].is_finite() {
                    return Err(Error::input("non-finite force"));
                }
                x[0].clamp(-self.max_force, self.max_force)
            }
            _ => return Err(Error::input("pointmass takes a 1-dim continuous action")),
        };
        let reward = -(self.pos * self.pos + 0.1 * force * force);
        self.pos = (self.pos + self.vel * self.dt).clamp(-self.state_bound, self.state_bound);
        self.vel = (self.vel + force * self.dt).clamp(-self.state_bound, self.state_bound);
        self.t += 1;
        Ok(Step {
            observation: vec![self.pos, self.vel],
            reward,
            terminated: false,
            truncated: self.t >= self.horizon,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn huge_forces_keep_state_bounded() {
        let mut env = PointMass::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        env.reset(&mut rng);
        for _ in 0..1000 {
            let s = env.step(&Action::Continuous(vec![1e9]), &mut rng).unwrap();
            assert!(s.observation.iter().all(|x| x.is_finite() && x.abs() <= 5.0));
            assert!(s.reward.is_finite());
        }
    }

    #[test]
    fn integrates_linearly() {
        let mut env = PointMass::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        env.reset(&mut rng);
        let p0 = env.state()[0];
        let s = env.step(&Action::Continuous(vec![0.5]), &mut rng).unwrap();
        assert_eq!(s.observation, vec![p0, 0.05]);
        assert!((s.reward + (p0 * p0 + 0.1 * 0.25)).abs() < 1e-15);
        let s = env.step(&Action::Continuous(vec![0.0]), &mut rng).unwrap();
        assert!((s.observation[0] - (p0 + 0.005)).abs() < 1e-15);
    }

    #[test]
    fn truncates_at_horizon() {
        let mut env = PointMass { horizon: 3, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        env.reset(&mut rng);
        let flags: Vec<bool> = (0..3)
            .map(|_| env.step(&Action::Continuous(vec![0.0]), &mut rng).unwrap().truncated)
            .collect();
        assert_eq!(flags, vec![false, false, true]);
    }
}
