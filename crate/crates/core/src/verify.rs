//! Runtime oracle and property checks behind `sdpo verify`.
//!
//! Each check compares an implementation against an independent reference (brute-force
//! sums, dense solves, fixed-point iteration, finite differences, exact enumeration) and
//! reports the worst discrepancy it saw.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distributions::{Distribution, WeightedIndex};

use crate::diagnostics::{empirical_is_variance, variance_bound};
use crate::diff::{
    masked_mean_weights, Action, MlpSpec, NetObjective, Objective, ParamVector, PolicySpec, RatioHead,
    RatioObjective,
};
use crate::envs::{chain5, gridworld4x4, rollout, DiscreteMdp, make_env};
use crate::error::Result;
use crate::estimation::{dropout_mask, gae, ratios, Batch, DropoutMode, DropoutRule};
use crate::optimizers::{
    conjugate_gradient, value_loss_and_gradient, Algo, AlgoConfig, Learner, UpdateData,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match f() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Runs every check. `quick` shrinks Monte-Carlo sample counts by 10×.
pub fn run_checks(quick: bool) -> Vec<Check> {
    let draws = if quick { 100_000 } else { 1_000_000 };
    vec![
        check("gae_vs_double_sum", gae_vs_double_sum),
        check("cg_vs_dense_solve", cg_vs_dense_solve),
        check("exact_values_vs_fixed_point", exact_values_vs_fixed_point),
        check("gradient_finite_differences", gradients_vs_finite_differences),
        check("is_estimator_unbiased", || is_estimator_unbiased(draws)),
        check("variance_bound_finite_sample", variance_bound_finite_sample),
        check("variance_bound_exact_enumeration", variance_bound_exact),
        check("mask_semantics", mask_semantics),
        check("infinite_threshold_reduces_to_baseline", infinite_threshold_bit_exact),
        check("trpo_kl_constraint", trpo_kl_constraint),
        check("espo_early_stop", espo_early_stop),
    ]
}

fn gae_vs_double_sum() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (gamma, lambda) = (0.99, 0.95);
    let mut worst = 0.0_f64;
    for _ in 0..200 {
        let n = 4;
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..=n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dones: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        let adv = gae(&r, &v, &dones, gamma, lambda)?;
        for t in 0..n {
            let mut sum = 0.0;
            let mut weight = 1.0;
            for l in t..n {
                let next = if dones[l] { 0.0 } else { v[l + 1] };
                sum += weight * (r[l] + gamma * next - v[l]);
                if dones[l] {
                    break;
                }
                weight *= gamma * lambda;
            }
            worst = worst.max((sum - adv[t]).abs());
        }
    }
    Ok((worst < 1e-12, format!("max abs error {worst:.2e}")))
}

fn cg_vs_dense_solve() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let m = DMatrix::from_fn(6, 6, |_, _| rng.gen_range(-1.0..1.0));
        let a = &m * m.transpose() + DMatrix::identity(6, 6) * 0.1;
        let b = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
        let direct = a.clone().lu().solve(&b).expect("SPD");
        let x = conjugate_gradient(|v| Ok((&a * DVector::from_column_slice(v)).as_slice().to_vec()), b.as_slice(), 10, 1e-30)?;
        for i in 0..6 {
            worst = worst.max((x[i] - direct[i]).abs());
        }
    }
    Ok((worst < 1e-8, format!("max abs error {worst:.2e}")))
}

fn random_table(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let w: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

fn fixed_point_values(mdp: &DiscreteMdp, pi: &[Vec<f64>]) -> Vec<f64> {
    let (n, m) = (mdp.n_states, mdp.n_actions);
    let mut v = vec![0.0; n];
    for _ in 0..20_000 {
        let next: Vec<f64> = (0..n)
            .map(|s| {
                (0..m)
                    .map(|a| {
                        let p = mdp.p(s, a);
                        pi[s][a] * (mdp.r(s, a) + mdp.gamma * p.iter().zip(&v).map(|(p, v)| p * v).sum::<f64>())
                    })
                    .sum()
            })
            .collect();
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < 1e-14 {
            break;
        }
    }
    v
}

fn exact_values_vs_fixed_point() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0_f64;
    for mdp in [chain5(), gridworld4x4()] {
        for _ in 0..5 {
            let pi = random_table(&mut rng, mdp.n_states, mdp.n_actions);
            let exact = mdp.exact_values(&pi)?;
            let fp = fixed_point_values(&mdp, &pi);
            for (a, b) in exact.v.iter().zip(&fp) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok((worst < 1e-10, format!("max abs error {worst:.2e}")))
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn fd_check<O: Objective>(objective: &O, params: &ParamVector) -> Result<f64> {
    let (_, g) = objective.value_and_gradient(params)?;
    let h = 1e-5;
    let mut worst = 0.0_f64;
    for i in 0..params.len() {
        let mut plus = params.clone();
        plus.values_mut()[i] += h;
        let mut minus = params.clone();
        minus.values_mut()[i] -= h;
        let fd = (objective.value(&plus)? - objective.value(&minus)?) / (2.0 * h);
        worst = worst.max(rel_error(g.values()[i], fd));
    }
    Ok(worst)
}

struct Draw {
    policy: crate::diff::Policy,
    params: ParamVector,
    states: Vec<Vec<f64>>,
    actions: Vec<Action>,
    log_prob_old: Vec<f64>,
    advantages: Vec<f64>,
}

fn random_draw(rng: &mut ChaCha8Rng, gaussian: bool) -> Result<Draw> {
    let spec = if gaussian {
        PolicySpec::gaussian(3, vec![5], 2)
    } else {
        PolicySpec::categorical(3, vec![5], 3)
    };
    let policy = crate::diff::Policy::new(spec)?;
    let mut old = policy.init_params(rng);
    for v in old.values_mut() {
        *v += rng.gen_range(-0.3..0.3);
    }
    let mut params = old.clone();
    for v in params.values_mut() {
        *v += rng.gen_range(-0.2..0.2);
    }
    let n = 8;
    let states: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let mut actions = Vec::with_capacity(n);
    let mut log_prob_old = Vec::with_capacity(n);
    for s in &states {
        let d = policy.distribution(&old, s)?;
        let a = d.sample(rng);
        log_prob_old.push(d.log_prob(&a)?);
        actions.push(a);
    }
    let advantages = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Ok(Draw {
        policy,
        params,
        states,
        actions,
        log_prob_old,
        advantages,
    })
}

fn gradients_vs_finite_differences() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let epsilon = 0.2;
    let (mut clipped, mut masked, mut value) = (0.0_f64, 0.0_f64, 0.0_f64);
    let mut draws = 0;
    while draws < 100 {
        let d = random_draw(&mut rng, draws % 2 == 1)?;
        let r = ratios(&d.policy, &d.params, &d.states, &d.actions, &d.log_prob_old)?;
        // The clipped objective has kinks at 1 ± ε; finite differences straddling one
        // are meaningless.
        if r.iter().any(|r| (r - 1.0 - epsilon).abs() < 1e-3 || (r - 1.0 + epsilon).abs() < 1e-3) {
            continue;
        }
        draws += 1;
        let all = vec![1.0 / r.len() as f64; r.len()];
        let head = |weights: Vec<f64>, objective| RatioHead {
            kind: d.policy.kind(),
            actions: &d.actions,
            log_prob_old: &d.log_prob_old,
            advantages: &d.advantages,
            weights,
            objective,
        };
        let obj = NetObjective::for_policy(&d.policy, &d.states, head(all, RatioObjective::Clipped { epsilon }))?;
        clipped = clipped.max(fd_check(&obj, &d.params)?);

        let keep: Vec<bool> = (0..r.len()).map(|_| rng.gen_bool(0.6)).collect();
        if let Some(w) = masked_mean_weights(&keep) {
            let obj = NetObjective::for_policy(&d.policy, &d.states, head(w, RatioObjective::Surrogate))?;
            masked = masked.max(fd_check(&obj, &d.params)?);
        }

        let net = crate::diff::Mlp::new(MlpSpec::new(3, vec![5], 1))?;
        let vp = ParamVector::from_values(net.init_params(&mut rng, 1.0, 1.0));
        let targets: Vec<f64> = (0..r.len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (_, g) = value_loss_and_gradient(&net, &vp, &d.states, &targets, Some(&keep))?
            .unwrap_or((0.0, vp.zeros_like()));
        let h = 1e-5;
        for i in 0..vp.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut p = vp.clone();
                p.values_mut()[i] += delta;
                Ok(value_loss_and_gradient(&net, &p, &d.states, &targets, Some(&keep))?.map_or(0.0, |x| x.0))
            };
            let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
            value = value.max(rel_error(g.values()[i], fd));
        }
    }
    let worst = clipped.max(masked).max(value);
    Ok((
        worst < 1e-4,
        format!("max rel error: clipped {clipped:.1e}, masked surrogate {masked:.1e}, value {value:.1e}"),
    ))
}

/// Fixed policy pair on `chain5`: behavior π from `a`, target π̃ from `b`.
fn policy_pair(rng: &mut ChaCha8Rng, mdp: &DiscreteMdp) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    (
        random_table(rng, mdp.n_states, mdp.n_actions),
        random_table(rng, mdp.n_states, mdp.n_actions),
    )
}

fn is_estimator_unbiased(draws: usize) -> Result<(bool, String)> {
    let mdp = chain5();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (pi, target) = policy_pair(&mut rng, &mdp);
    let values = mdp.exact_values(&pi)?;
    let d = mdp.discounted_visitation(&pi)?;
    let m = mdp.n_actions;
    let expected: f64 = (0..mdp.n_states)
        .map(|s| d[s] * (0..m).map(|a| target[s][a] * values.advantage(s, a)).sum::<f64>())
        .sum();
    let state_dist = WeightedIndex::new(&d).expect("visitation is a distribution");
    let action_dists: Vec<WeightedIndex<f64>> = pi.iter().map(|p| WeightedIndex::new(p).expect("probabilities")).collect();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..draws {
        let s = state_dist.sample(&mut rng);
        let a = action_dists[s].sample(&mut rng);
        let x = target[s][a] / pi[s][a] * values.advantage(s, a);
        sum += x;
        sum_sq += x * x;
    }
    let n = draws as f64;
    let mean = sum / n;
    let se = ((sum_sq / n - mean * mean) / n).sqrt();
    let z = (mean - expected).abs() / se;
    Ok((z < 4.0, format!("estimate {mean:.6} vs exact {expected:.6}, {z:.2} standard errors")))
}

fn variance_bound_finite_sample() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut violations = 0;
    for _ in 0..10_000 {
        let n = rng.gen_range(2..64);
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let (_, var) = empirical_is_variance(&r, &a)?;
        if variance_bound(&r, &a)? < var {
            violations += 1;
        }
    }
    Ok((violations == 0, format!("{violations} violations in 10000 batches")))
}

fn variance_bound_exact() -> Result<(bool, String)> {
    let mdp = chain5();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut min_gap = f64::INFINITY;
    for _ in 0..50 {
        let (pi, target) = policy_pair(&mut rng, &mdp);
        let values = mdp.exact_values(&pi)?;
        let d = mdp.discounted_visitation(&pi)?;
        let xi = values.advantage.iter().fold(0.0_f64, |m, a| m.max(a.abs()));
        let (mut e_ra, mut e_ra2, mut e_r2) = (0.0, 0.0, 0.0);
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                let w = d[s] * pi[s][a];
                let r = target[s][a] / pi[s][a];
                let adv = values.advantage(s, a);
                e_ra += w * r * adv;
                e_ra2 += w * (r * adv).powi(2);
                e_r2 += w * r * r;
            }
        }
        let sigma = e_ra2 - e_ra * e_ra;
        let bound = xi * xi * e_r2 - e_ra * e_ra;
        min_gap = min_gap.min(bound - sigma);
    }
    Ok((min_gap >= 0.0, format!("min(bound − σ) over 50 pairs {min_gap:.3e}")))
}

fn mask_semantics() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut bad = 0;
    for _ in 0..1000 {
        // dyadic thresholds keep 1 + δ exactly representable, so sample 0 sits on the boundary
        let delta = rng.gen_range(1..96) as f64 / 64.0;
        let r: Vec<f64> = (0..32)
            .map(|i| if i == 0 { 1.0 + delta } else { rng.gen_range(0.0..3.0) })
            .collect();
        let two = dropout_mask(&DropoutRule::new(DropoutMode::TwoSide, delta)?, &r, None)?;
        let left = dropout_mask(&DropoutRule::new(DropoutMode::LeftSide, delta)?, &r, None)?;
        let right = dropout_mask(&DropoutRule::new(DropoutMode::RightSide, delta)?, &r, None)?;
        for i in 0..r.len() {
            let strict = ((r[i] - 1.0).abs() < delta) == two.keep[i];
            let and = two.keep[i] == (left.keep[i] && right.keep[i]);
            if !strict || !and {
                bad += 1;
            }
        }
        if two.keep[0] {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("{bad} mismatching samples")))
}

fn toy_learner(seed: u64) -> Result<Learner> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Learner::new(
        PolicySpec::categorical(5, vec![16], 2),
        MlpSpec::new(5, vec![16], 1),
        &mut rng,
    )
}

fn toy_data(learner: &Learner, seed: u64, n: usize) -> Result<UpdateData> {
    let ts = rollout(make_env("chain5")?, &learner.policy, &learner.params, n, seed)?;
    let batch = Batch::build(ts, None, &learner.value_net, &learner.value_params, 0.99, 0.95, true)?;
    Ok(UpdateData::from_batch(&batch))
}

fn infinite_threshold_bit_exact() -> Result<(bool, String)> {
    let mut mismatches = Vec::new();
    for algo in [Algo::Ppo, Algo::Espo, Algo::Trpo] {
        let base = toy_learner(9)?;
        let data = toy_data(&base, 10, 256)?;
        let mut plain_cfg = AlgoConfig::defaults(algo);
        plain_cfg.minibatch = plain_cfg.minibatch.min(64);
        plain_cfg.lr = 1e-2;
        let mut sd_cfg = plain_cfg.clone();
        sd_cfg.sd = true;
        sd_cfg.rule = DropoutRule::new(sd_cfg.rule.mode(), f64::INFINITY)?;
        let mut a = base.clone();
        let mut b = base.clone();
        a.update(&data, &plain_cfg, plain_cfg.lr, &mut ChaCha8Rng::seed_from_u64(11))?;
        b.update(&data, &sd_cfg, sd_cfg.lr, &mut ChaCha8Rng::seed_from_u64(11))?;
        if a.params != b.params || a.value_params != b.value_params {
            mismatches.push(algo.name());
        }
    }
    Ok((mismatches.is_empty(), format!("mismatching algorithms: {mismatches:?}")))
}

fn trpo_kl_constraint() -> Result<(bool, String)> {
    let mut learner = toy_learner(12)?;
    let cfg = AlgoConfig::defaults(Algo::Trpo);
    let (mut accepted, mut worst) = (0, 0.0_f64);
    let mut rejected_moved = 0;
    for i in 0..40 {
        let data = toy_data(&learner, 100 + i, 512)?;
        let before = learner.params.clone();
        let report = learner.update(&data, &cfg, 0.0, &mut ChaCha8Rng::seed_from_u64(i))?;
        if report.accepted {
            accepted += 1;
            let old = crate::estimation::distributions(&learner.policy, &before, &data.states)?;
            let kl = crate::estimation::kl_per_sample(&learner.policy, &learner.params, &data.states, &old)?;
            worst = worst.max(kl.iter().sum::<f64>() / kl.len() as f64);
        } else if learner.params != before {
            rejected_moved += 1;
        }
    }
    Ok((
        worst <= cfg.rho_tr && rejected_moved == 0,
        format!("{accepted} accepted steps, max KL {worst:.3e}, {rejected_moved} rejected steps moved parameters"),
    ))
}

fn espo_early_stop() -> Result<(bool, String)> {
    let base = toy_learner(13)?;
    let data = toy_data(&base, 14, 512)?;
    let mut cfg = AlgoConfig::defaults(Algo::Espo);
    cfg.lr = 0.05;
    let mut fast = base.clone();
    let report = fast.update(&data, &cfg, cfg.lr, &mut ChaCha8Rng::seed_from_u64(15))?;
    let last = report.deviations.last().copied().unwrap_or(0.0);
    let stopped = report.early_stopped && last >= cfg.delta_es;
    let mut still = base.clone();
    let frozen = still.update(&data, &cfg, 0.0, &mut ChaCha8Rng::seed_from_u64(15))?;
    let full = !frozen.early_stopped && frozen.epochs_run == cfg.epochs;
    Ok((
        stopped && full,
        format!(
            "large lr: stopped {} after {} epochs at deviation {last:.3}; zero lr: {} epochs",
            report.early_stopped, report.epochs_run, frozen.epochs_run
        ),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_checks_pass() {
        for c in run_checks(true) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
