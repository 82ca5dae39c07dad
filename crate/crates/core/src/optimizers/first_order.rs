use rand::seq::SliceRandom;
use rand::Rng;

use crate::diff::{
    masked_mean_weights, DistributionParams, NetObjective, Objective, RatioHead, RatioObjective,
};
use crate::error::{Error, Result};
use crate::estimation::{distributions, dropout_mask, kl_per_sample, ratios, DropoutMask};

use super::value::value_loss_and_gradient;
use super::{mean, Algo, AlgoConfig, Learner, MinibatchDump, UpdateData, UpdateReport};

/// Negative masked mean of the clipped objective and its gradient with respect to each
/// ratio. `None` when the mask keeps nothing.
pub fn ppo_loss(ratios: &[f64], advantages: &[f64], epsilon: f64, mask: &[bool]) -> Option<(f64, Vec<f64>)> {
    let weights = masked_mean_weights(mask)?;
    let objective = RatioObjective::Clipped { epsilon };
    let mut loss = 0.0;
    let grad = ratios
        .iter()
        .zip(advantages)
        .zip(&weights)
        .map(|((&r, &a), &w)| {
            if w == 0.0 {
                return 0.0;
            }
            let (f, df) = objective.eval(r, a);
            loss -= w * f;
            -w * df
        })
        .collect();
    Some((loss, grad))
}

/// Clipped-surrogate minibatch ascent for `config.epochs` epochs.
pub fn ppo_update<R: Rng + ?Sized>(
    learner: &mut Learner,
    data: &UpdateData,
    config: &AlgoConfig,
    lr: f64,
    rng: &mut R,
) -> Result<UpdateReport> {
    if config.algo != Algo::Ppo {
        return Err(Error::config("ppo_update called with a non-PPO config"));
    }
    run_epochs(
        learner,
        data,
        config,
        lr,
        rng,
        RatioObjective::Clipped {
            epsilon: config.epsilon,
        },
        None,
    )
}

/// Unclipped-surrogate minibatch ascent, stopping before any epoch whose full-batch
/// mean ratio deviation has reached `config.delta_es`.
pub fn espo_update<R: Rng + ?Sized>(
    learner: &mut Learner,
    data: &UpdateData,
    config: &AlgoConfig,
    lr: f64,
    rng: &mut R,
) -> Result<UpdateReport> {
    if config.algo != Algo::Espo {
        return Err(Error::config("espo_update called with a non-ESPO config"));
    }
    run_epochs(
        learner,
        data,
        config,
        lr,
        rng,
        RatioObjective::Surrogate,
        Some(config.delta_es),
    )
}

fn mask_for(
    config: &AlgoConfig,
    learner: &Learner,
    states: &[Vec<f64>],
    ratios: &[f64],
    old: &[DistributionParams],
) -> Result<DropoutMask> {
    match config.sd_rule() {
        None => Ok(DropoutMask::all(ratios.len())),
        Some(rule) if rule.needs_kl() => {
            let kl = kl_per_sample(&learner.policy, &learner.params, states, old)?;
            dropout_mask(&rule, ratios, Some(&kl))
        }
        Some(rule) => dropout_mask(&rule, ratios, None),
    }
}

fn run_epochs<R: Rng + ?Sized>(
    learner: &mut Learner,
    data: &UpdateData,
    config: &AlgoConfig,
    lr: f64,
    rng: &mut R,
    objective: RatioObjective,
    early_stop: Option<f64>,
) -> Result<UpdateReport> {
    if data.is_empty() {
        return Err(Error::input("update needs at least one sample"));
    }
    let n = data.len();
    let old = distributions(&learner.policy, &learner.params, &data.states)?;
    let surrogate_of = |learner: &Learner| -> Result<(f64, Vec<f64>)> {
        let r = ratios(&learner.policy, &learner.params, &data.states, &data.actions, &data.log_prob_old)?;
        let s = mean(&r.iter().zip(&data.advantages).map(|(r, a)| r * a).collect::<Vec<_>>());
        Ok((s, r))
    };
    let mut report = UpdateReport {
        surrogate_before: surrogate_of(learner)?.0,
        accepted: true,
        ..Default::default()
    };
    let mut value_losses = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        if let Some(threshold) = early_stop {
            let (_, r) = surrogate_of(learner)?;
            let deviation = mean(&r.iter().map(|r| (r - 1.0).abs()).collect::<Vec<_>>());
            report.deviations.push(deviation);
            if deviation >= threshold {
                report.early_stopped = true;
                break;
            }
        }
        order.shuffle(rng);
        for chunk in order.chunks(config.minibatch) {
            report.minibatches_total += 1;
            let sub = data.subset(chunk);
            let sub_old: Vec<DistributionParams> = chunk.iter().map(|&i| old[i].clone()).collect();
            let r = ratios(&learner.policy, &learner.params, &sub.states, &sub.actions, &sub.log_prob_old)
                .map_err(|e| remap_index(e, chunk))?;
            let mask = mask_for(config, learner, &sub.states, &r, &sub_old)?;
            report.dumps.push(MinibatchDump {
                epoch,
                ratios: r,
                advantages: sub.advantages.clone(),
                keep: mask.keep.clone(),
            });
            let Some(weights) = masked_mean_weights(&mask.keep) else {
                log::debug!("epoch {epoch}: minibatch fully dropped, skipping");
                report.minibatches_skipped += 1;
                continue;
            };
            let head = RatioHead {
                kind: learner.policy.kind(),
                actions: &sub.actions,
                log_prob_old: &sub.log_prob_old,
                advantages: &sub.advantages,
                weights,
                objective,
            };
            let (_, grad) = NetObjective::for_policy(&learner.policy, &sub.states, head)?
                .value_and_gradient(&learner.params)
                .map_err(|e| remap_index(e, chunk))?;
            if !grad.all_finite() {
                return Err(Error::numerical(chunk[0], "non-finite policy gradient"));
            }
            learner.policy_adam.step(&mut learner.params, &grad, lr);

            if let Some((loss, vgrad)) = value_loss_and_gradient(
                &learner.value_net,
                &learner.value_params,
                &sub.states,
                &sub.returns,
                Some(&mask.keep),
            )? {
                if !vgrad.all_finite() {
                    return Err(Error::numerical(chunk[0], "non-finite value gradient"));
                }
                learner.value_adam.step(&mut learner.value_params, &vgrad, lr);
                value_losses.push(loss);
            }
        }
        report.epochs_run += 1;
    }
    report.surrogate_after = surrogate_of(learner)?.0;
    report.kl_mean = mean(&kl_per_sample(&learner.policy, &learner.params, &data.states, &old)?);
    report.value_loss = mean(&value_losses);
    if !learner.params.all_finite() || !learner.value_params.all_finite() {
        return Err(Error::numerical(0, "parameters became non-finite"));
    }
    Ok(report)
}

/// Maps a minibatch-local sample index in a numerical error back to the batch index.
fn remap_index(e: Error, chunk: &[usize]) -> Error {
    match e {
        Error::Numerical { index, message } if index < chunk.len() => Error::Numerical {
            index: chunk[index],
            message,
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_ratios_give_negative_mean_advantage() {
        let adv = [0.3, -1.2, 2.0, 0.5];
        for eps in [0.05, 0.2, 0.9] {
            let (loss, _) = ppo_loss(&[1.0; 4], &adv, eps, &[true; 4]).unwrap();
            assert!((loss + adv.iter().sum::<f64>() / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_sample_clip() {
        let (loss, grad) = ppo_loss(&[1.5], &[1.0], 0.2, &[true]).unwrap();
        assert!((loss + 1.2).abs() < 1e-15);
        assert_eq!(grad, vec![0.0]);
    }

    #[test]
    fn empty_mask_signals_skip() {
        assert!(ppo_loss(&[1.0, 2.0], &[1.0, 1.0], 0.2, &[false, false]).is_none());
    }

    #[test]
    fn dropped_samples_have_no_gradient() {
        let (_, grad) = ppo_loss(&[0.9, 1.1, 3.0], &[1.0, -1.0, 5.0], 0.2, &[true, true, false]).unwrap();
        assert_eq!(grad[2], 0.0);
        assert_eq!(grad[0], -0.5);
    }
}
