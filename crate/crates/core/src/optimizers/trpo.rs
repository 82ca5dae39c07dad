use crate::diff::{
    hessian_vector_product, masked_mean_weights, DistributionParams, KlHead, NetObjective, Objective,
    ParamVector, RatioHead, RatioObjective,
};
use crate::diff::params::dot;
use crate::error::{Error, Result};
use crate::estimation::{dropout_mask, kl_per_sample, ratios, DropoutMask};

use super::value::value_update;
use super::{mean, Algo, AlgoConfig, Learner, MinibatchDump, UpdateData, UpdateReport};

/// Solves `A x = b` for symmetric positive-definite `A` given as a matrix-vector product.
/// Stops after `max_iters` iterations or once the squared residual drops below `tol`.
pub fn conjugate_gradient<F>(mut apply: F, b: &[f64], max_iters: usize, tol: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut x = vec![0.0; b.len()];
    let mut r = b.to_vec();
    let mut p = b.to_vec();
    let mut rr = dot(&r, &r);
    for _ in 0..max_iters {
        if rr < tol {
            break;
        }
        let ap = apply(&p)?;
        let pap = dot(&p, &ap);
        if pap.is_nan() || pap <= 0.0 {
            return Err(Error::numerical(0, format!("conjugate gradient curvature {pap}")));
        }
        let alpha = rr / pap;
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_next = dot(&r, &r);
        let beta = rr_next / rr;
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_next;
    }
    Ok(x)
}

const CG_TOL: f64 = 1e-10;

/// Masked surrogate mean(r·A) over kept samples, with the mask taken at `params`.
struct SurrogateEval {
    value: f64,
    ratios: Vec<f64>,
    mask: DropoutMask,
    kl: Vec<f64>,
}

/// One trust-region step on the full batch followed by the value fit.
pub fn trpo_update(learner: &mut Learner, data: &UpdateData, config: &AlgoConfig) -> Result<UpdateReport> {
    if config.algo != Algo::Trpo {
        return Err(Error::config("trpo_update called with a non-TRPO config"));
    }
    if data.is_empty() {
        return Err(Error::input("update needs at least one sample"));
    }
    let policy = &learner.policy;
    let n = data.len();
    let old_outputs: Vec<Vec<f64>> = data
        .states
        .iter()
        .map(|s| policy.net().forward(learner.params.values(), s))
        .collect::<Result<_>>()?;
    let old_extra = learner.params.values()[policy.net().param_count()..].to_vec();
    let old: Vec<DistributionParams> = old_outputs
        .iter()
        .map(|o| policy.head(o.clone(), learner.params.values()))
        .collect();

    let evaluate = |params: &ParamVector| -> Result<SurrogateEval> {
        let r = ratios(policy, params, &data.states, &data.actions, &data.log_prob_old)?;
        let kl = kl_per_sample(policy, params, &data.states, &old)?;
        let mask = match config.sd_rule() {
            Some(rule) => dropout_mask(&rule, &r, Some(&kl))?,
            None => DropoutMask::all(n),
        };
        let value = match masked_mean_weights(&mask.keep) {
            Some(w) => r.iter().zip(&data.advantages).zip(&w).map(|((r, a), w)| w * r * a).sum(),
            None => f64::NEG_INFINITY,
        };
        Ok(SurrogateEval {
            value,
            ratios: r,
            mask,
            kl,
        })
    };

    let start = evaluate(&learner.params)?;
    let mut report = UpdateReport {
        surrogate_before: mean(&start.ratios.iter().zip(&data.advantages).map(|(r, a)| r * a).collect::<Vec<_>>()),
        epochs_run: 1,
        minibatches_total: 1,
        ..Default::default()
    };

    let mut final_eval = None;
    if let Some(weights) = masked_mean_weights(&start.mask.keep) {
        let head = RatioHead {
            kind: policy.kind(),
            actions: &data.actions,
            log_prob_old: &data.log_prob_old,
            advantages: &data.advantages,
            weights,
            objective: RatioObjective::Surrogate,
        };
        let (_, loss_grad) = NetObjective::for_policy(policy, &data.states, head)?.value_and_gradient(&learner.params)?;
        let mut g = loss_grad;
        g.scale(-1.0);
        if g.values().iter().any(|v| *v != 0.0) {
            let kl_objective = NetObjective::for_policy(
                policy,
                &data.states,
                KlHead {
                    kind: policy.kind(),
                    old_outputs: &old_outputs,
                    old_extra: &old_extra,
                    weights: vec![1.0 / n as f64; n],
                },
            )?;
            let apply = |v: &[f64]| -> Result<Vec<f64>> {
                let v = learner.params.with_values(v.to_vec())?;
                Ok(hessian_vector_product(&kl_objective, &learner.params, &v, config.damping)?.into_values())
            };
            let x = conjugate_gradient(apply, g.values(), config.cg_iters, CG_TOL)?;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical(0, "non-finite conjugate gradient solution"));
            }
            let x = learner.params.with_values(x)?;
            let shs = dot(x.values(), hessian_vector_product(&kl_objective, &learner.params, &x, config.damping)?.values());
            if !shs.is_finite() || shs <= 0.0 {
                return Err(Error::numerical(0, format!("step curvature {shs}")));
            }
            let full_scale = (2.0 * config.rho_tr / shs).sqrt();
            let mut frac = 1.0;
            for k in 0..config.backtrack_iters {
                report.line_search_steps = k + 1;
                let mut candidate = learner.params.clone();
                candidate.axpy(frac * full_scale, &x);
                let eval = evaluate(&candidate)?;
                let kl = mean(&eval.kl);
                if kl <= config.rho_tr && eval.value > start.value {
                    learner.params = candidate;
                    report.accepted = true;
                    final_eval = Some(eval);
                    break;
                }
                frac *= config.backtrack_coef;
            }
        }
    } else {
        report.minibatches_skipped = 1;
    }
    let end = match final_eval {
        Some(e) => e,
        None => start,
    };
    report.surrogate_after = mean(&end.ratios.iter().zip(&data.advantages).map(|(r, a)| r * a).collect::<Vec<_>>());
    report.kl_mean = mean(&end.kl);
    report.dumps.push(MinibatchDump {
        epoch: 0,
        ratios: end.ratios,
        advantages: data.advantages.clone(),
        keep: end.mask.keep.clone(),
    });
    let value_keep = config.sd.then_some(end.mask.keep.as_slice());
    report.value_loss = value_update(
        &learner.value_net,
        &mut learner.value_params,
        &mut learner.value_adam,
        &data.states,
        &data.returns,
        value_keep,
        config.value_iters,
        config.value_lr,
    )?
    .unwrap_or(0.0);
    Ok(report)
}
