use crate::diff::{masked_mean_weights, Mlp, NetObjective, Objective, ParamVector, SquaredErrorHead};
use crate::error::{Error, Result};

use super::Adam;

/// Masked mean squared error `Σ_kept (V(s) − R)² / kept` and its gradient.
/// `None` when the mask keeps nothing.
pub fn value_loss_and_gradient(
    net: &Mlp,
    params: &ParamVector,
    states: &[Vec<f64>],
    returns: &[f64],
    keep: Option<&[bool]>,
) -> Result<Option<(f64, ParamVector)>> {
    if states.len() != returns.len() || keep.is_some_and(|k| k.len() != states.len()) {
        return Err(Error::config("value inputs must have equal length"));
    }
    let all;
    let keep = match keep {
        Some(k) => k,
        None => {
            all = vec![true; states.len()];
            &all
        }
    };
    let Some(weights) = masked_mean_weights(keep) else {
        return Ok(None);
    };
    let objective = NetObjective::new(
        net,
        0,
        states,
        SquaredErrorHead {
            targets: returns,
            weights,
        },
    )?;
    objective.value_and_gradient(params).map(Some)
}

/// `iters` full-batch Adam steps on the masked value loss. Leaves `params` untouched and
/// returns `None` when the mask is empty; otherwise returns the loss before the last step.
#[allow(clippy::too_many_arguments)]
pub fn value_update(
    net: &Mlp,
    params: &mut ParamVector,
    adam: &mut Adam,
    states: &[Vec<f64>],
    returns: &[f64],
    keep: Option<&[bool]>,
    iters: usize,
    lr: f64,
) -> Result<Option<f64>> {
    let mut last = None;
    for _ in 0..iters {
        let Some((loss, grad)) = value_loss_and_gradient(net, params, states, returns, keep)? else {
            return Ok(None);
        };
        if !grad.all_finite() {
            return Err(Error::numerical(0, "non-finite value gradient"));
        }
        adam.step(params, &grad, lr);
        last = Some(loss);
    }
    Ok(last)
}
