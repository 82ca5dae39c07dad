//! Differentiable scalar objectives over a [`ParamVector`].
//!
//! Network objectives are sums of per-sample *head losses*: each head sees the raw network
//! output for one sample together with any head parameters stored after the backbone
//! (the gaussian log-std), and returns the loss plus its derivatives in that small space.
//! The network part of the chain rule is handled by [`Mlp::backward`] and, for curvature,
//! by the R-operator passes [`Mlp::forward_tangent`] / [`Mlp::backward_rop`].

use crate::error::{Error, Result};

use super::mlp::Mlp;
use super::params::ParamVector;
use super::policy::{log_softmax, Action, Policy, PolicyKind};

pub trait Objective {
    fn dim(&self) -> usize;

    fn value(&self, params: &ParamVector) -> Result<f64> {
        Ok(self.value_and_gradient(params)?.0)
    }

    fn value_and_gradient(&self, params: &ParamVector) -> Result<(f64, ParamVector)>;
}

/// Objectives that can also apply their exact Hessian to a vector.
pub trait CurvatureObjective: Objective {
    fn hessian_vector(&self, params: &ParamVector, v: &ParamVector) -> Result<ParamVector>;
}

/// Exact gradient of `objective` at `params`.
pub fn gradient<O: Objective + ?Sized>(objective: &O, params: &ParamVector) -> Result<ParamVector> {
    Ok(objective.value_and_gradient(params)?.1)
}

/// `(H + damping·I) v` where `H` is the Hessian of `objective` at `params`.
pub fn hessian_vector_product<O: CurvatureObjective + ?Sized>(
    objective: &O,
    params: &ParamVector,
    v: &ParamVector,
    damping: f64,
) -> Result<ParamVector> {
    if v.len() != params.len() {
        return Err(Error::config(format!(
            "direction has {} entries, parameters {}",
            v.len(),
            params.len()
        )));
    }
    let mut hv = objective.hessian_vector(params, v)?;
    hv.axpy(damping, v);
    Ok(hv)
}

/// `½ xᵀ A x + bᵀ x + c` with symmetric `A` stored row-major.
#[derive(Debug, Clone)]
pub struct Quadratic {
    n: usize,
    matrix: Vec<f64>,
    linear: Vec<f64>,
    constant: f64,
}

impl Quadratic {
    pub fn new(matrix: Vec<f64>, linear: Vec<f64>, constant: f64) -> Result<Self> {
        let n = linear.len();
        if matrix.len() != n * n {
            return Err(Error::config("quadratic form matrix must be n × n"));
        }
        Ok(Self {
            n,
            matrix,
            linear,
            constant,
        })
    }

    /// `½‖x‖²`
    pub fn half_squared_norm(n: usize) -> Self {
        let mut matrix = vec![0.0; n * n];
        for i in 0..n {
            matrix[i * n + i] = 1.0;
        }
        Self::new(matrix, vec![0.0; n], 0.0).expect("square by construction")
    }

    pub fn constant(n: usize, c: f64) -> Self {
        Self::new(vec![0.0; n * n], vec![0.0; n], c).expect("square by construction")
    }

    fn mat_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                self.matrix[i * self.n..(i + 1) * self.n]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    fn check(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.n {
            return Err(Error::config(format!(
                "quadratic over {} values given {}",
                self.n,
                params.len()
            )));
        }
        Ok(())
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.n
    }

    fn value_and_gradient(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        self.check(params)?;
        let x = params.values();
        let ax = self.mat_vec(x);
        let value = 0.5 * super::params::dot(x, &ax)
            + super::params::dot(&self.linear, x)
            + self.constant;
        let grad: Vec<f64> = ax.iter().zip(&self.linear).map(|(a, b)| a + b).collect();
        Ok((value, params.with_values(grad)?))
    }
}

impl CurvatureObjective for Quadratic {
    fn hessian_vector(&self, params: &ParamVector, v: &ParamVector) -> Result<ParamVector> {
        self.check(params)?;
        params.with_values(self.mat_vec(v.values()))
    }
}

/// Per-sample loss expressed on the network output and trailing head parameters.
pub trait HeadLoss {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Returns sample `i`'s loss contribution, writing `∂/∂output` into `g_out` and
    /// `∂/∂extra` into `g_extra` (both zeroed by the caller).
    fn eval(
        &self,
        i: usize,
        out: &[f64],
        extra: &[f64],
        g_out: &mut [f64],
        g_extra: &mut [f64],
    ) -> Result<f64>;
}

/// Head losses with second derivatives.
pub trait CurvatureHead: HeadLoss {
    /// Writes the gradient (as in [`HeadLoss::eval`]) and the head-space Hessian applied to
    /// `(r_out, r_extra)` into `h_out` / `h_extra`.
    #[allow(clippy::too_many_arguments)]
    fn hvp(
        &self,
        i: usize,
        out: &[f64],
        extra: &[f64],
        r_out: &[f64],
        r_extra: &[f64],
        g_out: &mut [f64],
        g_extra: &mut [f64],
        h_out: &mut [f64],
        h_extra: &mut [f64],
    ) -> Result<()>;
}

/// Sum over samples of a head loss applied to a network's outputs.
pub struct NetObjective<'a, H> {
    net: &'a Mlp,
    extra_dim: usize,
    inputs: &'a [Vec<f64>],
    head: H,
}

impl<'a, H: HeadLoss> NetObjective<'a, H> {
    pub fn new(net: &'a Mlp, extra_dim: usize, inputs: &'a [Vec<f64>], head: H) -> Result<Self> {
        if inputs.len() != head.len() {
            return Err(Error::config(format!(
                "{} inputs for a head over {} samples",
                inputs.len(),
                head.len()
            )));
        }
        Ok(Self {
            net,
            extra_dim,
            inputs,
            head,
        })
    }

    /// Objective for a policy: the gaussian log-std becomes the head's extra parameters.
    pub fn for_policy(policy: &'a Policy, inputs: &'a [Vec<f64>], head: H) -> Result<Self> {
        Self::new(policy.net(), policy.extra_dim(), inputs, head)
    }

    pub fn head(&self) -> &H {
        &self.head
    }

    fn check(&self, params: &ParamVector) -> Result<()> {
        let want = self.net.param_count() + self.extra_dim;
        if params.len() != want {
            return Err(Error::config(format!(
                "objective over {want} parameters given {}",
                params.len()
            )));
        }
        Ok(())
    }
}

impl<'a, H: HeadLoss> Objective for NetObjective<'a, H> {
    fn dim(&self) -> usize {
        self.net.param_count() + self.extra_dim
    }

    fn value(&self, params: &ParamVector) -> Result<f64> {
        self.check(params)?;
        let p = params.values();
        let n_net = self.net.param_count();
        let extra = &p[n_net..];
        let mut g_out = vec![0.0; self.net.output_dim()];
        let mut g_extra = vec![0.0; self.extra_dim];
        let mut total = 0.0;
        for (i, x) in self.inputs.iter().enumerate() {
            let out = self.net.forward(p, x)?;
            total += self.head.eval(i, &out, extra, &mut g_out, &mut g_extra)?;
        }
        Ok(total)
    }

    fn value_and_gradient(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        self.check(params)?;
        let p = params.values();
        let n_net = self.net.param_count();
        let extra = &p[n_net..];
        let mut grad = params.zeros_like();
        let mut g_out = vec![0.0; self.net.output_dim()];
        let mut g_extra = vec![0.0; self.extra_dim];
        let mut total = 0.0;
        for (i, x) in self.inputs.iter().enumerate() {
            let cache = self.net.forward_cached(p, x)?;
            g_out.iter_mut().for_each(|g| *g = 0.0);
            g_extra.iter_mut().for_each(|g| *g = 0.0);
            total += self
                .head
                .eval(i, cache.output(), extra, &mut g_out, &mut g_extra)?;
            let (g_net, g_tail) = grad.values_mut().split_at_mut(n_net);
            self.net.backward(p, &cache, &g_out, g_net);
            for (a, b) in g_tail.iter_mut().zip(&g_extra) {
                *a += b;
            }
        }
        Ok((total, grad))
    }
}

impl<'a, H: CurvatureHead> CurvatureObjective for NetObjective<'a, H> {
    fn hessian_vector(&self, params: &ParamVector, v: &ParamVector) -> Result<ParamVector> {
        self.check(params)?;
        let p = params.values();
        let vv = v.values();
        let n_net = self.net.param_count();
        let extra = &p[n_net..];
        let r_extra = &vv[n_net..];
        let out_dim = self.net.output_dim();
        let mut hv = params.zeros_like();
        let mut g_out = vec![0.0; out_dim];
        let mut g_extra = vec![0.0; self.extra_dim];
        let mut h_out = vec![0.0; out_dim];
        let mut h_extra = vec![0.0; self.extra_dim];
        for (i, x) in self.inputs.iter().enumerate() {
            let cache = self.net.forward_cached(p, x)?;
            let tangent = self.net.forward_tangent(p, vv, &cache);
            for buf in [&mut g_out, &mut g_extra, &mut h_out, &mut h_extra] {
                buf.iter_mut().for_each(|g| *g = 0.0);
            }
            self.head.hvp(
                i,
                cache.output(),
                extra,
                tangent.output(),
                r_extra,
                &mut g_out,
                &mut g_extra,
                &mut h_out,
                &mut h_extra,
            )?;
            let (h_net, h_tail) = hv.values_mut().split_at_mut(n_net);
            self.net
                .backward_rop(p, vv, &cache, &tangent, &g_out, &h_out, h_net);
            for (a, b) in h_tail.iter_mut().zip(&h_extra) {
                *a += b;
            }
        }
        Ok(hv)
    }
}

/// Writes `∂ log π(a) / ∂(output, extra)` and returns `log π(a)`.
fn log_prob_and_grad(
    kind: PolicyKind,
    out: &[f64],
    extra: &[f64],
    action: &Action,
    g_out: &mut [f64],
    g_extra: &mut [f64],
) -> Result<f64> {
    match (kind, action) {
        (PolicyKind::Categorical { action_count }, Action::Discrete(a)) => {
            if *a >= action_count {
                return Err(Error::input(format!("action {a} out of range")));
            }
            let lp = log_softmax(out);
            for (g, l) in g_out.iter_mut().zip(&lp) {
                *g = -l.exp();
            }
            g_out[*a] += 1.0;
            Ok(lp[*a])
        }
        (PolicyKind::DiagGaussian { .. }, Action::Continuous(x)) => {
            let mut total = 0.0;
            for j in 0..out.len() {
                let inv_std = (-extra[j]).exp();
                let z = (x[j] - out[j]) * inv_std;
                total += -0.5 * z * z - extra[j] - 0.918_938_533_204_672_7;
                g_out[j] = z * inv_std;
                g_extra[j] = z * z - 1.0;
            }
            Ok(total)
        }
        _ => Err(Error::input("action kind does not match policy kind")),
    }
}

/// Per-sample surrogate functions of the importance ratio `r` and advantage `A`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RatioObjective {
    /// `r·A`
    Surrogate,
    /// `min(r·A, clip(r, 1−ε, 1+ε)·A)`
    Clipped { epsilon: f64 },
}

impl RatioObjective {
    /// Value and derivative with respect to `r`.
    pub fn eval(self, r: f64, adv: f64) -> (f64, f64) {
        match self {
            RatioObjective::Surrogate => (r * adv, adv),
            RatioObjective::Clipped { epsilon } => {
                let clipped = r.clamp(1.0 - epsilon, 1.0 + epsilon);
                let unclipped_obj = r * adv;
                let clipped_obj = clipped * adv;
                if unclipped_obj <= clipped_obj {
                    (unclipped_obj, adv)
                } else {
                    // clip(r) is flat outside the interval, and the interior case cannot
                    // reach here since then clipped == r.
                    (clipped_obj, 0.0)
                }
            }
        }
    }
}

/// Negative weighted sum of a ratio objective: `−Σ wᵢ f(rᵢ, Aᵢ)`, with
/// `rᵢ = exp(log π(aᵢ|sᵢ) − log_prob_oldᵢ)`.
///
/// Weights are constants, so a dropout mask folded into them never receives gradient.
pub struct RatioHead<'a> {
    pub kind: PolicyKind,
    pub actions: &'a [Action],
    pub log_prob_old: &'a [f64],
    pub advantages: &'a [f64],
    pub weights: Vec<f64>,
    pub objective: RatioObjective,
}

impl<'a> HeadLoss for RatioHead<'a> {
    fn len(&self) -> usize {
        self.actions.len()
    }

    fn eval(
        &self,
        i: usize,
        out: &[f64],
        extra: &[f64],
        g_out: &mut [f64],
        g_extra: &mut [f64],
    ) -> Result<f64> {
        let w = self.weights[i];
        let lp = log_prob_and_grad(self.kind, out, extra, &self.actions[i], g_out, g_extra)?;
        if w == 0.0 {
            g_out.iter_mut().for_each(|g| *g = 0.0);
            g_extra.iter_mut().for_each(|g| *g = 0.0);
            return Ok(0.0);
        }
        let r = (lp - self.log_prob_old[i]).exp();
        if !r.is_finite() {
            return Err(Error::numerical(i, format!("non-finite ratio {r}")));
        }
        let (f, df_dr) = self.objective.eval(r, self.advantages[i]);
        // d/dθ of −w f(r) = −w f'(r) r ∂logπ/∂θ
        let scale = -w * df_dr * r;
        g_out.iter_mut().for_each(|g| *g *= scale);
        g_extra.iter_mut().for_each(|g| *g *= scale);
        Ok(-w * f)
    }
}

/// `Σ wᵢ KL(π_old(·|sᵢ) ‖ π_θ(·|sᵢ))` with fixed old distribution parameters.
pub struct KlHead<'a> {
    pub kind: PolicyKind,
    /// Old backbone outputs per sample (logits or means).
    pub old_outputs: &'a [Vec<f64>],
    /// Old gaussian log-std (empty for categorical policies).
    pub old_extra: &'a [f64],
    pub weights: Vec<f64>,
}

impl<'a> KlHead<'a> {
    fn kl_terms(
        &self,
        i: usize,
        out: &[f64],
        extra: &[f64],
        g_out: &mut [f64],
        g_extra: &mut [f64],
    ) -> f64 {
        let w = self.weights[i];
        let old = &self.old_outputs[i];
        match self.kind {
            PolicyKind::Categorical { .. } => {
                let lp = log_softmax(old);
                let lq = log_softmax(out);
                let mut kl = 0.0;
                for j in 0..out.len() {
                    let p = lp[j].exp();
                    kl += p * (lp[j] - lq[j]);
                    g_out[j] = w * (lq[j].exp() - p);
                }
                w * kl
            }
            PolicyKind::DiagGaussian { .. } => {
                let mut kl = 0.0;
                for j in 0..out.len() {
                    let (m0, s0, m1, s1) = (old[j], self.old_extra[j], out[j], extra[j]);
                    let d = m1 - m0;
                    let inv_var = (-2.0 * s1).exp();
                    let c = (2.0 * s0).exp() + d * d;
                    kl += s1 - s0 + 0.5 * c * inv_var - 0.5;
                    g_out[j] = w * d * inv_var;
                    g_extra[j] = w * (1.0 - c * inv_var);
                }
                w * kl
            }
        }
    }
}

impl<'a> HeadLoss for KlHead<'a> {
    fn len(&self) -> usize {
        self.old_outputs.len()
    }

    fn eval(
        &self,
        i: usize,
        out: &[f64],
        extra: &[f64],
        g_out: &mut [f64],
        g_extra: &mut [f64],
    ) -> Result<f64> {
        Ok(self.kl_terms(i, out, extra, g_out, g_extra))
    }
}

impl<'a> CurvatureHead for KlHead<'a> {
    fn hvp(
        &self,
        i: usize,
        out: &[f64],
        extra: &[f64],
        r_out: &[f64],
        r_extra: &[f64],
        g_out: &mut [f64],
        g_extra: &mut [f64],
        h_out: &mut [f64],
        h_extra: &mut [f64],
    ) -> Result<()> {
        let w = self.weights[i];
        self.kl_terms(i, out, extra, g_out, g_extra);
        match self.kind {
            PolicyKind::Categorical { .. } => {
                // Hessian of KL(p ‖ softmax(z)) in z: diag(q) − q qᵀ
                let q: Vec<f64> = log_softmax(out).into_iter().map(f64::exp).collect();
                let qr: f64 = q.iter().zip(r_out).map(|(a, b)| a * b).sum();
                for j in 0..out.len() {
                    h_out[j] = w * q[j] * (r_out[j] - qr);
                }
            }
            PolicyKind::DiagGaussian { .. } => {
                let old = &self.old_outputs[i];
                for j in 0..out.len() {
                    let (m0, s0, m1, s1) = (old[j], self.old_extra[j], out[j], extra[j]);
                    let d = m1 - m0;
                    let inv_var = (-2.0 * s1).exp();
                    let c = (2.0 * s0).exp() + d * d;
                    let h_mm = inv_var;
                    let h_ms = -2.0 * d * inv_var;
                    let h_ss = 2.0 * c * inv_var;
                    h_out[j] = w * (h_mm * r_out[j] + h_ms * r_extra[j]);
                    h_extra[j] = w * (h_ms * r_out[j] + h_ss * r_extra[j]);
                }
            }
        }
        Ok(())
    }
}

/// `Σ wᵢ (V(sᵢ) − Rᵢ)²` for a scalar-output network.
pub struct SquaredErrorHead<'a> {
    pub targets: &'a [f64],
    pub weights: Vec<f64>,
}

impl<'a> HeadLoss for SquaredErrorHead<'a> {
    fn len(&self) -> usize {
        self.targets.len()
    }

    fn eval(
        &self,
        i: usize,
        out: &[f64],
        _extra: &[f64],
        g_out: &mut [f64],
        _g_extra: &mut [f64],
    ) -> Result<f64> {
        let w = self.weights[i];
        let err = out[0] - self.targets[i];
        g_out[0] = 2.0 * w * err;
        Ok(w * err * err)
    }
}

/// Weights implementing a masked mean: `1/kept` on retained samples, 0 elsewhere.
/// Returns `None` when nothing is retained.
pub fn masked_mean_weights(keep: &[bool]) -> Option<Vec<f64>> {
    let kept = keep.iter().filter(|k| **k).count();
    if kept == 0 {
        return None;
    }
    let w = 1.0 / kept as f64;
    Some(keep.iter().map(|&k| if k { w } else { 0.0 }).collect())
}
