//! Parameter vectors, feed-forward networks, policy heads and exact derivatives.

pub mod mlp;
pub mod objective;
pub mod params;
pub mod policy;

pub use mlp::{forward, Activation, Mlp, MlpSpec};
pub use objective::{
    gradient, hessian_vector_product, masked_mean_weights, CurvatureHead, CurvatureObjective,
    HeadLoss, KlHead, NetObjective, Objective, Quadratic, RatioHead, RatioObjective,
    SquaredErrorHead,
};
pub use params::{ParamVector, Segment};
pub use policy::{
    kl_divergence, log_prob, Action, DistributionParams, Policy, PolicyKind, PolicySpec,
};
