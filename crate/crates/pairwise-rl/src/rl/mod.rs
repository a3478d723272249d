//! Policy optimization against per-prompt anchors.
//!
//! [`policy`] holds the autoregressive toy policy and top-p sampling;
//! [`value`] the two critic variants (with and without sight of the
//! anchor); [`rollout`] episode generation, reward attachment, and KL
//! penalties; [`gae`] advantage estimation and return targets; [`ppo`] the
//! clipped-surrogate training loop and its diagnostics.

pub mod gae;
pub mod policy;
pub mod ppo;
pub mod rollout;
pub mod value;

pub use gae::{
    clamp_advantages, gae_advantages, returns_from, returns_pointwise, PointwiseReturnMode,
};
pub use policy::{top_p_sample, Policy, PolicyArch, PolicyNodes, SampledAction, StepState};
pub use ppo::{
    eval_oracle_win_rate, generate_response, ppo_clip_loss, ppo_clip_loss_node,
    train_pairwise_ppo, value_loss, value_loss_node, IterationMetrics, PpoLossParts, RlConfig,
};
pub use rollout::{attach_reward, kl_penalty_per_step, sample_rollout, KlEstimator, Trajectory};
pub use value::{ValueArch, ValueModel, ValueNodes, ValueState, ValueVariant};
