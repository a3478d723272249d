//! Pairwise and pointwise reward models.
//!
//! A comparison is rendered as a single token sequence holding the prompt,
//! an optional rule, and the two responses in explicit slots ([`format`]).
//! The pairwise model scores such sequences with a two-logit head whose
//! softmax is the probability that slot 1 is the preferred response
//! ([`model`]); training mitigates position bias by co-batching each
//! comparison with its slot-swapped twin under a symmetry penalty
//! ([`train`]). A pointwise scorer distilled from the pairwise model gives
//! per-response scalar scores for downstream value-function targets.

pub mod format;
pub mod model;
pub mod train;

pub use format::{FormattedComparison, Segments, SlotOrder};
pub use model::{PairwiseRewardModel, PointwiseRewardModel, RewardModelNodes, RmArch};
pub use train::{
    augment_dataset, augment_pair, distill_loss, distill_loss_node, distill_pointwise,
    distill_target, eval_accuracy, loss_ce, loss_pos, loss_total, mean_order_asymmetry,
    rm_loss_nodes, rm_losses, train_rm, DistillConfig, DistillStepStats, DistillTriple,
    RmAccuracy, RmLossNodes, RmLosses, RmStepStats, RmTrainConfig,
};
