//! Evaluation report assembly and the paired critic-variant ablation.
//!
//! The report is a single structured record: it echoes the resolved config
//! for provenance and collects metrics that the owning modules computed —
//! nothing here re-derives a statistic that another module already defines.
//! The ablation trains, per seed, one policy whose critic sees the anchor
//! response and one whose critic replaces it with distilled pointwise
//! returns, from identical initialization, and reports the win-rate delta.

use serde::{Deserialize, Serialize};

use crate::anchor::{AnchorDiagnostics, SelectionStrategy};
use crate::error::{Error, Result};
use crate::reward::{PairwiseRewardModel, PointwiseRewardModel};
use crate::rl::{
    eval_oracle_win_rate, train_pairwise_ppo, IterationMetrics, Policy, PolicyArch, RlConfig,
    ValueArch, ValueModel, ValueVariant,
};
use crate::runner::config::ExperimentConfig;
use crate::runner::stages::RmEvalRecord;
use crate::seeds;
use crate::synthworld::{Prompt, Response, SynthWorld};

/// Provenance summary of the anchor set used for training and evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSummary {
    pub strategy: SelectionStrategy,
    pub n: usize,
    pub prompts: usize,
    pub mean_selector_score: f64,
}

/// One seed of the critic-variant ablation: final oracle win rates of the
/// anchor-aware arm and the anchor-free arm, and their difference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub seed: u64,
    pub win_with_anchor: f64,
    pub win_without_anchor: f64,
    pub delta: f64,
}

/// The paired ablation over all requested seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub arms: Vec<AblationArm>,
    pub mean_with_anchor: f64,
    pub mean_without_anchor: f64,
    pub mean_delta: f64,
}

/// The evaluation summary written by the eval stage: config echo, reward
/// model quality, anchor provenance and diagnostics, the policy's oracle
/// win rate, the last training iteration, and the optional ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ExperimentConfig,
    pub rm: RmEvalRecord,
    pub anchors: AnchorSummary,
    pub anchor_diagnostics: AnchorDiagnostics,
    pub oracle_win_rate: f64,
    pub final_iteration: Option<IterationMetrics>,
    pub ablation: Option<AblationReport>,
}

/// The report's top-level fields, in serialization order. The schema test
/// and external consumers key off this list.
pub const EVAL_REPORT_FIELDS: [&str; 7] = [
    "config",
    "rm",
    "anchors",
    "anchor_diagnostics",
    "oracle_win_rate",
    "final_iteration",
    "ablation",
];

/// Trains one ablation arm and returns its final oracle win rate.
#[allow(clippy::too_many_arguments)]
fn run_arm(
    world: &SynthWorld,
    rm: &PairwiseRewardModel,
    pointwise: &PointwiseRewardModel,
    pairs: &[(Prompt, Response)],
    init: &Policy,
    value_arch: ValueArch,
    cfg: &RlConfig,
    seed: u64,
    eval_rollouts: usize,
) -> Result<f64> {
    let mut policy = init.clone();
    let reference = init.clone();
    let mut value = ValueModel::init(
        cfg.value_variant,
        world.vocab(),
        world.max_response_len(),
        value_arch,
        &mut seeds::rng(seed, "value-init"),
    )?;
    let pointwise_opt = match cfg.value_variant {
        ValueVariant::WithAnchor => None,
        ValueVariant::WithoutAnchor => Some(pointwise),
    };
    train_pairwise_ppo(
        &mut policy,
        &mut value,
        &reference,
        rm,
        pointwise_opt,
        world,
        pairs,
        cfg,
        seed,
    )?;
    eval_oracle_win_rate(
        world,
        &policy,
        pairs,
        eval_rollouts,
        1.0,
        &mut seeds::rng(seed, "ablation-eval"),
    )
}

/// Runs the critic-variant ablation: for each seed, both arms start from
/// the same policy initialization and train with the same schedule and
/// rollout seed; only the critic differs. Returns per-seed win rates and
/// deltas (anchor-aware minus anchor-free) plus their means.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    world: &SynthWorld,
    rm: &PairwiseRewardModel,
    pointwise: &PointwiseRewardModel,
    pairs: &[(Prompt, Response)],
    policy_arch: PolicyArch,
    value_arch: ValueArch,
    base: &RlConfig,
    ablation_seeds: &[u64],
    eval_rollouts: usize,
) -> Result<AblationReport> {
    if ablation_seeds.is_empty() {
        return Err(Error::contract("run_ablation: no seeds given"));
    }
    let mut with_cfg = base.clone();
    with_cfg.value_variant = ValueVariant::WithAnchor;
    let mut without_cfg = base.clone();
    without_cfg.value_variant = ValueVariant::WithoutAnchor;

    let mut arms = Vec::with_capacity(ablation_seeds.len());
    for &seed in ablation_seeds {
        let init = Policy::init(
            world.vocab(),
            world.max_response_len(),
            policy_arch,
            &mut seeds::rng(seed, "policy-init"),
        )?;
        let win_with = run_arm(
            world,
            rm,
            pointwise,
            pairs,
            &init,
            value_arch,
            &with_cfg,
            seed,
            eval_rollouts,
        )?;
        let win_without = run_arm(
            world,
            rm,
            pointwise,
            pairs,
            &init,
            value_arch,
            &without_cfg,
            seed,
            eval_rollouts,
        )?;
        arms.push(AblationArm {
            seed,
            win_with_anchor: win_with,
            win_without_anchor: win_without,
            delta: win_with - win_without,
        });
    }
    let n = arms.len() as f64;
    Ok(AblationReport {
        mean_with_anchor: arms.iter().map(|a| a.win_with_anchor).sum::<f64>() / n,
        mean_without_anchor: arms.iter().map(|a| a.win_without_anchor).sum::<f64>() / n,
        mean_delta: arms.iter().map(|a| a.delta).sum::<f64>() / n,
        arms,
    })
}
