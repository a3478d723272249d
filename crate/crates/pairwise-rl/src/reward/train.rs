//! Pairwise reward-model training, evaluation, and pointwise distillation.
//!
//! Training minimises cross-entropy on yes/no labels plus a weighted
//! position-symmetry penalty. Every batch is augmented: each comparison is
//! co-batched with its slot-swapped, label-flipped twin, and the symmetry
//! penalty ties the two together: it is the squared gap between the
//! yes-probability of the original order and the no-probability of the
//! swapped order, which a position-blind model makes zero.
//!
//! By default gradients of the symmetry penalty flow through both orders;
//! `detach_swapped` stops the swapped branch so the penalty only drags the
//! original order toward the (frozen) swapped prediction.
//!
//! Distillation fits a pointwise scorer so that score differences reproduce
//! the pairwise model's order-averaged reward. The reward is centered by
//! 0.5 before fitting: identical responses have reward exactly 0.5 and a
//! structurally zero score difference, so the centered target is the unique
//! offset that makes a perfect fit possible.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::format::{FormattedComparison, SlotOrder};
use super::model::{PairwiseRewardModel, PointwiseRewardModel, RewardModelNodes};
use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::optim::{cosine_lr, OptimizerMode, OptimizerState};
use crate::numerics::tensor::Tensor;
use crate::numerics::binary_softmax;
use crate::seeds;
use crate::synthworld::{ComparisonInstance, Label, Prompt, Response, SourceTag};

/// The slot-swapped, label-flipped twin of a comparison.
pub fn augment_pair(instance: &ComparisonInstance) -> ComparisonInstance {
    ComparisonInstance {
        prompt: instance.prompt.clone(),
        first: instance.second.clone(),
        second: instance.first.clone(),
        label: instance.label.flipped(),
        source: SourceTag::Flipped,
    }
}

/// Each instance followed by its swapped twin: `[a, a', b, b', ...]`.
pub fn augment_dataset(data: &[ComparisonInstance]) -> Vec<ComparisonInstance> {
    data.iter()
        .flat_map(|i| [i.clone(), augment_pair(i)])
        .collect()
}

fn encode_instance(
    model: &PairwiseRewardModel,
    instance: &ComparisonInstance,
) -> Result<FormattedComparison> {
    FormattedComparison::encode(
        model.vocab(),
        &instance.prompt,
        &instance.first,
        &instance.second,
        SlotOrder::CandidateFirst,
    )
}

fn correct_index(label: Label) -> usize {
    match label {
        Label::First => 0,
        Label::Second => 1,
    }
}

/// `-mean log softmax(logits)[correct]` over rows.
pub fn ce_loss_node(g: &mut Graph, logits: NodeId, correct: &[usize]) -> NodeId {
    let ls = g.log_softmax_rows(logits);
    let picked = g.gather_rows(ls, correct);
    let mean = g.mean_all(picked);
    g.neg(mean)
}

/// Mean squared gap between the yes-probability of the original orders and
/// the no-probability of the swapped orders, rows aligned.
pub fn pos_loss_node(
    g: &mut Graph,
    logits_orig: NodeId,
    logits_swapped: NodeId,
    detach_swapped: bool,
) -> NodeId {
    let yes_o = g.col(logits_orig, 0);
    let no_o = g.col(logits_orig, 1);
    let d_o = g.sub(yes_o, no_o);
    let p_yes = g.sigmoid(d_o);

    let swapped = if detach_swapped {
        g.detach(logits_swapped)
    } else {
        logits_swapped
    };
    let yes_s = g.col(swapped, 0);
    let no_s = g.col(swapped, 1);
    let d_s = g.sub(no_s, yes_s);
    let p_no = g.sigmoid(d_s);

    let gap = g.sub(p_yes, p_no);
    let sq = g.square(gap);
    g.mean_all(sq)
}

pub struct RmLossNodes {
    pub ce: NodeId,
    pub pos: NodeId,
    pub total: NodeId,
}

/// Build the full augmented-batch loss on a tape. `originals` must be
/// unaugmented instances; their swapped twins are constructed and co-batched
/// here.
pub fn rm_loss_nodes(
    g: &mut Graph,
    model: &PairwiseRewardModel,
    nodes: &RewardModelNodes,
    originals: &[&ComparisonInstance],
    zeta: f64,
    detach_swapped: bool,
) -> Result<RmLossNodes> {
    if originals.is_empty() {
        return Err(Error::contract("rm loss: empty batch"));
    }
    let swapped: Vec<ComparisonInstance> = originals.iter().map(|i| augment_pair(i)).collect();
    let enc_o: Vec<FormattedComparison> = originals
        .iter()
        .map(|i| encode_instance(model, i))
        .collect::<Result<_>>()?;
    let enc_s: Vec<FormattedComparison> = swapped
        .iter()
        .map(|i| encode_instance(model, i))
        .collect::<Result<_>>()?;
    let refs_o: Vec<&FormattedComparison> = enc_o.iter().collect();
    let refs_s: Vec<&FormattedComparison> = enc_s.iter().collect();

    let logits_o = model.logits_graph(g, nodes, &refs_o)?;
    let logits_s = model.logits_graph(g, nodes, &refs_s)?;

    let correct_o: Vec<usize> = originals.iter().map(|i| correct_index(i.label)).collect();
    let correct_s: Vec<usize> = swapped.iter().map(|i| correct_index(i.label)).collect();
    let ce_o = ce_loss_node(g, logits_o, &correct_o);
    let ce_s = ce_loss_node(g, logits_s, &correct_s);
    let ce_sum = g.add(ce_o, ce_s);
    let ce = g.scale(ce_sum, 0.5);

    let pos = pos_loss_node(g, logits_o, logits_s, detach_swapped);
    let weighted = g.scale(pos, zeta);
    let total = g.add(ce, weighted);
    Ok(RmLossNodes { ce, pos, total })
}

#[derive(Clone, Copy, Debug)]
pub struct RmLosses {
    pub ce: f64,
    pub pos: f64,
    pub total: f64,
}

/// Loss values for an augmented batch, no gradients.
pub fn rm_losses(
    model: &PairwiseRewardModel,
    originals: &[&ComparisonInstance],
    zeta: f64,
) -> Result<RmLosses> {
    let mut g = Graph::new();
    let nodes = model.register(&mut g);
    let l = rm_loss_nodes(&mut g, model, &nodes, originals, zeta, false)?;
    Ok(RmLosses {
        ce: g.value(l.ce).item(),
        pos: g.value(l.pos).item(),
        total: g.value(l.total).item(),
    })
}

/// Cross-entropy over the augmented batch.
pub fn loss_ce(model: &PairwiseRewardModel, originals: &[&ComparisonInstance]) -> Result<f64> {
    Ok(rm_losses(model, originals, 0.0)?.ce)
}

/// Position-symmetry penalty over the augmented batch.
pub fn loss_pos(model: &PairwiseRewardModel, originals: &[&ComparisonInstance]) -> Result<f64> {
    Ok(rm_losses(model, originals, 0.0)?.pos)
}

/// Combined training loss `ce + zeta * pos`.
pub fn loss_total(
    model: &PairwiseRewardModel,
    originals: &[&ComparisonInstance],
    zeta: f64,
) -> Result<f64> {
    Ok(rm_losses(model, originals, zeta)?.total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmTrainConfig {
    /// Weight of the position-symmetry penalty. Default: 0.1.
    pub zeta: f64,
    /// Cosine learning-rate schedule endpoints. Defaults: 5e-3 to 5e-4.
    pub lr_start: f64,
    pub lr_end: f64,
    /// Encodings per step (originals plus swapped twins); must be even.
    /// Default: 128.
    pub batch_size: usize,
    /// Passes over the dataset. Default: 6.
    pub epochs: usize,
    /// Stop symmetry-penalty gradients through the swapped order. Default:
    /// false (gradients flow through both orders).
    pub detach_swapped: bool,
}

impl Default for RmTrainConfig {
    fn default() -> Self {
        RmTrainConfig {
            zeta: 0.1,
            lr_start: 5e-3,
            lr_end: 5e-4,
            batch_size: 128,
            epochs: 6,
            detach_swapped: false,
        }
    }
}

impl RmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.zeta < 0.0 {
            return Err(Error::config("rm.zeta must be non-negative"));
        }
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return Err(Error::config(
                "rm.batch_size must be positive and even (augmented pairs are co-batched)",
            ));
        }
        if !(self.lr_start > 0.0) || !(self.lr_end > 0.0) {
            return Err(Error::config("rm learning rates must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("rm.epochs must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RmStepStats {
    pub step: u64,
    pub lr: f64,
    pub ce: f64,
    pub pos: f64,
    pub total: f64,
}

/// Train the pairwise model in place; returns per-step loss history.
/// Deterministic in (model state, data, config, seed).
pub fn train_rm(
    model: &mut PairwiseRewardModel,
    data: &[ComparisonInstance],
    cfg: &RmTrainConfig,
    seed: u64,
) -> Result<Vec<RmStepStats>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("train_rm: empty dataset"));
    }
    let per_step = cfg.batch_size / 2;
    let steps_per_epoch = data.len().div_ceil(per_step);
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    let mut opt = OptimizerState::new(model, OptimizerMode::adaptive_default(), cfg.lr_start);
    let mut rng = seeds::rng(seed, "rm-train-shuffle");
    let mut history = Vec::with_capacity(total_steps as usize);
    let mut indices: Vec<usize> = (0..data.len()).collect();

    for _epoch in 0..cfg.epochs {
        indices.shuffle(&mut rng);
        for chunk in indices.chunks(per_step) {
            let batch: Vec<&ComparisonInstance> = chunk.iter().map(|&i| &data[i]).collect();
            let step = opt.step_count();
            let lr = cosine_lr(cfg.lr_start, cfg.lr_end, step, total_steps);
            opt.set_lr(lr);

            let mut g = Graph::new();
            let nodes = model.register(&mut g);
            let l = rm_loss_nodes(&mut g, model, &nodes, &batch, cfg.zeta, cfg.detach_swapped)?;
            let stats = RmStepStats {
                step,
                lr,
                ce: g.value(l.ce).item(),
                pos: g.value(l.pos).item(),
                total: g.value(l.total).item(),
            };
            if !stats.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "train_rm: non-finite loss at step {step}"
                )));
            }
            let grads = g.backward(l.total)?;
            let blocks = model.gradients(&g, &grads, &nodes);
            opt.step(model, &blocks)?;
            history.push(stats);
        }
    }
    Ok(history)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmAccuracy {
    /// Accuracy when the candidate sits in slot 1.
    pub front: f64,
    /// Accuracy when the candidate sits in slot 2.
    pub back: f64,
    /// Accuracy of the order-averaged score thresholded at 0.5.
    pub avg: f64,
}

/// Order-sensitivity evaluation. Each instance's first response is the
/// candidate; it is scored with the candidate in front, in back, and with
/// the order-averaged reward. Ties at exactly 0.5 count as incorrect.
pub fn eval_accuracy(model: &PairwiseRewardModel, data: &[ComparisonInstance]) -> Result<RmAccuracy> {
    if data.is_empty() {
        return Err(Error::contract("eval_accuracy: empty dataset"));
    }
    let (mut front_ok, mut back_ok, mut avg_ok) = (0usize, 0usize, 0usize);
    for chunk in data.chunks(256) {
        let mut encs = Vec::with_capacity(chunk.len() * 2);
        for inst in chunk {
            encs.push(FormattedComparison::encode(
                model.vocab(),
                &inst.prompt,
                &inst.first,
                &inst.second,
                SlotOrder::CandidateFirst,
            )?);
            encs.push(FormattedComparison::encode(
                model.vocab(),
                &inst.prompt,
                &inst.first,
                &inst.second,
                SlotOrder::AnchorFirst,
            )?);
        }
        let refs: Vec<&FormattedComparison> = encs.iter().collect();
        let logits = model.logits(&refs)?;
        for (i, inst) in chunk.iter().enumerate() {
            let (p_yes_front, _) = binary_softmax(logits.get2(2 * i, 0), logits.get2(2 * i, 1))?;
            let (_, p_no_back) =
                binary_softmax(logits.get2(2 * i + 1, 0), logits.get2(2 * i + 1, 1))?;
            let avg = 0.5 * (p_yes_front + p_no_back);
            let want_first = inst.label == Label::First;
            let decide = |p: f64| (p > 0.5) == want_first && p != 0.5;
            if decide(p_yes_front) {
                front_ok += 1;
            }
            if decide(p_no_back) {
                back_ok += 1;
            }
            if decide(avg) {
                avg_ok += 1;
            }
        }
    }
    let n = data.len() as f64;
    Ok(RmAccuracy {
        front: front_ok as f64 / n,
        back: back_ok as f64 / n,
        avg: avg_ok as f64 / n,
    })
}

/// Mean absolute gap between the yes-probability of the original order and
/// the no-probability of the swapped order: the per-instance position
/// asymmetry the symmetry penalty is meant to remove.
pub fn mean_order_asymmetry(
    model: &PairwiseRewardModel,
    data: &[ComparisonInstance],
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract("mean_order_asymmetry: empty dataset"));
    }
    let mut total = 0.0;
    for chunk in data.chunks(256) {
        let mut encs = Vec::with_capacity(chunk.len() * 2);
        for inst in chunk {
            encs.push(FormattedComparison::encode(
                model.vocab(),
                &inst.prompt,
                &inst.first,
                &inst.second,
                SlotOrder::CandidateFirst,
            )?);
            encs.push(FormattedComparison::encode(
                model.vocab(),
                &inst.prompt,
                &inst.first,
                &inst.second,
                SlotOrder::AnchorFirst,
            )?);
        }
        let refs: Vec<&FormattedComparison> = encs.iter().collect();
        let logits = model.logits(&refs)?;
        for i in 0..chunk.len() {
            let (p_yes, _) = binary_softmax(logits.get2(2 * i, 0), logits.get2(2 * i, 1))?;
            let (_, p_no) = binary_softmax(logits.get2(2 * i + 1, 0), logits.get2(2 * i + 1, 1))?;
            total += (p_yes - p_no).abs();
        }
    }
    Ok(total / data.len() as f64)
}

/// A (prompt, candidate, anchor) triple for distillation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillTriple {
    pub prompt: Prompt,
    pub candidate: Response,
    pub anchor: Response,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Adaptive-moment learning rate. Default: 5e-3.
    pub lr: f64,
    /// Passes over the triples. Default: 6.
    pub epochs: usize,
    /// Triples per step. Default: 128.
    pub batch_size: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lr: 5e-3,
            epochs: 6,
            batch_size: 128,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("distill.lr must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("distill.epochs and batch_size must be positive"));
        }
        Ok(())
    }
}

/// Centered distillation target for one triple: pairwise reward minus 0.5.
pub fn distill_target(
    pairwise: &PairwiseRewardModel,
    triple: &DistillTriple,
) -> Result<f64> {
    Ok(pairwise.pairwise_reward(&triple.prompt, &triple.candidate, &triple.anchor)? - 0.5)
}

/// Mean squared residual between centered pairwise rewards and pointwise
/// score differences over `triples`.
pub fn distill_loss(
    pointwise: &PointwiseRewardModel,
    pairwise: &PairwiseRewardModel,
    triples: &[&DistillTriple],
) -> Result<f64> {
    let mut total = 0.0;
    for t in triples {
        let target = distill_target(pairwise, t)?;
        let d = pointwise.score(&t.prompt, &t.candidate)? - pointwise.score(&t.prompt, &t.anchor)?;
        total += (target - d) * (target - d);
    }
    Ok(total / triples.len() as f64)
}

/// Build the distillation loss on a tape: mean squared residual between
/// `targets` (precomputed centered pairwise rewards) and the pointwise
/// model's score differences over `triples`.
pub fn distill_loss_node(
    g: &mut Graph,
    pointwise: &PointwiseRewardModel,
    nodes: &RewardModelNodes,
    triples: &[&DistillTriple],
    targets: &[f64],
) -> Result<NodeId> {
    if triples.is_empty() {
        return Err(Error::contract("distill loss: empty batch"));
    }
    if triples.len() != targets.len() {
        return Err(Error::Dimension {
            context: "distill_loss_node".into(),
            expected: format!("{} targets", triples.len()),
            actual: format!("{}", targets.len()),
        });
    }
    let cand_batch: Vec<(&Prompt, &Response)> =
        triples.iter().map(|t| (&t.prompt, &t.candidate)).collect();
    let anchor_batch: Vec<(&Prompt, &Response)> =
        triples.iter().map(|t| (&t.prompt, &t.anchor)).collect();
    let s_cand = pointwise.scores_graph(g, nodes, &cand_batch)?;
    let s_anchor = pointwise.scores_graph(g, nodes, &anchor_batch)?;
    let d = g.sub(s_cand, s_anchor);
    let target_node = g.leaf(Tensor::from_vec(&[targets.len(), 1], targets.to_vec())?);
    let resid = g.sub(target_node, d);
    let sq = g.square(resid);
    Ok(g.mean_all(sq))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DistillStepStats {
    pub step: u64,
    pub loss: f64,
}

/// Fit the pointwise model so score differences match centered pairwise
/// rewards. The pairwise model is frozen.
pub fn distill_pointwise(
    pointwise: &mut PointwiseRewardModel,
    pairwise: &PairwiseRewardModel,
    triples: &[DistillTriple],
    cfg: &DistillConfig,
    seed: u64,
) -> Result<Vec<DistillStepStats>> {
    cfg.validate()?;
    if triples.is_empty() {
        return Err(Error::contract("distill_pointwise: empty triple set"));
    }
    let targets: Vec<f64> = triples
        .iter()
        .map(|t| distill_target(pairwise, t))
        .collect::<Result<_>>()?;
    let mut opt = OptimizerState::new(pointwise, OptimizerMode::adaptive_default(), cfg.lr);
    let mut rng = seeds::rng(seed, "distill-shuffle");
    let mut indices: Vec<usize> = (0..triples.len()).collect();
    let mut history = Vec::new();

    for _epoch in 0..cfg.epochs {
        indices.shuffle(&mut rng);
        for chunk in indices.chunks(cfg.batch_size) {
            let batch: Vec<&DistillTriple> = chunk.iter().map(|&i| &triples[i]).collect();
            let t: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();

            let mut g = Graph::new();
            let nodes = pointwise.register(&mut g);
            let loss = distill_loss_node(&mut g, pointwise, &nodes, &batch, &t)?;

            let step = opt.step_count();
            let loss_val = g.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "distill_pointwise: non-finite loss at step {step}"
                )));
            }
            let grads = g.backward(loss)?;
            let blocks = pointwise.gradients(&g, &grads, &nodes);
            opt.step(pointwise, &blocks)?;
            history.push(DistillStepStats {
                step,
                loss: loss_val,
            });
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::model::RmArch;
    use crate::seeds;
    use crate::synthworld::{gen_comparison_dataset, uniform_sampler, SynthWorld, WorldConfig};
    use proptest::prelude::*;

    fn world() -> SynthWorld {
        SynthWorld::new(WorldConfig::default(), 0).unwrap()
    }

    fn small_model(seed: u64) -> PairwiseRewardModel {
        let w = world();
        let mut rng = seeds::rng(seed, "test-rm");
        PairwiseRewardModel::init(
            w.vocab(),
            w.max_response_len(),
            RmArch {
                embed_dim: 6,
                hidden_dim: 16,
                position_buckets: 2,
            },
            &mut rng,
        )
        .unwrap()
    }

    fn sample_batch(n: usize, seed: u64) -> Vec<ComparisonInstance> {
        let w = world();
        let mut rng = seeds::rng(seed, "test-data");
        gen_comparison_dataset(&w, n, &mut rng, uniform_sampler).unwrap()
    }

    #[test]
    fn augment_swaps_slots_flips_label_and_tags_source() {
        let batch = sample_batch(8, 0);
        let aug = augment_dataset(&batch);
        assert_eq!(aug.len(), 16);
        for (orig, pair) in batch.iter().zip(aug.chunks(2)) {
            assert_eq!(&pair[0], orig);
            let flip = &pair[1];
            assert_eq!(flip.first, orig.second);
            assert_eq!(flip.second, orig.first);
            assert_eq!(flip.label, orig.label.flipped());
            assert_eq!(flip.source, SourceTag::Flipped);
            assert_eq!(&augment_pair(flip).first, &orig.first);
        }
    }

    #[test]
    fn ce_loss_is_ln2_for_indifferent_model_and_near_zero_for_confident() {
        // crafted logits through the same node builder used in training
        let mut g = Graph::new();
        let uniform = g.leaf(Tensor::matrix(2, 2, vec![0.3, 0.3, -1.7, -1.7]).unwrap());
        let ce = ce_loss_node(&mut g, uniform, &[0, 1]);
        assert!((g.value(ce).item() - (2.0f64).ln()).abs() < 1e-12);

        let mut g2 = Graph::new();
        let confident = g2.leaf(Tensor::matrix(2, 2, vec![40.0, 0.0, 0.0, 40.0]).unwrap());
        let ce2 = ce_loss_node(&mut g2, confident, &[0, 1]);
        assert!(g2.value(ce2).item() < 1e-12);
    }

    #[test]
    fn ce_loss_matches_hand_arithmetic_for_known_probabilities() {
        // p_correct = 0.8 and 0.5: loss = -(ln 0.8 + ln 0.5) / 2
        let logit_for = |p: f64| (p / (1.0 - p)).ln();
        let mut g = Graph::new();
        let logits = g.leaf(
            Tensor::matrix(2, 2, vec![logit_for(0.8), 0.0, 0.0, 0.0]).unwrap(),
        );
        let ce = ce_loss_node(&mut g, logits, &[0, 0]);
        let expect = -(0.8f64.ln() + 0.5f64.ln()) / 2.0;
        assert!((g.value(ce).item() - expect).abs() < 1e-12);
        assert!((expect - 0.458145365937077).abs() < 1e-12);
    }

    #[test]
    fn pos_loss_matches_hand_arithmetic_and_is_zero_for_symmetric_model() {
        // p_yes(orig) = 0.7, p_no(swapped) = 0.5 -> (0.2)^2
        let logit_for = |p: f64| (p / (1.0 - p)).ln();
        let mut g = Graph::new();
        let orig = g.leaf(Tensor::matrix(1, 2, vec![logit_for(0.7), 0.0]).unwrap());
        let swapped = g.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let pos = pos_loss_node(&mut g, orig, swapped, false);
        assert!((g.value(pos).item() - 0.04).abs() < 1e-12);

        let mut m = small_model(1);
        m.mlp_mut().zero_output_layer();
        let batch = sample_batch(16, 2);
        let refs: Vec<&ComparisonInstance> = batch.iter().collect();
        assert_eq!(loss_pos(&m, &refs).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_is_ce_plus_weighted_pos_and_zeta_zero_is_ce() {
        let m = small_model(3);
        let batch = sample_batch(12, 3);
        let refs: Vec<&ComparisonInstance> = batch.iter().collect();
        let l = rm_losses(&m, &refs, 0.3).unwrap();
        assert!((l.total - (l.ce + 0.3 * l.pos)).abs() < 1e-12);
        let l0 = rm_losses(&m, &refs, 0.0).unwrap();
        assert_eq!(l0.total, l0.ce);
    }

    #[test]
    fn detached_swapped_branch_changes_gradients_not_value() {
        let m = small_model(4);
        let batch = sample_batch(6, 4);
        let refs: Vec<&ComparisonInstance> = batch.iter().collect();

        let eval = |detach: bool| -> (f64, Vec<Tensor>) {
            let mut g = Graph::new();
            let nodes = m.register(&mut g);
            let l = rm_loss_nodes(&mut g, &m, &nodes, &refs, 0.5, detach).unwrap();
            let grads = g.backward(l.total).unwrap();
            (g.value(l.total).item(), m.gradients(&g, &grads, &nodes))
        };
        let (v_flow, g_flow) = eval(false);
        let (v_detach, g_detach) = eval(true);
        assert_eq!(v_flow, v_detach);
        let differs = g_flow
            .iter()
            .zip(&g_detach)
            .any(|(a, b)| a.data() != b.data());
        assert!(differs, "detach flag should alter gradients");
    }

    #[test]
    fn rm_losses_gradient_matches_finite_differences() {
        let mut m = small_model(5);
        let batch = sample_batch(4, 5);
        let refs: Vec<&ComparisonInstance> = batch.iter().collect();

        let analytic = {
            let mut g = Graph::new();
            let nodes = m.register(&mut g);
            let l = rm_loss_nodes(&mut g, &m, &nodes, &refs, 0.1, false).unwrap();
            let grads = g.backward(l.total).unwrap();
            m.gradients(&g, &grads, &nodes)
        };
        let report = crate::numerics::grad_check(
            &mut m,
            |model| loss_total(model, &refs, 0.1),
            &analytic,
            crate::numerics::DEFAULT_STEP,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "worst {:?}", report.worst);
    }

    #[test]
    fn train_rm_memorizes_a_single_instance() {
        let mut m = small_model(6);
        let data = sample_batch(1, 6);
        let cfg = RmTrainConfig {
            batch_size: 2,
            epochs: 300,
            lr_start: 2e-2,
            lr_end: 2e-3,
            ..RmTrainConfig::default()
        };
        train_rm(&mut m, &data, &cfg, 0).unwrap();
        let enc = encode_instance(&m, &data[0]).unwrap();
        let p = m.p_slot1(&enc).unwrap();
        let p_correct = match data[0].label {
            Label::First => p,
            Label::Second => 1.0 - p,
        };
        assert!(p_correct > 0.99, "memorization reached {p_correct}");
    }

    #[test]
    fn train_rm_reduces_loss_and_is_deterministic() {
        let data = sample_batch(256, 7);
        let cfg = RmTrainConfig {
            epochs: 3,
            ..RmTrainConfig::default()
        };

        let mut m1 = small_model(7);
        let h1 = train_rm(&mut m1, &data, &cfg, 9).unwrap();
        let mut m2 = small_model(7);
        let h2 = train_rm(&mut m2, &data, &cfg, 9).unwrap();

        assert!(h1.last().unwrap().total < h1.first().unwrap().total);
        assert_eq!(
            crate::numerics::flatten_params(&m1),
            crate::numerics::flatten_params(&m2)
        );
        assert_eq!(h1.len(), h2.len());
        assert!(h1
            .iter()
            .zip(&h2)
            .all(|(a, b)| a.total == b.total && a.lr == b.lr));
    }

    #[test]
    fn train_rm_rejects_odd_batch_size() {
        let mut m = small_model(8);
        let data = sample_batch(4, 8);
        let cfg = RmTrainConfig {
            batch_size: 3,
            ..RmTrainConfig::default()
        };
        assert!(matches!(
            train_rm(&mut m, &data, &cfg, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn eval_accuracy_is_perfect_for_an_oracle_quality_margin_model() {
        // a model cannot be crafted to perfection, so check the metric
        // plumbing instead: a dataset relabelled by a zero-temperature
        // quality comparison plus a model trained to high accuracy is
        // exercised in the integration suite; here, verify tie handling and
        // the front/back/avg split on a zeroed head (all ties -> all zero).
        let mut m = small_model(9);
        m.mlp_mut().zero_output_layer();
        let data = sample_batch(32, 9);
        let acc = eval_accuracy(&m, &data).unwrap();
        assert_eq!(acc.front, 0.0);
        assert_eq!(acc.back, 0.0);
        assert_eq!(acc.avg, 0.0);
    }

    #[test]
    fn distill_loss_is_zero_when_targets_are_identity_pairs() {
        let w = world();
        let mut rng = seeds::rng(10, "triples");
        let pairwise = small_model(10);
        let mut pointwise = {
            let mut r = seeds::rng(10, "pw");
            PointwiseRewardModel::init(
                w.vocab(),
                w.max_response_len(),
                RmArch {
                    embed_dim: 6,
                    hidden_dim: 16,
                    position_buckets: 2,
                },
                &mut r,
            )
            .unwrap()
        };
        let triples: Vec<DistillTriple> = (0..16)
            .map(|_| {
                let p = w.sample_prompt(&mut rng);
                let y = w.sample_response_uniform(&mut rng);
                DistillTriple {
                    prompt: p,
                    candidate: y.clone(),
                    anchor: y,
                }
            })
            .collect();
        let refs: Vec<&DistillTriple> = triples.iter().collect();
        // identical candidate/anchor: reward exactly 0.5, centered target 0,
        // score difference structurally 0 -> loss exactly 0 for any weights
        assert_eq!(distill_loss(&pointwise, &pairwise, &refs).unwrap(), 0.0);

        let cfg = DistillConfig {
            epochs: 1,
            ..DistillConfig::default()
        };
        let history = distill_pointwise(&mut pointwise, &pairwise, &triples, &cfg, 0).unwrap();
        assert!(history.iter().all(|s| s.loss == 0.0));
    }

    #[test]
    fn distill_memorizes_a_single_triple() {
        let w = world();
        let mut rng = seeds::rng(11, "triple");
        let pairwise = small_model(11);
        let mut pointwise = PointwiseRewardModel::init(
            w.vocab(),
            w.max_response_len(),
            RmArch {
                embed_dim: 6,
                hidden_dim: 16,
                position_buckets: 2,
            },
            &mut rng,
        )
        .unwrap();
        let triple = DistillTriple {
            prompt: w.sample_prompt(&mut rng),
            candidate: w.sample_response_uniform(&mut rng),
            anchor: w.sample_response_uniform(&mut rng),
        };
        let cfg = DistillConfig {
            epochs: 400,
            batch_size: 1,
            lr: 1e-2,
        };
        distill_pointwise(&mut pointwise, &pairwise, std::slice::from_ref(&triple), &cfg, 0)
            .unwrap();
        let l = distill_loss(&pointwise, &pairwise, &[&triple]).unwrap();
        assert!(l < 1e-4, "residual {l}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn slot_swap_relabel_exchanges_front_and_back_accuracy(seed in 0u64..100) {
            let m = small_model(seed);
            let data = sample_batch(24, seed);
            let swapped: Vec<ComparisonInstance> = data.iter().map(augment_pair).collect();
            let a = eval_accuracy(&m, &data).unwrap();
            let b = eval_accuracy(&m, &swapped).unwrap();
            prop_assert!((a.front - b.back).abs() < 1e-12);
            prop_assert!((a.back - b.front).abs() < 1e-12);
            prop_assert!((a.avg - b.avg).abs() < 1e-12);
        }

        #[test]
        fn pairwise_reward_complements_to_one(seed in 0u64..100) {
            let w = world();
            let m = small_model(seed);
            let mut rng = seeds::rng(seed, "complement");
            let p = w.sample_prompt(&mut rng);
            let a = w.sample_response_uniform(&mut rng);
            let b = w.sample_response_uniform(&mut rng);
            let r_ab = m.pairwise_reward(&p, &a, &b).unwrap();
            let r_ba = m.pairwise_reward(&p, &b, &a).unwrap();
            prop_assert!((r_ab + r_ba - 1.0).abs() < 1e-12, "r_ab={} r_ba={}", r_ab, r_ba);
            prop_assert!((0.0..=1.0).contains(&r_ab));
        }
    }
}
