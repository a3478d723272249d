//! Clipped-surrogate policy optimization against per-prompt anchors.
//!
//! Each iteration: roll out the current policy on a sampled prompt batch
//! (half the rollouts at a low top-p, half at 1.0), attach the pairwise
//! reward of each response against its anchor, shape rewards with per-step
//! KL penalties against the frozen reference policy, estimate advantages,
//! clamp them, then take minibatch policy and critic steps. The PPO ratio
//! uses full-distribution log-probabilities on both sides, so at the first
//! epoch the ratio is exactly 1 and the surrogate's gradient is the vanilla
//! policy gradient.

use serde::{Deserialize, Serialize};

use super::gae::{
    clamp_advantages, gae_advantages, returns_from, returns_pointwise, PointwiseReturnMode,
};
use super::policy::{Policy, PolicyNodes, StepState};
use super::rollout::{
    attach_reward, kl_penalty_per_step, sample_rollout, KlEstimator, Trajectory,
};
use super::value::{ValueModel, ValueNodes, ValueState, ValueVariant};
use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::optim::{OptimizerMode, OptimizerState};
use crate::numerics::tensor::Tensor;
use crate::reward::{PairwiseRewardModel, PointwiseRewardModel};
use crate::seeds;
use crate::synthworld::{Prompt, Response, SynthWorld};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    /// KL penalty coefficient. Default: 0.001.
    pub beta: f64,
    /// Clip range for the surrogate ratio. Default: 0.2.
    pub clip: f64,
    /// Advantage-estimation decay. Default: 0.95.
    pub lambda: f64,
    /// Advantage clamp threshold. Default: 3.0.
    pub advantage_clamp: f64,
    /// Top-p for the low-diversity half of each rollout batch. Default: 0.7.
    pub top_p_low: f64,
    /// Top-p for the other half. Default: 1.0.
    pub top_p_high: f64,
    /// Policy learning rate. Default: 2e-3.
    pub policy_lr: f64,
    /// Critic learning rate. Default: 2e-3.
    pub value_lr: f64,
    /// Training iterations. Default: 200.
    pub iterations: usize,
    /// Rollouts per iteration. Default: 32.
    pub prompts_per_iter: usize,
    /// Optimization epochs over each rollout batch. Default: 1.
    pub epochs: usize,
    /// Minibatch size in trajectories. Default: 32.
    pub minibatch: usize,
    /// Critic variant. Default: with-anchor.
    pub value_variant: ValueVariant,
    /// Terminal quantity for without-anchor critic targets. Default:
    /// difference.
    pub pointwise_return: PointwiseReturnMode,
    /// KL penalty estimator. Default: sampled.
    pub kl_estimator: KlEstimator,
    /// Entropy bonus coefficient. Default: 0 (off).
    pub entropy_coeff: f64,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            beta: 0.001,
            clip: 0.2,
            lambda: 0.95,
            advantage_clamp: 3.0,
            top_p_low: 0.7,
            top_p_high: 1.0,
            policy_lr: 2e-3,
            value_lr: 2e-3,
            iterations: 200,
            prompts_per_iter: 32,
            epochs: 1,
            minibatch: 32,
            value_variant: ValueVariant::WithAnchor,
            pointwise_return: PointwiseReturnMode::Difference,
            kl_estimator: KlEstimator::Sampled,
            entropy_coeff: 0.0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(Error::config("rl.beta must be non-negative"));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::config("rl.clip must be in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("rl.lambda must be in [0, 1]"));
        }
        if !(self.advantage_clamp > 0.0) {
            return Err(Error::config("rl.advantage_clamp must be positive"));
        }
        for (name, p) in [("top_p_low", self.top_p_low), ("top_p_high", self.top_p_high)] {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::config(format!("rl.{name} must be in (0, 1]")));
            }
        }
        if !(self.policy_lr > 0.0) || !(self.value_lr > 0.0) {
            return Err(Error::config("rl learning rates must be positive"));
        }
        if self.iterations == 0
            || self.prompts_per_iter == 0
            || self.epochs == 0
            || self.minibatch == 0
        {
            return Err(Error::config(
                "rl.iterations, prompts_per_iter, epochs, minibatch must be positive",
            ));
        }
        if self.entropy_coeff < 0.0 {
            return Err(Error::config("rl.entropy_coeff must be non-negative"));
        }
        Ok(())
    }
}

/// Nodes of one surrogate-loss construction.
pub struct PpoLossParts {
    /// Scalar loss to minimize (negated objective, minus entropy bonus).
    pub loss: NodeId,
    /// Mean clipped objective (the quantity being maximized).
    pub mean_objective: NodeId,
    /// Per-transition probability ratios `[n]`.
    pub ratio: NodeId,
}

/// Build the clipped surrogate `mean min(ratio*A, clip(ratio)*A)` on the
/// tape, negated for minimization. Ratios compare the current policy's
/// full-distribution log-probs to the stored rollout-time ones.
#[allow(clippy::too_many_arguments)]
pub fn ppo_clip_loss_node(
    g: &mut Graph,
    policy: &Policy,
    nodes: &PolicyNodes,
    states: &[StepState],
    actions: &[usize],
    old_logprobs: &[f64],
    advantages: &[f64],
    clip: f64,
    entropy_coeff: f64,
) -> Result<PpoLossParts> {
    let n = states.len();
    if n == 0 || actions.len() != n || old_logprobs.len() != n || advantages.len() != n {
        return Err(Error::contract(
            "ppo_clip_loss: states, actions, old log-probs, advantages must align and be non-empty",
        ));
    }
    let a_count = policy.action_count();
    for &a in actions {
        if a >= a_count {
            return Err(Error::contract(format!("ppo_clip_loss: action {a} out of range")));
        }
    }
    let logits = policy.action_logits_graph(g, nodes, states)?;
    let ls = g.log_softmax_rows(logits);
    let mut mask = Tensor::zeros(&[n, a_count]);
    for (i, &a) in actions.iter().enumerate() {
        mask.set2(i, a, 1.0);
    }
    let mask_node = g.leaf(mask);
    let picked_full = g.mul(ls, mask_node);
    let picked = g.row_sum(picked_full);
    let old_node = g.leaf(Tensor::vector(old_logprobs.to_vec()));
    let diff = g.sub(picked, old_node);
    let ratio = g.exp(diff);
    let adv_node = g.leaf(Tensor::vector(advantages.to_vec()));
    let unclipped = g.mul(ratio, adv_node);
    let clipped_ratio = g.clamp(ratio, 1.0 - clip, 1.0 + clip);
    let clipped = g.mul(clipped_ratio, adv_node);
    let objective = g.min_elem(unclipped, clipped);
    let mean_objective = g.mean_all(objective);
    let mut loss = g.neg(mean_objective);
    if entropy_coeff != 0.0 {
        let probs = g.exp(ls);
        let plogp = g.mul(probs, ls);
        let row_neg_ent = g.row_sum(plogp);
        let mean_neg_ent = g.mean_all(row_neg_ent);
        // entropy bonus: subtract coeff * entropy from the loss
        let scaled = g.scale(mean_neg_ent, entropy_coeff);
        loss = g.add(loss, scaled);
    }
    Ok(PpoLossParts {
        loss,
        mean_objective,
        ratio,
    })
}

/// Surrogate loss value only (plain wrapper for derivative checks).
#[allow(clippy::too_many_arguments)]
pub fn ppo_clip_loss(
    policy: &Policy,
    states: &[StepState],
    actions: &[usize],
    old_logprobs: &[f64],
    advantages: &[f64],
    clip: f64,
    entropy_coeff: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let nodes = policy.register(&mut g);
    let parts = ppo_clip_loss_node(
        &mut g,
        policy,
        &nodes,
        states,
        actions,
        old_logprobs,
        advantages,
        clip,
        entropy_coeff,
    )?;
    Ok(g.value(parts.loss).item())
}

/// Mean squared error between critic outputs and return targets.
pub fn value_loss_node(
    g: &mut Graph,
    value: &ValueModel,
    nodes: &ValueNodes,
    states: &[ValueState],
    returns: &[f64],
) -> Result<NodeId> {
    if states.is_empty() || states.len() != returns.len() {
        return Err(Error::contract(
            "value_loss: states and returns must align and be non-empty",
        ));
    }
    let v = value.values_graph(g, nodes, states)?;
    let target = g.leaf(Tensor::from_vec(&[returns.len(), 1], returns.to_vec())?);
    let resid = g.sub(v, target);
    let sq = g.square(resid);
    Ok(g.mean_all(sq))
}

/// Critic loss value only (plain wrapper for derivative checks).
pub fn value_loss(value: &ValueModel, states: &[ValueState], returns: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let nodes = value.register(&mut g);
    let loss = value_loss_node(&mut g, value, &nodes, states, returns)?;
    Ok(g.value(loss).item())
}

/// Per-iteration training diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iter: u64,
    /// Mean terminal pairwise reward across the iteration's rollouts.
    pub mean_reward: f64,
    /// Mean sampled log-ratio vs the reference policy, nats per token.
    pub mean_kl_ref: f64,
    /// Fraction of transitions whose ratio left the clip range after the
    /// update (0 before any update by construction).
    pub clip_fraction: f64,
    /// Critic loss on the batch before the critic step.
    pub value_loss: f64,
    /// Hidden-quality win rate of the rollouts against their anchors
    /// (ties count one half).
    pub oracle_win_rate: f64,
}

fn oracle_win(world: &SynthWorld, prompt: &Prompt, y: &Response, anchor: &Response) -> Result<f64> {
    let qy = world.hidden_quality(prompt, y)?;
    let qa = world.hidden_quality(prompt, anchor)?;
    Ok(if qy > qa {
        1.0
    } else if qy < qa {
        0.0
    } else {
        0.5
    })
}

/// Hidden-quality win rate of freshly generated responses against each
/// prompt's anchor, `samples_per_pair` draws each, ties counting one half.
pub fn eval_oracle_win_rate(
    world: &SynthWorld,
    policy: &Policy,
    pairs: &[(Prompt, Response)],
    samples_per_pair: usize,
    top_p: f64,
    rng: &mut impl rand::Rng,
) -> Result<f64> {
    if pairs.is_empty() || samples_per_pair == 0 {
        return Err(Error::contract(
            "eval_oracle_win_rate: need at least one pair and one sample",
        ));
    }
    let mut total = 0.0;
    for (prompt, anchor) in pairs {
        for _ in 0..samples_per_pair {
            let y = generate_response(policy, prompt, top_p, rng)?;
            total += oracle_win(world, prompt, &y, anchor)?;
        }
    }
    Ok(total / (pairs.len() * samples_per_pair) as f64)
}

/// Sample one response from the policy without trajectory bookkeeping.
pub fn generate_response(
    policy: &Policy,
    prompt: &Prompt,
    top_p: f64,
    rng: &mut impl rand::Rng,
) -> Result<Response> {
    let mut prefix: Vec<crate::synthworld::Token> = Vec::new();
    loop {
        let state = StepState {
            prompt,
            prefix: &prefix,
        };
        let log_probs = policy.action_log_probs(&state)?;
        let sampled = super::policy::top_p_sample(&log_probs, top_p, rng)?;
        if sampled.action == policy.eos_action() {
            break;
        }
        prefix.push(policy.action_token(sampled.action)?);
        if prefix.len() >= policy.max_response_len() {
            break;
        }
    }
    Ok(Response { tokens: prefix })
}

struct TransitionRefs<'a> {
    states: Vec<StepState<'a>>,
    value_states: Vec<ValueState<'a>>,
    actions: Vec<usize>,
    old: Vec<f64>,
    adv: Vec<f64>,
    ret: Vec<f64>,
}

fn collect_transitions<'a>(
    trajs: &'a [Trajectory],
    indices: &[usize],
    variant: ValueVariant,
) -> TransitionRefs<'a> {
    let mut out = TransitionRefs {
        states: Vec::new(),
        value_states: Vec::new(),
        actions: Vec::new(),
        old: Vec::new(),
        adv: Vec::new(),
        ret: Vec::new(),
    };
    for &i in indices {
        let traj = &trajs[i];
        for t in 0..traj.len() {
            let prefix = &traj.response.tokens[..t.min(traj.response.tokens.len())];
            out.states.push(StepState {
                prompt: &traj.prompt,
                prefix,
            });
            out.value_states.push(ValueState {
                prompt: &traj.prompt,
                anchor: match variant {
                    ValueVariant::WithAnchor => Some(&traj.anchor),
                    ValueVariant::WithoutAnchor => None,
                },
                prefix,
            });
            out.actions.push(traj.actions[t]);
            out.old.push(traj.logprob_old[t]);
            out.adv.push(traj.advantages[t]);
            out.ret.push(traj.returns[t]);
        }
    }
    out
}

fn iteration_error(iter: u64, e: Error) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("rl iteration {iter}: {m}")),
        other => other,
    }
}

/// Run pairwise PPO. The policy and critic are updated in place; the
/// reference policy stays frozen. `pairs` maps each training prompt to its
/// anchor. The pointwise model is required only for the without-anchor
/// critic. Deterministic in (models, pairs, config, seed).
#[allow(clippy::too_many_arguments)]
pub fn train_pairwise_ppo(
    policy: &mut Policy,
    value: &mut ValueModel,
    reference: &Policy,
    rm: &PairwiseRewardModel,
    pointwise: Option<&PointwiseRewardModel>,
    world: &SynthWorld,
    pairs: &[(Prompt, Response)],
    cfg: &RlConfig,
    seed: u64,
) -> Result<Vec<IterationMetrics>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::contract("train_pairwise_ppo: no prompt/anchor pairs"));
    }
    if value.variant() != cfg.value_variant {
        return Err(Error::contract(
            "train_pairwise_ppo: critic variant does not match config",
        ));
    }
    if cfg.value_variant == ValueVariant::WithoutAnchor && pointwise.is_none() {
        return Err(Error::contract(
            "train_pairwise_ppo: without-anchor critic requires a pointwise model",
        ));
    }
    let mut policy_opt = OptimizerState::new(policy, OptimizerMode::adaptive_default(), cfg.policy_lr);
    let mut value_opt = OptimizerState::new(value, OptimizerMode::adaptive_default(), cfg.value_lr);
    let mut history = Vec::with_capacity(cfg.iterations);

    for iter in 0..cfg.iterations as u64 {
        let mut rng = seeds::rng_indexed(seed, "rl-iter", iter);

        // exactly half the rollouts at the low top-p, randomly placed
        let n = cfg.prompts_per_iter;
        let mut top_ps = vec![cfg.top_p_low; n / 2];
        top_ps.resize(n, cfg.top_p_high);
        rand::seq::SliceRandom::shuffle(top_ps.as_mut_slice(), &mut rng);

        let mut trajs = Vec::with_capacity(n);
        for &top_p in &top_ps {
            let (prompt, anchor) = &pairs[rand::Rng::gen_range(&mut rng, 0..pairs.len())];
            let mut traj = sample_rollout(policy, reference, value, prompt, anchor, top_p, &mut rng)
                .map_err(|e| iteration_error(iter, e))?;
            attach_reward(&mut traj, rm).map_err(|e| iteration_error(iter, e))?;
            kl_penalty_per_step(&mut traj, cfg.beta, cfg.kl_estimator, policy, reference)
                .map_err(|e| iteration_error(iter, e))?;
            let rewards = traj.step_rewards().map_err(|e| iteration_error(iter, e))?;
            let raw_adv = gae_advantages(&rewards, &traj.values, cfg.lambda)
                .map_err(|e| iteration_error(iter, e))?;
            traj.returns = match cfg.value_variant {
                ValueVariant::WithAnchor => returns_from(&raw_adv, &traj.values)?,
                ValueVariant::WithoutAnchor => returns_pointwise(
                    &traj,
                    pointwise.expect("checked above"),
                    cfg.pointwise_return,
                    cfg.lambda,
                    cfg.value_variant,
                )
                .map_err(|e| iteration_error(iter, e))?,
            };
            traj.advantages = clamp_advantages(&raw_adv, cfg.advantage_clamp)?;
            trajs.push(traj);
        }

        // pre-update diagnostics
        let mean_reward = trajs
            .iter()
            .map(|t| t.terminal_reward.expect("attached"))
            .sum::<f64>()
            / trajs.len() as f64;
        let (mut kl_sum, mut steps) = (0.0, 0usize);
        let mut win_sum = 0.0;
        for t in &trajs {
            for (lo, lr) in t.logprob_old.iter().zip(&t.logprob_ref) {
                kl_sum += lo - lr;
            }
            steps += t.len();
            win_sum += oracle_win(world, &t.prompt, &t.response, &t.anchor)?;
        }
        let mean_kl_ref = kl_sum / steps as f64;
        let oracle_win_rate = win_sum / trajs.len() as f64;
        let full = collect_transitions(&trajs, &(0..trajs.len()).collect::<Vec<_>>(), cfg.value_variant);
        let value_loss_pre = value_loss(value, &full.value_states, &full.ret)
            .map_err(|e| iteration_error(iter, e))?;

        // minibatch updates
        let mut order: Vec<usize> = (0..trajs.len()).collect();
        for _epoch in 0..cfg.epochs {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            for chunk in order.chunks(cfg.minibatch) {
                let batch = collect_transitions(&trajs, chunk, cfg.value_variant);

                let mut g = Graph::new();
                let nodes = policy.register(&mut g);
                let parts = ppo_clip_loss_node(
                    &mut g,
                    policy,
                    &nodes,
                    &batch.states,
                    &batch.actions,
                    &batch.old,
                    &batch.adv,
                    cfg.clip,
                    cfg.entropy_coeff,
                )
                .map_err(|e| iteration_error(iter, e))?;
                if !g.value(parts.loss).item().is_finite() {
                    return Err(Error::Numeric(format!(
                        "rl iteration {iter}: non-finite policy loss"
                    )));
                }
                let grads = g.backward(parts.loss).map_err(|e| iteration_error(iter, e))?;
                let blocks = policy.gradients(&g, &grads, &nodes);
                policy_opt
                    .step(policy, &blocks)
                    .map_err(|e| iteration_error(iter, e))?;

                let mut gv = Graph::new();
                let vnodes = value.register(&mut gv);
                let vloss =
                    value_loss_node(&mut gv, value, &vnodes, &batch.value_states, &batch.ret)
                        .map_err(|e| iteration_error(iter, e))?;
                if !gv.value(vloss).item().is_finite() {
                    return Err(Error::Numeric(format!(
                        "rl iteration {iter}: non-finite critic loss"
                    )));
                }
                let vgrads = gv.backward(vloss).map_err(|e| iteration_error(iter, e))?;
                let vblocks = value.gradients(&gv, &vgrads, &vnodes);
                value_opt
                    .step(value, &vblocks)
                    .map_err(|e| iteration_error(iter, e))?;
            }
        }

        // post-update clip diagnostics on the whole batch
        let mut clipped = 0usize;
        {
            let logits = policy
                .action_logits(&full.states)
                .map_err(|e| iteration_error(iter, e))?;
            let ls = crate::numerics::tensor::log_softmax_rows(&logits);
            for (i, (&a, &old)) in full.actions.iter().zip(&full.old).enumerate() {
                let ratio = (ls.get2(i, a) - old).exp();
                if (ratio - 1.0).abs() > cfg.clip {
                    clipped += 1;
                }
            }
        }
        let metrics = IterationMetrics {
            iter,
            mean_reward,
            mean_kl_ref,
            clip_fraction: clipped as f64 / full.actions.len() as f64,
            value_loss: value_loss_pre,
            oracle_win_rate,
        };
        if !metrics.mean_reward.is_finite()
            || !metrics.mean_kl_ref.is_finite()
            || !metrics.value_loss.is_finite()
        {
            return Err(Error::Numeric(format!(
                "rl iteration {iter}: non-finite metrics"
            )));
        }
        history.push(metrics);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::mlp::ParamBlocks;
    use crate::reward::RmArch;
    use crate::rl::policy::PolicyArch;
    use crate::rl::value::ValueArch;
    use crate::synthworld::{SynthWorld, WorldConfig};
    use rand::Rng as _;

    fn setup() -> (SynthWorld, Policy, ValueModel, PairwiseRewardModel) {
        let w = SynthWorld::new(WorldConfig::default(), 0).unwrap();
        let mut rng = seeds::rng(0, "ppo-setup");
        let policy = Policy::init(w.vocab(), w.max_response_len(), PolicyArch::default(), &mut rng)
            .unwrap();
        let value = ValueModel::init(
            ValueVariant::WithAnchor,
            w.vocab(),
            w.max_response_len(),
            ValueArch::default(),
            &mut rng,
        )
        .unwrap();
        let rm = PairwiseRewardModel::init(w.vocab(), w.max_response_len(), RmArch::default(), &mut rng)
            .unwrap();
        (w, policy, value, rm)
    }

    fn perturb_policy(p: &mut Policy, seed: u64) {
        let mut rng = seeds::rng(seed, "perturb");
        for block in p.blocks_mut() {
            for x in block.data_mut() {
                *x += rng.gen_range(-0.5..0.5);
            }
        }
    }

    fn tiny_batch<'a>(
        w: &SynthWorld,
        policy: &Policy,
        prompt: &'a Prompt,
        resp: &'a Response,
    ) -> (Vec<StepState<'a>>, Vec<usize>, Vec<f64>, Vec<f64>) {
        let _ = w;
        let states = vec![
            StepState {
                prompt,
                prefix: &[],
            },
            StepState {
                prompt,
                prefix: &resp.tokens[..1],
            },
            StepState {
                prompt,
                prefix: &resp.tokens[..2],
            },
        ];
        let actions = vec![resp.tokens[0] as usize, resp.tokens[1] as usize, policy.eos_action()];
        let old: Vec<f64> = states
            .iter()
            .zip(&actions)
            .map(|(s, &a)| policy.action_log_probs(s).unwrap()[a])
            .collect();
        let adv = vec![0.7, -0.4, 1.2];
        (states, actions, old, adv)
    }

    #[test]
    fn surrogate_at_old_policy_equals_mean_advantage_with_policy_gradient() {
        let (w, mut policy, _, _) = setup();
        perturb_policy(&mut policy, 1);
        let mut rng = seeds::rng(1, "state");
        let prompt = w.sample_prompt(&mut rng);
        let resp = w.sample_response_uniform(&mut rng);
        let resp = if resp.tokens.len() >= 2 {
            resp
        } else {
            Response {
                tokens: vec![1, 2, 3],
            }
        };
        let (states, actions, old, adv) = tiny_batch(&w, &policy, &prompt, &resp);

        let mut g = Graph::new();
        let nodes = policy.register(&mut g);
        let parts = ppo_clip_loss_node(
            &mut g, &policy, &nodes, &states, &actions, &old, &adv, 0.2, 0.0,
        )
        .unwrap();
        // ratios are exactly 1, so the objective is exactly the mean advantage
        let mean_adv = adv.iter().sum::<f64>() / adv.len() as f64;
        assert_eq!(g.value(parts.mean_objective).item(), mean_adv);
        for r in g.value(parts.ratio).data() {
            assert_eq!(*r, 1.0);
        }
        let grads = g.backward(parts.loss).unwrap();
        let ppo_grads = policy.gradients(&g, &grads, &nodes);

        // vanilla policy gradient: -mean(A * log pi(a|s))
        let mut g2 = Graph::new();
        let nodes2 = policy.register(&mut g2);
        let logits = policy.action_logits_graph(&mut g2, &nodes2, &states).unwrap();
        let ls = g2.log_softmax_rows(logits);
        let mut mask = Tensor::zeros(&[3, policy.action_count()]);
        for (i, &a) in actions.iter().enumerate() {
            mask.set2(i, a, 1.0);
        }
        let mask_node = g2.leaf(mask);
        let picked_full = g2.mul(ls, mask_node);
        let picked = g2.row_sum(picked_full);
        let adv_node = g2.leaf(Tensor::vector(adv.clone()));
        let weighted = g2.mul(picked, adv_node);
        let mean = g2.mean_all(weighted);
        let pg_loss = g2.neg(mean);
        let grads2 = g2.backward(pg_loss).unwrap();
        let pg_grads = policy.gradients(&g2, &grads2, &nodes2);

        for (a, b) in ppo_grads.iter().zip(&pg_grads) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12, "ppo {x} vs pg {y}");
            }
        }
    }

    #[test]
    fn clip_arithmetic_matches_worked_examples() {
        let (w, mut policy, _, _) = setup();
        perturb_policy(&mut policy, 2);
        let mut rng = seeds::rng(2, "state");
        let prompt = w.sample_prompt(&mut rng);
        let state = StepState {
            prompt: &prompt,
            prefix: &[],
        };
        let lp = policy.action_log_probs(&state).unwrap();

        // ratio 1.3 with advantage 1 -> objective min(1.3, 1.2) = 1.2
        let old = lp[0] - 1.3f64.ln();
        let mut g = Graph::new();
        let nodes = policy.register(&mut g);
        let parts = ppo_clip_loss_node(
            &mut g,
            &policy,
            &nodes,
            std::slice::from_ref(&state),
            &[0],
            &[old],
            &[1.0],
            0.2,
            0.0,
        )
        .unwrap();
        assert!((g.value(parts.mean_objective).item() - 1.2).abs() < 1e-12);

        // ratio 0.5 with advantage -1 -> objective min(-0.5, -0.8) = -0.8
        let old2 = lp[0] - 0.5f64.ln();
        let mut g2 = Graph::new();
        let nodes2 = policy.register(&mut g2);
        let parts2 = ppo_clip_loss_node(
            &mut g2,
            &policy,
            &nodes2,
            std::slice::from_ref(&state),
            &[0],
            &[old2],
            &[-1.0],
            0.2,
            0.0,
        )
        .unwrap();
        assert!((g2.value(parts2.mean_objective).item() - (-0.8)).abs() < 1e-12);
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let (w, mut policy, _, _) = setup();
        perturb_policy(&mut policy, 3);
        let mut rng = seeds::rng(3, "fd");
        let prompt = w.sample_prompt(&mut rng);
        let resp = Response {
            tokens: vec![2, 5, 1],
        };
        let (states, actions, mut old, adv) = tiny_batch(&w, &policy, &prompt, &resp);
        // move off the trivial ratio-1 point so the exp path is exercised
        for (i, o) in old.iter_mut().enumerate() {
            *o += 0.05 * (i as f64 + 1.0);
        }

        let analytic = {
            let mut g = Graph::new();
            let nodes = policy.register(&mut g);
            let parts = ppo_clip_loss_node(
                &mut g, &policy, &nodes, &states, &actions, &old, &adv, 0.2, 0.01,
            )
            .unwrap();
            let grads = g.backward(parts.loss).unwrap();
            policy.gradients(&g, &grads, &nodes)
        };
        let report = crate::numerics::grad_check(
            &mut policy,
            |p| ppo_clip_loss(p, &states, &actions, &old, &adv, 0.2, 0.01),
            &analytic,
            crate::numerics::DEFAULT_STEP,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "worst {:?}", report.worst);
    }

    #[test]
    fn value_loss_is_zero_for_perfect_fit_and_matches_finite_differences() {
        let (w, _, mut value, _) = setup();
        let mut rng = seeds::rng(4, "vfd");
        let prompt = w.sample_prompt(&mut rng);
        let anchor = w.sample_response_uniform(&mut rng);
        let states = vec![
            ValueState {
                prompt: &prompt,
                anchor: Some(&anchor),
                prefix: &[],
            },
            ValueState {
                prompt: &prompt,
                anchor: Some(&anchor),
                prefix: &[3],
            },
        ];
        // critic initializes to exactly zero, so zero targets fit perfectly
        assert_eq!(value_loss(&value, &states, &[0.0, 0.0]).unwrap(), 0.0);

        for block in value.blocks_mut() {
            for x in block.data_mut() {
                *x += rng.gen_range(-0.5..0.5);
            }
        }
        let returns = vec![0.4, -0.2];
        let analytic = {
            let mut g = Graph::new();
            let nodes = value.register(&mut g);
            let loss = value_loss_node(&mut g, &value, &nodes, &states, &returns).unwrap();
            let grads = g.backward(loss).unwrap();
            value.gradients(&g, &grads, &nodes)
        };
        let report = crate::numerics::grad_check(
            &mut value,
            |v| value_loss(v, &states, &returns),
            &analytic,
            crate::numerics::DEFAULT_STEP,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "worst {:?}", report.worst);
    }

    #[test]
    fn value_fits_constant_targets_with_enough_steps() {
        let (w, _, mut value, _) = setup();
        let mut rng = seeds::rng(5, "vfit");
        let prompt = w.sample_prompt(&mut rng);
        let anchor = w.sample_response_uniform(&mut rng);
        let states = vec![
            ValueState {
                prompt: &prompt,
                anchor: Some(&anchor),
                prefix: &[],
            },
            ValueState {
                prompt: &prompt,
                anchor: Some(&anchor),
                prefix: &[1, 2],
            },
        ];
        let returns = vec![0.37, 0.37];
        let mut opt = OptimizerState::new(&value, OptimizerMode::adaptive_default(), 5e-3);
        for _ in 0..400 {
            let mut g = Graph::new();
            let nodes = value.register(&mut g);
            let loss = value_loss_node(&mut g, &value, &nodes, &states, &returns).unwrap();
            let grads = g.backward(loss).unwrap();
            let blocks = value.gradients(&g, &grads, &nodes);
            opt.step(&mut value, &blocks).unwrap();
        }
        assert!(value_loss(&value, &states, &returns).unwrap() < 1e-4);
    }

    #[test]
    fn win_prob_sensitivity_peaks_at_equal_scores() {
        // |d win_prob / d score| is sigma'(delta): maximal at 0, strictly
        // decreasing in |delta|
        let h = 1e-6;
        let sens = |delta: f64| {
            let f = |d: f64| 1.0 / (1.0 + (-d).exp());
            ((f(delta + h) - f(delta - h)) / (2.0 * h)).abs()
        };
        let grid: Vec<f64> = (0..=24).map(|i| i as f64 * 0.25).collect();
        let at_zero = sens(0.0);
        let mut prev = at_zero;
        for &d in &grid[1..] {
            let s = sens(d);
            assert!(s < prev, "sensitivity must decay with |delta| (at {d})");
            assert!((sens(-d) - s).abs() < 1e-9, "symmetry at {d}");
            prev = s;
        }
        assert!((at_zero - 0.25).abs() < 1e-6);
    }

    fn small_world_setup(
        n_pairs: usize,
    ) -> (
        SynthWorld,
        Policy,
        Policy,
        ValueModel,
        PairwiseRewardModel,
        Vec<(Prompt, Response)>,
    ) {
        let (w, policy, value, rm) = setup();
        let reference = policy.clone();
        let mut rng = seeds::rng(9, "pairs");
        let pairs: Vec<(Prompt, Response)> = (0..n_pairs)
            .map(|_| {
                let p = w.sample_prompt(&mut rng);
                let a = generate_response(&policy, &p, 1.0, &mut rng).unwrap();
                (p, a)
            })
            .collect();
        (w, policy, reference, value, rm, pairs)
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let cfg = RlConfig {
            iterations: 4,
            prompts_per_iter: 6,
            minibatch: 6,
            ..RlConfig::default()
        };
        let run = || {
            let (w, mut policy, reference, mut value, rm, pairs) = small_world_setup(8);
            let h =
                train_pairwise_ppo(&mut policy, &mut value, &reference, &rm, None, &w, &pairs, &cfg, 7)
                    .unwrap();
            (h, crate::numerics::flatten_params(&policy))
        };
        let (h1, p1) = run();
        let (h2, p2) = run();
        assert_eq!(h1, h2);
        assert_eq!(p1, p2);

        let (w, mut policy, reference, mut value, rm, pairs) = small_world_setup(8);
        let h3 =
            train_pairwise_ppo(&mut policy, &mut value, &reference, &rm, None, &w, &pairs, &cfg, 8)
                .unwrap();
        assert_ne!(h1, h3, "different seeds should differ");
    }

    #[test]
    fn huge_beta_pins_policy_to_reference() {
        let cfg = RlConfig {
            beta: 10.0,
            iterations: 25,
            prompts_per_iter: 8,
            minibatch: 8,
            ..RlConfig::default()
        };
        let (w, mut policy, reference, mut value, rm, pairs) = small_world_setup(8);
        let h = train_pairwise_ppo(
            &mut policy, &mut value, &reference, &rm, None, &w, &pairs, &cfg, 11,
        )
        .unwrap();
        let last = h.last().unwrap();
        assert!(
            last.mean_kl_ref < 0.05,
            "mean KL per token {} should stay small under beta=10",
            last.mean_kl_ref
        );
    }

    #[test]
    fn without_anchor_variant_requires_pointwise_model() {
        let (w, mut policy, reference, _, rm, pairs) = small_world_setup(4);
        let mut rng = seeds::rng(12, "wo");
        let mut value = ValueModel::init(
            ValueVariant::WithoutAnchor,
            w.vocab(),
            w.max_response_len(),
            ValueArch::default(),
            &mut rng,
        )
        .unwrap();
        let cfg = RlConfig {
            iterations: 1,
            prompts_per_iter: 2,
            minibatch: 2,
            value_variant: ValueVariant::WithoutAnchor,
            ..RlConfig::default()
        };
        let err = train_pairwise_ppo(
            &mut policy, &mut value, &reference, &rm, None, &w, &pairs, &cfg, 0,
        );
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn config_validation_rejects_out_of_range_fields() {
        let mut cfg = RlConfig::default();
        cfg.beta = -0.1;
        assert!(cfg.validate().is_err());
        cfg = RlConfig::default();
        cfg.clip = 1.0;
        assert!(cfg.validate().is_err());
        cfg = RlConfig::default();
        cfg.lambda = 1.1;
        assert!(cfg.validate().is_err());
        cfg = RlConfig::default();
        cfg.top_p_low = 0.0;
        assert!(cfg.validate().is_err());
        cfg = RlConfig::default();
        cfg.advantage_clamp = 0.0;
        assert!(cfg.validate().is_err());
        assert!(RlConfig::default().validate().is_ok());
    }

    #[test]
    fn metrics_are_finite_and_win_rate_starts_near_half() {
        let cfg = RlConfig {
            iterations: 3,
            prompts_per_iter: 16,
            minibatch: 16,
            ..RlConfig::default()
        };
        let (w, mut policy, reference, mut value, rm, pairs) = small_world_setup(16);
        let start = {
            let mut rng = seeds::rng(13, "start");
            eval_oracle_win_rate(&w, &policy, &pairs, 25, 1.0, &mut rng).unwrap()
        };
        // both sides drawn from the same untrained policy: symmetric
        assert!((start - 0.5).abs() < 0.1, "start win rate {start}");
        let h = train_pairwise_ppo(
            &mut policy, &mut value, &reference, &rm, None, &w, &pairs, &cfg, 13,
        )
        .unwrap();
        assert_eq!(h.len(), 3);
        for m in &h {
            assert!(m.mean_reward.is_finite());
            assert!((0.0..=1.0).contains(&m.mean_reward));
            assert!((0.0..=1.0).contains(&m.oracle_win_rate));
            assert!((0.0..=1.0).contains(&m.clip_fraction));
            assert!(m.value_loss >= 0.0);
        }
    }
}
