//! Rollout generation and trajectory bookkeeping.
//!
//! A trajectory records, per action: the behavior log-probability (from the
//! renormalized nucleus actually sampled), the full-distribution
//! log-probability under the rollout policy (the "old" policy of the PPO
//! ratio), the full-distribution log-probability under the frozen reference
//! policy, and the critic's value. The terminal pairwise reward is attached
//! after generation; KL penalties are per-step reward shaping.

use serde::{Deserialize, Serialize};

use super::policy::{top_p_sample, Policy, StepState};
use super::value::{ValueModel, ValueState, ValueVariant};
use crate::error::{Error, Result};
use crate::reward::PairwiseRewardModel;
use crate::synthworld::{Prompt, Response};

/// How the per-step KL penalty against the reference policy is estimated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlEstimator {
    /// Log-ratio at the taken action: unbiased single-sample estimator.
    Sampled,
    /// Exact per-state KL summed over the full action set.
    Full,
}

/// One generated episode with everything the PPO update needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: Prompt,
    pub anchor: Response,
    /// Action ids taken (the final one may be the end-of-sequence action).
    pub actions: Vec<usize>,
    /// Content tokens emitted (end-of-sequence excluded).
    pub response: Response,
    /// Log-probs under the renormalized nucleus sampled from.
    pub logprob_behavior: Vec<f64>,
    /// Full-distribution log-probs under the rollout (old) policy.
    pub logprob_old: Vec<f64>,
    /// Full-distribution log-probs under the frozen reference policy.
    pub logprob_ref: Vec<f64>,
    /// Critic values V(s_t) at each pre-action state.
    pub values: Vec<f64>,
    /// Pairwise reward of the response against the anchor, in [0, 1].
    pub terminal_reward: Option<f64>,
    /// Per-step KL penalties (already scaled by the coefficient).
    pub kl_penalties: Vec<f64>,
    /// Advantage estimates, filled by the update loop.
    pub advantages: Vec<f64>,
    /// Return targets for the critic, filled by the update loop.
    pub returns: Vec<f64>,
    /// Top-p used to generate this trajectory.
    pub top_p: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Check the length alignment invariants. `advantages`, `returns`, and
    /// `kl_penalties` may be empty (not yet filled) or length-aligned.
    pub fn validate(&self) -> Result<()> {
        let n = self.actions.len();
        if n == 0 {
            return Err(Error::contract("trajectory with no actions"));
        }
        let aligned = |len: usize| len == n;
        if !aligned(self.logprob_behavior.len())
            || !aligned(self.logprob_old.len())
            || !aligned(self.logprob_ref.len())
            || !aligned(self.values.len())
        {
            return Err(Error::contract("trajectory sequences are not length-aligned"));
        }
        for seq in [&self.kl_penalties, &self.advantages, &self.returns] {
            if !seq.is_empty() && !aligned(seq.len()) {
                return Err(Error::contract("trajectory sequences are not length-aligned"));
            }
        }
        Ok(())
    }

    /// Per-step rewards: minus the KL penalty everywhere, plus the terminal
    /// pairwise reward at the final step.
    pub fn step_rewards(&self) -> Result<Vec<f64>> {
        let terminal = self
            .terminal_reward
            .ok_or_else(|| Error::contract("step_rewards: terminal reward not attached"))?;
        self.step_rewards_with_terminal(terminal)
    }

    /// Per-step rewards with an explicit terminal reward (used by the
    /// pointwise-return path, which substitutes a different terminal).
    pub fn step_rewards_with_terminal(&self, terminal: f64) -> Result<Vec<f64>> {
        self.validate()?;
        if self.kl_penalties.len() != self.actions.len() {
            return Err(Error::contract(
                "step_rewards: KL penalties not populated",
            ));
        }
        let mut rewards: Vec<f64> = self.kl_penalties.iter().map(|p| -p).collect();
        *rewards.last_mut().expect("non-empty") += terminal;
        Ok(rewards)
    }
}

/// Generate one episode from `policy` (no reward, no KL penalties yet).
/// Values come from `value`; the reference policy provides per-step
/// reference log-probs. Terminates at the end-of-sequence action or at the
/// maximum response length.
pub fn sample_rollout(
    policy: &Policy,
    reference: &Policy,
    value: &ValueModel,
    prompt: &Prompt,
    anchor: &Response,
    top_p: f64,
    rng: &mut impl rand::Rng,
) -> Result<Trajectory> {
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(Error::contract(format!("top_p must be in (0, 1], got {top_p}")));
    }
    let mut prefix: Vec<crate::synthworld::Token> = Vec::new();
    let mut actions = Vec::new();
    let mut logprob_behavior = Vec::new();
    let mut logprob_old = Vec::new();
    let mut logprob_ref = Vec::new();
    let mut values = Vec::new();

    let anchor_opt = match value.variant() {
        ValueVariant::WithAnchor => Some(anchor),
        ValueVariant::WithoutAnchor => None,
    };
    loop {
        let state = StepState {
            prompt,
            prefix: &prefix,
        };
        let log_probs = policy.action_log_probs(&state)?;
        let sampled = top_p_sample(&log_probs, top_p, rng)?;
        let ref_log_probs = reference.action_log_probs(&state)?;
        values.push(value.value(&ValueState {
            prompt,
            anchor: anchor_opt,
            prefix: &prefix,
        })?);
        actions.push(sampled.action);
        logprob_behavior.push(sampled.logprob_behavior);
        logprob_old.push(sampled.logprob_full);
        logprob_ref.push(ref_log_probs[sampled.action]);

        if sampled.action == policy.eos_action() {
            break;
        }
        prefix.push(policy.action_token(sampled.action)?);
        if prefix.len() >= policy.max_response_len() {
            break;
        }
    }
    Ok(Trajectory {
        prompt: prompt.clone(),
        anchor: anchor.clone(),
        actions,
        response: Response { tokens: prefix },
        logprob_behavior,
        logprob_old,
        logprob_ref,
        values,
        terminal_reward: None,
        kl_penalties: Vec::new(),
        advantages: Vec::new(),
        returns: Vec::new(),
        top_p,
    })
}

/// Attach the pairwise reward of the generated response against the anchor
/// as the terminal reward.
pub fn attach_reward(traj: &mut Trajectory, rm: &PairwiseRewardModel) -> Result<()> {
    traj.validate()?;
    let r = rm.pairwise_reward(&traj.prompt, &traj.response, &traj.anchor)?;
    traj.terminal_reward = Some(r);
    Ok(())
}

/// Fill per-step KL penalties against the reference policy.
///
/// `Sampled`: `beta * (log pi_old(a_t|s_t) - log pi_ref(a_t|s_t))` at the
/// taken action — unbiased, uses only recorded log-probs. `Full`: exact KL
/// over the action set, recomputed from both policies at each state.
pub fn kl_penalty_per_step(
    traj: &mut Trajectory,
    beta: f64,
    estimator: KlEstimator,
    policy: &Policy,
    reference: &Policy,
) -> Result<()> {
    traj.validate()?;
    if beta < 0.0 {
        return Err(Error::contract("KL coefficient must be non-negative"));
    }
    let penalties = match estimator {
        KlEstimator::Sampled => traj
            .logprob_old
            .iter()
            .zip(&traj.logprob_ref)
            .map(|(lo, lr)| beta * (lo - lr))
            .collect(),
        KlEstimator::Full => {
            let mut out = Vec::with_capacity(traj.len());
            let mut prefix: Vec<crate::synthworld::Token> = Vec::new();
            for (t, &action) in traj.actions.iter().enumerate() {
                let state = StepState {
                    prompt: &traj.prompt,
                    prefix: &prefix,
                };
                let lp = policy.action_log_probs(&state)?;
                let lr = reference.action_log_probs(&state)?;
                let kl: f64 = lp
                    .iter()
                    .zip(&lr)
                    .map(|(a, b)| a.exp() * (a - b))
                    .sum();
                out.push(beta * kl);
                if t + 1 < traj.len() {
                    prefix.push(policy.action_token(action)?);
                }
            }
            out
        }
    };
    traj.kl_penalties = penalties;
    Ok(())
}
