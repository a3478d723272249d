//! Generalized advantage estimation and return targets, undiscounted.
//!
//! With a discount of 1, the TD residual is `d_t = r_t + V(s_{t+1}) -
//! V(s_t)` with `V(s_T) = 0`, and the advantage is the
//! exponentially-weighted sum `A_t = sum_l lambda^l d_{t+l}`, computed by
//! the backward recursion `A_t = d_t + lambda * A_{t+1}`. Return targets
//! are `G_t = A_t + V(s_t)` with unclamped advantages; clamping applies
//! only to the advantages fed to the policy update.

use serde::{Deserialize, Serialize};

use super::rollout::Trajectory;
use super::value::ValueVariant;
use crate::error::{Error, Result};
use crate::reward::PointwiseRewardModel;

/// Backward-recursion advantages for one trajectory's step rewards and
/// values, discount 1.
pub fn gae_advantages(step_rewards: &[f64], values: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if step_rewards.len() != values.len() {
        return Err(Error::Dimension {
            context: "gae_advantages".into(),
            expected: format!("{} rewards", values.len()),
            actual: format!("{} rewards", step_rewards.len()),
        });
    }
    if step_rewards.is_empty() {
        return Err(Error::contract("gae_advantages: empty trajectory"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract(format!("lambda must be in [0, 1], got {lambda}")));
    }
    if step_rewards.iter().chain(values.iter()).any(|x| !x.is_finite()) {
        return Err(Error::Numeric("gae_advantages: non-finite input".into()));
    }
    let n = step_rewards.len();
    let mut adv = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        let v_next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = step_rewards[t] + v_next - values[t];
        next = delta + lambda * next;
        adv[t] = next;
    }
    Ok(adv)
}

/// Return targets `G_t = A_t + V(s_t)` from unclamped advantages.
pub fn returns_from(advantages: &[f64], values: &[f64]) -> Result<Vec<f64>> {
    if advantages.len() != values.len() {
        return Err(Error::Dimension {
            context: "returns_from".into(),
            expected: format!("{} advantages", values.len()),
            actual: format!("{} advantages", advantages.len()),
        });
    }
    Ok(advantages.iter().zip(values).map(|(a, v)| a + v).collect())
}

/// Clamp each advantage to `[-c, c]`. Never increases the mean square and
/// never changes a sign.
pub fn clamp_advantages(advantages: &[f64], c: f64) -> Result<Vec<f64>> {
    if !(c > 0.0) {
        return Err(Error::contract(format!("clamp threshold must be positive, got {c}")));
    }
    Ok(advantages.iter().map(|a| a.clamp(-c, c)).collect())
}

/// Which pointwise quantity substitutes for the terminal reward when the
/// critic target comes from the pointwise model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointwiseReturnMode {
    /// `score(response) - score(anchor)`: the distilled analogue of the
    /// centered pairwise reward.
    Difference,
    /// `score(response)` alone.
    Raw,
}

/// Critic return targets built from the pointwise model: the trajectory's
/// terminal reward is replaced by the pointwise quantity, advantages are
/// recomputed with the same values and lambda, and `G_t = A'_t + V(s_t)`.
/// Only meaningful for the without-anchor critic, whose inputs cannot see
/// the anchor the pairwise reward depends on.
pub fn returns_pointwise(
    traj: &Trajectory,
    pointwise: &PointwiseRewardModel,
    mode: PointwiseReturnMode,
    lambda: f64,
    variant: ValueVariant,
) -> Result<Vec<f64>> {
    if variant != ValueVariant::WithoutAnchor {
        return Err(Error::contract(
            "returns_pointwise requires the without-anchor critic variant",
        ));
    }
    let terminal = match mode {
        PointwiseReturnMode::Difference => {
            pointwise.score(&traj.prompt, &traj.response)?
                - pointwise.score(&traj.prompt, &traj.anchor)?
        }
        PointwiseReturnMode::Raw => pointwise.score(&traj.prompt, &traj.response)?,
    };
    let rewards = traj.step_rewards_with_terminal(terminal)?;
    let adv = gae_advantages(&rewards, &traj.values, lambda)?;
    returns_from(&adv, &traj.values)
}
