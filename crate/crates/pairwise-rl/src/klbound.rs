//! Numerical verification of a second-order KL safety bound for plain
//! policy-gradient steps.
//!
//! For a fixed state `s`, a policy `π_θ` over finitely many actions, and a
//! plain ascent step `θ' = θ + α·∇J` with `∇J = E_{a~π}[A(a)·∇log π(a|s)]`,
//! the induced policy movement is approximately
//!
//! ```text
//! KL(π_θ' ‖ π_θ) ≈ ½·Δθᵀ F Δθ,     F = E_{a~π}[∇log π ∇log πᵀ]
//! ```
//!
//! Chaining the trace bound for positive semi-definite `F` with the
//! Cauchy-Schwarz inequality `‖∇J‖² ≤ E[A²]·Tr(F)` yields the closed-form
//! ceiling
//!
//! ```text
//! KL(π_θ' ‖ π_θ) ≲ (α²/2)·E[A(s,a)²]·Tr(F)²
//! ```
//!
//! which explains why clamping oversized advantages (shrinking `E[A²]`)
//! directly shrinks the per-update KL budget. This module estimates every
//! quantity in that chain on exactly enumerable policies and checks each
//! inequality numerically: the Fisher matrix (exact enumeration and
//! Monte-Carlo), the score-mean-zero identity behind it, the quadratic KL
//! approximation, the Cauchy-Schwarz step, and the final bound under a real
//! parameter update. Steps large enough that the quadratic expansion no
//! longer describes the true KL are reported as out-of-regime rather than
//! failed.
//!
//! Verification deliberately runs on tiny policies (at most
//! [`MAX_VERIFIED_PARAMS`] parameters) so the full P×P Fisher matrix can be
//! formed and its eigenvalues computed exactly; the bound is about mechanism,
//! not scale.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::graph::Graph;
use crate::numerics::mlp::{flatten_params, unflatten_params, ParamBlocks};
use crate::numerics::tensor::Tensor;
use crate::rl::{Policy, StepState};
use crate::synthworld::{Prompt, Token};

/// Largest parameter count accepted by the verification routines. The P×P
/// Fisher matrix is materialised densely and eigendecomposed, so the cap
/// keeps every check exact and fast.
pub const MAX_VERIFIED_PARAMS: usize = 200;

/// Relative slack granted to the bound at the smallest positive step size in
/// a grid. Second-order expansions cannot be asserted exactly; the slack
/// doubles per decade of step size above the smallest one.
pub const BASE_BOUND_SLACK: f64 = 0.10;

/// Relative disagreement between the measured KL and its quadratic
/// approximation beyond which a step is considered outside the second-order
/// regime (and bound violations are reported, not failed).
pub const REGIME_TOL: f64 = 0.25;

/// A policy restricted to one fixed state, exposing exactly the quantities
/// the verification needs: the action distribution, per-action score vectors
/// `∇_θ log π(a|s)`, and parameter-space displacement.
///
/// Implementations must keep `params`, `shifted`, `probs`, and `score`
/// mutually consistent: `shifted(δ).params() == params() + δ`, and `score`
/// must be the exact gradient of `ln probs()[a]` with respect to `params()`.
pub trait EnumerablePolicy {
    /// Number of free parameters.
    fn param_count(&self) -> usize;
    /// Number of actions available in the fixed state.
    fn action_count(&self) -> usize;
    /// Action probabilities at the fixed state.
    fn probs(&self) -> Vec<f64>;
    /// Gradient of `ln π(action | s)` with respect to the parameters.
    ///
    /// Panics if `action >= action_count()`.
    fn score(&self, action: usize) -> Vec<f64>;
    /// Current parameter vector, length [`EnumerablePolicy::param_count`].
    fn params(&self) -> Vec<f64>;
    /// A copy of the policy with parameters `θ + delta`.
    ///
    /// Panics if `delta.len() != param_count()`.
    fn shifted(&self, delta: &[f64]) -> Self
    where
        Self: Sized;
    /// Human-readable description of the fixed state, for reports.
    fn state_label(&self) -> String;
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// A softmax policy whose logits are the parameters, with an optional extra
/// action whose logit is pinned to zero.
///
/// The pinned variant gives the classic one-parameter two-action policy
/// `π = (σ(θ), 1−σ(θ))`, whose Fisher information is `σ(θ)(1−σ(θ))` — handy
/// as a closed-form oracle. The free variant has `F = diag(π) − ππᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitPolicy {
    free_logits: Vec<f64>,
    pinned_zero: bool,
}

impl LogitPolicy {
    /// Policy over `logits.len()` actions, every logit a parameter.
    ///
    /// Panics if `logits` is empty.
    pub fn free(logits: Vec<f64>) -> Self {
        assert!(!logits.is_empty(), "LogitPolicy::free: need at least one logit");
        Self { free_logits: logits, pinned_zero: false }
    }

    /// Policy over `free_logits.len() + 1` actions; the last action's logit
    /// is fixed at zero and is not a parameter.
    ///
    /// Panics if `free_logits` is empty.
    pub fn pinned(free_logits: Vec<f64>) -> Self {
        assert!(!free_logits.is_empty(), "LogitPolicy::pinned: need at least one free logit");
        Self { free_logits, pinned_zero: true }
    }

    fn full_logits(&self) -> Vec<f64> {
        let mut z = self.free_logits.clone();
        if self.pinned_zero {
            z.push(0.0);
        }
        z
    }
}

impl EnumerablePolicy for LogitPolicy {
    fn param_count(&self) -> usize {
        self.free_logits.len()
    }

    fn action_count(&self) -> usize {
        self.free_logits.len() + usize::from(self.pinned_zero)
    }

    fn probs(&self) -> Vec<f64> {
        softmax(&self.full_logits())
    }

    fn score(&self, action: usize) -> Vec<f64> {
        assert!(action < self.action_count(), "LogitPolicy::score: action out of range");
        let p = self.probs();
        (0..self.param_count())
            .map(|j| f64::from(u8::from(action == j)) - p[j])
            .collect()
    }

    fn params(&self) -> Vec<f64> {
        self.free_logits.clone()
    }

    fn shifted(&self, delta: &[f64]) -> Self {
        assert_eq!(
            delta.len(),
            self.param_count(),
            "LogitPolicy::shifted: displacement length must match parameter count"
        );
        let mut out = self.clone();
        for (z, d) in out.free_logits.iter_mut().zip(delta) {
            *z += d;
        }
        out
    }

    fn state_label(&self) -> String {
        format!(
            "logit-table({} actions{})",
            self.action_count(),
            if self.pinned_zero { ", last pinned" } else { "" }
        )
    }
}

/// The sequence policy from [`crate::rl`] frozen at one decoding state, seen
/// through the [`EnumerablePolicy`] lens. Scores come from the same autodiff
/// tape the trainer uses; parameter displacement goes through the flat
/// parameter vector.
#[derive(Clone, Debug)]
pub struct PolicyStateView {
    policy: Policy,
    prompt: Prompt,
    prefix: Vec<Token>,
}

impl PolicyStateView {
    /// Freezes `policy` at the state given by `prompt` and the response
    /// prefix generated so far. Fails if the state is invalid for the policy
    /// (prefix too long, token out of vocabulary) or produces non-finite
    /// probabilities.
    pub fn new(policy: Policy, prompt: Prompt, prefix: Vec<Token>) -> Result<Self> {
        let view = Self { policy, prompt, prefix };
        let probs = view.policy.action_dist(&view.state())?;
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric(
                "policy state view: non-finite action probabilities".into(),
            ));
        }
        Ok(view)
    }

    fn state(&self) -> StepState<'_> {
        StepState { prompt: &self.prompt, prefix: &self.prefix }
    }
}

impl EnumerablePolicy for PolicyStateView {
    fn param_count(&self) -> usize {
        ParamBlocks::param_count(&self.policy)
    }

    fn action_count(&self) -> usize {
        self.policy.action_count()
    }

    fn probs(&self) -> Vec<f64> {
        self.policy
            .action_dist(&self.state())
            .expect("state was validated at construction")
    }

    fn score(&self, action: usize) -> Vec<f64> {
        assert!(action < self.action_count(), "PolicyStateView::score: action out of range");
        let mut g = Graph::new();
        let nodes = self.policy.register(&mut g);
        let logits = self
            .policy
            .action_logits_graph(&mut g, &nodes, &[self.state()])
            .expect("state was validated at construction");
        let log_probs = g.log_softmax_rows(logits);
        let picked = g.gather_rows(log_probs, &[action]);
        let scalar = g.sum_all(picked);
        let grads = g.backward(scalar).expect("scalar objective");
        let mut flat = Vec::with_capacity(self.param_count());
        for t in self.policy.gradients(&g, &grads, &nodes) {
            flat.extend_from_slice(t.data());
        }
        flat
    }

    fn params(&self) -> Vec<f64> {
        flatten_params(&self.policy)
    }

    fn shifted(&self, delta: &[f64]) -> Self {
        let mut flat = self.params();
        assert_eq!(
            delta.len(),
            flat.len(),
            "PolicyStateView::shifted: displacement length must match parameter count"
        );
        for (x, d) in flat.iter_mut().zip(delta) {
            *x += d;
        }
        let mut policy = self.policy.clone();
        unflatten_params(&mut policy, &flat).expect("length checked above");
        Self { policy, prompt: self.prompt.clone(), prefix: self.prefix.clone() }
    }

    fn state_label(&self) -> String {
        format!(
            "policy-state(prompt len {}, prefix len {})",
            self.prompt.tokens.len(),
            self.prefix.len()
        )
    }
}

/// How to take the expectation over actions when estimating score moments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FisherMode {
    /// Enumerate every action and weight by its exact probability.
    Exact,
    /// Average over actions sampled from the policy.
    MonteCarlo,
}

/// An estimated Fisher information matrix `E[∇log π ∇log πᵀ]` at one state.
///
/// Construction verifies the two structural invariants: symmetry within
/// `1e-10` and positive semi-definiteness (smallest eigenvalue at least
/// `-1e-8`, numerical slack).
#[derive(Clone, Debug)]
pub struct FisherEstimate {
    matrix: Tensor,
    samples: usize,
    state: String,
}

impl FisherEstimate {
    /// Maximum tolerated absolute asymmetry `|F_ij − F_ji|`.
    pub const SYMMETRY_TOL: f64 = 1e-10;
    /// Most negative eigenvalue accepted as "positive semi-definite".
    pub const MIN_EIGENVALUE_SLACK: f64 = -1e-8;

    fn from_matrix(matrix: Tensor, samples: usize, state: String) -> Result<Self> {
        if matrix.rank() != 2 || matrix.rows() != matrix.cols() || matrix.rows() == 0 {
            return Err(Error::Dimension {
                context: "FisherEstimate".into(),
                expected: "non-empty square matrix".into(),
                actual: format!("{:?}", matrix.shape()),
            });
        }
        if !matrix.is_finite() {
            return Err(Error::Numeric("Fisher estimate contains non-finite entries".into()));
        }
        let est = Self { matrix, samples, state };
        let asym = est.max_abs_asymmetry();
        if asym > Self::SYMMETRY_TOL {
            return Err(Error::Numeric(format!(
                "Fisher estimate asymmetric: max |F_ij - F_ji| = {asym:.3e}"
            )));
        }
        let min_eig = est.min_eigenvalue();
        if min_eig < Self::MIN_EIGENVALUE_SLACK {
            return Err(Error::Numeric(format!(
                "Fisher estimate not positive semi-definite: min eigenvalue {min_eig:.3e}"
            )));
        }
        Ok(est)
    }

    /// The P×P matrix itself.
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    /// Parameter count P.
    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    /// Monte-Carlo sample count; `0` means exact enumeration.
    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Description of the state the estimate was taken at.
    pub fn state(&self) -> &str {
        &self.state
    }

    /// `Tr(F)`, the expected squared score norm.
    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.matrix.get2(i, i)).sum()
    }

    /// `vᵀ F v`. Panics if `v.len() != dim()`.
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        assert_eq!(v.len(), self.dim(), "quadratic_form: vector length must match Fisher dim");
        let mut acc = 0.0;
        for i in 0..self.dim() {
            for j in 0..self.dim() {
                acc += v[i] * self.matrix.get2(i, j) * v[j];
            }
        }
        acc
    }

    /// Largest absolute difference between the matrix and its transpose.
    pub fn max_abs_asymmetry(&self) -> f64 {
        let p = self.dim();
        let mut worst: f64 = 0.0;
        for i in 0..p {
            for j in (i + 1)..p {
                worst = worst.max((self.matrix.get2(i, j) - self.matrix.get2(j, i)).abs());
            }
        }
        worst
    }

    /// Smallest eigenvalue (symmetric eigendecomposition).
    pub fn min_eigenvalue(&self) -> f64 {
        let p = self.dim();
        let m = DMatrix::from_row_slice(p, p, self.matrix.data());
        SymmetricEigen::new(m).eigenvalues.min()
    }
}

fn check_verifiable<P: EnumerablePolicy>(policy: &P, context: &str) -> Result<()> {
    let p = policy.param_count();
    if p == 0 {
        return Err(Error::contract(format!("{context}: policy has no parameters")));
    }
    if p > MAX_VERIFIED_PARAMS {
        return Err(Error::TooLarge(format!(
            "{context}: {p} parameters exceed the verification cap of {MAX_VERIFIED_PARAMS}; \
             use a smaller policy (the bound is about mechanism, not scale)"
        )));
    }
    Ok(())
}

fn sample_action(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Accumulates `weight · g gᵀ` into `acc` (row-major P×P), writing both
/// triangles from the same product so the result is exactly symmetric.
fn accumulate_outer(acc: &mut [f64], g: &[f64], weight: f64, p: usize) {
    for i in 0..p {
        let wi = weight * g[i];
        for j in i..p {
            let v = wi * g[j];
            acc[i * p + j] += v;
            if j != i {
                acc[j * p + i] += v;
            }
        }
    }
}

/// Estimates the Fisher information matrix `E_{a~π}[g(a) g(a)ᵀ]` with
/// `g(a) = ∇log π(a|s)` at the policy's fixed state.
///
/// Exact mode enumerates all actions and ignores `samples` and `rng`;
/// Monte-Carlo mode averages over `samples` actions drawn from the policy.
/// The estimate is symmetric by construction and checked positive
/// semi-definite.
pub fn estimate_fisher<P: EnumerablePolicy>(
    policy: &P,
    mode: FisherMode,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<FisherEstimate> {
    check_verifiable(policy, "estimate_fisher")?;
    let p = policy.param_count();
    let probs = policy.probs();
    let mut acc = vec![0.0; p * p];
    let recorded = match mode {
        FisherMode::Exact => {
            for (a, &pa) in probs.iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                accumulate_outer(&mut acc, &policy.score(a), pa, p);
            }
            0
        }
        FisherMode::MonteCarlo => {
            if samples == 0 {
                return Err(Error::contract(
                    "estimate_fisher: Monte-Carlo mode needs at least one sample",
                ));
            }
            let w = 1.0 / samples as f64;
            for _ in 0..samples {
                let a = sample_action(&probs, rng);
                accumulate_outer(&mut acc, &policy.score(a), w, p);
            }
            samples
        }
    };
    let matrix = Tensor::from_vec(&[p, p], acc)?;
    FisherEstimate::from_matrix(matrix, recorded, policy.state_label())
}

/// Measures `‖E[∇log π]‖₂`, which is exactly zero for any normalised policy.
///
/// Exact mode enumerates actions (residual should be below `1e-10`);
/// Monte-Carlo mode averages sampled scores, whose residual shrinks like
/// `1/√samples`. A residual far above those scales indicates a corrupted
/// (unnormalised) policy.
pub fn score_mean_zero_check<P: EnumerablePolicy>(
    policy: &P,
    mode: FisherMode,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    check_verifiable(policy, "score_mean_zero_check")?;
    let p = policy.param_count();
    let probs = policy.probs();
    let mut mean = vec![0.0; p];
    match mode {
        FisherMode::Exact => {
            for (a, &pa) in probs.iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                for (m, gi) in mean.iter_mut().zip(policy.score(a)) {
                    *m += pa * gi;
                }
            }
        }
        FisherMode::MonteCarlo => {
            if samples == 0 {
                return Err(Error::contract(
                    "score_mean_zero_check: Monte-Carlo mode needs at least one sample",
                ));
            }
            let w = 1.0 / samples as f64;
            for _ in 0..samples {
                let a = sample_action(&probs, rng);
                for (m, gi) in mean.iter_mut().zip(policy.score(a)) {
                    *m += w * gi;
                }
            }
        }
    }
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::Numeric("score_mean_zero_check: non-finite residual".into()));
    }
    Ok(norm)
}

/// Exact `KL(π_new ‖ π_old)` at the fixed state, by enumeration.
///
/// Both policies must expose the same action count. Underflowed
/// probabilities in `new` contribute zero; an action impossible under `old`
/// but possible under `new` makes the divergence infinite and is reported as
/// a numeric failure.
pub fn kl_exact<P: EnumerablePolicy>(new: &P, old: &P) -> Result<f64> {
    if new.action_count() != old.action_count() {
        return Err(Error::Dimension {
            context: "kl_exact".into(),
            expected: format!("{} actions", old.action_count()),
            actual: format!("{} actions", new.action_count()),
        });
    }
    let pn = new.probs();
    let po = old.probs();
    let mut kl = 0.0;
    for (a, (&n, &o)) in pn.iter().zip(&po).enumerate() {
        if n == 0.0 {
            continue;
        }
        if o == 0.0 {
            return Err(Error::Numeric(format!(
                "kl_exact: action {a} has probability 0 under the old policy but {n:.3e} \
                 under the new one"
            )));
        }
        kl += n * (n.ln() - o.ln());
    }
    if !kl.is_finite() {
        return Err(Error::Numeric("kl_exact: non-finite divergence".into()));
    }
    Ok(kl)
}

/// Returns `(exact KL(new‖old), ½·Δθᵀ F Δθ)` for the parameter displacement
/// between the two policies.
///
/// For displacement scale `s → 0` the gap between the two values shrinks
/// like `s³`, which callers can verify by halving a displacement and
/// checking the error drops by at least ~6× (ideal factor 8).
pub fn kl_second_order<P: EnumerablePolicy>(
    old: &P,
    new: &P,
    fisher: &FisherEstimate,
) -> Result<(f64, f64)> {
    if old.param_count() != fisher.dim() {
        return Err(Error::Dimension {
            context: "kl_second_order".into(),
            expected: format!("Fisher dim {}", old.param_count()),
            actual: format!("{}", fisher.dim()),
        });
    }
    if new.param_count() != old.param_count() {
        return Err(Error::Dimension {
            context: "kl_second_order".into(),
            expected: format!("{} parameters", old.param_count()),
            actual: format!("{} parameters", new.param_count()),
        });
    }
    let delta: Vec<f64> =
        new.params().iter().zip(old.params()).map(|(n, o)| n - o).collect();
    let exact = kl_exact(new, old)?;
    let quadratic = 0.5 * fisher.quadratic_form(&delta);
    if !quadratic.is_finite() {
        return Err(Error::Numeric("kl_second_order: non-finite quadratic form".into()));
    }
    Ok((exact, quadratic))
}

fn bound_rhs_from_moments(alpha: f64, e_a2: f64, trace: f64) -> f64 {
    0.5 * alpha * alpha * e_a2 * trace * trace
}

/// The closed-form KL ceiling `(α²/2)·E[A²]·Tr(F)²`, with `E[A²]` taken as
/// the mean square of the provided advantage draws.
///
/// Clamping advantages before the call can only shrink the result, because it
/// contracts every `A²` term.
pub fn bound_rhs(alpha: f64, advantages: &[f64], fisher: &FisherEstimate) -> Result<f64> {
    if advantages.is_empty() {
        return Err(Error::contract("bound_rhs: advantage sample must be non-empty"));
    }
    if !alpha.is_finite() || advantages.iter().any(|a| !a.is_finite()) {
        return Err(Error::Numeric("bound_rhs: non-finite input".into()));
    }
    let e_a2 = advantages.iter().map(|a| a * a).sum::<f64>() / advantages.len() as f64;
    Ok(bound_rhs_from_moments(alpha, e_a2, fisher.trace()))
}

/// Everything measured for one step size while verifying the bound chain.
///
/// `pass` is false only for an in-regime violation: steps where the
/// quadratic expansion no longer matches the measured KL (relative gap above
/// [`REGIME_TOL`]) are out of the bound's premises and carry
/// `in_regime = false` instead of a failure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Step size of the plain-gradient update.
    pub alpha: f64,
    /// Measured `KL(π_new ‖ π_old)` at the state, exact enumeration.
    pub kl_exact: f64,
    /// Quadratic approximation `½·Δθᵀ F Δθ`.
    pub kl_quadratic: f64,
    /// Closed-form ceiling `(α²/2)·E[A²]·Tr(F)²`.
    pub bound_rhs: f64,
    /// Policy-weighted second moment of the advantages.
    pub e_a2: f64,
    /// Trace of the exact Fisher matrix.
    pub trace_f: f64,
    /// Squared norm of the exact policy gradient at the state.
    pub grad_norm_sq: f64,
    /// Relative slack granted at this step size.
    pub slack: f64,
    /// Whether `‖∇J‖² ≤ E[A²]·Tr(F)` held (it must, up to roundoff).
    pub cauchy_schwarz_ok: bool,
    /// Whether the quadratic expansion still describes the measured KL.
    pub in_regime: bool,
    /// `kl_exact ≤ bound_rhs·(1+slack)`, or the step was out of regime.
    pub pass: bool,
}

/// Verifies the complete bound chain at one state for each step size in
/// `alphas`.
///
/// `advantages[a]` is the advantage assigned to action `a`; all expectations
/// (`∇J`, `E[A²]`, `Tr(F)`) are taken under the exact action distribution so
/// the Cauchy-Schwarz inequality applies under a single measure. For each
/// `α` the function takes a genuine ascent step `θ + α·∇J`, measures the
/// resulting KL by enumeration, and compares it against the quadratic form
/// and the closed-form ceiling. Slack starts at [`BASE_BOUND_SLACK`] for the
/// smallest positive `α` and doubles per decade above it.
pub fn verify_bound<P: EnumerablePolicy>(
    policy: &P,
    advantages: &[f64],
    alphas: &[f64],
) -> Result<Vec<BoundReport>> {
    check_verifiable(policy, "verify_bound")?;
    if advantages.len() != policy.action_count() {
        return Err(Error::contract(format!(
            "verify_bound: need one advantage per action ({}), got {}",
            policy.action_count(),
            advantages.len()
        )));
    }
    if advantages.iter().any(|a| !a.is_finite()) {
        return Err(Error::Numeric("verify_bound: non-finite advantage".into()));
    }
    if alphas.is_empty() {
        return Err(Error::contract("verify_bound: need at least one step size"));
    }
    if alphas.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(Error::contract(
            "verify_bound: step sizes must be finite and non-negative",
        ));
    }

    let p = policy.param_count();
    let probs = policy.probs();
    let scores: Vec<Vec<f64>> = (0..policy.action_count()).map(|a| policy.score(a)).collect();

    // Exact per-state moments, all under the same action distribution.
    let mut grad = vec![0.0; p];
    let mut e_a2 = 0.0;
    for ((&pa, &adv), g) in probs.iter().zip(advantages).zip(&scores) {
        e_a2 += pa * adv * adv;
        for (gi, &si) in grad.iter_mut().zip(g) {
            *gi += pa * adv * si;
        }
    }
    let grad_norm_sq: f64 = grad.iter().map(|x| x * x).sum();
    if !grad_norm_sq.is_finite() {
        return Err(Error::Numeric("verify_bound: non-finite policy gradient".into()));
    }

    let fisher = estimate_fisher(policy, FisherMode::Exact, 0, &mut rand::rngs::mock::StepRng::new(0, 1))?;
    let trace = fisher.trace();
    let cauchy_schwarz_ok = grad_norm_sq <= e_a2 * trace * (1.0 + 1e-9) + 1e-15;

    let alpha_min_pos = alphas.iter().copied().filter(|a| *a > 0.0).fold(f64::INFINITY, f64::min);

    let mut reports = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let slack = if alpha > 0.0 && alpha_min_pos.is_finite() {
            BASE_BOUND_SLACK * 2.0_f64.powf((alpha / alpha_min_pos).log10())
        } else {
            0.0
        };
        let delta: Vec<f64> = grad.iter().map(|g| alpha * g).collect();
        let stepped = policy.shifted(&delta);
        let kl = kl_exact(&stepped, policy)?;
        let quadratic = 0.5 * fisher.quadratic_form(&delta);
        let rhs = bound_rhs_from_moments(alpha, e_a2, trace);
        if quadratic > rhs * (1.0 + 1e-9) + 1e-15 {
            return Err(Error::Numeric(format!(
                "verify_bound: quadratic form {quadratic:.6e} exceeds the closed-form ceiling \
                 {rhs:.6e} at alpha={alpha}; the exact-mode chain admits no such gap"
            )));
        }
        let in_regime = if quadratic > 1e-14 {
            (kl - quadratic).abs() <= REGIME_TOL * quadratic
        } else {
            kl.abs() <= 1e-12
        };
        let holds = kl <= rhs * (1.0 + slack) + 1e-15;
        let report = BoundReport {
            alpha,
            kl_exact: kl,
            kl_quadratic: quadratic,
            bound_rhs: rhs,
            e_a2,
            trace_f: trace,
            grad_norm_sq,
            slack,
            cauchy_schwarz_ok,
            in_regime,
            pass: holds || !in_regime,
        };
        if [report.kl_exact, report.kl_quadratic, report.bound_rhs, report.e_a2, report.trace_f]
            .iter()
            .any(|x| !x.is_finite())
        {
            return Err(Error::Numeric(format!(
                "verify_bound: non-finite report at alpha={alpha}"
            )));
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Formats the first in-regime bound violation in `reports`, if any.
pub fn first_failure(reports: &[BoundReport]) -> Option<String> {
    reports.iter().find(|r| !r.pass).map(|r| {
        format!(
            "KL bound violated inside the quadratic regime at alpha={}: measured KL {:.6e} \
             exceeds ceiling {:.6e} even with {:.0}% slack (quadratic form {:.6e}, \
             E[A^2] {:.6e}, Tr(F) {:.6e})",
            r.alpha,
            r.kl_exact,
            r.bound_rhs,
            r.slack * 100.0,
            r.kl_quadratic,
            r.e_a2,
            r.trace_f
        )
    })
}
