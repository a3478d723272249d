//! Autoregressive toy policy: embedding, fixed-window context encoder, and
//! an action-logits head.
//!
//! A generation state is (prompt, partial response). Features are the mean
//! prompt embedding, the embeddings of the last `window` generated tokens
//! (empty slots stay zero), and the normalized position. Actions are the
//! content tokens plus an explicit end-of-sequence action, so the policy
//! can stop early; generation also stops at the maximum response length.
//!
//! The output layer is zero-initialized, making the initial policy exactly
//! uniform over actions — a clean reference point for KL regularization and
//! for win-rate baselines.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::mlp::{Activation, Mlp, MlpNodes, ParamBlocks};
use crate::numerics::tensor::{matmul, Tensor};
use crate::synthworld::{Prompt, Token, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyArch {
    /// Embedding dimension. Default: 8.
    pub embed_dim: usize,
    /// Hidden layer width. Default: 32.
    pub hidden_dim: usize,
    /// Context window over the most recent generated tokens. Default: 4.
    pub window: usize,
}

impl Default for PolicyArch {
    fn default() -> Self {
        PolicyArch {
            embed_dim: 8,
            hidden_dim: 32,
            window: 4,
        }
    }
}

/// One generation state: the prompt plus the response prefix produced so
/// far. The position index is the prefix length.
#[derive(Clone, Copy, Debug)]
pub struct StepState<'a> {
    pub prompt: &'a Prompt,
    pub prefix: &'a [Token],
}

/// Tape handles for one registration of a policy.
pub struct PolicyNodes {
    pub embedding: NodeId,
    pub mlp: MlpNodes,
}

#[derive(Clone, Debug)]
pub struct Policy {
    vocab: Vocab,
    max_response_len: usize,
    arch: PolicyArch,
    embedding: Tensor,
    mlp: Mlp,
}

impl ParamBlocks for Policy {
    fn block_names(&self) -> Vec<String> {
        let mut names = vec!["embedding".to_string()];
        names.extend(self.mlp.block_names());
        names
    }

    fn blocks(&self) -> Vec<&Tensor> {
        let mut blocks = vec![&self.embedding];
        blocks.extend(self.mlp.blocks());
        blocks
    }

    fn blocks_mut(&mut self) -> Vec<&mut Tensor> {
        let mut blocks = vec![&mut self.embedding];
        blocks.extend(self.mlp.blocks_mut());
        blocks
    }
}

impl Policy {
    pub fn init(
        vocab: Vocab,
        max_response_len: usize,
        arch: PolicyArch,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if max_response_len == 0 {
            return Err(Error::config("policy max_response_len must be positive"));
        }
        if arch.embed_dim == 0 || arch.hidden_dim == 0 || arch.window == 0 {
            return Err(Error::config("policy arch dimensions must be positive"));
        }
        let data: Vec<f64> = (0..vocab.size() * arch.embed_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * 0.5
            })
            .collect();
        let embedding = Tensor::matrix(vocab.size(), arch.embed_dim, data)?;
        let feature_width = (1 + arch.window) * arch.embed_dim + 1;
        let actions = vocab.content_size as usize + 1;
        let mut mlp = Mlp::init(
            &[feature_width, arch.hidden_dim, actions],
            Activation::Tanh,
            rng,
        )?;
        mlp.zero_output_layer();
        Ok(Policy {
            vocab,
            max_response_len,
            arch,
            embedding,
            mlp,
        })
    }

    pub fn from_parts(
        vocab: Vocab,
        max_response_len: usize,
        arch: PolicyArch,
        embedding: Tensor,
        mlp: Mlp,
    ) -> Self {
        Policy {
            vocab,
            max_response_len,
            arch,
            embedding,
            mlp,
        }
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn max_response_len(&self) -> usize {
        self.max_response_len
    }

    pub fn arch(&self) -> PolicyArch {
        self.arch
    }

    pub fn embedding(&self) -> &Tensor {
        &self.embedding
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    /// Content tokens plus the end-of-sequence action.
    pub fn action_count(&self) -> usize {
        self.vocab.content_size as usize + 1
    }

    /// The end-of-sequence action id.
    pub fn eos_action(&self) -> usize {
        self.vocab.content_size as usize
    }

    /// Map an action id to its vocabulary token.
    pub fn action_token(&self, action: usize) -> Result<Token> {
        if action < self.vocab.content_size as usize {
            Ok(action as Token)
        } else if action == self.eos_action() {
            Ok(self.vocab.eos())
        } else {
            Err(Error::contract(format!(
                "action {action} out of range (actions: {})",
                self.action_count()
            )))
        }
    }

    fn check_state(&self, s: &StepState) -> Result<()> {
        if s.prefix.len() >= self.max_response_len + 1 {
            return Err(Error::contract(format!(
                "policy state prefix length {} exceeds max response length {}",
                s.prefix.len(),
                self.max_response_len
            )));
        }
        for &t in s.prompt.tokens.iter().chain(s.prefix.iter()) {
            if !self.vocab.is_content(t) {
                return Err(Error::contract(format!(
                    "policy state contains non-content token {t}"
                )));
            }
        }
        Ok(())
    }

    /// Pooling matrix `[n*(1+window), vocab]` and extras `[n, 1]`.
    fn pooling(&self, states: &[StepState]) -> Result<(Tensor, Tensor)> {
        let n = states.len();
        let rows = 1 + self.arch.window;
        let v = self.vocab.size();
        let mut p = Tensor::zeros(&[n * rows, v]);
        let mut extras = Tensor::zeros(&[n, 1]);
        for (i, s) in states.iter().enumerate() {
            self.check_state(s)?;
            let base = i * rows;
            if !s.prompt.tokens.is_empty() {
                let w = 1.0 / s.prompt.tokens.len() as f64;
                for &t in &s.prompt.tokens {
                    let cur = p.get2(base, t as usize);
                    p.set2(base, t as usize, cur + w);
                }
            }
            // most recent `window` prefix tokens, oldest first; earlier
            // slots stay zero when the prefix is short
            let tail = &s.prefix[s.prefix.len().saturating_sub(self.arch.window)..];
            let offset = self.arch.window - tail.len();
            for (j, &t) in tail.iter().enumerate() {
                p.set2(base + 1 + offset + j, t as usize, 1.0);
            }
            extras.set2(i, 0, s.prefix.len() as f64 / self.max_response_len as f64);
        }
        Ok((p, extras))
    }

    fn features(&self, states: &[StepState]) -> Result<Tensor> {
        let (p, extras) = self.pooling(states)?;
        let n = states.len();
        let rows = 1 + self.arch.window;
        let d = self.arch.embed_dim;
        let pooled = matmul(&p, &self.embedding);
        let flat = pooled.reshaped(&[n, rows * d])?;
        let width = rows * d + 1;
        let mut out = Tensor::zeros(&[n, width]);
        for i in 0..n {
            out.data_mut()[i * width..i * width + rows * d]
                .copy_from_slice(&flat.data()[i * rows * d..(i + 1) * rows * d]);
            out.set2(i, rows * d, extras.get2(i, 0));
        }
        Ok(out)
    }

    /// Action logits for a batch of states, plain path: `[n, actions]`.
    pub fn action_logits(&self, states: &[StepState]) -> Result<Tensor> {
        let feats = self.features(states)?;
        self.mlp.forward(&feats)
    }

    pub fn register(&self, g: &mut Graph) -> PolicyNodes {
        PolicyNodes {
            embedding: g.leaf(self.embedding.clone()),
            mlp: self.mlp.register(g),
        }
    }

    /// Action logits node for a batch of states, taped path.
    pub fn action_logits_graph(
        &self,
        g: &mut Graph,
        nodes: &PolicyNodes,
        states: &[StepState],
    ) -> Result<NodeId> {
        let (p, extras) = self.pooling(states)?;
        let n = states.len();
        let rows = 1 + self.arch.window;
        let p_node = g.leaf(p);
        let pooled = g.matmul(p_node, nodes.embedding);
        let flat = g.reshape(pooled, &[n, rows * self.arch.embed_dim]);
        let extras_node = g.leaf(extras);
        let feats = g.hcat(&[flat, extras_node]);
        self.mlp.forward_graph(g, &nodes.mlp, feats)
    }

    /// Gradient blocks aligned with [`ParamBlocks`] order.
    pub fn gradients(
        &self,
        g: &Graph,
        grads: &crate::numerics::graph::Gradients,
        nodes: &PolicyNodes,
    ) -> Vec<Tensor> {
        let mut out = vec![g.grad_of(grads, nodes.embedding)];
        out.extend(crate::numerics::mlp::mlp_gradients(g, grads, &nodes.mlp));
        out
    }

    /// Full-distribution log-probabilities over actions for one state.
    pub fn action_log_probs(&self, state: &StepState) -> Result<Vec<f64>> {
        let logits = self.action_logits(std::slice::from_ref(state))?;
        let ls = crate::numerics::tensor::log_softmax_rows(&logits);
        Ok(ls.data().to_vec())
    }

    /// Next-token probability distribution for one state; sums to 1 within
    /// 1e-12.
    pub fn action_dist(&self, state: &StepState) -> Result<Vec<f64>> {
        Ok(self
            .action_log_probs(state)?
            .iter()
            .map(|lp| lp.exp())
            .collect())
    }
}

/// One sampled action under truncated (top-p) sampling.
#[derive(Clone, Copy, Debug)]
pub struct SampledAction {
    pub action: usize,
    /// Log-probability under the renormalized nucleus actually sampled from.
    pub logprob_behavior: f64,
    /// Log-probability under the full distribution.
    pub logprob_full: f64,
}

/// Sample from the smallest prefix of the probability-sorted actions whose
/// cumulative mass reaches `top_p`, renormalized. Ties sort by action id;
/// the nucleus always contains at least one action, so `top_p -> 0` is
/// greedy argmax and `top_p = 1` is full-distribution sampling.
pub fn top_p_sample(
    log_probs: &[f64],
    top_p: f64,
    rng: &mut impl Rng,
) -> Result<SampledAction> {
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(Error::contract(format!("top_p must be in (0, 1], got {top_p}")));
    }
    if log_probs.is_empty() || log_probs.iter().any(|lp| !lp.is_finite() && *lp != f64::NEG_INFINITY)
    {
        return Err(Error::Numeric("top_p_sample: invalid log-probabilities".into()));
    }
    let probs: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .expect("finite probabilities")
            .then(a.cmp(&b))
    });
    let mut nucleus = Vec::new();
    let mut mass = 0.0;
    for &idx in &order {
        nucleus.push(idx);
        mass += probs[idx];
        if mass >= top_p - 1e-12 {
            break;
        }
    }
    // sample within the nucleus proportionally to the original masses
    let u: f64 = rng.gen::<f64>() * mass;
    let mut cum = 0.0;
    let mut action = *nucleus.last().expect("nucleus non-empty");
    for &idx in &nucleus {
        cum += probs[idx];
        if u < cum {
            action = idx;
            break;
        }
    }
    Ok(SampledAction {
        action,
        logprob_behavior: log_probs[action] - mass.ln(),
        logprob_full: log_probs[action],
    })
}
