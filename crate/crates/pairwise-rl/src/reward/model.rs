//! Reward models over formatted comparisons.
//!
//! Both models share the same encoder shape: a learned token embedding
//! table, segment-wise mean pooling with per-position buckets for response
//! slots, a few scalar side features (slot lengths, rule presence), and a
//! two-layer MLP. The pairwise model ends in two logits (yes/no to "is slot
//! 1 better than slot 2?"); the pointwise model scores a single response
//! with a scalar head.
//!
//! Slot-1 and slot-2 buckets occupy different feature columns, so the
//! pairwise model is *able* to score a response differently depending on
//! which slot it sits in. That capacity is deliberate: it gives the
//! position-symmetry penalty in training something real to remove.
//!
//! Feature construction for a batch is a single constant pooling matrix
//! multiplied by the embedding table, so gradients flow into embeddings
//! through one matmul.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::format::{FormattedComparison, SlotOrder};
use crate::error::Result;
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::mlp::{Activation, Mlp, MlpNodes, ParamBlocks};
use crate::numerics::tensor::{matmul, Tensor};
use crate::numerics::binary_softmax;
use crate::synthworld::{Prompt, Response, Token, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmArch {
    /// Embedding dimension. Default: 12.
    pub embed_dim: usize,
    /// Hidden layer width. Default: 64.
    pub hidden_dim: usize,
    /// Position buckets per response slot. Default: 4.
    pub position_buckets: usize,
}

impl Default for RmArch {
    fn default() -> Self {
        RmArch {
            embed_dim: 12,
            hidden_dim: 64,
            position_buckets: 4,
        }
    }
}

fn sample_embedding(vocab: Vocab, dim: usize, rng: &mut impl Rng) -> Tensor {
    let data: Vec<f64> = (0..vocab.size() * dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * 0.5
        })
        .collect();
    Tensor::matrix(vocab.size(), dim, data).expect("embedding shape")
}

/// Mean one-hot row for `tokens` written into `row` of the pooling matrix.
fn pool_row(p: &mut Tensor, row: usize, tokens: &[Token]) {
    if tokens.is_empty() {
        return;
    }
    let w = 1.0 / tokens.len() as f64;
    for &t in tokens {
        let cur = p.get2(row, t as usize);
        p.set2(row, t as usize, cur + w);
    }
}

/// Distribute response positions into `k` buckets over a max length of
/// `max_len`, writing means into `rows[0..k]` of the pooling matrix
/// starting at `base`.
fn pool_buckets(p: &mut Tensor, base: usize, tokens: &[Token], k: usize, max_len: usize) {
    let mut counts = vec![0usize; k];
    for (i, _) in tokens.iter().enumerate() {
        let b = (i * k / max_len).min(k - 1);
        counts[b] += 1;
    }
    for (i, &t) in tokens.iter().enumerate() {
        let b = (i * k / max_len).min(k - 1);
        let cur = p.get2(base + b, t as usize);
        p.set2(base + b, t as usize, cur + 1.0 / counts[b] as f64);
    }
}

/// Shared encoder configuration and feature-building for both model kinds.
#[derive(Clone, Debug)]
struct Encoder {
    vocab: Vocab,
    max_response_len: usize,
    arch: RmArch,
    /// Rows per instance in the pooling matrix.
    rows: usize,
    /// Scalar side features per instance.
    extras: usize,
}

impl Encoder {
    fn pairwise(vocab: Vocab, max_response_len: usize, arch: RmArch) -> Self {
        Encoder {
            vocab,
            max_response_len,
            arch,
            rows: 2 + 2 * arch.position_buckets,
            extras: 3,
        }
    }

    fn pointwise(vocab: Vocab, max_response_len: usize, arch: RmArch) -> Self {
        Encoder {
            vocab,
            max_response_len,
            arch,
            rows: 2 + arch.position_buckets,
            extras: 2,
        }
    }

    fn feature_width(&self) -> usize {
        self.rows * self.arch.embed_dim + self.extras
    }

    /// Pooling matrix `[n*rows, vocab]` and extras `[n, extras]` for a batch
    /// of comparisons.
    fn pairwise_pooling(&self, batch: &[&FormattedComparison]) -> (Tensor, Tensor) {
        let n = batch.len();
        let v = self.vocab.size();
        let k = self.arch.position_buckets;
        let t = self.max_response_len as f64;
        let mut p = Tensor::zeros(&[n * self.rows, v]);
        let mut extras = Tensor::zeros(&[n, self.extras]);
        for (i, enc) in batch.iter().enumerate() {
            let base = i * self.rows;
            pool_row(&mut p, base, enc.prompt_tokens());
            pool_row(&mut p, base + 1, enc.rule_tokens());
            pool_buckets(&mut p, base + 2, enc.slot1_tokens(), k, self.max_response_len);
            pool_buckets(&mut p, base + 2 + k, enc.slot2_tokens(), k, self.max_response_len);
            extras.set2(i, 0, enc.slot1_tokens().len() as f64 / t);
            extras.set2(i, 1, enc.slot2_tokens().len() as f64 / t);
            extras.set2(i, 2, if enc.rule_tokens().is_empty() { 0.0 } else { 1.0 });
        }
        (p, extras)
    }

    /// Pooling matrix and extras for a batch of single responses.
    fn pointwise_pooling(&self, batch: &[(&Prompt, &Response)]) -> (Tensor, Tensor) {
        let n = batch.len();
        let v = self.vocab.size();
        let k = self.arch.position_buckets;
        let t = self.max_response_len as f64;
        let mut p = Tensor::zeros(&[n * self.rows, v]);
        let mut extras = Tensor::zeros(&[n, self.extras]);
        for (i, (prompt, resp)) in batch.iter().enumerate() {
            let base = i * self.rows;
            pool_row(&mut p, base, &prompt.tokens);
            pool_row(&mut p, base + 1, &prompt.rule);
            pool_buckets(&mut p, base + 2, &resp.tokens, k, self.max_response_len);
            extras.set2(i, 0, resp.tokens.len() as f64 / t);
            extras.set2(i, 1, if prompt.rule.is_empty() { 0.0 } else { 1.0 });
        }
        (p, extras)
    }

    /// Plain-path features `[n, feature_width]`.
    fn features(&self, p: &Tensor, extras: &Tensor, embedding: &Tensor) -> Tensor {
        let n = extras.rows();
        let pooled = matmul(p, embedding);
        let flat = pooled
            .reshaped(&[n, self.rows * self.arch.embed_dim])
            .expect("pooled reshape");
        let mut out = Tensor::zeros(&[n, self.feature_width()]);
        let f = self.feature_width();
        let base = self.rows * self.arch.embed_dim;
        for i in 0..n {
            out.data_mut()[i * f..i * f + base]
                .copy_from_slice(&flat.data()[i * base..(i + 1) * base]);
            for j in 0..self.extras {
                out.set2(i, base + j, extras.get2(i, j));
            }
        }
        out
    }

    /// Taped features; gradients flow into the embedding node.
    fn features_graph(
        &self,
        g: &mut Graph,
        embedding_node: NodeId,
        p: Tensor,
        extras: Tensor,
    ) -> NodeId {
        let n = extras.rows();
        let p_node = g.leaf(p);
        let pooled = g.matmul(p_node, embedding_node);
        let flat = g.reshape(pooled, &[n, self.rows * self.arch.embed_dim]);
        let extras_node = g.leaf(extras);
        g.hcat(&[flat, extras_node])
    }
}

/// Tape handles for one registration of a reward model.
pub struct RewardModelNodes {
    pub embedding: NodeId,
    pub mlp: MlpNodes,
}

macro_rules! reward_param_blocks {
    ($ty:ty) => {
        impl ParamBlocks for $ty {
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
    };
}

/// Scores ordered response pairs with a binary yes/no head.
#[derive(Clone, Debug)]
pub struct PairwiseRewardModel {
    encoder: Encoder,
    embedding: Tensor,
    mlp: Mlp,
}

reward_param_blocks!(PairwiseRewardModel);

impl PairwiseRewardModel {
    pub fn init(vocab: Vocab, max_response_len: usize, arch: RmArch, rng: &mut impl Rng) -> Result<Self> {
        let encoder = Encoder::pairwise(vocab, max_response_len, arch);
        let embedding = sample_embedding(vocab, arch.embed_dim, rng);
        let mlp = Mlp::init(
            &[encoder.feature_width(), arch.hidden_dim, 2],
            Activation::Tanh,
            rng,
        )?;
        Ok(PairwiseRewardModel {
            encoder,
            embedding,
            mlp,
        })
    }

    pub fn vocab(&self) -> Vocab {
        self.encoder.vocab
    }

    pub fn max_response_len(&self) -> usize {
        self.encoder.max_response_len
    }

    pub fn arch(&self) -> RmArch {
        self.encoder.arch
    }

    pub fn from_parts(
        vocab: Vocab,
        max_response_len: usize,
        arch: RmArch,
        embedding: Tensor,
        mlp: Mlp,
    ) -> Self {
        PairwiseRewardModel {
            encoder: Encoder::pairwise(vocab, max_response_len, arch),
            embedding,
            mlp,
        }
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn embedding(&self) -> &Tensor {
        &self.embedding
    }

    /// Yes/no logits for a batch, plain path: `[n, 2]`.
    pub fn logits(&self, batch: &[&FormattedComparison]) -> Result<Tensor> {
        let (p, extras) = self.encoder.pairwise_pooling(batch);
        let feats = self.encoder.features(&p, &extras, &self.embedding);
        self.mlp.forward(&feats)
    }

    pub fn register(&self, g: &mut Graph) -> RewardModelNodes {
        RewardModelNodes {
            embedding: g.leaf(self.embedding.clone()),
            mlp: self.mlp.register(g),
        }
    }

    /// Yes/no logits node for a batch, taped path.
    pub fn logits_graph(
        &self,
        g: &mut Graph,
        nodes: &RewardModelNodes,
        batch: &[&FormattedComparison],
    ) -> Result<NodeId> {
        let (p, extras) = self.encoder.pairwise_pooling(batch);
        let feats = self.encoder.features_graph(g, nodes.embedding, p, extras);
        self.mlp.forward_graph(g, &nodes.mlp, feats)
    }

    /// Gradient blocks aligned with [`ParamBlocks`] order.
    pub fn gradients(
        &self,
        g: &Graph,
        grads: &crate::numerics::graph::Gradients,
        nodes: &RewardModelNodes,
    ) -> Vec<Tensor> {
        let mut out = vec![g.grad_of(grads, nodes.embedding)];
        out.extend(crate::numerics::mlp::mlp_gradients(g, grads, &nodes.mlp));
        out
    }

    /// Probability that slot 1 beats slot 2.
    pub fn p_slot1(&self, enc: &FormattedComparison) -> Result<f64> {
        let logits = self.logits(&[enc])?;
        let (p, _) = binary_softmax(logits.get2(0, 0), logits.get2(0, 1))?;
        Ok(p)
    }

    /// Order-averaged reward of `candidate` against `anchor` (both orders
    /// scored, yes-probability of one plus no-probability of the other,
    /// halved). Identical responses score exactly 0.5.
    pub fn pairwise_reward(
        &self,
        prompt: &Prompt,
        candidate: &Response,
        anchor: &Response,
    ) -> Result<f64> {
        let front = FormattedComparison::encode(
            self.encoder.vocab,
            prompt,
            candidate,
            anchor,
            SlotOrder::CandidateFirst,
        )?;
        let back = FormattedComparison::encode(
            self.encoder.vocab,
            prompt,
            candidate,
            anchor,
            SlotOrder::AnchorFirst,
        )?;
        let logits = self.logits(&[&front, &back])?;
        let (p_yes_front, _) = binary_softmax(logits.get2(0, 0), logits.get2(0, 1))?;
        let (_, p_no_back) = binary_softmax(logits.get2(1, 0), logits.get2(1, 1))?;
        Ok(0.5 * (p_yes_front + p_no_back))
    }

    /// Win probability of the candidate in a single encoding (identity of
    /// the two-class softmax with the sigmoid of the logit difference).
    pub fn win_prob(&self, enc: &FormattedComparison) -> Result<f64> {
        self.p_slot1(enc)
    }
}

/// Scores a single response to a prompt with a scalar head.
#[derive(Clone, Debug)]
pub struct PointwiseRewardModel {
    encoder: Encoder,
    embedding: Tensor,
    mlp: Mlp,
}

reward_param_blocks!(PointwiseRewardModel);

impl PointwiseRewardModel {
    pub fn init(vocab: Vocab, max_response_len: usize, arch: RmArch, rng: &mut impl Rng) -> Result<Self> {
        let encoder = Encoder::pointwise(vocab, max_response_len, arch);
        let embedding = sample_embedding(vocab, arch.embed_dim, rng);
        let mlp = Mlp::init(
            &[encoder.feature_width(), arch.hidden_dim, 1],
            Activation::Tanh,
            rng,
        )?;
        Ok(PointwiseRewardModel {
            encoder,
            embedding,
            mlp,
        })
    }

    pub fn vocab(&self) -> Vocab {
        self.encoder.vocab
    }

    pub fn max_response_len(&self) -> usize {
        self.encoder.max_response_len
    }

    pub fn arch(&self) -> RmArch {
        self.encoder.arch
    }

    pub fn from_parts(
        vocab: Vocab,
        max_response_len: usize,
        arch: RmArch,
        embedding: Tensor,
        mlp: Mlp,
    ) -> Self {
        PointwiseRewardModel {
            encoder: Encoder::pointwise(vocab, max_response_len, arch),
            embedding,
            mlp,
        }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    /// Scalar scores for a batch, plain path: `[n]`.
    pub fn scores(&self, batch: &[(&Prompt, &Response)]) -> Result<Tensor> {
        let (p, extras) = self.encoder.pointwise_pooling(batch);
        let feats = self.encoder.features(&p, &extras, &self.embedding);
        let out = self.mlp.forward(&feats)?;
        out.reshaped(&[batch.len()])
    }

    pub fn score(&self, prompt: &Prompt, response: &Response) -> Result<f64> {
        Ok(self.scores(&[(prompt, response)])?.data()[0])
    }

    pub fn register(&self, g: &mut Graph) -> RewardModelNodes {
        RewardModelNodes {
            embedding: g.leaf(self.embedding.clone()),
            mlp: self.mlp.register(g),
        }
    }

    /// Scalar score node for a batch, taped path: `[n]`.
    pub fn scores_graph(
        &self,
        g: &mut Graph,
        nodes: &RewardModelNodes,
        batch: &[(&Prompt, &Response)],
    ) -> Result<NodeId> {
        let (p, extras) = self.encoder.pointwise_pooling(batch);
        let feats = self.encoder.features_graph(g, nodes.embedding, p, extras);
        let out = self.mlp.forward_graph(g, &nodes.mlp, feats)?;
        Ok(g.reshape(out, &[batch.len(), 1]))
    }

    pub fn gradients(
        &self,
        g: &Graph,
        grads: &crate::numerics::graph::Gradients,
        nodes: &RewardModelNodes,
    ) -> Vec<Tensor> {
        let mut out = vec![g.grad_of(grads, nodes.embedding)];
        out.extend(crate::numerics::mlp::mlp_gradients(g, grads, &nodes.mlp));
        out
    }

    /// Win probability of `candidate` against `anchor`: sigmoid of the
    /// score difference.
    pub fn win_prob(&self, prompt: &Prompt, candidate: &Response, anchor: &Response) -> Result<f64> {
        let s = self.scores(&[(prompt, candidate), (prompt, anchor)])?;
        let (p, _) = binary_softmax(s.data()[0], s.data()[1])?;
        Ok(p)
    }
}
