//! Value models for the PPO update.
//!
//! Two variants share one architecture. The with-anchor variant scores the
//! state (prompt, anchor, response prefix), so the critic knows what the
//! generated response will be compared against; the without-anchor variant
//! sees only (prompt, response prefix) and must absorb anchor quality into
//! its prompt features. Both pool token embeddings exactly like the policy
//! encoder and end in a scalar head.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::mlp::{Activation, Mlp, MlpNodes, ParamBlocks};
use crate::numerics::tensor::{matmul, Tensor};
use crate::synthworld::{Prompt, Response, Token, Vocab};

/// Whether the critic sees the per-prompt anchor response.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueVariant {
    WithAnchor,
    WithoutAnchor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValueArch {
    /// Embedding dimension. Default: 8.
    pub embed_dim: usize,
    /// Hidden layer width. Default: 32.
    pub hidden_dim: usize,
    /// Context window over recent generated tokens. Default: 4.
    pub window: usize,
}

impl Default for ValueArch {
    fn default() -> Self {
        ValueArch {
            embed_dim: 8,
            hidden_dim: 32,
            window: 4,
        }
    }
}

/// One critic input: prompt, optional anchor, and the response prefix.
#[derive(Clone, Copy, Debug)]
pub struct ValueState<'a> {
    pub prompt: &'a Prompt,
    pub anchor: Option<&'a Response>,
    pub prefix: &'a [Token],
}

pub struct ValueNodes {
    pub embedding: NodeId,
    pub mlp: MlpNodes,
}

#[derive(Clone, Debug)]
pub struct ValueModel {
    variant: ValueVariant,
    vocab: Vocab,
    max_response_len: usize,
    arch: ValueArch,
    embedding: Tensor,
    mlp: Mlp,
}

impl ParamBlocks for ValueModel {
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

impl ValueModel {
    pub fn init(
        variant: ValueVariant,
        vocab: Vocab,
        max_response_len: usize,
        arch: ValueArch,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if max_response_len == 0 {
            return Err(Error::config("value max_response_len must be positive"));
        }
        if arch.embed_dim == 0 || arch.hidden_dim == 0 || arch.window == 0 {
            return Err(Error::config("value arch dimensions must be positive"));
        }
        let data: Vec<f64> = (0..vocab.size() * arch.embed_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * 0.5
            })
            .collect();
        let embedding = Tensor::matrix(vocab.size(), arch.embed_dim, data)?;
        let rows = Self::rows_for(variant, arch.window);
        let extras = Self::extras_for(variant);
        let feature_width = rows * arch.embed_dim + extras;
        let mut mlp = Mlp::init(&[feature_width, arch.hidden_dim, 1], Activation::Tanh, rng)?;
        // flat start at the center of the variant's return scale, so early
        // advantages are unbiased: the with-anchor critic regresses onto
        // win-probability returns whose tie point is 0.5, the without-anchor
        // critic onto score differences centered at 0
        mlp.zero_output_layer();
        if variant == ValueVariant::WithAnchor {
            mlp.set_output_bias(0.5);
        }
        Ok(ValueModel {
            variant,
            vocab,
            max_response_len,
            arch,
            embedding,
            mlp,
        })
    }

    pub fn from_parts(
        variant: ValueVariant,
        vocab: Vocab,
        max_response_len: usize,
        arch: ValueArch,
        embedding: Tensor,
        mlp: Mlp,
    ) -> Self {
        ValueModel {
            variant,
            vocab,
            max_response_len,
            arch,
            embedding,
            mlp,
        }
    }

    fn rows_for(variant: ValueVariant, window: usize) -> usize {
        match variant {
            ValueVariant::WithAnchor => 2 + window,
            ValueVariant::WithoutAnchor => 1 + window,
        }
    }

    fn extras_for(variant: ValueVariant) -> usize {
        match variant {
            ValueVariant::WithAnchor => 2,
            ValueVariant::WithoutAnchor => 1,
        }
    }

    pub fn variant(&self) -> ValueVariant {
        self.variant
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn max_response_len(&self) -> usize {
        self.max_response_len
    }

    pub fn arch(&self) -> ValueArch {
        self.arch
    }

    pub fn embedding(&self) -> &Tensor {
        &self.embedding
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    fn check_state(&self, s: &ValueState) -> Result<()> {
        match (self.variant, s.anchor) {
            (ValueVariant::WithAnchor, None) => {
                return Err(Error::contract(
                    "with-anchor value model requires an anchor in every state",
                ))
            }
            (ValueVariant::WithoutAnchor, Some(_)) | (ValueVariant::WithAnchor, Some(_)) => {}
            (ValueVariant::WithoutAnchor, None) => {}
        }
        let anchor_tokens = s.anchor.map(|a| a.tokens.as_slice()).unwrap_or(&[]);
        for &t in s
            .prompt
            .tokens
            .iter()
            .chain(anchor_tokens.iter())
            .chain(s.prefix.iter())
        {
            if !self.vocab.is_content(t) {
                return Err(Error::contract(format!(
                    "value state contains non-content token {t}"
                )));
            }
        }
        if s.prefix.len() > self.max_response_len {
            return Err(Error::contract(format!(
                "value state prefix length {} exceeds max response length {}",
                s.prefix.len(),
                self.max_response_len
            )));
        }
        Ok(())
    }

    fn pooling(&self, states: &[ValueState]) -> Result<(Tensor, Tensor)> {
        let n = states.len();
        let rows = Self::rows_for(self.variant, self.arch.window);
        let extras_n = Self::extras_for(self.variant);
        let v = self.vocab.size();
        let t_max = self.max_response_len as f64;
        let mut p = Tensor::zeros(&[n * rows, v]);
        let mut extras = Tensor::zeros(&[n, extras_n]);
        for (i, s) in states.iter().enumerate() {
            self.check_state(s)?;
            let base = i * rows;
            let mut mean_row = |row: usize, tokens: &[Token]| {
                if tokens.is_empty() {
                    return;
                }
                let w = 1.0 / tokens.len() as f64;
                for &t in tokens {
                    let cur = p.get2(row, t as usize);
                    p.set2(row, t as usize, cur + w);
                }
            };
            mean_row(base, &s.prompt.tokens);
            let mut window_base = base + 1;
            if self.variant == ValueVariant::WithAnchor {
                let anchor = s.anchor.expect("checked above");
                mean_row(base + 1, &anchor.tokens);
                window_base = base + 2;
            }
            let tail = &s.prefix[s.prefix.len().saturating_sub(self.arch.window)..];
            let offset = self.arch.window - tail.len();
            for (j, &t) in tail.iter().enumerate() {
                p.set2(window_base + offset + j, t as usize, 1.0);
            }
            extras.set2(i, 0, s.prefix.len() as f64 / t_max);
            if self.variant == ValueVariant::WithAnchor {
                let anchor = s.anchor.expect("checked above");
                extras.set2(i, 1, anchor.tokens.len() as f64 / t_max);
            }
        }
        Ok((p, extras))
    }

    /// State values for a batch, plain path: `[n]`.
    pub fn values(&self, states: &[ValueState]) -> Result<Tensor> {
        let (p, extras) = self.pooling(states)?;
        let n = states.len();
        let rows = Self::rows_for(self.variant, self.arch.window);
        let d = self.arch.embed_dim;
        let extras_n = Self::extras_for(self.variant);
        let pooled = matmul(&p, &self.embedding);
        let flat = pooled.reshaped(&[n, rows * d])?;
        let width = rows * d + extras_n;
        let mut feats = Tensor::zeros(&[n, width]);
        for i in 0..n {
            feats.data_mut()[i * width..i * width + rows * d]
                .copy_from_slice(&flat.data()[i * rows * d..(i + 1) * rows * d]);
            for j in 0..extras_n {
                feats.set2(i, rows * d + j, extras.get2(i, j));
            }
        }
        let out = self.mlp.forward(&feats)?;
        out.reshaped(&[n])
    }

    pub fn value(&self, state: &ValueState) -> Result<f64> {
        Ok(self.values(std::slice::from_ref(state))?.data()[0])
    }

    pub fn register(&self, g: &mut Graph) -> ValueNodes {
        ValueNodes {
            embedding: g.leaf(self.embedding.clone()),
            mlp: self.mlp.register(g),
        }
    }

    /// State-value node for a batch, taped path: `[n, 1]`.
    pub fn values_graph(
        &self,
        g: &mut Graph,
        nodes: &ValueNodes,
        states: &[ValueState],
    ) -> Result<NodeId> {
        let (p, extras) = self.pooling(states)?;
        let n = states.len();
        let rows = Self::rows_for(self.variant, self.arch.window);
        let p_node = g.leaf(p);
        let pooled = g.matmul(p_node, nodes.embedding);
        let flat = g.reshape(pooled, &[n, rows * self.arch.embed_dim]);
        let extras_node = g.leaf(extras);
        let feats = g.hcat(&[flat, extras_node]);
        self.mlp.forward_graph(g, &nodes.mlp, feats)
    }

    pub fn gradients(
        &self,
        g: &Graph,
        grads: &crate::numerics::graph::Gradients,
        nodes: &ValueNodes,
    ) -> Vec<Tensor> {
        let mut out = vec![g.grad_of(grads, nodes.embedding)];
        out.extend(crate::numerics::mlp::mlp_gradients(g, grads, &nodes.mlp));
        out
    }
}
