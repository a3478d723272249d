//! Fully connected layers and the parameter-block abstraction shared by the
//! optimizer, checkpoint format, gradient checker, and flatteners.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::tensor::{add_row_broadcast, matmul, Tensor};
use crate::error::{Error, Result};

/// Uniform access to a model's named parameter tensors.
///
/// Block order must be stable across calls: optimizer moments, checkpoints,
/// and flattened views all align by index.
pub trait ParamBlocks {
    fn block_names(&self) -> Vec<String>;
    fn blocks(&self) -> Vec<&Tensor>;
    fn blocks_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.blocks().iter().map(|t| t.numel()).sum()
    }
}

/// Flatten all blocks into one vector, in block order.
pub fn flatten_params(model: &impl ParamBlocks) -> Vec<f64> {
    let mut out = Vec::with_capacity(model.param_count());
    for b in model.blocks() {
        out.extend_from_slice(b.data());
    }
    out
}

/// Write a flat vector (as produced by [`flatten_params`]) back into blocks.
pub fn unflatten_params(model: &mut impl ParamBlocks, flat: &[f64]) -> Result<()> {
    let want = model.param_count();
    if flat.len() != want {
        return Err(Error::Dimension {
            context: "unflatten_params".into(),
            expected: format!("{want} values"),
            actual: format!("{} values", flat.len()),
        });
    }
    let mut off = 0;
    for b in model.blocks_mut() {
        let n = b.numel();
        b.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    /// No nonlinearity; used for output heads.
    Linear,
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

/// A stack of affine layers with per-layer activations.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Tape handles for one registration of an [`Mlp`]'s parameters.
pub struct MlpNodes {
    pub layers: Vec<(NodeId, NodeId)>,
}

impl Mlp {
    /// Build an MLP with the given layer widths, e.g. `&[8, 16, 2]` for one
    /// hidden layer. Hidden layers use `hidden_activation`; the final layer
    /// is linear. Weights are scaled-normal initialised, biases zero.
    pub fn init(
        widths: &[usize],
        hidden_activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::contract(format!(
                "Mlp::init: need at least input and output widths, got {widths:?}"
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::contract(format!(
                "Mlp::init: zero-width layer in {widths:?}"
            )));
        }
        let mut layers = Vec::new();
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = 1.0 / (fan_in as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                })
                .collect();
            let last = layers.len() + 2 == widths.len();
            layers.push(Layer {
                weight: Tensor::matrix(fan_in, fan_out, data)?,
                bias: Tensor::zeros(&[fan_out]),
                activation: if last { Activation::Linear } else { hidden_activation },
            });
        }
        Ok(Mlp { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Self {
        Mlp { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("non-empty").weight.shape()[1]
    }

    /// Zero the final layer so the head starts indifferent.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("non-empty");
        last.weight.data_mut().fill(0.0);
        last.bias.data_mut().fill(0.0);
    }

    /// Sets every output-layer bias entry, leaving the weights untouched.
    pub fn set_output_bias(&mut self, value: f64) {
        let last = self.layers.last_mut().expect("non-empty");
        last.bias.data_mut().fill(value);
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let want = self.input_width();
        let got = match input.rank() {
            1 => input.shape()[0],
            2 => input.shape()[1],
            r => {
                return Err(Error::Dimension {
                    context: "mlp layer 0".into(),
                    expected: "rank 1 or 2 input".into(),
                    actual: format!("rank {r}"),
                })
            }
        };
        if got != want {
            return Err(Error::Dimension {
                context: "mlp layer 0".into(),
                expected: format!("{want} input features"),
                actual: format!("{got}"),
            });
        }
        Ok(())
    }

    /// Forward pass without a tape. A rank-1 input is treated as a single
    /// row and returned as rank 1.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let rank1 = input.rank() == 1;
        let mut x = if rank1 {
            input.reshaped(&[1, input.shape()[0]])?
        } else {
            input.clone()
        };
        for layer in &self.layers {
            x = add_row_broadcast(&matmul(&x, &layer.weight), &layer.bias);
            x = match layer.activation {
                Activation::Tanh => x.map(f64::tanh),
                Activation::Relu => x.map(|v| v.max(0.0)),
                Activation::Linear => x,
            };
        }
        if rank1 {
            x.reshaped(&[x.numel()])
        } else {
            Ok(x)
        }
    }

    /// Register this MLP's parameters on a tape. The returned handles map
    /// gradients back to blocks in the same order as [`ParamBlocks`].
    pub fn register(&self, g: &mut Graph) -> MlpNodes {
        let layers = self
            .layers
            .iter()
            .map(|l| (g.leaf(l.weight.clone()), g.leaf(l.bias.clone())))
            .collect();
        MlpNodes { layers }
    }

    /// Taped forward pass over a rank-2 `[batch, features]` input node.
    pub fn forward_graph(&self, g: &mut Graph, nodes: &MlpNodes, input: NodeId) -> Result<NodeId> {
        self.check_input(g.value(input))?;
        let mut x = input;
        for (layer, &(w, b)) in self.layers.iter().zip(&nodes.layers) {
            let z = g.matmul(x, w);
            let z = g.add_row(z, b);
            x = match layer.activation {
                Activation::Tanh => g.tanh(z),
                Activation::Relu => g.relu(z),
                Activation::Linear => z,
            };
        }
        Ok(x)
    }
}

impl ParamBlocks for Mlp {
    fn block_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("layer{i}.weight"), format!("layer{i}.bias")])
            .collect()
    }

    fn blocks(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn blocks_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Gradients for an MLP's blocks extracted from a backward sweep, aligned
/// with [`ParamBlocks`] order. Parameters the loss never touched get zeros.
pub fn mlp_gradients(g: &Graph, grads: &super::graph::Gradients, nodes: &MlpNodes) -> Vec<Tensor> {
    nodes
        .layers
        .iter()
        .flat_map(|&(w, b)| [g.grad_of(grads, w), g.grad_of(grads, b)])
        .collect()
}
