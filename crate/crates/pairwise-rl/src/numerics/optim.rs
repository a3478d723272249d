//! First-order optimizer over [`ParamBlocks`] models.
//!
//! The primitive update is gradient *ascent* on an objective:
//! `θ += lr * u(g)` where
//! - plain mode: `u(g) = g`, the literal ascent step used by the KL-bound
//!   experiments;
//! - adaptive mode: `u(g)` is the bias-corrected first moment over the
//!   square root of the bias-corrected second moment (plus `eps`). With both
//!   decay rates zero this reduces elementwise to `g / (|g| + eps)`.
//!
//! Training loops minimise losses via [`OptimizerState::step`], which
//! ascends the negated gradient.

use serde::{Deserialize, Serialize};

use super::mlp::ParamBlocks;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum OptimizerMode {
    /// `θ += lr * g`, no state.
    Plain,
    /// Adaptive moments with bias correction.
    Adaptive { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerMode {
    pub fn adaptive_default() -> Self {
        OptimizerMode::Adaptive {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-block moment buffers plus the step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    mode: OptimizerMode,
    lr: f64,
    step_count: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(model: &impl ParamBlocks, mode: OptimizerMode, lr: f64) -> Self {
        let shapes: Vec<Tensor> = model
            .blocks()
            .iter()
            .map(|b| Tensor::zeros(b.shape()))
            .collect();
        OptimizerState {
            mode,
            lr,
            step_count: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// One ascent step: `θ += lr * u(g)`. `grads` must align with the
    /// model's block order. Rejects non-finite gradients without touching
    /// parameters or state.
    pub fn step_ascent(&mut self, model: &mut impl ParamBlocks, grads: &[Tensor]) -> Result<()> {
        let mut blocks = model.blocks_mut();
        if blocks.len() != grads.len() {
            return Err(Error::Dimension {
                context: "optimizer step".into(),
                expected: format!("{} gradient blocks", blocks.len()),
                actual: format!("{}", grads.len()),
            });
        }
        for (b, g) in blocks.iter().zip(grads) {
            if b.shape() != g.shape() {
                return Err(Error::Dimension {
                    context: "optimizer step".into(),
                    expected: format!("gradient shape {:?}", b.shape()),
                    actual: format!("{:?}", g.shape()),
                });
            }
            if !g.is_finite() {
                return Err(Error::Numeric(
                    "optimizer step: non-finite gradient, refusing update".into(),
                ));
            }
        }

        self.step_count += 1;
        match self.mode {
            OptimizerMode::Plain => {
                for (b, g) in blocks.iter_mut().zip(grads) {
                    for (p, &gi) in b.data_mut().iter_mut().zip(g.data()) {
                        *p += self.lr * gi;
                    }
                }
            }
            OptimizerMode::Adaptive { beta1, beta2, eps } => {
                let t = self.step_count as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for ((b, g), (m, v)) in blocks
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    for i in 0..g.numel() {
                        let gi = g.data()[i];
                        let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
                        let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
                        m.data_mut()[i] = mi;
                        v.data_mut()[i] = vi;
                        let m_hat = if bc1 == 0.0 { mi } else { mi / bc1 };
                        let v_hat = if bc2 == 0.0 { vi } else { vi / bc2 };
                        b.data_mut()[i] += self.lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// One descent step on a loss gradient: ascends `-g`.
    pub fn step(&mut self, model: &mut impl ParamBlocks, grads: &[Tensor]) -> Result<()> {
        let neg: Vec<Tensor> = grads.iter().map(|g| g.map(|x| -x)).collect();
        self.step_ascent(model, &neg)
    }
}

/// Cosine decay from `lr_start` to `lr_end` over `total_steps`; constant
/// `lr_end` afterwards.
pub fn cosine_lr(lr_start: f64, lr_end: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return lr_end;
    }
    let frac = step as f64 / total_steps as f64;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
    lr_end + (lr_start - lr_end) * cos
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::mlp::{Activation, Layer, Mlp};

    fn scalar_model(theta: f64) -> Mlp {
        Mlp::from_layers(vec![Layer {
            weight: Tensor::matrix(1, 1, vec![theta]).unwrap(),
            bias: Tensor::zeros(&[1]),
            activation: Activation::Linear,
        }])
    }

    fn theta(m: &Mlp) -> f64 {
        m.layers()[0].weight.data()[0]
    }

    #[test]
    fn plain_ascent_step_adds_lr_times_gradient() {
        let mut m = scalar_model(0.0);
        let mut opt = OptimizerState::new(&m, OptimizerMode::Plain, 0.1);
        let grads = vec![Tensor::matrix(1, 1, vec![1.0]).unwrap(), Tensor::zeros(&[1])];
        opt.step_ascent(&mut m, &grads).unwrap();
        assert_eq!(theta(&m), 0.1);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_decay_adaptive_reduces_to_normalized_gradient() {
        let mut m = scalar_model(0.0);
        let mode = OptimizerMode::Adaptive {
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-8,
        };
        let mut opt = OptimizerState::new(&m, mode, 0.1);
        let g = 0.03;
        let grads = vec![Tensor::matrix(1, 1, vec![g]).unwrap(), Tensor::zeros(&[1])];
        opt.step_ascent(&mut m, &grads).unwrap();
        let expect = 0.1 * g / (g.abs() + 1e-8);
        assert!((theta(&m) - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_from_fresh_state_leaves_params_unchanged() {
        let mut m = scalar_model(1.5);
        let mut opt = OptimizerState::new(&m, OptimizerMode::adaptive_default(), 0.1);
        let grads = vec![Tensor::zeros(&[1, 1]), Tensor::zeros(&[1])];
        opt.step_ascent(&mut m, &grads).unwrap();
        assert_eq!(theta(&m), 1.5);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn nan_gradient_is_refused_and_state_untouched() {
        let mut m = scalar_model(1.0);
        let mut opt = OptimizerState::new(&m, OptimizerMode::adaptive_default(), 0.1);
        let grads = vec![
            Tensor::matrix(1, 1, vec![f64::NAN]).unwrap(),
            Tensor::zeros(&[1]),
        ];
        assert!(matches!(
            opt.step_ascent(&mut m, &grads),
            Err(Error::Numeric(_))
        ));
        assert_eq!(theta(&m), 1.0);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn plain_descent_converges_on_quadratic() {
        let mut m = scalar_model(0.0);
        let mut opt = OptimizerState::new(&m, OptimizerMode::Plain, 0.1);
        for _ in 0..100 {
            let t = theta(&m);
            let grad = 2.0 * (t - 3.0);
            let grads = vec![Tensor::matrix(1, 1, vec![grad]).unwrap(), Tensor::zeros(&[1])];
            opt.step(&mut m, &grads).unwrap();
        }
        assert!((theta(&m) - 3.0).abs() < 0.01, "theta = {}", theta(&m));
    }

    #[test]
    fn adaptive_descent_converges_on_quadratic() {
        let mut m = scalar_model(0.0);
        let mut opt = OptimizerState::new(&m, OptimizerMode::adaptive_default(), 0.3);
        for step in 0..200 {
            let t = theta(&m);
            let grad = 2.0 * (t - 3.0);
            opt.set_lr(cosine_lr(0.3, 1e-3, step, 200));
            let grads = vec![Tensor::matrix(1, 1, vec![grad]).unwrap(), Tensor::zeros(&[1])];
            opt.step(&mut m, &grads).unwrap();
        }
        assert!((theta(&m) - 3.0).abs() < 0.05, "theta = {}", theta(&m));
    }

    #[test]
    fn cosine_lr_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(1.0, 0.1, 0, 100), 1.0);
        assert_eq!(cosine_lr(1.0, 0.1, 100, 100), 0.1);
        assert_eq!(cosine_lr(1.0, 0.1, 250, 100), 0.1);
        let mid = cosine_lr(1.0, 0.1, 50, 100);
        assert!((mid - 0.55).abs() < 1e-12);
    }
}
