//! Central finite-difference gradient verification.
//!
//! [`grad_check`] perturbs every parameter entry of a model by `±h`,
//! re-evaluates a scalar loss, and compares the centred difference quotient
//! against a supplied analytic gradient. It is deliberately independent of
//! the tape: the loss closure is a black box, so the check catches wrong
//! backward rules rather than reproducing them.
//!
//! The error of entry `i` is `|a_i - n_i| / max(|a_i|, |n_i|, FLOOR)`; the
//! floor of 1e-3 turns the comparison absolute for near-zero gradients,
//! where the difference quotient is dominated by cancellation noise.

use super::mlp::ParamBlocks;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub block: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over all parameter entries.
    pub max_rel_err: f64,
    /// The entry attaining `max_rel_err`.
    pub worst: Option<GradCheckEntry>,
    /// Entries whose analytic or numeric gradient is not finite.
    pub non_finite: Vec<GradCheckEntry>,
    pub tolerance: f64,
    pub pass: bool,
}

/// Check `analytic` (aligned with the model's block order) against central
/// finite differences of `loss` with step `h`.
///
/// The model is restored to its original parameters before returning.
pub fn grad_check<M: ParamBlocks>(
    model: &mut M,
    loss: impl Fn(&M) -> Result<f64>,
    analytic: &[Tensor],
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let names = model.block_names();
    if analytic.len() != names.len() {
        return Err(Error::Dimension {
            context: "grad_check".into(),
            expected: format!("{} gradient blocks", names.len()),
            actual: format!("{}", analytic.len()),
        });
    }
    if !(h > 0.0) {
        return Err(Error::contract(format!("grad_check: step h must be positive, got {h}")));
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        non_finite: Vec::new(),
        tolerance,
        pass: true,
    };

    let n_blocks = names.len();
    for bi in 0..n_blocks {
        let numel = model.blocks()[bi].numel();
        if analytic[bi].shape() != model.blocks()[bi].shape() {
            return Err(Error::Dimension {
                context: format!("grad_check block {}", names[bi]),
                expected: format!("{:?}", model.blocks()[bi].shape()),
                actual: format!("{:?}", analytic[bi].shape()),
            });
        }
        for i in 0..numel {
            let orig = model.blocks()[bi].data()[i];

            model.blocks_mut()[bi].data_mut()[i] = orig + h;
            let plus = loss(model)?;
            model.blocks_mut()[bi].data_mut()[i] = orig - h;
            let minus = loss(model)?;
            model.blocks_mut()[bi].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[bi].data()[i];
            let entry = |rel_err| GradCheckEntry {
                block: names[bi].clone(),
                index: i,
                analytic: a,
                numeric,
                rel_err,
            };

            if !a.is_finite() || !numeric.is_finite() {
                report.non_finite.push(entry(f64::INFINITY));
                report.pass = false;
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some(entry(rel));
            }
        }
    }
    if report.max_rel_err > tolerance {
        report.pass = false;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::Graph;
    use crate::numerics::mlp::{mlp_gradients, Activation, Mlp};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn taped_loss(mlp: &Mlp, input: &Tensor, target_col: &[usize]) -> (f64, Vec<Tensor>) {
        let mut g = Graph::new();
        let nodes = mlp.register(&mut g);
        let x = g.leaf(input.clone());
        let logits = mlp.forward_graph(&mut g, &nodes, x).unwrap();
        let ls = g.log_softmax_rows(logits);
        let picked = g.gather_rows(ls, target_col);
        let mean = g.mean_all(picked);
        let loss = g.neg(mean);
        let grads = g.backward(loss).unwrap();
        (g.value(loss).item(), mlp_gradients(&g, &grads, &nodes))
    }

    #[test]
    fn linear_loss_matches_to_near_machine_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = Mlp::init(&[3, 1], Activation::Linear, &mut rng).unwrap();
        let input = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75]).unwrap();

        let analytic = {
            let mut g = Graph::new();
            let nodes = mlp.register(&mut g);
            let x = g.leaf(input.clone());
            let y = mlp.forward_graph(&mut g, &nodes, x).unwrap();
            let loss = g.sum_all(y);
            let grads = g.backward(loss).unwrap();
            mlp_gradients(&g, &grads, &nodes)
        };
        let report = grad_check(
            &mut mlp,
            |m| {
                let y = m.forward(&input)?;
                Ok(y.data().iter().sum())
            },
            &analytic,
            DEFAULT_STEP,
            1e-10,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
        assert!(report.max_rel_err < 1e-10);
    }

    #[test]
    fn softmax_ce_head_passes_at_loose_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut mlp = Mlp::init(&[4, 5, 2], Activation::Tanh, &mut rng).unwrap();
        let input =
            Tensor::matrix(3, 4, vec![0.1, -0.4, 0.9, 0.2, -1.1, 0.3, 0.5, -0.2, 0.0, 1.4, -0.6, 0.8])
                .unwrap();
        let targets = [0, 1, 1];

        let (_, analytic) = taped_loss(&mlp, &input, &targets);
        let report = grad_check(
            &mut mlp,
            |m| Ok(taped_loss(m, &input, &targets).0),
            &analytic,
            DEFAULT_STEP,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "worst: {:?}", report.worst);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut mlp = Mlp::init(&[4, 5, 2], Activation::Tanh, &mut rng).unwrap();
        let input = Tensor::matrix(1, 4, vec![0.1, -0.4, 0.9, 0.2]).unwrap();
        let targets = [0];

        let (_, mut analytic) = taped_loss(&mlp, &input, &targets);
        analytic[0].data_mut()[0] += 0.1;
        let report = grad_check(
            &mut mlp,
            |m| Ok(taped_loss(m, &input, &targets).0),
            &analytic,
            DEFAULT_STEP,
            1e-4,
        )
        .unwrap();
        assert!(!report.pass);
        let worst = report.worst.unwrap();
        assert_eq!(worst.block, "layer0.weight");
        assert_eq!(worst.index, 0);
    }

    #[test]
    fn nan_analytic_gradient_yields_explicit_failure_entry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mlp = Mlp::init(&[2, 1], Activation::Linear, &mut rng).unwrap();
        let input = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let mut analytic = vec![Tensor::zeros(&[2, 1]), Tensor::zeros(&[1])];
        analytic[0].data_mut()[1] = f64::NAN;
        let report = grad_check(
            &mut mlp,
            |m| Ok(m.forward(&input)?.data()[0]),
            &analytic,
            DEFAULT_STEP,
            1e-4,
        )
        .unwrap();
        assert!(!report.pass);
        assert_eq!(report.non_finite.len(), 1);
        assert_eq!(report.non_finite[0].index, 1);
    }

    #[test]
    fn params_are_restored_after_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut mlp = Mlp::init(&[2, 2], Activation::Linear, &mut rng).unwrap();
        let before = crate::numerics::mlp::flatten_params(&mlp);
        let input = Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap();
        let analytic = vec![Tensor::zeros(&[2, 2]), Tensor::zeros(&[2])];
        let _ = grad_check(
            &mut mlp,
            |m| Ok(m.forward(&input)?.data().iter().sum()),
            &analytic,
            DEFAULT_STEP,
            1e10,
        )
        .unwrap();
        assert_eq!(crate::numerics::mlp::flatten_params(&mlp), before);
    }
}
