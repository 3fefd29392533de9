//! SGD with momentum plus the central-finite-difference gradient checker
//! used as the oracle for every loss in the crate.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Momentum SGD over a fixed list of parameter tensors, each with its own
/// learning rate (parameter groups collapse to per-tensor rates here).
#[derive(Clone, Debug)]
pub struct SgdState {
    momentum: f64,
    weight_decay: f64,
    lrs: Vec<f64>,
    velocities: Vec<Tensor>,
}

impl SgdState {
    /// `lrs[i]` is the learning rate for the i-th parameter tensor.
    /// Momentum 0.9 and weight decay 0 are the conventional defaults.
    pub fn new(params: &[&Tensor], lrs: Vec<f64>, momentum: f64) -> Result<Self> {
        Self::with_weight_decay(params, lrs, momentum, 0.0)
    }

    pub fn with_weight_decay(
        params: &[&Tensor],
        lrs: Vec<f64>,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<Self> {
        if params.len() != lrs.len() {
            return Err(Error::InvalidConfig(format!(
                "sgd: {} parameters but {} learning rates",
                params.len(),
                lrs.len()
            )));
        }
        if lrs.iter().any(|&lr| lr <= 0.0) {
            return Err(Error::InvalidConfig("sgd: learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig(format!(
                "sgd: momentum {momentum} outside [0, 1)"
            )));
        }
        if weight_decay < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "sgd: weight decay {weight_decay} must be non-negative"
            )));
        }
        Ok(SgdState {
            momentum,
            weight_decay,
            lrs,
            velocities: params.iter().map(|p| Tensor::zeros_like(p)).collect(),
        })
    }

    /// One update: `v <- mu v + g + wd * theta; theta <- theta - lr_scale * lr * v`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr_scale: f64) -> Result<()> {
        assert_eq!(params.len(), self.velocities.len());
        assert_eq!(grads.len(), self.velocities.len());
        for g in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    what: "gradient passed to sgd_step".into(),
                });
            }
        }
        for ((param, grad), (vel, lr)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.velocities.iter_mut().zip(&self.lrs))
        {
            let rate = lr * lr_scale;
            for ((p, v), g) in param
                .values_mut()
                .iter_mut()
                .zip(vel.values_mut())
                .zip(grad.values())
            {
                *v = self.momentum * *v + g + self.weight_decay * *p;
                *p -= rate * *v;
            }
        }
        Ok(())
    }
}

/// Builds a scalar loss on a fresh tape from staged parameter leaves.
///
/// The same closure serves the analytic path (parameters staged trainable,
/// `backward` called) and the numeric path (forward evaluation at perturbed
/// parameters), so the two routes share only the forward arithmetic.
pub trait LossFn {
    fn build(&self, tape: &mut Tape, params: &[NodeId]) -> Result<NodeId>;
}

impl<F> LossFn for F
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    fn build(&self, tape: &mut Tape, params: &[NodeId]) -> Result<NodeId> {
        self(tape, params)
    }
}

fn eval_loss(loss: &dyn LossFn, params: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.input(p.clone())).collect();
    let root = loss.build(&mut tape, &ids)?;
    Ok(tape.value(root).item())
}

/// Max over all parameter coordinates of
/// `|analytic - central difference| / max(1, |analytic|)`.
pub fn finite_diff_check(loss: &dyn LossFn, params: &[Tensor], h: f64) -> Result<f64> {
    // Analytic gradients.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = loss.build(&mut tape, &ids)?;
    let grads = tape.backward(root)?;

    let mut worst: f64 = 0.0;
    let mut perturbed: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let analytic = grads.get(ids[pi]);
        for ci in 0..param.numel() {
            let a = analytic.map(|t| t.values()[ci]).unwrap_or(0.0);
            let orig = param.values()[ci];

            perturbed[pi].values_mut()[ci] = orig + h;
            let up = eval_loss(loss, &perturbed)?;
            perturbed[pi].values_mut()[ci] = orig - h;
            let down = eval_loss(loss, &perturbed)?;
            perturbed[pi].values_mut()[ci] = orig;

            let numeric = (up - down) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
