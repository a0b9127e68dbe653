//! Momentum SGD and the cosine learning-rate schedule.
//!
//! Update rule per parameter tensor, in slice order:
//! `v <- momentum * v + lr * (g + weight_decay * w)`, then `w <- w - v`.
//! The schedule is a half-period cosine from the base rate to exactly
//! zero at the final step, no warmup or restarts.

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::network::{AffineLayer, TapeParams};
use crate::tape::Gradients;
use crate::tensor::Tensor;

fn default_batch_size() -> usize {
    16
}
fn default_learning_rate() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    0.0
}
fn default_cosine() -> bool {
    true
}

/// One training run's optimization settings. JSON keys match the field
/// names; unknown keys are rejected.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Cosine-decay the learning rate over all steps; constant otherwise.
    #[serde(default = "default_cosine")]
    pub cosine_schedule: bool,
}

impl TrainPlan {
    /// Field validation shared by all callers. Zero epochs are allowed
    /// here: evaluating an untrained network is a supported smoke path.
    pub fn validate_fields(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid(format!(
                "learning_rate {} must be finite and > 0",
                self.learning_rate
            )));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::invalid(format!(
                "momentum {} must be in [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid(format!(
                "weight_decay {} must be finite and >= 0",
                self.weight_decay
            )));
        }
        Ok(())
    }

    /// Full validation for user-supplied run configs.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        self.validate_fields()
    }
}

/// Half-period cosine decay: the base rate at step 0, exactly zero at the
/// final step. A single-step schedule stays at the base rate.
pub fn cosine_lr(base: f64, step: usize, total_steps: usize) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("cosine schedule needs at least one step"));
    }
    if step >= total_steps {
        return Err(Error::invalid(format!(
            "step {step} out of range for {total_steps} total steps"
        )));
    }
    if total_steps == 1 {
        return Ok(base);
    }
    let phase = std::f64::consts::PI * step as f64 / (total_steps - 1) as f64;
    Ok(base * 0.5 * (1.0 + phase.cos()))
}

/// Momentum SGD over a fixed set of parameter tensors. Velocity slots are
/// keyed by position, so callers must pass parameters in the same order
/// every step.
#[derive(Debug, Clone)]
pub struct MomentumSgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl MomentumSgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(momentum.is_finite() && (0.0..1.0).contains(&momentum)) {
            return Err(Error::invalid(format!("momentum {momentum} must be in [0, 1)")));
        }
        if !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(Error::invalid(format!(
                "weight_decay {weight_decay} must be finite and >= 0"
            )));
        }
        Ok(MomentumSgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    /// Applies one update. `params` and `grads` must align elementwise and
    /// keep the same shapes across calls.
    pub fn step(&mut self, lr: f64, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::invalid(format!("learning rate {lr} must be finite and >= 0")));
        }
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::invalid(format!(
                "optimizer was initialized with {} tensors, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for ((param, grad), vel) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if param.shape() != grad.shape() || param.shape() != vel.shape() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step",
                    lhs: param.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            grad.ensure_finite("gradient")?;
            let w = param.data_mut();
            let v = vel.data_mut();
            for i in 0..w.len() {
                let g = grad.data()[i] + self.weight_decay * w[i];
                v[i] = self.momentum * v[i] + lr * g;
                w[i] -= v[i];
            }
        }
        Ok(())
    }
}

/// One optimizer step over affine layers whose parameters were registered
/// on a tape. Gradients are read densely per leaf (untouched leaves count
/// as zero). Returns the updated `(weight, bias)` values in layer order;
/// the caller re-installs them through its network's validated setter.
pub fn step_affine_layers(
    opt: &mut MomentumSgd,
    lr: f64,
    layers: &[AffineLayer],
    params: &TapeParams,
    grads: &Gradients,
) -> Result<Vec<(Tensor, Tensor)>> {
    if params.layers.len() != layers.len() {
        return Err(Error::invalid(format!(
            "{} tape layers but {} network layers",
            params.layers.len(),
            layers.len()
        )));
    }
    let mut values: Vec<(Tensor, Tensor)> = layers
        .iter()
        .map(|l| (l.weight.clone(), l.bias.clone()))
        .collect();
    let mut grad_list = Vec::with_capacity(layers.len() * 2);
    for (l, &(wid, bid)) in layers.iter().zip(&params.layers) {
        grad_list.push(Tensor::new(
            l.weight.shape().to_vec(),
            grads.wrt_dense(wid, l.weight.numel()),
        )?);
        grad_list.push(Tensor::new(
            l.bias.shape().to_vec(),
            grads.wrt_dense(bid, l.bias.numel()),
        )?);
    }
    let mut tensors: Vec<&mut Tensor> = Vec::with_capacity(values.len() * 2);
    for (w, b) in values.iter_mut() {
        tensors.push(w);
        tensors.push(b);
    }
    opt.step(lr, &mut tensors, &grad_list)?;
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_matches_hand_computed_quadratic_sequence() {
        // f(x) = x^2, gradient 2x, lr 0.1, momentum 0.9, from x = 1.
        let mut opt = MomentumSgd::new(0.9, 0.0).unwrap();
        let mut x = Tensor::vector(vec![1.0]);
        let g1 = Tensor::vector(vec![2.0 * x.data()[0]]);
        opt.step(0.1, &mut [&mut x], std::slice::from_ref(&g1)).unwrap();
        assert!((x.data()[0] - 0.8).abs() < 1e-15);
        let g2 = Tensor::vector(vec![2.0 * x.data()[0]]);
        opt.step(0.1, &mut [&mut x], std::slice::from_ref(&g2)).unwrap();
        // v2 = 0.9*0.2 + 0.1*1.6 = 0.34, x2 = 0.8 - 0.34 = 0.46.
        assert!((x.data()[0] - 0.46).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_enters_the_gradient() {
        let mut opt = MomentumSgd::new(0.0, 0.5).unwrap();
        let mut x = Tensor::vector(vec![2.0]);
        let g = Tensor::vector(vec![1.0]);
        opt.step(0.1, &mut [&mut x], std::slice::from_ref(&g)).unwrap();
        // Effective gradient 1 + 0.5*2 = 2; step 0.2.
        assert!((x.data()[0] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_keeps_params_but_velocity_semantics_hold() {
        let mut opt = MomentumSgd::new(0.9, 0.0).unwrap();
        let mut x = Tensor::vector(vec![1.5]);
        let g = Tensor::vector(vec![3.0]);
        opt.step(0.0, &mut [&mut x], std::slice::from_ref(&g)).unwrap();
        assert_eq!(x.data()[0], 1.5);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let total = 40;
        assert_eq!(cosine_lr(0.2, 0, total).unwrap(), 0.2);
        let last = cosine_lr(0.2, total - 1, total).unwrap();
        assert!(last.abs() < 1e-16, "final lr {last}");
        // Monotone nonincreasing across the half period.
        let mut prev = f64::INFINITY;
        for s in 0..total {
            let lr = cosine_lr(0.2, s, total).unwrap();
            assert!(lr <= prev + 1e-15);
            assert!((0.0..=0.2).contains(&lr));
            prev = lr;
        }
        // Midpoint is half the base.
        let mid = cosine_lr(0.2, (total - 1) / 2, 40).unwrap();
        assert!((mid - 0.1).abs() < 0.01);
    }

    #[test]
    fn cosine_schedule_degenerate_and_invalid() {
        assert_eq!(cosine_lr(0.3, 0, 1).unwrap(), 0.3);
        assert!(cosine_lr(0.3, 1, 1).is_err());
        assert!(cosine_lr(0.3, 0, 0).is_err());
    }

    #[test]
    fn step_rejects_mismatched_shapes() {
        let mut opt = MomentumSgd::new(0.9, 0.0).unwrap();
        let mut x = Tensor::vector(vec![1.0, 2.0]);
        let g = Tensor::vector(vec![1.0]);
        assert!(opt.step(0.1, &mut [&mut x], std::slice::from_ref(&g)).is_err());
    }

    #[test]
    fn plan_validation() {
        let plan = TrainPlan {
            epochs: 3,
            batch_size: 8,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            cosine_schedule: true,
        };
        assert!(plan.validate().is_ok());
        let mut p = plan;
        p.epochs = 0;
        assert!(p.validate().is_err());
        assert!(p.validate_fields().is_ok());
        p = plan;
        p.momentum = 1.0;
        assert!(p.validate().is_err());
        p = plan;
        p.learning_rate = 0.0;
        assert!(p.validate().is_err());
    }
}
