//! Leaky integrate-and-fire neuron dynamics with soft reset.
//!
//! Per step, each neuron integrates `v = leak_alpha * u + i`, fires when
//! `v >= v_threshold` (ties fire), and carries `u' = v - v_threshold * s`
//! to the next step. The spike itself is binary; training relies on a
//! rectangular surrogate window around the threshold crossing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Neuron constants shared by a whole layer stack.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LifParams {
    /// Membrane leak factor in [0, 1].
    #[serde(default = "default_leak_alpha")]
    pub leak_alpha: f64,
    /// Firing threshold, strictly positive.
    #[serde(default = "default_v_threshold")]
    pub v_threshold: f64,
    /// Rectangular surrogate window width, strictly positive.
    #[serde(default = "default_surrogate_width")]
    pub surrogate_width: f64,
}

fn default_leak_alpha() -> f64 {
    0.5
}
fn default_v_threshold() -> f64 {
    1.0
}
fn default_surrogate_width() -> f64 {
    1.0
}

impl Default for LifParams {
    fn default() -> Self {
        LifParams {
            leak_alpha: default_leak_alpha(),
            v_threshold: default_v_threshold(),
            surrogate_width: default_surrogate_width(),
        }
    }
}

impl LifParams {
    /// Validates parameter ranges.
    pub fn validate(&self) -> Result<()> {
        if !(self.leak_alpha.is_finite() && (0.0..=1.0).contains(&self.leak_alpha)) {
            return Err(Error::invalid(format!(
                "leak_alpha {} must lie in [0, 1]",
                self.leak_alpha
            )));
        }
        if !(self.v_threshold.is_finite() && self.v_threshold > 0.0) {
            return Err(Error::invalid(format!(
                "v_threshold {} must be > 0",
                self.v_threshold
            )));
        }
        if !(self.surrogate_width.is_finite() && self.surrogate_width > 0.0) {
            return Err(Error::invalid(format!(
                "surrogate_width {} must be > 0",
                self.surrogate_width
            )));
        }
        Ok(())
    }
}

/// Post-reset membrane potentials of one layer.
#[derive(Debug, Clone)]
pub struct LifState {
    pub membrane: Tensor,
}

impl LifState {
    /// Resting state (all-zero membranes) for `n` neurons.
    pub fn resting(n: usize) -> Self {
        LifState {
            membrane: Tensor::zeros(vec![n]),
        }
    }
}

/// One integrate-fire-reset step for a layer of neurons.
///
/// Returns the binary spike vector and the post-reset state. The input
/// current must be finite and match the state width.
pub fn lif_step(state: &LifState, input_current: &Tensor, params: &LifParams) -> Result<(Tensor, LifState)> {
    params.validate()?;
    if input_current.shape() != state.membrane.shape() {
        return Err(Error::ShapeMismatch {
            op: "lif_step",
            lhs: state.membrane.shape().to_vec(),
            rhs: input_current.shape().to_vec(),
        });
    }
    input_current.ensure_finite("lif_step input current")?;

    let n = input_current.numel();
    let mut spikes = vec![0.0; n];
    let mut next = vec![0.0; n];
    for j in 0..n {
        let v = params.leak_alpha * state.membrane.data()[j] + input_current.data()[j];
        let s = if v >= params.v_threshold { 1.0 } else { 0.0 };
        spikes[j] = s;
        next[j] = v - params.v_threshold * s;
    }
    Ok((
        Tensor::vector(spikes),
        LifState {
            membrane: Tensor::vector(next),
        },
    ))
}

/// Exact step nonlinearity on the distance above threshold: 1 when
/// `v_minus_threshold >= 0` (ties fire), else 0.
pub fn surrogate_spike_forward(v_minus_threshold: f64) -> f64 {
    if v_minus_threshold >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Rectangular surrogate derivative: `1/width` inside the open window
/// `|v_minus_threshold| < width/2`, else 0. `width` must be positive.
pub fn surrogate_spike_backward(v_minus_threshold: f64, width: f64) -> Result<f64> {
    if !(width > 0.0) {
        return Err(Error::invalid(format!("surrogate width {width} must be > 0")));
    }
    Ok(if v_minus_threshold.abs() < width / 2.0 {
        1.0 / width
    } else {
        0.0
    })
}
