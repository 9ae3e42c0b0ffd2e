//! Hysteresis feedback law for the noise gains `σ_j`.
//!
//! Per channel: `p_j ≥ α_j` switches the gain on, `p_j ≤ β_j` switches it off,
//! and in between the previous setting is kept.

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::model::PlantParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerParams {
    /// Switch-on thresholds `α_j`.
    pub alpha: [f64; 3],
    /// Switch-off thresholds `β_j`.
    pub beta: [f64; 3],
    /// Gain constant `c`.
    pub c: f64,
    /// `η_j` entering the gain formula.
    pub efficiency: [f64; 3],
    /// `Γ_j` entering the gain formula.
    pub measurement_strength: [f64; 3],
}

impl ControllerParams {
    /// Uniform thresholds, with `η_j, Γ_j` taken from the plant.
    pub fn uniform(alpha: f64, beta: f64, c: f64, plant: &PlantParams) -> Self {
        Self {
            alpha: [alpha; 3],
            beta: [beta; 3],
            c,
            efficiency: plant.efficiency,
            measurement_strength: plant.measurement_strength,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for j in 0..3 {
            let (a, b) = (self.alpha[j], self.beta[j]);
            if !(a > 0.5 && a < 1.0) {
                return Err(SimError::param(format!("controller.alpha[{j}]"), format!("requires 1/2 < alpha < 1, got {a}")));
            }
            if !(b > 0.5) {
                return Err(SimError::param(format!("controller.beta[{j}]"), format!("requires beta > 1/2, got {b}")));
            }
            if !(b < a) {
                return Err(SimError::param(
                    format!("controller.beta[{j}]"),
                    format!("requires beta < alpha, got beta = {b}, alpha = {a}"),
                ));
            }
            let (e, g) = (self.efficiency[j], self.measurement_strength[j]);
            if !(0.0..=1.0).contains(&e) {
                return Err(SimError::param(format!("controller.efficiency[{j}]"), format!("must lie in [0, 1], got {e}")));
            }
            if !(g > 0.0 && g.is_finite()) {
                return Err(SimError::param(format!("controller.measurement_strength[{j}]"), format!("must be > 0, got {g}")));
            }
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(SimError::param("controller.c", format!("must be > 0, got {}", self.c)));
        }
        Ok(())
    }

    /// Active gain `√(6 c η_j Γ_j / (2α_j − 1))`.
    pub fn active_gain(&self, j: usize) -> f64 {
        (6.0 * self.c * self.efficiency[j] * self.measurement_strength[j] / (2.0 * self.alpha[j] - 1.0)).sqrt()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ControllerState {
    pub active: [bool; 3],
    pub sigma: [f64; 3],
}

/// All channels off.
pub fn initial_state() -> ControllerState {
    ControllerState::default()
}

/// One application of the switching rules to flipped-subspace populations `p`.
pub fn update(state: &ControllerState, p: &[f64; 3], params: &ControllerParams) -> ControllerState {
    let mut next = *state;
    for j in 0..3 {
        let pj = p[j].clamp(0.0, 1.0);
        if pj >= params.alpha[j] {
            next.active[j] = true;
        } else if pj <= params.beta[j] {
            next.active[j] = false;
        }
        next.sigma[j] = if next.active[j] { params.active_gain(j) } else { 0.0 };
    }
    next
}
