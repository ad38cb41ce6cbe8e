use serde::{Deserialize, Serialize};

/// Proportional-integral controller state for the gate regularizer weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PIControllerState {
    pub p: f64,
    pub i: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub k_p: f64,
    pub k_i: f64,
    /// Target deletion ratio.
    pub delta: f64,
}

impl PIControllerState {
    pub fn new(delta: f64, gamma: f64, k_p: f64, k_i: f64) -> Self {
        Self { p: 0.0, i: 0.0, alpha: 0.0, gamma, k_p, k_i, delta }
    }
}

/// One controller update from the observed deletion ratio.
pub fn pi_update(state: PIControllerState, observed: f64) -> PIControllerState {
    let err = state.delta - observed;
    let p = state.gamma * state.p + (1.0 - state.gamma) * err;
    let i = state.i + err;
    let alpha = (state.k_p * p + state.k_i * i).max(0.0);
    PIControllerState { p, i, alpha, ..state }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_error_stays_at_rest() {
        let mut s = PIControllerState::new(0.3, 0.9, 0.5, 1e-5);
        for _ in 0..100 {
            s = pi_update(s, 0.3);
        }
        assert_eq!((s.p, s.i, s.alpha), (0.0, 0.0, 0.0));
    }

    #[test]
    fn over_deletion_clamps() {
        let mut s = PIControllerState::new(0.2, 0.9, 0.5, 1e-5);
        for _ in 0..50 {
            s = pi_update(s, 0.9);
            assert_eq!(s.alpha, 0.0);
        }
    }
}
