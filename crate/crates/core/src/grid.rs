//! Uniform time grids on `[t0 - delta, T]` whose step divides the delay.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative slack used when deciding whether a ratio of times is an integer.
const DIVISIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("horizon must exceed start time (t0 = {t0}, T = {horizon})")]
    EmptyHorizon { t0: f64, horizon: f64 },
    #[error("delay must be finite and non-negative, got {0}")]
    NegativeDelay(f64),
    #[error("step must be finite and positive, got {0}")]
    BadStep(f64),
    #[error("a positive delay needs lag_steps >= 1")]
    ZeroLagSteps,
    #[error("a zero delay needs an explicit step size")]
    MissingStep,
    #[error("step {step} does not divide the horizon length {length}: {ratio} steps leaves remainder {remainder}")]
    NotDivisible {
        length: f64,
        step: f64,
        ratio: f64,
        remainder: f64,
    },
    #[error("step {step} does not divide the delay {delta}")]
    DelayNotDivisible { delta: f64, step: f64 },
}

/// Discretisation of `[t0 - delta, T]` with step `h` and `delta = lag_steps * h`.
///
/// Node `k` sits at `t0 + (k - lag_steps) * h`; nodes `0..=lag_steps` carry the
/// initial history and node `lag_steps + n_steps` is the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t0: f64,
    horizon: f64,
    delta: f64,
    h: f64,
    n_steps: usize,
    lag_steps: usize,
}

fn integer_ratio(length: f64, step: f64) -> Result<usize, f64> {
    let ratio = length / step;
    let rounded = ratio.round();
    if rounded >= 0.0 && (ratio - rounded).abs() <= DIVISIBILITY_TOL * ratio.abs().max(1.0) {
        Ok(rounded as usize)
    } else {
        Err(ratio)
    }
}

impl TimeGrid {
    /// Grid with `h = delta / lag_steps`. For `delta = 0` use [`TimeGrid::with_step`].
    pub fn new(t0: f64, horizon: f64, delta: f64, lag_steps: usize) -> Result<Self, GridError> {
        if !(delta.is_finite() && delta >= 0.0) {
            return Err(GridError::NegativeDelay(delta));
        }
        if delta == 0.0 {
            return Err(GridError::MissingStep);
        }
        if lag_steps == 0 {
            return Err(GridError::ZeroLagSteps);
        }
        Self::with_step(t0, horizon, delta, delta / lag_steps as f64)
    }

    /// Grid with an explicit step; `h` must divide both `delta` and `T - t0`.
    pub fn with_step(t0: f64, horizon: f64, delta: f64, h: f64) -> Result<Self, GridError> {
        if !(horizon > t0) || !t0.is_finite() || !horizon.is_finite() {
            return Err(GridError::EmptyHorizon { t0, horizon });
        }
        if !(delta.is_finite() && delta >= 0.0) {
            return Err(GridError::NegativeDelay(delta));
        }
        if !(h.is_finite() && h > 0.0) {
            return Err(GridError::BadStep(h));
        }
        let lag_steps =
            integer_ratio(delta, h).map_err(|_| GridError::DelayNotDivisible { delta, step: h })?;
        let length = horizon - t0;
        let n_steps = integer_ratio(length, h).map_err(|ratio| GridError::NotDivisible {
            length,
            step: h,
            ratio,
            remainder: length - ratio.floor() * h,
        })?;
        if n_steps == 0 {
            return Err(GridError::NotDivisible {
                length,
                step: h,
                ratio: 0.0,
                remainder: length,
            });
        }
        Ok(Self {
            t0,
            horizon,
            delta,
            h,
            n_steps,
            lag_steps,
        })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn step(&self) -> f64 {
        self.h
    }

    /// Number of forward steps on `[t0, T]`.
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn lag_steps(&self) -> usize {
        self.lag_steps
    }

    /// Total node count including the history window.
    pub fn n_nodes(&self) -> usize {
        self.lag_steps + self.n_steps + 1
    }

    /// Index of the node sitting at `t0`.
    pub fn start_node(&self) -> usize {
        self.lag_steps
    }

    /// Index of the node sitting at `T`.
    pub fn end_node(&self) -> usize {
        self.lag_steps + self.n_steps
    }

    /// Time of node `k`, computed from `k` alone so it never drifts.
    pub fn node_time(&self, k: usize) -> f64 {
        self.t0 + (k as f64 - self.lag_steps as f64) * self.h
    }

    /// Time at the start of forward step `j` (node `start_node + j`).
    pub fn step_time(&self, j: usize) -> f64 {
        self.node_time(self.lag_steps + j)
    }

    pub fn node_times(&self) -> Vec<f64> {
        (0..self.n_nodes()).map(|k| self.node_time(k)).collect()
    }

    /// Same step and delay, shifted to start at forward step `j` of this grid.
    pub fn restart_at(&self, j: usize) -> Result<Self, GridError> {
        let t0 = self.step_time(j);
        Self::with_step(t0, self.horizon, self.delta, self.h)
    }

    /// Same step and delay on `[t0, t0 + steps * h]`.
    pub fn truncated(&self, steps: usize) -> Result<Self, GridError> {
        let horizon = self.t0 + steps as f64 * self.h;
        Self::with_step(self.t0, horizon, self.delta, self.h)
    }

    /// Converts a time offset into a whole number of steps.
    pub fn steps_in(&self, duration: f64) -> Option<usize> {
        integer_ratio(duration, self.h).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delayed_grid_has_history_nodes() {
        let g = TimeGrid::new(0.0, 1.0, 0.2, 2).unwrap();
        assert!((g.step() - 0.1).abs() < 1e-15);
        assert_eq!(g.lag_steps(), 2);
        assert_eq!(g.n_steps(), 10);
        // [-0.2, 1] at h = 0.1: 12 intervals, 13 nodes.
        assert_eq!(g.n_nodes(), 13);
        assert!((g.node_time(0) + 0.2).abs() < 1e-15);
        assert_eq!(g.node_time(g.start_node()), 0.0);
        assert!((g.node_time(g.end_node()) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn no_delay_grid() {
        let g = TimeGrid::with_step(0.0, 1.0, 0.0, 0.25).unwrap();
        assert_eq!(g.n_nodes(), 5);
        assert_eq!(g.lag_steps(), 0);
        assert_eq!(g.node_times(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(TimeGrid::new(0.0, 1.0, 0.0, 0), Err(GridError::MissingStep));
    }

    #[test]
    fn non_divisible_horizon_is_rejected() {
        let err = TimeGrid::new(0.0, 1.0, 0.3, 2).unwrap_err();
        match err {
            GridError::NotDivisible { remainder, .. } => {
                assert!((remainder - 0.1).abs() < 1e-9, "remainder {remainder}")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_inputs() {
        assert!(matches!(
            TimeGrid::with_step(1.0, 1.0, 0.0, 0.1),
            Err(GridError::EmptyHorizon { .. })
        ));
        assert!(matches!(
            TimeGrid::with_step(0.0, 1.0, 0.15, 0.1),
            Err(GridError::DelayNotDivisible { .. })
        ));
        assert_eq!(TimeGrid::new(0.0, 1.0, 0.2, 0), Err(GridError::ZeroLagSteps));
        assert_eq!(
            TimeGrid::new(0.0, 1.0, -0.2, 2),
            Err(GridError::NegativeDelay(-0.2))
        );
    }

    #[test]
    fn node_times_are_order_independent() {
        let g = TimeGrid::new(0.3, 2.3, 0.5, 7).unwrap();
        let forward: Vec<f64> = (0..g.n_nodes()).map(|k| g.node_time(k)).collect();
        let backward: Vec<f64> = (0..g.n_nodes()).rev().map(|k| g.node_time(k)).collect();
        for (k, t) in forward.iter().enumerate() {
            assert_eq!(t.to_bits(), backward[g.n_nodes() - 1 - k].to_bits());
        }
    }

    #[test]
    fn restart_keeps_step_and_delay() {
        let g = TimeGrid::new(0.0, 1.0, 0.2, 2).unwrap();
        let r = g.restart_at(4).unwrap();
        assert!((r.t0() - 0.4).abs() < 1e-15);
        assert_eq!(r.n_steps(), 6);
        assert_eq!(r.lag_steps(), 2);
        assert_eq!(g.steps_in(0.5), Some(5));
        assert_eq!(g.steps_in(0.55), None);
    }
}
