//! Uniform time grids.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("step size must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("a grid needs at least 2 points, got {0}")]
    TooFewPoints(usize),
}

/// Uniformly spaced time points `t0 + k*dt` for `k` in `0..points`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    dt: f64,
    points: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, points: usize) -> Result<Self, GridError> {
        if !(dt > 0.0) {
            return Err(GridError::NonPositiveStep(dt));
        }
        if points < 2 {
            return Err(GridError::TooFewPoints(points));
        }
        Ok(Self { t0, dt, points })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of grid points `T`.
    pub fn points(&self) -> usize {
        self.points
    }

    /// Number of integration steps, `T - 1`.
    pub fn steps(&self) -> usize {
        self.points - 1
    }

    pub fn time_at(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }
}
