//! Trajectory matrices on uniform time grids.

use crate::grid::TimeGrid;

/// A `d x T` matrix of system states, stored row-major (one row per state
/// dimension, one column per grid point).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    dim: usize,
    grid: TimeGrid,
    /// Row-major `d x T`: entry `(i, k)` at `i * T + k`.
    states: Vec<f64>,
}

impl Trajectory {
    pub fn new(dim: usize, grid: TimeGrid, states: Vec<f64>) -> Self {
        assert_eq!(states.len(), dim * grid.points());
        Self { dim, grid, states }
    }

    pub fn zeros(dim: usize, grid: TimeGrid) -> Self {
        let len = dim * grid.points();
        Self {
            dim,
            grid,
            states: vec![0.0; len],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn points(&self) -> usize {
        self.grid.points()
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut [f64] {
        &mut self.states
    }

    pub fn get(&self, dim: usize, k: usize) -> f64 {
        self.states[dim * self.grid.points() + k]
    }

    pub fn set(&mut self, dim: usize, k: usize, v: f64) {
        self.states[dim * self.grid.points() + k] = v;
    }

    /// State vector at column `k`.
    pub fn column(&self, k: usize) -> Vec<f64> {
        let t = self.grid.points();
        (0..self.dim).map(|i| self.states[i * t + k]).collect()
    }

    pub fn set_column(&mut self, k: usize, x: &[f64]) {
        let t = self.grid.points();
        for (i, &v) in x.iter().enumerate() {
            self.states[i * t + k] = v;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.states.iter().all(|v| v.is_finite())
    }

    /// The first `t_c` columns.
    pub fn past_window(&self, t_c: usize) -> PastWindow {
        assert!(t_c >= 1 && t_c < self.grid.points());
        let t = self.grid.points();
        let mut states = Vec::with_capacity(self.dim * t_c);
        for i in 0..self.dim {
            states.extend_from_slice(&self.states[i * t..i * t + t_c]);
        }
        PastWindow {
            dim: self.dim,
            t_c,
            states,
        }
    }
}

/// The observation window handed to the encoder: the first `T_c` columns of
/// a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct PastWindow {
    dim: usize,
    t_c: usize,
    /// Row-major `d x T_c`.
    states: Vec<f64>,
}

impl PastWindow {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn t_c(&self) -> usize {
        self.t_c
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn get(&self, dim: usize, k: usize) -> f64 {
        self.states[dim * self.t_c + k]
    }
}
