//! Fixed-step RK4 integration and numerical differentiation.

use thiserror::Error;

use crate::grid::TimeGrid;
use crate::traj::Trajectory;

/// States with any entry beyond this magnitude abort integration instead of
/// propagating towards infinity.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Error, PartialEq)]
pub enum OdeError {
    #[error("integration diverged at step {step}")]
    Diverged { step: usize },
    #[error("numerical differentiation needs at least 3 points, got {0}")]
    TooShort(usize),
}

fn state_ok(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite() && v.abs() <= DIVERGENCE_LIMIT)
}

/// One classical 4th-order Runge-Kutta update `x + (dt/6)(k1+2k2+2k3+k4)`.
///
/// `step` only tags the error when an intermediate value is non-finite.
pub fn rk4_step(
    f: &mut impl FnMut(&[f64], &mut [f64]),
    x: &[f64],
    dt: f64,
    step: usize,
) -> Result<Vec<f64>, OdeError> {
    assert!(dt > 0.0);
    let d = x.len();
    let mut k1 = vec![0.0; d];
    let mut k2 = vec![0.0; d];
    let mut k3 = vec![0.0; d];
    let mut k4 = vec![0.0; d];
    let mut probe = vec![0.0; d];

    f(x, &mut k1);
    for i in 0..d {
        probe[i] = x[i] + 0.5 * dt * k1[i];
    }
    f(&probe, &mut k2);
    for i in 0..d {
        probe[i] = x[i] + 0.5 * dt * k2[i];
    }
    f(&probe, &mut k3);
    for i in 0..d {
        probe[i] = x[i] + dt * k3[i];
    }
    f(&probe, &mut k4);

    let mut next = vec![0.0; d];
    for i in 0..d {
        next[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    if !state_ok(&next) || !k1.iter().chain(&k2).chain(&k3).chain(&k4).all(|v| v.is_finite()) {
        return Err(OdeError::Diverged { step });
    }
    Ok(next)
}

/// Integrates `dx/dt = f(x)` over the grid. Column 0 is exactly `x0`.
pub fn integrate(
    mut f: impl FnMut(&[f64], &mut [f64]),
    x0: &[f64],
    grid: &TimeGrid,
) -> Result<Trajectory, OdeError> {
    let mut traj = Trajectory::zeros(x0.len(), grid.clone());
    traj.set_column(0, x0);
    let mut x = x0.to_vec();
    if !state_ok(&x) {
        return Err(OdeError::Diverged { step: 0 });
    }
    for k in 0..grid.steps() {
        x = rk4_step(&mut f, &x, grid.dt(), k)?;
        traj.set_column(k + 1, &x);
    }
    Ok(traj)
}

/// Derivative estimates per column: central differences inside, one-sided
/// forward/backward differences at the two ends. Returns row-major `d x T`.
pub fn numerical_derivative(traj: &Trajectory) -> Result<Vec<f64>, OdeError> {
    let t = traj.points();
    if t < 3 {
        return Err(OdeError::TooShort(t));
    }
    let d = traj.dim();
    let dt = traj.grid().dt();
    let mut out = vec![0.0; d * t];
    for i in 0..d {
        let row = &traj.states()[i * t..(i + 1) * t];
        let o = &mut out[i * t..(i + 1) * t];
        o[0] = (row[1] - row[0]) / dt;
        for k in 1..t - 1 {
            o[k] = (row[k + 1] - row[k - 1]) / (2.0 * dt);
        }
        o[t - 1] = (row[t - 1] - row[t - 2]) / dt;
    }
    Ok(out)
}
