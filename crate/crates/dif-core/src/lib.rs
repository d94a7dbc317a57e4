//! Learning invariant dynamics from multi-environment ODE trajectories.
//!
//! The crate is organized around the data flow of the toolkit:
//!
//! - [`grid`] / [`traj`]: time grids and trajectory matrices
//! - [`ode`]: fixed-step RK4 integration and numerical differentiation
//! - [`metrics`]: the normalized RMSE metric
//! - [`systems`]: the three multi-environment ODE systems and parameter sampling
//! - [`dataset`]: dataset generation and the on-disk record format
//! - [`tensor`]: a reverse-mode differentiable array substrate
//! - [`nets`]: trajectory encoder, invariant/environment heads, decoder, discriminator
//! - [`hyperexec`]: batched execution of decoded derivative networks
//! - [`train`]: the adversarial disentanglement objective and baselines
//! - [`eval`]: forecasting, the four-cell error matrix, sweeps, exports

pub mod dataset;
pub mod grid;
pub mod hyperexec;
pub mod metrics;
pub mod nets;
pub mod ode;
pub mod rng;
pub mod systems;
pub mod train;
pub mod tensor;
pub mod traj;
