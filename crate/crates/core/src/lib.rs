//! Dynamic learning-rate scheduling with a latent ODE model of training
//! trajectories.
//!
//! The pipeline: [`testbed`] sweeps parametric [`schedules`] over a small
//! trainee network and writes a [`trajectory`] corpus; [`lode`] learns a
//! latent dynamical model of those runs on top of the [`diff`] engine; and
//! [`scheduler`] uses the model online to emit the next learning rates for
//! a live run.

pub mod diff;
pub mod lode;
pub mod scheduler;
pub mod schedules;
pub mod testbed;
pub mod trajectory;
