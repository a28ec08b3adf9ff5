//! Diffusion approximations, discrete-event simulation and exact
//! stationary analysis for overloaded many-server queues with customer
//! abandonment (`G/GI/n+M` and `G/GI/n+GI`).

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod config;
pub mod ctmc;
pub mod des;
pub mod diffusion;
pub mod distributions;
pub mod experiments;
pub mod fclt;
pub mod numerics;
pub mod ou;
pub mod rng;

pub use distributions::{DistError, DistSpec, EquilibriumSpec, Family};
