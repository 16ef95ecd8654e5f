//! Quadrotor model predictive control built on a state-dependent coefficient
//! (SDC) factorization of the Newton–Euler dynamics.

pub mod dynamics;
pub mod model;
pub mod mpc;
pub mod observer;
pub mod qp;
pub mod riccati;
pub mod sdc;
