//! Path-integral guided policy search.
//!
//! This crate implements the numerical core of guided policy search with a
//! path-integral (PI2) local optimizer: time-varying linear-Gaussian
//! controllers, the KL-constrained PI2 update, a KL-constrained LQR baseline
//! on fitted linear dynamics, simulated benchmark environments, a small MLP
//! global policy trained by supervised distillation, and the outer loop that
//! alternates local optimization with distillation under either fixed or
//! freshly randomized task instances.
//!
//! The crate is `no_std` (with `alloc`): everything is pure computation over
//! explicit seeds, so rollouts, updates, and whole experiment phases are
//! reproducible bit-for-bit. IO, configuration files, and the experiment CLI
//! live in the companion `pigps-cli` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod controllers;
pub mod envs;
pub mod error;
pub mod gps;
pub mod linalg;
pub mod lqr;
pub mod mlp;
pub mod pi2;
pub mod rng;

pub use error::{Error, Result};
