//! Spectral analysis of sparse communication topologies for decentralized SGD.
//!
//! When n workers average their models through a gossip matrix W instead of a
//! central server, how much of the n-fold variance reduction survives? This
//! crate answers that question quantitatively:
//!
//! - [`topology`] builds and validates gossip matrices (Metropolis–Hastings
//!   weights on rings, stars, toruses, trees, hypercubes, custom edge lists)
//!   and time-varying schedules, and exposes their spectra.
//! - [`neighbors`] computes the *effective number of neighbors* n_W(γ): the
//!   variance reduction a decayed random walk enjoys under gossip averaging,
//!   in closed form from the spectrum and by Monte-Carlo simulation.
//! - [`quadratic`] predicts exact convergence rates of decentralized SGD on
//!   an isotropic random quadratic — single worker, all-reduce averaging, and
//!   the gossip fixed point that interpolates them — plus a brute-force
//!   transition-matrix oracle and a parallel simulator to verify every claim.
//! - [`bounds`] evaluates convex-theory learning-rate bounds driven by n_W
//!   rather than the spectral gap, selects the largest useful averaging decay,
//!   and simulates randomized gossip/gradient descent with its Lyapunov
//!   function.
//! - [`covfit`] goes the other way: given worker ensembles, it fits the decay
//!   parameter γ whose predicted covariance shape matches the data.
//!
//! Everything is deterministic: fixed-order reductions, per-repetition RNG
//! streams, and a Jacobi eigensolver make seeded results byte-identical
//! across runs and thread counts.

pub mod bounds;
pub mod covfit;
pub mod eigen;
pub mod error;
pub mod matrix;
pub mod neighbors;
pub mod optim;
pub mod quadratic;
pub mod rng;
pub mod topology;

pub use error::{Error, Result};
