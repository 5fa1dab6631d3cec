//! Joint beamforming, RIS phase configuration and user-RIS association for
//! multi-RIS mmWave downlinks.
//!
//! The crate provides a channel generator, the weighted-sum-rate system model,
//! classical solvers (WMMSE, Riemannian conjugate gradient, alternating
//! optimization), a heterogeneous graph neural network trained with a small
//! reverse-mode autodiff engine, and an experiment CLI.

pub mod numerics;
pub mod par;
pub mod channel;
pub mod sysmodel;
pub mod baselines;
pub mod hgnn;
pub mod cli;
