//! Sparse-distributed-memory MLPs for continual learning.

pub mod baselines;
pub mod continual;
pub mod data_io;
pub mod numerics;
pub mod optimizers;
pub mod sdm_theory;
pub mod sdmlp;
