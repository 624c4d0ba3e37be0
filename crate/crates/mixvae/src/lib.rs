//! Maximum-likelihood estimation of variational autoencoders from
//! incomplete data.
//!
//! The library provides:
//!
//! - a synthetic mixture-of-Gaussians ground truth with analytic
//!   conditionals, used both as a data source and as an oracle ([`mog`]);
//! - incomplete-data containers, missingness mechanisms, and CSV ingestion
//!   ([`data`]);
//! - a small reverse-mode tape ([`tape`]) and residual MLPs ([`nn`])
//!   backing the decoder ([`vae`]) and the finite-mixture amortized
//!   encoder ([`mixture`]), including implicit-reparametrization gradients
//!   for ancestrally-sampled mixtures;
//! - the mixture training bounds and their stratified / importance-weighted
//!   variants ([`objectives`]);
//! - decomposed two-objective training with a persistent imputation store
//!   and approximate conditional samplers ([`demiss`]);
//! - quadrature-exact evaluation for 2D-latent models and gradient / posterior
//!   diagnostics ([`eval`]);
//! - the experiment harness: configuration, training loop, checkpointing,
//!   and figure rendering ([`exp`], [`report`]).

pub mod checkpoint;
pub mod data;
pub mod kernels;
pub mod demiss;
pub mod error;
pub mod eval;
pub mod exp;
pub mod math;
pub mod mixture;
pub mod mog;
pub mod nn;
pub mod objectives;
pub mod report;
pub mod rng;
pub mod stats;
pub mod tape;
pub mod vae;

pub use error::{Error, Result};
