//! Partition-function ratios across a replica defect for lattice φ⁴ theory.
//!
//! Four samplers share one work/weight bookkeeping: equilibrium heatbath
//! priors, non-equilibrium Monte Carlo with Jarzynski reweighting, normalizing
//! flows built from defect coupling layers, and stochastic normalizing flows
//! interleaving both. Exact oracles (Gaussian determinants, quadrature, the
//! conformal prediction) back the tests.

pub mod cli;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod estimators;
pub mod flow;
pub mod heatbath;
pub mod lattice;
pub mod nnet;
pub mod oracle;
pub mod pipeline;
pub mod protocol;
pub mod rng;
pub mod snf;
pub mod train;

pub use error::{Error, Result};
