//! Variational inference for spatially-heterogeneous causal Bayesian
//! networks over landslide, liquefaction and building-damage nodes.

pub mod causal_elbo;
pub mod cli;
pub mod coeff_field;
pub mod error;
pub mod flows;
pub mod geogrid;
pub mod gp;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
