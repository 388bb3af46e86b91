//! Odor-source search in an unsteady cylinder wake.
//!
//! The crate covers the full pipeline: a 2D incompressible flow solver with a
//! passive odor scalar ([`flowsim`]), storage and interpolation of the recorded
//! fields ([`fieldstore`]), the partially observable search task ([`env`]), a
//! small recurrent network library with hand-written reverse mode ([`nnet`]),
//! recurrent soft actor-critic training over randomly sampled memory windows
//! ([`rrsac`]), post-hoc strategy statistics ([`analysis`]) and the
//! sector-search speed model ([`sector`]).

pub mod analysis;
pub mod config;
pub mod env;
pub mod error;
pub mod fieldstore;
pub mod flowsim;
pub mod nnet;
pub mod optim;
pub mod rrsac;
pub mod sector;

pub use error::{Error, Result};

/// Two-component vector in domain units.
pub type Vec2 = [f64; 2];
