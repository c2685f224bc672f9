//! Surrogate-driven design screening for circularly polarised Fabry-Pérot
//! cavity antennas with rough-periphery PRS unit cells.
//!
//! The pipeline: sample brick layouts ([`design`]), label them with the
//! closed-form oracle ([`oracle`], [`dataset`]), train a conditional GAN
//! surrogate ([`gan`]) built on a small dense-network core ([`nn`]), compare
//! it against MLP/CNN regressors ([`baselines`]), then screen large candidate
//! pools and verify the winners ([`screening`]).

pub mod archcheck;
pub mod baselines;
pub mod checksum;
pub mod config;
pub mod dataset;
pub mod design;
pub mod error;
pub mod gan;
pub mod nn;
pub mod oracle;
pub mod screening;
pub mod seed;
pub mod surrogate;

pub use error::{Error, Result};

/// Version stamped into every report.
pub const TOOL_VERSION: &str = concat!("fpcgan ", env!("CARGO_PKG_VERSION"));
