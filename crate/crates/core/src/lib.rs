//! Probabilistic circuits with a latent fair decision variable.
//!
//! The crate provides a discrete probabilistic circuit representation
//! ([`circuit`]), circuit flows and expected flows ([`flows`]), parameter
//! learning by closed-form estimation and EM ([`params`]), structure learning
//! by Chow-Liu initialization and edge splitting ([`structure`]), fair model
//! construction with a tied head over the sensitive attribute and a latent
//! decision variable ([`fair`]), a small tabular data layer ([`data`]), a
//! synthetic benchmark generator ([`synth`]), and evaluation metrics
//! ([`metrics`]).

pub mod circuit;
pub mod data;
pub mod error;
pub mod fair;
pub mod flows;
pub mod metrics;
pub mod params;
pub mod structure;
pub mod synth;

#[cfg(any(test, feature = "testkit"))]
pub mod testkit;

pub use error::{Error, Result};
