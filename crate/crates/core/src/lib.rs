//! Continual-learning engine for sequential time-series classification.
//!
//! The crate bundles a small reverse-mode autodiff stack, a stacked-LSTM
//! classifier with a growable head, the incremental-learning strategies
//! (EWC, Online EWC, SI, LwF, iCaRL, GEM plus None/Joint baselines) behind a
//! common [`strategies::Strategy`] trait, exemplar memory, data handling,
//! the two-stage selection protocol with its forgetting metrics, and the
//! storage/latency cost model.

pub mod costs;
pub mod data;
pub mod error;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod protocol;
pub mod strategies;

pub use error::{Error, Result};
