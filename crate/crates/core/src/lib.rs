//! Desk-scale federated segmentation simulator with deep supervision at
//! intermediate layers and negative-entropy regularization of hidden
//! features, plus diagnostics for the quantities that drive its
//! convergence bound.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod objectives;

pub use error::{Error, Result};
