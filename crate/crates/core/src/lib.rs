//! Adversarial training with an extragradient step that lowers adversarial
//! certainty, plus the attacks and diagnostics used to study robust
//! overfitting on small classifiers.

pub mod attack;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod netcore;
pub mod objective;
pub mod runner;
pub mod train;

pub use error::{Error, Result};
