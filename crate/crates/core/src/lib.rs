//! Privacy-preserving release of smart-meter time series.
//!
//! A recurrent releaser maps the observed consumption (plus uniform seed
//! noise) to a published series, and is trained against a recurrent attacker
//! that tries to recover a private label sequence from the release. The
//! releaser minimizes normalized ℓp distortion minus a weighted causally
//! conditional entropy of the attacker's guesses.
//!
//! Modules:
//! - [`engine`]: stacked LSTM + dense head, forward pass and exact BPTT.
//! - [`optim`]: value clipping, recurrent ℓ2 penalty and RMSprop.
//! - [`objectives`]: distortion, cross-entropy and entropy losses with gradients.
//! - [`trainer`]: the alternating attacker / releaser minimax loop.
//! - [`data`]: synthetic occupancy-driven load generator, CSV I/O, splits.
//! - [`oracle`]: exact enumeration of directed information on small processes.
//! - [`analytics`]: balanced accuracy, sweeps, Welch PSD, quality indicators.

pub mod analytics;
pub mod data;
pub mod engine;
mod error;
pub mod objectives;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
