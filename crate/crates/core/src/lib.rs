//! Replicating long-term chaotic characteristics of logistic maps with
//! one-step-ahead predictors.
//!
//! The crate covers the full pipeline: exact map simulation and Lyapunov
//! spectra ([`dynamics`]), sample generation ([`dataset`]), the μ-tuned
//! feature encoding ([`encoding`]), a simulated variational circuit
//! ([`adqc`]) and an LSTM baseline ([`lstm`]) behind a shared model
//! interface ([`model`]), RMSE training ([`training`]) and long-term scoring
//! through rollouts, bifurcation images and model Lyapunov exponents
//! ([`evaluation`]). Experiment presets live in [`presets`].

pub mod adqc;
pub mod dataset;
pub mod dynamics;
pub mod encoding;
mod error;
pub mod evaluation;
pub mod lstm;
pub mod model;
pub mod presets;
pub mod training;

pub use error::{Error, Result};
