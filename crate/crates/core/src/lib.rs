//! Bayesian head networks over precomputed feature vectors, with selective
//! classification driven by posterior-ensemble agreement.
//!
//! The pipeline is: [`dataset`] feature files and stratified splits,
//! [`train`] a mean-field variational MLP ([`variational`], [`mlp`]),
//! draw an [`ensemble`] of point networks into a prediction matrix, then
//! score it under `(N, P)` confidence policies with [`selective`] and
//! summarize folds with [`report`].

pub mod cli;
pub mod dataset;
pub mod document;
pub mod ensemble;
pub mod error;
mod fsutil;
pub mod mlp;
pub mod report;
pub mod rng;
pub mod selective;
pub mod train;
pub mod variational;

pub use error::{FormatError, ModelError};
