//! Grounded visual representation training.
//!
//! This crate trains small image classifiers whose intermediate features are
//! pulled toward sentence embeddings of per-image descriptions, and whose
//! features must additionally support generating those descriptions through a
//! recurrent decoder trained with teacher forcing plus a policy-gradient
//! reward. The point of the exercise is robustness: models are trained on a
//! subset of visual domains and evaluated on held-out ones, against a plain
//! cross-entropy baseline trained the same way.
//!
//! Everything runs on CPU in `f64` with hand-rolled layers and explicit
//! backward passes, so gradients can be checked against finite differences
//! and runs are bit-reproducible for a given seed.
//!
//! Layout:
//! - [`nn`]: parameters, layers (linear / conv / LSTM), Adam, softmax utilities
//! - [`data`]: procedural multi-domain dataset, splits, vocabulary, batching
//! - [`encoders`]: visual encoder, joint-space projections, sentence encoders
//! - [`explainer`]: recurrent description generator and frozen reward model
//! - [`objectives`]: loss terms and their weights
//! - [`trainer`]: training loop, checkpointing, hyperparameter search
//! - [`evalkit`]: accuracy / caption metrics, diagnostics, protocol reports
//! - [`harness`]: CLI entry points and run-directory handling

pub mod data;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod explainer;
pub mod harness;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod trainer;

pub use error::GvrtError;
