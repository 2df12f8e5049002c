//! Graph attention training with causal attention regularization.
//!
//! The crate is organised bottom-up: [`tensor`] (dense arrays, gradient tape,
//! Adam), [`graph`] and [`synth`] (graph storage and synthetic data),
//! [`attention`] and [`model`] (layers and classifiers), [`car`] (intervention
//! sampling, causal effects and the training loop), [`metrics`] and [`stats`]
//! (evaluation and significance tests), [`rewire`] (attention-guided pruning),
//! and [`io`], [`config`], [`sweep`] for the command-line front end.

pub mod attention;
pub mod car;
pub mod config;
pub mod error;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod model;
pub mod rewire;
pub mod stats;
pub mod sweep;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
