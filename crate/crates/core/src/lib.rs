//! Padding-free convolutional networks for MNIST, trained from scratch with
//! hand-written backpropagation, and combined by majority voting.
//!
//! * [`data`] reads IDX files and produces augmented, normalized batches.
//! * [`nn`] holds the tensor type and every layer's forward/backward pass.
//! * [`optim`] implements Adam, the per-epoch learning-rate decay and the
//!   exponential moving average of weights used for evaluation.
//! * [`models`] describes the M3/M5/M7 networks and the max-pooling
//!   baselines, runs them, and stores checkpoints.
//! * [`trainer`] is the training loop and evaluation.
//! * [`ensemble`] does majority voting, ensemble sampling and the statistics
//!   reported for them.
//! * [`cli`] wires everything into commands (also used by the `simplecnn`
//!   binary).

pub mod cli;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod models;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
