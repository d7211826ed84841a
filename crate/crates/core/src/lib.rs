//! Neural posterior estimation for a fully observed Hopfield opinion/tie
//! coevolution model.
//!
//! The pipeline simulates graph traces from the prior ([`abm`]), embeds each
//! trace with a Chebyshev graph-convolutional GRU ([`embedder`]), and fits a
//! conditional masked autoregressive flow over the model parameters
//! ([`flow`]) jointly with the embedder ([`training`]). [`diagnostics`]
//! samples and checks the trained posterior; [`store`] and [`cli`] hold the
//! on-disk formats and command implementations.

pub mod abm;
pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod embedder;
mod error;
pub mod flow;
pub mod model;
pub mod training;
pub mod numerics;
pub mod store;

pub use error::{Error, Result};
