//! Masked-autoencoder EEG pretraining with 4D Fourier positional encoding,
//! downstream adaptation, and a harness for auditing evaluation protocols.

pub mod adaptation;
pub mod autograd;
pub mod cli;
pub mod config;
pub mod error;
pub mod masking;
pub mod model;
pub mod optim;
pub mod params;
pub mod posenc;
pub mod protocol;
pub mod recording;
pub mod seed;
pub mod signal;
pub mod tokenizer;

pub use error::{Error, Result};
