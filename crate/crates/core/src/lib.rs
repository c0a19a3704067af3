//! Mutual-information regularized autoencoders for learning channel codes,
//! neural mutual-information estimation, and iterative capacity learning.

pub mod analytic;
pub mod autodiff;
pub mod autoencoder;
pub mod capacity;
pub mod channels;
pub mod cli;
pub mod error;
pub mod mine;
pub mod nn;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
