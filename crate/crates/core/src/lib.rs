//! Masked image modeling with noise-based corruption on a small
//! reverse-mode autograd engine.

// `!(x > 0.0)` guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod corruption;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
