//! Generative adversarial mapping networks (GAMN) and the GMMN baseline on
//! 2-D toy distributions.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod mmd;
pub mod nn;
pub mod optim;
pub mod regularizers;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Node, Tape};
pub use error::{Error, Result};
pub use tensor::Tensor;
