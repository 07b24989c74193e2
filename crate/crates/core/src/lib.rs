//! Episodic few-shot meta-learning with adversarial task augmentation.

pub mod augment;
pub mod error;
pub mod models;
pub mod params;
pub mod seed;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::ModelParams;
pub use tensor::{Tape, Tensor, Var};
