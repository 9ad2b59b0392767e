//! Desk-scale rectified-flow colorization: structure/color decoupled
//! training, progressive preference optimization, and evaluation.

pub mod augment;
pub mod color_math;
pub mod dpo;
pub mod error;
pub mod eval;
pub mod flow;
pub mod image_io;
pub mod pref_data;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub mod micronet;
