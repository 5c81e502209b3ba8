//! Parameter-efficient transfer of small transformer encoders to CTC
//! sequence-recognition tasks.
//!
//! The crate is split along the lines of the training pipeline:
//!
//! - [`numerics`]: dense `f64` tensors and a reverse-mode tape.
//! - [`model`]: the encoder (optional conv frontend, post-LN blocks with
//!   two adapter slots each, linear CTC head).
//! - [`transfer`]: trainable-set policies and parameter accounting.
//! - [`ctc`]: CTC loss, brute-force oracle, greedy decoding, WER.
//! - [`train`]: learning-rate schedules, Adam, the training loop.
//! - [`synthdata`]: seeded toy corpora standing in for speech data.
//! - [`checkpoint`]: full and delta checkpoint files.

pub mod checkpoint;
pub mod ctc;
mod error;
pub mod model;
pub mod numerics;
mod seeding;
pub mod synthdata;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
