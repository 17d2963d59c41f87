//! Memory-augmented sparse bilinear attention encoder-decoder.
//!
//! Everything in this crate is pure computation over `alloc` buffers: a small
//! dense tensor type with a reverse-mode tape, the attention block, the
//! encoder/concept-head/decoder stack, beam search, caption metrics and the
//! text/synthetic-data helpers. File formats, configuration and the command
//! line live in the `msa-cli` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod beam;
pub mod concepts;
pub mod decoder;
pub mod encoder;
mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub use params::{GradBuffer, ParamId, ParamSet};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
