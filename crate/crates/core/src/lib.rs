//! Declaration-based prompt tuning for visual question answering.
//!
//! The crate is `no_std` (with `alloc`) and holds everything that is pure
//! computation: the synthetic scene world, declaration handling, the small
//! vision-language encoder with its reverse-mode gradients, pre-training,
//! the DPT fine-tuning paradigms and the evaluation protocols. File formats,
//! the CLI and report rendering live in the `dpt` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod declaration;
pub mod dpt;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod harness;
pub mod math;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod vocab;
pub mod world;

pub use error::{Error, Result};
