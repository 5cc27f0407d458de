//! Core of a desk-scale generalized category discovery stack with
//! shortcut suppression: a small reverse-mode tensor engine, a planted
//! shortcut dataset generator, cross-class patch augmentation, the loss
//! stack, a known-class prototype bank, a deterministic trainer and the
//! Hungarian-matched evaluation protocol.
//!
//! The crate is `no_std` (with `alloc`); file formats and the command line
//! live in the companion `cleargcd` crate.
#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod augment;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod prototype_bank;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
