//! Awareness-gated multi-modal dense video captioning: a small reverse-mode
//! autodiff tape, attention encoders with learned frame selectors, anchor
//! proposals, a transformer caption decoder and the training harness.
//!
//! The crate is `no_std` with `alloc`; file IO and the command line live in
//! the companion `sact` crate.

#![no_std]

extern crate alloc;

pub mod attention;
pub mod awareness;
pub mod bleu;
pub mod composer;
pub mod data;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod optim;
pub mod params;
pub mod proposal;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
