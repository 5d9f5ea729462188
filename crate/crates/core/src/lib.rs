//! Core of the Titan training framework.
//!
//! Everything in this crate is pure computation over in-memory values: the
//! tensor/autograd engine, the Transformer-XL backbone with its NLU and NLG
//! task modules, the pre-training objectives (including the adversarial
//! credibility loss and the controllable language-modelling loss), online
//! distillation, zero-shot scoring, and the text pipeline. File formats, the
//! CLI and anything touching the filesystem live in the `titan` crate.
//!
//! The crate is `no_std` (with `alloc`) when the default `std` feature is
//! disabled.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod distill;
pub mod error;
pub mod model;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod text;
pub mod tokenizer;
pub mod zeroshot;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
