//! Semi-supervised segmentation with a dual-pathway diffusion denoiser.
//!
//! A teacher is first trained without labels through a mask -> image
//! cycle-consistency objective, then co-trained with a student using cross
//! pseudo-supervision and multi-round diffusion losses. Everything here is
//! `no_std` + `alloc`; file formats, timing and the CLI live in the `diffseg`
//! crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod cotrainer;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod optim;
pub mod pretrainer;
pub mod schedule;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Scalar, Tensor};
