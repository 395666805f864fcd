//! Continual-unlearning laboratory for a toy text-conditioned diffusion model.
//!
//! The crate is `no_std` (it needs `alloc`) and contains every algorithmic piece:
//! the synthetic concept world, the cross-attention denoiser with hand-written
//! reverse-mode gradients, unlearning strategies, the add-on regularizers,
//! gradient projection, the evaluation protocol and the diagnostic studies.
//! File formats, the CLI and parallel evaluation live in the `culb` crate.
#![no_std]

extern crate alloc;

pub mod addons;
pub mod analysis;
pub mod bench;
pub mod config;
pub mod error;
pub mod gradproj;
pub mod linalg;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod unlearning;
pub mod world;

mod math;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::Tensor;
