//! Text-conditioned latent diffusion transformer with a trainable temporal
//! modality adapter, asymmetric classifier-free guidance, and a synthetic
//! audio/video/text benchmark for conflicting-condition evaluation.
//!
//! The crate is `no_std` + `alloc`; the default `std` feature enables runtime
//! SIMD dispatch in the matrix kernels and thread-parallel batch evaluation.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adapter;
pub mod backbone;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod real;
pub mod rng;
pub mod synth;
pub mod system;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Param, ParamId, Parameters, Tensor};

/// Maps `f` over `items`, in parallel when threads are available; output order matches input.
#[cfg(feature = "std")]
pub(crate) fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> alloc::vec::Vec<U> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "std"))]
pub(crate) fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> alloc::vec::Vec<U> {
    items.iter().map(f).collect()
}
