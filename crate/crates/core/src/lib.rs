//! Dual-stream deepfake detector core.
//!
//! Everything in this crate is pure computation over in-memory buffers and
//! builds without `std`: a small dense tensor type with a reverse-mode tape,
//! the 2-D DFT and radial band analysis, color/texture transforms, the
//! spatial and frequency encoders, cross-stream fusion, multiscale patch
//! embedding, class-token refinement, the histogram ("blood") branch, Adam,
//! and the AUC rank statistic. File formats, corpora and the command line
//! live in the `dsdf` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autograd;
pub mod blood;
pub mod error;
pub mod fft;
pub mod frequency;
pub mod freq_encoder;
pub mod fusion;
pub mod gradcheck;
pub mod image;
pub mod math;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod spatial;
pub mod synth;
pub mod tensor;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use model::{ModelConfig, Verdict};
pub use params::ModelParams;
pub use tensor::{ComplexTensor, Precision, Tensor};
