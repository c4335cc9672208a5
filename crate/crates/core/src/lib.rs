//! Noise-robust audio-visual speech recognition: bottleneck-Conformer fusion
//! of lip video and noisy audio, a jointly trained spectrogram enhancement
//! head, and hybrid CTC/attention recognition, all on a small self-contained
//! autodiff engine.

pub mod container;
pub mod data;
pub mod enhance;
pub mod error;
pub mod frontends;
pub mod fusion;
pub mod harness;
pub mod model;
pub mod nn;
pub mod recognition;
pub mod tensor;
#[doc(hidden)]
pub mod testing;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
