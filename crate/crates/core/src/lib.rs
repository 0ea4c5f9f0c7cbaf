//! Scene text recognition in three stages (observe, think, spell) on top of a
//! small reverse-mode differentiation core.
//!
//! * [`tensor`], [`autograd`], [`param`], [`gradcheck`]: dense `f64`
//!   tensors, a tape, named parameters and a finite-difference oracle.
//! * [`attention`]: self-attention, dual-QK subtractive (differential)
//!   attention and masked cross-attention blocks.
//! * [`encoder`]: patch embedding and the Macaron-interleaved encoder.
//! * [`thinking`]: sinusoidal slot queries, position-aware alignment and the
//!   Gumbel-Softmax semantic quantizer.
//! * [`decoder`]: the multi-modal verifier decoder with its causal fusion mask.
//! * [`model`]: the assembled network.
//! * [`train`]: losses, optimizer, schedules, synthetic data, metrics and
//!   ablations.
//! * [`cli`]: the `otsnet` command surface.

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod model;
pub mod param;
pub mod pgm;
pub mod tensor;
pub mod thinking;
pub mod train;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use model::{ModelConfig, OtsNet};
pub use param::{Init, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
