//! Adaptive layout refinement for multi-stage text-to-image GANs.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] – dense f64 tensors with a reverse-mode tape and a
//!   finite-difference gradient checker.
//! * [`ssm`] – word/subregion similarity matrices, text-vision matrices and
//!   layout masks.
//! * [`alr`] – residual split, learned easy/hard weights and the adaptive
//!   layout refinement loss.
//! * [`lvr`] – masked perception and Gram-style refinement losses.
//! * [`gan`] – the m-stage generator/discriminator stack, objectives,
//!   optimiser, training step and checkpoints.
//! * [`nn`] – parameter store, binders and the small layers shared by the
//!   networks.
//! * [`gradsuite`] – finite-difference checks of every tape operation and
//!   composite objective.
//! * [`data`] – procedural caption/scene pairs.
//! * [`metrics`] – toy-FID, inception score, R-precision, layout agreement.
//! * [`config`], [`experiment`] – run configuration and the train / ablate /
//!   sweep / eval drivers used by the CLI.

pub mod alr;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gan;
pub mod gradsuite;
pub mod lvr;
pub mod nn;
pub mod metrics;
pub mod par;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
