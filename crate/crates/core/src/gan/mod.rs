//! Multi-stage conditional GAN with adaptive layout refinement.

pub mod check;
pub mod checkpoint;
pub mod losses;
pub mod model;
pub mod optim;
pub mod train;

pub use model::{Generation, Mode, Model, SampleInput, StageTerms};
pub use train::{Dataset, LossRecord, Trainer};
