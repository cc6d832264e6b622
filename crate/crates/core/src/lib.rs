//! Source-free domain adaptation with a dual-speed teacher-student pair.
//!
//! The student follows SGD on a cosine + space-similarity distillation loss
//! against a teacher whose weights and batchnorm statistics are an
//! exponential moving average of the student's.

pub mod cli;
pub mod datagen;
pub mod duospeed;
pub mod evalsuite;
pub mod hiprec;
pub mod losses;
pub mod model;
pub mod numkernel;
pub mod rng;

pub use losses::{cos_loss, space_loss, total_loss, LossValue};
pub use numkernel::{Matrix, Mode};
