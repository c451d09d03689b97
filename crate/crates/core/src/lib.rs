//! Desk-scale demosaicing training laboratory.
//!
//! The crate covers the full loop: CFA mosaicking and a bilinear baseline,
//! artifact-scoring metrics over predicted/ground-truth patch pairs, hard-patch
//! mining into sub-categories, validation-curve-based sub-category selection,
//! a small hand-differentiated convolutional demosaicer, standard and cyclic
//! training regimes, PSNR/SSIM evaluation, and a reproducible staged pipeline.

pub mod error;
pub mod util;

pub mod corpus;
pub mod eval;
pub mod imaging;
pub mod metrics;
pub mod mining;
pub mod model;
pub mod selection;
pub mod training;

pub use error::{Error, Result};
