//! Grading of white-matter-lesion severity (Fazekas scale 0-3) from stacks
//! of axial FLAIR slices, built from four pieces:
//!
//! * [`imaging`] — Otsu-threshold based lesion segmentation used to
//!   preprocess every slice,
//! * [`ssl`] — image corruptions (intensity remapping, local shuffling,
//!   in-/out-painting) that drive reconstruction pretraining,
//! * [`autodiff`] + [`model`] — a small dense-array reverse-mode engine and
//!   the encoder / attention / classifier networks built on it,
//! * [`data`] + [`eval`] — bag assembly, the synthetic phantom generator,
//!   cross-validation and the metric suite.
//!
//! Every operation is deterministic given its inputs and a seed; training
//! runs are reproducible bit for bit.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod imaging;
pub mod model;
pub mod rng;
pub mod ssl;

pub use config::Config;
pub use error::{Error, Result};
pub use imaging::GrayImage;
pub use rng::SeedRng;
