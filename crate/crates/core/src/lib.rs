//! Mixed-supervision object detection with an online annotation module.
//!
//! A small two-branch detector is trained on a synthetic detection world. The
//! annotation branch learns from strong (box-annotated) and weak
//! (image-label-only) images and pseudo-annotates weak images on the fly; the
//! supervised branch trains on strong images plus the confident
//! pseudo-annotations and is the only part used at test time.

pub mod cli;
pub mod error;
pub mod evaluator;
pub mod geometry;
pub mod netcore;
pub mod oam_losses;
pub mod pseudogen;
pub mod report;
pub mod supervised;
pub mod synthworld;
pub mod trainer;

pub use error::{Error, Result};
