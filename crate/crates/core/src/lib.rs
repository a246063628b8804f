//! Prompt learning for promptable segmentation models.
//!
//! A prompt predictor network turns image-encoder features into box, mask
//! and dense token prompts for a promptable segmentation backbone, so the
//! backbone can segment without a human in the loop, with extra manual
//! prompts, or from manual prompts alone.

pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod fused;
pub mod losses;
pub mod model;
pub mod nn;
pub mod peft;
pub mod ppn;
pub mod training;

pub use error::{Error, Result};
