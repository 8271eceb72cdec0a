//! Semantically consistent unpaired image-to-image translation.
//!
//! Two generators translate between image domains A and B under adversarial,
//! cycle and identity constraints, while two segmenters tie the class layout
//! of a translated image to the layout of its source. Semantic dropout masks
//! all but one shared class of a sample pair to push class-to-class mappings.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dropout;
pub mod eval;
pub mod error;
pub mod losses;
pub mod models;
pub mod nn;
pub mod taxonomy;
pub mod train;
pub mod types;

pub use error::{Error, Result};
