//! Attention-hijacking analysis of Trojan transformer encoders.
//!
//! The crate trains populations ("zoos") of small clean and backdoored
//! transformer classifiers on synthetic sequence and grid tasks, finds
//! attention heads whose rows collapse onto the trigger token, measures how
//! those heads change attention distance and layer representations, and
//! classifies suspect models as Trojan or clean from their reaction to
//! candidate perturbations.

pub mod analysis;
pub mod datasets;
pub mod detector;
pub mod error;
pub mod io_util;
pub mod numerics;
pub mod report;
pub mod transformer;
pub mod zoo;

pub use error::{Error, Result};
