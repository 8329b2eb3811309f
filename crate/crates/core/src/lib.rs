//! Rule-guided neural compatibility modeling for top/bottom clothing pairs.
//!
//! A dual-tower student network scores (top, bottom) pairs and is trained
//! with a pairwise ranking loss. Hand-curated matching rules are turned
//! into a closed-form teacher distribution per training triplet, weighted
//! by a small attention network that decides how much each rule should be
//! trusted for that triplet, and the student is pulled towards the teacher.

pub mod catalog;
pub mod dataset;
pub mod distill;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod params;
pub mod rules;
pub mod student;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
