//! Few-shot object detection with dual query encoders, a dual attention
//! generator and adaptive fusion, on a synthetic shapes world.

pub mod ablation;
pub mod archive;
pub mod dualheads;
pub mod episodes;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod params;
pub mod perception;
pub mod pipeline;
pub mod rng;
pub mod tensor;
