//! Finite-volume solver for cross-diffusion systems with volume-filling
//! constraint and optional reactions.

pub mod experiments;
pub mod fields;
pub mod linalg;
pub mod mesh;
pub mod reaction;
pub mod scheme;
pub mod solver;
