//! Action-proposal plumbing around anchor micro-tubes: anchor-pyramid
//! geometry, heuristic transition-matrix estimation, a reference HMM,
//! proposal enumeration with pooling-plan accounting, online action-tube
//! construction and tube-level evaluation — all desk-scale and fed by a
//! synthetic scenario generator.

pub mod error;
pub mod eval;
pub mod geometry;
pub mod hmm;
pub mod io;
pub mod pipeline;
pub mod proposals;
pub mod synth;
pub mod transmat;
pub mod tubes;

pub use error::{Error, Result};
