//! Identity-preserving-free medical image release on a synthetic testbed:
//! block identity-salient regions, re-encode the remainder through a
//! quantized code space with a codelength prior that separates identity from
//! semantic codes, then re-synthesize a shareable image. Includes re-ID
//! attackers, classical protection baselines, and a privacy/utility sweep.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod corpusio;
pub mod error;
pub mod evalharness;
pub mod idblock;
pub mod mdlcodec;
pub mod mfm;
pub mod pipeline;
pub mod reid;
pub mod resynth;
pub mod synthgen;

pub use error::{DeidError, Result};
