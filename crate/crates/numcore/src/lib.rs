//! Minimal numeric substrate for the de-identification pipeline: dense f64
//! tensors on a reverse-mode gradient tape, the straight-through estimators
//! needed to train through rounding and hard categorical sampling, a seeded
//! RNG, and the error function used by the entropy model.
//!
//! Everything runs in 64-bit floating point on a single thread; tensors are
//! immutable once their forward value is computed.

pub mod graph;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod special;

pub use graph::{grad_of, gumbel_softmax, Graph, PTensor, ParamStore, PId, Var};
pub use optim::{AdamW, AdamWConfig};
pub use rng::Rng;
pub use special::erf;
