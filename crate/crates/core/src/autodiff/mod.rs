//! Minimal dense linear algebra and a per-step reverse-accumulation tape.
//!
//! The tape records one timestep of network computation. Consuming each tape
//! immediately yields the one-step gradient used by FPTT; chaining the tapes
//! of a sequence with [`chain_tapes`] yields the full unrolled gradient used
//! by BPTT. Both paths share the same backward rules, so a K=T chunk and a
//! whole-sequence backward are identical by construction.

mod matrix;
mod params;
mod tape;

pub use matrix::Matrix;
pub use params::{GradSet, ParamId, ParamSet};
pub use tape::{chain_tapes, Boundary, NodeId, StateAdjoints, StepTape, TapeBuilder};
