//! Spiking recurrent networks trained online with Forward Propagation Through
//! Time (FPTT), next to a conventional backpropagation-through-time (BPTT)
//! reference path.
//!
//! The crate is organized around a per-timestep gradient tape: FPTT consumes
//! one tape per step (constant memory in sequence length), BPTT chains the
//! tapes of a whole sequence, and FPTT-K chains K-step chunks. Neuron models
//! cover plain leaky integrate-and-fire, adaptive spiking neurons with
//! threshold adaptation, and liquid time-constant spiking neurons whose
//! inverse time constants are learned functions of input and state.

pub mod autodiff;
pub mod data;
pub mod learning;
pub mod network;
pub mod neuron;

mod error;

pub use error::{Error, Result};
