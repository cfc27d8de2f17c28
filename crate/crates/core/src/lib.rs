//! Spiking segmentation building blocks with a dual-mode executor.
//!
//! Training mode runs normalized-integer neurons on a differentiable tape;
//! inference mode unrolls every activation into binary spikes and executes
//! weight layers as spike-gated accumulation. The two are numerically
//! equivalent, which [`profiler::compare_modes`] checks end to end.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod container;
pub mod deform;
pub mod error;
pub mod exec;
pub mod graph;
pub mod infer;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod neuron;
pub mod optim;
pub mod params;
pub mod profiler;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
