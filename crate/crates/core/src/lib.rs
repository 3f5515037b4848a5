//! Spiking temporal-aware transformer engine.

pub mod attention;
pub mod autodiff;
pub mod blocks;
pub mod config;
pub mod data;
pub mod energy;
pub mod error;
pub mod kernels;
pub mod neuron;
pub mod nn;
pub mod par;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{AnalogTensor, SpikeTensor, Tensor};

/// Identifies the engine build in run directories.
pub fn build_id() -> String {
    format!(
        "{}-{} parallel={} debug={}",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION"),
        cfg!(feature = "parallel"),
        cfg!(debug_assertions)
    )
}
