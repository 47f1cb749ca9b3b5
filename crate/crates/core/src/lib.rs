pub mod architecture;
pub mod attention;
pub mod error;
pub mod harness;
pub mod neuron;
pub mod nn;
pub mod pretrain;
pub mod profiler;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
