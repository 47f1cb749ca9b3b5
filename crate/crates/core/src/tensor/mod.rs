//! Dense and spike tensors, bit-packed spike kernels, and the autodiff tape.

mod dense;
pub mod kernels;
mod spike;
mod tape;

pub use dense::{matmul_dense, DenseTensor};
pub use spike::{
    downsample_any, event_accumulations, matmul_accum_spike, matmul_spike, matmul_spike_accum,
    upsample_nearest, AccumTensor, SpikeTensor,
};
pub use tape::{BnBatchStats, BnLayout, BnStats, CustomOp, Gradients, Tape, Var};
