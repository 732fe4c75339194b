//! Slice-level forward/backward kernels. All tensors are contiguous NCHW.

pub mod conv;
pub mod norm;
pub mod pool;
