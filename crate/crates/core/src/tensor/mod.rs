//! Dense FP32 matrices, binary16 conversion, seeded randomness and the
//! on-disk tensor container.

pub mod container;
pub mod half;
mod matrix;
pub mod rng;

pub use container::{read_container, write_container, TensorContainer};
pub use half::{to_half_round, Half};
pub(crate) use matrix::reduce_lanes;
pub use matrix::{dot, Matrix};
pub use rng::SeededRng;
