//! Small dense-tensor toolkit: value-level kernels, a reverse-mode tape,
//! Adam, and seeded randomness. Everything is `f64` and CPU-only; the models
//! in this crate are small enough that clarity beats throughput.

mod adam;
mod rng;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use rng::{SeededRng, Stream};
pub use tape::{numerical_gradient, Gradients, Tape, Var};
pub use tensor::{
    broadcast_shape, broadcast_zip, matmul, reduce_to_shape, softmax_rows, sum_axis, Tensor,
};
