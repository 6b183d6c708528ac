//! Dense tensors, the gradient tape, and the layer kernels the network uses.

mod init;
pub(crate) mod kernels;
mod tape;
#[allow(clippy::module_inception)]
mod tensor;

pub use init::orthogonal;
pub(crate) use init::orthogonal_with;
pub use tape::{BatchStats, Normalization, Tape, Var};
pub use tensor::Tensor;
