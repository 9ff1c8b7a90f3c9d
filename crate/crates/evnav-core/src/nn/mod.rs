//! Sparse neural network layers: submanifold convolution, max pooling,
//! batch normalization, activations, fully connected layers, and the
//! recorded computation graph providing reverse-mode gradients.

pub mod gradcheck;
pub mod init;
pub mod ops;
pub mod params;
pub mod rulebook;
pub mod tape;

pub use init::he_normal;
pub use params::{ParamRef, ParamStore, ParamTensor};
pub use rulebook::{
    build_pool_rulebook, build_submanifold_rulebook, ConvRulebook, PoolRulebook, KERNEL_OFFSETS,
};
pub use tape::{Grad, Gradients, NodeId, Tape, Value};
