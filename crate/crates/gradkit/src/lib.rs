//! Reverse-mode differentiation for layered networks.
//!
//! A network is a [`NetworkSpec`] (an ordered list of [`LayerSpec`]s) plus a
//! [`NetworkParams`] container holding the learnable tensors. [`forward`]
//! records a [`Tape`] of per-layer caches; [`backward`] replays it in reverse
//! and returns parameter gradients together with the gradient with respect to
//! the network input, so networks can be chained by hand.
//!
//! All kernels are generic over [`Scalar`], which is implemented for `f32`
//! (storage and training) and `f64` (gradient checking).

mod adam;
mod checkpoint;
mod error;
pub mod gradcheck;
mod kernels;
mod loss;
mod network;
mod scalar;
mod spec;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use error::{GradError, Result};
pub use kernels::layer_norm;
pub use loss::{cross_entropy_rows, cross_entropy_softmax, softmax};
pub use network::{backward, forward, infer, Gradients, Mode, Tape};
pub use scalar::Scalar;
pub use spec::{LayerSpec, NetworkParams, NetworkSpec, Padding, LAYER_NORM_EPS};
pub use tensor::Tensor;
