//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value is an [`ndarray::Array2<f64>`]; vectors are `1 × n` rows and
//! scalars are `1 × 1`. A [`Graph`] records operations as they are applied
//! and [`Graph::backward`] walks the tape in reverse to accumulate gradients.
//! The op set is the one needed by the speaker models in this workspace:
//! dense layers, time-delay context unfolding, pooling, normalisation,
//! strided 1-D (de)convolution over flattened channel-major rows, batch
//! normalisation, and a margin softmax loss. Anything more specialised can
//! be plugged in through [`CustomOp`].

mod graph;
mod init;
mod ops;
mod optim;
mod params;

pub use graph::{ConvGeom, CustomOp, Gradients, Graph, Var};
pub use init::{he_uniform, xavier_uniform};
pub use optim::Adam;
pub use params::ParamStore;

/// Dense matrix type used throughout.
pub type Tensor = ndarray::Array2<f64>;
