//! Token freezing and reusing (ToFe) for vision transformers.
//!
//! The crate is generic over the scalar type; [`Tensor32`] and friends are
//! the `f32` instantiations used for training and inference, the `f64`
//! aliases back the gradient-check and equivalence suites.

pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod graph;
pub mod infer;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod tofe;
pub mod train;
pub mod vit;

pub use error::Error;
pub use graph::{Graph, Var};
pub use nn::{LayerNorm, Linear, Module};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::{rel_diff, Tensor, TensorError};
pub use vit::{Backbone, BackboneParams, BlockParams, ModelConfig};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Backbone32 = Backbone<f32>;
pub type Backbone64 = Backbone<f64>;
