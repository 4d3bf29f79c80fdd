//! Minimal CPU tensor substrate: channels-last 3D convolutions, batch
//! normalization, linear layers and AdamW, each with a hand-written backward
//! pass. Everything is generic over [`Scalar`] so the same code runs in `f32`
//! for training and in `f64` for gradient checks.

mod archive;
mod conv;
mod linear;
mod norm;
mod optim;
mod scalar;
mod tensor;

pub use archive::Archive;
pub use conv::Conv3d;
pub use linear::{relu_in_place, Linear, Mlp};
pub use norm::BatchNorm;
pub use optim::{clip_grad_norm, AdamW, WarmupCosine};
pub use scalar::{gemm, Op, Scalar};
pub use tensor::{join, Matrix, Module, Param, Volume};
