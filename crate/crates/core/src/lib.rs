//! Semantic vision transformer toolkit.
//!
//! Images are split into segments by an external or reference segmenter,
//! each segment is cropped and resized into a fixed-size patch, and its
//! normalized bounding box and pixel count drive the positional embedding.
//! The crate also ships a grid-patch ViT baseline, segment-level
//! augmentation, token-gradient attribution, and the training harness
//! behind the `svit` command line tool.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below pin the two
//! precisions used in practice.

pub mod augment;
pub mod error;
pub mod explain;
pub mod harness;
pub mod model;
pub mod scalar;
pub mod segmenter;
pub mod tensor;
pub mod tokenizer;

pub use error::{Result, SvitError};
pub use scalar::Scalar;

/// Single-precision tensor used for training.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor used for gradient checks.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type TokenizedImage32 = tokenizer::TokenizedImage<f32>;
pub type TokenizedImage64 = tokenizer::TokenizedImage<f64>;
