//! Cover song identification: CQT features, a Conformer encoder with
//! attention time pooling, joint focal/center/triplet training with
//! coarse-to-fine chunk alignment, and cosine-similarity retrieval.
//!
//! Numeric code is generic over [`scalar::Scalar`]; training and inference
//! use `f32`, gradient checks use `f64`.

pub mod align;
pub mod audio;
pub mod augment;
pub(crate) mod binio;
pub mod encoder;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod pooling;
pub mod retrieval;
pub mod scalar;
pub mod synth;
pub mod trainer;

pub use scalar::Scalar;

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Graph32 = nn::Graph<f32>;
pub type Graph64 = nn::Graph<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
pub type CenterBank32 = losses::CenterBank<f32>;
pub type CenterBank64 = losses::CenterBank<f64>;
