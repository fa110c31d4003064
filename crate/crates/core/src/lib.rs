//! Adapter-tuned vision-transformer segmentation engine.
//!
//! Everything runs on a small define-by-run reverse-mode autodiff core
//! ([`tensor`]) that is generic over the scalar type. The model stack —
//! patch-embedding ViT encoder ([`encoder`]), bottleneck adapter layers
//! ([`adapter`]), prompt-free mask decoder ([`decoder`]) — composes into a
//! [`model::ModelAssembly`] whose encoder is frozen while adapters and
//! decoder train ([`train`]). Binary segmentation quality is scored by
//! [`metrics`]; [`data`] provides synthetic datasets and PPM/PGM ingestion.

pub mod adapter;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::TensorError;
pub use scalar::Scalar;

/// Dense `f64` tensor — the scalar type used by the training pipeline.
pub type Tensor = tensor::TensorBase<f64>;
/// Single-precision instantiation of the same engine.
pub type Tensor32 = tensor::TensorBase<f32>;
