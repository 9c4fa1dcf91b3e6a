//! Coarse-to-fine hierarchical contrastive pretraining.
//!
//! Images are recursively decomposed into `2^n` tiles; a random tile is
//! augmented into two views that a momentum-twin encoder pair embeds. The
//! InfoNCE loss contrasts the query against a memory bank of past keys from
//! which negatives too similar to the anchor have been pruned. Training
//! proceeds through stages of increasing granularity `n`.
//!
//! Numeric code is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks); the aliases below name the common instantiations.

pub mod contrastive;
pub mod decomposer;
pub mod embedder;
pub mod image;
pub mod probes;
pub mod scalar;
pub mod synthdata;

pub use scalar::Scalar;

pub type Encoder32 = embedder::Encoder<f32>;
pub type Encoder64 = embedder::Encoder<f64>;
pub type ModelPair32 = embedder::ModelPair<f32>;
pub type ModelPair64 = embedder::ModelPair<f64>;
pub type ParamSet32 = embedder::ParamSet<f32>;
pub type ParamSet64 = embedder::ParamSet<f64>;
pub type Trainer32 = contrastive::Trainer<f32>;
pub type Trainer64 = contrastive::Trainer<f64>;
pub type MemoryBank32 = contrastive::MemoryBank<f32>;
pub type Embedding32 = embedder::EmbeddingVector<f32>;
pub type Embedding64 = embedder::EmbeddingVector<f64>;
pub type Checkpoint32 = embedder::Checkpoint<f32>;
