//! Query/key twin networks, EMA tracking and checkpoint persistence.

mod checkpoint;
mod encoder;
mod params;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use encoder::{BackboneCache, Encoder, EncoderConfig, HeadCache, NormMode};
pub use params::{ParamSet, Tensor, TensorSpec};

use thiserror::Error;

use crate::image::Image;
use crate::scalar::{dot, l2_norm, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum EmbedError {
    #[error("input is {found:?}, encoder expects {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("vector has dimension {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
    #[error("cannot normalize a zero-norm vector")]
    ZeroNorm,
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
}

/// A D-dimensional embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector<T>(Vec<T>);

impl<T: Scalar> EmbeddingVector<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> T {
        l2_norm(&self.0)
    }

    pub fn dot(&self, other: &Self) -> T {
        dot(&self.0, &other.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn normalized(&self) -> Result<Self, EmbedError> {
        let n = self.norm();
        if !(n > T::zero()) {
            return Err(EmbedError::ZeroNorm);
        }
        Ok(Self(self.0.iter().map(|v| *v / n).collect()))
    }
}

impl<T> From<Vec<T>> for EmbeddingVector<T> {
    fn from(v: Vec<T>) -> Self {
        Self(v)
    }
}

/// Backbone feature of a single image (global-average-pooled).
pub fn forward_backbone<T: Scalar>(
    encoder: &Encoder<T>,
    params: &ParamSet<T>,
    img: &Image,
) -> Result<EmbeddingVector<T>, EmbedError> {
    Ok(EmbeddingVector(encoder.features(params, &[img])?))
}

/// Projection-head output for one backbone feature, L2-normalized.
pub fn forward_projection<T: Scalar>(
    encoder: &Encoder<T>,
    params: &ParamSet<T>,
    feat: &EmbeddingVector<T>,
) -> Result<EmbeddingVector<T>, EmbedError> {
    let d = encoder.config().embedding_dim;
    if feat.dim() != d {
        return Err(EmbedError::DimensionMismatch {
            expected: d,
            found: feat.dim(),
        });
    }
    encoder.check_params(params)?;
    let cache = encoder.head_forward(params, feat.values(), 1);
    Ok(EmbeddingVector(cache.outputs().to_vec()))
}

/// Gradient-trained query parameters and their EMA-tracked key twin.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPair<T> {
    pub query: ParamSet<T>,
    pub key: ParamSet<T>,
    pub momentum: T,
}

impl<T: Scalar> ModelPair<T> {
    /// Key parameters start as an exact copy of the query parameters.
    pub fn from_query(query: ParamSet<T>, momentum: T) -> Self {
        Self {
            key: query.clone(),
            query,
            momentum,
        }
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        if !self.query.same_layout(&self.key) {
            return Err(EmbedError::ParamMismatch(
                "query and key parameter sets differ in names or shapes".into(),
            ));
        }
        if !(self.momentum >= T::zero() && self.momentum <= T::one()) {
            return Err(EmbedError::ParamMismatch(format!(
                "momentum {} outside [0, 1]",
                self.momentum
            )));
        }
        Ok(())
    }

    /// `key <- m * key + (1 - m) * query` for every parameter, evaluated as
    /// `key + (1 - m) * (query - key)` so equal twins are an exact fixed point.
    pub fn ema_update(&mut self) -> Result<(), EmbedError> {
        self.validate()?;
        let one_minus = T::one() - self.momentum;
        for (k, q) in self.key.tensors_mut().iter_mut().zip(self.query.tensors()) {
            for (kv, qv) in k.data.iter_mut().zip(&q.data) {
                *kv += one_minus * (*qv - *kv);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            input_size: 16,
            channel_widths: vec![4, 8],
            embedding_dim: 8,
            projection_hidden_dim: 8,
            projection_out_dim: 6,
        }
    }

    fn pair(seed: u64, momentum: f64) -> ModelPair<f64> {
        let enc = Encoder::<f64>::new(cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let query = enc.init_params(&mut rng);
        let key = enc.init_params(&mut rng);
        ModelPair { query, key, momentum }
    }

    #[test]
    fn ema_with_unit_momentum_is_identity() {
        let mut p = pair(1, 1.0);
        let before = p.key.clone();
        p.ema_update().unwrap();
        assert_eq!(p.key, before);
    }

    #[test]
    fn ema_fixed_point_when_twins_agree() {
        let mut p = pair(2, 0.7);
        p.key = p.query.clone();
        let before = p.key.clone();
        p.ema_update().unwrap();
        assert_eq!(p.key, before);
    }

    #[test]
    fn ema_distance_decays_geometrically() {
        let m = 0.9;
        let mut p = pair(3, m);
        let query = p.query.clone();
        let d0 = p.key.l2_distance(&query).unwrap();
        // scalar recursion: d_{t+1} = m * d_t
        let mut expected = d0;
        for _ in 0..10 {
            p.ema_update().unwrap();
            expected *= m;
            let d = p.key.l2_distance(&query).unwrap();
            assert!((d - expected).abs() < 1e-6, "{d} vs {expected}");
        }
        assert_eq!(p.query, query);
    }

    #[test]
    fn ema_rejects_mismatched_layouts() {
        let mut p = pair(4, 0.9);
        p.key.tensors_mut()[0].shape = vec![1];
        assert!(matches!(p.ema_update(), Err(EmbedError::ParamMismatch(_))));
    }

    #[test]
    fn projection_rejects_wrong_dimension() {
        let enc = Encoder::<f64>::new(cfg()).unwrap();
        let params = enc.zero_params();
        let feat = EmbeddingVector::new(vec![1.0; 3]);
        assert_eq!(
            forward_projection(&enc, &params, &feat),
            Err(EmbedError::DimensionMismatch { expected: 8, found: 3 })
        );
    }

    #[test]
    fn zero_vector_cannot_be_normalized() {
        assert_eq!(
            EmbeddingVector::new(vec![0.0f64; 4]).normalized(),
            Err(EmbedError::ZeroNorm)
        );
    }
}
