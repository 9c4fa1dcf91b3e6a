use crate::embedder::EmbeddingVector;
use crate::scalar::{l2_norm, Scalar};

use super::ContrastError;

/// Norm deviation beyond which an enqueued key is re-normalized.
const UNIT_TOLERANCE: f64 = 1e-5;

/// Fixed-capacity FIFO queue of unit-norm negative keys, stored as a flat
/// ring buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank<T> {
    capacity: usize,
    dim: usize,
    data: Vec<T>,
    len: usize,
    write_cursor: usize,
    renormalized: usize,
}

impl<T: Scalar> MemoryBank<T> {
    pub fn new(capacity: usize, dim: usize) -> Self {
        assert!(capacity >= 1 && dim >= 1, "bank capacity and dim must be positive");
        Self {
            capacity,
            dim,
            data: Vec::new(),
            len: 0,
            write_cursor: 0,
            renormalized: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len == self.capacity
    }

    /// Count of keys that arrived off the unit sphere and were re-normalized.
    pub fn renormalized_count(&self) -> usize {
        self.renormalized
    }

    pub fn clear(&mut self) {
        self.data.clear();
        self.len = 0;
        self.write_cursor = 0;
    }

    /// Storage slot `i`, in physical (not FIFO) order.
    pub(crate) fn slot(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Row-major `[len, dim]` storage in physical order; the loss is
    /// invariant to negative ordering so training reads this directly.
    pub(crate) fn raw(&self) -> &[T] {
        &self.data[..self.len * self.dim]
    }

    /// Entries from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &[T]> + '_ {
        let start = if self.is_full() { self.write_cursor } else { 0 };
        (0..self.len).map(move |i| self.slot((start + i) % self.len))
    }

    pub fn entries(&self) -> Vec<EmbeddingVector<T>> {
        self.iter().map(|e| EmbeddingVector::new(e.to_vec())).collect()
    }

    /// Appends `k`, evicting the oldest entry when full. Keys whose norm is
    /// off by more than 1e-5 are re-normalized and counted.
    pub fn enqueue(&mut self, k: &[T]) -> Result<(), ContrastError> {
        if k.len() != self.dim {
            return Err(ContrastError::DimensionMismatch {
                expected: self.dim,
                found: k.len(),
            });
        }
        let norm = l2_norm(k);
        if !(norm > T::zero()) || !norm.is_finite() {
            return Err(ContrastError::Embed(crate::embedder::EmbedError::ZeroNorm));
        }
        let needs_fix = (norm - T::one()).abs() > T::lit(UNIT_TOLERANCE);
        if needs_fix {
            self.renormalized += 1;
        }
        let write = |dst: &mut [T]| {
            for (d, v) in dst.iter_mut().zip(k) {
                *d = if needs_fix { *v / norm } else { *v };
            }
        };
        if self.len < self.capacity {
            let start = self.data.len();
            self.data.resize(start + self.dim, T::zero());
            write(&mut self.data[start..]);
            self.len += 1;
            self.write_cursor = self.len % self.capacity;
        } else {
            let start = self.write_cursor * self.dim;
            write(&mut self.data[start..start + self.dim]);
            self.write_cursor = (self.write_cursor + 1) % self.capacity;
        }
        Ok(())
    }
}
