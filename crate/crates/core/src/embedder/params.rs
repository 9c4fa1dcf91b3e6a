use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// A named, row-major parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![T::zero(); len],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Running statistics are state, not trainable parameters.
    pub fn is_buffer(&self) -> bool {
        self.name.ends_with(".running_mean") || self.name.ends_with(".running_var")
    }
}

/// Ordered parameter collection. Order is part of the model definition and
/// of the checkpoint layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    tensors: Vec<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new(tensors: Vec<Tensor<T>>) -> Self {
        Self { tensors }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub(crate) fn at(&self, idx: usize) -> &[T] {
        &self.tensors[idx].data
    }

    pub(crate) fn at_mut(&mut self, idx: usize) -> &mut [T] {
        &mut self.tensors[idx].data
    }

    pub fn specs(&self) -> Vec<TensorSpec> {
        self.tensors
            .iter()
            .map(|t| TensorSpec {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect()
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    /// Largest absolute difference over trainable tensors only.
    pub fn max_abs_param_diff(&self, other: &Self) -> Option<T> {
        if !self.same_layout(other) {
            return None;
        }
        let mut m = T::zero();
        for (a, b) in self.tensors.iter().zip(&other.tensors).filter(|(a, _)| !a.is_buffer()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                m = m.max((*x - *y).abs());
            }
        }
        Some(m)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Largest absolute elementwise difference; `None` when layouts differ.
    pub fn max_abs_diff(&self, other: &Self) -> Option<T> {
        if !self.same_layout(other) {
            return None;
        }
        let mut m = T::zero();
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            for (x, y) in a.data.iter().zip(&b.data) {
                m = m.max((*x - *y).abs());
            }
        }
        Some(m)
    }

    /// Euclidean distance over all parameters; `None` when layouts differ.
    pub fn l2_distance(&self, other: &Self) -> Option<T> {
        if !self.same_layout(other) {
            return None;
        }
        let mut acc = T::zero();
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            for (x, y) in a.data.iter().zip(&b.data) {
                let d = *x - *y;
                acc += d * d;
            }
        }
        Some(acc.sqrt())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}
