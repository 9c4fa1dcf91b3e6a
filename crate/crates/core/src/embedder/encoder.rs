//! Desk-scale convolutional backbone and two-layer projection head.
//!
//! Backbone: stacked blocks of 3x3 stride-2 convolution (padding 1), batch
//! normalization and ReLU, followed by global average pooling. Activations are kept channel-major,
//! `[C, B, H, W]`, so every convolution is a single GEMM over an im2col
//! matrix covering the whole batch.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::{ParamSet, Tensor};
use super::EmbedError;
use crate::image::Image;
use crate::scalar::{gemm, Scalar};

const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;
/// Tensors per backbone block: conv weight, norm scale, norm shift,
/// running mean, running variance.
const PER_LAYER: usize = 5;
const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Square input side length; views are resized to this before encoding.
    pub input_size: usize,
    pub channel_widths: Vec<usize>,
    /// Backbone feature dimension; equals the last channel width.
    pub embedding_dim: usize,
    pub projection_hidden_dim: usize,
    pub projection_out_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            channel_widths: vec![16, 32, 64, 128],
            embedding_dim: 128,
            projection_hidden_dim: 128,
            projection_out_dim: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        let bad = |msg: String| Err(EmbedError::InvalidConfig(msg));
        if self.input_size == 0 {
            return bad("input_size must be >= 1".into());
        }
        if self.channel_widths.is_empty() || self.channel_widths.contains(&0) {
            return bad("channel_widths must be non-empty and positive".into());
        }
        if self.embedding_dim != *self.channel_widths.last().unwrap() {
            return bad(format!(
                "embedding_dim {} must equal the last channel width {}",
                self.embedding_dim,
                self.channel_widths.last().unwrap()
            ));
        }
        if self.projection_hidden_dim == 0 || self.projection_out_dim == 0 {
            return bad("projection dims must be >= 1".into());
        }
        Ok(())
    }
}

#[inline]
fn conv_out(extent: usize) -> usize {
    // (extent + 2*pad - kernel) / stride + 1 with pad 1, kernel 3, stride 2
    (extent - 1) / 2 + 1
}

/// Which statistics the normalization layers use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics of the current batch (training).
    Batch,
    /// Stored running statistics (inference); per-image deterministic.
    Running,
}

/// Activations retained from a backbone forward pass.
#[derive(Debug, Clone)]
pub struct BackboneCache<T> {
    batch: usize,
    mode: NormMode,
    cols: Vec<Vec<T>>,
    normed: Vec<Vec<T>>,
    inv_std: Vec<Vec<T>>,
    batch_mean: Vec<Vec<T>>,
    batch_var: Vec<Vec<T>>,
    acts: Vec<Vec<T>>,
}

/// Activations retained from a projection-head forward pass.
#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    batch: usize,
    features: Vec<T>,
    hidden: Vec<T>,
    norms: Vec<T>,
    outputs: Vec<T>,
}

impl<T: Scalar> HeadCache<T> {
    /// Normalized projections, `[B, out_dim]`.
    pub fn outputs(&self) -> &[T] {
        &self.outputs
    }
}

#[derive(Debug, Clone)]
pub struct Encoder<T> {
    cfg: EncoderConfig,
    /// Spatial side length entering each conv layer, plus the final one.
    sides: Vec<usize>,
    _scalar: std::marker::PhantomData<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(cfg: EncoderConfig) -> Result<Self, EmbedError> {
        cfg.validate()?;
        let mut sides = vec![cfg.input_size];
        for _ in &cfg.channel_widths {
            sides.push(conv_out(*sides.last().unwrap()));
        }
        Ok(Self {
            cfg,
            sides,
            _scalar: std::marker::PhantomData,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn layers(&self) -> usize {
        self.cfg.channel_widths.len()
    }

    fn in_channels(&self, layer: usize) -> usize {
        if layer == 0 {
            1
        } else {
            self.cfg.channel_widths[layer - 1]
        }
    }

    fn head_index(&self) -> usize {
        PER_LAYER * self.layers()
    }

    /// Parameter names and shapes in canonical order, all zero.
    pub fn zero_params(&self) -> ParamSet<T> {
        let mut tensors = Vec::new();
        for (l, &out) in self.cfg.channel_widths.iter().enumerate() {
            let cin = self.in_channels(l);
            let i = l + 1;
            tensors.push(Tensor::zeros(format!("backbone.conv{i}.weight"), vec![out, cin, KERNEL, KERNEL]));
            tensors.push(Tensor::zeros(format!("backbone.bn{i}.weight"), vec![out]));
            tensors.push(Tensor::zeros(format!("backbone.bn{i}.bias"), vec![out]));
            tensors.push(Tensor::zeros(format!("backbone.bn{i}.running_mean"), vec![out]));
            tensors.push(Tensor::zeros(format!("backbone.bn{i}.running_var"), vec![out]));
        }
        let (d, h, o) = (
            self.cfg.embedding_dim,
            self.cfg.projection_hidden_dim,
            self.cfg.projection_out_dim,
        );
        tensors.push(Tensor::zeros("head.fc1.weight", vec![h, d]));
        tensors.push(Tensor::zeros("head.fc1.bias", vec![h]));
        tensors.push(Tensor::zeros("head.fc2.weight", vec![o, h]));
        tensors.push(Tensor::zeros("head.fc2.bias", vec![o]));
        ParamSet::new(tensors)
    }

    /// He (fan-in) normal initialization for weights, zero biases, unit
    /// normalization scales, and running statistics of a standard normal.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet<T> {
        let mut params = self.zero_params();
        for t in params.tensors_mut() {
            if t.name.ends_with(".running_var") || (t.name.contains(".bn") && t.name.ends_with(".weight")) {
                t.data.iter_mut().for_each(|v| *v = T::one());
                continue;
            }
            if t.shape.len() < 2 {
                continue;
            }
            let fan_in: usize = t.shape[1..].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            for v in t.data.iter_mut() {
                *v = T::lit(normal.sample(rng));
            }
        }
        params
    }

    pub fn check_params(&self, params: &ParamSet<T>) -> Result<(), EmbedError> {
        if !params.same_layout(&self.zero_params()) {
            return Err(EmbedError::ParamMismatch(
                "parameter set does not match the encoder layout".into(),
            ));
        }
        Ok(())
    }

    /// Packs images into a `[1, B, S, S]` tensor, centering intensities.
    fn pack(&self, images: &[&Image]) -> Result<Vec<T>, EmbedError> {
        let s = self.cfg.input_size;
        let mut out = Vec::with_capacity(images.len() * s * s);
        for img in images {
            if img.height() != s || img.width() != s {
                return Err(EmbedError::ShapeMismatch {
                    expected: (s, s),
                    found: (img.height(), img.width()),
                });
            }
            out.extend(img.pixels().iter().map(|&p| T::of_f32(p - 0.5)));
        }
        Ok(out)
    }

    /// Backbone features `[B, D]` plus the cache needed for backprop.
    pub fn backbone_forward(
        &self,
        params: &ParamSet<T>,
        images: &[&Image],
        mode: NormMode,
    ) -> Result<(Vec<T>, BackboneCache<T>), EmbedError> {
        self.check_params(params)?;
        let input = self.pack(images)?;
        Ok(self.backbone_forward_tensor(params, input, images.len(), mode))
    }

    /// Like [`backbone_forward`](Self::backbone_forward) but on an already
    /// centered `[1, B, S, S]` tensor.
    pub fn backbone_forward_tensor(
        &self,
        params: &ParamSet<T>,
        input: Vec<T>,
        batch: usize,
        mode: NormMode,
    ) -> (Vec<T>, BackboneCache<T>) {
        let mut cache = BackboneCache {
            batch,
            mode,
            cols: Vec::with_capacity(self.layers()),
            normed: Vec::with_capacity(self.layers()),
            inv_std: Vec::with_capacity(self.layers()),
            batch_mean: Vec::with_capacity(self.layers()),
            batch_var: Vec::with_capacity(self.layers()),
            acts: Vec::with_capacity(self.layers()),
        };
        let mut current = input;
        for l in 0..self.layers() {
            let cin = self.in_channels(l);
            let cout = self.cfg.channel_widths[l];
            let (side, out_side) = (self.sides[l], self.sides[l + 1]);
            let cols = im2col(&current, cin, batch, side, out_side);
            let n = batch * out_side * out_side;
            let mut out = vec![T::zero(); cout * n];
            let base = PER_LAYER * l;
            gemm(false, false, cout, cin * TAPS, n, T::one(), params.at(base), &cols, T::zero(), &mut out);
            let (gamma, beta) = (params.at(base + 1), params.at(base + 2));
            let (run_mean, run_var) = (params.at(base + 3), params.at(base + 4));
            let mut normed = vec![T::zero(); cout * n];
            let mut inv_std = Vec::with_capacity(cout);
            let mut means = Vec::with_capacity(cout);
            let mut vars = Vec::with_capacity(cout);
            let inv_n = T::one() / T::lit(n as f64);
            for (c, (row, nrow)) in out.chunks_mut(n).zip(normed.chunks_mut(n)).enumerate() {
                let (mean, var) = match mode {
                    NormMode::Batch => {
                        let mut s = T::zero();
                        for v in row.iter() {
                            s += *v;
                        }
                        let mean = s * inv_n;
                        let mut ss = T::zero();
                        for v in row.iter() {
                            let d = *v - mean;
                            ss += d * d;
                        }
                        (mean, ss * inv_n)
                    }
                    NormMode::Running => (run_mean[c], run_var[c]),
                };
                let is = T::one() / (var + T::lit(BN_EPS)).sqrt();
                for (v, h) in row.iter_mut().zip(nrow.iter_mut()) {
                    *h = (*v - mean) * is;
                    let y = gamma[c] * *h + beta[c];
                    *v = if y > T::zero() { y } else { T::zero() };
                }
                inv_std.push(is);
                means.push(mean);
                vars.push(var);
            }
            cache.cols.push(cols);
            cache.normed.push(normed);
            cache.inv_std.push(inv_std);
            cache.batch_mean.push(means);
            cache.batch_var.push(vars);
            cache.acts.push(out.clone());
            current = out;
        }
        let features = self.global_pool(&current, batch);
        (features, cache)
    }

    /// Folds the batch statistics of a [`NormMode::Batch`] pass into the
    /// running statistics: `r <- (1 - mom) r + mom * batch`, with the
    /// unbiased variance.
    pub fn update_running_stats(&self, params: &mut ParamSet<T>, cache: &BackboneCache<T>, momentum: T) {
        if cache.mode != NormMode::Batch {
            return;
        }
        for l in 0..self.layers() {
            let side = self.sides[l + 1];
            let n = cache.batch * side * side;
            let unbias = if n > 1 { T::lit(n as f64 / (n - 1) as f64) } else { T::one() };
            let base = PER_LAYER * l;
            for (r, m) in params.at_mut(base + 3).iter_mut().zip(&cache.batch_mean[l]) {
                *r += momentum * (*m - *r);
            }
            for (r, v) in params.at_mut(base + 4).iter_mut().zip(&cache.batch_var[l]) {
                *r += momentum * (*v * unbias - *r);
            }
        }
    }

    fn global_pool(&self, act: &[T], batch: usize) -> Vec<T> {
        let d = self.cfg.embedding_dim;
        let side = *self.sides.last().unwrap();
        let p = side * side;
        let inv = T::one() / T::lit(p as f64);
        let mut features = vec![T::zero(); batch * d];
        for c in 0..d {
            for b in 0..batch {
                let start = (c * batch + b) * p;
                let mut s = T::zero();
                for v in &act[start..start + p] {
                    s += *v;
                }
                features[b * d + c] = s * inv;
            }
        }
        features
    }

    /// Last feature map before pooling, `[C, B, H, W]` (for inspection).
    pub fn last_feature_map<'a>(&self, cache: &'a BackboneCache<T>) -> (&'a [T], usize) {
        (cache.acts.last().unwrap(), *self.sides.last().unwrap())
    }

    /// Accumulates backbone parameter gradients for `d_features` (`[B, D]`).
    /// Running statistics receive no gradient.
    pub fn backbone_backward(
        &self,
        params: &ParamSet<T>,
        cache: &BackboneCache<T>,
        d_features: &[T],
        grads: &mut ParamSet<T>,
    ) {
        let batch = cache.batch;
        let d = self.cfg.embedding_dim;
        let side = *self.sides.last().unwrap();
        let p = side * side;
        let inv = T::one() / T::lit(p as f64);
        let mut d_act = vec![T::zero(); d * batch * p];
        for c in 0..d {
            for b in 0..batch {
                let g = d_features[b * d + c] * inv;
                let start = (c * batch + b) * p;
                d_act[start..start + p].iter_mut().for_each(|v| *v = g);
            }
        }
        for l in (0..self.layers()).rev() {
            let cin = self.in_channels(l);
            let cout = self.cfg.channel_widths[l];
            let (in_side, out_side) = (self.sides[l], self.sides[l + 1]);
            let n = batch * out_side * out_side;
            let base = PER_LAYER * l;
            let act = &cache.acts[l];
            for (g, a) in d_act.iter_mut().zip(act) {
                if *a <= T::zero() {
                    *g = T::zero();
                }
            }
            // d_act now holds the gradient w.r.t. the normalization output
            let gamma = params.at(base + 1);
            let mut d_gamma = vec![T::zero(); cout];
            let mut d_beta = vec![T::zero(); cout];
            let inv_n = T::one() / T::lit(n as f64);
            for (c, (dy, xh)) in d_act.chunks_mut(n).zip(cache.normed[l].chunks(n)).enumerate() {
                let mut sum_dy = T::zero();
                let mut sum_dy_xh = T::zero();
                for (g, h) in dy.iter().zip(xh) {
                    sum_dy += *g;
                    sum_dy_xh += *g * *h;
                }
                d_gamma[c] = sum_dy_xh;
                d_beta[c] = sum_dy;
                let scale = gamma[c] * cache.inv_std[l][c];
                match cache.mode {
                    NormMode::Batch => {
                        let (mean_dy, mean_dy_xh) = (sum_dy * inv_n, sum_dy_xh * inv_n);
                        for (g, h) in dy.iter_mut().zip(xh) {
                            *g = scale * (*g - mean_dy - *h * mean_dy_xh);
                        }
                    }
                    NormMode::Running => dy.iter_mut().for_each(|g| *g *= scale),
                }
            }
            for (acc, v) in grads.at_mut(base + 1).iter_mut().zip(&d_gamma) {
                *acc += *v;
            }
            for (acc, v) in grads.at_mut(base + 2).iter_mut().zip(&d_beta) {
                *acc += *v;
            }
            let k = cin * TAPS;
            gemm(false, true, cout, n, k, T::one(), &d_act, &cache.cols[l], T::one(), grads.at_mut(base));
            if l > 0 {
                let mut d_cols = vec![T::zero(); k * n];
                gemm(true, false, k, cout, n, T::one(), params.at(base), &d_act, T::zero(), &mut d_cols);
                d_act = col2im(&d_cols, cin, batch, in_side, out_side);
            }
        }
    }

    /// Projection head: linear, ReLU, linear, row-wise L2 normalization.
    pub fn head_forward(&self, params: &ParamSet<T>, features: &[T], batch: usize) -> HeadCache<T> {
        let (d, h, o) = (
            self.cfg.embedding_dim,
            self.cfg.projection_hidden_dim,
            self.cfg.projection_out_dim,
        );
        let hi = self.head_index();
        let mut hidden = vec![T::zero(); batch * h];
        gemm(false, true, batch, d, h, T::one(), features, params.at(hi), T::zero(), &mut hidden);
        let b1 = params.at(hi + 1);
        for row in hidden.chunks_mut(h) {
            for (v, b) in row.iter_mut().zip(b1) {
                let x = *v + *b;
                *v = if x > T::zero() { x } else { T::zero() };
            }
        }
        let mut outputs = vec![T::zero(); batch * o];
        gemm(false, true, batch, h, o, T::one(), &hidden, params.at(hi + 2), T::zero(), &mut outputs);
        let b2 = params.at(hi + 3);
        let mut norms = Vec::with_capacity(batch);
        for row in outputs.chunks_mut(o) {
            for (v, b) in row.iter_mut().zip(b2) {
                *v += *b;
            }
            let norm = crate::scalar::l2_norm(row).max(T::lit(1e-12));
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        HeadCache {
            batch,
            features: features.to_vec(),
            hidden,
            norms,
            outputs,
        }
    }

    /// Backprop through the head given the gradient w.r.t. the normalized
    /// outputs; accumulates head gradients and returns `d_features`.
    pub fn head_backward(
        &self,
        params: &ParamSet<T>,
        cache: &HeadCache<T>,
        d_outputs: &[T],
        grads: &mut ParamSet<T>,
    ) -> Vec<T> {
        let batch = cache.batch;
        let (d, h, o) = (
            self.cfg.embedding_dim,
            self.cfg.projection_hidden_dim,
            self.cfg.projection_out_dim,
        );
        let hi = self.head_index();
        // through normalization: dz = (dq - q (q . dq)) / |z|
        let mut dz = vec![T::zero(); batch * o];
        for b in 0..batch {
            let q = &cache.outputs[b * o..(b + 1) * o];
            let dq = &d_outputs[b * o..(b + 1) * o];
            let proj = crate::scalar::dot(q, dq);
            let inv = T::one() / cache.norms[b];
            for i in 0..o {
                dz[b * o + i] = (dq[i] - q[i] * proj) * inv;
            }
        }
        gemm(true, false, o, batch, h, T::one(), &dz, &cache.hidden, T::one(), grads.at_mut(hi + 2));
        add_column_sums(&dz, o, grads.at_mut(hi + 3));
        let mut dh = vec![T::zero(); batch * h];
        gemm(false, false, batch, o, h, T::one(), &dz, params.at(hi + 2), T::zero(), &mut dh);
        for (g, a) in dh.iter_mut().zip(&cache.hidden) {
            if *a <= T::zero() {
                *g = T::zero();
            }
        }
        gemm(true, false, h, batch, d, T::one(), &dh, &cache.features, T::one(), grads.at_mut(hi));
        add_column_sums(&dh, h, grads.at_mut(hi + 1));
        let mut d_features = vec![T::zero(); batch * d];
        gemm(false, false, batch, h, d, T::one(), &dh, params.at(hi), T::zero(), &mut d_features);
        d_features
    }

    /// Inference-mode backbone features for a batch; each row depends only
    /// on its own image.
    pub fn features(&self, params: &ParamSet<T>, images: &[&Image]) -> Result<Vec<T>, EmbedError> {
        Ok(self.backbone_forward(params, images, NormMode::Running)?.0)
    }

    /// Normalized projections for a batch.
    pub fn project(&self, params: &ParamSet<T>, images: &[&Image], mode: NormMode) -> Result<Vec<T>, EmbedError> {
        let (features, _) = self.backbone_forward(params, images, mode)?;
        Ok(self.head_forward(params, &features, images.len()).outputs)
    }
}

fn add_column_sums<T: Scalar>(m: &[T], cols: usize, into: &mut [T]) {
    for row in m.chunks(cols) {
        for (acc, v) in into.iter_mut().zip(row) {
            *acc += *v;
        }
    }
}

/// `[C, B, S, S]` -> `[C*9, B*So*So]` for 3x3 stride-2 pad-1 convolution.
fn im2col<T: Scalar>(input: &[T], channels: usize, batch: usize, side: usize, out_side: usize) -> Vec<T> {
    let n = batch * out_side * out_side;
    let mut cols = vec![T::zero(); channels * TAPS * n];
    for c in 0..channels {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * TAPS + ky * KERNEL + kx) * n;
                for b in 0..batch {
                    let plane = &input[(c * batch + b) * side * side..][..side * side];
                    for oy in 0..out_side {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= side as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * side..][..side];
                        let dst = &mut cols[row + (b * out_side + oy) * out_side..][..out_side];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix >= 0 && ix < side as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im<T: Scalar>(cols: &[T], channels: usize, batch: usize, side: usize, out_side: usize) -> Vec<T> {
    let n = batch * out_side * out_side;
    let mut out = vec![T::zero(); channels * batch * side * side];
    for c in 0..channels {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * TAPS + ky * KERNEL + kx) * n;
                for b in 0..batch {
                    let plane_start = (c * batch + b) * side * side;
                    for oy in 0..out_side {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= side as isize {
                            continue;
                        }
                        let src = &cols[row + (b * out_side + oy) * out_side..][..out_side];
                        let dst_row = plane_start + iy as usize * side;
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix >= 0 && ix < side as isize {
                                out[dst_row + ix as usize] += *s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}
