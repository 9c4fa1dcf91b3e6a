//! Frozen-feature evaluation of an encoder: landmark locality, part/whole
//! compositionality, dense correspondence, multi-resolution identity and a
//! few-shot linear probe.
//!
//! Every probe works through [`PatchEmbedder`], so the network can be swapped
//! for an oracle (one-hot, constant) in tests. The network-backed embedder
//! uses pooled backbone features, not projection-head outputs.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decomposer::PatchRegion;
use crate::embedder::{Checkpoint, EmbedError, Encoder, ParamSet};
use crate::image::{add_noise, circular_shift, crop, resize, Image, ImageError};
use crate::scalar::Scalar;
use crate::synthdata::LandmarkAnnotation;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("corpus has no landmark annotations")]
    NoAnnotations,
    #[error("split arity {0} not in {{2, 3, 4}}")]
    InvalidArity(usize),
    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),
    #[error("patch size {size} exceeds image bounds {height}x{width}")]
    LevelOutOfBounds { size: usize, height: usize, width: usize },
    #[error("class {class} has {have} examples, need at least {need}")]
    InsufficientExamples { class: usize, have: usize, need: usize },
    #[error("invalid probe argument: {0}")]
    InvalidArgument(String),
    #[error("annotation references unknown image {0}")]
    UnknownImage(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Maps image patches to feature vectors.
pub trait PatchEmbedder {
    fn embed(&self, patches: &[Image]) -> Result<Vec<Vec<f64>>, ProbeError>;
}

/// Pooled backbone features of an encoder with fixed parameters. Patches are
/// resized to the encoder input size first.
pub struct BackboneEmbedder<T> {
    encoder: Encoder<T>,
    params: ParamSet<T>,
    batch: usize,
}

impl<T: Scalar> BackboneEmbedder<T> {
    pub fn new(encoder: Encoder<T>, params: ParamSet<T>) -> Result<Self, ProbeError> {
        encoder.check_params(&params)?;
        Ok(Self {
            encoder,
            params,
            batch: 64,
        })
    }

    /// Uses the gradient-trained (query) parameters of a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self, ProbeError> {
        let encoder = Encoder::new(ckpt.config.encoder.clone())?;
        Self::new(encoder, ckpt.pair.query.clone())
    }

    pub fn encoder(&self) -> &Encoder<T> {
        &self.encoder
    }
}

impl<T: Scalar> PatchEmbedder for BackboneEmbedder<T> {
    fn embed(&self, patches: &[Image]) -> Result<Vec<Vec<f64>>, ProbeError> {
        let s = self.encoder.config().input_size;
        let d = self.encoder.config().embedding_dim;
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(self.batch) {
            let resized: Vec<Image> = chunk
                .iter()
                .map(|p| if p.height() == s && p.width() == s { Ok(p.clone()) } else { resize(p, s, s) })
                .collect::<Result<_, _>>()?;
            let refs: Vec<&Image> = resized.iter().collect();
            let feats = self.encoder.features(&self.params, &refs)?;
            out.extend(feats.chunks_exact(d).map(|f| f.iter().map(|v| v.as_f64()).collect()));
        }
        Ok(out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity clamped to `[-1, 1]`; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = norm(a) * norm(b);
    if n > 0.0 {
        (dot(a, b) / n).clamp(-1.0, 1.0)
    } else {
        0.0
    }
}

fn l2_normalized(a: &[f64]) -> Vec<f64> {
    let n = norm(a);
    if n > 0.0 {
        a.iter().map(|v| v / n).collect()
    } else {
        a.to_vec()
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Square patch of side `size` centered on `(row, col)`, shifted inward at
/// the borders.
pub fn centered_patch(img: &Image, row: usize, col: usize, size: usize) -> Result<Image, ProbeError> {
    let (h, w) = (img.height(), img.width());
    if size == 0 || size > h || size > w {
        return Err(ProbeError::LevelOutOfBounds { size, height: h, width: w });
    }
    let top = row.saturating_sub(size / 2).min(h - size);
    let left = col.saturating_sub(size / 2).min(w - size);
    Ok(crop(img, &PatchRegion::new(top, left, size, size, 0))?)
}

fn landmark_patches(
    images: &[(String, Image)],
    landmarks: &[LandmarkAnnotation],
    size: usize,
) -> Result<Vec<Image>, ProbeError> {
    landmarks
        .iter()
        .map(|l| {
            let (_, img) = images
                .iter()
                .find(|(id, _)| *id == l.image_id)
                .ok_or_else(|| ProbeError::UnknownImage(l.image_id.clone()))?;
            centered_patch(img, l.row, l.col, size)
        })
        .collect()
}

/// Embeddings of landmark-centered patches with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkFeatures {
    pub image_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub features: Vec<Vec<f64>>,
}

impl LandmarkFeatures {
    pub fn num_classes(&self) -> usize {
        self.labels.iter().map(|l| l + 1).max().unwrap_or(0)
    }
}

pub fn landmark_features(
    embedder: &dyn PatchEmbedder,
    images: &[(String, Image)],
    landmarks: &[LandmarkAnnotation],
    patch_px: usize,
) -> Result<LandmarkFeatures, ProbeError> {
    if landmarks.is_empty() {
        return Err(ProbeError::NoAnnotations);
    }
    let patches = landmark_patches(images, landmarks, patch_px)?;
    Ok(LandmarkFeatures {
        image_ids: landmarks.iter().map(|l| l.image_id.clone()).collect(),
        labels: landmarks.iter().map(|l| l.landmark_class).collect(),
        features: embedder.embed(&patches)?,
    })
}

// ---------------------------------------------------------------- locality

/// Mean silhouette coefficient under Euclidean distance. Points in a
/// singleton cluster score 0; with fewer than two clusters the score is 0.
pub fn silhouette_score(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = points.len();
    let k = labels.iter().map(|l| l + 1).max().unwrap_or(0);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[labels[j]] += euclidean(&points[i], &points[j]);
            }
        }
        let own = labels[i];
        if sizes[own] < 2 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / n as f64
}

/// Leave-one-out nearest-centroid accuracy under Euclidean distance.
/// A point whose class has no other members cannot be classified correctly.
pub fn nearest_centroid_loo_accuracy(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = points.len();
    if n == 0 {
        return 0.0;
    }
    let d = points[0].len();
    let k = labels.iter().map(|l| l + 1).max().unwrap_or(0);
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p) {
            *s += v;
        }
    }
    let mut correct = 0;
    for (p, &l) in points.iter().zip(labels) {
        let mut best = (usize::MAX, f64::INFINITY);
        for c in 0..k {
            let cnt = counts[c] - usize::from(c == l);
            if cnt == 0 {
                continue;
            }
            let dist: f64 = sums[c]
                .iter()
                .zip(p)
                .map(|(s, v)| {
                    let mean = if c == l { (s - v) / cnt as f64 } else { s / cnt as f64 };
                    (mean - v) * (mean - v)
                })
                .sum();
            if dist < best.1 {
                best = (c, dist);
            }
        }
        correct += usize::from(best.0 == l);
    }
    correct as f64 / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalityReport {
    pub patch_px: usize,
    pub class_counts: Vec<usize>,
    pub silhouette: f64,
    pub nearest_centroid_accuracy: f64,
    #[serde(skip)]
    pub embeddings: LandmarkFeaturesTable,
}

/// Raw embedding rows kept for external plotting.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LandmarkFeaturesTable {
    pub image_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub features: Vec<Vec<f64>>,
}

impl LandmarkFeaturesTable {
    /// Columns: `image_id`, `class`, then `f0..f{D-1}`.
    pub fn to_tsv(&self) -> String {
        let d = self.features.first().map_or(0, Vec::len);
        let mut out = String::from("image_id\tclass");
        for i in 0..d {
            let _ = write!(out, "\tf{i}");
        }
        out.push('\n');
        for ((id, l), f) in self.image_ids.iter().zip(&self.labels).zip(&self.features) {
            let _ = write!(out, "{id}\t{l}");
            for v in f {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Silhouette and nearest-centroid scores of L2-normalized features.
pub fn locality_from_features(feats: &LandmarkFeatures, patch_px: usize) -> Result<LocalityReport, ProbeError> {
    if feats.labels.is_empty() {
        return Err(ProbeError::NoAnnotations);
    }
    let normed: Vec<Vec<f64>> = feats.features.iter().map(|f| l2_normalized(f)).collect();
    let mut class_counts = vec![0; feats.num_classes()];
    for &l in &feats.labels {
        class_counts[l] += 1;
    }
    Ok(LocalityReport {
        patch_px,
        class_counts,
        silhouette: silhouette_score(&normed, &feats.labels),
        nearest_centroid_accuracy: nearest_centroid_loo_accuracy(&normed, &feats.labels),
        embeddings: LandmarkFeaturesTable {
            image_ids: feats.image_ids.clone(),
            labels: feats.labels.clone(),
            features: feats.features.clone(),
        },
    })
}

pub fn probe_locality(
    embedder: &dyn PatchEmbedder,
    images: &[(String, Image)],
    landmarks: &[LandmarkAnnotation],
    patch_px: usize,
) -> Result<LocalityReport, ProbeError> {
    let feats = landmark_features(embedder, images, landmarks, patch_px)?;
    locality_from_features(&feats, patch_px)
}

// ------------------------------------------------------- compositionality

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompositionalityConfig {
    pub num_patches: usize,
    pub arities: Vec<usize>,
    /// Patch side range as a fraction of the image side.
    pub min_side_frac: f64,
    pub max_side_frac: f64,
    pub kde_points: usize,
    pub seed: u64,
}

impl Default for CompositionalityConfig {
    fn default() -> Self {
        Self {
            num_patches: 300,
            arities: vec![2, 3, 4],
            min_side_frac: 0.25,
            max_side_frac: 0.5,
            kde_points: 256,
            seed: 0,
        }
    }
}

/// Non-overlapping parts of `region`: vertical halves (2), vertical thirds
/// (3) or quadrants (4). Remainders go to the last part.
pub fn split_region(region: &PatchRegion, arity: usize) -> Result<Vec<PatchRegion>, ProbeError> {
    let PatchRegion { top, left, height: h, width: w, granularity: g } = *region;
    let cuts = |len: usize, k: usize| -> Vec<(usize, usize)> {
        (0..k)
            .map(|i| {
                let a = i * len / k;
                let b = (i + 1) * len / k;
                (a, b - a)
            })
            .collect()
    };
    let parts = match arity {
        2 | 3 => {
            if w < arity {
                return Err(ProbeError::InvalidArgument(format!("width {w} too small for {arity} parts")));
            }
            cuts(w, arity)
                .into_iter()
                .map(|(x, pw)| PatchRegion::new(top, left + x, h, pw, g))
                .collect()
        }
        4 => {
            if w < 2 || h < 2 {
                return Err(ProbeError::InvalidArgument(format!("{h}x{w} too small for quadrants")));
            }
            let mut v = Vec::with_capacity(4);
            for (y, ph) in cuts(h, 2) {
                for (x, pw) in cuts(w, 2) {
                    v.push(PatchRegion::new(top + y, left + x, ph, pw, g));
                }
            }
            v
        }
        other => return Err(ProbeError::InvalidArity(other)),
    };
    Ok(parts)
}

/// `cosine(whole, sum(parts))`.
pub fn composition_score(whole: &[f64], parts: &[Vec<f64>]) -> f64 {
    let mut agg = vec![0.0; whole.len()];
    for p in parts {
        for (a, v) in agg.iter_mut().zip(p) {
            *a += v;
        }
    }
    cosine(whole, &agg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionSample {
    pub image_id: String,
    pub arity: usize,
    pub top: usize,
    pub left: usize,
    pub side: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionalityReport {
    pub config: CompositionalityConfig,
    pub mean: f64,
    pub std: f64,
    pub bandwidth: f64,
    pub samples: Vec<CompositionSample>,
    pub kde: Vec<(f64, f64)>,
}

impl CompositionalityReport {
    /// Columns: `image_id`, `arity`, `top`, `left`, `side`, `score`.
    pub fn samples_tsv(&self) -> String {
        let mut out = String::from("image_id\tarity\ttop\tleft\tside\tscore\n");
        for s in &self.samples {
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}\t{}", s.image_id, s.arity, s.top, s.left, s.side, s.score);
        }
        out
    }

    /// Columns: `x`, `density`.
    pub fn kde_tsv(&self) -> String {
        let mut out = String::from("x\tdensity\n");
        for (x, d) in &self.kde {
            let _ = writeln!(out, "{x}\t{d}");
        }
        out
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Silverman's rule of thumb, `0.9 min(sd, IQR/1.34) n^(-1/5)`, falling back
/// to whichever spread is nonzero and finally to `1e-3`.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return 1e-3;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let sd = {
        let m = sorted.iter().sum::<f64>() / n as f64;
        (sorted.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    let iqr = (quantile(&sorted, 0.75) - quantile(&sorted, 0.25)) / 1.34;
    let spread = match (sd > 0.0, iqr > 0.0) {
        (true, true) => sd.min(iqr),
        (true, false) => sd,
        (false, true) => iqr,
        (false, false) => return 1e-3,
    };
    (0.9 * spread * (n as f64).powf(-0.2)).max(1e-6)
}

/// Gaussian KDE evaluated on `points` evenly spaced positions covering the
/// samples plus four bandwidths on either side.
pub fn gaussian_kde(samples: &[f64], bandwidth: f64, points: usize) -> Vec<(f64, f64)> {
    if samples.is_empty() || points < 2 {
        return Vec::new();
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - 4.0 * bandwidth;
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 4.0 * bandwidth;
    let norm = 1.0 / (samples.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    (0..points)
        .map(|i| {
            let x = lo + (hi - lo) * i as f64 / (points - 1) as f64;
            let d = samples
                .iter()
                .map(|s| {
                    let z = (x - s) / bandwidth;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
                * norm;
            (x, d)
        })
        .collect()
}

pub fn probe_compositionality(
    embedder: &dyn PatchEmbedder,
    images: &[(String, Image)],
    cfg: &CompositionalityConfig,
) -> Result<CompositionalityReport, ProbeError> {
    if cfg.arities.is_empty() {
        return Err(ProbeError::InvalidArgument("no split arities given".into()));
    }
    if let Some(&bad) = cfg.arities.iter().find(|a| !(2..=4).contains(*a)) {
        return Err(ProbeError::InvalidArity(bad));
    }
    if images.is_empty() {
        return Err(ProbeError::InvalidArgument("no images".into()));
    }
    if !(cfg.min_side_frac > 0.0 && cfg.min_side_frac <= cfg.max_side_frac && cfg.max_side_frac <= 1.0) {
        return Err(ProbeError::InvalidArgument("side fractions must satisfy 0 < min <= max <= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::with_capacity(cfg.num_patches);
    for i in 0..cfg.num_patches {
        let (id, img) = &images[rng.random_range(0..images.len())];
        let arity = cfg.arities[i % cfg.arities.len()];
        let short = img.height().min(img.width()) as f64;
        let frac = cfg.min_side_frac + (cfg.max_side_frac - cfg.min_side_frac) * rng.random::<f64>();
        let side = ((frac * short).round() as usize).clamp(4, short as usize);
        let top = rng.random_range(0..=img.height() - side);
        let left = rng.random_range(0..=img.width() - side);
        let region = PatchRegion::new(top, left, side, side, 0);
        let mut patches = vec![crop(img, &region)?];
        for part in split_region(&region, arity)? {
            patches.push(crop(img, &part)?);
        }
        let feats = embedder.embed(&patches)?;
        samples.push(CompositionSample {
            image_id: id.clone(),
            arity,
            top,
            left,
            side,
            score: composition_score(&feats[0], &feats[1..]),
        });
    }
    let scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    let (mean, std) = mean_std(&scores);
    let bandwidth = silverman_bandwidth(&scores);
    Ok(CompositionalityReport {
        config: cfg.clone(),
        mean,
        std,
        bandwidth,
        kde: gaussian_kde(&scores, bandwidth, cfg.kde_points),
        samples,
    })
}

// --------------------------------------------------------- correspondence

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMatch {
    /// Row-major cell index in the first image.
    pub cell_a: usize,
    /// Row-major cell index of the best match in the second image.
    pub cell_b: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceResult {
    pub grid_size: usize,
    pub threshold: f64,
    pub matches: Vec<CellMatch>,
}

impl CorrespondenceResult {
    /// Fraction of matches landing on the cell displaced by
    /// `(dy, dx)` cells, with wrap-around. `None` when there are no matches.
    pub fn shift_accuracy(&self, dy: isize, dx: isize) -> Option<f64> {
        if self.matches.is_empty() {
            return None;
        }
        let g = self.grid_size as isize;
        let hits = self
            .matches
            .iter()
            .filter(|m| {
                let (r, c) = ((m.cell_a / self.grid_size) as isize, (m.cell_a % self.grid_size) as isize);
                let expected = ((r + dy).rem_euclid(g) * g + (c + dx).rem_euclid(g)) as usize;
                m.cell_b == expected
            })
            .count();
        Some(hits as f64 / self.matches.len() as f64)
    }

    /// Columns: `cell_a`, `cell_b`, `similarity`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("cell_a\tcell_b\tsimilarity\n");
        for m in &self.matches {
            let _ = writeln!(out, "{}\t{}\t{}", m.cell_a, m.cell_b, m.similarity);
        }
        out
    }
}

/// Row-major `g x g` grid over an image; boundaries at `floor(i * size / g)`.
pub fn grid_cells(height: usize, width: usize, g: usize) -> Result<Vec<PatchRegion>, ProbeError> {
    if g < 2 {
        return Err(ProbeError::DegenerateGrid(format!("grid size {g} < 2")));
    }
    if height < g || width < g {
        return Err(ProbeError::DegenerateGrid(format!("{height}x{width} image cannot hold a {g}x{g} grid")));
    }
    let mut cells = Vec::with_capacity(g * g);
    for i in 0..g {
        let (r0, r1) = (i * height / g, (i + 1) * height / g);
        for j in 0..g {
            let (c0, c1) = (j * width / g, (j + 1) * width / g);
            cells.push(PatchRegion::new(r0, c0, r1 - r0, c1 - c0, 0));
        }
    }
    Ok(cells)
}

/// Cosine similarity between every row of `a` and every row of `b`.
pub fn similarity_matrix(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let bn: Vec<Vec<f64>> = b.iter().map(|v| l2_normalized(v)).collect();
    a.iter()
        .map(|v| {
            let vn = l2_normalized(v);
            bn.iter().map(|w| dot(&vn, w).clamp(-1.0, 1.0)).collect()
        })
        .collect()
}

pub fn match_cells(sims: &[Vec<f64>], grid_size: usize, threshold: f64) -> CorrespondenceResult {
    let matches = sims
        .iter()
        .enumerate()
        .filter_map(|(i, row)| {
            let (j, &s) = row
                .iter()
                .enumerate()
                .fold(None::<(usize, &f64)>, |best, cur| match best {
                    Some(b) if *b.1 >= *cur.1 => Some(b),
                    _ => Some(cur),
                })?;
            (s >= threshold).then_some(CellMatch { cell_a: i, cell_b: j, similarity: s })
        })
        .collect();
    CorrespondenceResult {
        grid_size,
        threshold,
        matches,
    }
}

pub fn probe_correspondence(
    embedder: &dyn PatchEmbedder,
    img_a: &Image,
    img_b: &Image,
    grid: usize,
    threshold: f64,
) -> Result<CorrespondenceResult, ProbeError> {
    let cells_a = grid_cells(img_a.height(), img_a.width(), grid)?;
    let cells_b = grid_cells(img_b.height(), img_b.width(), grid)?;
    let pa: Vec<Image> = cells_a.iter().map(|c| crop(img_a, c)).collect::<Result<_, _>>()?;
    let pb: Vec<Image> = cells_b.iter().map(|c| crop(img_b, c)).collect::<Result<_, _>>()?;
    let ea = embedder.embed(&pa)?;
    let eb = embedder.embed(&pb)?;
    Ok(match_cells(&similarity_matrix(&ea, &eb), grid, threshold))
}

/// Correspondence of an image with a noisy copy of itself circularly
/// shifted by a whole number of grid cells; the true match of every cell
/// is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftCorrespondence {
    /// Shift in cells, `(rows, cols)`.
    pub shift: (isize, isize),
    pub noise_std: f64,
    pub result: CorrespondenceResult,
    pub correct: usize,
    /// `None` when no cell passed the threshold.
    pub accuracy: Option<f64>,
}

pub fn probe_shift_correspondence(
    embedder: &dyn PatchEmbedder,
    img: &Image,
    grid: usize,
    threshold: f64,
    shift: (isize, isize),
    noise_std: f64,
    seed: u64,
) -> Result<ShiftCorrespondence, ProbeError> {
    if grid < 2 {
        return Err(ProbeError::DegenerateGrid(format!("grid size {grid} < 2")));
    }
    if img.height() % grid != 0 || img.width() % grid != 0 {
        return Err(ProbeError::InvalidArgument(format!(
            "{}x{} image does not divide into a {grid}x{grid} grid",
            img.height(),
            img.width()
        )));
    }
    let (ch, cw) = ((img.height() / grid) as isize, (img.width() / grid) as isize);
    let shifted = circular_shift(img, shift.0 * ch, shift.1 * cw);
    let shifted = if noise_std > 0.0 {
        add_noise(&shifted, noise_std, &mut ChaCha8Rng::seed_from_u64(seed))
    } else {
        shifted
    };
    let result = probe_correspondence(embedder, img, &shifted, grid, threshold)?;
    let accuracy = result.shift_accuracy(shift.0, shift.1);
    let correct = accuracy.map_or(0, |a| (a * result.matches.len() as f64).round() as usize);
    Ok(ShiftCorrespondence {
        shift,
        noise_std,
        result,
        correct,
        accuracy,
    })
}

// ------------------------------------------------------- multi-resolution

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiresReport {
    pub levels: Vec<usize>,
    /// Mean cosine between embeddings of the same landmark at different levels.
    pub cross_level_same_landmark: f64,
    /// Mean cosine between different landmarks of one image at the same level.
    pub same_level_cross_landmark: f64,
    pub success: bool,
}

pub fn probe_multires(
    embedder: &dyn PatchEmbedder,
    images: &[(String, Image)],
    landmarks: &[LandmarkAnnotation],
    levels: &[usize],
) -> Result<MultiresReport, ProbeError> {
    if levels.is_empty() {
        return Err(ProbeError::InvalidArgument("no levels given".into()));
    }
    if landmarks.is_empty() {
        return Err(ProbeError::NoAnnotations);
    }
    // per level, embeddings aligned with `landmarks`
    let per_level: Vec<Vec<Vec<f64>>> = levels
        .iter()
        .map(|&size| embedder.embed(&landmark_patches(images, landmarks, size)?))
        .collect::<Result<_, _>>()?;

    let level_pairs: Vec<(usize, usize)> = if levels.len() == 1 {
        vec![(0, 0)]
    } else {
        (0..levels.len())
            .flat_map(|a| ((a + 1)..levels.len()).map(move |b| (a, b)))
            .collect()
    };
    let (mut cross, mut cross_n) = (0.0, 0usize);
    for i in 0..landmarks.len() {
        for &(a, b) in &level_pairs {
            cross += cosine(&per_level[a][i], &per_level[b][i]);
            cross_n += 1;
        }
    }
    let (mut same, mut same_n) = (0.0, 0usize);
    for emb in &per_level {
        for i in 0..landmarks.len() {
            for j in (i + 1)..landmarks.len() {
                if landmarks[i].image_id == landmarks[j].image_id
                    && landmarks[i].landmark_class != landmarks[j].landmark_class
                {
                    same += cosine(&emb[i], &emb[j]);
                    same_n += 1;
                }
            }
        }
    }
    let a = cross / cross_n as f64;
    let b = if same_n > 0 { same / same_n as f64 } else { 0.0 };
    Ok(MultiresReport {
        levels: levels.to_vec(),
        cross_level_same_landmark: a,
        same_level_cross_landmark: b,
        success: a > b,
    })
}

// ------------------------------------------------------------ linear probe

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearProbeConfig {
    pub resamplings: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for LinearProbeConfig {
    fn default() -> Self {
        Self {
            resamplings: 3,
            epochs: 300,
            learning_rate: 0.5,
            weight_decay: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbeReport {
    pub shots_per_class: usize,
    pub num_classes: usize,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
}

/// Multinomial logistic regression trained by full-batch gradient descent.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxClassifier {
    classes: usize,
    dim: usize,
    /// Row-major `[classes, dim]`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl SoftmaxClassifier {
    pub fn fit(x: &[Vec<f64>], y: &[usize], classes: usize, cfg: &LinearProbeConfig) -> Self {
        let dim = x.first().map_or(0, Vec::len);
        let n = x.len() as f64;
        let mut w = vec![0.0; classes * dim];
        let mut b = vec![0.0; classes];
        let mut probs = vec![0.0; classes];
        for _ in 0..cfg.epochs {
            let mut gw = vec![0.0; classes * dim];
            let mut gb = vec![0.0; classes];
            for (xi, &yi) in x.iter().zip(y) {
                logits_into(&w, &b, xi, &mut probs);
                softmax_in_place(&mut probs);
                probs[yi] -= 1.0;
                for c in 0..classes {
                    gb[c] += probs[c];
                    for (g, v) in gw[c * dim..(c + 1) * dim].iter_mut().zip(xi) {
                        *g += probs[c] * v;
                    }
                }
            }
            for (wi, gi) in w.iter_mut().zip(&gw) {
                *wi -= cfg.learning_rate * (gi / n + cfg.weight_decay * *wi);
            }
            for (bi, gi) in b.iter_mut().zip(&gb) {
                *bi -= cfg.learning_rate * gi / n;
            }
        }
        Self { classes, dim, weights: w, bias: b }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut logits = vec![0.0; self.classes];
        logits_into(&self.weights, &self.bias, &x[..self.dim], &mut logits);
        logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    }
}

fn logits_into(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let dim = x.len();
    for (c, o) in out.iter_mut().enumerate() {
        *o = b[c] + dot(&w[c * dim..(c + 1) * dim], x);
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
}

/// Feature-wise standardization fitted on training rows.
fn standardizer(x: &[&Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = x[0].len();
    let n = x.len() as f64;
    let mut mean = vec![0.0; d];
    for r in x {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; d];
    for r in x {
        for ((s, v), m) in sd.iter_mut().zip(r.iter()).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let sd = sd.into_iter().map(|v| if v.sqrt() > 1e-8 { v.sqrt() } else { 1.0 }).collect();
    (mean, sd)
}

/// Few-shot linear probe: per resampling, `shots` random examples of every
/// class train a softmax classifier on standardized features and all other
/// examples are held out.
pub fn linear_probe_features(
    feats: &LandmarkFeatures,
    shots: usize,
    cfg: &LinearProbeConfig,
) -> Result<LinearProbeReport, ProbeError> {
    if shots == 0 {
        return Err(ProbeError::InvalidArgument("shots_per_class must be >= 1".into()));
    }
    if cfg.resamplings == 0 {
        return Err(ProbeError::InvalidArgument("resamplings must be >= 1".into()));
    }
    let classes = feats.num_classes();
    if classes == 0 {
        return Err(ProbeError::NoAnnotations);
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in feats.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for (class, members) in by_class.iter().enumerate() {
        if members.len() <= shots {
            return Err(ProbeError::InsufficientExamples {
                class,
                have: members.len(),
                need: shots + 1,
            });
        }
    }
    let mut accuracies = Vec::with_capacity(cfg.resamplings);
    for r in 0..cfg.resamplings {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(r as u64);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for members in &by_class {
            let mut m = members.clone();
            m.shuffle(&mut rng);
            train.extend_from_slice(&m[..shots]);
            test.extend_from_slice(&m[shots..]);
        }
        let rows: Vec<&Vec<f64>> = train.iter().map(|&i| &feats.features[i]).collect();
        let (mean, sd) = standardizer(&rows);
        let standardize = |v: &Vec<f64>| -> Vec<f64> {
            v.iter().zip(&mean).zip(&sd).map(|((x, m), s)| (x - m) / s).collect()
        };
        let xs: Vec<Vec<f64>> = rows.iter().map(|v| standardize(v)).collect();
        let ys: Vec<usize> = train.iter().map(|&i| feats.labels[i]).collect();
        let clf = SoftmaxClassifier::fit(&xs, &ys, classes, cfg);
        let correct = test
            .iter()
            .filter(|&&i| clf.predict(&standardize(&feats.features[i])) == feats.labels[i])
            .count();
        accuracies.push(correct as f64 / test.len() as f64);
    }
    let mean_accuracy = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    Ok(LinearProbeReport {
        shots_per_class: shots,
        num_classes: classes,
        accuracies,
        mean_accuracy,
    })
}

pub fn linear_probe(
    embedder: &dyn PatchEmbedder,
    images: &[(String, Image)],
    landmarks: &[LandmarkAnnotation],
    patch_px: usize,
    shots: usize,
    cfg: &LinearProbeConfig,
) -> Result<LinearProbeReport, ProbeError> {
    let feats = landmark_features(embedder, images, landmarks, patch_px)?;
    linear_probe_features(&feats, shots, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::EncoderConfig;
    use crate::synthdata::{render_image, SynthConfig};

    struct OneHot {
        dim: usize,
        // class of each patch, consumed in order
        classes: std::cell::RefCell<std::collections::VecDeque<usize>>,
    }

    impl PatchEmbedder for OneHot {
        fn embed(&self, patches: &[Image]) -> Result<Vec<Vec<f64>>, ProbeError> {
            let mut q = self.classes.borrow_mut();
            Ok(patches
                .iter()
                .map(|_| {
                    let mut v = vec![0.0; self.dim];
                    v[q.pop_front().expect("enough labels")] = 1.0;
                    v
                })
                .collect())
        }
    }

    struct Constant(Vec<f64>);

    impl PatchEmbedder for Constant {
        fn embed(&self, patches: &[Image]) -> Result<Vec<Vec<f64>>, ProbeError> {
            Ok(vec![self.0.clone(); patches.len()])
        }
    }

    /// Mean pixel intensity of a few fixed sub-blocks: an encoder that
    /// sees content but knows nothing.
    struct BlockMeans;

    impl PatchEmbedder for BlockMeans {
        fn embed(&self, patches: &[Image]) -> Result<Vec<Vec<f64>>, ProbeError> {
            Ok(patches
                .iter()
                .map(|p| {
                    let r = resize(p, 8, 8).unwrap();
                    r.pixels().iter().map(|&v| v as f64).collect()
                })
                .collect())
        }
    }

    fn corpus(n: usize) -> (Vec<(String, Image)>, Vec<LandmarkAnnotation>) {
        let cfg = SynthConfig { num_images: n, ..SynthConfig::default() };
        let mut imgs = Vec::new();
        let mut lms = Vec::new();
        for i in 0..n {
            let (img, ann) = render_image(&cfg, i);
            imgs.push((ann[0].image_id.clone(), img));
            lms.extend(ann);
        }
        (imgs, lms)
    }

    fn brute_silhouette(points: &[Vec<f64>], labels: &[usize]) -> f64 {
        let n = points.len();
        let dist: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| euclidean(&points[i], &points[j])).collect())
            .collect();
        let mut classes: Vec<usize> = labels.to_vec();
        classes.sort();
        classes.dedup();
        let mut s = Vec::with_capacity(n);
        for i in 0..n {
            let own: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
            if own.is_empty() {
                s.push(0.0);
                continue;
            }
            let a = own.iter().map(|&j| dist[i][j]).sum::<f64>() / own.len() as f64;
            let b = classes
                .iter()
                .filter(|&&c| c != labels[i])
                .map(|&c| {
                    let m: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
                    m.iter().map(|&j| dist[i][j]).sum::<f64>() / m.len() as f64
                })
                .fold(f64::INFINITY, f64::min);
            s.push(if a.max(b) > 0.0 { (b - a) / a.max(b) } else { 0.0 });
        }
        s.iter().sum::<f64>() / n as f64
    }

    #[test]
    fn silhouette_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let n = rng.random_range(3..=200);
            let k = rng.random_range(2..=6);
            let d = rng.random_range(1..=8);
            let labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
            let points: Vec<Vec<f64>> = labels
                .iter()
                .map(|&l| (0..d).map(|_| l as f64 * 0.5 * (trial % 3) as f64 + rng.random::<f64>()).collect())
                .collect();
            let s = silhouette_score(&points, &labels);
            let r = brute_silhouette(&points, &labels);
            assert!((s - r).abs() < 1e-9, "{s} vs {r}");
            assert!((-1.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn silhouette_of_well_separated_clusters_is_high() {
        let points = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.1]];
        let s = silhouette_score(&points, &[0, 0, 1, 1]);
        assert!(s > 0.98);
        // hand computation for point 0: a = 0.1, b = 10.05
        let expected0 = (10.05 - 0.1) / 10.05;
        let expected = (expected0 + (9.95 - 0.1) / 9.95 + (9.95 - 0.1) / 9.95 + expected0) / 4.0;
        assert!((s - expected).abs() < 1e-12);
    }

    #[test]
    fn one_hot_oracle_gives_perfect_locality() {
        let (imgs, lms) = corpus(6);
        let embedder = OneHot {
            dim: 8,
            classes: std::cell::RefCell::new(lms.iter().map(|l| l.landmark_class).collect()),
        };
        let rep = probe_locality(&embedder, &imgs, &lms, 16).unwrap();
        assert!((rep.silhouette - 1.0).abs() < 1e-12);
        assert_eq!(rep.nearest_centroid_accuracy, 1.0);
        assert_eq!(rep.class_counts, vec![6; 8]);
        let tsv = rep.embeddings.to_tsv();
        assert_eq!(tsv.lines().count(), 49);
        assert!(tsv.starts_with("image_id\tclass\tf0"));
    }

    #[test]
    fn permuted_labels_give_chance_accuracy() {
        // nearly one-hot features under randomly permuted labels
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (c, per) = (8, 200);
        let mut accs = Vec::new();
        for _ in 0..5 {
            let mut labels: Vec<usize> = (0..c * per).map(|i| i % c).collect();
            let points: Vec<Vec<f64>> = labels
                .iter()
                .map(|&l| (0..c).map(|j| if j == l { 1.0 } else { 0.0 } + 0.05 * rng.random::<f64>()).collect())
                .collect();
            labels.shuffle(&mut rng);
            accs.push(nearest_centroid_loo_accuracy(&points, &labels));
        }
        for a in accs {
            assert!((a - 1.0 / c as f64).abs() < 0.05, "{a}");
        }
    }

    #[test]
    fn locality_requires_annotations() {
        let (imgs, _) = corpus(1);
        assert!(matches!(probe_locality(&BlockMeans, &imgs, &[], 16), Err(ProbeError::NoAnnotations)));
    }

    #[test]
    fn split_geometries() {
        let r = PatchRegion::new(3, 5, 20, 31, 0);
        for arity in [2, 3, 4] {
            let parts = split_region(&r, arity).unwrap();
            assert_eq!(parts.len(), arity);
            assert_eq!(parts.iter().map(PatchRegion::area).sum::<usize>(), r.area());
            for p in &parts {
                assert!(r.contains(p));
            }
        }
        let halves = split_region(&r, 2).unwrap();
        assert_eq!((halves[0].width, halves[1].width, halves[1].left), (15, 16, 20));
        assert!(matches!(split_region(&r, 5), Err(ProbeError::InvalidArity(5))));
    }

    #[test]
    fn constant_encoder_scores_one() {
        let (imgs, _) = corpus(3);
        let cfg = CompositionalityConfig { num_patches: 12, ..Default::default() };
        let rep = probe_compositionality(&Constant(vec![0.3, -1.0, 2.0]), &imgs, &cfg).unwrap();
        assert!(rep.samples.iter().all(|s| (s.score - 1.0).abs() < 1e-12));
        let arities: Vec<usize> = rep.samples.iter().map(|s| s.arity).collect();
        assert!(arities.contains(&2) && arities.contains(&3) && arities.contains(&4));
        assert_eq!(rep.samples_tsv().lines().count(), 13);
    }

    #[test]
    fn sum_and_mean_aggregation_agree_exactly() {
        let whole = vec![0.25, -0.5, 1.0, 2.0];
        let parts = vec![vec![1.0, 0.5, 0.25, 0.0], vec![0.5, 0.5, -1.0, 4.0], vec![2.0, 0.0, 0.0, 1.0], vec![0.0, 1.0, 1.0, 1.0]];
        let summed = composition_score(&whole, &parts);
        // mean of four parts: every component scaled by the power of two 1/4
        let mean_parts: Vec<Vec<f64>> = parts.iter().map(|p| p.iter().map(|v| v / 4.0).collect()).collect();
        assert_eq!(summed, composition_score(&whole, &mean_parts));
    }

    #[test]
    fn compositionality_rejects_bad_arity() {
        let (imgs, _) = corpus(1);
        let cfg = CompositionalityConfig { arities: vec![2, 5], ..Default::default() };
        assert!(matches!(probe_compositionality(&BlockMeans, &imgs, &cfg), Err(ProbeError::InvalidArity(5))));
    }

    #[test]
    fn kde_integrates_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1usize, 5, 50, 300] {
            let samples: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3) * 2.0 - 1.0).collect();
            let h = silverman_bandwidth(&samples);
            let curve = gaussian_kde(&samples, h, 512);
            let integral: f64 = curve.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum();
            assert!((integral - 1.0).abs() < 0.01, "n={n}: {integral}");
            assert!(curve.iter().all(|&(_, d)| d >= 0.0));
        }
        // all-equal samples still give a proper density
        let curve = gaussian_kde(&[1.0; 10], silverman_bandwidth(&[1.0; 10]), 256);
        let integral: f64 = curve.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum();
        assert!((integral - 1.0).abs() < 0.01);
    }

    #[test]
    fn silverman_reference_value() {
        // sd = sqrt(2.5), IQR/1.34 = 2/1.34 -> min is 1.4925..
        let h = silverman_bandwidth(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let expected = 0.9 * (2.0f64 / 1.34) * 5f64.powf(-0.2);
        assert!((h - expected).abs() < 1e-12);
    }

    #[test]
    fn identical_images_match_themselves() {
        let (imgs, _) = corpus(1);
        let img = &imgs[0].1;
        // distinct per-cell features: the pixel block itself
        let res = probe_correspondence(&BlockMeans, img, img, 8, 0.8).unwrap();
        assert_eq!(res.matches.len(), 64);
        assert!(res.matches.iter().all(|m| m.cell_a == m.cell_b && (m.similarity - 1.0).abs() < 1e-9));
        assert_eq!(res.shift_accuracy(0, 0), Some(1.0));
        let none = probe_correspondence(&BlockMeans, img, img, 8, 1.0 + 1e-9).unwrap();
        assert!(none.matches.is_empty());
        assert_eq!(none.shift_accuracy(0, 0), None);
    }

    #[test]
    fn shifted_image_matches_shifted_cells_with_pixel_features() {
        let (imgs, _) = corpus(1);
        let img = &imgs[0].1;
        let shifted = circular_shift(img, 0, 8);
        let res = probe_correspondence(&BlockMeans, img, &shifted, 8, 0.0).unwrap();
        assert_eq!(res.shift_accuracy(0, 1), Some(1.0));
    }

    #[test]
    fn shift_oracle_counts_correct_matches() {
        let (imgs, _) = corpus(1);
        let img = &imgs[0].1;
        let rep = probe_shift_correspondence(&BlockMeans, img, 8, 0.0, (1, -1), 0.0, 0).unwrap();
        assert_eq!(rep.accuracy, Some(1.0));
        assert_eq!(rep.correct, rep.result.matches.len());
        assert!(matches!(
            probe_shift_correspondence(&BlockMeans, img, 7, 0.8, (0, 1), 0.02, 0),
            Err(ProbeError::InvalidArgument(_))
        ));
    }

    #[test]
    fn similarity_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a: Vec<Vec<f64>> = (0..10).map(|_| (0..6).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
        let b: Vec<Vec<f64>> = (0..7).map(|_| (0..6).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
        let ab = similarity_matrix(&a, &b);
        let ba = similarity_matrix(&b, &a);
        for i in 0..10 {
            for j in 0..7 {
                assert!((ab[i][j] - ba[j][i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_grids_are_rejected() {
        assert!(matches!(grid_cells(64, 64, 1), Err(ProbeError::DegenerateGrid(_))));
        assert!(matches!(grid_cells(4, 64, 5), Err(ProbeError::DegenerateGrid(_))));
        let cells = grid_cells(10, 7, 3).unwrap();
        assert_eq!(cells.iter().map(PatchRegion::area).sum::<usize>(), 70);
    }

    #[test]
    fn single_level_multires_is_one() {
        let (imgs, lms) = corpus(2);
        let rep = probe_multires(&BlockMeans, &imgs, &lms, &[16]).unwrap();
        assert!((rep.cross_level_same_landmark - 1.0).abs() < 1e-12);
        assert!(matches!(
            probe_multires(&BlockMeans, &imgs, &lms, &[16, 65]),
            Err(ProbeError::LevelOutOfBounds { size: 65, .. })
        ));
    }

    #[test]
    fn random_encoder_multires_gap_is_small() {
        let (imgs, lms) = corpus(4);
        let cfg = EncoderConfig { input_size: 32, ..EncoderConfig::default() };
        for seed in 0..3 {
            let enc = Encoder::<f32>::new(cfg.clone()).unwrap();
            let params = enc.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
            let emb = BackboneEmbedder::new(enc, params).unwrap();
            let rep = probe_multires(&emb, &imgs, &lms, &[12, 20, 28]).unwrap();
            let gap = rep.cross_level_same_landmark - rep.same_level_cross_landmark;
            assert!(gap.abs() < 0.1, "seed {seed}: {gap}");
        }
    }

    fn separable_features(per_class: usize, classes: usize, noise: f64, seed: u64) -> LandmarkFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels = Vec::new();
        let mut features = Vec::new();
        for i in 0..per_class * classes {
            let l = i % classes;
            labels.push(l);
            features.push((0..classes).map(|j| f64::from(u8::from(j == l)) + noise * rng.random::<f64>()).collect());
        }
        LandmarkFeatures {
            image_ids: labels.iter().map(|l| format!("x{l}")).collect(),
            labels,
            features,
        }
    }

    #[test]
    fn linear_probe_on_one_hot_is_perfect() {
        let feats = separable_features(30, 8, 0.0, 0);
        let rep = linear_probe_features(&feats, 29, &LinearProbeConfig::default()).unwrap();
        assert_eq!(rep.mean_accuracy, 1.0);
        assert_eq!(rep.accuracies.len(), 3);
    }

    #[test]
    fn linear_probe_with_shuffled_labels_is_chance() {
        let mut feats = separable_features(100, 8, 0.1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // random features unrelated to the labels
        for f in feats.features.iter_mut() {
            f.iter_mut().for_each(|v| *v = rng.random::<f64>());
        }
        feats.labels.shuffle(&mut rng);
        let rep = linear_probe_features(&feats, 12, &LinearProbeConfig::default()).unwrap();
        assert!((rep.mean_accuracy - 0.125).abs() < 0.06, "{}", rep.mean_accuracy);
    }

    #[test]
    fn linear_probe_is_deterministic_and_checks_counts() {
        let feats = separable_features(10, 4, 0.8, 7);
        let cfg = LinearProbeConfig::default();
        assert_eq!(linear_probe_features(&feats, 3, &cfg).unwrap(), linear_probe_features(&feats, 3, &cfg).unwrap());
        assert!(matches!(
            linear_probe_features(&feats, 10, &cfg),
            Err(ProbeError::InsufficientExamples { need: 11, .. })
        ));
        assert!(linear_probe_features(&feats, 0, &cfg).is_err());
    }

    #[test]
    fn softmax_classifier_gradient_matches_finite_differences() {
        // one step from zero weights equals -lr * average gradient; compare
        // with a finite-difference gradient of the mean cross-entropy
        let x = vec![vec![0.5, -1.0], vec![1.5, 0.25], vec![-0.75, 0.5]];
        let y = vec![0, 1, 2];
        let cfg = LinearProbeConfig { epochs: 1, learning_rate: 1.0, weight_decay: 0.0, ..Default::default() };
        let clf = SoftmaxClassifier::fit(&x, &y, 3, &cfg);
        let loss = |w: &[f64]| -> f64 {
            x.iter()
                .zip(&y)
                .map(|(xi, &yi)| {
                    let mut l = vec![0.0; 3];
                    logits_into(w, &[0.0; 3], xi, &mut l);
                    let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + l.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    lse - l[yi]
                })
                .sum::<f64>()
                / 3.0
        };
        for i in 0..6 {
            let mut wp = vec![0.0; 6];
            let mut wm = vec![0.0; 6];
            wp[i] = 1e-6;
            wm[i] = -1e-6;
            let g = (loss(&wp) - loss(&wm)) / 2e-6;
            assert!((clf.weights[i] + g).abs() < 1e-8);
        }
    }
}
