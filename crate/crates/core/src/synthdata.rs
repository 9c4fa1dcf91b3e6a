//! Procedural corpus of images with repeated, class-distinctive structures
//! at known positions, plus manifest-based corpus loading.
//!
//! Every image shares one canonical layout: structure class `c` sits at
//! layout slot `c`, displaced by up to `jitter_px` pixels. Each class has its
//! own glyph (ring, cross, striped disk, ...), drawn with a small random
//! scale and rotation at a per-image contrast over a smooth background of
//! random brightness and blob texture, then perturbed by Gaussian pixel
//! noise.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{load_image, save_image, Image, ImageError};

/// Number of distinct glyph designs available.
pub const GLYPH_KINDS: usize = 12;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("cannot write corpus to {path}: {source}")]
    Unwritable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot read manifest {path}: {source}")]
    ManifestIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("corpus file missing: {0}")]
    MissingFile(PathBuf),
    #[error("landmark of image {image_id} at ({row}, {col}) lies outside the {height}x{width} image")]
    AnnotationOutOfBounds {
        image_id: String,
        row: i64,
        col: i64,
        height: usize,
        width: usize,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub num_images: usize,
    pub num_structure_classes: usize,
    /// Maximum landmark displacement per axis, in pixels.
    pub jitter_px: usize,
    /// Standard deviation of additive pixel noise.
    pub intensity_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_images: 500,
            num_structure_classes: 8,
            jitter_px: 3,
            intensity_noise: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.num_structure_classes < 2 || self.num_structure_classes > GLYPH_KINDS {
            return bad(format!(
                "num_structure_classes must lie in 2..={GLYPH_KINDS}, got {}",
                self.num_structure_classes
            ));
        }
        if self.image_size < 16 {
            return bad(format!("image_size must be >= 16, got {}", self.image_size));
        }
        if self.jitter_px * 8 >= self.image_size {
            return bad(format!(
                "jitter_px {} must be below image_size/8",
                self.jitter_px
            ));
        }
        if !(self.intensity_noise >= 0.0) {
            return bad("intensity_noise must be >= 0".into());
        }
        Ok(())
    }

    /// Glyph radius in pixels.
    pub fn glyph_radius(&self) -> f64 {
        let g = grid_side(self.num_structure_classes) as f64;
        (self.image_size as f64 / g) * 0.33
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LandmarkAnnotation {
    pub image_id: String,
    #[serde(rename = "class")]
    pub landmark_class: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub images: Vec<ImageEntry>,
    pub landmarks: Vec<LandmarkAnnotation>,
    #[serde(default)]
    pub config: Option<SynthConfig>,
}

fn grid_side(classes: usize) -> usize {
    let mut g = 1;
    while g * g < classes {
        g += 1;
    }
    g
}

/// Canonical landmark centers, one per class: cells of a square grid,
/// dropping the cells nearest the image center when the grid has spares.
pub fn canonical_layout(image_size: usize, classes: usize) -> Vec<(f64, f64)> {
    let g = grid_side(classes);
    let cell = image_size as f64 / g as f64;
    let mid = (image_size as f64) / 2.0;
    let mut cells: Vec<(f64, f64)> = (0..g * g)
        .map(|i| ((i / g) as f64 * cell + cell / 2.0, (i % g) as f64 * cell + cell / 2.0))
        .collect();
    while cells.len() > classes {
        let (idx, _) = cells
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| (i, (r - mid).powi(2) + (c - mid).powi(2)))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
        cells.remove(idx);
    }
    cells
}

/// Glyph intensity in `[0, 1]` at offset `(dy, dx)` from the glyph center.
pub fn glyph_value(kind: usize, dy: f64, dx: f64, radius: f64) -> f64 {
    let (y, x) = (dy / radius, dx / radius);
    let r = (y * y + x * x).sqrt();
    let inside = |cond: bool| if cond { 1.0 } else { 0.0 };
    match kind % GLYPH_KINDS {
        // ring
        0 => inside((r - 0.7).abs() < 0.22),
        // plus-shaped cross
        1 => inside((x.abs() < 0.22 && y.abs() < 0.95) || (y.abs() < 0.22 && x.abs() < 0.95)),
        // disk with horizontal stripes
        2 => inside(r < 0.95 && ((y + 1.0) * 2.5).floor() as i64 % 2 == 0),
        // radial gradient blob
        3 => (1.0 - r).max(0.0),
        // filled square
        4 => inside(x.abs() < 0.7 && y.abs() < 0.7),
        // diagonal cross
        5 => inside((x.abs() - y.abs()).abs() < 0.25 && r < 1.0),
        // upward triangle
        6 => inside(y > -0.8 && y < 0.8 && x.abs() < (y + 0.8) * 0.55),
        // checkerboard square
        7 => inside(
            x.abs() < 0.8 && y.abs() < 0.8 && (((x + 0.8) * 2.5).floor() as i64 + ((y + 0.8) * 2.5).floor() as i64) % 2 == 0,
        ),
        // square outline
        8 => inside((x.abs().max(y.abs()) - 0.7).abs() < 0.15),
        // disk with vertical stripes
        9 => inside(r < 0.95 && ((x + 1.0) * 2.5).floor() as i64 % 2 == 0),
        // 3x3 dot grid
        10 => {
            let fy = (y * 1.5).round() / 1.5;
            let fx = (x * 1.5).round() / 1.5;
            inside(fy.abs() <= 0.7 && fx.abs() <= 0.7 && ((y - fy).powi(2) + (x - fx).powi(2)).sqrt() < 0.2)
        }
        // right half disk
        _ => inside(r < 0.9 && x > 0.0),
    }
}

/// Per-image nuisance ranges: global brightness, background wave amplitude,
/// glyph contrast, glyph scale and glyph rotation (degrees).
const BASE_LEVEL: (f64, f64) = (0.1, 0.4);
const WAVE_AMPLITUDE: (f64, f64) = (0.01, 0.03);
const CONTRAST: (f64, f64) = (0.45, 0.75);
const GLYPH_SCALE: (f64, f64) = (0.9, 1.1);
const GLYPH_ROTATION_DEG: f64 = 8.0;
/// Background texture: Gaussian blobs with a random sign, sized relative to
/// a 64-pixel image.
const BLOB_COUNT: usize = 12;
const BLOB_SIGMA_PX: (f64, f64) = (3.0, 8.0);
const BLOB_AMPLITUDE: (f64, f64) = (0.03, 0.08);

/// Where and how one glyph was drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlyphPlacement {
    pub class: usize,
    pub row: usize,
    pub col: usize,
    pub radius: f64,
    /// Rotation in radians.
    pub angle: f64,
}

impl GlyphPlacement {
    /// Glyph intensity in `[0, 1]` at pixel `(y, x)`.
    pub fn value_at(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.row as f64, x - self.col as f64);
        let (s, c) = self.angle.sin_cos();
        glyph_value(self.class, c * dy - s * dx, s * dy + c * dx, self.radius)
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Renders image `index` of the corpus and its landmark annotations.
/// A pure function of `(cfg, index)`.
pub fn render_image(cfg: &SynthConfig, index: usize) -> (Image, Vec<LandmarkAnnotation>) {
    let (img, placements) = render_with_placements(cfg, index);
    let id = image_id(index);
    let annotations = placements
        .iter()
        .map(|p| LandmarkAnnotation {
            image_id: id.clone(),
            landmark_class: p.class,
            row: p.row,
            col: p.col,
        })
        .collect();
    (img, annotations)
}

/// Like [`render_image`] but also reports each glyph's scale and rotation.
pub fn render_with_placements(cfg: &SynthConfig, index: usize) -> (Image, Vec<GlyphPlacement>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let s = cfg.image_size;
    let radius = cfg.glyph_radius();
    let layout = canonical_layout(s, cfg.num_structure_classes);
    let jitter = cfg.jitter_px as i64;

    // smooth background: base level plus two low-frequency waves
    let base = uniform(&mut rng, BASE_LEVEL);
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            let theta = rng.random::<f64>() * std::f64::consts::TAU;
            let freq = (1.0 + rng.random::<f64>() * 2.0) * std::f64::consts::TAU / s as f64;
            let phase = rng.random::<f64>() * std::f64::consts::TAU;
            let amp = uniform(&mut rng, WAVE_AMPLITUDE);
            (theta, freq, phase, amp)
        })
        .collect();
    let contrast = uniform(&mut rng, CONTRAST);
    let px = s as f64 / 64.0;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..BLOB_COUNT)
        .map(|_| {
            let cy = rng.random::<f64>() * s as f64;
            let cx = rng.random::<f64>() * s as f64;
            let sigma = uniform(&mut rng, BLOB_SIGMA_PX) * px;
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            (cy, cx, sigma, sign * uniform(&mut rng, BLOB_AMPLITUDE))
        })
        .collect();

    let mut placements = Vec::with_capacity(layout.len());
    for (class, &(r, c)) in layout.iter().enumerate() {
        let dy = rng.random_range(-jitter..=jitter);
        let dx = rng.random_range(-jitter..=jitter);
        let row = (r.floor() as i64 + dy).clamp(0, s as i64 - 1) as usize;
        let col = (c.floor() as i64 + dx).clamp(0, s as i64 - 1) as usize;
        let scale = uniform(&mut rng, GLYPH_SCALE);
        let angle = uniform(&mut rng, (-GLYPH_ROTATION_DEG, GLYPH_ROTATION_DEG)).to_radians();
        placements.push(GlyphPlacement {
            class,
            row,
            col,
            radius: radius * scale,
            angle,
        });
    }

    let normal = (cfg.intensity_noise > 0.0)
        .then(|| Normal::new(0.0, cfg.intensity_noise).expect("finite noise std"));
    let mut pixels = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let mut v = base;
            for &(theta, freq, phase, amp) in &waves {
                let t = (y as f64 * theta.sin() + x as f64 * theta.cos()) * freq + phase;
                v += amp * t.sin();
            }
            for &(cy, cx, sigma, amp) in &blobs {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            for p in &placements {
                // every design vanishes beyond 1.2 radii in its own frame
                let reach = p.radius * 1.7;
                if (y as f64 - p.row as f64).abs() <= reach && (x as f64 - p.col as f64).abs() <= reach {
                    v += contrast * p.value_at(y as f64, x as f64);
                }
            }
            if let Some(n) = &normal {
                v += n.sample(&mut rng);
            }
            pixels.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    let img = Image::new(s, s, pixels).expect("valid synthetic image");
    (img, placements)
}

pub fn image_id(index: usize) -> String {
    format!("img_{index:05}")
}

/// Writes `num_images` PGM files plus `manifest.json` into `out_dir` and
/// returns the manifest path.
pub fn generate_corpus(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<PathBuf, SynthError> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let unwritable = |source| SynthError::Unwritable {
        path: out_dir.to_path_buf(),
        source,
    };
    fs::create_dir_all(out_dir).map_err(unwritable)?;
    let mut images = Vec::with_capacity(cfg.num_images);
    let mut landmarks = Vec::new();
    for i in 0..cfg.num_images {
        let (img, ann) = render_image(cfg, i);
        let file = format!("{}.pgm", image_id(i));
        save_image(&img, out_dir.join(&file)).map_err(|e| match e {
            ImageError::Io { source, .. } => unwritable(source),
            other => SynthError::Image(other),
        })?;
        images.push(ImageEntry { id: image_id(i), path: file });
        landmarks.extend(ann);
    }
    let manifest = Manifest {
        images,
        landmarks,
        config: Some(cfg.clone()),
    };
    let path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(unwritable)?;
    Ok(path)
}

/// Image handle that is read from disk on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRef {
    pub id: String,
    pub path: PathBuf,
}

impl ImageRef {
    pub fn load(&self) -> Result<Image, ImageError> {
        load_image(&self.path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub images: Vec<ImageRef>,
    pub landmarks: Vec<LandmarkAnnotation>,
    pub config: Option<SynthConfig>,
}

impl Corpus {
    pub fn load_images(&self) -> Result<Vec<Image>, ImageError> {
        self.images.iter().map(ImageRef::load).collect()
    }

    pub fn index_of(&self, image_id: &str) -> Option<usize> {
        self.images.iter().position(|r| r.id == image_id)
    }

    pub fn num_classes(&self) -> usize {
        self.landmarks
            .iter()
            .map(|l| l.landmark_class + 1)
            .max()
            .unwrap_or(0)
    }
}

#[derive(Deserialize)]
struct RawLandmark {
    image_id: String,
    class: i64,
    row: i64,
    col: i64,
}

#[derive(Deserialize)]
struct RawManifest {
    images: Vec<ImageEntry>,
    #[serde(default)]
    landmarks: Vec<RawLandmark>,
    #[serde(default)]
    config: Option<SynthConfig>,
}

/// Parses a manifest, checks that every referenced file exists and that
/// every annotation lies inside its image. Pixel data stays on disk.
pub fn load_corpus(manifest_path: impl AsRef<Path>) -> Result<Corpus, SynthError> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|source| SynthError::ManifestIo {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let raw: RawManifest =
        serde_json::from_str(&text).map_err(|e| SynthError::MalformedManifest(e.to_string()))?;
    let root = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut images = Vec::with_capacity(raw.images.len());
    for entry in &raw.images {
        let path = root.join(&entry.path);
        if !path.is_file() {
            return Err(SynthError::MissingFile(path));
        }
        images.push(ImageRef {
            id: entry.id.clone(),
            path,
        });
    }
    let mut dims_cache: Vec<Option<(usize, usize)>> = vec![None; images.len()];
    let mut landmarks = Vec::with_capacity(raw.landmarks.len());
    for l in raw.landmarks {
        let idx = images
            .iter()
            .position(|r| r.id == l.image_id)
            .ok_or_else(|| SynthError::MalformedManifest(format!("landmark references unknown image {}", l.image_id)))?;
        if l.class < 0 {
            return Err(SynthError::MalformedManifest(format!("negative class {}", l.class)));
        }
        let (height, width) = match (&raw.config, dims_cache[idx]) {
            (_, Some(d)) => d,
            (Some(cfg), None) => (cfg.image_size, cfg.image_size),
            (None, None) => {
                let img = images[idx].load()?;
                (img.height(), img.width())
            }
        };
        dims_cache[idx] = Some((height, width));
        if l.row < 0 || l.col < 0 || l.row as usize >= height || l.col as usize >= width {
            return Err(SynthError::AnnotationOutOfBounds {
                image_id: l.image_id,
                row: l.row,
                col: l.col,
                height,
                width,
            });
        }
        landmarks.push(LandmarkAnnotation {
            image_id: l.image_id,
            landmark_class: l.class as usize,
            row: l.row as usize,
            col: l.col as usize,
        });
    }
    Ok(Corpus {
        images,
        landmarks,
        config: raw.config,
    })
}
