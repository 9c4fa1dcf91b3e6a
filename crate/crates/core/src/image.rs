//! Grayscale images, PGM (P5) I/O, exact crops, bilinear resize and the
//! stochastic view augmentation used to build positive pairs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decomposer::PatchRegion;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image file not found: {0}")]
    Missing(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed PGM header: {0}")]
    MalformedHeader(String),
    #[error("truncated PGM payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("region {region:?} exceeds {height}x{width} image")]
    RegionOutOfBounds {
        region: PatchRegion,
        height: usize,
        width: usize,
    },
    #[error("invalid image size {height}x{width}")]
    InvalidSize { height: usize, width: usize },
    #[error("pixel buffer has {found} values, expected {expected}")]
    BufferSize { expected: usize, found: usize },
}

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::InvalidSize { height, width });
        }
        if pixels.len() != height * width {
            return Err(ImageError::BufferSize {
                expected: height * width,
                found: pixels.len(),
            });
        }
        let pixels = pixels
            .into_iter()
            .map(|p| if p.is_finite() { p.clamp(0.0, 1.0) } else { 0.0 })
            .collect();
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self, ImageError> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> f32,
    ) -> Result<Self, ImageError> {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c));
            }
        }
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    /// Edge-replicating lookup.
    #[inline]
    fn get_clamped(&self, row: isize, col: isize) -> f32 {
        let r = row.clamp(0, self.height as isize - 1) as usize;
        let c = col.clamp(0, self.width as isize - 1) as usize;
        self.pixels[r * self.width + c]
    }

    /// Bilinear sample at fractional coordinates, replicating edges.
    fn sample_bilinear(&self, y: f64, x: f64) -> f32 {
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = (y - y0) as f32;
        let fx = (x - x0) as f32;
        let (y0, x0) = (y0 as isize, x0 as isize);
        let a = self.get_clamped(y0, x0);
        let b = self.get_clamped(y0, x0 + 1);
        let c = self.get_clamped(y0 + 1, x0);
        let d = self.get_clamped(y0 + 1, x0 + 1);
        let top = a + (b - a) * fx;
        let bottom = c + (d - c) * fx;
        top + (bottom - top) * fy
    }

    pub fn mean(&self) -> f32 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() as f32 / self.pixels.len() as f32
    }
}

fn io_err(path: &Path, source: std::io::Error) -> ImageError {
    if source.kind() == std::io::ErrorKind::NotFound {
        ImageError::Missing(path.to_path_buf())
    } else {
        ImageError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Parses an 8-bit binary PGM (P5) byte buffer.
pub fn decode_pgm(bytes: &[u8]) -> Result<Image, ImageError> {
    let mut pos = 0usize;
    let next_token = |pos: &mut usize| -> Result<String, ImageError> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(ImageError::MalformedHeader("unexpected end of header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    let magic = next_token(&mut pos)?;
    if magic != "P5" {
        return Err(ImageError::MalformedHeader(format!("bad magic {magic:?}")));
    }
    let field = |name: &str, pos: &mut usize| -> Result<usize, ImageError> {
        let tok = next_token(pos)?;
        tok.parse::<usize>()
            .map_err(|_| ImageError::MalformedHeader(format!("{name} is not an integer: {tok:?}")))
    };
    let width = field("width", &mut pos)?;
    let height = field("height", &mut pos)?;
    let maxval = field("maxval", &mut pos)?;
    if width == 0 || height == 0 {
        return Err(ImageError::MalformedHeader(format!("zero dimension {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(ImageError::MalformedHeader(format!("maxval {maxval} outside 1..=255")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(ImageError::MalformedHeader("missing separator after maxval".into()));
    }
    pos += 1;
    let expected = width * height;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(ImageError::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    let scale = maxval as f32;
    let pixels = payload[..expected]
        .iter()
        .map(|&b| (b as f32 / scale).min(1.0))
        .collect();
    Image::new(height, width, pixels)
}

/// Serializes to P5 with maxval 255 (round-to-nearest quantization).
pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(
        img.pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image, ImageError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode_pgm(&bytes)
}

pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&encode_pgm(img)).map_err(|e| io_err(path, e))
}

/// Exact sub-grid copy.
pub fn crop(img: &Image, region: &PatchRegion) -> Result<Image, ImageError> {
    if region.height == 0
        || region.width == 0
        || region.top + region.height > img.height
        || region.left + region.width > img.width
    {
        return Err(ImageError::RegionOutOfBounds {
            region: *region,
            height: img.height,
            width: img.width,
        });
    }
    let mut pixels = Vec::with_capacity(region.height * region.width);
    for r in region.top..region.top + region.height {
        let start = r * img.width + region.left;
        pixels.extend_from_slice(&img.pixels[start..start + region.width]);
    }
    Ok(Image {
        height: region.height,
        width: region.width,
        pixels,
    })
}

/// Source coordinate of output index `i` under corner-aligned sampling.
/// A single output sample sits at the source center.
#[inline]
pub(crate) fn corner_aligned(i: usize, out: usize, src: usize) -> f64 {
    if out == 1 {
        (src as f64 - 1.0) * 0.5
    } else {
        i as f64 * (src as f64 - 1.0) / (out as f64 - 1.0)
    }
}

/// Bilinear resize with corner-aligned sampling: output corners coincide
/// with input corners. Same-size resizes return an exact copy.
pub fn resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image, ImageError> {
    if out_h == 0 || out_w == 0 {
        return Err(ImageError::InvalidSize {
            height: out_h,
            width: out_w,
        });
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let xs: Vec<f64> = (0..out_w).map(|c| corner_aligned(c, out_w, img.width)).collect();
    let mut pixels = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let y = corner_aligned(r, out_h, img.height);
        for &x in &xs {
            pixels.push(img.sample_bilinear(y, x).clamp(0.0, 1.0));
        }
    }
    Ok(Image {
        height: out_h,
        width: out_w,
        pixels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Area fraction range for the random resized crop.
    pub crop_scale_range: (f64, f64),
    /// Gain is drawn from `1 ± jitter_strength`.
    pub jitter_strength: f64,
    /// Additive shift is drawn from `± brightness_fraction * jitter_strength`.
    #[serde(default = "default_brightness_fraction")]
    pub brightness_fraction: f64,
    pub blur_sigma_range: (f64, f64),
    /// Half-range of the rotation angle, in degrees.
    pub rotation_degrees: f64,
    pub seed: u64,
}

fn default_brightness_fraction() -> f64 {
    0.25
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            crop_scale_range: (0.6, 1.0),
            jitter_strength: 0.4,
            brightness_fraction: default_brightness_fraction(),
            blur_sigma_range: (0.0, 1.5),
            rotation_degrees: 10.0,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// Pipeline that returns its input unchanged.
    pub fn identity() -> Self {
        Self {
            crop_scale_range: (1.0, 1.0),
            jitter_strength: 0.0,
            brightness_fraction: default_brightness_fraction(),
            blur_sigma_range: (0.0, 0.0),
            rotation_degrees: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(format!("crop_scale_range must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"));
        }
        if !(self.jitter_strength >= 0.0) {
            return Err("jitter_strength must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.brightness_fraction) {
            return Err("brightness_fraction must lie in [0, 1]".into());
        }
        let (slo, shi) = self.blur_sigma_range;
        if !(slo >= 0.0 && slo <= shi) {
            return Err(format!("blur_sigma_range must satisfy 0 <= lo <= hi, got ({slo}, {shi})"));
        }
        if !(self.rotation_degrees >= 0.0) {
            return Err("rotation_degrees must be >= 0".into());
        }
        Ok(())
    }
}

/// Random resized crop, brightness/contrast jitter, Gaussian blur and
/// rotation, in that order. Every random draw is taken unconditionally so
/// the stream consumption does not depend on the configuration.
pub fn augment<R: Rng + ?Sized>(img: &Image, cfg: &AugmentationConfig, rng: &mut R) -> Image {
    let u_scale: f64 = rng.random();
    let u_top: f64 = rng.random();
    let u_left: f64 = rng.random();
    let u_gain: f64 = rng.random();
    let u_bias: f64 = rng.random();
    let u_sigma: f64 = rng.random();
    let u_angle: f64 = rng.random();

    // random resized crop, keeping the aspect ratio
    let (lo, hi) = cfg.crop_scale_range;
    let area = lo + (hi - lo) * u_scale;
    let side = area.sqrt();
    let ch = ((img.height as f64 * side).round() as usize).clamp(1, img.height);
    let cw = ((img.width as f64 * side).round() as usize).clamp(1, img.width);
    let top = ((img.height - ch) as f64 * u_top).floor() as usize;
    let left = ((img.width - cw) as f64 * u_left).floor() as usize;
    let region = PatchRegion {
        top,
        left,
        height: ch,
        width: cw,
        granularity: 0,
    };
    let cropped = crop(img, &region).expect("crop region inside image by construction");
    let mut out = resize(&cropped, img.height, img.width).expect("non-zero size");

    // brightness/contrast jitter: p -> gain * p + bias
    let j = cfg.jitter_strength;
    if j > 0.0 {
        let gain = (1.0 - j + 2.0 * j * u_gain) as f32;
        let b = j * cfg.brightness_fraction;
        let bias = (-b + 2.0 * b * u_bias) as f32;
        for p in out.pixels.iter_mut() {
            *p = (gain * *p + bias).clamp(0.0, 1.0);
        }
    }

    let (slo, shi) = cfg.blur_sigma_range;
    let sigma = slo + (shi - slo) * u_sigma;
    if sigma > 1e-3 {
        out = gaussian_blur(&out, sigma);
    }

    let half = cfg.rotation_degrees;
    let angle = (-half + 2.0 * half * u_angle).to_radians();
    if angle != 0.0 {
        out = rotate(&out, angle);
    }
    out
}

/// Separable Gaussian blur with edge replication, kernel radius `ceil(3σ)`.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (h, w) = (img.height, img.width);
    let mut tmp = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                acc += k * img.get_clamped(r as isize, c as isize + t as isize - radius);
            }
            tmp[r * w + c] = acc;
        }
    }
    let tmp = Image {
        height: h,
        width: w,
        pixels: tmp,
    };
    let mut pixels = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                acc += k * tmp.get_clamped(r as isize + t as isize - radius, c as isize);
            }
            pixels[r * w + c] = acc.clamp(0.0, 1.0);
        }
    }
    Image {
        height: h,
        width: w,
        pixels,
    }
}

/// Rotation about the image center, bilinear resampling with edge replication.
pub fn rotate(img: &Image, radians: f64) -> Image {
    let (h, w) = (img.height, img.width);
    let cy = (h as f64 - 1.0) * 0.5;
    let cx = (w as f64 - 1.0) * 0.5;
    let (s, c) = radians.sin_cos();
    let mut pixels = Vec::with_capacity(h * w);
    for r in 0..h {
        let dy = r as f64 - cy;
        for col in 0..w {
            let dx = col as f64 - cx;
            // inverse mapping: output -> source
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            let sx = sx.clamp(0.0, w as f64 - 1.0);
            let sy = sy.clamp(0.0, h as f64 - 1.0);
            pixels.push(img.sample_bilinear(sy, sx).clamp(0.0, 1.0));
        }
    }
    Image {
        height: h,
        width: w,
        pixels,
    }
}

/// Circular shift: output(r, c) = input(r - dy, c - dx) modulo the size.
pub fn circular_shift(img: &Image, dy: isize, dx: isize) -> Image {
    let (h, w) = (img.height as isize, img.width as isize);
    Image::from_fn(img.height, img.width, |r, c| {
        let sr = (r as isize - dy).rem_euclid(h) as usize;
        let sc = (c as isize - dx).rem_euclid(w) as usize;
        img.get(sr, sc)
    })
    .expect("same size as a valid image")
}

/// Adds zero-mean Gaussian noise and clamps to `[0, 1]`.
pub fn add_noise<R: Rng + ?Sized>(img: &Image, std: f64, rng: &mut R) -> Image {
    if std <= 0.0 {
        return img.clone();
    }
    let normal = rand_distr::Normal::new(0.0, std).expect("finite std");
    let pixels = img
        .pixels
        .iter()
        .map(|&p| (p + rng.sample(normal) as f32).clamp(0.0, 1.0))
        .collect();
    Image {
        height: img.height,
        width: img.width,
        pixels,
    }
}
