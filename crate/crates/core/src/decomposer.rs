//! Recursive alternating decomposition of an image into `2^n` tiles and
//! uniform sampling of one tile as a training instance.
//!
//! Depth 1 cuts the width (a vertical cut), depth 2 cuts the height, and the
//! axes keep alternating. An extent `E` splits into `floor(E/2)` and
//! `E - floor(E/2)`, so independent implementations tile identically.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{crop, Image};

/// Axis-aligned rectangle inside a source image, tagged with the
/// granularity level that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchRegion {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub granularity: u32,
}

impl PatchRegion {
    pub fn new(top: usize, left: usize, height: usize, width: usize, granularity: u32) -> Self {
        Self {
            top,
            left,
            height,
            width,
            granularity,
        }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, other: &PatchRegion) -> bool {
        other.top >= self.top
            && other.left >= self.left
            && other.top + other.height <= self.top + self.height
            && other.left + other.width <= self.left + self.width
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecomposeError {
    #[error("granularity {n} too fine for a {height}x{width} image")]
    TooFine { n: u32, height: usize, width: usize },
}

/// Largest granularity supported by a `height x width` image.
pub fn max_granularity(height: usize, width: usize) -> u32 {
    let mut n = 0;
    while check_granularity(height, width, n + 1).is_ok() {
        n += 1;
    }
    n
}

fn check_granularity(height: usize, width: usize, n: u32) -> Result<(), DecomposeError> {
    let width_cuts = n.div_ceil(2);
    let height_cuts = n / 2;
    let fits = |extent: usize, cuts: u32| cuts < usize::BITS && (1usize << cuts) <= extent;
    if height == 0 || width == 0 || !fits(width, width_cuts) || !fits(height, height_cuts) {
        return Err(DecomposeError::TooFine { n, height, width });
    }
    Ok(())
}

fn halve(extent: usize) -> (usize, usize) {
    let first = extent / 2;
    (first, extent - first)
}

/// Tiles of a `height x width` grid at granularity `n`, row-major by
/// `(top, left)`.
pub fn decompose_dims(height: usize, width: usize, n: u32) -> Result<Vec<PatchRegion>, DecomposeError> {
    check_granularity(height, width, n)?;
    let mut regions = vec![PatchRegion::new(0, 0, height, width, 0)];
    for depth in 1..=n {
        let vertical_cut = depth % 2 == 1;
        let mut next = Vec::with_capacity(regions.len() * 2);
        for r in &regions {
            if vertical_cut {
                let (a, b) = halve(r.width);
                next.push(PatchRegion::new(r.top, r.left, r.height, a, depth));
                next.push(PatchRegion::new(r.top, r.left + a, r.height, b, depth));
            } else {
                let (a, b) = halve(r.height);
                next.push(PatchRegion::new(r.top, r.left, a, r.width, depth));
                next.push(PatchRegion::new(r.top + a, r.left, b, r.width, depth));
            }
        }
        regions = next;
    }
    regions.sort_by_key(|r| (r.top, r.left));
    Ok(regions)
}

pub fn decompose(img: &Image, n: u32) -> Result<Vec<PatchRegion>, DecomposeError> {
    decompose_dims(img.height(), img.width(), n)
}

/// Uniformly chosen tile region; consumes exactly one draw from `rng`.
pub fn sample_region<R: Rng + ?Sized>(
    img: &Image,
    n: u32,
    rng: &mut R,
) -> Result<PatchRegion, DecomposeError> {
    let regions = decompose(img, n)?;
    let idx = rng.random_range(0..regions.len());
    Ok(regions[idx])
}

/// Random training instance: one tile of the granularity-`n` decomposition.
pub fn sample_instance<R: Rng + ?Sized>(img: &Image, n: u32, rng: &mut R) -> Result<Image, DecomposeError> {
    let region = sample_region(img, n, rng)?;
    Ok(crop(img, &region).expect("decomposed regions lie inside the image"))
}
