//! Neighbor-pair weights from spectral similarity.
//!
//! Every horizontally or vertically adjacent pixel pair gets a normalized
//! cosine distance `d` between its two luminance spectra, squashed by a
//! sigmoid into `w = 1 / (1 + exp(alpha * (d - beta)))` and its complement
//! `v = 1 - w`.

use serde::{Deserialize, Serialize};

use crate::cube::{PixelSpectrum, SpectralCube};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightParams {
    /// Sigmoid steepness.
    pub alpha: f64,
    /// Sigmoid midpoint, in cosine-distance units.
    pub beta: f64,
}

impl Default for WeightParams {
    fn default() -> Self {
        WeightParams {
            alpha: 5000.0,
            beta: 0.0032,
        }
    }
}

impl WeightParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let p = WeightParams { alpha, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!("beta must be > 0, got {}", self.beta)));
        }
        Ok(())
    }

    pub fn weight(&self, distance: f64) -> f64 {
        1.0 / (1.0 + (self.alpha * (distance - self.beta)).exp())
    }
}

/// `1 - a·b / (|a| |b|)`. Pairs involving an all-zero spectrum have distance 0.
pub fn cosine_distance_slices(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (1.0 - dot / (na.sqrt() * nb.sqrt())).clamp(0.0, 2.0)
}

pub fn cosine_distance(a: &PixelSpectrum, b: &PixelSpectrum) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::mismatch("cosine_distance", a.len(), b.len()));
    }
    Ok(cosine_distance_slices(a.values(), b.values()))
}

/// Weights over the 4-neighborhood of a `height × width` grid.
///
/// Pairs are listed horizontal first (row by row), then vertical; each pair
/// stores the smaller pixel index first.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightField {
    height: usize,
    width: usize,
    pairs: Vec<(usize, usize)>,
    distance: Vec<f64>,
    w: Vec<f64>,
    v: Vec<f64>,
}

impl WeightField {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn distances(&self) -> &[f64] {
        &self.distance
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    /// Builds a field from explicit per-pair `w` values; `v` is derived.
    pub fn from_w(height: usize, width: usize, w: Vec<f64>) -> Result<Self> {
        let pairs = neighbor_pairs(height, width);
        if w.len() != pairs.len() {
            return Err(Error::mismatch("weight count", pairs.len(), w.len()));
        }
        if let Some(i) = w.iter().position(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::Validation {
                index: i,
                message: "weights must lie in [0, 1]".into(),
            });
        }
        let v = w.iter().map(|x| 1.0 - x).collect();
        Ok(WeightField {
            height,
            width,
            distance: vec![f64::NAN; pairs.len()],
            pairs,
            w,
            v,
        })
    }
}

/// All horizontal then all vertical 4-neighbor pairs of a grid.
pub fn neighbor_pairs(height: usize, width: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(
        height * width.saturating_sub(1) + width * height.saturating_sub(1),
    );
    for y in 0..height {
        for x in 0..width.saturating_sub(1) {
            let p = y * width + x;
            pairs.push((p, p + 1));
        }
    }
    for y in 0..height.saturating_sub(1) {
        for x in 0..width {
            let p = y * width + x;
            pairs.push((p, p + width));
        }
    }
    pairs
}

pub fn compute_weight_field(cube: &SpectralCube, params: &WeightParams) -> Result<WeightField> {
    params.validate()?;
    let pairs = neighbor_pairs(cube.height(), cube.width());
    let distance: Vec<f64> = pairs
        .iter()
        .map(|&(p, q)| cosine_distance_slices(cube.pixel(p), cube.pixel(q)))
        .collect();
    let w: Vec<f64> = distance.iter().map(|&d| params.weight(d)).collect();
    let v = w.iter().map(|x| 1.0 - x).collect();
    Ok(WeightField {
        height: cube.height(),
        width: cube.width(),
        pairs,
        distance,
        w,
        v,
    })
}
