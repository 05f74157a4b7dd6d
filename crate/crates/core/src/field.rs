use crate::error::{Error, Result};

/// Per-pixel coefficient vectors flattened pixel-major into one long vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientField {
    pixels: usize,
    rank: usize,
    values: Vec<f64>,
}

impl CoefficientField {
    pub fn new(pixels: usize, rank: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != pixels * rank {
            return Err(Error::mismatch("coefficient length", pixels * rank, values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation {
                index: i,
                message: "coefficient is not finite".into(),
            });
        }
        Ok(CoefficientField {
            pixels,
            rank,
            values,
        })
    }

    pub fn zeros(pixels: usize, rank: usize) -> Self {
        CoefficientField {
            pixels,
            rank,
            values: vec![0.0; pixels * rank],
        }
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.values[p * self.rank..(p + 1) * self.rank]
    }

    pub fn scaled(&self, factor: f64) -> CoefficientField {
        CoefficientField {
            pixels: self.pixels,
            rank: self.rank,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}
