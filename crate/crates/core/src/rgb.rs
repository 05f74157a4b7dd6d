//! Pseudo-RGB rendering of spectral cubes for visual inspection.

use std::io::Read;

use crate::cube::SpectralCube;
use crate::error::{Error, Result};

/// A 3×K matrix of nonnegative channel responses, one row per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMatrix {
    bands: usize,
    rows: [Vec<f64>; 3],
}

impl ResponseMatrix {
    pub fn new(rows: [Vec<f64>; 3]) -> Result<Self> {
        let bands = rows[0].len();
        for row in &rows {
            if row.len() != bands {
                return Err(Error::mismatch("response row length", bands, row.len()));
            }
            if let Some(i) = row.iter().position(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Validation {
                    index: i,
                    message: "response must be finite and nonnegative".into(),
                });
            }
        }
        Ok(ResponseMatrix { bands, rows })
    }

    pub fn identity3() -> Self {
        ResponseMatrix {
            bands: 3,
            rows: [
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
        }
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    /// Resamples tabulated curves (columns r, g, b over wavelength) at the
    /// requested wavelengths by linear interpolation, zero outside the table.
    pub fn from_curves(curves: &ResponseCurves, wavelengths: &[f64]) -> Result<Self> {
        let rows = [0, 1, 2].map(|c| {
            wavelengths
                .iter()
                .map(|&w| interp(&curves.wavelengths, &curves.channels[c], w))
                .collect::<Vec<_>>()
        });
        ResponseMatrix::new(rows)
    }
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if xs.is_empty() || x < xs[0] || x > xs[xs.len() - 1] {
        return 0.0;
    }
    let i = xs.partition_point(|v| *v <= x);
    if i == 0 {
        return ys[0];
    }
    if i >= xs.len() {
        return ys[xs.len() - 1];
    }
    let t = (x - xs[i - 1]) / (xs[i] - xs[i - 1]);
    ys[i - 1] + t * (ys[i] - ys[i - 1])
}

/// Tabulated channel sensitivities as shipped in the response fixture.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseCurves {
    pub wavelengths: Vec<f64>,
    pub channels: [Vec<f64>; 3],
}

impl ResponseCurves {
    /// Three smooth bumps centred at 610, 545 and 465 nm, sampled every 5 nm over 450–700 nm.
    pub fn default_curves() -> Self {
        let wavelengths: Vec<f64> = (0..=50).map(|i| 450.0 + 5.0 * i as f64).collect();
        let bump = |c: f64, s: f64| -> Vec<f64> {
            wavelengths
                .iter()
                .map(|w| (-0.5 * ((w - c) / s).powi(2)).exp())
                .collect()
        };
        ResponseCurves {
            channels: [bump(610.0, 35.0), bump(545.0, 35.0), bump(465.0, 30.0)],
            wavelengths,
        }
    }

    /// CSV with header `wavelength,r,g,b`.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(input);
        let mut wavelengths = Vec::new();
        let mut channels: [Vec<f64>; 3] = Default::default();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            if rec.len() != 4 {
                return Err(Error::Format(format!("line {}: expected 4 fields", i + 2)));
            }
            let nums = rec
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| Error::Format(format!("line {}: bad number {f:?}", i + 2)))
                })
                .collect::<Result<Vec<_>>>()?;
            wavelengths.push(nums[0]);
            for c in 0..3 {
                channels[c].push(nums[c + 1]);
            }
        }
        crate::cube::validate_wavelengths(&wavelengths, wavelengths.len())?;
        Ok(ResponseCurves {
            wavelengths,
            channels,
        })
    }

    /// The curves shipped in `fixtures/response.csv`.
    pub fn shipped() -> Result<Self> {
        ResponseCurves::read_csv(include_str!("../fixtures/response.csv").as_bytes())
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["wavelength", "r", "g", "b"])?;
        for (i, wl) in self.wavelengths.iter().enumerate() {
            w.write_record([
                wl.to_string(),
                self.channels[0][i].to_string(),
                self.channels[1][i].to_string(),
                self.channels[2][i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Three-channel image with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .flat_map(|px| px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect()
    }
}

/// Projects every spectrum through the response and min-max normalizes the
/// whole image to `[0, 1]`. An image whose values are all equal maps to zeros.
pub fn pseudo_rgb(cube: &SpectralCube, response: &ResponseMatrix) -> Result<RgbImage> {
    if response.bands != cube.bands() {
        return Err(Error::mismatch(
            "pseudo_rgb response bands",
            cube.bands(),
            response.bands,
        ));
    }
    let raw: Vec<[f64; 3]> = cube
        .pixels()
        .map(|px| {
            [0, 1, 2].map(|c| {
                response.rows[c]
                    .iter()
                    .zip(px)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
        })
        .collect();
    let (lo, hi) = raw
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(*v), hi.max(*v))
        });
    let span = hi - lo;
    let pixels = raw
        .into_iter()
        .map(|px| {
            if span > 0.0 {
                px.map(|v| ((v - lo) / span).clamp(0.0, 1.0))
            } else {
                [0.0; 3]
            }
        })
        .collect();
    Ok(RgbImage {
        height: cube.height(),
        width: cube.width(),
        pixels,
    })
}
