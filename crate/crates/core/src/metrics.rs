//! Decomposition quality metrics.
//!
//! LMSE slides a square window over the image with half overlap. In each
//! window the prediction is rescaled by the nonnegative scalar that best fits
//! the ground truth, and the mean squared error over all pixels and bands in
//! the window is recorded. The summed window errors are divided by the summed
//! errors of the all-zero prediction, which makes the score scale-free. The
//! last window along each axis is clipped to the image boundary.

use serde::{Deserialize, Serialize};

use crate::cube::SpectralCube;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmseConfig {
    pub window: usize,
    pub stride: usize,
    pub scale_invariant: bool,
}

impl Default for LmseConfig {
    fn default() -> Self {
        LmseConfig {
            window: 20,
            stride: 10,
            scale_invariant: true,
        }
    }
}

impl LmseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::InvalidConfig("LMSE window must be at least 2".into()));
        }
        if self.stride == 0 || self.stride > self.window {
            return Err(Error::InvalidConfig(format!(
                "LMSE stride must be in 1..={}, got {}",
                self.window, self.stride
            )));
        }
        Ok(())
    }
}

/// Window start offsets along one axis; the final window reaches `dim`.
pub fn window_starts(dim: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut s = 0;
    loop {
        starts.push(s);
        if s + window >= dim {
            break;
        }
        s += stride;
    }
    starts
}

pub fn lmse(pred: &SpectralCube, gt: &SpectralCube, cfg: &LmseConfig) -> Result<f64> {
    cfg.validate()?;
    gt.check_shape(pred, "lmse")?;
    let (h, w, k) = (gt.height(), gt.width(), gt.bands());
    let ys = window_starts(h, cfg.window, cfg.stride);
    let xs = window_starts(w, cfg.window, cfg.stride);
    let mut err_total = 0.0;
    let mut ref_total = 0.0;
    for &y0 in &ys {
        let y1 = (y0 + cfg.window).min(h);
        for &x0 in &xs {
            let x1 = (x0 + cfg.window).min(w);
            let (mut pg, mut pp, mut gg) = (0.0, 0.0, 0.0);
            for y in y0..y1 {
                for x in x0..x1 {
                    for (p, g) in pred.at(y, x).iter().zip(gt.at(y, x)) {
                        pg += p * g;
                        pp += p * p;
                        gg += g * g;
                    }
                }
            }
            let a = if !cfg.scale_invariant {
                1.0
            } else if pp > 0.0 {
                (pg / pp).max(0.0)
            } else {
                0.0
            };
            let mut sse = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    for (p, g) in pred.at(y, x).iter().zip(gt.at(y, x)) {
                        let d = a * p - g;
                        sse += d * d;
                    }
                }
            }
            let count = ((y1 - y0) * (x1 - x0) * k) as f64;
            err_total += sse / count;
            ref_total += gg / count;
        }
    }
    if ref_total == 0.0 {
        return Err(Error::ZeroGroundTruth);
    }
    Ok(err_total / ref_total)
}

/// Mean of the shading and reflectance LMSE.
pub fn combined_lmse(
    pred_shading: &SpectralCube,
    gt_shading: &SpectralCube,
    pred_reflectance: &SpectralCube,
    gt_reflectance: &SpectralCube,
    cfg: &LmseConfig,
) -> Result<f64> {
    let s = lmse(pred_shading, gt_shading, cfg)?;
    let r = lmse(pred_reflectance, gt_reflectance, cfg)?;
    Ok(0.5 * (s + r))
}

/// Axis-aligned pixel rectangle `[y, y + height) × [x, x + width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub y: usize,
    pub x: usize,
    pub height: usize,
    pub width: usize,
}

/// Per-band mean over the region.
pub fn spectral_curve(cube: &SpectralCube, roi: &Roi) -> Result<Vec<f64>> {
    if roi.height == 0 || roi.width == 0 {
        return Err(Error::InvalidConfig("region of interest is empty".into()));
    }
    if roi.y + roi.height > cube.height() || roi.x + roi.width > cube.width() {
        return Err(Error::mismatch(
            "roi bounds",
            format!("within {}x{}", cube.height(), cube.width()),
            format!("{roi:?}"),
        ));
    }
    let mut sum = vec![0.0; cube.bands()];
    for y in roi.y..roi.y + roi.height {
        for x in roi.x..roi.x + roi.width {
            for (s, v) in sum.iter_mut().zip(cube.at(y, x)) {
                *s += v;
            }
        }
    }
    let n = (roi.height * roi.width) as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, k: usize) -> SpectralCube {
        SpectralCube::from_fn(h, w, k, |y, x, b| 0.1 + 0.01 * (y * 7 + x * 3 + b) as f64).unwrap()
    }

    #[test]
    fn starts_cover_axis() {
        assert_eq!(window_starts(32, 20, 10), vec![0, 10, 20]);
        assert_eq!(window_starts(20, 20, 10), vec![0]);
        assert_eq!(window_starts(5, 20, 10), vec![0]);
        assert_eq!(window_starts(30, 20, 10), vec![0, 10]);
    }

    #[test]
    fn exact_and_scaled_predictions_score_zero() {
        let gt = ramp(25, 31, 3);
        let cfg = LmseConfig::default();
        assert_eq!(lmse(&gt, &gt, &cfg).unwrap(), 0.0);
        assert_eq!(lmse(&gt.scaled(2.0).unwrap(), &gt, &cfg).unwrap(), 0.0);
        assert!(lmse(&gt.scaled(3.0).unwrap(), &gt, &cfg).unwrap() < 1e-28);
        let plain = LmseConfig {
            scale_invariant: false,
            ..cfg
        };
        assert!(lmse(&gt.scaled(3.0).unwrap(), &gt, &plain).unwrap() > 1.0);
    }

    #[test]
    fn zero_prediction_scores_one() {
        let gt = ramp(12, 12, 2);
        let zero = SpectralCube::zeros(12, 12, 2);
        assert!((lmse(&zero, &gt, &LmseConfig::default()).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            lmse(&gt, &zero, &LmseConfig::default()),
            Err(Error::ZeroGroundTruth)
        ));
    }

    #[test]
    fn combined_is_mean() {
        let gt = ramp(10, 10, 2);
        let zero = SpectralCube::zeros(10, 10, 2);
        let c = combined_lmse(&gt, &gt, &zero, &gt, &LmseConfig::default()).unwrap();
        assert!((c - 0.5).abs() < 1e-15);
    }

    #[test]
    fn invalid_config() {
        let gt = ramp(4, 4, 1);
        for cfg in [
            LmseConfig { window: 1, stride: 1, scale_invariant: true },
            LmseConfig { window: 4, stride: 0, scale_invariant: true },
            LmseConfig { window: 4, stride: 5, scale_invariant: true },
        ] {
            assert!(lmse(&gt, &gt, &cfg).is_err());
        }
        assert!(lmse(&gt, &ramp(4, 5, 1), &LmseConfig::default()).is_err());
    }

    #[test]
    fn curves() {
        let cube = ramp(4, 4, 3);
        let one = spectral_curve(&cube, &Roi { y: 1, x: 2, height: 1, width: 1 }).unwrap();
        assert_eq!(one, cube.at(1, 2));
        let flat = SpectralCube::new(3, 3, 2, [0.3, 0.6].repeat(9)).unwrap();
        let c = spectral_curve(&flat, &Roi { y: 0, x: 0, height: 3, width: 2 }).unwrap();
        assert!((c[0] - 0.3).abs() < 1e-15 && (c[1] - 0.6).abs() < 1e-15);
        assert!(spectral_curve(&flat, &Roi { y: 0, x: 0, height: 0, width: 1 }).is_err());
        assert!(spectral_curve(&flat, &Roi { y: 2, x: 0, height: 2, width: 1 }).is_err());
    }
}
