//! Multispectral image cubes and the pixelwise forward model.
//!
//! A [`SpectralCube`] stores `height × width` pixels, each carrying a spectrum
//! of `bands` nonnegative samples. The layout is pixel-major: the spectrum of
//! pixel `p = y * width + x` occupies `data[p * bands..(p + 1) * bands]`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCube {
    height: usize,
    width: usize,
    bands: usize,
    wavelengths: Option<Vec<f64>>,
    data: Vec<f64>,
}

/// One pixel's spectrum, detached from its cube.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelSpectrum(Vec<f64>);

impl PixelSpectrum {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        validate_values(&values)?;
        Ok(PixelSpectrum(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

fn validate_values(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite() || *v < 0.0) {
        Some(index) => Err(Error::Validation {
            index,
            message: format!("value {} is not finite and nonnegative", values[index]),
        }),
        None => Ok(()),
    }
}

pub(crate) fn validate_wavelengths(wl: &[f64], bands: usize) -> Result<()> {
    if wl.len() != bands {
        return Err(Error::mismatch("wavelength count", bands, wl.len()));
    }
    if let Some(i) = wl.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation {
            index: i,
            message: "wavelength is not finite".into(),
        });
    }
    if let Some(i) = wl.windows(2).position(|w| w[1] <= w[0]) {
        return Err(Error::Validation {
            index: i + 1,
            message: "wavelengths must be strictly increasing".into(),
        });
    }
    Ok(())
}

impl SpectralCube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * bands {
            return Err(Error::mismatch(
                "cube data length",
                height * width * bands,
                data.len(),
            ));
        }
        validate_values(&data)?;
        Ok(SpectralCube {
            height,
            width,
            bands,
            wavelengths: None,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, bands: usize) -> Self {
        SpectralCube {
            height,
            width,
            bands,
            wavelengths: None,
            data: vec![0.0; height * width * bands],
        }
    }

    /// Builds a cube from a per-pixel generator of spectra.
    pub fn from_fn<F>(height: usize, width: usize, bands: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, usize, usize) -> f64,
    {
        let mut data = Vec::with_capacity(height * width * bands);
        for y in 0..height {
            for x in 0..width {
                for k in 0..bands {
                    data.push(f(y, x, k));
                }
            }
        }
        SpectralCube::new(height, width, bands, data)
    }

    pub fn with_wavelengths(mut self, wavelengths: Vec<f64>) -> Result<Self> {
        validate_wavelengths(&wavelengths, self.bands)?;
        self.wavelengths = Some(wavelengths);
        Ok(self)
    }

    pub(crate) fn set_wavelengths(&mut self, wavelengths: Option<Vec<f64>>) {
        self.wavelengths = wavelengths;
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn wavelengths(&self) -> Option<&[f64]> {
        self.wavelengths.as_deref()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.bands..(p + 1) * self.bands]
    }

    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        self.pixel(y * self.width + x)
    }

    pub fn spectrum(&self, p: usize) -> PixelSpectrum {
        PixelSpectrum(self.pixel(p).to_vec())
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.bands.max(1))
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    pub fn same_shape(&self, other: &SpectralCube) -> bool {
        self.height == other.height && self.width == other.width && self.bands == other.bands
    }

    pub(crate) fn check_shape(&self, other: &SpectralCube, context: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::mismatch(
                context,
                self.shape_string(),
                other.shape_string(),
            ))
        }
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.height, self.width, self.bands)
    }

    /// Multiplies every sample by a nonnegative constant.
    pub fn scaled(&self, factor: f64) -> Result<SpectralCube> {
        let data = self.data.iter().map(|v| v * factor).collect();
        let mut out = SpectralCube::new(self.height, self.width, self.bands, data)?;
        out.wavelengths = self.wavelengths.clone();
        Ok(out)
    }

    /// Keeps every `stride`-th band starting from the first.
    pub fn subsample_bands(&self, stride: usize) -> Result<SpectralCube> {
        if stride == 0 {
            return Err(Error::InvalidConfig("band stride must be at least 1".into()));
        }
        let keep: Vec<usize> = (0..self.bands).step_by(stride).collect();
        let mut data = Vec::with_capacity(self.pixel_count() * keep.len());
        for px in self.pixels() {
            data.extend(keep.iter().map(|&k| px[k]));
        }
        let mut out = SpectralCube::new(self.height, self.width, keep.len(), data)?;
        out.wavelengths = self
            .wavelengths
            .as_ref()
            .map(|wl| keep.iter().map(|&k| wl[k]).collect());
        Ok(out)
    }
}

/// Forward model: `out[p, k] = shading[p, k] * reflectance[p, k]`.
pub fn elementwise_mul(shading: &SpectralCube, reflectance: &SpectralCube) -> Result<SpectralCube> {
    shading.check_shape(reflectance, "elementwise_mul")?;
    let data = shading
        .data
        .iter()
        .zip(&reflectance.data)
        .map(|(s, r)| s * r)
        .collect();
    let mut out = SpectralCube::new(shading.height, shading.width, shading.bands, data)?;
    out.wavelengths = shading.wavelengths.clone();
    Ok(out)
}

/// Pointwise `luminance / max(reflectance, eps)`.
pub fn safe_divide(
    luminance: &SpectralCube,
    reflectance: &SpectralCube,
    eps: f64,
) -> Result<SpectralCube> {
    luminance.check_shape(reflectance, "safe_divide")?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "divide epsilon must be positive, got {eps}"
        )));
    }
    let data = luminance
        .data
        .iter()
        .zip(&reflectance.data)
        .map(|(l, r)| l / r.max(eps))
        .collect();
    let mut out = SpectralCube::new(luminance.height, luminance.width, luminance.bands, data)?;
    out.wavelengths = luminance.wavelengths.clone();
    Ok(out)
}

/// Default divisor floor: one millionth of the divisor cube's peak value.
pub fn default_divide_eps(reflectance: &SpectralCube) -> f64 {
    let peak = reflectance.max_value();
    if peak > 0.0 {
        1e-6 * peak
    } else {
        1e-12
    }
}

/// Evenly spaced wavelengths over `[start, end]`, used when a cube carries none.
pub fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..n)
            .map(|i| start + (end - start) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(h: usize, w: usize, k: usize, data: Vec<f64>) -> SpectralCube {
        SpectralCube::new(h, w, k, data).unwrap()
    }

    #[test]
    fn rejects_negative_and_nan() {
        let err = SpectralCube::new(1, 2, 1, vec![0.5, -1.0]).unwrap_err();
        assert!(matches!(err, Error::Validation { index: 1, .. }));
        let err = SpectralCube::new(1, 1, 2, vec![f64::NAN, 1.0]).unwrap_err();
        assert!(matches!(err, Error::Validation { index: 0, .. }));
        assert!(SpectralCube::new(2, 2, 2, vec![0.0; 7]).is_err());
    }

    #[test]
    fn wavelengths_must_increase() {
        let c = SpectralCube::zeros(1, 1, 3);
        assert!(c.clone().with_wavelengths(vec![400.0, 500.0, 500.0]).is_err());
        assert!(c.clone().with_wavelengths(vec![400.0, 500.0]).is_err());
        assert!(c.with_wavelengths(vec![400.0, 500.0, 600.0]).is_ok());
    }

    #[test]
    fn multiply_identity_and_values() {
        let r = cube(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        let ones = cube(1, 2, 2, vec![1.0; 4]);
        assert_eq!(elementwise_mul(&ones, &r).unwrap().data(), r.data());
        let s = cube(1, 1, 1, vec![2.0]);
        let r = cube(1, 1, 1, vec![3.0]);
        assert_eq!(elementwise_mul(&s, &r).unwrap().data(), &[6.0]);
        let other = cube(2, 1, 2, vec![1.0; 4]);
        assert!(elementwise_mul(&ones, &other).is_err());
    }

    #[test]
    fn divide_clamps_divisor() {
        let l = cube(1, 1, 2, vec![0.3, 0.7]);
        assert_eq!(safe_divide(&l, &l, 1e-8).unwrap().data(), &[1.0, 1.0]);
        let l = cube(1, 1, 1, vec![1.0]);
        let r = cube(1, 1, 1, vec![0.0]);
        let out = safe_divide(&l, &r, 1e-6).unwrap();
        assert!((out.data()[0] - 1e6).abs() < 1e-6);
        assert!(safe_divide(&l, &r, 0.0).is_err());
    }

    #[test]
    fn divide_inverts_multiply() {
        let s = cube(2, 2, 3, (0..12).map(|i| 0.1 + 0.07 * i as f64).collect());
        let r = cube(2, 2, 3, (0..12).map(|i| 0.9 - 0.05 * i as f64).collect());
        let l = elementwise_mul(&s, &r).unwrap();
        let back = safe_divide(&l, &r, 1e-6).unwrap();
        for (a, b) in back.data().iter().zip(s.data()) {
            assert!((a - b).abs() <= 1e-9 * b.abs());
        }
    }

    #[test]
    fn band_stride_keeps_first_band() {
        let c = cube(1, 1, 5, vec![0.0, 1.0, 2.0, 3.0, 4.0])
            .with_wavelengths(vec![400.0, 410.0, 420.0, 430.0, 440.0])
            .unwrap();
        let s = c.subsample_bands(2).unwrap();
        assert_eq!(s.data(), &[0.0, 2.0, 4.0]);
        assert_eq!(s.wavelengths().unwrap(), &[400.0, 420.0, 440.0]);
        assert!(c.subsample_bands(0).is_err());
    }
}
