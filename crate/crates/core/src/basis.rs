//! Low-rank spectral bases.
//!
//! Shading spectra are modelled as a per-pixel scalar times the normalized
//! illumination spectrum. Reflectance spectra live in a linear subspace
//! estimated from a library of measured (or synthetic) reflectances: the
//! first column is the normalized library mean, the remaining columns are
//! the leading principal directions of the centered library after the mean
//! direction has been projected out. The expansion stays purely linear, and
//! the columns are orthonormal.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::cube::{PixelSpectrum, SpectralCube};
use crate::error::{Error, Result};
use crate::field::CoefficientField;
use crate::io::{read_table_csv, select_by_wavelength, write_table_csv, SpectrumTable};

/// Default reflectance subspace dimension.
pub const DEFAULT_REFLECTANCE_RANK: usize = 8;

const ORTHONORMAL_TOL: f64 = 1e-10;

/// A K×J matrix whose columns span a spectral subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    columns: DMatrix<f64>,
    orthonormal: bool,
    explained_variance: Vec<f64>,
}

impl BasisMatrix {
    pub fn new(columns: DMatrix<f64>) -> Result<Self> {
        let (k, j) = columns.shape();
        if j == 0 || j > k {
            return Err(Error::mismatch("basis shape (rank <= bands)", k, j));
        }
        if columns.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("basis has non-finite entries".into()));
        }
        let achievable = columns.clone().svd(false, false).rank(1e-12 * columns.norm());
        if achievable < j {
            return Err(Error::RankDeficient {
                requested: j,
                achievable,
            });
        }
        let gram = columns.transpose() * &columns;
        let orthonormal = (gram - DMatrix::identity(j, j)).amax() <= ORTHONORMAL_TOL;
        Ok(BasisMatrix {
            columns,
            orthonormal,
            explained_variance: Vec::new(),
        })
    }

    pub fn bands(&self) -> usize {
        self.columns.nrows()
    }

    pub fn rank(&self) -> usize {
        self.columns.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.columns
    }

    pub fn is_orthonormal(&self) -> bool {
        self.orthonormal
    }

    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.columns[(k, j)]
    }

    /// Variance captured by each principal column (empty for non-PCA bases).
    /// The leading mean column is not a principal direction and has no entry.
    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    /// `B c` written into `out`.
    pub fn expand_into(&self, coeffs: &[f64], out: &mut [f64]) {
        let (k, j) = self.columns.shape();
        for (row, o) in out.iter_mut().enumerate().take(k) {
            let mut acc = 0.0;
            for (col, c) in coeffs.iter().enumerate().take(j) {
                acc += self.columns[(row, col)] * c;
            }
            *o = acc;
        }
    }

    pub fn expand(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.bands()];
        self.expand_into(coeffs, &mut out);
        out
    }

    pub fn to_table(&self, wavelengths: Option<&[f64]>) -> SpectrumTable {
        let wavelengths = wavelengths
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| (0..self.bands()).map(|k| k as f64).collect());
        SpectrumTable {
            wavelengths,
            rows: self
                .columns
                .column_iter()
                .map(|c| c.iter().copied().collect())
                .collect(),
        }
    }

    /// Writes one basis column per row under a wavelength header.
    pub fn write_csv<W: std::io::Write>(&self, wavelengths: Option<&[f64]>, out: W) -> Result<()> {
        write_table_csv(&self.to_table(wavelengths), out)
    }
}

/// Single-column basis: the illumination spectrum scaled to unit L2 norm.
pub fn shading_basis(illum: &PixelSpectrum) -> Result<BasisMatrix> {
    let norm = illum.norm();
    if norm == 0.0 {
        return Err(Error::ZeroSpectrum);
    }
    let col = DMatrix::from_iterator(illum.len(), 1, illum.values().iter().map(|v| v / norm));
    BasisMatrix::new(col)
}

/// Measured reflectance spectra, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectanceLibrary {
    wavelengths: Option<Vec<f64>>,
    samples: DMatrix<f64>,
}

impl ReflectanceLibrary {
    pub fn new(samples: DMatrix<f64>, wavelengths: Option<Vec<f64>>) -> Result<Self> {
        if let Some(i) = samples.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Validation {
                index: i,
                message: "library values must be finite and nonnegative".into(),
            });
        }
        if let Some(wl) = &wavelengths {
            crate::cube::validate_wavelengths(wl, samples.ncols())?;
        }
        Ok(ReflectanceLibrary {
            wavelengths,
            samples,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], wavelengths: Option<Vec<f64>>) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != k) {
            return Err(Error::mismatch("library row length", k, bad.len()));
        }
        let samples = DMatrix::from_fn(rows.len(), k, |i, j| rows[i][j]);
        ReflectanceLibrary::new(samples, wavelengths)
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let table = read_table_csv(input)?;
        ReflectanceLibrary::from_rows(&table.rows, Some(table.wavelengths))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        ReflectanceLibrary::read_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let wavelengths = self
            .wavelengths
            .clone()
            .unwrap_or_else(|| (0..self.bands()).map(|k| k as f64).collect());
        let rows = self
            .samples
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        write_table_csv(&SpectrumTable { wavelengths, rows }, out)
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn bands(&self) -> usize {
        self.samples.ncols()
    }

    pub fn wavelengths(&self) -> Option<&[f64]> {
        self.wavelengths.as_deref()
    }

    /// Keeps the columns whose wavelengths match `targets`.
    pub fn select_wavelengths(&self, targets: &[f64]) -> Result<Self> {
        let wl = self
            .wavelengths
            .as_ref()
            .ok_or_else(|| Error::Format("library has no wavelengths".into()))?;
        let idx = select_by_wavelength(wl, targets)?;
        Ok(ReflectanceLibrary {
            wavelengths: Some(targets.to_vec()),
            samples: self.samples.select_columns(idx.iter()),
        })
    }

    pub fn subsample_bands(&self, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidConfig("band stride must be at least 1".into()));
        }
        let idx: Vec<usize> = (0..self.bands()).step_by(stride).collect();
        Ok(ReflectanceLibrary {
            wavelengths: self
                .wavelengths
                .as_ref()
                .map(|wl| idx.iter().map(|&i| wl[i]).collect()),
            samples: self.samples.select_columns(idx.iter()),
        })
    }
}

fn fix_sign(mut col: DVector<f64>) -> DVector<f64> {
    let imax = col.iamax();
    if col[imax] < 0.0 {
        col.neg_mut();
    }
    col
}

/// Reflectance basis of the given rank: normalized mean followed by the top
/// `rank - 1` principal directions orthogonal to it.
pub fn reflectance_basis_pca(lib: &ReflectanceLibrary, rank: usize) -> Result<BasisMatrix> {
    let (m, k) = lib.samples.shape();
    if rank == 0 {
        return Err(Error::InvalidConfig("reflectance rank must be at least 1".into()));
    }
    if rank > m.min(k) {
        return Err(Error::RankDeficient {
            requested: rank,
            achievable: m.min(k),
        });
    }
    let mean = lib.samples.row_mean().transpose();
    let mean_norm = mean.norm();
    if mean_norm == 0.0 {
        return Err(Error::RankDeficient {
            requested: rank,
            achievable: 0,
        });
    }
    let mean_dir = &mean / mean_norm;

    // Center, then remove the component along the mean direction.
    let mut centered = lib.samples.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
        let along = row.dot(&mean_dir.transpose());
        row -= along * mean_dir.transpose();
    }

    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let top = order.first().map_or(0.0, |&i| svd.singular_values[i]);
    let tol = top * (m.max(k) as f64) * f64::EPSILON * 16.0;
    let numeric_rank = order
        .iter()
        .filter(|&&i| svd.singular_values[i] > tol && svd.singular_values[i] > 0.0)
        .count();
    if rank - 1 > numeric_rank {
        return Err(Error::RankDeficient {
            requested: rank,
            achievable: numeric_rank + 1,
        });
    }

    let mut columns = DMatrix::zeros(k, rank);
    columns.set_column(0, &fix_sign(mean_dir));
    let denom = (m.max(2) - 1) as f64;
    let mut explained = Vec::with_capacity(rank - 1);
    for (j, &i) in order.iter().take(rank - 1).enumerate() {
        let dir = v_t.row(i).transpose();
        columns.set_column(j + 1, &fix_sign(dir));
        explained.push(svd.singular_values[i].powi(2) / denom);
    }
    let mut basis = BasisMatrix::new(columns)?;
    basis.explained_variance = explained;
    Ok(basis)
}

/// Least-squares coefficients of `spectrum` in the basis.
pub fn project(spectrum: &[f64], basis: &BasisMatrix) -> Result<Vec<f64>> {
    if spectrum.len() != basis.bands() {
        return Err(Error::mismatch("project", basis.bands(), spectrum.len()));
    }
    let s = DVector::from_column_slice(spectrum);
    if basis.orthonormal {
        return Ok((basis.columns.transpose() * s).iter().copied().collect());
    }
    let svd = basis.columns.clone().svd(true, true);
    let c = svd
        .solve(&s, 1e-14)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(c.iter().copied().collect())
}

pub fn project_spectrum(spectrum: &PixelSpectrum, basis: &BasisMatrix) -> Result<Vec<f64>> {
    project(spectrum.values(), basis)
}

pub fn project_cube(cube: &SpectralCube, basis: &BasisMatrix) -> Result<CoefficientField> {
    if cube.bands() != basis.bands() {
        return Err(Error::mismatch("project_cube bands", basis.bands(), cube.bands()));
    }
    let mut values = Vec::with_capacity(cube.pixel_count() * basis.rank());
    for px in cube.pixels() {
        values.extend(project(px, basis)?);
    }
    CoefficientField::new(cube.pixel_count(), basis.rank(), values)
}

/// Reconstructed cube plus the fraction of samples that were negative and clamped to zero.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub cube: SpectralCube,
    pub clamped_fraction: f64,
}

pub fn reconstruct_field(
    coeffs: &CoefficientField,
    basis: &BasisMatrix,
    height: usize,
    width: usize,
) -> Result<Reconstruction> {
    if coeffs.rank() != basis.rank() {
        return Err(Error::mismatch("reconstruct rank", basis.rank(), coeffs.rank()));
    }
    if coeffs.pixels() != height * width {
        return Err(Error::mismatch("reconstruct pixels", height * width, coeffs.pixels()));
    }
    let k = basis.bands();
    let mut data = vec![0.0; coeffs.pixels() * k];
    let mut clamped = 0usize;
    for (p, chunk) in data.chunks_exact_mut(k.max(1)).enumerate() {
        basis.expand_into(coeffs.pixel(p), chunk);
        for v in chunk.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
                clamped += 1;
            }
        }
    }
    let total = data.len().max(1);
    if clamped > 0 {
        log::debug!("reconstruction clamped {clamped} of {total} samples");
    }
    Ok(Reconstruction {
        cube: SpectralCube::new(height, width, k, data)?,
        clamped_fraction: clamped as f64 / total as f64,
    })
}
