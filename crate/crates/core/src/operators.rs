//! Sparse linear operators for every quadratic energy term.
//!
//! Unknowns are per-pixel coefficient vectors stacked pixel-major, so pixel
//! `p` owns columns `p*J..(p+1)*J`. Operators that act on neighbor pairs
//! emit one block of `K` rows per pair, in the order of the weight field.

use std::io::Write;

use crate::basis::BasisMatrix;
use crate::cube::SpectralCube;
use crate::error::{Error, Result};
use crate::field::CoefficientField;
use crate::sparse::CsrMatrix;
use crate::weights::WeightField;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    pub matrix: CsrMatrix,
    pub description: String,
}

impl SparseOperator {
    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.cols()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matrix.mul_vec(x)
    }

    /// `‖A x - b‖²`, or `‖A x‖²` without a target.
    pub fn squared_residual(&self, x: &[f64], target: Option<&[f64]>) -> f64 {
        let ax = self.apply(x);
        match target {
            Some(b) => ax.iter().zip(b).map(|(a, b)| (a - b) * (a - b)).sum(),
            None => ax.iter().map(|a| a * a).sum(),
        }
    }

    pub fn write_matrix_market<W: Write>(&self, out: W) -> Result<()> {
        self.matrix.write_matrix_market(out, &self.description)
    }
}

/// Symmetric positive semidefinite system `matrix · x = rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    pub description: String,
}

impl SparseSystem {
    pub fn new(matrix: CsrMatrix, rhs: Vec<f64>, description: impl Into<String>) -> Result<Self> {
        if matrix.rows() != matrix.cols() {
            return Err(Error::mismatch("system matrix (square)", matrix.rows(), matrix.cols()));
        }
        if rhs.len() != matrix.rows() {
            return Err(Error::mismatch("system rhs", matrix.rows(), rhs.len()));
        }
        Ok(SparseSystem {
            matrix,
            rhs,
            description: description.into(),
        })
    }

    pub fn unknowns(&self) -> usize {
        self.rhs.len()
    }
}

/// Which of the two complementary pair weights scales a term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairWeight {
    W,
    V,
}

impl PairWeight {
    pub fn values<'a>(&self, field: &'a WeightField) -> &'a [f64] {
        match self {
            PairWeight::W => field.w(),
            PairWeight::V => field.v(),
        }
    }
}

/// Pairwise term operator.
///
/// With a luminance cube, the block for pair `(p, q)` with weight `ω` computes
/// `ω (L_p B x_q - L_q B x_p)`, where `L_p = diag(l_p)`. Without one it
/// computes `ω (B x_q - B x_p)`.
pub fn assemble_pair_operator(
    luminance: Option<&SpectralCube>,
    basis: &BasisMatrix,
    weights: &WeightField,
    weighted_by: PairWeight,
) -> Result<SparseOperator> {
    let k = basis.bands();
    let j = basis.rank();
    let n = weights.pixel_count();
    if let Some(cube) = luminance {
        if cube.height() != weights.height() || cube.width() != weights.width() {
            return Err(Error::mismatch(
                "pair operator grid",
                format!("{}x{}", weights.height(), weights.width()),
                format!("{}x{}", cube.height(), cube.width()),
            ));
        }
        if cube.bands() != k {
            return Err(Error::mismatch("pair operator bands", k, cube.bands()));
        }
    }
    let omega = weighted_by.values(weights);
    let mut triplets = Vec::with_capacity(weights.len() * k * 2 * j);
    for (i, &(p, q)) in weights.pairs().iter().enumerate() {
        let wt = omega[i];
        for band in 0..k {
            let row = i * k + band;
            let (scale_q, scale_p) = match luminance {
                Some(cube) => (cube.pixel(p)[band], cube.pixel(q)[band]),
                None => (1.0, 1.0),
            };
            for c in 0..j {
                let b = basis.get(band, c);
                triplets.push((row, q * j + c, wt * scale_q * b));
                triplets.push((row, p * j + c, -wt * scale_p * b));
            }
        }
    }
    let matrix = CsrMatrix::from_triplets(weights.len() * k, n * j, triplets)?;
    let description = format!(
        "pair operator, weighted by {:?}, {} luminance, {}x{}",
        weighted_by,
        if luminance.is_some() { "with" } else { "without" },
        matrix.rows(),
        matrix.cols()
    );
    Ok(SparseOperator {
        matrix,
        description,
    })
}

fn block_diagonal(
    pixels: usize,
    k: usize,
    j: usize,
    mut entry: impl FnMut(usize, usize, usize) -> f64,
) -> Result<CsrMatrix> {
    let mut triplets = Vec::with_capacity(pixels * k * j);
    for p in 0..pixels {
        for band in 0..k {
            for c in 0..j {
                triplets.push((p * k + band, p * j + c, entry(p, band, c)));
            }
        }
    }
    CsrMatrix::from_triplets(pixels * k, pixels * j, triplets)
}

/// Generic constraint in reconstruction space: `M = blockdiag(B)` and
/// `C` the flattened luminance, so `M x ≈ C` asks `B x_p ≈ l_p` per pixel.
pub fn assemble_generic_constraint(
    cube: &SpectralCube,
    basis: &BasisMatrix,
) -> Result<(SparseOperator, Vec<f64>)> {
    if cube.bands() != basis.bands() {
        return Err(Error::mismatch("generic constraint bands", basis.bands(), cube.bands()));
    }
    let matrix = block_diagonal(cube.pixel_count(), basis.bands(), basis.rank(), |_, band, c| {
        basis.get(band, c)
    })?;
    let description = format!("generic constraint M, {}x{}", matrix.rows(), matrix.cols());
    Ok((
        SparseOperator {
            matrix,
            description,
        },
        cube.data().to_vec(),
    ))
}

/// Data operator for the bilinear term with one factor held fixed: block `p`
/// is `diag(B_fixed c_p) B_free`, so that applying it to the free
/// coefficients gives the per-pixel products `s_p .* r_p`.
pub fn assemble_data_operator(
    fixed: &CoefficientField,
    fixed_basis: &BasisMatrix,
    free_basis: &BasisMatrix,
) -> Result<SparseOperator> {
    if fixed.rank() != fixed_basis.rank() {
        return Err(Error::mismatch("data operator rank", fixed_basis.rank(), fixed.rank()));
    }
    if fixed_basis.bands() != free_basis.bands() {
        return Err(Error::mismatch(
            "data operator bands",
            fixed_basis.bands(),
            free_basis.bands(),
        ));
    }
    let k = free_basis.bands();
    let spectra: Vec<Vec<f64>> = (0..fixed.pixels())
        .map(|p| fixed_basis.expand(fixed.pixel(p)))
        .collect();
    let matrix = block_diagonal(fixed.pixels(), k, free_basis.rank(), |p, band, c| {
        spectra[p][band] * free_basis.get(band, c)
    })?;
    let description = format!("data operator Q, {}x{}", matrix.rows(), matrix.cols());
    Ok(SparseOperator {
        matrix,
        description,
    })
}

/// A homogeneous term `λ‖A x‖²`.
pub struct Term<'a> {
    pub operator: &'a SparseOperator,
    pub lambda: f64,
}

/// An affine term `λ‖A x - b‖²`.
pub struct AffineTerm<'a> {
    pub operator: &'a SparseOperator,
    pub target: &'a [f64],
    pub lambda: f64,
}

/// Normal equations of `Σ λ‖A x‖² + Σ λ‖A x - b‖²`:
/// `(Σ λ AᵀA) x = Σ λ Aᵀ b`.
pub fn build_normal_system(
    terms: &[Term<'_>],
    affine_terms: &[AffineTerm<'_>],
    description: &str,
) -> Result<SparseSystem> {
    let cols = terms
        .iter()
        .map(|t| t.operator.cols())
        .chain(affine_terms.iter().map(|t| t.operator.cols()))
        .next()
        .ok_or_else(|| Error::InvalidConfig("normal system needs at least one term".into()))?;
    let mut matrix = CsrMatrix::zeros(cols, cols);
    let mut rhs = vec![0.0; cols];
    for t in terms {
        if t.operator.cols() != cols {
            return Err(Error::mismatch("normal system columns", cols, t.operator.cols()));
        }
        matrix = matrix.add_scaled(&t.operator.matrix.gram(), t.lambda)?;
    }
    for t in affine_terms {
        if t.operator.cols() != cols {
            return Err(Error::mismatch("normal system columns", cols, t.operator.cols()));
        }
        if t.target.len() != t.operator.rows() {
            return Err(Error::mismatch("affine target", t.operator.rows(), t.target.len()));
        }
        matrix = matrix.add_scaled(&t.operator.matrix.gram(), t.lambda)?;
        let atb = t.operator.matrix.transpose_mul_vec(t.target);
        for (r, v) in rhs.iter_mut().zip(atb) {
            *r += t.lambda * v;
        }
    }
    SparseSystem::new(matrix, rhs, description)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cube::PixelSpectrum;
    use crate::weights::{compute_weight_field, WeightParams};
    use nalgebra::DMatrix;

    #[test]
    fn two_pixel_pair_block_by_hand() {
        // 1x2 image, K = 2, J = 1.
        let cube = SpectralCube::new(1, 2, 2, vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let basis = BasisMatrix::new(DMatrix::from_column_slice(2, 1, &[0.6, 0.8])).unwrap();
        let field = WeightField::from_w(1, 2, vec![0.25]).unwrap();
        let op = assemble_pair_operator(Some(&cube), &basis, &field, PairWeight::W).unwrap();
        let dense = op.matrix.to_dense();
        // row k: w * (l_p[k] B[k] x_q - l_q[k] B[k] x_p), p = 0, q = 1
        let expect = DMatrix::from_row_slice(
            2,
            2,
            &[
                -0.25 * 0.6 * 0.6,
                0.25 * 0.2 * 0.6,
                -0.25 * 0.8 * 0.8,
                0.25 * 0.4 * 0.8,
            ],
        );
        assert!((dense - expect).amax() < 1e-15);
        let x = [1.5, -0.5];
        let y = op.apply(&x);
        let by_hand0 = 0.25 * (0.2 * 0.6 * x[1] - 0.6 * 0.6 * x[0]);
        assert!((y[0] - by_hand0).abs() < 1e-15);
        let vop = assemble_pair_operator(None, &basis, &field, PairWeight::V).unwrap();
        assert!((vop.matrix.to_dense()[(0, 1)] - 0.75 * 0.6).abs() < 1e-15);
    }

    #[test]
    fn pair_operator_dimensions() {
        let cube = SpectralCube::new(4, 4, 6, vec![0.5; 96]).unwrap();
        let lib_basis = BasisMatrix::new(DMatrix::from_fn(6, 6, |r, c| {
            if r == c {
                1.0
            } else {
                0.0
            }
        }))
        .unwrap();
        let field = compute_weight_field(&cube, &WeightParams::default()).unwrap();
        let op = assemble_pair_operator(Some(&cube), &lib_basis, &field, PairWeight::W).unwrap();
        assert_eq!(op.rows(), 24 * 6);
        assert_eq!(op.cols(), 16 * 6);
    }

    #[test]
    fn constant_fields_are_annihilated() {
        let cube = SpectralCube::new(3, 3, 3, [0.2, 0.5, 0.7].repeat(9)).unwrap();
        let basis = crate::basis::shading_basis(&PixelSpectrum::new(vec![1.0, 2.0, 2.0]).unwrap())
            .unwrap();
        let field = compute_weight_field(&cube, &WeightParams::default()).unwrap();
        let x = vec![0.8; 9];
        for lum in [Some(&cube), None] {
            for wt in [PairWeight::W, PairWeight::V] {
                let op = assemble_pair_operator(lum, &basis, &field, wt).unwrap();
                assert!(op.apply(&x).iter().all(|v| v.abs() < 1e-10));
            }
        }
    }

    #[test]
    fn identity_basis_gives_identity_constraint() {
        let cube = SpectralCube::new(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let basis = BasisMatrix::new(DMatrix::identity(2, 2)).unwrap();
        let (m, c) = assemble_generic_constraint(&cube, &basis).unwrap();
        assert_eq!(m.matrix.to_dense(), DMatrix::identity(4, 4));
        assert_eq!(c, cube.data());
    }

    #[test]
    fn data_operator_with_unit_fixed_factor() {
        let ones = BasisMatrix::new(DMatrix::from_column_slice(2, 1, &[1.0, 1.0])).unwrap();
        let free = BasisMatrix::new(DMatrix::from_row_slice(2, 2, &[0.6, 0.8, 0.8, -0.6])).unwrap();
        let fixed = CoefficientField::new(3, 1, vec![1.0; 3]).unwrap();
        let q = assemble_data_operator(&fixed, &ones, &free).unwrap();
        let dense = q.matrix.to_dense();
        for p in 0..3 {
            let block = dense.view((2 * p, 2 * p), (2, 2));
            assert!((block - free.matrix()).amax() < 1e-15);
        }
        assert!(assemble_data_operator(&CoefficientField::zeros(3, 2), &ones, &free).is_err());
    }

    #[test]
    fn normal_system_identity() {
        let op = SparseOperator {
            matrix: CsrMatrix::identity(3),
            description: "I".into(),
        };
        let b = [1.0, 2.0, 3.0];
        let sys = build_normal_system(
            &[],
            &[AffineTerm {
                operator: &op,
                target: &b,
                lambda: 1.0,
            }],
            "identity",
        )
        .unwrap();
        assert_eq!(sys.matrix.to_dense(), DMatrix::identity(3, 3));
        assert_eq!(sys.rhs, b);
        let other = SparseOperator {
            matrix: CsrMatrix::identity(2),
            description: "small".into(),
        };
        assert!(build_normal_system(
            &[Term {
                operator: &op,
                lambda: 1.0
            }],
            &[AffineTerm {
                operator: &other,
                target: &[0.0, 0.0],
                lambda: 1.0
            }],
            "bad"
        )
        .is_err());
    }
}
