//! Compressed sparse row matrices, assembled from coordinate triplets.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Sorts triplets by (row, col) and sums duplicates.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        for (i, &(r, c, v)) in triplets.iter().enumerate() {
            if r >= rows || c >= cols {
                return Err(Error::Validation {
                    index: i,
                    message: format!("triplet ({r}, {c}) outside {rows}x{cols}"),
                });
            }
            if !v.is_finite() {
                return Err(Error::Validation {
                    index: i,
                    message: "triplet value is not finite".into(),
                });
            }
        }
        triplets.sort_by_key(|t| (t.0, t.1));
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().expect("duplicate follows an entry") += v;
            } else {
                row_ptr[r + 1] += 1;
                col_idx.push(c);
                values.push(v);
                last = Some((r, c));
            }
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Ok(CsrMatrix {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        CsrMatrix {
            rows,
            cols,
            row_ptr: vec![0; rows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            rows: n,
            cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        CsrMatrix {
            rows: n,
            cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: diag.to_vec(),
        }
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut triplets = Vec::new();
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                if m[(r, c)] != 0.0 {
                    triplets.push((r, c, m[(r, c)]));
                }
            }
        }
        CsrMatrix::from_triplets(m.nrows(), m.ncols(), triplets)
            .expect("dense entries are in range")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        (&self.col_idx[span.clone()], &self.values[span])
    }

    /// Canonical (row, col, value) listing.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.rows)
            .flat_map(|r| {
                let (c, v) = self.row(r);
                c.iter().zip(v).map(move |(&c, &v)| (r, c, v))
            })
            .collect()
    }

    /// `y = A x`. Rows are evaluated independently, each in fixed order.
    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        let kernel = |(r, out): (usize, &mut f64)| {
            let (c, v) = self.row(r);
            *out = c.iter().zip(v).map(|(&c, &v)| v * x[c]).sum();
        };
        if self.nnz() > 50_000 {
            y.par_iter_mut().enumerate().for_each(kernel);
        } else {
            y.iter_mut().enumerate().for_each(kernel);
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        self.mul_vec_into(x, &mut y);
        y
    }

    /// `Aᵀ x`, accumulated row by row.
    pub fn transpose_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for (r, xr) in x.iter().enumerate() {
            let (c, v) = self.row(r);
            for (&c, &v) in c.iter().zip(v) {
                y[c] += v * xr;
            }
        }
        y
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.col_idx {
            counts[c + 1] += 1;
        }
        for c in 0..self.cols {
            counts[c + 1] += counts[c];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut col_idx = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for r in 0..self.rows {
            let (c, v) = self.row(r);
            for (&c, &v) in c.iter().zip(v) {
                let slot = next[c];
                col_idx[slot] = r;
                values[slot] = v;
                next[c] += 1;
            }
        }
        CsrMatrix {
            rows: self.cols,
            cols: self.rows,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// `AᵀA`, by row-wise sparse accumulation over the transpose.
    pub fn gram(&self) -> CsrMatrix {
        let at = self.transpose();
        let n = self.cols;
        let rows: Vec<(Vec<usize>, Vec<f64>)> = (0..n)
            .into_par_iter()
            .map_init(
                || (vec![0.0f64; n], vec![false; n]),
                |(acc, seen), i| {
                    let mut touched = Vec::new();
                    let (rs, avs) = at.row(i);
                    for (&r, &a) in rs.iter().zip(avs) {
                        let (cs, bvs) = self.row(r);
                        for (&j, &b) in cs.iter().zip(bvs) {
                            if !seen[j] {
                                seen[j] = true;
                                touched.push(j);
                            }
                            acc[j] += a * b;
                        }
                    }
                    touched.sort_unstable();
                    let vals = touched
                        .iter()
                        .map(|&j| {
                            seen[j] = false;
                            std::mem::take(&mut acc[j])
                        })
                        .collect();
                    (touched, vals)
                },
            )
            .collect();
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        let total: usize = rows.iter().map(|r| r.0.len()).sum();
        let mut col_idx = Vec::with_capacity(total);
        let mut values = Vec::with_capacity(total);
        for (c, v) in rows {
            col_idx.extend(c);
            values.extend(v);
            row_ptr.push(col_idx.len());
        }
        CsrMatrix {
            rows: n,
            cols: n,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// `self + factor * other`.
    pub fn add_scaled(&self, other: &CsrMatrix, factor: f64) -> Result<CsrMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::mismatch(
                "sparse add",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let mut row_ptr = Vec::with_capacity(self.rows + 1);
        row_ptr.push(0);
        let mut col_idx = Vec::with_capacity(self.nnz() + other.nnz());
        let mut values = Vec::with_capacity(self.nnz() + other.nnz());
        for r in 0..self.rows {
            let (ca, va) = self.row(r);
            let (cb, vb) = other.row(r);
            let (mut i, mut j) = (0, 0);
            while i < ca.len() || j < cb.len() {
                if j >= cb.len() || (i < ca.len() && ca[i] < cb[j]) {
                    col_idx.push(ca[i]);
                    values.push(va[i]);
                    i += 1;
                } else if i >= ca.len() || cb[j] < ca[i] {
                    col_idx.push(cb[j]);
                    values.push(factor * vb[j]);
                    j += 1;
                } else {
                    col_idx.push(ca[i]);
                    values.push(va[i] + factor * vb[j]);
                    i += 1;
                    j += 1;
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(CsrMatrix {
            rows: self.rows,
            cols: self.cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn scaled(&self, factor: f64) -> CsrMatrix {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= factor);
        out
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|r| {
                let (c, v) = self.row(r);
                c.binary_search(&r).map_or(0.0, |i| v[i])
            })
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for (r, c, v) in self.triplets() {
            m[(r, c)] += v;
        }
        m
    }

    /// Largest `|A[i,j] - A[j,i]|` relative to the largest entry magnitude.
    pub fn asymmetry(&self) -> f64 {
        if self.rows != self.cols {
            return f64::INFINITY;
        }
        let t = self.transpose();
        let diff = self.add_scaled(&t, -1.0).expect("square shapes match");
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let worst = diff.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            0.0
        } else {
            worst / scale
        }
    }

    /// MatrixMarket `coordinate real general` text, 1-based indices.
    pub fn write_matrix_market<W: Write>(&self, mut out: W, comment: &str) -> Result<()> {
        writeln!(out, "%%MatrixMarket matrix coordinate real general")?;
        for line in comment.lines() {
            writeln!(out, "% {line}")?;
        }
        writeln!(out, "{} {} {}", self.rows, self.cols, self.nnz())?;
        for (r, c, v) in self.triplets() {
            writeln!(out, "{} {} {:e}", r + 1, c + 1, v)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_merge_duplicates() {
        let m = CsrMatrix::from_triplets(2, 3, vec![(1, 2, 1.0), (0, 0, 2.0), (1, 2, 0.5)]).unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.triplets(), vec![(0, 0, 2.0), (1, 2, 1.5)]);
        assert!(CsrMatrix::from_triplets(2, 2, vec![(2, 0, 1.0)]).is_err());
        assert!(CsrMatrix::from_triplets(2, 2, vec![(0, 0, f64::NAN)]).is_err());
    }

    #[test]
    fn products_match_dense() {
        let d = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.0, -1.0, 3.0, 0.5]);
        let m = CsrMatrix::from_dense(&d);
        let x = [0.3, -0.2];
        let y = m.mul_vec(&x);
        let yd = &d * nalgebra::DVector::from_column_slice(&x);
        for (a, b) in y.iter().zip(yd.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        let g = m.gram().to_dense();
        assert!((g - d.transpose() * &d).amax() < 1e-14);
        assert_eq!(m.transpose().to_dense(), d.transpose());
        let z = [1.0, 2.0, 3.0];
        let tz = m.transpose_mul_vec(&z);
        let tzd = d.transpose() * nalgebra::DVector::from_column_slice(&z);
        assert!((tz[0] - tzd[0]).abs() < 1e-14 && (tz[1] - tzd[1]).abs() < 1e-14);
    }

    #[test]
    fn add_scaled_merges_patterns() {
        let a = CsrMatrix::from_triplets(2, 2, vec![(0, 0, 1.0), (1, 1, 2.0)]).unwrap();
        let b = CsrMatrix::from_triplets(2, 2, vec![(0, 1, 1.0), (1, 1, 1.0)]).unwrap();
        let c = a.add_scaled(&b, 3.0).unwrap();
        assert_eq!(c.triplets(), vec![(0, 0, 1.0), (0, 1, 3.0), (1, 1, 5.0)]);
        assert_eq!(c.diagonal(), vec![1.0, 5.0]);
        assert!(c.asymmetry() > 0.0);
        assert_eq!(CsrMatrix::identity(3).asymmetry(), 0.0);
    }

    #[test]
    fn matrix_market_header() {
        let m = CsrMatrix::from_triplets(2, 2, vec![(1, 0, 0.5)]).unwrap();
        let mut buf = Vec::new();
        m.write_matrix_market(&mut buf, "test").unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "%%MatrixMarket matrix coordinate real general");
        assert_eq!(lines[2], "2 2 1");
        assert_eq!(lines[3], "2 1 5e-1");
    }
}
