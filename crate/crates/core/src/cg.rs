//! Iterative solvers for symmetric positive (semi)definite systems.

use crate::error::{Error, Result};
use crate::operators::SparseSystem;

#[derive(Debug, Clone, PartialEq)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `‖Qx - b‖ / ‖b‖` at return (absolute when `b = 0`).
    pub residual: f64,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite values in {what}")))
    }
}

/// Jacobi-preconditioned conjugate gradient from `x0`, stopping when
/// `‖Qx - b‖ <= tol · ‖b‖`.
///
/// Each iterate minimizes the quadratic `xᵀQx - 2bᵀx` over a growing Krylov
/// space, so the objective never increases. Diagonal systems are solved
/// exactly in one step. Hitting `max_iter` is not an error: the last iterate
/// is returned with `converged = false`.
pub fn cg_solve(system: &SparseSystem, x0: &[f64], tol: f64, max_iter: usize) -> Result<CgOutcome> {
    let n = system.unknowns();
    if x0.len() != n {
        return Err(Error::mismatch("cg initial guess", n, x0.len()));
    }
    check_finite(&system.rhs, "right-hand side")?;
    check_finite(x0, "initial guess")?;
    let b = &system.rhs;
    let b_norm = dot(b, b).sqrt();
    let scale = if b_norm > 0.0 { b_norm } else { 1.0 };
    let target = tol * scale;

    let mut x = x0.to_vec();
    let mut r = system.matrix.mul_vec(&x);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let mut rr = dot(&r, &r);
    if rr.sqrt() <= target {
        return Ok(CgOutcome {
            x,
            iterations: 0,
            residual: rr.sqrt() / scale,
            converged: true,
        });
    }
    // rows with a non-positive diagonal are left unscaled
    let inv_diag: Vec<f64> = system
        .matrix
        .diagonal()
        .into_iter()
        .map(|d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let precondition = |r: &[f64], z: &mut Vec<f64>| {
        z.clear();
        z.extend(r.iter().zip(&inv_diag).map(|(a, d)| a * d));
    };
    let mut z = Vec::with_capacity(n);
    precondition(&r, &mut z);
    let mut rz = dot(&r, &z);
    let mut p = z.clone();
    let mut qp = vec![0.0; n];
    for it in 1..=max_iter {
        system.matrix.mul_vec_into(&p, &mut qp);
        let curvature = dot(&p, &qp);
        if !curvature.is_finite() {
            return Err(Error::Numerical(format!("non-finite curvature at iteration {it}")));
        }
        if curvature <= 0.0 {
            let pp = dot(&p, &p);
            // A zero-curvature direction of a consistent PSD system means the
            // residual is already numerically zero.
            if curvature >= -1e-12 * pp && rr.sqrt() <= tol.sqrt() * scale {
                return Ok(CgOutcome {
                    x,
                    iterations: it - 1,
                    residual: rr.sqrt() / scale,
                    converged: false,
                });
            }
            return Err(Error::CgBreakdown {
                iteration: it,
                curvature,
                residual: rr.sqrt() / scale,
            });
        }
        let alpha = rz / curvature;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * qp[i];
        }
        let rr_next = dot(&r, &r);
        if !rr_next.is_finite() {
            return Err(Error::Numerical(format!("non-finite residual at iteration {it}")));
        }
        if rr_next.sqrt() <= target {
            return Ok(CgOutcome {
                x,
                iterations: it,
                residual: rr_next.sqrt() / scale,
                converged: true,
            });
        }
        precondition(&r, &mut z);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rr = rr_next;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Ok(CgOutcome {
        x,
        iterations: max_iter,
        residual: rr.sqrt() / scale,
        converged: false,
    })
}

/// Steepest descent with exact line search on the same quadratic.
pub fn steepest_descent_solve(
    system: &SparseSystem,
    x0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<CgOutcome> {
    let n = system.unknowns();
    if x0.len() != n {
        return Err(Error::mismatch("descent initial guess", n, x0.len()));
    }
    check_finite(&system.rhs, "right-hand side")?;
    let b = &system.rhs;
    let b_norm = dot(b, b).sqrt();
    let scale = if b_norm > 0.0 { b_norm } else { 1.0 };
    let mut x = x0.to_vec();
    let mut r = vec![0.0; n];
    let mut qr = vec![0.0; n];
    for it in 0..=max_iter {
        system.matrix.mul_vec_into(&x, &mut r);
        for (ri, bi) in r.iter_mut().zip(b) {
            *ri = bi - *ri;
        }
        let rr = dot(&r, &r);
        if !rr.is_finite() {
            return Err(Error::Numerical(format!("non-finite residual at iteration {it}")));
        }
        if rr.sqrt() <= tol * scale || it == max_iter {
            return Ok(CgOutcome {
                x,
                iterations: it,
                residual: rr.sqrt() / scale,
                converged: rr.sqrt() <= tol * scale,
            });
        }
        system.matrix.mul_vec_into(&r, &mut qr);
        let curvature = dot(&r, &qr);
        if curvature <= 0.0 {
            return Err(Error::CgBreakdown {
                iteration: it,
                curvature,
                residual: rr.sqrt() / scale,
            });
        }
        let step = rr / curvature;
        for (xi, ri) in x.iter_mut().zip(&r) {
            *xi += step * ri;
        }
    }
    unreachable!("loop returns at it == max_iter")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::CsrMatrix;

    fn system(matrix: CsrMatrix, rhs: Vec<f64>) -> SparseSystem {
        SparseSystem::new(matrix, rhs, "test").unwrap()
    }

    #[test]
    fn identity_in_one_iteration() {
        let s = system(CsrMatrix::identity(4), vec![1.0, -2.0, 3.0, 0.5]);
        let out = cg_solve(&s, &[0.0; 4], 1e-12, 10).unwrap();
        assert_eq!(out.iterations, 1);
        assert_eq!(out.x, s.rhs);
        assert!(out.converged);
    }

    #[test]
    fn diagonal_closed_form() {
        let s = system(CsrMatrix::from_diagonal(&[2.0, 4.0, 8.0]), vec![2.0, 4.0, 1.0]);
        let out = cg_solve(&s, &[0.0; 3], 1e-14, 10).unwrap();
        assert_eq!(out.x, vec![1.0, 1.0, 0.125]);
        assert_eq!(out.iterations, 1);
    }

    #[test]
    fn zero_rhs_returns_immediately() {
        let s = system(CsrMatrix::identity(2), vec![0.0, 0.0]);
        let out = cg_solve(&s, &[0.0; 2], 1e-8, 10).unwrap();
        assert_eq!(out.iterations, 0);
        assert!(out.converged);
    }

    #[test]
    fn indefinite_breaks_down() {
        let s = system(CsrMatrix::from_diagonal(&[1.0, -1.0]), vec![0.0, 1.0]);
        assert!(matches!(
            cg_solve(&s, &[0.0; 2], 1e-10, 10),
            Err(Error::CgBreakdown { .. })
        ));
    }

    #[test]
    fn non_finite_rejected() {
        let s = system(CsrMatrix::identity(2), vec![f64::NAN, 1.0]);
        assert!(matches!(cg_solve(&s, &[0.0; 2], 1e-8, 10), Err(Error::Numerical(_))));
    }

    #[test]
    fn max_iter_flags_unconverged() {
        let m = CsrMatrix::from_triplets(
            3,
            3,
            vec![(0, 0, 2.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 2.0), (1, 2, 1.0), (2, 1, 1.0), (2, 2, 2.0)],
        )
        .unwrap();
        let s = system(m, vec![1.0, 0.0, 0.0]);
        let out = cg_solve(&s, &[0.0; 3], 1e-14, 1).unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations, 1);
    }

    #[test]
    fn descent_matches_cg() {
        let m = CsrMatrix::from_triplets(
            2,
            2,
            vec![(0, 0, 3.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 2.0)],
        )
        .unwrap();
        let s = system(m, vec![1.0, 1.0]);
        let gd = steepest_descent_solve(&s, &[0.0; 2], 1e-12, 1000).unwrap();
        assert!(gd.converged);
        assert!((gd.x[0] - 0.2).abs() < 1e-10 && (gd.x[1] - 0.4).abs() < 1e-10);
    }
}
