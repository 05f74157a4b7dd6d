//! Initial estimates, alternating refinement and energy evaluation.
//!
//! With shading coefficients `S` and reflectance coefficients `R`, the total
//! energy is
//!
//! ```text
//! E = ‖W_{L,Br} R‖² + ‖W_{Bs} S‖²                     (shading constancy, E_sc)
//!   + λ1 (‖V_{L,Bs} S‖² + ‖V_{Br} R‖²)                (reflectance constancy, E_rc)
//!   + λd ‖Q_S R - L‖² + λd ‖Q_R S - L‖²               (data, 2 λd E_data)
//! ```
//!
//! Both data terms equal `Σ_p ‖s_p .* r_p - l_p‖²`. Holding one factor fixed
//! leaves a quadratic in the other, so refinement alternates exact block
//! solves and the energy cannot increase.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::basis::{
    reconstruct_field, reflectance_basis_pca, shading_basis, BasisMatrix, ReflectanceLibrary,
    DEFAULT_REFLECTANCE_RANK,
};
use crate::cg::{cg_solve, steepest_descent_solve, CgOutcome};
use crate::cube::{PixelSpectrum, SpectralCube};
use crate::error::{Error, Result};
use crate::field::CoefficientField;
use crate::metrics::{lmse, LmseConfig};
use crate::operators::{
    assemble_data_operator, assemble_generic_constraint, assemble_pair_operator,
    build_normal_system, AffineTerm, PairWeight, SparseOperator, SparseSystem, Term,
};
use crate::sparse::CsrMatrix;
use crate::weights::{compute_weight_field, WeightField, WeightParams};

/// Relative energy increase tolerated across one outer iteration.
pub const MONOTONE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubproblemSolver {
    ConjugateGradient,
    /// Steepest descent with exact line search, capped by `inner_max_iter`.
    GradientDescent,
}

/// Which pair weight scales which family of Retinex terms.
///
/// `w` decreases with spectral distance, so it is large for pairs with
/// similar spectra. `EdgeAware` applies the shading-constancy terms with the
/// complementary weight `v` (large across spectral edges) and the
/// reflectance-constancy terms with `w`. `AsWritten` does the opposite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightRouting {
    EdgeAware,
    AsWritten,
}

impl WeightRouting {
    pub fn shading_constancy(self) -> PairWeight {
        match self {
            WeightRouting::EdgeAware => PairWeight::V,
            WeightRouting::AsWritten => PairWeight::W,
        }
    }

    pub fn reflectance_constancy(self) -> PairWeight {
        match self {
            WeightRouting::EdgeAware => PairWeight::W,
            WeightRouting::AsWritten => PairWeight::V,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_data: f64,
    /// Error norm exponent; only 2 is supported.
    pub norm: u32,
    /// Relative residual target for every linear solve.
    pub cg_tol: f64,
    /// Iteration cap for the initial estimates; `None` means 10 × unknowns.
    pub cg_max_iter: Option<usize>,
    pub outer_max_iter: usize,
    /// Iteration cap for each refinement block solve.
    pub inner_max_iter: usize,
    /// Stop refining once the relative gradient of the total energy drops below this.
    pub grad_tol: f64,
    /// Stop refining once the relative coefficient change drops below this.
    pub step_tol: f64,
    pub subproblem: SubproblemSolver,
    pub routing: WeightRouting,
    /// Rebalance the shading/reflectance scale split after every outer iteration.
    pub rebalance: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            lambda1: 2.0,
            lambda2: 0.01,
            lambda_data: 1.0,
            norm: 2,
            cg_tol: 1e-8,
            cg_max_iter: None,
            outer_max_iter: 50,
            inner_max_iter: 1000,
            grad_tol: 0.01,
            step_tol: 1e-6,
            subproblem: SubproblemSolver::ConjugateGradient,
            routing: WeightRouting::EdgeAware,
            rebalance: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_data", self.lambda_data),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.norm != 2 {
            return Err(Error::InvalidConfig(format!(
                "only the L2 norm (d = 2) is implemented, got d = {}",
                self.norm
            )));
        }
        for (name, v) in [
            ("cg_tol", self.cg_tol),
            ("grad_tol", self.grad_tol),
            ("step_tol", self.step_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.inner_max_iter == 0 || self.cg_max_iter == Some(0) {
            return Err(Error::InvalidConfig("iteration caps must be positive".into()));
        }
        Ok(())
    }

    fn initial_cap(&self, unknowns: usize) -> usize {
        self.cg_max_iter.unwrap_or(10 * unknowns.max(1))
    }
}

/// Energy split into its three families. `total = sc + λ1·rc + 2·λd·data`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyBreakdown {
    pub total: f64,
    pub shading_constancy: f64,
    pub reflectance_constancy: f64,
    pub data: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub energy: EnergyBreakdown,
    pub cg_iterations: usize,
    pub relative_gradient: f64,
    pub lmse_shading: Option<f64>,
    pub lmse_reflectance: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    GradientTolerance,
    StepTolerance,
    OuterBudget,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StopReason::GradientTolerance => "gradient tolerance reached",
            StopReason::StepTolerance => "coefficient change below step tolerance",
            StopReason::OuterBudget => "outer iteration budget exhausted",
        };
        f.write_str(s)
    }
}

/// Per-iteration record of the refinement. Entry 0 is the initial estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveTrace {
    pub records: Vec<TraceRecord>,
    pub stop_reason: StopReason,
}

impl SolveTrace {
    pub fn outer_iterations(&self) -> usize {
        self.records.last().map_or(0, |r| r.iteration)
    }

    pub fn converged(&self) -> bool {
        self.stop_reason != StopReason::OuterBudget
    }

    /// `iter,E,E_sc,E_rc,E_data,cg_iters,lmse_shading,lmse_reflectance`
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "iter",
            "E",
            "E_sc",
            "E_rc",
            "E_data",
            "cg_iters",
            "lmse_shading",
            "lmse_reflectance",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.iteration.to_string(),
                format!("{:e}", r.energy.total),
                format!("{:e}", r.energy.shading_constancy),
                format!("{:e}", r.energy.reflectance_constancy),
                format!("{:e}", r.energy.data),
                r.cg_iterations.to_string(),
                opt(r.lmse_shading),
                opt(r.lmse_reflectance),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Ground-truth factors used to annotate the trace with LMSE.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruth<'a> {
    pub shading: &'a SpectralCube,
    pub reflectance: &'a SpectralCube,
    pub lmse: LmseConfig,
}

fn check_inputs(cube: &SpectralCube, basis: &BasisMatrix, weights: &WeightField) -> Result<()> {
    if basis.bands() != cube.bands() {
        return Err(Error::mismatch("basis bands", cube.bands(), basis.bands()));
    }
    if weights.height() != cube.height() || weights.width() != cube.width() {
        return Err(Error::mismatch(
            "weight field grid",
            format!("{}x{}", cube.height(), cube.width()),
            format!("{}x{}", weights.height(), weights.width()),
        ));
    }
    Ok(())
}

fn check_field(field: &CoefficientField, basis: &BasisMatrix, pixels: usize) -> Result<()> {
    if field.rank() != basis.rank() || field.pixels() != pixels {
        return Err(Error::mismatch(
            "coefficient field",
            format!("{pixels} pixels x rank {}", basis.rank()),
            format!("{} pixels x rank {}", field.pixels(), field.rank()),
        ));
    }
    Ok(())
}

/// `(W_{Bs}, V_{L,Bs})`: shading-constancy and reflectance-constancy operators on `S`.
fn shading_pair_operators(
    cube: &SpectralCube,
    shading_basis: &BasisMatrix,
    weights: &WeightField,
    routing: WeightRouting,
) -> Result<(SparseOperator, SparseOperator)> {
    let sc = assemble_pair_operator(None, shading_basis, weights, routing.shading_constancy())?;
    let rc = assemble_pair_operator(
        Some(cube),
        shading_basis,
        weights,
        routing.reflectance_constancy(),
    )?;
    Ok((sc, rc))
}

/// `(W_{L,Br}, V_{Br})`: shading-constancy and reflectance-constancy operators on `R`.
fn reflectance_pair_operators(
    cube: &SpectralCube,
    reflectance_basis: &BasisMatrix,
    weights: &WeightField,
    routing: WeightRouting,
) -> Result<(SparseOperator, SparseOperator)> {
    let sc = assemble_pair_operator(
        Some(cube),
        reflectance_basis,
        weights,
        routing.shading_constancy(),
    )?;
    let rc = assemble_pair_operator(None, reflectance_basis, weights, routing.reflectance_constancy())?;
    Ok((sc, rc))
}

fn run_initial_solve(system: &SparseSystem, config: &SolverConfig) -> Result<CgOutcome> {
    let x0 = vec![0.0; system.unknowns()];
    let out = cg_solve(system, &x0, config.cg_tol, config.initial_cap(system.unknowns()))?;
    if !out.converged {
        log::warn!(
            "{}: CG stopped at {} iterations with relative residual {:e}",
            system.description,
            out.iterations,
            out.residual
        );
    }
    Ok(out)
}

fn solve_initial_shading(
    cube: &SpectralCube,
    shading_basis: &BasisMatrix,
    sc: &SparseOperator,
    rc: &SparseOperator,
    config: &SolverConfig,
) -> Result<(CoefficientField, usize)> {
    let (m, c) = assemble_generic_constraint(cube, shading_basis)?;
    let system = build_normal_system(
        &[
            Term { operator: sc, lambda: 1.0 },
            Term { operator: rc, lambda: config.lambda1 },
        ],
        &[AffineTerm { operator: &m, target: &c, lambda: config.lambda2 }],
        "initial shading",
    )?;
    let out = run_initial_solve(&system, config)?;
    Ok((
        CoefficientField::new(cube.pixel_count(), shading_basis.rank(), out.x)?,
        out.iterations,
    ))
}

#[allow(clippy::too_many_arguments)]
fn solve_initial_reflectance(
    cube: &SpectralCube,
    reflectance_basis: &BasisMatrix,
    shading: &CoefficientField,
    shading_basis: &BasisMatrix,
    sc: &SparseOperator,
    rc: &SparseOperator,
    config: &SolverConfig,
) -> Result<(CoefficientField, usize)> {
    let (m, c) = assemble_generic_constraint(cube, reflectance_basis)?;
    let q = assemble_data_operator(shading, shading_basis, reflectance_basis)?;
    let system = build_normal_system(
        &[
            Term { operator: sc, lambda: 1.0 },
            Term { operator: rc, lambda: config.lambda1 },
        ],
        &[
            AffineTerm { operator: &m, target: &c, lambda: config.lambda2 },
            AffineTerm { operator: &q, target: cube.data(), lambda: config.lambda_data },
        ],
        "initial reflectance",
    )?;
    let out = run_initial_solve(&system, config)?;
    Ok((
        CoefficientField::new(cube.pixel_count(), reflectance_basis.rank(), out.x)?,
        out.iterations,
    ))
}

/// Initial shading: pair terms plus the generic constraint, solved from zero.
pub fn initial_shading(
    cube: &SpectralCube,
    shading_basis: &BasisMatrix,
    weights: &WeightField,
    config: &SolverConfig,
) -> Result<CoefficientField> {
    config.validate()?;
    check_inputs(cube, shading_basis, weights)?;
    let (sc, rc) = shading_pair_operators(cube, shading_basis, weights, config.routing)?;
    Ok(solve_initial_shading(cube, shading_basis, &sc, &rc, config)?.0)
}

/// Initial reflectance: pair terms, the generic constraint, and the data
/// term defined by a previous shading estimate.
pub fn initial_reflectance(
    cube: &SpectralCube,
    reflectance_basis: &BasisMatrix,
    weights: &WeightField,
    shading: &CoefficientField,
    shading_basis: &BasisMatrix,
    config: &SolverConfig,
) -> Result<CoefficientField> {
    config.validate()?;
    check_inputs(cube, reflectance_basis, weights)?;
    check_inputs(cube, shading_basis, weights)?;
    check_field(shading, shading_basis, cube.pixel_count())?;
    let (sc, rc) = reflectance_pair_operators(cube, reflectance_basis, weights, config.routing)?;
    Ok(solve_initial_reflectance(cube, reflectance_basis, shading, shading_basis, &sc, &rc, config)?.0)
}

/// All operators for one decomposition, assembled once.
pub struct Problem<'a> {
    cube: &'a SpectralCube,
    shading_basis: &'a BasisMatrix,
    reflectance_basis: &'a BasisMatrix,
    config: SolverConfig,
    /// W_{Bs}
    shading_sc: SparseOperator,
    /// V_{L,Bs}
    shading_rc: SparseOperator,
    /// W_{L,Br}
    reflectance_sc: SparseOperator,
    /// V_{Br}
    reflectance_rc: SparseOperator,
    shading_pair_gram: CsrMatrix,
    reflectance_pair_gram: CsrMatrix,
}

impl<'a> Problem<'a> {
    pub fn new(
        cube: &'a SpectralCube,
        shading_basis: &'a BasisMatrix,
        reflectance_basis: &'a BasisMatrix,
        weights: &WeightField,
        config: &SolverConfig,
    ) -> Result<Self> {
        config.validate()?;
        check_inputs(cube, shading_basis, weights)?;
        check_inputs(cube, reflectance_basis, weights)?;
        let (shading_sc, shading_rc) =
            shading_pair_operators(cube, shading_basis, weights, config.routing)?;
        let (reflectance_sc, reflectance_rc) =
            reflectance_pair_operators(cube, reflectance_basis, weights, config.routing)?;
        let shading_pair_gram = shading_sc
            .matrix
            .gram()
            .add_scaled(&shading_rc.matrix.gram(), config.lambda1)?;
        let reflectance_pair_gram = reflectance_sc
            .matrix
            .gram()
            .add_scaled(&reflectance_rc.matrix.gram(), config.lambda1)?;
        Ok(Problem {
            cube,
            shading_basis,
            reflectance_basis,
            config: config.clone(),
            shading_sc,
            shading_rc,
            reflectance_sc,
            reflectance_rc,
            shading_pair_gram,
            reflectance_pair_gram,
        })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn pixels(&self) -> usize {
        self.cube.pixel_count()
    }

    pub fn initial_shading(&self) -> Result<(CoefficientField, usize)> {
        solve_initial_shading(
            self.cube,
            self.shading_basis,
            &self.shading_sc,
            &self.shading_rc,
            &self.config,
        )
    }

    pub fn initial_reflectance(&self, shading: &CoefficientField) -> Result<(CoefficientField, usize)> {
        check_field(shading, self.shading_basis, self.pixels())?;
        solve_initial_reflectance(
            self.cube,
            self.reflectance_basis,
            shading,
            self.shading_basis,
            &self.reflectance_sc,
            &self.reflectance_rc,
            &self.config,
        )
    }

    fn block_system(
        &self,
        pair_gram: &CsrMatrix,
        fixed: &CoefficientField,
        fixed_basis: &BasisMatrix,
        free_basis: &BasisMatrix,
        description: &str,
    ) -> Result<SparseSystem> {
        let q = assemble_data_operator(fixed, fixed_basis, free_basis)?;
        let weight = 2.0 * self.config.lambda_data;
        let matrix = pair_gram.add_scaled(&q.matrix.gram(), weight)?;
        let rhs = q
            .matrix
            .transpose_mul_vec(self.cube.data())
            .into_iter()
            .map(|v| weight * v)
            .collect();
        SparseSystem::new(matrix, rhs, description)
    }

    fn block_solve(&self, system: &SparseSystem, warm: &[f64]) -> Result<CgOutcome> {
        match self.config.subproblem {
            SubproblemSolver::ConjugateGradient => {
                cg_solve(system, warm, self.config.cg_tol, self.config.inner_max_iter)
            }
            SubproblemSolver::GradientDescent => {
                steepest_descent_solve(system, warm, self.config.cg_tol, self.config.inner_max_iter)
            }
        }
    }

    /// Minimizes the total energy over `S` with `R` fixed, warm-started at `warm`.
    pub fn solve_shading_block(
        &self,
        reflectance: &CoefficientField,
        warm: &CoefficientField,
    ) -> Result<(CoefficientField, usize)> {
        check_field(reflectance, self.reflectance_basis, self.pixels())?;
        check_field(warm, self.shading_basis, self.pixels())?;
        let system = self.block_system(
            &self.shading_pair_gram,
            reflectance,
            self.reflectance_basis,
            self.shading_basis,
            "shading block",
        )?;
        let out = self.block_solve(&system, warm.values())?;
        Ok((
            CoefficientField::new(self.pixels(), self.shading_basis.rank(), out.x)?,
            out.iterations,
        ))
    }

    /// Minimizes the total energy over `R` with `S` fixed, warm-started at `warm`.
    pub fn solve_reflectance_block(
        &self,
        shading: &CoefficientField,
        warm: &CoefficientField,
    ) -> Result<(CoefficientField, usize)> {
        check_field(shading, self.shading_basis, self.pixels())?;
        check_field(warm, self.reflectance_basis, self.pixels())?;
        let system = self.block_system(
            &self.reflectance_pair_gram,
            shading,
            self.shading_basis,
            self.reflectance_basis,
            "reflectance block",
        )?;
        let out = self.block_solve(&system, warm.values())?;
        Ok((
            CoefficientField::new(self.pixels(), self.reflectance_basis.rank(), out.x)?,
            out.iterations,
        ))
    }

    fn data_residual(&self, shading: &CoefficientField, reflectance: &CoefficientField) -> Result<(SparseOperator, Vec<f64>)> {
        let q = assemble_data_operator(shading, self.shading_basis, self.reflectance_basis)?;
        let mut res = q.apply(reflectance.values());
        for (r, l) in res.iter_mut().zip(self.cube.data()) {
            *r -= l;
        }
        Ok((q, res))
    }

    pub fn energy(
        &self,
        shading: &CoefficientField,
        reflectance: &CoefficientField,
    ) -> Result<EnergyBreakdown> {
        check_field(shading, self.shading_basis, self.pixels())?;
        check_field(reflectance, self.reflectance_basis, self.pixels())?;
        let s = shading.values();
        let r = reflectance.values();
        let sc = self.reflectance_sc.squared_residual(r, None)
            + self.shading_sc.squared_residual(s, None);
        let rc = self.shading_rc.squared_residual(s, None)
            + self.reflectance_rc.squared_residual(r, None);
        let (_, res) = self.data_residual(shading, reflectance)?;
        let data: f64 = res.iter().map(|v| v * v).sum();
        Ok(EnergyBreakdown {
            total: sc + self.config.lambda1 * rc + 2.0 * self.config.lambda_data * data,
            shading_constancy: sc,
            reflectance_constancy: rc,
            data,
        })
    }

    /// Analytic gradient `(∂E/∂S, ∂E/∂R)`.
    pub fn gradient(
        &self,
        shading: &CoefficientField,
        reflectance: &CoefficientField,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok(self.gradient_parts(shading, reflectance)?.0)
    }

    /// Gradient plus the norm of its constituent parts, used for the relative stopping test.
    #[allow(clippy::type_complexity)]
    fn gradient_parts(
        &self,
        shading: &CoefficientField,
        reflectance: &CoefficientField,
    ) -> Result<((Vec<f64>, Vec<f64>), f64)> {
        let lam = 4.0 * self.config.lambda_data;
        let l = self.cube.data();
        let q_r = assemble_data_operator(reflectance, self.reflectance_basis, self.shading_basis)?;
        let q_s = assemble_data_operator(shading, self.shading_basis, self.reflectance_basis)?;

        let mut parts = [0.0f64; 3];
        let mut block = |gram: &CsrMatrix, q: &SparseOperator, x: &[f64]| -> Vec<f64> {
            let pair: Vec<f64> = gram.mul_vec(x).into_iter().map(|v| 2.0 * v).collect();
            let qtqx: Vec<f64> = q
                .matrix
                .transpose_mul_vec(&q.apply(x))
                .into_iter()
                .map(|v| lam * v)
                .collect();
            let qtl: Vec<f64> = q
                .matrix
                .transpose_mul_vec(l)
                .into_iter()
                .map(|v| lam * v)
                .collect();
            for (acc, part) in parts.iter_mut().zip([&pair, &qtqx, &qtl]) {
                *acc += part.iter().map(|v| v * v).sum::<f64>();
            }
            pair.iter()
                .zip(&qtqx)
                .zip(&qtl)
                .map(|((a, b), c)| a + b - c)
                .collect()
        };
        let gs = block(&self.shading_pair_gram, &q_r, shading.values());
        let gr = block(&self.reflectance_pair_gram, &q_s, reflectance.values());
        let scale: f64 = parts.iter().map(|p| p.sqrt()).sum();
        Ok(((gs, gr), scale))
    }

    /// `‖∇E‖` divided by the summed norms of the gradient's pair, data and
    /// target parts; 0 means stationary, 1 means no cancellation at all.
    pub fn relative_gradient(
        &self,
        shading: &CoefficientField,
        reflectance: &CoefficientField,
    ) -> Result<f64> {
        let ((gs, gr), scale) = self.gradient_parts(shading, reflectance)?;
        let norm = gs.iter().chain(&gr).map(|v| v * v).sum::<f64>().sqrt();
        Ok(if scale > 0.0 { norm / scale } else { 0.0 })
    }

    /// Moves along `(c S, R / c)`, which leaves the data terms unchanged, to
    /// the `c > 0` minimizing the pair terms. Returns the factor applied.
    pub fn rebalance(
        &self,
        shading: &CoefficientField,
        reflectance: &CoefficientField,
    ) -> (CoefficientField, CoefficientField, f64) {
        let quad = |gram: &CsrMatrix, x: &[f64]| -> f64 {
            gram.mul_vec(x).iter().zip(x).map(|(a, b)| a * b).sum()
        };
        let a = quad(&self.shading_pair_gram, shading.values());
        let b = quad(&self.reflectance_pair_gram, reflectance.values());
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return (shading.clone(), reflectance.clone(), 1.0);
        }
        let c = (b / a).sqrt().sqrt();
        (shading.scaled(c), reflectance.scaled(1.0 / c), c)
    }

    fn record(
        &self,
        iteration: usize,
        shading: &CoefficientField,
        reflectance: &CoefficientField,
        cg_iterations: usize,
        truth: Option<&GroundTruth<'_>>,
    ) -> Result<TraceRecord> {
        let energy = self.energy(shading, reflectance)?;
        if !energy.total.is_finite() {
            return Err(Error::Numerical(format!("energy is not finite at iteration {iteration}")));
        }
        let (lmse_shading, lmse_reflectance) = match truth {
            Some(gt) => {
                let (s, r) = self.reconstruct(shading, reflectance)?;
                (
                    Some(lmse(&s.cube, gt.shading, &gt.lmse)?),
                    Some(lmse(&r.cube, gt.reflectance, &gt.lmse)?),
                )
            }
            None => (None, None),
        };
        Ok(TraceRecord {
            iteration,
            energy,
            cg_iterations,
            relative_gradient: self.relative_gradient(shading, reflectance)?,
            lmse_shading,
            lmse_reflectance,
        })
    }

    pub fn reconstruct(
        &self,
        shading: &CoefficientField,
        reflectance: &CoefficientField,
    ) -> Result<(crate::basis::Reconstruction, crate::basis::Reconstruction)> {
        let (h, w) = (self.cube.height(), self.cube.width());
        let mut s = reconstruct_field(shading, self.shading_basis, h, w)?;
        let mut r = reconstruct_field(reflectance, self.reflectance_basis, h, w)?;
        if let Some(wl) = self.cube.wavelengths() {
            s.cube = s.cube.with_wavelengths(wl.to_vec())?;
            r.cube = r.cube.with_wavelengths(wl.to_vec())?;
        }
        Ok((s, r))
    }

    /// Alternating block minimization: shading first, then reflectance, then
    /// an optional scale rebalance, until a stopping rule fires.
    pub fn refine(
        &self,
        shading: CoefficientField,
        reflectance: CoefficientField,
        truth: Option<&GroundTruth<'_>>,
    ) -> Result<Refinement> {
        check_field(&shading, self.shading_basis, self.pixels())?;
        check_field(&reflectance, self.reflectance_basis, self.pixels())?;
        let mut s = shading;
        let mut r = reflectance;
        let mut records = vec![self.record(0, &s, &r, 0, truth)?];
        let mut stop_reason = StopReason::OuterBudget;
        if records[0].relative_gradient < self.config.grad_tol {
            stop_reason = StopReason::GradientTolerance;
        }
        let mut iteration = 0;
        while stop_reason == StopReason::OuterBudget && iteration < self.config.outer_max_iter {
            iteration += 1;
            let before = records.last().expect("trace starts non-empty").energy.total;
            let (s_new, it_s) = self.solve_shading_block(&r, &s)?;
            let (r_new, it_r) = self.solve_reflectance_block(&s_new, &r)?;
            let (s_new, r_new) = if self.config.rebalance {
                let (a, b, _) = self.rebalance(&s_new, &r_new);
                (a, b)
            } else {
                (s_new, r_new)
            };
            let rec = self.record(iteration, &s_new, &r_new, it_s + it_r, truth)?;
            let after = rec.energy.total;
            if after > before + MONOTONE_TOL * before.abs() {
                return Err(Error::EnergyIncrease {
                    iteration,
                    before,
                    after,
                });
            }
            let change = relative_change(&s, &r, &s_new, &r_new);
            s = s_new;
            r = r_new;
            log::debug!(
                "outer {iteration}: E = {:e}, relative gradient {:e}, change {:e}",
                rec.energy.total,
                rec.relative_gradient,
                change
            );
            if rec.relative_gradient < self.config.grad_tol {
                stop_reason = StopReason::GradientTolerance;
            } else if change < self.config.step_tol {
                stop_reason = StopReason::StepTolerance;
            }
            records.push(rec);
        }
        Ok(Refinement {
            shading: s,
            reflectance: r,
            trace: SolveTrace {
                records,
                stop_reason,
            },
        })
    }
}

fn relative_change(
    s0: &CoefficientField,
    r0: &CoefficientField,
    s1: &CoefficientField,
    r1: &CoefficientField,
) -> f64 {
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (a, b) in s0.values().iter().zip(s1.values()).chain(r0.values().iter().zip(r1.values())) {
        diff += (a - b) * (a - b);
        norm += b * b;
    }
    if norm > 0.0 {
        (diff / norm).sqrt()
    } else {
        diff.sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct Refinement {
    pub shading: CoefficientField,
    pub reflectance: CoefficientField,
    pub trace: SolveTrace,
}

/// Evaluates the total energy and its three families.
pub fn total_energy(
    cube: &SpectralCube,
    shading: &CoefficientField,
    reflectance: &CoefficientField,
    shading_basis: &BasisMatrix,
    reflectance_basis: &BasisMatrix,
    weights: &WeightField,
    config: &SolverConfig,
) -> Result<EnergyBreakdown> {
    Problem::new(cube, shading_basis, reflectance_basis, weights, config)?.energy(shading, reflectance)
}

/// Gradient of the total energy with respect to `(S, R)`.
pub fn energy_gradient(
    cube: &SpectralCube,
    shading: &CoefficientField,
    reflectance: &CoefficientField,
    shading_basis: &BasisMatrix,
    reflectance_basis: &BasisMatrix,
    weights: &WeightField,
    config: &SolverConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    Problem::new(cube, shading_basis, reflectance_basis, weights, config)?
        .gradient(shading, reflectance)
}

#[allow(clippy::too_many_arguments)]
pub fn refine_alternating(
    cube: &SpectralCube,
    shading: CoefficientField,
    reflectance: CoefficientField,
    shading_basis: &BasisMatrix,
    reflectance_basis: &BasisMatrix,
    weights: &WeightField,
    config: &SolverConfig,
    truth: Option<&GroundTruth<'_>>,
) -> Result<Refinement> {
    Problem::new(cube, shading_basis, reflectance_basis, weights, config)?
        .refine(shading, reflectance, truth)
}

/// Everything `decompose` needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecomposeConfig {
    pub weights: WeightParams,
    pub solver: SolverConfig,
    pub reflectance_rank: usize,
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        DecomposeConfig {
            weights: WeightParams::default(),
            solver: SolverConfig::default(),
            reflectance_rank: DEFAULT_REFLECTANCE_RANK,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    pub shading: SpectralCube,
    pub reflectance: SpectralCube,
    pub shading_coefficients: CoefficientField,
    pub reflectance_coefficients: CoefficientField,
    /// Fractions of reconstructed samples clamped from negative to zero.
    pub shading_clamped: f64,
    pub reflectance_clamped: f64,
    pub trace: SolveTrace,
}

/// Full pipeline: bases from the illumination and library, then
/// [`decompose_with_bases`].
pub fn decompose(
    cube: &SpectralCube,
    illum: &PixelSpectrum,
    library: &ReflectanceLibrary,
    config: &DecomposeConfig,
) -> Result<Decomposition> {
    let (bs, br) = bases_for_cube(cube, illum, library, config.reflectance_rank)
        .map_err(|e| e.in_stage("bases"))?;
    decompose_with_bases(cube, &bs, &br, config, None)
}

/// Builds `(B_s, B_r)` matching the cube's bands. When both the cube and the
/// library carry wavelengths, the library columns are selected by wavelength.
pub fn bases_for_cube(
    cube: &SpectralCube,
    illum: &PixelSpectrum,
    library: &ReflectanceLibrary,
    reflectance_rank: usize,
) -> Result<(BasisMatrix, BasisMatrix)> {
    if illum.len() != cube.bands() {
        return Err(Error::mismatch("illumination bands", cube.bands(), illum.len()));
    }
    let library = match (cube.wavelengths(), library.wavelengths()) {
        (Some(wl), Some(_)) => library.select_wavelengths(wl)?,
        _ => library.clone(),
    };
    if library.bands() != cube.bands() {
        return Err(Error::mismatch("library bands", cube.bands(), library.bands()));
    }
    Ok((shading_basis(illum)?, reflectance_basis_pca(&library, reflectance_rank)?))
}

/// Weights, initial estimates, refinement and reconstruction with fixed bases.
pub fn decompose_with_bases(
    cube: &SpectralCube,
    shading_basis: &BasisMatrix,
    reflectance_basis: &BasisMatrix,
    config: &DecomposeConfig,
    truth: Option<&GroundTruth<'_>>,
) -> Result<Decomposition> {
    let weights =
        compute_weight_field(cube, &config.weights).map_err(|e| e.in_stage("weights"))?;
    let problem = Problem::new(cube, shading_basis, reflectance_basis, &weights, &config.solver)
        .map_err(|e| e.in_stage("assembly"))?;
    let (s0, it_s) = problem
        .initial_shading()
        .map_err(|e| e.in_stage("initial shading"))?;
    let (r0, it_r) = problem
        .initial_reflectance(&s0)
        .map_err(|e| e.in_stage("initial reflectance"))?;
    log::info!("initial estimates: {it_s} + {it_r} CG iterations");
    let refined = problem
        .refine(s0, r0, truth)
        .map_err(|e| e.in_stage("refinement"))?;
    log::info!(
        "refinement: {} outer iterations, {}",
        refined.trace.outer_iterations(),
        refined.trace.stop_reason
    );
    let (s, r) = problem
        .reconstruct(&refined.shading, &refined.reflectance)
        .map_err(|e| e.in_stage("reconstruction"))?;
    if s.clamped_fraction > 0.0 || r.clamped_fraction > 0.0 {
        log::warn!(
            "clamped negative samples: shading {:.3}%, reflectance {:.3}%",
            100.0 * s.clamped_fraction,
            100.0 * r.clamped_fraction
        );
    }
    Ok(Decomposition {
        shading: s.cube,
        reflectance: r.cube,
        shading_coefficients: refined.shading,
        reflectance_coefficients: refined.reflectance,
        shading_clamped: s.clamped_fraction,
        reflectance_clamped: r.clamped_fraction,
        trace: refined.trace,
    })
}
