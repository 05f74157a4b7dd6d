//! Grid search over the weight sigmoid parameters against ground truth.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::basis::BasisMatrix;
use crate::cube::{linspace, SpectralCube};
use crate::error::{Error, Result};
use crate::metrics::{combined_lmse, LmseConfig};
use crate::solve::{decompose_with_bases, DecomposeConfig, SolverConfig};
use crate::weights::WeightParams;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "LRIID_THREADS";

/// 20 values evenly spaced over [1000, 10000].
pub fn default_alphas() -> Vec<f64> {
    linspace(1000.0, 10000.0, 20)
}

/// 50 values log-spaced over [1e-5, 1e-2].
pub fn default_betas() -> Vec<f64> {
    linspace(-5.0, -2.0, 50).into_iter().map(|e| 10f64.powf(e)).collect()
}

/// Worker count from `LRIID_THREADS`, if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub beta: f64,
    /// Mean of shading and reflectance LMSE; `None` when the run failed.
    pub lmse: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub best: WeightParams,
    pub best_lmse: f64,
    /// Row-major over `(alpha, beta)` in grid order.
    pub table: Vec<SweepPoint>,
}

impl SweepResult {
    /// `alpha,beta,lmse,status`
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["alpha", "beta", "lmse", "status"])?;
        for p in &self.table {
            w.write_record([
                p.alpha.to_string(),
                p.beta.to_string(),
                p.lmse.map(|v| v.to_string()).unwrap_or_default(),
                p.status.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Inputs shared by every grid point.
pub struct SweepInputs<'a> {
    pub cube: &'a SpectralCube,
    pub gt_shading: &'a SpectralCube,
    pub gt_reflectance: &'a SpectralCube,
    pub shading_basis: &'a BasisMatrix,
    pub reflectance_basis: &'a BasisMatrix,
}

/// Decomposes once per `(alpha, beta)` and scores each run by combined LMSE.
/// Grid points run in parallel; failures are recorded, not propagated. Ties
/// go to the smaller alpha, then the smaller beta.
pub fn sweep_params(
    inputs: &SweepInputs<'_>,
    alphas: &[f64],
    betas: &[f64],
    solver: &SolverConfig,
    lmse_cfg: &LmseConfig,
) -> Result<SweepResult> {
    if alphas.is_empty() || betas.is_empty() {
        return Err(Error::InvalidConfig("sweep grids must be non-empty".into()));
    }
    solver.validate()?;
    lmse_cfg.validate()?;
    inputs.cube.check_shape(inputs.gt_shading, "sweep ground-truth shading")?;
    inputs.cube.check_shape(inputs.gt_reflectance, "sweep ground-truth reflectance")?;

    let grid: Vec<(f64, f64)> = alphas
        .iter()
        .flat_map(|&a| betas.iter().map(move |&b| (a, b)))
        .collect();
    let evaluate = |&(alpha, beta): &(f64, f64)| -> SweepPoint {
        let run = || -> Result<f64> {
            let config = DecomposeConfig {
                weights: WeightParams::new(alpha, beta)?,
                solver: solver.clone(),
                reflectance_rank: inputs.reflectance_basis.rank(),
            };
            let d = decompose_with_bases(
                inputs.cube,
                inputs.shading_basis,
                inputs.reflectance_basis,
                &config,
                None,
            )?;
            combined_lmse(
                &d.shading,
                inputs.gt_shading,
                &d.reflectance,
                inputs.gt_reflectance,
                lmse_cfg,
            )
        };
        match run() {
            Ok(v) => SweepPoint { alpha, beta, lmse: Some(v), status: "ok".into() },
            Err(e) => {
                log::warn!("sweep point alpha={alpha} beta={beta} failed: {e}");
                SweepPoint { alpha, beta, lmse: None, status: format!("failed: {e}") }
            }
        }
    };
    let table: Vec<SweepPoint> = match threads_from_env() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
            .install(|| grid.par_iter().map(evaluate).collect()),
        None => grid.par_iter().map(evaluate).collect(),
    };

    let mut best: Option<(f64, f64, f64)> = None;
    for p in &table {
        if let Some(v) = p.lmse {
            // strict improvement keeps the earlier (smaller) grid point on ties
            let better = match best {
                None => true,
                Some((bv, ba, bb)) => {
                    v < bv || (v == bv && (p.alpha, p.beta) < (ba, bb))
                }
            };
            if better {
                best = Some((v, p.alpha, p.beta));
            }
        }
    }
    let (best_lmse, alpha, beta) = best.ok_or(Error::SweepFailed)?;
    Ok(SweepResult {
        best: WeightParams::new(alpha, beta)?,
        best_lmse,
        table,
    })
}
