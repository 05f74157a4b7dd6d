//! Synthetic scenes with known factors, and a dense reference decomposer.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::basis::{project, BasisMatrix, ReflectanceLibrary};
use crate::cube::{linspace, PixelSpectrum, SpectralCube};
use crate::error::{Error, Result};
use crate::field::CoefficientField;
use crate::solve::SolverConfig;
use crate::weights::{cosine_distance_slices, WeightField};

pub const DEFAULT_LIBRARY_SEED: u64 = 1986;
pub const DEFAULT_LIBRARY_SIZE: usize = 400;

const LIBRARY_CSV: &str = include_str!("../fixtures/library.csv");
const ILLUM_CSV: &str = include_str!("../fixtures/illum.csv");

/// 31 samples over 450–700 nm.
pub fn default_wavelengths() -> Vec<f64> {
    linspace(450.0, 700.0, 31)
}

/// Smooth random reflectances: each is a baseline plus 3–5 Gaussian bumps,
/// clipped to [0, 1]. Bump parameters are drawn in nanometres, so the same
/// seed evaluated on a sub-grid gives the sub-sampled library.
pub fn synthetic_library(wavelengths: &[f64], samples: usize, seed: u64) -> Result<ReflectanceLibrary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..samples)
        .map(|_| smooth_spectrum(&mut rng, wavelengths, 0.0, 1.0))
        .collect();
    ReflectanceLibrary::from_rows(&rows, Some(wavelengths.to_vec()))
}

fn smooth_spectrum(rng: &mut ChaCha8Rng, wavelengths: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let bumps = rng.random_range(3..=5);
    let base = rng.random_range(0.0..0.3);
    let params: Vec<(f64, f64, f64)> = (0..bumps)
        .map(|_| {
            (
                rng.random_range(430.0..720.0),
                rng.random_range(20.0..80.0),
                rng.random_range(0.1..0.8),
            )
        })
        .collect();
    wavelengths
        .iter()
        .map(|&l| {
            let v: f64 = base
                + params
                    .iter()
                    .map(|&(c, w, a)| a * (-0.5 * ((l - c) / w).powi(2)).exp())
                    .sum::<f64>();
            v.clamp(lo, hi)
        })
        .collect()
}

/// The library shipped with the crate (31 bands, 400 samples).
pub fn shipped_library() -> Result<ReflectanceLibrary> {
    ReflectanceLibrary::read_csv(LIBRARY_CSV.as_bytes())
}

/// The illumination spectrum shipped with the crate.
pub fn shipped_illumination() -> Result<crate::io::SampledSpectrum> {
    crate::io::read_spectrum_csv(ILLUM_CSV.as_bytes())
}

/// Blackbody-like daylight at 5500 K, peak-normalized to 1.
pub fn daylight_like(wavelengths: &[f64]) -> Result<PixelSpectrum> {
    const HC_OVER_K: f64 = 1.438_776_9e-2; // m·K
    let t = 5500.0;
    let raw: Vec<f64> = wavelengths
        .iter()
        .map(|&nm| {
            let l = nm * 1e-9;
            1.0 / (l.powi(5) * ((HC_OVER_K / (l * t)).exp() - 1.0))
        })
        .collect();
    let peak = raw.iter().cloned().fold(0.0, f64::max);
    PixelSpectrum::new(raw.into_iter().map(|v| v / peak).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShadingProfile {
    SmoothGradient,
    CastShadow,
    Spotlight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub illum: Vec<f64>,
    #[serde(default)]
    pub wavelengths: Option<Vec<f64>>,
    pub n_regions: usize,
    pub shading_profile: ShadingProfile,
    #[serde(default)]
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub in_model: bool,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 || self.bands < 1 {
            return Err(Error::InvalidConfig(format!(
                "scene must be at least 2x2 with one band, got {}x{}x{}",
                self.height, self.width, self.bands
            )));
        }
        if self.illum.len() != self.bands {
            return Err(Error::mismatch("scene illumination", self.bands, self.illum.len()));
        }
        if let Some(wl) = &self.wavelengths {
            if wl.len() != self.bands {
                return Err(Error::mismatch("scene wavelengths", self.bands, wl.len()));
            }
        }
        if self.n_regions == 0 || self.n_regions > self.height * self.width {
            return Err(Error::InvalidConfig(format!(
                "n_regions must be in 1..={}, got {}",
                self.height * self.width,
                self.n_regions
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub luminance: SpectralCube,
    pub gt_shading: SpectralCube,
    pub gt_reflectance: SpectralCube,
    /// Region index per pixel.
    pub regions: Vec<usize>,
    /// Reflectance spectrum per region.
    pub region_spectra: Vec<Vec<f64>>,
    /// Shading magnitude σ(p) per pixel; `gt_shading[p] = σ(p) · b_s`.
    pub shading_scale: Vec<f64>,
}

const REFLECTANCE_MIN: f64 = 0.1;
const REFLECTANCE_MAX: f64 = 1.0;

fn in_range(r: &[f64]) -> bool {
    r.iter().all(|v| (REFLECTANCE_MIN..=REFLECTANCE_MAX).contains(v))
}

/// A spectrum inside both the basis span and the allowed range, used as the
/// anchor towards which out-of-range projections are pulled.
fn span_anchor(basis: &BasisMatrix) -> Result<Vec<f64>> {
    let k = basis.bands();
    let candidates = [
        basis.expand(&project(&vec![0.5; k], basis)?),
        (0..k).map(|i| basis.get(i, 0)).collect::<Vec<f64>>(),
    ];
    for c in candidates {
        let (lo, hi) = c
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if lo > 0.0 {
            // map into the middle of the band [0.1, 1]
            let scale = (0.55 / (0.5 * (lo + hi))).min(0.95 / hi);
            let scaled: Vec<f64> = c.iter().map(|v| v * scale).collect();
            if in_range(&scaled) {
                return Ok(scaled);
            }
        }
    }
    Err(Error::Validation {
        index: 0,
        message: "reflectance basis span contains no spectrum within [0.1, 1]".into(),
    })
}

fn in_model_spectrum(raw: &[f64], basis: &BasisMatrix, anchor: &[f64]) -> Result<Vec<f64>> {
    let r = basis.expand(&project(raw, basis)?);
    if in_range(&r) {
        return Ok(r);
    }
    // largest t with anchor + t (r - anchor) in range; both endpoints lie in the span
    let mut t = 1.0f64;
    for (a, v) in anchor.iter().zip(&r) {
        let d = v - a;
        if d > 0.0 {
            t = t.min((REFLECTANCE_MAX - a) / d);
        } else if d < 0.0 {
            t = t.min((REFLECTANCE_MIN - a) / d);
        }
    }
    let t = t.max(0.0);
    Ok(anchor
        .iter()
        .zip(&r)
        .map(|(a, v)| (a + t * (v - a)).clamp(REFLECTANCE_MIN, REFLECTANCE_MAX))
        .collect())
}

fn voronoi(rng: &mut ChaCha8Rng, h: usize, w: usize, n: usize) -> Vec<usize> {
    let seeds: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64)))
        .collect();
    let mut map = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut best = (f64::INFINITY, 0);
            for (i, &(sy, sx)) in seeds.iter().enumerate() {
                let d = (py - sy).powi(2) + (px - sx).powi(2);
                if d < best.0 {
                    best = (d, i);
                }
            }
            map.push(best.1);
        }
    }
    map
}

fn shading_field(rng: &mut ChaCha8Rng, profile: ShadingProfile, h: usize, w: usize) -> Vec<f64> {
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = (theta.sin(), theta.cos());
    let (cy, cx) = (0.5 * (h as f64 - 1.0), 0.5 * (w as f64 - 1.0));
    let half = 0.5 * ((h * h + w * w) as f64).sqrt();
    // linear ramp in [0, 1] along a random direction
    let ramp = |y: usize, x: usize| 0.5 + 0.5 * ((y as f64 - cy) * dy + (x as f64 - cx) * dx) / half;
    match profile {
        ShadingProfile::SmoothGradient => {
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let freq = std::f64::consts::PI / h.max(w) as f64;
            (0..h * w)
                .map(|p| {
                    let (y, x) = (p / w, p % w);
                    let wobble = 0.05 * (freq * (y + x) as f64 + phase).sin();
                    (0.35 + 0.55 * ramp(y, x) + wobble).clamp(0.05, 1.0)
                })
                .collect()
        }
        ShadingProfile::CastShadow => {
            let oy = rng.random_range(0.3..0.7) * h as f64;
            let ox = rng.random_range(0.3..0.7) * w as f64;
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let (ny, nx) = (phi.sin(), phi.cos());
            (0..h * w)
                .map(|p| {
                    let (y, x) = (p / w, p % w);
                    let d = (y as f64 + 0.5 - oy) * ny + (x as f64 + 0.5 - ox) * nx;
                    // 0.4 in shadow, 1 in light, linear over a 2-pixel band
                    let lit = ((d + 1.0) / 2.0).clamp(0.0, 1.0);
                    let shadow = 0.4 + 0.6 * lit;
                    (0.7 + 0.3 * ramp(y, x)) * shadow
                })
                .collect()
        }
        ShadingProfile::Spotlight => {
            let sy = rng.random_range(0.3..0.7) * h as f64;
            let sx = rng.random_range(0.3..0.7) * w as f64;
            let sd = 0.35 * h.min(w) as f64;
            (0..h * w)
                .map(|p| {
                    let (y, x) = (p / w, p % w);
                    let r2 = (y as f64 + 0.5 - sy).powi(2) + (x as f64 + 0.5 - sx).powi(2);
                    0.3 + 0.7 * (-0.5 * r2 / (sd * sd)).exp()
                })
                .collect()
        }
    }
}

/// Generates a piecewise-constant reflectance scene lit by rank-1 shading.
pub fn generate_scene(spec: &SceneSpec, reflectance_basis: &BasisMatrix) -> Result<Scene> {
    spec.validate()?;
    let (h, w, k) = (spec.height, spec.width, spec.bands);
    if spec.in_model && reflectance_basis.bands() != k {
        return Err(Error::mismatch("scene basis bands", k, reflectance_basis.bands()));
    }
    let illum = PixelSpectrum::new(spec.illum.clone())?;
    let norm = illum.norm();
    if norm == 0.0 {
        return Err(Error::ZeroSpectrum);
    }
    let b_s: Vec<f64> = illum.values().iter().map(|v| v / norm).collect();
    let wavelengths = spec
        .wavelengths
        .clone()
        .unwrap_or_else(|| linspace(450.0, 700.0, k));

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let regions = voronoi(&mut rng, h, w, spec.n_regions);
    let anchor = if spec.in_model {
        Some(span_anchor(reflectance_basis)?)
    } else {
        None
    };
    let mut region_spectra = Vec::with_capacity(spec.n_regions);
    for _ in 0..spec.n_regions {
        let raw = smooth_spectrum(&mut rng, &wavelengths, REFLECTANCE_MIN, REFLECTANCE_MAX);
        region_spectra.push(match &anchor {
            Some(a) => in_model_spectrum(&raw, reflectance_basis, a)?,
            None => raw,
        });
    }
    let sigma = shading_field(&mut rng, spec.shading_profile, h, w);

    let mut shading = Vec::with_capacity(h * w * k);
    let mut reflectance = Vec::with_capacity(h * w * k);
    for p in 0..h * w {
        shading.extend(b_s.iter().map(|b| sigma[p] * b));
        reflectance.extend_from_slice(&region_spectra[regions[p]]);
    }
    let mut luminance: Vec<f64> = shading.iter().zip(&reflectance).map(|(s, r)| s * r).collect();
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::InvalidConfig(format!("noise: {e}")))?;
        for v in luminance.iter_mut() {
            *v = (*v + normal.sample(&mut rng)).max(0.0);
        }
    }
    let attach = |data: Vec<f64>| -> Result<SpectralCube> {
        let cube = SpectralCube::new(h, w, k, data)?;
        match &spec.wavelengths {
            Some(wl) => cube.with_wavelengths(wl.clone()),
            None => Ok(cube),
        }
    };
    Ok(Scene {
        luminance: attach(luminance)?,
        gt_shading: attach(shading)?,
        gt_reflectance: attach(reflectance)?,
        regions,
        region_spectra,
        shading_scale: sigma,
    })
}

/// A named scene description together with the band stride and basis rank
/// used to build it from the shipped 31-band fixtures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub name: String,
    pub band_stride: usize,
    pub reflectance_rank: usize,
    pub spec: SceneSpec,
}

/// Wavelengths of the shipped grid kept by `stride`.
pub fn strided_wavelengths(stride: usize) -> Vec<f64> {
    default_wavelengths().into_iter().step_by(stride.max(1)).collect()
}

#[allow(clippy::too_many_arguments)]
fn fixture(
    name: &str,
    size: usize,
    band_stride: usize,
    reflectance_rank: usize,
    n_regions: usize,
    shading_profile: ShadingProfile,
    seed: u64,
    illum: &crate::io::SampledSpectrum,
) -> Result<Fixture> {
    let wavelengths = strided_wavelengths(band_stride);
    let illum = illum.select(&wavelengths)?;
    Ok(Fixture {
        name: name.to_string(),
        band_stride,
        reflectance_rank,
        spec: SceneSpec {
            height: size,
            width: size,
            bands: wavelengths.len(),
            illum,
            wavelengths: Some(wavelengths),
            n_regions,
            shading_profile,
            noise_sigma: 0.0,
            seed,
            in_model: true,
        },
    })
}

/// The in-model scenes used for convergence and recovery checks.
pub fn shipped_fixtures() -> Result<Vec<Fixture>> {
    let illum = shipped_illumination()?;
    use ShadingProfile::*;
    Ok(vec![
        fixture("gradient-32", 32, 4, 4, 5, SmoothGradient, 11, &illum)?,
        fixture("shadow-48", 48, 4, 4, 7, CastShadow, 12, &illum)?,
        fixture("spot-64", 64, 4, 4, 8, Spotlight, 13, &illum)?,
        fixture("gradient-64", 64, 4, 3, 10, SmoothGradient, 14, &illum)?,
        fixture("shadow-40", 40, 6, 3, 6, CastShadow, 15, &illum)?,
        fixture("spot-24", 24, 6, 3, 4, Spotlight, 16, &illum)?,
    ])
}

/// Library and bases for a fixture: `(library, B_s, B_r)`.
pub fn fixture_bases(fixture: &Fixture) -> Result<(ReflectanceLibrary, BasisMatrix, BasisMatrix)> {
    let lib = shipped_library()?.subsample_bands(fixture.band_stride)?;
    let bs = crate::basis::shading_basis(&PixelSpectrum::new(fixture.spec.illum.clone())?)?;
    let br = crate::basis::reflectance_basis_pca(&lib, fixture.reflectance_rank)?;
    Ok((lib, bs, br))
}

/// Two regions split by a vertical straight edge whose reflectances differ by
/// a cosine distance of `edge_distance`, under smooth shading.
pub fn hard_edge_scene(
    size: usize,
    illum: &[f64],
    reflectance_basis: &BasisMatrix,
    edge_distance: f64,
    seed: u64,
) -> Result<Scene> {
    let k = illum.len();
    if reflectance_basis.bands() != k {
        return Err(Error::mismatch("hard-edge basis bands", k, reflectance_basis.bands()));
    }
    let wavelengths = linspace(450.0, 700.0, k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchor = span_anchor(reflectance_basis)?;
    let left = anchor.clone();
    let far = in_model_spectrum(
        &smooth_spectrum(&mut rng, &wavelengths, REFLECTANCE_MIN, REFLECTANCE_MAX),
        reflectance_basis,
        &anchor,
    )?;
    let mix = |t: f64| -> Vec<f64> { left.iter().zip(&far).map(|(a, b)| a + t * (b - a)).collect() };
    let full = cosine_distance_slices(&left, &far);
    if full < edge_distance {
        return Err(Error::InvalidConfig(format!(
            "cannot reach edge distance {edge_distance}; maximum is {full}"
        )));
    }
    // the distance grows monotonically along the segment; bisect on t
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cosine_distance_slices(&left, &mix(mid)) < edge_distance {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let right = mix(0.5 * (lo + hi));

    let norm = illum.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroSpectrum);
    }
    let sigma = shading_field(&mut rng, ShadingProfile::SmoothGradient, size, size);
    let regions: Vec<usize> = (0..size * size).map(|p| usize::from(p % size >= size / 2)).collect();
    let spectra = [left, right];
    let mut shading = Vec::with_capacity(size * size * k);
    let mut reflectance = Vec::with_capacity(size * size * k);
    for p in 0..size * size {
        shading.extend(illum.iter().map(|b| sigma[p] * b / norm));
        reflectance.extend_from_slice(&spectra[regions[p]]);
    }
    let luminance = shading.iter().zip(&reflectance).map(|(s, r)| s * r).collect();
    Ok(Scene {
        luminance: SpectralCube::new(size, size, k, luminance)?,
        gt_shading: SpectralCube::new(size, size, k, shading)?,
        gt_reflectance: SpectralCube::new(size, size, k, reflectance)?,
        regions,
        region_spectra: spectra.to_vec(),
        shading_scale: sigma,
    })
}

/// Largest problem `brute_force_decompose` accepts, in unknowns.
pub const BRUTE_FORCE_LIMIT: usize = 300;

#[derive(Debug, Clone)]
pub struct BruteForceResult {
    pub initial_shading: CoefficientField,
    pub initial_reflectance: CoefficientField,
    pub shading: CoefficientField,
    pub reflectance: CoefficientField,
}

/// Dense reference: every term is built as a full matrix straight from its
/// per-pair or per-pixel definition and every linear system is solved
/// directly. Runs exactly `config.outer_max_iter` alternating rounds with the
/// same rebalancing rule as the sparse solver and no early stopping.
pub fn brute_force_decompose(
    cube: &SpectralCube,
    shading_basis: &BasisMatrix,
    reflectance_basis: &BasisMatrix,
    weights: &WeightField,
    config: &SolverConfig,
) -> Result<BruteForceResult> {
    config.validate()?;
    let (h, w, k) = (cube.height(), cube.width(), cube.bands());
    let n = h * w;
    let (js, jr) = (shading_basis.rank(), reflectance_basis.rank());
    let unknowns = n * (js + jr);
    if unknowns > BRUTE_FORCE_LIMIT {
        return Err(Error::SizeGuard {
            unknowns,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    if shading_basis.bands() != k || reflectance_basis.bands() != k {
        return Err(Error::mismatch("oracle basis bands", k, shading_basis.bands()));
    }
    let bs = shading_basis.matrix();
    let br = reflectance_basis.matrix();
    let lum = DVector::from_column_slice(cube.data());
    let l = |p: usize, b: usize| cube.data()[p * k + b];

    // pairs enumerated here, weights looked up by matching the field's list
    let mut pairs = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                pairs.push((y * w + x, y * w + x + 1));
            }
            if y + 1 < h {
                pairs.push((y * w + x, (y + 1) * w + x));
            }
        }
    }
    let weight_of = |p: usize, q: usize, use_w: bool| -> Result<f64> {
        let idx = weights
            .pairs()
            .iter()
            .position(|&pq| pq == (p, q))
            .ok_or_else(|| Error::mismatch("oracle pair", format!("({p},{q})"), "absent"))?;
        Ok(if use_w { weights.w()[idx] } else { weights.v()[idx] })
    };
    let sc_uses_w = matches!(
        config.routing.shading_constancy(),
        crate::operators::PairWeight::W
    );
    let rc_uses_w = !sc_uses_w;

    // difference term on coefficients with basis B, optionally luminance-coupled:
    // plain:   ω (B x_q - B x_p)
    // coupled: ω (diag(l_p) B x_q - diag(l_q) B x_p)
    let pair_matrix = |basis: &DMatrix<f64>, coupled: bool, use_w: bool| -> Result<DMatrix<f64>> {
        let j = basis.ncols();
        let mut a = DMatrix::zeros(pairs.len() * k, n * j);
        for (i, &(p, q)) in pairs.iter().enumerate() {
            let om = weight_of(p, q, use_w)?;
            for b in 0..k {
                let (cq, cp) = if coupled { (l(p, b), l(q, b)) } else { (1.0, 1.0) };
                for c in 0..j {
                    a[(i * k + b, q * j + c)] += om * cq * basis[(b, c)];
                    a[(i * k + b, p * j + c)] -= om * cp * basis[(b, c)];
                }
            }
        }
        Ok(a)
    };
    let block_diag = |basis: &DMatrix<f64>| -> DMatrix<f64> {
        let j = basis.ncols();
        let mut m = DMatrix::zeros(n * k, n * j);
        for p in 0..n {
            m.view_mut((p * k, p * j), (k, j)).copy_from(basis);
        }
        m
    };
    // rows p·k + b: (B_fixed c_p)_b · (B_free)_{b,:}
    let data_matrix = |fixed: &DVector<f64>, fixed_basis: &DMatrix<f64>, free_basis: &DMatrix<f64>| {
        let (jf, jx) = (fixed_basis.ncols(), free_basis.ncols());
        let mut q = DMatrix::zeros(n * k, n * jx);
        for p in 0..n {
            let c = fixed.rows(p * jf, jf);
            let spectrum = fixed_basis * c;
            for b in 0..k {
                for j in 0..jx {
                    q[(p * k + b, p * jx + j)] = spectrum[b] * free_basis[(b, j)];
                }
            }
        }
        q
    };

    let w_s = pair_matrix(bs, false, sc_uses_w)?;
    let v_ls = pair_matrix(bs, true, rc_uses_w)?;
    let w_lr = pair_matrix(br, true, sc_uses_w)?;
    let v_r = pair_matrix(br, false, rc_uses_w)?;
    let g_s = w_s.transpose() * &w_s + config.lambda1 * v_ls.transpose() * &v_ls;
    let g_r = w_lr.transpose() * &w_lr + config.lambda1 * v_r.transpose() * &v_r;
    let m_s = block_diag(bs);
    let m_r = block_diag(br);

    let s0 = dense_solve(
        &g_s + config.lambda2 * m_s.transpose() * &m_s,
        config.lambda2 * m_s.transpose() * &lum,
    )?;
    let q_s = data_matrix(&s0, bs, br);
    let r0 = dense_solve(
        &g_r + config.lambda2 * m_r.transpose() * &m_r + config.lambda_data * q_s.transpose() * &q_s,
        config.lambda2 * m_r.transpose() * &lum + config.lambda_data * q_s.transpose() * &lum,
    )?;

    let two_ld = 2.0 * config.lambda_data;
    let (mut s, mut r) = (s0.clone(), r0.clone());
    for _ in 0..config.outer_max_iter {
        let q_r = data_matrix(&r, br, bs);
        s = dense_solve(&g_s + two_ld * q_r.transpose() * &q_r, two_ld * q_r.transpose() * &lum)?;
        let q_s = data_matrix(&s, bs, br);
        r = dense_solve(&g_r + two_ld * q_s.transpose() * &q_s, two_ld * q_s.transpose() * &lum)?;
        if config.rebalance {
            let a = s.dot(&(&g_s * &s));
            let b = r.dot(&(&g_r * &r));
            if a > 0.0 && b > 0.0 {
                let c = (b / a).powf(0.25);
                s *= c;
                r /= c;
            }
        }
    }
    let field = |v: DVector<f64>, j: usize| CoefficientField::new(n, j, v.as_slice().to_vec());
    Ok(BruteForceResult {
        initial_shading: field(s0, js)?,
        initial_reflectance: field(r0, jr)?,
        shading: field(s, js)?,
        reflectance: field(r, jr)?,
    })
}

fn dense_solve(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(&b));
    }
    a.svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| Error::Numerical(format!("dense oracle solve failed: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{reflectance_basis_pca, shading_basis};
    use crate::cube::elementwise_mul;

    fn basis8() -> BasisMatrix {
        reflectance_basis_pca(&shipped_library().unwrap().subsample_bands(4).unwrap(), 4).unwrap()
    }

    fn spec(in_model: bool) -> SceneSpec {
        let wl = strided_wavelengths(4);
        SceneSpec {
            height: 12,
            width: 10,
            bands: 8,
            illum: daylight_like(&wl).unwrap().into_vec(),
            wavelengths: Some(wl),
            n_regions: 4,
            shading_profile: ShadingProfile::CastShadow,
            noise_sigma: 0.0,
            seed: 3,
            in_model,
        }
    }

    #[test]
    fn shipped_library_matches_generator() {
        let shipped = shipped_library().unwrap();
        let fresh = synthetic_library(&default_wavelengths(), DEFAULT_LIBRARY_SIZE, DEFAULT_LIBRARY_SEED).unwrap();
        assert_eq!(shipped.len(), DEFAULT_LIBRARY_SIZE);
        let diff = (shipped.samples() - fresh.samples()).amax();
        assert!(diff < 1e-9, "{diff}");
    }

    #[test]
    fn library_subsamples_consistently() {
        let wl = default_wavelengths();
        let sub: Vec<f64> = wl.iter().step_by(3).cloned().collect();
        let a = synthetic_library(&wl, 20, 5).unwrap().subsample_bands(3).unwrap();
        let b = synthetic_library(&sub, 20, 5).unwrap();
        assert_eq!(a.samples(), b.samples());
    }

    #[test]
    fn daylight_peak_is_one() {
        let d = daylight_like(&default_wavelengths()).unwrap();
        let max = d.values().iter().cloned().fold(0.0, f64::max);
        assert_eq!(max, 1.0);
        assert!(d.values().iter().all(|&v| v > 0.5));
    }

    #[test]
    fn forward_model_holds_exactly() {
        let scene = generate_scene(&spec(true), &basis8()).unwrap();
        let product = elementwise_mul(&scene.gt_shading, &scene.gt_reflectance).unwrap();
        assert_eq!(product.data(), scene.luminance.data());
    }

    #[test]
    fn deterministic() {
        let a = generate_scene(&spec(false), &basis8()).unwrap();
        let b = generate_scene(&spec(false), &basis8()).unwrap();
        assert_eq!(a.luminance.data(), b.luminance.data());
        assert_eq!(a.regions, b.regions);
    }

    #[test]
    fn in_model_reflectance_round_trips() {
        let basis = basis8();
        let scene = generate_scene(&spec(true), &basis).unwrap();
        for px in scene.gt_reflectance.pixels() {
            let back = basis.expand(&project(px, &basis).unwrap());
            for (a, b) in back.iter().zip(px) {
                assert!((a - b).abs() < 1e-10);
            }
            assert!(px.iter().all(|v| (0.1..=1.0).contains(v)));
        }
    }

    #[test]
    fn shading_is_rank_one() {
        let scene = generate_scene(&spec(true), &basis8()).unwrap();
        let s = &scene.gt_shading;
        let m = DMatrix::from_row_slice(s.pixel_count(), s.bands(), s.data());
        let sv = m.singular_values();
        assert!(sv[1] < 1e-10 * sv[0]);
        assert!(scene.shading_scale.iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn single_region_has_zero_distance() {
        let mut sp = spec(false);
        sp.n_regions = 1;
        sp.shading_profile = ShadingProfile::SmoothGradient;
        let scene = generate_scene(&sp, &basis8()).unwrap();
        let field = crate::weights::compute_weight_field(&scene.luminance, &Default::default()).unwrap();
        assert!(field.distances().iter().all(|&d| d < 1e-12));
    }

    #[test]
    fn noise_clips_at_zero() {
        let mut sp = spec(false);
        sp.noise_sigma = 0.5;
        let scene = generate_scene(&sp, &basis8()).unwrap();
        assert!(scene.luminance.data().iter().all(|&v| v >= 0.0));
        assert!(scene.gt_shading.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn spec_validation() {
        let mut sp = spec(false);
        sp.n_regions = 1000;
        assert!(generate_scene(&sp, &basis8()).is_err());
        let mut sp = spec(false);
        sp.noise_sigma = -1.0;
        assert!(sp.validate().is_err());
        let mut sp = spec(false);
        sp.height = 1;
        assert!(sp.validate().is_err());
    }

    #[test]
    fn hard_edge_distance() {
        let wl = strided_wavelengths(4);
        let illum = daylight_like(&wl).unwrap().into_vec();
        let scene = hard_edge_scene(20, &illum, &basis8(), 0.004, 1).unwrap();
        let d = cosine_distance_slices(&scene.region_spectra[0], &scene.region_spectra[1]);
        assert!((d - 0.004).abs() < 1e-9);
    }

    #[test]
    fn oracle_size_guard() {
        let cube = SpectralCube::zeros(11, 11, 4);
        let bs = shading_basis(&PixelSpectrum::new(vec![1.0; 4]).unwrap()).unwrap();
        let br = BasisMatrix::new(DMatrix::identity(4, 2)).unwrap();
        let field = WeightField::from_w(11, 11, vec![0.5; 220]).unwrap();
        assert!(matches!(
            brute_force_decompose(&cube, &bs, &br, &field, &SolverConfig::default()),
            Err(Error::SizeGuard { unknowns: 363, limit: 300 })
        ));
    }

    #[test]
    fn oracle_single_pixel_closed_form() {
        // one pixel: no pairs, so the data term alone fixes s·r = projection of l
        let cube = SpectralCube::new(1, 1, 2, vec![0.3, 0.6]).unwrap();
        let bs = shading_basis(&PixelSpectrum::new(vec![1.0, 1.0]).unwrap()).unwrap();
        let br = BasisMatrix::new(DMatrix::from_column_slice(2, 1, &[1.0, 2.0])).unwrap();
        let field = WeightField::from_w(1, 1, vec![]).unwrap();
        let cfg = SolverConfig { outer_max_iter: 3, ..Default::default() };
        let out = brute_force_decompose(&cube, &bs, &br, &field, &cfg).unwrap();
        let s = out.shading.pixel(0)[0] / 2f64.sqrt();
        let r = out.reflectance.pixel(0)[0];
        // l = (0.3, 0.6) = 0.3 · (1, 2) exactly
        assert!((s * r - 0.3).abs() < 1e-9, "{}", s * r);
    }
}
