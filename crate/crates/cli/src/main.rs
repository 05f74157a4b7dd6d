//! `spiid`: batch driver for multispectral intrinsic decomposition.
//!
//! Exit status: 0 on success, 1 on a usage error, 2 when a run fails.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use spectral_iid::basis::ReflectanceLibrary;
use spectral_iid::cube::{linspace, PixelSpectrum, SpectralCube};
use spectral_iid::io::{load_cube, load_spectrum_csv, save_cube};
use spectral_iid::metrics::{lmse, LmseConfig};
use spectral_iid::rgb::{pseudo_rgb, ResponseCurves, ResponseMatrix};
use spectral_iid::solve::{
    bases_for_cube, decompose_with_bases, DecomposeConfig, SubproblemSolver, WeightRouting,
};
use spectral_iid::sweep::{default_alphas, default_betas, sweep_params, threads_from_env, SweepInputs};
use spectral_iid::synth::{generate_scene, shipped_library, SceneSpec};
use spectral_iid::weights::WeightParams;

#[derive(Parser, Debug)]
#[command(name = "spiid", version, about = "Low-rank intrinsic decomposition of multispectral cubes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split a cube into shading and reflectance
    Decompose(DecomposeArgs),
    /// Score predicted factors against ground truth with LMSE
    Eval(EvalArgs),
    /// Write a synthetic scene with known factors
    Synth(SynthArgs),
    /// Grid-search the weight sigmoid parameters against ground truth
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
struct SolverArgs {
    #[arg(long, default_value_t = 5000.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.0032)]
    beta: f64,
    #[arg(long, default_value_t = 2.0)]
    lambda1: f64,
    #[arg(long, default_value_t = 0.01)]
    lambda2: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_data: f64,
    /// Reflectance basis rank
    #[arg(long, default_value_t = 8)]
    rank: usize,
    /// Keep every n-th band of the cube
    #[arg(long, default_value_t = 1)]
    band_stride: usize,
    #[arg(long, default_value_t = 50)]
    outer_max_iter: usize,
    #[arg(long, default_value_t = 0.01)]
    grad_tol: f64,
    #[arg(long, value_enum, default_value_t = SolverChoice::Cg)]
    subproblem: SolverChoice,
    #[arg(long, value_enum, default_value_t = RoutingChoice::EdgeAware)]
    routing: RoutingChoice,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
enum SolverChoice {
    Cg,
    GradientDescent,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
enum RoutingChoice {
    EdgeAware,
    AsWritten,
}

impl SolverArgs {
    fn config(&self) -> Result<DecomposeConfig> {
        let mut config = DecomposeConfig {
            weights: WeightParams::new(self.alpha, self.beta)?,
            reflectance_rank: self.rank,
            ..Default::default()
        };
        let s = &mut config.solver;
        s.lambda1 = self.lambda1;
        s.lambda2 = self.lambda2;
        s.lambda_data = self.lambda_data;
        s.outer_max_iter = self.outer_max_iter;
        s.grad_tol = self.grad_tol;
        s.subproblem = match self.subproblem {
            SolverChoice::Cg => SubproblemSolver::ConjugateGradient,
            SolverChoice::GradientDescent => SubproblemSolver::GradientDescent,
        };
        s.routing = match self.routing {
            RoutingChoice::EdgeAware => WeightRouting::EdgeAware,
            RoutingChoice::AsWritten => WeightRouting::AsWritten,
        };
        s.validate()?;
        if self.band_stride == 0 {
            bail!("--band-stride must be at least 1");
        }
        Ok(config)
    }
}

#[derive(Args, Debug)]
struct DecomposeArgs {
    #[arg(long)]
    input: PathBuf,
    /// Illumination spectrum CSV (wavelength,value)
    #[arg(long)]
    illum: PathBuf,
    /// Reflectance library CSV (header of wavelengths, one spectrum per row)
    #[arg(long)]
    library: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Response curves CSV (wavelength,r,g,b) for the preview PNGs
    #[arg(long)]
    response: Option<PathBuf>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred_s: PathBuf,
    #[arg(long)]
    gt_s: PathBuf,
    #[arg(long)]
    pred_r: PathBuf,
    #[arg(long)]
    gt_r: PathBuf,
    /// CSV to append the score row to
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scene label for the CSV row
    #[arg(long, default_value = "scene")]
    scene: String,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Scene description JSON
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Library defining the reflectance span for in-model scenes; defaults to the shipped one
    #[arg(long)]
    library: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    rank: usize,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    gt_s: PathBuf,
    #[arg(long)]
    gt_r: PathBuf,
    #[arg(long)]
    illum: PathBuf,
    #[arg(long)]
    library: PathBuf,
    /// Table of results (alpha,beta,lmse,status)
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated alpha values; defaults to 20 values over [1000, 10000]
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    /// Comma-separated beta values; defaults to 50 log-spaced values over [1e-5, 1e-2]
    #[arg(long, value_delimiter = ',')]
    betas: Option<Vec<f64>>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Serialize)]
struct InputRecord {
    role: String,
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<T: Serialize> {
    command: &'static str,
    args: Vec<String>,
    version: &'static str,
    inputs: Vec<InputRecord>,
    config: T,
    threads: usize,
    wall_time_seconds: f64,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn inputs(files: &[(&str, &Path)]) -> Result<Vec<InputRecord>> {
    files
        .iter()
        .map(|(role, path)| {
            Ok(InputRecord {
                role: role.to_string(),
                path: path.display().to_string(),
                sha256: sha256_file(path)?,
            })
        })
        .collect()
}

fn write_manifest<T: Serialize>(
    dir: &Path,
    command: &'static str,
    inputs: Vec<InputRecord>,
    config: T,
    start: Instant,
) -> Result<()> {
    let manifest = Manifest {
        command,
        args: std::env::args().collect(),
        version: env!("CARGO_PKG_VERSION"),
        inputs,
        config,
        threads: rayon::current_num_threads(),
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    let path = dir.join("manifest.json");
    let mut out = BufWriter::new(File::create(&path)?);
    serde_json::to_writer_pretty(&mut out, &manifest)?;
    writeln!(out)?;
    Ok(())
}

fn load(role: &str, path: &Path) -> Result<SpectralCube> {
    load_cube(path).with_context(|| format!("load {role}: {}", path.display()))
}

fn check_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("input not found: {}", path.display());
    }
    Ok(())
}

/// Cube, illumination and library brought onto the same bands.
fn prepare(
    input: &Path,
    illum: &Path,
    library: &Path,
    band_stride: usize,
) -> Result<(SpectralCube, PixelSpectrum, ReflectanceLibrary)> {
    let mut cube = load("input", input)?;
    if band_stride > 1 {
        cube = cube.subsample_bands(band_stride)?;
    }
    let illum = load_spectrum_csv(illum).context("load illumination")?;
    let library = ReflectanceLibrary::load_csv(library).context("load library")?;
    let illum = match cube.wavelengths() {
        Some(wl) => illum.select(wl).context("match illumination to cube wavelengths")?,
        None if illum.values.len() == cube.bands() => illum.values,
        None => illum
            .values
            .into_iter()
            .step_by(band_stride)
            .collect(),
    };
    let library = match (cube.wavelengths(), library.wavelengths()) {
        (None, _) if library.bands() != cube.bands() && band_stride > 1 => {
            library.subsample_bands(band_stride)?
        }
        _ => library,
    };
    Ok((cube, PixelSpectrum::new(illum)?, library))
}

fn write_png(path: &Path, cube: &SpectralCube, curves: &ResponseCurves) -> Result<()> {
    let wl = cube
        .wavelengths()
        .map(|w| w.to_vec())
        .unwrap_or_else(|| linspace(450.0, 700.0, cube.bands()));
    let response = ResponseMatrix::from_curves(curves, &wl)?;
    let img = pseudo_rgb(cube, &response)?;
    image::save_buffer(
        path,
        &img.to_rgb8(),
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
    )
    .with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct DecomposeManifestConfig<'a> {
    cli: &'a SolverArgs,
    resolved: &'a DecomposeConfig,
}

fn run_decompose(args: &DecomposeArgs) -> Result<()> {
    let start = Instant::now();
    for p in [&args.input, &args.illum, &args.library] {
        check_file(p)?;
    }
    let config = args.solver.config().context("configuration")?;
    let (cube, illum, library) = prepare(&args.input, &args.illum, &args.library, args.solver.band_stride)?;
    let curves = match &args.response {
        Some(p) => ResponseCurves::read_csv(File::open(p)?).context("load response curves")?,
        None => ResponseCurves::shipped()?,
    };
    fs::create_dir_all(&args.out_dir)?;
    let (bs, br) = bases_for_cube(&cube, &illum, &library, config.reflectance_rank)
        .map_err(|e| e.in_stage("bases"))?;
    let d = decompose_with_bases(&cube, &bs, &br, &config, None)?;

    save_cube(&d.shading, args.out_dir.join("shading.msc")).context("write shading")?;
    save_cube(&d.reflectance, args.out_dir.join("reflectance.msc")).context("write reflectance")?;
    d.trace
        .write_csv(BufWriter::new(File::create(args.out_dir.join("trace.csv"))?))
        .context("write trace")?;
    write_png(&args.out_dir.join("input.png"), &cube, &curves)?;
    write_png(&args.out_dir.join("shading.png"), &d.shading, &curves)?;
    write_png(&args.out_dir.join("reflectance.png"), &d.reflectance, &curves)?;

    let mut files = vec![
        ("input", args.input.as_path()),
        ("illum", args.illum.as_path()),
        ("library", args.library.as_path()),
    ];
    if let Some(p) = &args.response {
        files.push(("response", p.as_path()));
    }
    write_manifest(
        &args.out_dir,
        "decompose",
        inputs(&files)?,
        DecomposeManifestConfig { cli: &args.solver, resolved: &config },
        start,
    )?;
    println!(
        "{} outer iterations ({}), final energy {:e}, clamped shading {:.3}% reflectance {:.3}%",
        d.trace.outer_iterations(),
        d.trace.stop_reason,
        d.trace.records.last().map_or(0.0, |r| r.energy.total),
        100.0 * d.shading_clamped,
        100.0 * d.reflectance_clamped
    );
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let start = Instant::now();
    for p in [&args.pred_s, &args.gt_s, &args.pred_r, &args.gt_r] {
        check_file(p)?;
    }
    let cfg = LmseConfig::default();
    let ls = lmse(&load("predicted shading", &args.pred_s)?, &load("ground-truth shading", &args.gt_s)?, &cfg)
        .map_err(|e| e.in_stage("shading LMSE"))?;
    let lr = lmse(
        &load("predicted reflectance", &args.pred_r)?,
        &load("ground-truth reflectance", &args.gt_r)?,
        &cfg,
    )
    .map_err(|e| e.in_stage("reflectance LMSE"))?;
    let combined = 0.5 * (ls + lr);
    let secs = start.elapsed().as_secs_f64();
    println!("shading LMSE {ls:.6}");
    println!("reflectance LMSE {lr:.6}");
    println!("combined LMSE {combined:.6}");
    if let Some(out) = &args.out {
        let fresh = !out.exists() || fs::metadata(out)?.len() == 0;
        let mut f = fs::OpenOptions::new().create(true).append(true).open(out)?;
        if fresh {
            writeln!(f, "scene,lmse_shading,lmse_reflectance,combined,time_seconds")?;
        }
        writeln!(f, "{},{ls},{lr},{combined},{secs}", args.scene)?;
    }
    Ok(())
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let start = Instant::now();
    check_file(&args.spec)?;
    let spec: SceneSpec = serde_json::from_reader(File::open(&args.spec)?)
        .with_context(|| format!("parse scene spec {}", args.spec.display()))?;
    spec.validate().context("scene spec")?;
    let library = match &args.library {
        Some(p) => ReflectanceLibrary::load_csv(p).context("load library")?,
        None => shipped_library()?,
    };
    let library = match (&spec.wavelengths, library.wavelengths()) {
        (Some(wl), Some(_)) => library.select_wavelengths(wl).context("match library to scene wavelengths")?,
        _ => library,
    };
    // out-of-model scenes ignore the basis, but building it is cheap
    let basis = spectral_iid::reflectance_basis_pca(&library, args.rank.min(spec.bands))
        .map_err(|e| e.in_stage("bases"))?;
    let scene = generate_scene(&spec, &basis).map_err(|e| e.in_stage("synthesis"))?;
    fs::create_dir_all(&args.out_dir)?;
    save_cube(&scene.luminance, args.out_dir.join("luminance.msc"))?;
    save_cube(&scene.gt_shading, args.out_dir.join("gt_shading.msc"))?;
    save_cube(&scene.gt_reflectance, args.out_dir.join("gt_reflectance.msc"))?;
    let mut sidecar = BufWriter::new(File::create(args.out_dir.join("scene.json"))?);
    serde_json::to_writer_pretty(&mut sidecar, &spec)?;
    writeln!(sidecar)?;
    let mut files = vec![("spec", args.spec.as_path())];
    if let Some(p) = &args.library {
        files.push(("library", p.as_path()));
    }
    #[derive(Serialize)]
    struct SynthConfig<'a> {
        spec: &'a SceneSpec,
        rank: usize,
    }
    write_manifest(
        &args.out_dir,
        "synth",
        inputs(&files)?,
        SynthConfig { spec: &spec, rank: args.rank },
        start,
    )?;
    println!(
        "wrote {}x{}x{} scene to {}",
        spec.height,
        spec.width,
        spec.bands,
        args.out_dir.display()
    );
    Ok(())
}

fn run_sweep(args: &SweepArgs) -> Result<()> {
    let start = Instant::now();
    for p in [&args.input, &args.gt_s, &args.gt_r, &args.illum, &args.library] {
        check_file(p)?;
    }
    let config = args.solver.config().context("configuration")?;
    let (cube, illum, library) = prepare(&args.input, &args.illum, &args.library, args.solver.band_stride)?;
    let mut gt_s = load("ground-truth shading", &args.gt_s)?;
    let mut gt_r = load("ground-truth reflectance", &args.gt_r)?;
    if args.solver.band_stride > 1 {
        gt_s = gt_s.subsample_bands(args.solver.band_stride)?;
        gt_r = gt_r.subsample_bands(args.solver.band_stride)?;
    }
    let (bs, br) = bases_for_cube(&cube, &illum, &library, config.reflectance_rank)
        .map_err(|e| e.in_stage("bases"))?;
    let alphas = args.alphas.clone().unwrap_or_else(default_alphas);
    let betas = args.betas.clone().unwrap_or_else(default_betas);
    let result = sweep_params(
        &SweepInputs {
            cube: &cube,
            gt_shading: &gt_s,
            gt_reflectance: &gt_r,
            shading_basis: &bs,
            reflectance_basis: &br,
        },
        &alphas,
        &betas,
        &config.solver,
        &LmseConfig::default(),
    )
    .map_err(|e| e.in_stage("sweep"))?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    result
        .write_csv(BufWriter::new(File::create(&args.out)?))
        .context("write sweep table")?;
    #[derive(Serialize)]
    struct SweepConfig<'a> {
        cli: &'a SolverArgs,
        resolved: &'a DecomposeConfig,
        alphas: &'a [f64],
        betas: &'a [f64],
        best: WeightParams,
        best_lmse: f64,
    }
    let manifest_dir = args.out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    write_manifest(
        manifest_dir,
        "sweep",
        inputs(&[
            ("input", args.input.as_path()),
            ("gt_s", args.gt_s.as_path()),
            ("gt_r", args.gt_r.as_path()),
            ("illum", args.illum.as_path()),
            ("library", args.library.as_path()),
        ])?,
        SweepConfig {
            cli: &args.solver,
            resolved: &config,
            alphas: &alphas,
            betas: &betas,
            best: result.best,
            best_lmse: result.best_lmse,
        },
        start,
    )?;
    println!(
        "best alpha {} beta {} combined LMSE {:.6}",
        result.best.alpha, result.best.beta, result.best_lmse
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = threads_from_env() {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not cap worker threads: {e}");
        }
    }
    let result = match &cli.command {
        Command::Decompose(a) => run_decompose(a),
        Command::Eval(a) => run_eval(a),
        Command::Synth(a) => run_synth(a),
        Command::Sweep(a) => run_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
