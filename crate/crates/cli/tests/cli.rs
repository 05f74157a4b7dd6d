use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn spiid(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spiid"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn spiid")
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

/// Writes a small in-model scene spec on every 4th band of the shipped illumination.
fn write_spec(dir: &Path) -> PathBuf {
    let text = fs::read_to_string(fixtures().join("illum.csv")).unwrap();
    let rows: Vec<(f64, f64)> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .step_by(4)
        .map(|l| {
            let (w, v) = l.split_once(',').unwrap();
            (w.trim().parse().unwrap(), v.trim().parse().unwrap())
        })
        .collect();
    let spec = serde_json::json!({
        "height": 16,
        "width": 16,
        "bands": rows.len(),
        "illum": rows.iter().map(|r| r.1).collect::<Vec<_>>(),
        "wavelengths": rows.iter().map(|r| r.0).collect::<Vec<_>>(),
        "n_regions": 4,
        "shading_profile": "cast-shadow",
        "seed": 11,
        "in_model": true
    });
    let path = dir.join("spec.json");
    fs::write(&path, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
    path
}

fn synth(dir: &Path) -> PathBuf {
    let spec = write_spec(dir);
    let out = dir.join("scene");
    let o = spiid(
        &["synth", "--spec", spec.to_str().unwrap(), "--out-dir", out.to_str().unwrap(), "--rank", "4"],
        dir,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn synth_then_decompose_writes_all_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = synth(tmp.path());
    for f in ["luminance.msc", "gt_shading.msc", "gt_reflectance.msc", "scene.json", "manifest.json"] {
        assert!(scene.join(f).is_file(), "missing {f}");
    }
    let out = tmp.path().join("out");
    let fx = fixtures();
    let o = spiid(
        &[
            "decompose",
            "--input",
            scene.join("luminance.msc").to_str().unwrap(),
            "--illum",
            fx.join("illum.csv").to_str().unwrap(),
            "--library",
            fx.join("library.csv").to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
            "--rank",
            "4",
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "shading.msc",
        "reflectance.msc",
        "trace.csv",
        "input.png",
        "shading.png",
        "reflectance.png",
        "manifest.json",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("iter,E,E_sc,E_rc,E_data,cg_iters,lmse_shading,lmse_reflectance"));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let inputs = manifest["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 3);
    assert!(inputs.iter().all(|i| i["sha256"].as_str().unwrap().len() == 64));
    assert_eq!(manifest["config"]["resolved"]["reflectance_rank"], 4);

    let o = spiid(
        &[
            "eval",
            "--pred-s",
            out.join("shading.msc").to_str().unwrap(),
            "--gt-s",
            scene.join("gt_shading.msc").to_str().unwrap(),
            "--pred-r",
            out.join("reflectance.msc").to_str().unwrap(),
            "--gt-r",
            scene.join("gt_reflectance.msc").to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert!(o.status.success());
    let stdout = String::from_utf8_lossy(&o.stdout);
    let combined: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("combined LMSE "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(combined < 0.05, "{combined}");
}

#[test]
fn eval_of_ground_truth_against_itself_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = synth(tmp.path());
    let s = scene.join("gt_shading.msc");
    let r = scene.join("gt_reflectance.msc");
    let csv = tmp.path().join("scores.csv");
    let (s, r) = (s.to_str().unwrap(), r.to_str().unwrap());
    let o = spiid(
        &["eval", "--pred-s", s, "--gt-s", s, "--pred-r", r, "--gt-r", r, "--out", csv.to_str().unwrap(), "--scene", "self"],
        tmp.path(),
    );
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("combined LMSE 0.000000"));
    let table = fs::read_to_string(csv).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("scene,lmse_shading,lmse_reflectance,combined,time_seconds"));
    assert!(lines.next().unwrap().starts_with("self,0,0,0,"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = spiid(&["decompose", "--no-such-flag"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(spiid(&["--help"], tmp.path()).status.code(), Some(0));
}

#[test]
fn runtime_failure_exits_two_with_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = fixtures();
    let o = spiid(
        &[
            "decompose",
            "--input",
            "missing.msc",
            "--illum",
            fx.join("illum.csv").to_str().unwrap(),
            "--library",
            fx.join("library.csv").to_str().unwrap(),
            "--out-dir",
            "out",
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.msc"));

    let bad = tmp.path().join("bad.msc");
    fs::write(&bad, b"not a cube").unwrap();
    let o = spiid(
        &[
            "decompose",
            "--input",
            bad.to_str().unwrap(),
            "--illum",
            fx.join("illum.csv").to_str().unwrap(),
            "--library",
            fx.join("library.csv").to_str().unwrap(),
            "--out-dir",
            "out",
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("load input"));
}

#[test]
fn sweep_writes_table() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = synth(tmp.path());
    let fx = fixtures();
    let table = tmp.path().join("sweep/table.csv");
    let o = spiid(
        &[
            "sweep",
            "--input",
            scene.join("luminance.msc").to_str().unwrap(),
            "--gt-s",
            scene.join("gt_shading.msc").to_str().unwrap(),
            "--gt-r",
            scene.join("gt_reflectance.msc").to_str().unwrap(),
            "--illum",
            fx.join("illum.csv").to_str().unwrap(),
            "--library",
            fx.join("library.csv").to_str().unwrap(),
            "--rank",
            "4",
            "--alphas",
            "1000,5000",
            "--betas",
            "0.001,0.0032",
            "--out",
            table.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&table).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",ok")));
}
