//! Sparse assembly checked against dense constructions written out here.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spectral_iid::basis::{project_cube, reflectance_basis_pca, shading_basis, BasisMatrix};
use spectral_iid::cube::{PixelSpectrum, SpectralCube};
use spectral_iid::field::CoefficientField;
use spectral_iid::operators::{
    assemble_data_operator, assemble_generic_constraint, assemble_pair_operator,
    build_normal_system, AffineTerm, PairWeight, Term,
};
use spectral_iid::synth::{fixture_bases, generate_scene, shipped_fixtures};
use spectral_iid::weights::{compute_weight_field, WeightParams};

fn random_cube(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> SpectralCube {
    SpectralCube::from_fn(h, w, k, |_, _, _| rng.random_range(0.05..1.0)).unwrap()
}

fn random_basis(rng: &mut ChaCha8Rng, k: usize, j: usize) -> BasisMatrix {
    BasisMatrix::new(DMatrix::from_fn(k, j, |_, _| rng.random_range(-1.0..1.0))).unwrap()
}

/// Dense pair matrix from the per-pair definition.
fn dense_pair(
    lum: Option<&SpectralCube>,
    basis: &DMatrix<f64>,
    h: usize,
    w: usize,
    weight: impl Fn(usize, usize) -> f64,
) -> DMatrix<f64> {
    let (k, j) = basis.shape();
    let mut pairs = Vec::new();
    for y in 0..h {
        for x in 0..w.saturating_sub(1) {
            pairs.push((y * w + x, y * w + x + 1));
        }
    }
    for y in 0..h.saturating_sub(1) {
        for x in 0..w {
            pairs.push((y * w + x, (y + 1) * w + x));
        }
    }
    let n = h * w;
    let mut a = DMatrix::zeros(pairs.len() * k, n * j);
    for (i, &(p, q)) in pairs.iter().enumerate() {
        let om = weight(p, q);
        for b in 0..k {
            let (lp, lq) = match lum {
                Some(c) => (c.pixel(p)[b], c.pixel(q)[b]),
                None => (1.0, 1.0),
            };
            for c in 0..j {
                a[(i * k + b, q * j + c)] += om * lp * basis[(b, c)];
                a[(i * k + b, p * j + c)] -= om * lq * basis[(b, c)];
            }
        }
    }
    a
}

#[test]
fn pair_operators_match_dense_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cube = random_cube(&mut rng, 3, 4, 4);
    let basis = random_basis(&mut rng, 4, 2);
    let field = compute_weight_field(&cube, &WeightParams::new(30.0, 0.02).unwrap()).unwrap();
    let lookup = |which: PairWeight| {
        let vals = which.values(&field).to_vec();
        let pairs = field.pairs().to_vec();
        move |p: usize, q: usize| vals[pairs.iter().position(|&x| x == (p, q)).unwrap()]
    };
    for which in [PairWeight::W, PairWeight::V] {
        for lum in [None, Some(&cube)] {
            let sparse = assemble_pair_operator(lum, &basis, &field, which).unwrap();
            let dense = dense_pair(lum, basis.matrix(), 3, 4, lookup(which));
            // row order may differ; compare the Gram matrices
            let diff = (sparse.matrix.gram().to_dense() - dense.transpose() * &dense).amax();
            assert!(diff < 1e-12, "{which:?} {}: {diff}", lum.is_some());
        }
    }
}

#[test]
fn four_by_four_dimensions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cube = random_cube(&mut rng, 4, 4, 6);
    let basis = random_basis(&mut rng, 6, 6);
    let field = compute_weight_field(&cube, &WeightParams::default()).unwrap();
    assert_eq!(field.len(), 24);
    let op = assemble_pair_operator(Some(&cube), &basis, &field, PairWeight::W).unwrap();
    assert_eq!((op.rows(), op.cols()), (144, 96));
}

#[test]
fn normal_matrix_matches_dense_gram_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cube = random_cube(&mut rng, 3, 3, 4);
    let basis = random_basis(&mut rng, 4, 2);
    let field = compute_weight_field(&cube, &WeightParams::new(30.0, 0.02).unwrap()).unwrap();
    let a = assemble_pair_operator(Some(&cube), &basis, &field, PairWeight::V).unwrap();
    let b = assemble_pair_operator(None, &basis, &field, PairWeight::W).unwrap();
    let (m, c) = assemble_generic_constraint(&cube, &basis).unwrap();
    let (la, lb, lm) = (1.0, 2.0, 0.01);
    let system = build_normal_system(
        &[Term { operator: &a, lambda: la }, Term { operator: &b, lambda: lb }],
        &[AffineTerm { operator: &m, target: &c, lambda: lm }],
        "dense check",
    )
    .unwrap();
    let (da, db, dm) = (a.matrix.to_dense(), b.matrix.to_dense(), m.matrix.to_dense());
    let expect = la * da.transpose() * &da + lb * db.transpose() * &db + lm * dm.transpose() * &dm;
    assert!((system.matrix.to_dense() - expect).amax() < 1e-10);
    let rhs = lm * dm.transpose() * DVector::from_column_slice(&c);
    for (x, y) in system.rhs.iter().zip(rhs.iter()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn constraint_residual_is_out_of_subspace_energy() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cube = random_cube(&mut rng, 3, 3, 5);
    let illum = PixelSpectrum::new((0..5).map(|_| rng.random_range(0.3..1.0)).collect()).unwrap();
    let bs = shading_basis(&illum).unwrap();
    let coeffs = project_cube(&cube, &bs).unwrap();
    let (m, c) = assemble_generic_constraint(&cube, &bs).unwrap();
    let residual = m.squared_residual(coeffs.values(), Some(&c));
    // dense: ‖l_p‖² - (b·l_p)² summed over pixels
    let b = bs.matrix().column(0).into_owned();
    let mut expect = 0.0;
    for px in cube.pixels() {
        let l = DVector::from_column_slice(px);
        expect += l.norm_squared() - b.dot(&l).powi(2);
    }
    assert!((residual - expect).abs() < 1e-12 * expect.max(1.0));
}

#[test]
fn data_operator_reproduces_synthetic_luminance() {
    let fx = &shipped_fixtures().unwrap()[0];
    let (_, bs, br) = fixture_bases(fx).unwrap();
    let scene = generate_scene(&fx.spec, &br).unwrap();
    let s = CoefficientField::new(
        scene.shading_scale.len(),
        1,
        scene.shading_scale.clone(),
    )
    .unwrap();
    let r = project_cube(&scene.gt_reflectance, &br).unwrap();
    let q = assemble_data_operator(&s, &bs, &br).unwrap();
    let out = q.apply(r.values());
    let worst = out
        .iter()
        .zip(scene.luminance.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn gram_is_exactly_symmetric() {
    let fx = &shipped_fixtures().unwrap()[1];
    let (_, _, br) = fixture_bases(fx).unwrap();
    let scene = generate_scene(&fx.spec, &br).unwrap();
    let field = compute_weight_field(&scene.luminance, &WeightParams::default()).unwrap();
    let op = assemble_pair_operator(Some(&scene.luminance), &br, &field, PairWeight::V).unwrap();
    assert_eq!(op.matrix.gram().asymmetry(), 0.0);
}

#[test]
fn pca_rank_eight_on_shipped_library() {
    let lib = spectral_iid::synth::shipped_library().unwrap();
    let basis = reflectance_basis_pca(&lib, 8).unwrap();
    let ev = basis.explained_variance();
    assert_eq!(ev.len(), 7);
    assert!(ev.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn matrix_market_export() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cube = random_cube(&mut rng, 2, 2, 2);
    let basis = random_basis(&mut rng, 2, 1);
    let field = compute_weight_field(&cube, &WeightParams::default()).unwrap();
    let op = assemble_pair_operator(None, &basis, &field, PairWeight::W).unwrap();
    let mut buf = Vec::new();
    op.write_matrix_market(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('%'));
    let dims: Vec<usize> = lines
        .next()
        .unwrap()
        .split_whitespace()
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(dims, vec![8, 4, op.matrix.nnz()]);
    assert_eq!(lines.count(), op.matrix.nnz());
}
