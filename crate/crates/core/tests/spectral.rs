mod common;

use collapse_core::landscape::{min_eig_estimate, min_eig_estimate_with_probes, negative_curvature_direction};
use collapse_core::model::{grad_g, hessian_bilinear, hessian_vector_product, objective};
use collapse_core::numerics::{pinv_psd, singular_values, spectral_norm, svd, sym_eig, DEFAULT_REL_CUTOFF};
use collapse_core::rng::{gaussian_matrix, stream_rng};
use collapse_core::{GradTriple, Hyperparams, ModelState};
use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn origin(hp: &Hyperparams) -> ModelState {
    ModelState {
        w: DMatrix::zeros(hp.k, hp.d),
        h: DMatrix::zeros(hp.d, hp.n_total()),
        b: nalgebra::DVector::zeros(hp.k),
    }
}

fn low_rank(seed: u64, m: usize, n: usize, r: usize) -> DMatrix<f64> {
    let mut rng = stream_rng(seed, 5);
    gaussian_matrix(&mut rng, m, r) * gaussian_matrix(&mut rng, r, n)
}

fn dense_hessian(s: &ModelState, hp: &Hyperparams) -> DMatrix<f64> {
    let dim = s.to_flat().len();
    let mut out = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        let mut e = nalgebra::DVector::zeros(dim);
        e[i] = 1.0;
        let col = hessian_vector_product(s, hp, &GradTriple::from_flat(&e, hp))
            .unwrap()
            .to_flat();
        out.set_column(i, &col);
    }
    (&out + out.transpose()) * 0.5
}

#[test]
fn singular_values_match_nalgebra_on_full_rank_inputs() {
    for seed in 0..50 {
        let a = gaussian_matrix(&mut stream_rng(seed, 1), 5, 8);
        let ours = singular_values(&a).unwrap();
        let mut theirs: Vec<f64> = a.clone().svd(false, false).singular_values.iter().copied().collect();
        theirs.sort_by(|x, y| y.total_cmp(x));
        for (x, y) in ours.iter().zip(&theirs) {
            assert!(rel_diff(*x, *y) <= 1e-12, "seed {seed}: {x} vs {y}");
        }
    }
}

#[test]
fn squared_singular_values_are_gram_eigenvalues() {
    for seed in 0..20 {
        let a = low_rank(seed, 6, 5, 2);
        let mut sv: Vec<f64> = singular_values(&a).unwrap().iter().map(|s| s * s).collect();
        sv.sort_by(f64::total_cmp);
        let oracle = jacobi_eigenvalues(&(a.transpose() * &a));
        let scale = oracle.last().copied().unwrap();
        for (x, y) in sv.iter().zip(&oracle) {
            assert!((x - y).abs() <= 1e-12 * scale, "seed {seed}: {x} vs {y}");
        }
    }
}

#[test]
fn sym_eig_matches_naive_jacobi() {
    for seed in 0..20 {
        let a = low_rank(seed, 7, 7, 3);
        let sym = &a + a.transpose();
        let (vals, vecs) = sym_eig(&sym).unwrap();
        let oracle = jacobi_eigenvalues(&sym);
        for (x, y) in vals.iter().zip(&oracle) {
            assert!((x - y).abs() <= 1e-12 * sym.norm(), "seed {seed}: {x} vs {y}");
        }
        let back = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
        assert!((back - &sym).norm() <= 1e-12 * sym.norm());
    }
}

#[test]
fn pseudo_inverse_satisfies_penrose_conditions() {
    let a = low_rank(3, 6, 4, 2);
    let psd = &a * a.transpose();
    let p = pinv_psd(&psd, DEFAULT_REL_CUTOFF).unwrap();
    assert!((&psd * &p * &psd - &psd).norm() <= 1e-10 * psd.norm());
    assert!((&p * &psd * &p - &p).norm() <= 1e-10 * p.norm());
    assert!((&psd * &p - (&psd * &p).transpose()).norm() <= 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn svd_reconstructs_rank_deficient_matrices(seed in 0u64..1_000_000, m in 1usize..7, n in 1usize..9, r in 1usize..7) {
        let r = r.min(m).min(n);
        let a = low_rank(seed, m, n, r);
        let f = svd(&a, DEFAULT_REL_CUTOFF).unwrap();
        prop_assert!(f.rank <= r);
        prop_assert!((f.reconstruct() - &a).norm() <= 1e-12 * a.norm().max(1.0));
        let eye = DMatrix::<f64>::identity(f.rank, f.rank);
        prop_assert!((f.u.transpose() * &f.u - &eye).norm() <= 1e-12);
        prop_assert!((f.v.transpose() * &f.v - &eye).norm() <= 1e-12);
    }
}

#[test]
fn origin_gradient_norm_is_one_over_k_sqrt_n() {
    let hp = Hyperparams::reference();
    let g = grad_g(&origin(&hp).logits(), &hp).unwrap();
    let expected = 1.0 / (hp.k as f64 * (hp.n as f64).sqrt());
    assert!((spectral_norm(&g).unwrap() - expected).abs() <= 1e-10);
    assert!((singular_values(&g).unwrap()[0] - expected).abs() <= 1e-10);
}

#[test]
fn origin_direction_curvature_three_ways() {
    let hp = Hyperparams::reference();
    let s = origin(&hp);
    let (delta, predicted) = negative_curvature_direction(&s, &hp).unwrap();
    // Unit `a` gives 2(‖∇g(0)‖ − √(λWλH)) = 2(0.05 − 0.005).
    assert!((predicted + 0.09).abs() <= 1e-10, "{predicted}");
    let bilinear = hessian_bilinear(&s, &hp, &delta, &delta).unwrap();
    assert!((bilinear - predicted).abs() <= 1e-10, "{bilinear} vs {predicted}");
    let h = 1e-3;
    let f0 = objective(&s, &hp).unwrap();
    let second = (objective(&s.step(&delta, h), &hp).unwrap() - 2.0 * f0
        + objective(&s.step(&delta, -h), &hp).unwrap())
        / (h * h);
    assert!((second - predicted).abs() <= 1e-4, "{second} vs {predicted}");
}

#[test]
fn origin_min_eigenvalue_is_negative() {
    let hp = Hyperparams::reference();
    let s = origin(&hp);
    let (delta, _) = negative_curvature_direction(&s, &hp).unwrap();
    let est = min_eig_estimate_with_probes(&s, &hp, 200, 1e-10, &[delta]).unwrap();
    assert!(est.lambda_min <= -0.045 + 1e-8, "{}", est.lambda_min);
}

#[test]
fn lanczos_matches_dense_hessian_spectrum() {
    let hp = Hyperparams::new(3, 4, 3, 1e-2, 1e-2, 1e-2).unwrap();
    for seed in 0..5 {
        let s = random_state(&hp, seed, 1.0);
        let dense = dense_hessian(&s, &hp);
        let oracle = jacobi_eigenvalues(&dense)[0];
        let est = min_eig_estimate(&s, &hp, 200, 1e-12).unwrap();
        assert!(
            (est.lambda_min - oracle).abs() <= 1e-8 * oracle.abs().max(1.0),
            "seed {seed}: {} vs {oracle}",
            est.lambda_min
        );
    }
    let dense = dense_hessian(&origin(&hp), &hp);
    let oracle = jacobi_eigenvalues(&dense)[0];
    let est = min_eig_estimate(&origin(&hp), &hp, 200, 1e-12).unwrap();
    assert!(
        (est.lambda_min - oracle).abs() <= 1e-8,
        "{} vs {oracle}",
        est.lambda_min
    );
}
