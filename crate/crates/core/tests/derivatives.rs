mod common;

use collapse_core::model::{data_loss, grad_g, gradient, hessian_bilinear, hessian_vector_product, objective};
use collapse_core::{GradTriple, ModelState};
use common::*;
use nalgebra::DVector;
use proptest::prelude::*;

fn flat_objective(hp: &collapse_core::Hyperparams) -> impl Fn(&DVector<f64>) -> f64 + '_ {
    move |x| objective(&ModelState::from_flat(x, hp), hp).unwrap()
}

#[test]
fn gradient_matches_central_differences_on_twenty_states() {
    let hp = small_hp();
    for seed in 0..20 {
        let s = random_state(&hp, seed, 1.0);
        let exact = gradient(&s, &hp).unwrap().to_flat();
        let fd = fd_gradient(flat_objective(&hp), &s.to_flat(), 1e-5);
        let err = rel_err(&fd, &exact);
        assert!(err <= 1e-6, "seed {seed}: relative gradient error {err:.3e}");
    }
}

#[test]
fn hessian_bilinear_matches_differences_of_gradients() {
    let hp = small_hp();
    let h = 1e-5;
    for seed in 0..20 {
        let s = random_state(&hp, seed, 1.0);
        let a = random_direction(&hp, 2 * seed);
        let b = random_direction(&hp, 2 * seed + 1);
        let up = gradient(&s.step(&b, h), &hp).unwrap().dot(&a);
        let down = gradient(&s.step(&b, -h), &hp).unwrap().dot(&a);
        let fd = (up - down) / (2.0 * h);
        let exact = hessian_bilinear(&s, &hp, &a, &b).unwrap();
        assert!(rel_diff(exact, fd) <= 1e-4, "seed {seed}: {exact} vs {fd}");
    }
}

#[test]
fn hessian_vector_product_agrees_with_bilinear_form() {
    let hp = small_hp();
    let s = random_state(&hp, 3, 1.0);
    let a = random_direction(&hp, 4);
    let b = random_direction(&hp, 5);
    let hv = hessian_vector_product(&s, &hp, &a).unwrap();
    let bil = hessian_bilinear(&s, &hp, &b, &a).unwrap();
    assert!(rel_diff(hv.dot(&b), bil) <= 1e-12);
}

#[test]
fn hessian_is_symmetric() {
    let hp = small_hp();
    let s = random_state(&hp, 9, 1.0);
    let a = random_direction(&hp, 10);
    let b = random_direction(&hp, 11);
    let ab = hessian_bilinear(&s, &hp, &a, &b).unwrap();
    let ba = hessian_bilinear(&s, &hp, &b, &a).unwrap();
    assert!(rel_diff(ab, ba) <= 1e-12);
}

#[test]
fn objective_at_origin_is_log_k() {
    let hp = small_hp();
    let zero = ModelState::from_flat(&DVector::zeros(GradTriple::zeros(&hp).to_flat().len()), &hp);
    assert!((objective(&zero, &hp).unwrap() - (hp.k as f64).ln()).abs() <= 8.0 * f64::EPSILON);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn data_loss_ignores_a_common_logit_shift(seed in 0u64..10_000, shift in -20.0f64..20.0) {
        let hp = small_hp();
        let s = random_state(&hp, seed, 2.0);
        let z = s.logits();
        let shifted = z.add_scalar(shift);
        let a = data_loss(&z, &hp).unwrap();
        let b = data_loss(&shifted, &hp).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn logit_gradient_columns_sum_to_zero(seed in 0u64..10_000) {
        let hp = small_hp();
        let g = grad_g(&random_state(&hp, seed, 3.0).logits(), &hp).unwrap();
        for col in g.column_iter() {
            prop_assert!(col.sum().abs() <= 1e-16);
        }
    }

    #[test]
    fn objective_is_nonnegative_and_finite(seed in 0u64..10_000, scale in 0.0f64..50.0) {
        let hp = small_hp();
        let f = objective(&random_state(&hp, seed, scale), &hp).unwrap();
        prop_assert!(f.is_finite() && f >= 0.0);
    }

    #[test]
    fn regularizer_gradient_is_exact(seed in 0u64..10_000) {
        // With identical logits the data term is flat in W and H directions
        // that keep WH fixed; scaling W by c and H by 1/c changes only the
        // regularizer, whose derivative at c = 1 is λW‖W‖² − λH‖H‖².
        let hp = small_hp();
        let s = random_state(&hp, seed, 1.0);
        let dir = GradTriple { dw: s.w.clone(), dh: -s.h.clone(), db: DVector::zeros(hp.k) };
        let slope = gradient(&s, &hp).unwrap().dot(&dir);
        let expected = hp.lambda_w * s.w.norm_squared() - hp.lambda_h * s.h.norm_squared();
        prop_assert!((slope - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
    }
}
