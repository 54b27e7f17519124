#![allow(dead_code)]

use collapse_core::rng::{stream_rng, uniform_matrix};
use collapse_core::{GradTriple, Hyperparams, ModelState};
use nalgebra::{DMatrix, DVector};

pub fn small_hp() -> Hyperparams {
    Hyperparams::new(4, 6, 10, 5e-3, 5e-3, 1e-3).unwrap()
}

pub fn random_state(hp: &Hyperparams, seed: u64, scale: f64) -> ModelState {
    let mut rng = stream_rng(seed, 77);
    ModelState {
        w: uniform_matrix(&mut rng, hp.k, hp.d, scale),
        h: uniform_matrix(&mut rng, hp.d, hp.n_total(), scale),
        b: uniform_matrix(&mut rng, hp.k, 1, scale).column(0).into_owned(),
    }
}

pub fn random_direction(hp: &Hyperparams, seed: u64) -> GradTriple {
    let mut rng = stream_rng(seed, 78);
    GradTriple {
        dw: uniform_matrix(&mut rng, hp.k, hp.d, 1.0),
        dh: uniform_matrix(&mut rng, hp.d, hp.n_total(), 1.0),
        db: uniform_matrix(&mut rng, hp.k, 1, 1.0).column(0).into_owned(),
    }
}

pub fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_gradient(mut f: impl FnMut(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        g[i] = (up - down) / (2.0 * h);
    }
    g
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix, ascending. Kept
/// deliberately naive: every sweep visits every pair with the textbook update.
pub fn jacobi_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    for _ in 0..200 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .map(|(i, j)| m[(i, j)].powi(2))
            .sum();
        if off.sqrt() <= 1e-15 * m.norm() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[(p, q)] == 0.0 {
                    continue;
                }
                let phi = 0.5 * (2.0 * m[(p, q)]).atan2(m[(q, q)] - m[(p, p)]);
                let (s, c) = phi.sin_cos();
                let mut j = DMatrix::<f64>::identity(n, n);
                j[(p, p)] = c;
                j[(q, q)] = c;
                j[(p, q)] = s;
                j[(q, p)] = -s;
                m = j.transpose() * &m * &j;
            }
        }
    }
    let mut vals: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    vals.sort_by(f64::total_cmp);
    vals
}
