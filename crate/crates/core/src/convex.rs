//! Convex counterpart of the factorized objective.
//!
//! Minimizing `(λW/2)‖W‖² + (λH/2)‖H‖²` over factorizations `WH = Z` gives
//! `√(λWλH)‖Z‖_*`, so
//!
//! ```text
//! f̃(Z, b) = g(Z + b1ᵀ) + √(λWλH)‖Z‖_* + (λb/2)‖b‖²
//! ```
//!
//! lower-bounds `f(W, H, b)` whenever `Z = WH`. Its optimality system is
//! checked by [`kkt_residuals`].

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{domain, shape, Result};
use crate::model::{data_loss, grad_g, Hyperparams};
use crate::numerics::{singular_values, spectral_norm, svd, DEFAULT_REL_CUTOFF};

pub fn nuclear_norm(z: &DMatrix<f64>) -> Result<f64> {
    Ok(singular_values(z)?.sum())
}

/// Balanced factors `W = α^{1/4} U Σ^{1/2}`, `H = α^{-1/4} Σ^{1/2} Vᵀ` of `Z`
/// that attain the variational form of the nuclear norm.
pub fn balanced_factorization(z: &DMatrix<f64>, alpha: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(alpha > 0.0) {
        return Err(domain(format!("alpha must be > 0, got {alpha}")));
    }
    let r = svd(z, DEFAULT_REL_CUTOFF)?;
    let root = r.singular_values.map(f64::sqrt);
    let a4 = alpha.powf(0.25);
    let mut w = r.u.clone();
    let mut h = r.v.transpose();
    for i in 0..root.len() {
        let s = if i < r.rank { root[i] } else { 0.0 };
        w.column_mut(i).scale_mut(a4 * s);
        h.row_mut(i).scale_mut(s / a4);
    }
    Ok((w, h))
}

/// `(‖W‖² + α‖H‖²)/(2√α) − ‖WH‖_*`; never negative up to rounding.
pub fn variational_gap(w: &DMatrix<f64>, h: &DMatrix<f64>, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(domain(format!("alpha must be > 0, got {alpha}")));
    }
    if w.ncols() != h.nrows() {
        return Err(shape(format!("W {:?} and H {:?} do not compose", w.shape(), h.shape())));
    }
    let energy = (w.norm_squared() + alpha * h.norm_squared()) / (2.0 * alpha.sqrt());
    Ok(energy - nuclear_norm(&(w * h))?)
}

fn shifted(z: &DMatrix<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    let mut out = z.clone();
    for mut col in out.column_iter_mut() {
        col += b;
    }
    out
}

/// `f̃(Z, b)`.
pub fn convex_objective(z: &DMatrix<f64>, b: &DVector<f64>, hp: &Hyperparams) -> Result<f64> {
    if b.len() != z.nrows() {
        return Err(shape("bias length does not match Z"));
    }
    let g = data_loss(&shifted(z, b), hp)?;
    Ok(g + hp.threshold() * nuclear_norm(z)? + 0.5 * hp.lambda_b * b.norm_squared())
}

/// Residuals of the convex optimality system at `(Z, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KktReport {
    /// `‖∇g V + √(λWλH) U‖_F`.
    pub uv_residual_left: f64,
    /// `‖∇gᵀ U + √(λWλH) V‖_F`.
    pub uv_residual_right: f64,
    /// `√(λWλH) − ‖∇g‖`; negative means the spectral bound is violated.
    pub spectral_slack: f64,
    /// `‖Σ_i [∇g]_i + λb b‖`.
    pub bias_residual: f64,
    pub rank_used: usize,
}

impl KktReport {
    /// Whether `(Z, b)` solves the convex program to tolerance `tol`.
    pub fn is_optimal(&self, tol: f64) -> bool {
        self.uv_residual_left <= tol
            && self.uv_residual_right <= tol
            && self.bias_residual <= tol
            && self.spectral_slack >= -tol
    }
}

pub fn kkt_residuals(z: &DMatrix<f64>, b: &DVector<f64>, hp: &Hyperparams) -> Result<KktReport> {
    kkt_residuals_with_cutoff(z, b, hp, DEFAULT_REL_CUTOFF)
}

pub fn kkt_residuals_with_cutoff(
    z: &DMatrix<f64>,
    b: &DVector<f64>,
    hp: &Hyperparams,
    rel_cutoff: f64,
) -> Result<KktReport> {
    if !(hp.lambda_w * hp.lambda_h > 0.0) {
        return Err(domain("KKT residuals need lambda_w * lambda_h > 0"));
    }
    if b.len() != z.nrows() {
        return Err(shape("bias length does not match Z"));
    }
    let t = hp.threshold();
    let g = grad_g(&shifted(z, b), hp)?;
    let r = svd(z, rel_cutoff)?;
    let left = &g * &r.v + &r.u * t;
    let right = g.transpose() * &r.u + &r.v * t;
    Ok(KktReport {
        uv_residual_left: left.norm(),
        uv_residual_right: right.norm(),
        spectral_slack: t - spectral_norm(&g)?,
        bias_residual: (g.column_sum() + b * hp.lambda_b).norm(),
        rank_used: r.rank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag34() -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 4.0]))
    }

    #[test]
    fn nuclear_norm_small_cases() {
        assert!((nuclear_norm(&diag34()).unwrap() - 7.0).abs() < 1e-14);
        assert_eq!(nuclear_norm(&DMatrix::zeros(3, 4)).unwrap(), 0.0);
    }

    #[test]
    fn balanced_energy_of_diagonal() {
        let (w, h) = balanced_factorization(&diag34(), 1.0).unwrap();
        assert!(((w.norm_squared() + h.norm_squared()) / 2.0 - 7.0).abs() < 1e-12);
        assert!((&w * &h - diag34()).norm() < 1e-12);
    }

    #[test]
    fn balanced_factorization_of_rank_deficient_product() {
        let u = DMatrix::from_row_slice(3, 1, &[1.0, -2.0, 0.5]);
        let v = DMatrix::from_row_slice(1, 4, &[0.3, 1.0, -1.0, 2.0]);
        let z = &u * &v;
        let (w, h) = balanced_factorization(&z, 2.0).unwrap();
        assert!((&w * &h - &z).norm() < 1e-12);
        assert!(variational_gap(&w, &h, 2.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn balanced_factorization_rejects_bad_alpha() {
        assert!(balanced_factorization(&diag34(), 0.0).is_err());
        assert!(variational_gap(&diag34(), &diag34(), -1.0).is_err());
    }

    #[test]
    fn gap_with_zero_factor_is_the_energy() {
        let w = DMatrix::from_element(2, 3, 0.5);
        let h = DMatrix::zeros(3, 4);
        let gap = variational_gap(&w, &h, 4.0).unwrap();
        assert!((gap - w.norm_squared() / 4.0).abs() < 1e-15);
    }

    #[test]
    fn unbalanced_scaling_opens_a_gap() {
        let (w, h) = balanced_factorization(&diag34(), 1.0).unwrap();
        let gap = variational_gap(&(w * 10.0), &(h / 10.0), 1.0).unwrap();
        assert!(gap > 1.0);
    }

    #[test]
    fn convex_objective_at_zero() {
        let hp = Hyperparams::reference();
        let z = DMatrix::zeros(4, 100);
        let v = convex_objective(&z, &DVector::zeros(4), &hp).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-14);
    }
}
