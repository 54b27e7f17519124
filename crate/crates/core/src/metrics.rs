//! Neural-collapse metrics NC1–NC4.
//!
//! * NC1 = tr(Σ_W Σ_B†)/K, within-class variability relative to between-class spread.
//! * NC2 = distance of the normalized classifier Gram `WWᵀ` from the unit-energy simplex ETF.
//! * NC3 = the same distance for `W H̄`, the classifier against centered class means.
//! * NC4 = ‖b + W h_G‖, how well the bias cancels the global feature mean.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::model::{Hyperparams, ModelState};
use crate::numerics::{centering, pinv_psd};

/// Relative eigenvalue cutoff for `Σ_B†` (rank Σ_B ≤ K−1 < d structurally).
pub const SIGMA_B_CUTOFF: f64 = 1e-10;

/// First and second moments of the features, per class and overall.
#[derive(Debug, Clone)]
pub struct ClassStats {
    pub global_mean: DVector<f64>,
    /// d×K, column `k` is the mean of class `k`.
    pub class_means: DMatrix<f64>,
    pub sigma_w: DMatrix<f64>,
    pub sigma_b: DMatrix<f64>,
    /// d×K, class means minus the global mean.
    pub hbar: DMatrix<f64>,
    /// Largest absolute feature entry, used to judge "numerically zero".
    scale: f64,
}

pub fn class_stats(h: &DMatrix<f64>, hp: &Hyperparams) -> Result<ClassStats> {
    let (d, n, k) = (hp.d, hp.n, hp.k);
    if h.shape() != (d, hp.n_total()) {
        return Err(shape(format!("H is {:?}, expected ({d}, {})", h.shape(), hp.n_total())));
    }
    let mut class_means = DMatrix::zeros(d, k);
    for c in 0..k {
        let block = h.columns(c * n, n);
        class_means.set_column(c, &(block.column_sum() / n as f64));
    }
    let global_mean = h.column_sum() / hp.n_total() as f64;

    let mut sigma_w = DMatrix::zeros(d, d);
    for j in 0..hp.n_total() {
        let dev = h.column(j) - class_means.column(hp.class_of(j));
        sigma_w += &dev * dev.transpose();
    }
    sigma_w /= hp.n_total() as f64;

    let mut hbar = class_means.clone();
    for mut col in hbar.column_iter_mut() {
        col -= &global_mean;
    }
    let sigma_b = &hbar * hbar.transpose() / k as f64;
    let scale = h.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    Ok(ClassStats {
        global_mean,
        class_means,
        sigma_w,
        sigma_b,
        hbar,
        scale,
    })
}

impl ClassStats {
    fn negligible(&self, m: &DMatrix<f64>) -> bool {
        let tol = (64.0 * f64::EPSILON * self.scale).powi(2);
        m.iter().all(|x| x.abs() <= tol)
    }
}

/// The four collapse metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NcMetrics {
    pub nc1: f64,
    pub nc2: f64,
    pub nc3: f64,
    pub nc4: f64,
}

/// Caller options for [`nc_metrics_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct MetricOptions {
    /// Subtract the global feature mean before measuring. Σ_W, Σ_B and H̄ are
    /// unaffected; NC4 then reduces to ‖b‖.
    pub center_features: bool,
}

pub fn nc1(stats: &ClassStats, hp: &Hyperparams) -> Result<f64> {
    if stats.negligible(&stats.sigma_b) {
        return if stats.negligible(&stats.sigma_w) {
            Ok(0.0)
        } else {
            Err(Error::Domain("NC1 undefined: between-class covariance is zero".into()))
        };
    }
    let pinv = pinv_psd(&stats.sigma_b, SIGMA_B_CUTOFF)?;
    Ok(((&stats.sigma_w * pinv).trace() / hp.k as f64).max(0.0))
}

/// `‖A/‖A‖_F − (I − 11ᵀ/K)/√(K−1)‖_F`.
pub fn etf_distance(a: &DMatrix<f64>) -> Option<f64> {
    let k = a.nrows();
    let norm = a.norm();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    let target = centering(k) / (k as f64 - 1.0).sqrt();
    Some((a / norm - target).norm())
}

pub fn nc2(w: &DMatrix<f64>) -> Result<f64> {
    etf_distance(&(w * w.transpose())).ok_or_else(|| Error::Domain("NC2 undefined: W W^T is zero".into()))
}

pub fn nc3(w: &DMatrix<f64>, stats: &ClassStats) -> Result<f64> {
    etf_distance(&(w * &stats.hbar)).ok_or_else(|| Error::Domain("NC3 undefined: W Hbar is zero".into()))
}

pub fn nc4(w: &DMatrix<f64>, b: &DVector<f64>, global_mean: &DVector<f64>) -> f64 {
    (b + w * global_mean).norm()
}

pub fn nc_metrics(s: &ModelState, hp: &Hyperparams) -> Result<NcMetrics> {
    nc_metrics_with(s, hp, MetricOptions::default())
}

pub fn nc_metrics_with(s: &ModelState, hp: &Hyperparams, opts: MetricOptions) -> Result<NcMetrics> {
    s.check(hp)?;
    let stats = class_stats(&s.h, hp)?;
    let mean = if opts.center_features {
        DVector::zeros(hp.d)
    } else {
        stats.global_mean.clone()
    };
    Ok(NcMetrics {
        nc1: nc1(&stats, hp)?,
        nc2: nc2(&s.w)?,
        nc3: nc3(&s.w, &stats)?,
        nc4: nc4(&s.w, &s.b, &mean),
    })
}

/// Like [`nc_metrics`] but reports undefined metrics as NaN instead of failing;
/// used for traces that start at degenerate points.
pub fn nc_metrics_lenient(s: &ModelState, hp: &Hyperparams) -> NcMetrics {
    let nan = NcMetrics {
        nc1: f64::NAN,
        nc2: f64::NAN,
        nc3: f64::NAN,
        nc4: f64::NAN,
    };
    let Ok(stats) = class_stats(&s.h, hp) else {
        return nan;
    };
    NcMetrics {
        nc1: nc1(&stats, hp).unwrap_or(f64::NAN),
        nc2: nc2(&s.w).unwrap_or(f64::NAN),
        nc3: nc3(&s.w, &stats).unwrap_or(f64::NAN),
        nc4: nc4(&s.w, &s.b, &stats.global_mean),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp() -> Hyperparams {
        Hyperparams::new(3, 5, 4, 1e-2, 1e-2, 0.0).unwrap()
    }

    #[test]
    fn constant_features_have_no_spread() {
        let hp = hp();
        let v = DVector::from_vec(vec![0.1, -2.0, 3.5, 0.0, 1.0]);
        let h = DMatrix::from_fn(5, 12, |r, _| v[r]);
        let st = class_stats(&h, &hp).unwrap();
        assert!((st.global_mean.clone() - v).norm() < 1e-15);
        assert!(st.sigma_w.norm() < 1e-28);
        assert!(st.sigma_b.norm() < 1e-28);
        assert_eq!(nc1(&st, &hp).unwrap(), 0.0);
    }

    #[test]
    fn nc1_undefined_without_between_class_spread() {
        let hp = hp();
        let h = DMatrix::from_fn(5, 12, |r, c| if c % 4 == 0 { r as f64 } else { -(r as f64) });
        let st = class_stats(&h, &hp).unwrap();
        assert!(nc1(&st, &hp).is_err());
    }

    #[test]
    fn nc2_undefined_at_zero_classifier() {
        assert!(nc2(&DMatrix::zeros(3, 5)).is_err());
    }

    #[test]
    fn class_means_average_to_global_mean() {
        let hp = hp();
        let h = DMatrix::from_fn(5, 12, |r, c| ((r * 7 + c * 3) % 11) as f64 - 4.0);
        let st = class_stats(&h, &hp).unwrap();
        let avg = st.class_means.column_sum() / 3.0;
        assert!((avg - &st.global_mean).norm() < 1e-12);
        assert!(st.hbar.column_sum().norm() < 1e-12);
    }

    #[test]
    fn centering_option_only_moves_nc4() {
        let hp = hp();
        let mut s = ModelState::zeros(&hp);
        s.w = DMatrix::from_fn(3, 5, |r, c| (r as f64 + 1.0) * (c as f64 - 2.0) + 0.3 * r as f64);
        s.h = DMatrix::from_fn(5, 12, |r, c| ((r * 5 + c * 7) % 13) as f64 * 0.1 + 1.0);
        s.b = DVector::from_vec(vec![0.2, -0.1, 0.4]);
        let raw = nc_metrics(&s, &hp).unwrap();
        let cen = nc_metrics_with(&s, &hp, MetricOptions { center_features: true }).unwrap();
        assert_eq!(raw.nc1, cen.nc1);
        assert_eq!(raw.nc2, cen.nc2);
        assert_eq!(raw.nc3, cen.nc3);
        assert!((cen.nc4 - s.b.norm()).abs() < 1e-15);
    }
}
