//! Simplex equiangular tight frames, the scale curve `ξ(ρ)` and the canonical
//! global minimizer built from them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::model::{Hyperparams, ModelState};
use crate::numerics::centering;
use crate::rng::{gaussian_matrix, stream_rng};

/// Golden-section tolerance on `ρ`.
pub const RHO_TOL: f64 = 1e-10;
const PRESCAN_POINTS: usize = 64;
const MAX_DOUBLINGS: usize = 200;

/// How a K×K simplex frame is lifted into `R^d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Lift {
    /// First `K` columns of the `d×d` identity.
    Identity,
    /// Orthonormal factor of a seeded Gaussian `d×K` matrix.
    Random(u64),
}

/// A `d×K` simplex ETF. Columns of `m` have unit norm; `scale` multiplies them.
#[derive(Debug, Clone, PartialEq)]
pub struct EtfFrame {
    pub m: DMatrix<f64>,
    pub lift: Lift,
    pub scale: f64,
}

impl EtfFrame {
    pub fn rotation_seed(&self) -> Option<u64> {
        match self.lift {
            Lift::Identity => None,
            Lift::Random(seed) => Some(seed),
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    /// `scale * M` (d×K).
    pub fn scaled(&self) -> DMatrix<f64> {
        &self.m * self.scale
    }

    /// Classifier `W = (scale * M)^T` (K×d).
    pub fn classifier(&self) -> DMatrix<f64> {
        self.scaled().transpose()
    }
}

/// Target Gram `K/(K−1) (I − 11ᵀ/K)` of a unit-column simplex ETF.
pub fn etf_gram(k: usize) -> DMatrix<f64> {
    centering(k) * (k as f64 / (k as f64 - 1.0))
}

/// `√(K/(K−1)) (I − 11ᵀ/K)`.
pub fn standard_etf(k: usize) -> Result<DMatrix<f64>> {
    if k < 2 {
        return Err(domain(format!("a simplex ETF needs K >= 2, got {k}")));
    }
    Ok(centering(k) * (k as f64 / (k as f64 - 1.0)).sqrt())
}

/// Lifts the standard frame into `R^d` through an orthonormal `d×K` map.
pub fn lifted_etf(k: usize, d: usize, lift: Lift) -> Result<EtfFrame> {
    let base = standard_etf(k)?;
    if d < k {
        return Err(domain(format!("K = {k} vectors in R^{d} cannot form a K-simplex ETF")));
    }
    let p = match lift {
        Lift::Identity => DMatrix::identity(d, k),
        Lift::Random(seed) => {
            let g = gaussian_matrix(&mut stream_rng(seed, 0), d, k);
            g.qr().q()
        }
    };
    Ok(EtfFrame {
        m: p * base,
        lift,
        scale: 1.0,
    })
}

/// `√(λW / (λH n))`, the feature-to-classifier ratio at a global minimizer.
pub fn feature_ratio(hp: &Hyperparams) -> Result<f64> {
    require_positive_lambdas(hp)?;
    Ok((hp.lambda_w / (hp.lambda_h * hp.n as f64)).sqrt())
}

fn require_positive_lambdas(hp: &Hyperparams) -> Result<()> {
    if hp.lambda_w > 0.0 && hp.lambda_h > 0.0 {
        Ok(())
    } else {
        Err(domain(format!(
            "needs lambda_w * lambda_h > 0 (got {} and {})",
            hp.lambda_w, hp.lambda_h
        )))
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log c1` at energy `ρ`: `c1 = [(K−1) exp(−ρ s/(K−1))]^{-1}`.
fn log_c1_of_rho(rho: f64, hp: &Hyperparams, s: f64) -> f64 {
    let km1 = hp.k as f64 - 1.0;
    rho * s / km1 - km1.ln()
}

/// The equality-case constant `c1(ρ)`.
pub fn c1_of_rho(rho: f64, hp: &Hyperparams) -> Result<f64> {
    let s = feature_ratio(hp)?;
    Ok(log_c1_of_rho(rho, hp, s).exp())
}

/// `c2(c1) = log((1+c1)(K−1))/(1+c1) + c1 log((1+c1)/c1)/(1+c1)`.
pub fn c2_of_c1(c1: f64, k: usize) -> Result<f64> {
    if !(c1 > 0.0) {
        return Err(domain(format!("c1 must be > 0, got {c1}")));
    }
    Ok(c2_from_log_c1(c1.ln(), k))
}

fn c2_from_log_c1(lc: f64, k: usize) -> f64 {
    // 1/(1+c1) = sigmoid(-lc); c1/(1+c1) = sigmoid(lc); log(1+c1) = softplus(lc).
    let km1 = k as f64 - 1.0;
    sigmoid(-lc) * (km1.ln() + softplus(lc)) + sigmoid(lc) * softplus(-lc)
}

/// Scale curve `ξ(ρ)`: the tight lower bound of the objective over points with
/// classifier energy `‖W‖² = ρ`.
pub fn xi(rho: f64, hp: &Hyperparams) -> Result<f64> {
    let s = feature_ratio(hp)?;
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(domain(format!("rho must be finite and >= 0, got {rho}")));
    }
    if rho == 0.0 {
        // c1 = 1/(K−1), c2 = log K.
        return Ok((hp.k as f64).ln());
    }
    let km1 = hp.k as f64 - 1.0;
    let lc = log_c1_of_rho(rho, hp, s);
    let inv_1p_c1 = sigmoid(-lc);
    Ok(-rho * inv_1p_c1 * s / km1 + c2_from_log_c1(lc, hp.k) + hp.lambda_w * rho)
}

/// Minimizer of `ξ` and the constants at the minimum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct XiCurve {
    pub rho_star: f64,
    pub xi_star: f64,
    pub c1_star: f64,
    pub c2_star: f64,
    pub bracket: (f64, f64),
    /// Set when `ρ* = 0`: the origin is the global minimum and no ETF forms.
    pub warning: Option<String>,
}

fn xi_checked(rho: f64, hp: &Hyperparams) -> Result<f64> {
    let v = xi(rho, hp)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("xi({rho}) is not finite")))
    }
}

/// Minimizes `ξ` by geometric bracketing, a grid pre-scan and golden section.
pub fn rho_star(hp: &Hyperparams) -> Result<XiCurve> {
    require_positive_lambdas(hp)?;

    // Grow [0, hi] by doubling until xi turns upward.
    let mut prev = 0.0;
    let mut prev_val = xi_checked(0.0, hp)?;
    let mut hi = 1.0;
    let mut doublings = 0;
    loop {
        let v = xi_checked(hi, hp)?;
        if v > prev_val {
            break;
        }
        prev = hi;
        prev_val = v;
        hi *= 2.0;
        doublings += 1;
        if doublings > MAX_DOUBLINGS {
            return Err(Error::Numerical("xi never turned upward while bracketing".into()));
        }
    }
    // The probes were 0, 1, 2, 4, ...; the minimum lies past the probe before `prev`.
    let lo = if prev > 1.0 { prev / 2.0 } else { 0.0 };
    let bracket = (lo, hi);

    // Pre-scan guards against a non-unimodal curve inside the bracket.
    let step = (hi - lo) / PRESCAN_POINTS as f64;
    let mut best = 0;
    let mut best_val = f64::INFINITY;
    for i in 0..=PRESCAN_POINTS {
        let v = xi_checked(lo + step * i as f64, hp)?;
        if v < best_val {
            best_val = v;
            best = i;
        }
    }
    let a = lo + step * best.saturating_sub(1) as f64;
    let b = (lo + step * (best + 1) as f64).min(hi);
    let (mut rho, mut val) = golden_section(|r| xi_checked(r, hp), a, b, RHO_TOL)?;
    if best_val < val {
        rho = lo + step * best as f64;
        val = best_val;
    }
    // Degenerate regime: the curve increases from the origin.
    let origin = xi_checked(0.0, hp)?;
    if origin <= val {
        rho = 0.0;
        val = origin;
    }

    let warning = (rho == 0.0).then(|| {
        let msg = format!(
            "rho* = 0: sqrt(lambda_w*lambda_h) = {:.3e} >= 1/(K sqrt(n)) = {:.3e}; the origin is the global minimum",
            hp.threshold(),
            1.0 / (hp.k as f64 * (hp.n as f64).sqrt())
        );
        log::warn!("{msg}");
        msg
    });
    let c1_star = c1_of_rho(rho, hp)?;
    Ok(XiCurve {
        rho_star: rho,
        xi_star: val,
        c1_star,
        c2_star: c2_of_c1(c1_star, hp.k)?,
        bracket,
        warning,
    })
}

/// Golden-section search for a minimum of `f` on `[a, b]`.
pub fn golden_section<F>(mut f: F, mut a: f64, mut b: f64, tol: f64) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
        if b - a <= f64::EPSILON * b.abs().max(1.0) {
            break;
        }
    }
    let x = 0.5 * (a + b);
    let fx = f(x)?;
    Ok(if fx <= fc.min(fd) {
        (x, fx)
    } else if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    })
}

/// Canonical global minimizer: `Wᵀ` a scaled simplex ETF with `‖W‖² = ρ*`,
/// every feature `h_{k,i} = √(λW/(λH n)) w^k`, and `b = 0`.
pub fn canonical_global_minimizer(hp: &Hyperparams, lift: Lift) -> Result<ModelState> {
    let curve = rho_star(hp)?;
    if curve.rho_star == 0.0 {
        return Err(Error::Degenerate(
            "rho* = 0: the global minimizer is the origin, not a simplex ETF".into(),
        ));
    }
    minimizer_at_energy(hp, lift, curve.rho_star)
}

/// The ETF-structured point with classifier energy `rho` (a global minimizer
/// when `rho = ρ*`).
pub fn minimizer_at_energy(hp: &Hyperparams, lift: Lift, rho: f64) -> Result<ModelState> {
    let s = feature_ratio(hp)?;
    let frame = lifted_etf(hp.k, hp.d, lift)?.with_scale((rho / hp.k as f64).sqrt());
    let w = frame.classifier();
    let mut h = DMatrix::zeros(hp.d, hp.n_total());
    for j in 0..hp.n_total() {
        let wk = w.row(hp.class_of(j)).transpose();
        h.set_column(j, &(wk * s));
    }
    Ok(ModelState {
        w,
        h,
        b: DVector::zeros(hp.k),
    })
}

/// One condition of the global-form report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FormCheck {
    pub pass: bool,
    pub residual: f64,
}

impl FormCheck {
    fn new(residual: f64, tol: f64) -> Self {
        Self {
            pass: residual <= tol,
            residual,
        }
    }
}

/// Residuals of the structural conditions every global minimizer satisfies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GlobalFormReport {
    /// (a) all classifier rows have the same norm.
    pub equal_norms: FormCheck,
    /// (b) `b = b·1`, with `b = 0` when `λb > 0`.
    pub bias: FormCheck,
    /// (c) per-sample class averages vanish and `h_{k,i} = √(λW/(λH n)) w^k`.
    pub features: FormCheck,
    /// (d) normalized `WWᵀ` equals the centering matrix.
    pub etf_gram: FormCheck,
    /// (e) everything above holds.
    pub all_pass: bool,
}

pub fn check_global_form(s: &ModelState, hp: &Hyperparams, tol: f64) -> GlobalFormReport {
    let (k, n) = (hp.k, hp.n);

    let norms: Vec<f64> = (0..k).map(|i| s.w.row(i).norm()).collect();
    let mean_norm = norms.iter().sum::<f64>() / k as f64;
    let spread = norms.iter().map(|x| (x - mean_norm).abs()).fold(0.0, f64::max);
    let equal_norms = FormCheck::new(
        if mean_norm > 0.0 {
            spread / mean_norm
        } else {
            f64::INFINITY
        },
        tol,
    );

    let b_mean = s.b.mean();
    let mut bias_res = s.b.iter().map(|x| (x - b_mean).abs()).fold(0.0, f64::max);
    if hp.lambda_b > 0.0 {
        bias_res = bias_res.max(b_mean.abs());
    }
    let bias = FormCheck::new(bias_res, tol);

    let features = match feature_ratio(hp) {
        Ok(ratio) if s.h.shape() == (hp.d, hp.n_total()) => {
            let mut res = 0.0f64;
            for i in 0..n {
                let mut avg = DVector::zeros(hp.d);
                for c in 0..k {
                    avg += s.h.column(c * n + i);
                }
                res = res.max((avg / k as f64).norm());
                for c in 0..k {
                    let target = s.w.row(c).transpose() * ratio;
                    res = res.max((s.h.column(c * n + i) - target).norm());
                }
            }
            FormCheck::new(res, tol)
        }
        _ => FormCheck::new(f64::INFINITY, tol),
    };

    let rho = s.w.norm_squared();
    let etf_res = if rho > 0.0 {
        let gram = &s.w * s.w.transpose() * ((k as f64 - 1.0) / rho);
        (gram - centering(k)).norm()
    } else {
        f64::INFINITY
    };
    let etf_gram = FormCheck::new(etf_res, tol);

    GlobalFormReport {
        equal_norms,
        bias,
        features,
        etf_gram,
        all_pass: equal_norms.pass && bias.pass && features.pass && etf_gram.pass,
    }
}
