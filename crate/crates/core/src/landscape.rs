//! Critical-point classification.
//!
//! A critical point with `‖∇g(WH + b1ᵀ)‖ ≤ √(λWλH)` solves the convex
//! counterpart and is therefore a global minimum. Any other critical point (for
//! `d > K`) has an explicit negative-curvature direction built from a null
//! vector of `W` and the top singular pair of `∇g`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::error::{domain, Error, Result};
use crate::etf::{c1_of_rho, c2_of_c1, feature_ratio};
use crate::model::{data_loss, grad_g, gradient_from_grad_g, GradTriple, HessianOperator, Hyperparams, ModelState};
use crate::numerics::{svd, sym_eig, top_singular_triplet};
use crate::rng::stream_rng;

/// Singular values of `W` at or below this fraction of `σ_max(W)` count as null.
pub const NULL_SPACE_CUTOFF: f64 = 1e-8;
/// Relative margin by which `‖∇g‖` must exceed `√(λWλH)` for a saddle construction.
const SADDLE_MARGIN: f64 = 1e-9;

/// Default criticality tolerance `1e-6 · max(1, ‖state‖)`.
pub fn default_critical_tol(s: &ModelState) -> f64 {
    1e-6 * s.norm().max(1.0)
}

/// `‖WᵀW − (λH/λW) HHᵀ‖_F / max(1, ‖WᵀW‖_F)`.
pub fn balance_residual(s: &ModelState, hp: &Hyperparams) -> Result<f64> {
    let alpha = hp
        .alpha()
        .ok_or_else(|| domain("balance residual needs lambda_w > 0"))?;
    s.check(hp)?;
    let wtw = s.w.transpose() * &s.w;
    let hht = &s.h * s.h.transpose();
    Ok((&wtw - hht * alpha).norm() / wtw.norm().max(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    GlobalMinimum,
    StrictSaddle,
    NotCritical,
    DegenerateLambda,
}

#[derive(Debug, Clone, Serialize)]
pub struct Certificate {
    pub verdict: Verdict,
    pub grad_norm: f64,
    /// NaN when `λW = 0`.
    pub balance_residual: f64,
    pub grad_g_spectral_norm: f64,
    /// `√(λWλH)`.
    pub threshold: f64,
    #[serde(skip)]
    pub curvature_direction: Option<GradTriple>,
    pub curvature_value: Option<f64>,
}

/// Classifies `s` as a global minimum, a strict saddle or a non-critical point.
///
/// `tol` bounds the gradient norm for criticality and is also the relative
/// slack on the spectral test `‖∇g‖ ≤ √(λWλH)(1 + tol)`.
pub fn certify(s: &ModelState, hp: &Hyperparams, tol: f64) -> Result<Certificate> {
    s.check(hp)?;
    let z = s.logits();
    let g = grad_g(&z, hp)?;
    let grad_norm = gradient_from_grad_g(s, hp, &g).norm();
    let (sigma, _, _) = top_singular_triplet(&g)?;
    let threshold = hp.threshold();
    let mut cert = Certificate {
        verdict: Verdict::DegenerateLambda,
        grad_norm,
        balance_residual: balance_residual(s, hp).unwrap_or(f64::NAN),
        grad_g_spectral_norm: sigma,
        threshold,
        curvature_direction: None,
        curvature_value: None,
    };
    if !(hp.lambda_w * hp.lambda_h > 0.0) {
        return Ok(cert);
    }
    if grad_norm > tol {
        cert.verdict = Verdict::NotCritical;
        return Ok(cert);
    }
    if sigma <= threshold * (1.0 + tol) {
        cert.verdict = Verdict::GlobalMinimum;
        return Ok(cert);
    }
    if hp.d <= hp.k {
        return Err(Error::SaddleUnverifiable(format!(
            "critical point with ||grad g|| = {sigma:.6e} > {threshold:.6e}, but d = {} <= K = {}: \
             W has no guaranteed null space",
            hp.d, hp.k
        )));
    }
    let (dir, curvature) = build_direction(s, hp, &g)?;
    cert.verdict = Verdict::StrictSaddle;
    cert.curvature_direction = Some(dir);
    cert.curvature_value = Some(curvature);
    Ok(cert)
}

/// Unit vector in the (numerical) null space of `W`, preferring the lowest
/// coordinate index among equally good candidates.
pub fn null_vector(w: &DMatrix<f64>) -> Result<DVector<f64>> {
    let d = w.ncols();
    // Right singular vectors with sigma > cutoff * sigma_max span the row space.
    let basis = svd(w, NULL_SPACE_CUTOFF)?.v;
    if basis.ncols() == d {
        return Err(Error::Precondition(
            "W has full column rank: no null-space vector for the curvature construction".into(),
        ));
    }
    let project = |x: DVector<f64>| -> DVector<f64> {
        let coeffs = basis.transpose() * &x;
        x - &basis * coeffs
    };
    let axis = |i: usize| DVector::from_fn(d, |j, _| if j == i { 1.0 } else { 0.0 });
    let mut best = 0;
    let mut best_norm = -1.0;
    for i in 0..d {
        let nrm = project(axis(i)).norm();
        if nrm > best_norm + 1e-12 {
            best = i;
            best_norm = nrm;
        }
    }
    let a = project(project(axis(best)));
    Ok(&a / a.norm())
}

fn build_direction(s: &ModelState, hp: &Hyperparams, g: &DMatrix<f64>) -> Result<(GradTriple, f64)> {
    let alpha = hp.lambda_h / hp.lambda_w;
    let (sigma, u, v) = top_singular_triplet(g)?;
    let a = null_vector(&s.w)?;
    let a4 = alpha.powf(0.25);
    let dir = GradTriple {
        dw: &u * a.transpose() * a4,
        dh: &a * v.transpose() * (-1.0 / a4),
        db: DVector::zeros(hp.k),
    };
    let predicted = -2.0 * a.norm_squared() * (sigma - hp.threshold());
    Ok((dir, predicted))
}

/// Negative-curvature direction `Δ = (α^{1/4} u aᵀ, −α^{-1/4} a vᵀ, 0)` at a
/// strict saddle, with its predicted curvature `−2‖a‖²(‖∇g‖ − √(λWλH))`.
pub fn negative_curvature_direction(s: &ModelState, hp: &Hyperparams) -> Result<(GradTriple, f64)> {
    s.check(hp)?;
    if !(hp.lambda_w > 0.0 && hp.lambda_h > 0.0) {
        return Err(domain("negative-curvature construction needs lambda_w, lambda_h > 0"));
    }
    if hp.d <= hp.k {
        return Err(Error::Precondition(format!("needs d > K (d = {}, K = {})", hp.d, hp.k)));
    }
    let g = grad_g(&s.logits(), hp)?;
    let grad_norm = gradient_from_grad_g(s, hp, &g).norm();
    let tol = default_critical_tol(s);
    if grad_norm > tol {
        return Err(Error::Precondition(format!(
            "not a critical point: gradient norm {grad_norm:.3e} > {tol:.3e}"
        )));
    }
    let (sigma, _, _) = top_singular_triplet(&g)?;
    if sigma <= hp.threshold() * (1.0 + SADDLE_MARGIN) {
        return Err(Error::Precondition(format!(
            "||grad g|| = {sigma:.6e} does not exceed sqrt(lambda_w lambda_h) = {:.6e}: \
             the point satisfies the global optimality condition",
            hp.threshold()
        )));
    }
    build_direction(s, hp, &g)
}

/// A symmetric linear operator on `R^n`.
pub trait SymmetricOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &DVector<f64>) -> DVector<f64>;
}

/// `diag(values)`; a test seam for the eigen-solver.
pub struct DiagonalOperator(pub Vec<f64>);

impl SymmetricOperator for DiagonalOperator {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| self.0[i] * x[i])
    }
}

struct FlatHessian<'a> {
    op: HessianOperator<'a>,
    hp: &'a Hyperparams,
}

impl SymmetricOperator for FlatHessian<'_> {
    fn dim(&self) -> usize {
        self.op.dim()
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self.op.apply(&GradTriple::from_flat(x, self.hp)).to_flat()
    }
}

#[derive(Debug, Clone)]
pub struct LanczosResult {
    pub lambda_min: f64,
    pub vector: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Smallest eigenpair by Lanczos with full reorthogonalization.
///
/// The returned value never exceeds the Rayleigh quotient of any `probe`.
pub fn lanczos_min(
    op: &dyn SymmetricOperator,
    iters: usize,
    tol: f64,
    seed: u64,
    probes: &[DVector<f64>],
) -> Result<LanczosResult> {
    if iters == 0 {
        return Err(domain("Lanczos needs at least one iteration"));
    }
    let n = op.dim();
    let max_steps = iters.min(n);
    let mut rng = stream_rng(seed, 0);
    let mut q = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    q /= q.norm();

    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(max_steps);
    let mut alphas = Vec::with_capacity(max_steps);
    let mut betas: Vec<f64> = Vec::with_capacity(max_steps);
    let mut best = (f64::INFINITY, q.clone());
    let mut converged = false;
    let mut steps = 0;

    for j in 0..max_steps {
        basis.push(q.clone());
        let mut r = op.apply(&q);
        let a = q.dot(&r);
        alphas.push(a);
        // Full reorthogonalization, twice for stability.
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&r);
                r.axpy(-c, b, 1.0);
            }
        }
        let beta = r.norm();
        steps = j + 1;

        let m = alphas.len();
        let t = DMatrix::from_fn(m, m, |i, k| {
            if i == k {
                alphas[i]
            } else if i + 1 == k {
                betas[i]
            } else if k + 1 == i {
                betas[k]
            } else {
                0.0
            }
        });
        let (vals, vecs) = sym_eig(&t)?;
        let theta = vals[0];
        let y = vecs.column(0);
        let mut x = DVector::zeros(n);
        for (i, b) in basis.iter().enumerate() {
            x.axpy(y[i], b, 1.0);
        }
        best = (theta, x);
        let residual = beta * y[m - 1].abs();
        if residual <= tol * theta.abs().max(1.0) || beta <= f64::EPSILON * a.abs().max(1.0) {
            converged = true;
            break;
        }
        betas.push(beta);
        q = r / beta;
    }

    let (mut lambda_min, mut vector) = best;
    for p in probes {
        let pn = p.norm_squared();
        if pn == 0.0 {
            continue;
        }
        let rq = p.dot(&op.apply(p)) / pn;
        if rq < lambda_min {
            lambda_min = rq;
            vector = p / pn.sqrt();
        }
    }
    Ok(LanczosResult {
        lambda_min,
        vector,
        converged,
        iterations: steps,
    })
}

#[derive(Debug, Clone)]
pub struct MinEigEstimate {
    pub lambda_min: f64,
    pub direction: GradTriple,
    pub converged: bool,
}

/// Smallest Hessian eigenvalue at `s`.
pub fn min_eig_estimate(s: &ModelState, hp: &Hyperparams, iters: usize, tol: f64) -> Result<MinEigEstimate> {
    min_eig_estimate_with_probes(s, hp, iters, tol, &[])
}

/// [`min_eig_estimate`], never above the Rayleigh quotient of any probe direction.
pub fn min_eig_estimate_with_probes(
    s: &ModelState,
    hp: &Hyperparams,
    iters: usize,
    tol: f64,
    probes: &[GradTriple],
) -> Result<MinEigEstimate> {
    let op = FlatHessian {
        op: HessianOperator::new(s, hp)?,
        hp,
    };
    let flat: Vec<DVector<f64>> = probes.iter().map(GradTriple::to_flat).collect();
    let r = lanczos_min(&op, iters, tol, 0x1a2c_2005, &flat)?;
    Ok(MinEigEstimate {
        lambda_min: r.lambda_min,
        direction: GradTriple::from_flat(&r.vector, hp),
        converged: r.converged,
    })
}

/// Lower bound `−ρ s/((1+c1)(K−1)) + c2(c1)` on `g` at balanced points with
/// `‖W‖² = ρ`, where `s = √(λW/(λH n))`.
pub fn g_lower_bound(rho: f64, c1: f64, hp: &Hyperparams) -> Result<f64> {
    if !(c1 > 0.0) {
        return Err(domain(format!("c1 must be > 0, got {c1}")));
    }
    let s = feature_ratio(hp)?;
    Ok(-rho * s / ((1.0 + c1) * (hp.k as f64 - 1.0)) + c2_of_c1(c1, hp.k)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct GBoundEntry {
    pub c1: f64,
    pub bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GBoundReport {
    /// Whether the balance property holds to tolerance; the bound is only
    /// claimed at balanced points.
    pub hypothesis_met: bool,
    pub balance_residual: f64,
    pub rho: f64,
    pub g: f64,
    /// `c1(ρ)`, the equality-case constant.
    pub c1_equality: f64,
    /// `g − bound(c1(ρ))`; zero at the canonical minimizer.
    pub equality_gap: f64,
    pub entries: Vec<GBoundEntry>,
    pub all_hold: bool,
}

/// Grid of `c1` values probed by [`g_bound_check`] besides `c1(ρ)`.
pub const G_BOUND_GRID: [f64; 3] = [0.1, 1.0, 10.0];

pub fn g_bound_check(s: &ModelState, hp: &Hyperparams, balance_tol: f64) -> Result<GBoundReport> {
    s.check(hp)?;
    let residual = balance_residual(s, hp)?;
    let rho = s.w.norm_squared();
    let g = data_loss(&s.logits(), hp)?;
    let c1_eq = c1_of_rho(rho, hp)?;
    let slack = 1e-12 * g.abs().max(1.0);
    let mut entries = Vec::new();
    for c1 in G_BOUND_GRID.iter().copied().chain(std::iter::once(c1_eq)) {
        let bound = g_lower_bound(rho, c1, hp)?;
        entries.push(GBoundEntry {
            c1,
            bound,
            holds: g >= bound - slack,
        });
    }
    let eq_bound = entries.last().map(|e| e.bound).unwrap_or(f64::NAN);
    Ok(GBoundReport {
        hypothesis_met: residual <= balance_tol,
        balance_residual: residual,
        rho,
        g,
        c1_equality: c1_eq,
        equality_gap: g - eq_bound,
        all_hold: entries.iter().all(|e| e.holds),
        entries,
    })
}

/// Per-sample bound `(Σz − K z_k)/((1+c1)(K−1)) + c2(c1) ≤ CE(z, k)`.
pub fn ce_lower_bound(z: &[f64], k: usize, c1: f64) -> Result<f64> {
    if k >= z.len() || z.len() < 2 {
        return Err(domain("class index out of range"));
    }
    let kk = z.len() as f64;
    let spread = (z.iter().sum::<f64>() - kk * z[k]) / (kk - 1.0);
    Ok(spread / (1.0 + c1) + c2_of_c1(c1, z.len())?)
}

/// The `c1` at which [`ce_lower_bound`] is tight (given tied non-target logits).
pub fn ce_equality_c1(z: &[f64], k: usize) -> f64 {
    let kk = z.len() as f64;
    let spread = (z.iter().sum::<f64>() - kk * z[k]) / (kk - 1.0);
    1.0 / ((kk - 1.0) * spread.exp())
}
