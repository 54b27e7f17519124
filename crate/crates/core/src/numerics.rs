//! Dense linear-algebra kernels shared by every module.
//!
//! SVD and symmetric eigendecomposition use Jacobi rotations on top of
//! `nalgebra` storage; this module fixes orderings, rank cutoffs and fallbacks
//! so callers never see unsorted spectra.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Relative cutoff below which singular values / eigenvalues count as zero.
pub const DEFAULT_REL_CUTOFF: f64 = 1e-10;

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 10_000;

/// Compact SVD `A = U diag(s) V^T` with singular values in descending order.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v: DMatrix<f64>,
    pub rank: usize,
}

impl SvdResult {
    pub fn sigma_max(&self) -> f64 {
        if self.singular_values.is_empty() {
            0.0
        } else {
            self.singular_values[0]
        }
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let s = DMatrix::from_diagonal(&self.singular_values);
        &self.u * s * self.v.transpose()
    }
}

fn check_finite(a: &DMatrix<f64>, what: &str) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what}: non-finite entry")))
    }
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Full thin SVD, sorted, with no rank truncation.
///
/// One-sided Jacobi on whichever of `A`, `A^T` is tall. nalgebra's bidiagonal
/// SVD occasionally returns factors that do not reconstruct rank-deficient
/// inputs, which are the common case here.
fn sorted_svd(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let (m, n) = a.shape();
    if m.min(n) == 0 {
        return Ok((DMatrix::zeros(m, 0), DVector::zeros(0), DMatrix::zeros(n, 0)));
    }
    if m < n {
        let (u, s, v) = tall_jacobi_svd(a.transpose())?;
        return Ok((v, s, u));
    }
    tall_jacobi_svd(a.clone())
}

fn tall_jacobi_svd(mut b: DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let (m, p) = b.shape();
    let mut v = DMatrix::<f64>::identity(p, p);
    // Columns at rounding level of the whole matrix carry no signal.
    let negligible = (f64::EPSILON * b.norm()).powi(2);
    let orth_tol = m as f64 * f64::EPSILON;
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..p {
            for j in i + 1..p {
                let alpha = b.column(i).norm_squared();
                let beta = b.column(j).norm_squared();
                let gamma = b.column(i).dot(&b.column(j));
                if alpha <= negligible || beta <= negligible || gamma.abs() <= orth_tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut b, i, j, c, s);
                rotate_columns(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical("Jacobi SVD did not converge".into()));
    }

    let norms: Vec<f64> = (0..p).map(|k| b.column(k).norm()).collect();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let s_sorted = DVector::from_fn(p, |i, _| norms[order[i]]);
    let v_sorted = DMatrix::from_fn(p, p, |r, c| v[(r, order[c])]);
    let smax = s_sorted[0];
    let mut u = DMatrix::zeros(m, p);
    for (c, &k) in order.iter().enumerate() {
        if norms[k] > smax * f64::EPSILON * m as f64 && norms[k] > 0.0 {
            u.set_column(c, &(b.column(k) / norms[k]));
        } else {
            u.set_column(c, &orthogonal_completion(&u, c));
        }
    }
    Ok((u, s_sorted, v_sorted))
}

fn rotate_columns(a: &mut DMatrix<f64>, i: usize, j: usize, c: f64, s: f64) {
    for r in 0..a.nrows() {
        let (x, y) = (a[(r, i)], a[(r, j)]);
        a[(r, i)] = c * x - s * y;
        a[(r, j)] = s * x + c * y;
    }
}

/// Unit vector orthogonal to the first `filled` columns of `u`.
fn orthogonal_completion(u: &DMatrix<f64>, filled: usize) -> DVector<f64> {
    let m = u.nrows();
    let mut best = DVector::zeros(m);
    let mut best_norm = -1.0;
    for axis in 0..m {
        let mut e = DVector::zeros(m);
        e[axis] = 1.0;
        for _ in 0..2 {
            for k in 0..filled {
                let q = u.column(k);
                let proj = q.dot(&e);
                e -= q * proj;
            }
        }
        let nrm = e.norm();
        if nrm > best_norm + 1e-12 {
            best_norm = nrm;
            best = e;
        }
    }
    best / best_norm
}

/// Compact SVD dropping singular values `<= rel_cutoff * sigma_max`.
pub fn svd(a: &DMatrix<f64>, rel_cutoff: f64) -> Result<SvdResult> {
    check_finite(a, "svd")?;
    let (u, s, v) = sorted_svd(a)?;
    let smax = if s.is_empty() { 0.0 } else { s[0] };
    let rank = if smax == 0.0 {
        0
    } else {
        s.iter().take_while(|&&x| x > rel_cutoff * smax).count()
    };
    Ok(SvdResult {
        u: u.columns(0, rank).into_owned(),
        singular_values: s.rows(0, rank).into_owned(),
        v: v.columns(0, rank).into_owned(),
        rank,
    })
}

/// Singular values of `a` in descending order, untruncated.
pub fn singular_values(a: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_finite(a, "singular_values")?;
    Ok(sorted_svd(a)?.1)
}

/// Largest singular value and its singular pair `(sigma, u, v)`.
///
/// Power iteration on `A^T A` first; falls back to a dense SVD when the
/// iteration has not settled within the cap.
pub fn top_singular_triplet(a: &DMatrix<f64>) -> Result<(f64, DVector<f64>, DVector<f64>)> {
    check_finite(a, "spectral_norm")?;
    let (m, n) = a.shape();
    if m == 0 || n == 0 || a.iter().all(|&x| x == 0.0) {
        let mut u = DVector::zeros(m);
        let mut v = DVector::zeros(n);
        if m > 0 {
            u[0] = 1.0;
        }
        if n > 0 {
            v[0] = 1.0;
        }
        return Ok((0.0, u, v));
    }
    if let Some(triplet) = power_iteration(a) {
        return Ok(triplet);
    }
    log::debug!("power iteration stagnated on {m}x{n} matrix; using SVD");
    let (u, s, v) = sorted_svd(a)?;
    Ok((s[0], u.column(0).into_owned(), v.column(0).into_owned()))
}

fn power_iteration(a: &DMatrix<f64>) -> Option<(f64, DVector<f64>, DVector<f64>)> {
    let n = a.ncols();
    // Fixed pseudo-random start: structured starts such as the all-ones vector
    // are orthogonal to the top singular space of the softmax-gradient matrices.
    let mut rng = stream_rng(0x5eed_cafe, 0);
    let mut v = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    v /= v.norm();
    let mut sigma_prev = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let av = a * &v;
        let sigma = av.norm();
        if sigma == 0.0 {
            return None;
        }
        let mut w = a.transpose() * &av;
        let wn = w.norm();
        w /= wn;
        v = w;
        if (sigma - sigma_prev).abs() <= POWER_TOL * sigma {
            let av = a * &v;
            let sigma = av.norm();
            return Some((sigma, av / sigma, v));
        }
        sigma_prev = sigma;
    }
    None
}

/// Operator 2-norm.
pub fn spectral_norm(a: &DMatrix<f64>) -> Result<f64> {
    Ok(top_singular_triplet(a)?.0)
}

/// Symmetric eigendecomposition with eigenvalues ascending; eigenvectors are the
/// matching columns.
pub fn sym_eig(a: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_finite(a, "sym_eig")?;
    if !a.is_square() {
        return Err(Error::Shape(format!(
            "sym_eig needs a square matrix, got {:?}",
            a.shape()
        )));
    }
    let n = a.nrows();
    if n == 0 {
        return Ok((DVector::zeros(0), DMatrix::zeros(0, 0)));
    }
    let (values, vectors) = jacobi_eigen((a + a.transpose()) * 0.5)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]).then(i.cmp(&j)));
    let sorted_values = DVector::from_fn(n, |i, _| values[order[i]]);
    let sorted_vectors = DMatrix::from_fn(n, n, |r, c| vectors[(r, order[c])]);
    Ok((sorted_values, sorted_vectors))
}

/// Cyclic Jacobi eigensolver; accurate on the singular PSD matrices where
/// nalgebra's tridiagonal QR loses digits.
fn jacobi_eigen(mut a: DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    let mut v = DMatrix::<f64>::identity(n, n);
    let negligible = f64::EPSILON * a.norm() / n as f64;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() <= negligible {
                    continue;
                }
                rotated = true;
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut a, p, q, c, s);
                rotate_rows(&mut a, p, q, c, s);
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                rotate_columns(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            return Ok((a.diagonal(), v));
        }
    }
    Err(Error::Numerical("Jacobi eigensolver did not converge".into()))
}

fn rotate_rows(a: &mut DMatrix<f64>, i: usize, j: usize, c: f64, s: f64) {
    for k in 0..a.ncols() {
        let (x, y) = (a[(i, k)], a[(j, k)]);
        a[(i, k)] = c * x - s * y;
        a[(j, k)] = s * x + c * y;
    }
}

/// Pseudo-inverse of a symmetric PSD matrix; eigenvalues `<= rel_cutoff * max`
/// are treated as zero.
pub fn pinv_psd(a: &DMatrix<f64>, rel_cutoff: f64) -> Result<DMatrix<f64>> {
    let (vals, vecs) = sym_eig(a)?;
    let n = vals.len();
    let vmax = vals.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let mut out = DMatrix::zeros(n, n);
    if vmax == 0.0 {
        return Ok(out);
    }
    for i in 0..n {
        if vals[i] > rel_cutoff * vmax {
            let q = vecs.column(i);
            out += (q * q.transpose()) / vals[i];
        }
    }
    Ok(out)
}

/// `log(sum_i exp(z_i))` with the max shifted out.
pub fn logsumexp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + z.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Frobenius inner product.
pub fn frob_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// `I_K - (1/K) 1 1^T`.
pub fn centering(k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { 0.0 } - 1.0 / k as f64)
}
