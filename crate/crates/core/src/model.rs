//! The unconstrained-feature objective
//!
//! ```text
//! f(W, H, b) = g(WH + b 1^T) + (λW/2)‖W‖² + (λH/2)‖H‖² + (λb/2)‖b‖²
//! ```
//!
//! with `g` the mean cross-entropy over all `N = nK` feature columns, plus its
//! gradient, Hessian bilinear form and Hessian-vector product. Feature columns
//! are laid out class-major: column `k*n + i` is sample `i` of class `k`
//! (0-based), so the label matrix is exactly `I_K ⊗ 1_n^T`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Result};
use crate::numerics::{frob_dot, logsumexp, softmax};

/// Problem sizes and weight-decay coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub k: usize,
    pub d: usize,
    pub n: usize,
    pub lambda_w: f64,
    pub lambda_h: f64,
    pub lambda_b: f64,
}

impl Hyperparams {
    pub fn new(k: usize, d: usize, n: usize, lambda_w: f64, lambda_h: f64, lambda_b: f64) -> Result<Self> {
        let hp = Self {
            k,
            d,
            n,
            lambda_w,
            lambda_h,
            lambda_b,
        };
        hp.validate()?;
        Ok(hp)
    }

    /// The reference problem used throughout the test suites.
    pub fn reference() -> Self {
        Self {
            k: 4,
            d: 6,
            n: 25,
            lambda_w: 5e-3,
            lambda_h: 5e-3,
            lambda_b: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(domain(format!("K must be >= 2, got {}", self.k)));
        }
        if self.d < 1 || self.n < 1 {
            return Err(domain("d and n must be >= 1"));
        }
        for (name, v) in [
            ("lambda_w", self.lambda_w),
            ("lambda_h", self.lambda_h),
            ("lambda_b", self.lambda_b),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(domain(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Total sample count `N = nK`.
    pub fn n_total(&self) -> usize {
        self.n * self.k
    }

    /// `λH / λW`, when defined.
    pub fn alpha(&self) -> Option<f64> {
        (self.lambda_w > 0.0).then(|| self.lambda_h / self.lambda_w)
    }

    /// `√(λW λH)`, the spectral threshold separating global minima from saddles.
    pub fn threshold(&self) -> f64 {
        (self.lambda_w * self.lambda_h).sqrt()
    }

    /// Class of feature column `j`.
    pub fn class_of(&self, j: usize) -> usize {
        j / self.n
    }
}

/// One-hot label matrix `Y` (K×N) under the class-major layout.
pub struct LabelLayout;

impl LabelLayout {
    pub fn matrix(hp: &Hyperparams) -> DMatrix<f64> {
        DMatrix::from_fn(hp.k, hp.n_total(), |r, c| if hp.class_of(c) == r { 1.0 } else { 0.0 })
    }
}

/// An optimization point `(W, H, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    /// K×d; row `k` is the classifier of class `k`.
    pub w: DMatrix<f64>,
    /// d×N features in class-major layout.
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// A direction or gradient in the `(W, H, b)` product space.
#[derive(Debug, Clone, PartialEq)]
pub struct GradTriple {
    pub dw: DMatrix<f64>,
    pub dh: DMatrix<f64>,
    pub db: DVector<f64>,
}

impl ModelState {
    pub fn zeros(hp: &Hyperparams) -> Self {
        Self {
            w: DMatrix::zeros(hp.k, hp.d),
            h: DMatrix::zeros(hp.d, hp.n_total()),
            b: DVector::zeros(hp.k),
        }
    }

    pub fn check(&self, hp: &Hyperparams) -> Result<()> {
        if self.w.shape() != (hp.k, hp.d) {
            return Err(shape(format!(
                "W is {:?}, expected ({}, {})",
                self.w.shape(),
                hp.k,
                hp.d
            )));
        }
        if self.h.shape() != (hp.d, hp.n_total()) {
            return Err(shape(format!(
                "H is {:?}, expected ({}, {})",
                self.h.shape(),
                hp.d,
                hp.n_total()
            )));
        }
        if self.b.len() != hp.k {
            return Err(shape(format!("b has length {}, expected {}", self.b.len(), hp.k)));
        }
        if !self
            .w
            .iter()
            .chain(self.h.iter())
            .chain(self.b.iter())
            .all(|x| x.is_finite())
        {
            return Err(domain("state has non-finite entries"));
        }
        Ok(())
    }

    /// Logits `WH + b 1^T`.
    pub fn logits(&self) -> DMatrix<f64> {
        let mut z = &self.w * &self.h;
        for mut col in z.column_iter_mut() {
            col += &self.b;
        }
        z
    }

    pub fn norm(&self) -> f64 {
        (self.w.norm_squared() + self.h.norm_squared() + self.b.norm_squared()).sqrt()
    }

    /// `self + t * dir`.
    pub fn step(&self, dir: &GradTriple, t: f64) -> Self {
        Self {
            w: &self.w + &dir.dw * t,
            h: &self.h + &dir.dh * t,
            b: &self.b + &dir.db * t,
        }
    }

    pub fn to_flat(&self) -> DVector<f64> {
        flatten(&self.w, &self.h, &self.b)
    }

    pub fn from_flat(x: &DVector<f64>, hp: &Hyperparams) -> Self {
        let (w, h, b) = unflatten(x, hp);
        Self { w, h, b }
    }
}

impl GradTriple {
    pub fn zeros(hp: &Hyperparams) -> Self {
        Self {
            dw: DMatrix::zeros(hp.k, hp.d),
            dh: DMatrix::zeros(hp.d, hp.n_total()),
            db: DVector::zeros(hp.k),
        }
    }

    pub fn dot(&self, other: &GradTriple) -> f64 {
        frob_dot(&self.dw, &other.dw) + frob_dot(&self.dh, &other.dh) + self.db.dot(&other.db)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            dw: &self.dw * c,
            dh: &self.dh * c,
            db: &self.db * c,
        }
    }

    pub fn to_flat(&self) -> DVector<f64> {
        flatten(&self.dw, &self.dh, &self.db)
    }

    pub fn from_flat(x: &DVector<f64>, hp: &Hyperparams) -> Self {
        let (dw, dh, db) = unflatten(x, hp);
        Self { dw, dh, db }
    }

    pub fn check(&self, hp: &Hyperparams) -> Result<()> {
        if self.dw.shape() != (hp.k, hp.d) || self.dh.shape() != (hp.d, hp.n_total()) || self.db.len() != hp.k {
            return Err(shape("direction shapes do not match hyperparameters"));
        }
        Ok(())
    }
}

/// Dimension of the flattened `(W, H, b)` vector.
pub fn flat_len(hp: &Hyperparams) -> usize {
    hp.k * hp.d + hp.d * hp.n_total() + hp.k
}

fn flatten(w: &DMatrix<f64>, h: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        w.len() + h.len() + b.len(),
        w.iter().chain(h.iter()).chain(b.iter()).copied(),
    )
}

fn unflatten(x: &DVector<f64>, hp: &Hyperparams) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let (k, d, nt) = (hp.k, hp.d, hp.n_total());
    let w = DMatrix::from_column_slice(k, d, &x.as_slice()[..k * d]);
    let h = DMatrix::from_column_slice(d, nt, &x.as_slice()[k * d..k * d + d * nt]);
    let b = DVector::from_column_slice(&x.as_slice()[k * d + d * nt..]);
    (w, h, b)
}

/// Cross-entropy `-log softmax(z)_k` for a 0-based class index.
pub fn cross_entropy(z: &[f64], k: usize) -> Result<f64> {
    if k >= z.len() {
        return Err(domain(format!("class index {k} out of range for {} logits", z.len())));
    }
    if !z.iter().all(|x| x.is_finite()) {
        return Err(domain("non-finite logit"));
    }
    Ok((logsumexp(z) - z[k]).max(0.0))
}

/// Mean cross-entropy `g(Z)` over all columns of the K×N logit matrix.
pub fn data_loss(z: &DMatrix<f64>, hp: &Hyperparams) -> Result<f64> {
    if z.shape() != (hp.k, hp.n_total()) {
        return Err(shape(format!(
            "logits are {:?}, expected ({}, {})",
            z.shape(),
            hp.k,
            hp.n_total()
        )));
    }
    let mut total = 0.0;
    for (j, col) in z.column_iter().enumerate() {
        let col: Vec<f64> = col.iter().copied().collect();
        total += cross_entropy(&col, hp.class_of(j))?;
    }
    Ok(total / hp.n_total() as f64)
}

/// Objective value `f(W, H, b)`.
pub fn objective(s: &ModelState, hp: &Hyperparams) -> Result<f64> {
    s.check(hp)?;
    let g = data_loss(&s.logits(), hp)?;
    Ok(g + regularizer(s, hp))
}

pub(crate) fn regularizer(s: &ModelState, hp: &Hyperparams) -> f64 {
    0.5 * (hp.lambda_w * s.w.norm_squared() + hp.lambda_h * s.h.norm_squared() + hp.lambda_b * s.b.norm_squared())
}

fn softmax_columns(z: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = z.clone();
    for mut col in p.column_iter_mut() {
        let v: Vec<f64> = col.iter().copied().collect();
        for (dst, src) in col.iter_mut().zip(softmax(&v)) {
            *dst = src;
        }
    }
    p
}

/// `∇g(Z)`: column `j` is `(softmax(z_j) - y_j) / N`.
pub fn grad_g(z: &DMatrix<f64>, hp: &Hyperparams) -> Result<DMatrix<f64>> {
    if z.shape() != (hp.k, hp.n_total()) {
        return Err(shape(format!(
            "logits are {:?}, expected ({}, {})",
            z.shape(),
            hp.k,
            hp.n_total()
        )));
    }
    if !z.iter().all(|x| x.is_finite()) {
        return Err(domain("non-finite logit"));
    }
    let inv_n = 1.0 / hp.n_total() as f64;
    let mut g = softmax_columns(z);
    for (j, mut col) in g.column_iter_mut().enumerate() {
        col[hp.class_of(j)] -= 1.0;
        col *= inv_n;
    }
    Ok(g)
}

/// Gradient of the objective.
pub fn gradient(s: &ModelState, hp: &Hyperparams) -> Result<GradTriple> {
    s.check(hp)?;
    let g = grad_g(&s.logits(), hp)?;
    Ok(gradient_from_grad_g(s, hp, &g))
}

pub(crate) fn gradient_from_grad_g(s: &ModelState, hp: &Hyperparams, g: &DMatrix<f64>) -> GradTriple {
    GradTriple {
        dw: g * s.h.transpose() + &s.w * hp.lambda_w,
        dh: s.w.transpose() * g + &s.h * hp.lambda_h,
        db: g.column_sum() + &s.b * hp.lambda_b,
    }
}

/// Objective value and gradient from a single pass.
pub fn value_and_gradient(s: &ModelState, hp: &Hyperparams) -> Result<(f64, GradTriple)> {
    s.check(hp)?;
    let z = s.logits();
    let f = data_loss(&z, hp)? + regularizer(s, hp);
    let g = grad_g(&z, hp)?;
    Ok((f, gradient_from_grad_g(s, hp, &g)))
}

/// `WΔH + ΔW H + Δb 1^T`, the first-order change in the logits along `dir`.
pub fn logit_perturbation(s: &ModelState, dir: &GradTriple) -> DMatrix<f64> {
    let mut d = &s.w * &dir.dh + &dir.dw * &s.h;
    for mut col in d.column_iter_mut() {
        col += &dir.db;
    }
    d
}

/// `f(s + t·dir) − f(s)` without subtracting two nearly equal objective values,
/// so that tiny decreases near a minimizer stay resolvable.
pub fn objective_difference(s: &ModelState, hp: &Hyperparams, dir: &GradTriple, t: f64) -> Result<f64> {
    s.check(hp)?;
    dir.check(hp)?;
    let z = s.logits();
    // Exact logit change: t(WΔH + ΔW H + Δb 1ᵀ) + t² ΔW ΔH.
    let delta = logit_perturbation(s, dir) * t + (&dir.dw * &dir.dh) * (t * t);
    let mut data = 0.0;
    for j in 0..z.ncols() {
        let zj: Vec<f64> = z.column(j).iter().copied().collect();
        let dj: Vec<f64> = delta.column(j).iter().copied().collect();
        if !dj.iter().all(|x| x.is_finite()) {
            return Ok(f64::INFINITY);
        }
        let shift = if dj.iter().all(|x| x.abs() <= 1.0) {
            let p = softmax(&zj);
            p.iter().zip(&dj).map(|(p, d)| p * d.exp_m1()).sum::<f64>().ln_1p()
        } else {
            let moved: Vec<f64> = zj.iter().zip(&dj).map(|(a, b)| a + b).collect();
            logsumexp(&moved) - logsumexp(&zj)
        };
        data += shift - dj[hp.class_of(j)];
    }
    data /= hp.n_total() as f64;
    let quad = |x: f64, a: f64| t * x + 0.5 * t * t * a;
    let reg = hp.lambda_w * quad(frob_dot(&s.w, &dir.dw), dir.dw.norm_squared())
        + hp.lambda_h * quad(frob_dot(&s.h, &dir.dh), dir.dh.norm_squared())
        + hp.lambda_b * quad(s.b.dot(&dir.db), dir.db.norm_squared());
    Ok(data + reg)
}

/// Applies the per-column softmax Hessian `(diag p − p pᵀ)/N` to `d`.
fn softmax_hessian_apply(p: &DMatrix<f64>, d: &DMatrix<f64>, hp: &Hyperparams) -> DMatrix<f64> {
    let inv_n = 1.0 / hp.n_total() as f64;
    let mut out = DMatrix::zeros(p.nrows(), p.ncols());
    for j in 0..p.ncols() {
        let pj = p.column(j);
        let dj = d.column(j);
        let pd = pj.dot(&dj);
        for i in 0..p.nrows() {
            out[(i, j)] = inv_n * pj[i] * (dj[i] - pd);
        }
    }
    out
}

/// Symmetric Hessian bilinear form `∇²f[A, B]`.
pub fn hessian_bilinear(s: &ModelState, hp: &Hyperparams, a: &GradTriple, b: &GradTriple) -> Result<f64> {
    s.check(hp)?;
    a.check(hp)?;
    b.check(hp)?;
    let z = s.logits();
    let p = softmax_columns(&z);
    let g = grad_g(&z, hp)?;
    let da = logit_perturbation(s, a);
    let db = logit_perturbation(s, b);
    let gauss_newton = frob_dot(&softmax_hessian_apply(&p, &da, hp), &db);
    let cross = frob_dot(&g, &(&a.dw * &b.dh)) + frob_dot(&g, &(&b.dw * &a.dh));
    let reg =
        hp.lambda_w * frob_dot(&a.dw, &b.dw) + hp.lambda_h * frob_dot(&a.dh, &b.dh) + hp.lambda_b * a.db.dot(&b.db);
    Ok(gauss_newton + cross + reg)
}

/// Hessian-vector product: the unique `T` with `⟨B, T⟩ = ∇²f[A, B]` for all `B`.
pub fn hessian_vector_product(s: &ModelState, hp: &Hyperparams, a: &GradTriple) -> Result<GradTriple> {
    s.check(hp)?;
    a.check(hp)?;
    let z = s.logits();
    Ok(HessianOperator::from_parts(s, hp, &z)?.apply(a))
}

/// Cached Hessian operator at a fixed state, for repeated products.
pub struct HessianOperator<'a> {
    state: &'a ModelState,
    hp: &'a Hyperparams,
    probs: DMatrix<f64>,
    grad_g: DMatrix<f64>,
}

impl<'a> HessianOperator<'a> {
    pub fn new(state: &'a ModelState, hp: &'a Hyperparams) -> Result<Self> {
        state.check(hp)?;
        let z = state.logits();
        Self::from_parts(state, hp, &z)
    }

    fn from_parts(state: &'a ModelState, hp: &'a Hyperparams, z: &DMatrix<f64>) -> Result<Self> {
        Ok(Self {
            state,
            hp,
            probs: softmax_columns(z),
            grad_g: grad_g(z, hp)?,
        })
    }

    pub fn apply(&self, a: &GradTriple) -> GradTriple {
        let (s, hp, g) = (self.state, self.hp, &self.grad_g);
        let e = softmax_hessian_apply(&self.probs, &logit_perturbation(s, a), hp);
        GradTriple {
            dw: &e * s.h.transpose() + g * a.dh.transpose() + &a.dw * hp.lambda_w,
            dh: s.w.transpose() * &e + a.dw.transpose() * g + &a.dh * hp.lambda_h,
            db: e.column_sum() + &a.db * hp.lambda_b,
        }
    }

    pub fn dim(&self) -> usize {
        flat_len(self.hp)
    }
}
