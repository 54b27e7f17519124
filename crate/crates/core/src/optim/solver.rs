//! Optimizer loops over flat parameter vectors.

use std::collections::VecDeque;

use nalgebra::DVector;

use super::config::{OptimizerConfig, OptimizerKind};
use super::line_search::{strong_wolfe, LineSearchRecord, Trial};
use crate::error::{Error, Result};

/// A smooth objective over `R^n`.
pub trait Problem {
    fn value_and_gradient(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)>;

    /// `f(x + t·dir) − f(x)` evaluated without cancellation, when available.
    /// The line search falls back to subtracting values on `None`.
    fn difference(&mut self, _x: &DVector<f64>, _dir: &DVector<f64>, _t: f64) -> Result<Option<f64>> {
        Ok(None)
    }
}

impl<F> Problem for F
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    fn value_and_gradient(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        self(x)
    }
}

/// State handed to the observer once per iteration, before the update.
pub struct Iterate<'a> {
    pub iteration: usize,
    pub x: &'a DVector<f64>,
    pub f: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct Minimized {
    pub x: DVector<f64>,
    pub f: f64,
    pub grad_norm: f64,
    /// Index of the last evaluated iterate.
    pub iterations: usize,
    pub converged: bool,
    /// L-BFGS only; one entry per accepted step.
    pub line_searches: Vec<LineSearchRecord>,
}

fn diverged(iteration: usize, reason: impl Into<String>, last_good: &DVector<f64>) -> Error {
    Error::Diverged {
        iteration,
        reason: reason.into(),
        last_good: last_good.iter().copied().collect(),
    }
}

/// Minimizes `problem` from `x0`. The observer sees every iterate; it sees the
/// final one last.
pub fn minimize<P, O>(x0: DVector<f64>, cfg: &OptimizerConfig, mut problem: P, mut observe: O) -> Result<Minimized>
where
    P: Problem,
    O: FnMut(&Iterate),
{
    cfg.validate()?;
    match cfg.kind {
        OptimizerKind::GdMomentum | OptimizerKind::Adam => first_order(x0, cfg, &mut problem, &mut observe),
        OptimizerKind::Lbfgs => lbfgs(x0, cfg, &mut problem, &mut observe),
    }
}

fn first_order<P, O>(mut x: DVector<f64>, cfg: &OptimizerConfig, problem: &mut P, observe: &mut O) -> Result<Minimized>
where
    P: Problem,
    O: FnMut(&Iterate),
{
    let n = x.len();
    let mut velocity = DVector::zeros(n);
    let mut second = DVector::zeros(n);
    let mut last_good = x.clone();
    let mut t = 0;
    loop {
        let (f, g) = problem.value_and_gradient(&x)?;
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(diverged(t, format!("objective became {f}"), &last_good));
        }
        let grad_norm = g.norm();
        observe(&Iterate {
            iteration: t,
            x: &x,
            f,
            grad_norm,
        });
        if grad_norm <= cfg.grad_tol || t >= cfg.max_iters {
            return Ok(Minimized {
                converged: grad_norm <= cfg.grad_tol,
                x,
                f,
                grad_norm,
                iterations: t,
                line_searches: Vec::new(),
            });
        }
        last_good.copy_from(&x);
        let lr = cfg.step_at(t);
        match cfg.kind {
            OptimizerKind::GdMomentum => {
                velocity = &velocity * cfg.momentum + &g;
                x.axpy(-lr, &velocity, 1.0);
            }
            OptimizerKind::Adam => {
                let step = (t + 1) as i32;
                velocity = &velocity * cfg.beta1 + &g * (1.0 - cfg.beta1);
                second = &second * cfg.beta2 + g.component_mul(&g) * (1.0 - cfg.beta2);
                let bc1 = 1.0 - cfg.beta1.powi(step);
                let bc2 = 1.0 - cfg.beta2.powi(step);
                for i in 0..n {
                    let m_hat = velocity[i] / bc1;
                    let v_hat = second[i] / bc2;
                    x[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
                }
            }
            OptimizerKind::Lbfgs => unreachable!("handled by lbfgs()"),
        }
        t += 1;
    }
}

type History = VecDeque<(DVector<f64>, DVector<f64>, f64)>;

/// Two-loop recursion: `-H_k g` from the stored `(s, y, 1/sᵀy)` triples.
fn two_loop(g: &DVector<f64>, history: &History) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * s.dot(&q);
        q.axpy(-a, y, 1.0);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        q *= s.dot(y) / y.dot(y);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q.axpy(a - b, s, 1.0);
    }
    -q
}

fn push_pair(history: &mut History, s: DVector<f64>, y: DVector<f64>, memory: usize) {
    let sy = s.dot(&y);
    if sy > f64::EPSILON * s.norm() * y.norm() {
        if history.len() == memory {
            history.pop_front();
        }
        history.push_back((s, y, 1.0 / sy));
    }
}

fn lbfgs<P, O>(mut x: DVector<f64>, cfg: &OptimizerConfig, problem: &mut P, observe: &mut O) -> Result<Minimized>
where
    P: Problem,
    O: FnMut(&Iterate),
{
    let mut history = History::with_capacity(cfg.memory);
    let mut records = Vec::new();
    let (mut f, mut g) = problem.value_and_gradient(&x)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(diverged(0, format!("objective became {f}"), &x));
    }
    let mut t = 0;
    loop {
        let grad_norm = g.norm();
        observe(&Iterate {
            iteration: t,
            x: &x,
            f,
            grad_norm,
        });
        if grad_norm <= cfg.grad_tol || t >= cfg.max_iters {
            return Ok(Minimized {
                converged: grad_norm <= cfg.grad_tol,
                x,
                f,
                grad_norm,
                iterations: t,
                line_searches: records,
            });
        }

        let mut dir = two_loop(&g, &history);
        if !(dir.dot(&g) < 0.0) {
            history.clear();
            dir = -&g;
        }
        let first = if history.is_empty() {
            (1.0 / grad_norm).min(1.0) * cfg.step_size
        } else {
            cfg.step_size
        };
        let mut accepted: Option<(Trial, DVector<f64>)> =
            strong_wolfe(problem, &x, f, &g, &dir, first, cfg.c1_wolfe, cfg.c2_wolfe)?.map(|tr| (tr, dir));
        if accepted.is_none() && !history.is_empty() {
            // Stale curvature pairs; retry once along steepest descent.
            history.clear();
            let sd = -&g;
            let first = (1.0 / grad_norm).min(1.0) * cfg.step_size;
            accepted = strong_wolfe(problem, &x, f, &g, &sd, first, cfg.c1_wolfe, cfg.c2_wolfe)?.map(|tr| (tr, sd));
        }
        let Some((trial, dir)) = accepted else {
            log::debug!("L-BFGS line search failed at iteration {t} (grad norm {grad_norm:.3e})");
            return Ok(Minimized {
                converged: false,
                x,
                f,
                grad_norm,
                iterations: t,
                line_searches: records,
            });
        };
        records.push(LineSearchRecord {
            iteration: t,
            step: trial.step,
            f0: f,
            slope0: g.dot(&dir),
            f_step: trial.f,
            f_change: trial.df,
            slope_step: trial.slope,
        });
        push_pair(&mut history, &trial.x - &x, &trial.g - &g, cfg.memory);
        x = trial.x;
        f = trial.f;
        g = trial.g;
        t += 1;
    }
}
