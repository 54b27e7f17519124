//! Training loops over `ModelState`: free training, fixed-ETF-classifier
//! training, and the saddle-escape probe.
//!
//! All gradients are full-batch and deterministic, so "SGD with momentum" is
//! realized as gradient descent with heavy-ball momentum.

mod config;
mod line_search;
mod solver;

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use config::{OptimizerConfig, OptimizerKind};
pub use line_search::LineSearchRecord;
pub use solver::{minimize, Iterate, Minimized, Problem};

use crate::error::{shape, Error, Result};
use crate::etf::EtfFrame;
use crate::landscape::{certify, negative_curvature_direction, Certificate, Verdict};
use crate::metrics::nc_metrics_lenient;
use crate::model::{
    objective, objective_difference, regularizer, value_and_gradient, GradTriple, Hyperparams, ModelState,
};
use crate::rng::{stream_rng, uniform_matrix};

/// Default half-width of the uniform initialization.
pub const INIT_SCALE: f64 = 0.1;

/// Tolerance handed to `certify` on trained endpoints.
pub const CERTIFY_TOL: f64 = 1e-6;

/// One trace row. Field names match the persisted CSV/JSONL columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub f: f64,
    pub grad_norm: f64,
    pub nc1: f64,
    pub nc2: f64,
    pub nc3: f64,
    pub nc4: f64,
    pub w_fro2: f64,
    pub h_fro2: f64,
    pub b_norm: f64,
    /// Wall-clock seconds since the run started; the only nondeterministic field.
    pub seconds: f64,
}

impl TraceRecord {
    pub fn capture(iter: usize, f: f64, grad_norm: f64, s: &ModelState, hp: &Hyperparams, seconds: f64) -> Self {
        let m = nc_metrics_lenient(s, hp);
        Self {
            iter,
            f,
            grad_norm,
            nc1: m.nc1,
            nc2: m.nc2,
            nc3: m.nc3,
            nc4: m.nc4,
            w_fro2: s.w.norm_squared(),
            h_fro2: s.h.norm_squared(),
            b_norm: s.b.norm(),
            seconds,
        }
    }
}

/// Records with strictly increasing iteration numbers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// The trace with the wall-clock column zeroed, for determinism checks.
    pub fn without_timing(&self) -> Self {
        Self {
            records: self
                .records
                .iter()
                .map(|r| TraceRecord { seconds: 0.0, ..*r })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub final_state: ModelState,
    pub final_objective: f64,
    pub trace: TrainTrace,
    pub converged: bool,
    pub iterations: usize,
    /// Accepted L-BFGS steps; empty for the first-order methods.
    pub line_searches: Vec<LineSearchRecord>,
}

/// Which data term enters the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DataTerm {
    #[default]
    CrossEntropy,
    /// Drops `g`, leaving only the weight-decay terms.
    RegularizerOnly,
}

/// Uniform initialization in `[-scale, scale]`; `W`, `H` and `b` use separate
/// streams of `seed`.
pub fn random_init(hp: &Hyperparams, seed: u64, scale: f64) -> ModelState {
    let w = uniform_matrix(&mut stream_rng(seed, 0), hp.k, hp.d, scale);
    let h = uniform_matrix(&mut stream_rng(seed, 1), hp.d, hp.n_total(), scale);
    let b = uniform_matrix(&mut stream_rng(seed, 2), hp.k, 1, scale)
        .column(0)
        .into_owned();
    ModelState { w, h, b }
}

/// Trains all of `(W, H, b)` from `initial`.
pub fn run(initial: &ModelState, hp: &Hyperparams, cfg: &OptimizerConfig, record_every: usize) -> Result<RunResult> {
    run_with(initial, hp, cfg, record_every, DataTerm::CrossEntropy)
}

pub fn run_with(
    initial: &ModelState,
    hp: &Hyperparams,
    cfg: &OptimizerConfig,
    record_every: usize,
    data: DataTerm,
) -> Result<RunResult> {
    hp.validate()?;
    initial.check(hp)?;
    let problem = FreeProblem { hp, data };
    drive(initial.to_flat(), hp, cfg, record_every, problem, |x| {
        ModelState::from_flat(x, hp)
    })
}

/// The objective over the flattened `(W, H, b)`.
pub struct FreeProblem<'a> {
    pub hp: &'a Hyperparams,
    pub data: DataTerm,
}

impl Problem for FreeProblem<'_> {
    fn value_and_gradient(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let hp = self.hp;
        let s = ModelState::from_flat(x, hp);
        match self.data {
            DataTerm::CrossEntropy => {
                let (f, g) = value_and_gradient(&s, hp)?;
                Ok((f, g.to_flat()))
            }
            DataTerm::RegularizerOnly => {
                let g = GradTriple {
                    dw: &s.w * hp.lambda_w,
                    dh: &s.h * hp.lambda_h,
                    db: &s.b * hp.lambda_b,
                };
                Ok((regularizer(&s, hp), g.to_flat()))
            }
        }
    }

    fn difference(&mut self, x: &DVector<f64>, dir: &DVector<f64>, t: f64) -> Result<Option<f64>> {
        if self.data != DataTerm::CrossEntropy {
            return Ok(None);
        }
        let s = ModelState::from_flat(x, self.hp);
        objective_difference(&s, self.hp, &GradTriple::from_flat(dir, self.hp), t).map(Some)
    }
}

/// The objective over the flattened `(H, b)` with `W` frozen.
struct FixedClassifierProblem<'a> {
    hp: &'a Hyperparams,
    w: DMatrix<f64>,
}

impl FixedClassifierProblem<'_> {
    fn split(&self, x: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let len = self.hp.d * self.hp.n_total();
        (
            DMatrix::from_column_slice(self.hp.d, self.hp.n_total(), &x.as_slice()[..len]),
            DVector::from_column_slice(&x.as_slice()[len..]),
        )
    }

    fn assemble(&self, x: &DVector<f64>) -> ModelState {
        let (h, b) = self.split(x);
        ModelState {
            w: self.w.clone(),
            h,
            b,
        }
    }
}

impl Problem for FixedClassifierProblem<'_> {
    fn value_and_gradient(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (f, g) = value_and_gradient(&self.assemble(x), self.hp)?;
        Ok((f, flat_hb(&g.dh, &g.db)))
    }

    fn difference(&mut self, x: &DVector<f64>, dir: &DVector<f64>, t: f64) -> Result<Option<f64>> {
        let (dh, db) = self.split(dir);
        let dir = GradTriple {
            dw: DMatrix::zeros(self.hp.k, self.hp.d),
            dh,
            db,
        };
        objective_difference(&self.assemble(x), self.hp, &dir, t).map(Some)
    }
}

fn flat_hb(h: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(h.len() + b.len(), h.iter().chain(b.iter()).copied())
}

/// Trains `(H, b)` with the classifier frozen at `frame.classifier()`.
pub fn run_fixed_etf(
    initial_h: &DMatrix<f64>,
    initial_b: &DVector<f64>,
    hp: &Hyperparams,
    frame: &EtfFrame,
    cfg: &OptimizerConfig,
    record_every: usize,
) -> Result<RunResult> {
    hp.validate()?;
    if frame.m.shape() != (hp.d, hp.k) {
        return Err(shape(format!(
            "frame is {:?}, expected ({}, {})",
            frame.m.shape(),
            hp.d,
            hp.k
        )));
    }
    let w = frame.classifier();
    ModelState {
        w: w.clone(),
        h: initial_h.clone(),
        b: initial_b.clone(),
    }
    .check(hp)?;
    let problem = FixedClassifierProblem { hp, w: w.clone() };
    let view = FixedClassifierProblem { hp, w };
    drive(flat_hb(initial_h, initial_b), hp, cfg, record_every, problem, |x| {
        view.assemble(x)
    })
}

fn drive<P, A>(
    x0: DVector<f64>,
    hp: &Hyperparams,
    cfg: &OptimizerConfig,
    record_every: usize,
    problem: P,
    assemble: A,
) -> Result<RunResult>
where
    P: Problem,
    A: Fn(&DVector<f64>) -> ModelState,
{
    let every = record_every.max(1);
    let start = Instant::now();
    let mut trace = TrainTrace::default();
    let observe = |it: &Iterate| {
        if it.iteration.is_multiple_of(every) {
            let s = assemble(it.x);
            let secs = start.elapsed().as_secs_f64();
            trace
                .records
                .push(TraceRecord::capture(it.iteration, it.f, it.grad_norm, &s, hp, secs));
        }
    };
    let out = minimize(x0, cfg, problem, observe)?;
    let final_state = assemble(&out.x);
    if trace.last().map(|r| r.iter) != Some(out.iterations) {
        let secs = start.elapsed().as_secs_f64();
        trace.records.push(TraceRecord::capture(
            out.iterations,
            out.f,
            out.grad_norm,
            &final_state,
            hp,
            secs,
        ));
    }
    Ok(RunResult {
        final_objective: out.f,
        final_state,
        trace,
        converged: out.converged,
        iterations: out.iterations,
        line_searches: out.line_searches,
    })
}

/// Outcome of starting next to the origin saddle along its negative-curvature
/// direction.
#[derive(Debug, Clone, Serialize)]
pub struct EscapeReport {
    pub perturbation_scale: f64,
    /// Predicted curvature of the (unnormalized) direction.
    pub predicted_curvature: f64,
    pub initial_objective: f64,
    pub final_objective: f64,
    /// First iteration with objective below `log K - 1e-6`.
    pub escape_iteration: Option<usize>,
    /// No escape: the run never left the saddle's objective level.
    pub stuck_at_saddle: bool,
    pub iterations: usize,
    pub certificate: Certificate,
    #[serde(skip)]
    pub final_state: ModelState,
}

/// Objective margin below `log K` that counts as having left the origin.
pub const ESCAPE_MARGIN: f64 = 1e-6;

/// Size of the random component of the probe's start, relative to the
/// perturbation scale. Flow from the origin along the rank-one direction alone
/// stays rank one and ends at a rank-one saddle.
pub const PROBE_NOISE: f64 = 1e-2;

const PROBE_SEED: u64 = 0x5ADD1E;

/// Starts at `origin + ε(Δ + PROBE_NOISE·ξ)` with `Δ` the constructed
/// negative-curvature direction, `ξ` fixed seeded uniform noise and `ε` the
/// perturbation scale, then runs `cfg`.
pub fn saddle_escape_probe(hp: &Hyperparams, cfg: &OptimizerConfig, perturbation_scale: f64) -> Result<EscapeReport> {
    hp.validate()?;
    let origin = ModelState::zeros(hp);
    let at_origin = certify(&origin, hp, CERTIFY_TOL)?;
    if at_origin.verdict != Verdict::StrictSaddle {
        return Err(Error::Precondition(format!(
            "the origin is not a strict saddle: ||grad g(0)|| = {:.6e} <= sqrt(lambda_w lambda_h) = {:.6e}, \
             so rho* = 0 and the origin is the global minimizer",
            at_origin.grad_g_spectral_norm, at_origin.threshold
        )));
    }
    let (dir, predicted) = negative_curvature_direction(&origin, hp)?;
    let noise = random_init(hp, PROBE_SEED, 1.0);
    let noise = GradTriple {
        dw: noise.w,
        dh: noise.h,
        db: noise.b,
    };
    let start = origin
        .step(&dir, perturbation_scale)
        .step(&noise, perturbation_scale * PROBE_NOISE);
    let initial_objective = objective(&start, hp)?;
    let level = (hp.k as f64).ln() - ESCAPE_MARGIN;

    let mut escape_iteration = None;
    let problem = FreeProblem {
        hp,
        data: DataTerm::CrossEntropy,
    };
    let out = minimize(start.to_flat(), cfg, problem, |it: &Iterate| {
        if escape_iteration.is_none() && it.f < level {
            escape_iteration = Some(it.iteration);
        }
    })?;
    let final_state = ModelState::from_flat(&out.x, hp);
    let certificate = certify(&final_state, hp, CERTIFY_TOL)?;
    Ok(EscapeReport {
        perturbation_scale,
        predicted_curvature: predicted,
        initial_objective,
        final_objective: out.f,
        escape_iteration,
        stuck_at_saddle: escape_iteration.is_none(),
        iterations: out.iterations,
        certificate,
        final_state,
    })
}
