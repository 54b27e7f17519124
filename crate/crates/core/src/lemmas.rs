//! Seeded property suites for the supporting lemmas of the landscape theory.
//!
//! Each suite draws its own random instances from `(seed, suite)` and counts
//! how many satisfy the property. A trial is "skipped" when its instance does
//! not meet the property's hypothesis (for example a run that did not reach
//! a critical point).

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::convex::{balanced_factorization, kkt_residuals, variational_gap};
use crate::error::Result;
use crate::etf::{c1_of_rho, canonical_global_minimizer, Lift};
use crate::landscape::{balance_residual, ce_equality_c1, ce_lower_bound, g_bound_check};
use crate::model::{cross_entropy, Hyperparams, ModelState};
use crate::optim::{run, OptimizerConfig};
use crate::rng::{gaussian_matrix, stream_rng, uniform_matrix};

/// Tolerances of the suites.
pub const GAP_TOL: f64 = 1e-10;
pub const CE_EQUALITY_TOL: f64 = 1e-12;
pub const G_EQUALITY_TOL: f64 = 1e-8;
pub const BALANCE_TOL: f64 = 1e-6;
pub const KKT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    NuclearNorm,
    CeBound,
    GBound,
    Balance,
    Kkt,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::NuclearNorm,
        Suite::CeBound,
        Suite::GBound,
        Suite::Balance,
        Suite::Kkt,
    ];

    fn stream(self) -> u64 {
        self as u64 + 100
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Suite::NuclearNorm => "nuclear-norm variational gap",
            Suite::CeBound => "cross-entropy lower bound",
            Suite::GBound => "g lower bound equality",
            Suite::Balance => "balance at critical points",
            Suite::Kkt => "convex KKT conditions",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub trials: usize,
    pub passed: usize,
    pub failed: usize,
    pub skipped: usize,
    /// Largest violation-side statistic seen (suite-specific).
    pub worst: f64,
    pub first_failure: Option<String>,
}

impl SuiteReport {
    fn new(suite: Suite, trials: usize) -> Self {
        Self {
            suite,
            trials,
            passed: 0,
            failed: 0,
            skipped: 0,
            worst: 0.0,
            first_failure: None,
        }
    }

    /// No failures, and not vacuous: some trial met the hypothesis.
    pub fn ok(&self) -> bool {
        self.failed == 0 && (self.trials == 0 || self.passed > 0)
    }

    fn check(&mut self, pass: bool, stat: f64, describe: impl FnOnce() -> String) {
        self.worst = self.worst.max(stat);
        if pass {
            self.passed += 1;
        } else {
            self.failed += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(describe());
            }
        }
    }
}

pub fn run_lemma_suites(trials: usize, seed: u64) -> Result<Vec<SuiteReport>> {
    Suite::ALL.iter().map(|&s| run_suite(s, trials, seed)).collect()
}

pub fn run_suite(suite: Suite, trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = stream_rng(seed, suite.stream());
    let mut report = SuiteReport::new(suite, trials);
    for trial in 0..trials {
        match suite {
            Suite::NuclearNorm => nuclear_norm_trial(&mut rng, trial, &mut report)?,
            Suite::CeBound => ce_bound_trial(&mut rng, trial, &mut report)?,
            Suite::GBound => g_bound_trial(&mut rng, trial, &mut report)?,
            Suite::Balance => balance_trial(&mut rng, trial, &mut report)?,
            Suite::Kkt => kkt_trial(&mut rng, trial, &mut report)?,
        }
    }
    Ok(report)
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

/// Random problem sizes with `ρ* > 0` (origin not optimal) by a clear margin.
fn random_hp(rng: &mut ChaCha8Rng, max_n: usize) -> Hyperparams {
    loop {
        let k = rng.gen_range(2..=5);
        let d = k + rng.gen_range(0..=2);
        let n = rng.gen_range(1..=max_n);
        let lambda_w = log_uniform(rng, 1e-4, 1e-1);
        let lambda_h = log_uniform(rng, 1e-4, 1e-1);
        let lambda_b = log_uniform(rng, 1e-4, 1e-1);
        let hp = Hyperparams {
            k,
            d,
            n,
            lambda_w,
            lambda_h,
            lambda_b,
        };
        if hp.threshold() < 0.5 / (k as f64 * (n as f64).sqrt()) {
            return hp;
        }
    }
}

fn nuclear_norm_trial(rng: &mut ChaCha8Rng, trial: usize, report: &mut SuiteReport) -> Result<()> {
    let rows = rng.gen_range(1..=6);
    let inner = rng.gen_range(1..=6);
    let cols = rng.gen_range(1..=8);
    let alpha = log_uniform(rng, 1e-2, 1e2);
    let w = gaussian_matrix(rng, rows, inner);
    let h = gaussian_matrix(rng, inner, cols);
    let gap = variational_gap(&w, &h, alpha)?;

    // Balanced factors of a product with deliberately low rank.
    let rank = rng.gen_range(1..=rows.min(cols));
    let z = gaussian_matrix(rng, rows, rank) * gaussian_matrix(rng, rank, cols);
    let (wb, hb) = balanced_factorization(&z, alpha)?;
    let balanced_gap = variational_gap(&wb, &hb, alpha)?;

    let pass = gap >= -GAP_TOL && balanced_gap.abs() <= GAP_TOL;
    report.check(pass, (-gap).max(balanced_gap.abs()), || {
        format!("trial {trial}: gap {gap:.3e}, balanced gap {balanced_gap:.3e}")
    });
    Ok(())
}

fn ce_bound_trial(rng: &mut ChaCha8Rng, trial: usize, report: &mut SuiteReport) -> Result<()> {
    let k = rng.gen_range(2..=8);
    let target = rng.gen_range(0..k);
    let z: Vec<f64> = (0..k).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let c1 = log_uniform(rng, 1e-3, 1e3);
    let ce = cross_entropy(&z, target)?;
    let bound = ce_lower_bound(&z, target, c1)?;
    let excess = bound - ce;

    // Tied non-target logits attain the bound at the closed-form c1.
    let other = rng.gen_range(-5.0..5.0);
    let mut tied = vec![other; k];
    tied[target] = rng.gen_range(-5.0..5.0);
    let c1_eq = ce_equality_c1(&tied, target);
    let eq_gap = (ce_lower_bound(&tied, target, c1_eq)? - cross_entropy(&tied, target)?).abs();

    let pass = excess <= 1e-12 * ce.abs().max(1.0) && eq_gap <= CE_EQUALITY_TOL;
    report.check(pass, excess.max(eq_gap), || {
        format!("trial {trial}: bound - CE = {excess:.3e}, equality gap {eq_gap:.3e}")
    });
    Ok(())
}

fn g_bound_trial(rng: &mut ChaCha8Rng, trial: usize, report: &mut SuiteReport) -> Result<()> {
    let hp = random_hp(rng, 10);
    let lift = Lift::Random(rng.gen());
    let state = canonical_global_minimizer(&hp, lift)?;
    let rep = g_bound_check(&state, &hp, BALANCE_TOL)?;
    let c1_eq = c1_of_rho(rep.rho, &hp)?;
    let gap = rep.equality_gap.abs();
    let pass = rep.hypothesis_met && rep.all_hold && gap <= G_EQUALITY_TOL && (c1_eq - rep.c1_equality).abs() == 0.0;
    report.check(pass, gap, || {
        format!(
            "trial {trial}: {hp:?} equality gap {gap:.3e}, balance {:.3e}",
            rep.balance_residual
        )
    });
    Ok(())
}

fn balance_trial(rng: &mut ChaCha8Rng, trial: usize, report: &mut SuiteReport) -> Result<()> {
    let hp = random_hp(rng, 4);
    let init = ModelState {
        w: uniform_matrix(rng, hp.k, hp.d, 0.5),
        h: uniform_matrix(rng, hp.d, hp.n_total(), 0.5),
        b: uniform_matrix(rng, hp.k, 1, 0.5).column(0).into_owned(),
    };
    let cfg = OptimizerConfig::lbfgs(10).with_limits(2000, 1e-10);
    let out = run(&init, &hp, &cfg, usize::MAX)?;
    if !out.converged {
        report.skipped += 1;
        return Ok(());
    }
    let residual = balance_residual(&out.final_state, &hp)?;
    report.check(residual <= BALANCE_TOL, residual, || {
        format!("trial {trial}: {hp:?} balance residual {residual:.3e}")
    });
    Ok(())
}

fn kkt_trial(rng: &mut ChaCha8Rng, trial: usize, report: &mut SuiteReport) -> Result<()> {
    let hp = random_hp(rng, 10);
    let state = canonical_global_minimizer(&hp, Lift::Random(rng.gen()))?;
    let z = &state.w * &state.h;
    let at_opt = kkt_residuals(&z, &state.b, &hp)?;
    let worst = at_opt
        .uv_residual_left
        .max(at_opt.uv_residual_right)
        .max(at_opt.bias_residual)
        .max(-at_opt.spectral_slack);
    let at_origin = kkt_residuals(&DMatrix::zeros(hp.k, hp.n_total()), &DVector::zeros(hp.k), &hp)?;
    let pass = at_opt.is_optimal(KKT_TOL) && at_origin.spectral_slack < 0.0;
    report.check(pass, worst, || {
        format!(
            "trial {trial}: {hp:?} residual {worst:.3e}, origin slack {:.3e}",
            at_origin.spectral_slack
        )
    });
    Ok(())
}
