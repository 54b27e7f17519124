//! Subcommand implementations.

use std::path::{Path, PathBuf};

use collapse_core::backbone::{self, Architecture, DecayMode};
use collapse_core::etf::{self, Lift, XiCurve};
use collapse_core::landscape::{balance_residual, certify, Certificate, Verdict};
use collapse_core::lemmas::{run_suite, Suite, SuiteReport};
use collapse_core::metrics::{nc_metrics_lenient, nc_metrics_with, MetricOptions, NcMetrics};
use collapse_core::model::{gradient, objective};
use collapse_core::optim::{self, OptimizerConfig, OptimizerKind, CERTIFY_TOL, INIT_SCALE};
use collapse_core::persist::{self, SavedState};
use collapse_core::{Error, Hyperparams, ModelState};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{self, BackboneSection, FileConfig, OptimizerSection, ProblemSection};
use crate::{Cli, Command, Failure, THREADS_ENV};

pub const DEFAULT_RECORD_EVERY: usize = 100;
pub const DEFAULT_TRIALS: usize = 1000;
pub const DEFAULT_PROBE_SCALE: f64 = 1e-3;
pub const STATE_FILE: &str = "state.json";

/// Flags merged over the config file.
pub struct Settings<'a> {
    pub cli: &'a Cli,
    pub file: FileConfig,
    pub seed: u64,
    pub seeds: usize,
    pub out: PathBuf,
    pub record_every: usize,
    pub threads: usize,
}

impl<'a> Settings<'a> {
    pub fn new(cli: &'a Cli) -> Result<Self, Failure> {
        let g = &cli.global;
        let file = match &g.config {
            Some(path) => config::load(path)?,
            None => FileConfig::default(),
        };
        let seeds = g.seeds.or(file.seeds).unwrap_or(1);
        if seeds == 0 {
            return Err(Failure::Config("--seeds must be >= 1".into()));
        }
        let record_every = g.record_every.or(file.record_every).unwrap_or(DEFAULT_RECORD_EVERY);
        if record_every == 0 {
            return Err(Failure::Config("record_every must be >= 1".into()));
        }
        let out = g
            .out
            .clone()
            .or_else(|| file.out_dir.clone())
            .unwrap_or_else(|| Path::new("runs").join(command_name(&cli.command)));
        Ok(Self {
            cli,
            seed: g.seed.or(file.seed).unwrap_or(0),
            seeds,
            out,
            record_every,
            threads: thread_budget(g.parallel)?,
            file,
        })
    }

    pub fn hyperparams(&self) -> Result<Hyperparams, Failure> {
        let p = &self.cli.global.problem;
        let flags = ProblemSection {
            k: p.k,
            d: p.d,
            n: p.n,
            lambda_w: p.lambda_w,
            lambda_h: p.lambda_h,
            lambda_b: p.lambda_b,
        };
        self.file.problem.overlay(&flags).resolve()
    }

    pub fn optimizer(&self) -> Result<OptimizerConfig, Failure> {
        let o = &self.cli.global.optimizer;
        let kind = o
            .optimizer
            .as_deref()
            .map(str::parse::<OptimizerKind>)
            .transpose()
            .map_err(Failure::Config)?;
        let flags = OptimizerSection {
            kind,
            step_size: o.step_size,
            momentum: o.momentum,
            memory: o.memory,
            max_iters: o.max_iters,
            grad_tol: o.grad_tol,
            ..Default::default()
        };
        // A kind chosen on the command line resets to that kind's preset.
        let base = if kind.is_some() && kind != self.file.optimizer.kind {
            OptimizerSection::default()
        } else {
            self.file.optimizer.clone()
        };
        base.overlay(&flags).resolve()
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed + i).collect()
    }

    fn map_jobs<T, R, F>(&self, items: &[T], f: F) -> Result<Vec<R>, Failure>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        if self.threads <= 1 || items.len() <= 1 {
            return Ok(items.iter().map(f).collect());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads.min(items.len()))
            .build()
            .map_err(|e| Failure::Config(format!("thread pool: {e}")))?;
        Ok(pool.install(|| items.par_iter().map(f).collect()))
    }

    fn emit<T: Serialize>(&self, value: &T, text: impl FnOnce() -> String) {
        if self.cli.global.json {
            match serde_json::to_string(value) {
                Ok(line) => println!("{line}"),
                Err(e) => eprintln!("collapse-lab: cannot encode result: {e}"),
            }
        } else {
            println!("{}", text());
        }
    }
}

/// `--parallel N` capped by the environment; 1 when unset.
pub fn thread_budget(requested: Option<usize>) -> Result<usize, Failure> {
    let cap = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n >= 1)
                .ok_or_else(|| Failure::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?,
        ),
        Err(_) => None,
    };
    let wanted = match requested {
        Some(0) => return Err(Failure::Config("--parallel must be >= 1".into())),
        Some(n) => n,
        None => 1,
    };
    Ok(cap.map_or(wanted, |c| wanted.min(c)))
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Train => "train",
        Command::TrainFixedEtf { .. } => "train-fixed-etf",
        Command::TrainBackbone { .. } => "train-backbone",
        Command::Certify { .. } => "certify",
        Command::SaddleProbe { .. } => "saddle-probe",
        Command::Lemmas { .. } => "lemmas",
        Command::RhoStar => "rho-star",
        Command::Metrics { .. } => "metrics",
    }
}

pub fn execute(cli: &Cli) -> Result<(), Failure> {
    let s = Settings::new(cli)?;
    match &cli.command {
        Command::Train => train(&s),
        Command::TrainFixedEtf { lift } => train_fixed_etf(&s, lift.as_deref()),
        Command::TrainBackbone {
            random_labels,
            decay_mode,
            hidden,
            epochs,
        } => {
            let mode = decay_mode
                .as_deref()
                .map(str::parse::<DecayMode>)
                .transpose()
                .map_err(Failure::Config)?;
            let flags = BackboneSection {
                random_labels: random_labels.then_some(true),
                decay_mode: mode,
                hidden: (!hidden.is_empty()).then(|| hidden.clone()),
                epochs: *epochs,
                ..Default::default()
            };
            train_backbone(&s, &flags)
        }
        Command::Certify { state, tol } => certify_state(&s, state, *tol),
        Command::SaddleProbe { scale } => saddle_probe(&s, *scale),
        Command::Lemmas { trials } => lemmas(&s, *trials),
        Command::RhoStar => rho_star(&s),
        Command::Metrics { state, center } => metrics(&s, state, *center),
    }
}

fn check_all<T>(results: Vec<Result<T, Failure>>, what: &str) -> Result<Vec<T>, Failure> {
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(Failure::Config(m)) => return Err(Failure::Config(m)),
            Err(Failure::Check(m)) => failures.push(m),
        }
    }
    if failures.is_empty() {
        Ok(ok)
    } else {
        for f in &failures {
            eprintln!("collapse-lab: {f}");
        }
        Err(Failure::Check(format!(
            "{} of {} {what} failed",
            failures.len(),
            failures.len() + ok.len()
        )))
    }
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    pub xi_star: f64,
    pub grad_norm: f64,
    pub w_fro2: f64,
    pub rho_star: f64,
    pub metrics: NcMetrics,
    pub certificate: Certificate,
    pub dir: PathBuf,
}

impl TrainSummary {
    fn text(&self) -> String {
        let m = &self.metrics;
        format!(
            "seed {}: {:?} after {} iterations (converged {}) f {:.15} [xi* {:.15}] grad {:.2e} \
             |W|^2 {:.9} [rho* {:.9}] nc1 {:.2e} nc2 {:.2e} nc3 {:.2e} nc4 {:.2e} -> {}",
            self.seed,
            self.certificate.verdict,
            self.iterations,
            self.converged,
            self.objective,
            self.xi_star,
            self.grad_norm,
            self.w_fro2,
            self.rho_star,
            m.nc1,
            m.nc2,
            m.nc3,
            m.nc4,
            self.dir.display()
        )
    }
}

fn finish_run(
    s: &Settings,
    seed: u64,
    hp: &Hyperparams,
    curve: &XiCurve,
    res: optim::RunResult,
) -> Result<TrainSummary, Failure> {
    let dir = s.out.join(format!("seed-{seed}"));
    persist::persist_trace(&res.trace, &dir)?;
    persist::save_state(dir.join(STATE_FILE), &res.final_state, hp, Some(seed))?;
    let cert = certify(&res.final_state, hp, CERTIFY_TOL)?;
    Ok(TrainSummary {
        seed,
        iterations: res.iterations,
        converged: res.converged,
        objective: res.final_objective,
        xi_star: curve.xi_star,
        grad_norm: gradient(&res.final_state, hp)?.norm(),
        w_fro2: res.final_state.w.norm_squared(),
        rho_star: curve.rho_star,
        metrics: nc_metrics_lenient(&res.final_state, hp),
        certificate: cert,
        dir,
    })
}

fn report_runs(s: &Settings, results: Vec<Result<TrainSummary, Failure>>) -> Result<(), Failure> {
    let mut checked = Vec::new();
    for r in results {
        checked.push(r.and_then(|summary| {
            s.emit(&summary, || summary.text());
            if summary.certificate.verdict == Verdict::GlobalMinimum {
                Ok(summary)
            } else {
                Err(Failure::Check(format!(
                    "seed {} ended at {:?}",
                    summary.seed, summary.certificate.verdict
                )))
            }
        }));
    }
    check_all(checked, "runs").map(|_| ())
}

fn train(s: &Settings) -> Result<(), Failure> {
    let hp = s.hyperparams()?;
    let cfg = s.optimizer()?;
    let curve = etf::rho_star(&hp)?;
    let results = s.map_jobs(&s.seed_list(), |&seed| {
        let init = optim::random_init(&hp, seed, INIT_SCALE);
        let res = optim::run(&init, &hp, &cfg, s.record_every)?;
        finish_run(s, seed, &hp, &curve, res)
    })?;
    report_runs(s, results)
}

fn train_fixed_etf(s: &Settings, lift_flag: Option<&str>) -> Result<(), Failure> {
    let hp = s.hyperparams()?;
    let cfg = s.optimizer()?;
    let curve = etf::rho_star(&hp)?;
    if curve.rho_star == 0.0 {
        return Err(Failure::Check(
            "rho* = 0: the global minimum is the origin, there is no frame to fix".into(),
        ));
    }
    let lift_name = lift_flag.map(str::to_string).or_else(|| s.file.fixed_etf.lift.clone());
    let results = s.map_jobs(&s.seed_list(), |&seed| {
        let lift = match lift_name.as_deref() {
            Some(name) => config::parse_lift(name, seed)?,
            None => Lift::Random(seed),
        };
        let frame = etf::lifted_etf(hp.k, hp.d, lift)?.with_scale((curve.rho_star / hp.k as f64).sqrt());
        let init = optim::random_init(&hp, seed, INIT_SCALE);
        let res = optim::run_fixed_etf(&init.h, &init.b, &hp, &frame, &cfg, s.record_every)?;
        finish_run(s, seed, &hp, &curve, res)
    })?;
    report_runs(s, results)
}

#[derive(Debug, Serialize)]
pub struct BackboneSummary {
    pub hidden: usize,
    pub decay_mode: DecayMode,
    pub random_labels: bool,
    pub epochs: usize,
    pub first: backbone::EpochRecord,
    pub last: backbone::EpochRecord,
    pub dir: PathBuf,
}

fn train_backbone(s: &Settings, flags: &BackboneSection) -> Result<(), Failure> {
    let setup = s.file.backbone.overlay(flags).resolve()?;
    let data = backbone::synth_dataset(
        setup.classes,
        setup.per_class,
        setup.input_dim,
        setup.separation,
        setup.noise,
        setup.data_seed,
        setup.random_labels,
    )?;
    let results = s.map_jobs(&setup.hidden, |&hidden| -> Result<BackboneSummary, Failure> {
        let arch = Architecture {
            input_dim: setup.input_dim,
            hidden,
            feature_dim: setup.feature_dim,
            classes: setup.classes,
        };
        let dir = s.out.join(format!("hidden-{hidden}"));
        match backbone::train_backbone(&data, &arch, &setup.train, setup.decay_mode, s.record_every) {
            Ok(run) => {
                persist::persist_epochs(&run.records, &dir)?;
                Ok(BackboneSummary {
                    hidden,
                    decay_mode: setup.decay_mode,
                    random_labels: setup.random_labels,
                    epochs: setup.train.epochs,
                    first: *run.first(),
                    last: *run.last(),
                    dir,
                })
            }
            Err(Error::BackboneDiverged { epoch, reason, trace }) => {
                persist::persist_epochs(&trace, &dir)?;
                Err(Failure::Check(format!(
                    "hidden {hidden}: diverged at epoch {epoch}: {reason}"
                )))
            }
            Err(e) => Err(e.into()),
        }
    })?;
    let mut checked = Vec::new();
    for r in results {
        if let Ok(b) = &r {
            s.emit(b, || {
                format!(
                    "hidden {}: {:?} epochs {} train error {:.4} -> {:.4} nc1 {:.3e} -> {:.3e} nc2 {:.3e} nc3 {:.3e} -> {}",
                    b.hidden,
                    b.decay_mode,
                    b.epochs,
                    b.first.train_error,
                    b.last.train_error,
                    b.first.nc1,
                    b.last.nc1,
                    b.last.nc2,
                    b.last.nc3,
                    b.dir.display()
                )
            });
        }
        checked.push(r);
    }
    check_all(checked, "backbone runs").map(|_| ())
}

fn load(path: &Path) -> Result<SavedState, Failure> {
    Ok(persist::load_state(path)?)
}

#[derive(Debug, Serialize)]
struct CertifyOutput<'a> {
    state: &'a Path,
    certificate: &'a Certificate,
}

fn certify_state(s: &Settings, path: &Path, tol: f64) -> Result<(), Failure> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Failure::Config(format!("--tol must be > 0, got {tol}")));
    }
    let saved = load(path)?;
    let cert = certify(&saved.state, &saved.hp, tol)?;
    s.emit(
        &CertifyOutput {
            state: path,
            certificate: &cert,
        },
        || {
            let mut line = format!(
                "{:?}: grad {:.3e} |grad g| {:.6e} threshold {:.6e} balance {:.3e}",
                cert.verdict, cert.grad_norm, cert.grad_g_spectral_norm, cert.threshold, cert.balance_residual
            );
            if let Some(c) = cert.curvature_value {
                line.push_str(&format!(" curvature {c:.6e}"));
            }
            line
        },
    );
    match cert.verdict {
        Verdict::GlobalMinimum => Ok(()),
        v => Err(Failure::Check(format!(
            "{} is not a certified global minimum ({v:?})",
            path.display()
        ))),
    }
}

#[derive(Debug, Serialize)]
struct MetricsOutput {
    objective: f64,
    grad_norm: f64,
    w_fro2: f64,
    h_fro2: f64,
    b_norm: f64,
    balance_residual: Option<f64>,
    metrics: NcMetrics,
}

fn state_metrics(state: &ModelState, hp: &Hyperparams, center: bool) -> Result<MetricsOutput, Failure> {
    let metrics = nc_metrics_with(
        state,
        hp,
        MetricOptions {
            center_features: center,
        },
    )
    .unwrap_or_else(|_| nc_metrics_lenient(state, hp));
    Ok(MetricsOutput {
        objective: objective(state, hp)?,
        grad_norm: gradient(state, hp)?.norm(),
        w_fro2: state.w.norm_squared(),
        h_fro2: state.h.norm_squared(),
        b_norm: state.b.norm(),
        balance_residual: balance_residual(state, hp).ok(),
        metrics,
    })
}

fn metrics(s: &Settings, path: &Path, center: bool) -> Result<(), Failure> {
    let saved = load(path)?;
    let out = state_metrics(&saved.state, &saved.hp, center)?;
    s.emit(&out, || {
        let m = &out.metrics;
        format!(
            "f {:.15} grad {:.3e} |W|^2 {:.9} |H|^2 {:.9} |b| {:.3e} balance {} nc1 {:.3e} nc2 {:.3e} nc3 {:.3e} nc4 {:.3e}",
            out.objective,
            out.grad_norm,
            out.w_fro2,
            out.h_fro2,
            out.b_norm,
            out.balance_residual.map_or("n/a".to_string(), |b| format!("{b:.3e}")),
            m.nc1,
            m.nc2,
            m.nc3,
            m.nc4
        )
    });
    Ok(())
}

fn rho_star(s: &Settings) -> Result<(), Failure> {
    let hp = s.hyperparams()?;
    let curve = etf::rho_star(&hp)?;
    s.emit(&curve, || {
        let mut text = format!(
            "rho* {:.12}\nxi(rho*) {:.15}\nc1* {:.12}\nc2* {:.12}\nbracket [{}, {}]",
            curve.rho_star, curve.xi_star, curve.c1_star, curve.c2_star, curve.bracket.0, curve.bracket.1
        );
        if let Some(w) = &curve.warning {
            text.push_str(&format!("\nwarning: {w}"));
        }
        text
    });
    Ok(())
}

fn saddle_probe(s: &Settings, scale_flag: Option<f64>) -> Result<(), Failure> {
    let hp = s.hyperparams()?;
    let cfg = s.optimizer()?;
    let scale = scale_flag.or(s.file.probe.scale).unwrap_or(DEFAULT_PROBE_SCALE);
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Failure::Config(format!("--scale must be finite and >= 0, got {scale}")));
    }
    let report = optim::saddle_escape_probe(&hp, &cfg, scale)?;
    persist::save_state(s.out.join(STATE_FILE), &report.final_state, &hp, None)?;
    s.emit(&report, || {
        format!(
            "scale {:.1e}: predicted curvature {:.6e}, f {:.9} -> {:.15}, escape {}, {} iterations, final {:?}",
            report.perturbation_scale,
            report.predicted_curvature,
            report.initial_objective,
            report.final_objective,
            report
                .escape_iteration
                .map_or("none".to_string(), |i| format!("at iteration {i}")),
            report.iterations,
            report.certificate.verdict
        )
    });
    if report.stuck_at_saddle || report.escape_iteration.is_none() {
        return Err(Failure::Check("the probe did not leave the origin".into()));
    }
    Ok(())
}

fn lemmas(s: &Settings, trials_flag: Option<usize>) -> Result<(), Failure> {
    let trials = trials_flag.or(s.file.lemmas.trials).unwrap_or(DEFAULT_TRIALS);
    let seed = s.cli.global.seed.or(s.file.lemmas.seed).or(s.file.seed).unwrap_or(0);
    let reports = s.map_jobs(&Suite::ALL, |&suite| run_suite(suite, trials, seed))?;
    let mut failed = Vec::new();
    for r in reports {
        let r: SuiteReport = r?;
        s.emit(&r, || {
            let mut line = format!(
                "{}: {} passed, {} failed, {} skipped of {} (worst {:.3e})",
                r.suite, r.passed, r.failed, r.skipped, r.trials, r.worst
            );
            if let Some(f) = &r.first_failure {
                line.push_str(&format!("; first failure {f}"));
            }
            line
        });
        if !r.ok() {
            failed.push(r.suite.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("lemma suites failed: {}", failed.join(", "))))
    }
}
