//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use collapse_cli::config::{optimizer_preset, BackboneSetup};
use collapse_core::backbone::{synth_dataset, train_backbone, Architecture, BackboneRun, DecayMode};
use collapse_core::convex::kkt_residuals;
use collapse_core::etf::{lifted_etf, rho_star, Lift};
use collapse_core::landscape::{certify, min_eig_estimate, negative_curvature_direction, Verdict};
use collapse_core::lemmas::run_lemma_suites;
use collapse_core::metrics::{nc_metrics, NcMetrics};
use collapse_core::model::{grad_g, gradient, hessian_bilinear, objective};
use collapse_core::numerics::singular_values;
use collapse_core::optim::{
    random_init, run, run_fixed_etf, saddle_escape_probe, OptimizerKind, RunResult, TraceRecord, TrainTrace,
    CERTIFY_TOL, INIT_SCALE,
};
use collapse_core::persist::{load_state, save_state, trace_to_csv, EPOCH_HEADER, TRACE_HEADER};
use collapse_core::rng::{stream_rng, uniform_matrix};
use collapse_core::{GradTriple, Hyperparams, ModelState};
use nalgebra::{DMatrix, DVector};

// Criterion 1.
const GRAD_REL_TOL: f64 = 1e-6;
const HESS_REL_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const BUDGET_DERIVATIVES: Duration = Duration::from_secs(5);

// Criteria 2, 3, 6.
const GRAD_NORM_TOL: f64 = 1e-8;
const MAX_ITERS: usize = 50_000;
const NC1_TOL: f64 = 1e-6;
const NC2_TOL: f64 = 1e-4;
const NC3_TOL: f64 = 1e-4;
const NC4_TOL: f64 = 1e-8;
const RHO_REL_TOL: f64 = 1e-3;
const XI_TOL: f64 = 1e-6;
const GRAM_TOL: f64 = 1e-3;
const FIXED_ETF_TOL: f64 = 1e-6;
const SEEDS: u64 = 20;
const FIXED_SEEDS: u64 = 5;
const BUDGET_REFERENCE: Duration = Duration::from_secs(120);
const BUDGET_FIXED_ETF: Duration = Duration::from_secs(60);

// Criterion 4.
const ORIGIN_GRAD_TOL: f64 = 1e-10;
const CURVATURE: f64 = -0.09;
const CURVATURE_TOL: f64 = 1e-10;
const CURVATURE_FD_TOL: f64 = 1e-4;
const CURVATURE_FD_STEP: f64 = 1e-3;
const MIN_EIG_BOUND: f64 = -0.045;
// The exact minimum eigenvalue equals the bound; allow round-off only.
const MIN_EIG_SLACK: f64 = 1e-12;
const ESCAPE_ITERS: usize = 500;
const PROBE_SCALE: f64 = 1e-3;

// Criterion 5.
const LEMMA_TRIALS: usize = 1000;
const LEMMA_SEED: u64 = 7;
const BUDGET_LEMMAS: Duration = Duration::from_secs(30);

// Criterion 8.
const NC1_REDUCTION: f64 = 10.0;
const NC2_MODE_GAP: f64 = 0.1;
const BUDGET_BACKBONE: Duration = Duration::from_secs(180);

// Criterion 9.
const PERSIST_REL_TOL: f64 = 1e-15;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn timed(budget: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let out = f();
    let elapsed = start.elapsed();
    let in_time = elapsed <= budget;
    Outcome::new(
        out.pass && in_time,
        format!(
            "{}; {:.2}s (budget {}s)",
            out.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        ),
    )
}

fn uniform_triple(hp: &Hyperparams, seed: u64, stream: u64) -> GradTriple {
    let mut rng = stream_rng(seed, stream);
    GradTriple {
        dw: uniform_matrix(&mut rng, hp.k, hp.d, 1.0),
        dh: uniform_matrix(&mut rng, hp.d, hp.n_total(), 1.0),
        db: uniform_matrix(&mut rng, hp.k, 1, 1.0).column(0).into_owned(),
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn derivatives() -> Outcome {
    let hp = Hyperparams::new(4, 6, 10, 5e-3, 5e-3, 1e-3).unwrap();
    let (mut worst_grad, mut worst_hess) = (0.0f64, 0.0f64);
    for seed in 0..SEEDS {
        let t = uniform_triple(&hp, seed, 1);
        let s = ModelState {
            w: t.dw,
            h: t.dh,
            b: t.db,
        };
        let x = s.to_flat();
        let exact = gradient(&s, &hp).unwrap().to_flat();
        let mut fd = DVector::zeros(x.len());
        let mut probe = x.clone();
        for i in 0..x.len() {
            probe[i] = x[i] + FD_STEP;
            let up = objective(&ModelState::from_flat(&probe, &hp), &hp).unwrap();
            probe[i] = x[i] - FD_STEP;
            let down = objective(&ModelState::from_flat(&probe, &hp), &hp).unwrap();
            probe[i] = x[i];
            fd[i] = (up - down) / (2.0 * FD_STEP);
        }
        worst_grad = worst_grad.max((&fd - &exact).norm() / exact.norm());

        let a = uniform_triple(&hp, seed, 2);
        let b = uniform_triple(&hp, seed, 3);
        let up = gradient(&s.step(&b, FD_STEP), &hp).unwrap().dot(&a);
        let down = gradient(&s.step(&b, -FD_STEP), &hp).unwrap().dot(&a);
        let bil = hessian_bilinear(&s, &hp, &a, &b).unwrap();
        worst_hess = worst_hess.max(rel(bil, (up - down) / (2.0 * FD_STEP)));
    }
    Outcome::new(
        worst_grad <= GRAD_REL_TOL && worst_hess <= HESS_REL_TOL,
        format!(
            "{SEEDS} states: gradient rel {worst_grad:.2e} <= {GRAD_REL_TOL:e}, Hessian rel {worst_hess:.2e} <= {HESS_REL_TOL:e}"
        ),
    )
}

fn metrics_ok(m: &NcMetrics) -> bool {
    m.nc1 <= NC1_TOL && m.nc2 <= NC2_TOL && m.nc3 <= NC3_TOL && m.nc4 <= NC4_TOL
}

fn worst_metrics(ms: &[NcMetrics]) -> NcMetrics {
    ms.iter().fold(
        NcMetrics {
            nc1: 0.0,
            nc2: 0.0,
            nc3: 0.0,
            nc4: 0.0,
        },
        |a, m| NcMetrics {
            nc1: a.nc1.max(m.nc1),
            nc2: a.nc2.max(m.nc2),
            nc3: a.nc3.max(m.nc3),
            nc4: a.nc4.max(m.nc4),
        },
    )
}

fn train_reference(kind: OptimizerKind) -> Vec<RunResult> {
    let hp = Hyperparams::reference();
    let cfg = optimizer_preset(kind);
    (0..SEEDS)
        .map(|seed| run(&random_init(&hp, seed, INIT_SCALE), &hp, &cfg, MAX_ITERS).unwrap())
        .collect()
}

fn reference_problem(gd: &[RunResult]) -> Outcome {
    let hp = Hyperparams::reference();
    let curve = rho_star(&hp).unwrap();
    let (mut fails, mut worst_grad, mut worst_rho, mut worst_xi, mut max_iters) = (0, 0.0f64, 0.0f64, 0.0f64, 0);
    let mut ms = Vec::new();
    for res in gd {
        let s = &res.final_state;
        let grad = gradient(s, &hp).unwrap().norm();
        let m = nc_metrics(s, &hp).unwrap();
        let rho_err = rel(s.w.norm_squared(), curve.rho_star);
        let xi_err = (res.final_objective - curve.xi_star).abs();
        let verdict = certify(s, &hp, CERTIFY_TOL).unwrap().verdict;
        worst_grad = worst_grad.max(grad);
        worst_rho = worst_rho.max(rho_err);
        worst_xi = worst_xi.max(xi_err);
        max_iters = max_iters.max(res.iterations);
        ms.push(m);
        let ok = grad <= GRAD_NORM_TOL
            && res.iterations <= MAX_ITERS
            && metrics_ok(&m)
            && rho_err <= RHO_REL_TOL
            && xi_err <= XI_TOL
            && verdict == Verdict::GlobalMinimum;
        fails += usize::from(!ok);
    }
    let w = worst_metrics(&ms);
    Outcome::new(
        fails == 0,
        format!(
            "{} seeds, {fails} failing: grad {worst_grad:.1e} <= {GRAD_NORM_TOL:e} by iter {max_iters} <= {MAX_ITERS}; \
             NC1 {:.1e} NC2 {:.1e} NC3 {:.1e} NC4 {:.1e}; rho rel {worst_rho:.1e} <= {RHO_REL_TOL:e}; \
             |f - xi*| {worst_xi:.1e} <= {XI_TOL:e}; all GlobalMinimum",
            gd.len(),
            w.nc1,
            w.nc2,
            w.nc3,
            w.nc4
        ),
    )
}

fn normalized_gram(w: &DMatrix<f64>) -> DMatrix<f64> {
    let g = w * w.transpose();
    let norm = g.norm();
    g / norm
}

fn optimizer_agreement(gd: &[RunResult]) -> Outcome {
    let hp = Hyperparams::reference();
    let mut details = Vec::new();
    let mut pass = true;
    for (name, kind) in [("Adam", OptimizerKind::Adam), ("L-BFGS", OptimizerKind::Lbfgs)] {
        let runs = train_reference(kind);
        let mut gap = 0.0f64;
        let mut ms = Vec::new();
        for (r, g) in runs.iter().zip(gd) {
            gap = gap.max((normalized_gram(&r.final_state.w) - normalized_gram(&g.final_state.w)).norm());
            ms.push(nc_metrics(&r.final_state, &hp).unwrap());
        }
        let w = worst_metrics(&ms);
        pass &= gap <= GRAM_TOL && metrics_ok(&w);
        details.push(format!(
            "{name} Gram gap {gap:.1e} <= {GRAM_TOL:e}, NC {:.1e}/{:.1e}/{:.1e}/{:.1e}",
            w.nc1, w.nc2, w.nc3, w.nc4
        ));
    }
    Outcome::new(pass, details.join("; "))
}

fn strict_saddle() -> Outcome {
    let hp = Hyperparams::reference();
    let origin = ModelState::zeros(&hp);
    let g = grad_g(&origin.logits(), &hp).unwrap();
    let expected = 1.0 / (hp.k as f64 * (hp.n as f64).sqrt());
    let grad_err = (singular_values(&g).unwrap()[0] - expected).abs();

    let (dir, predicted) = negative_curvature_direction(&origin, &hp).unwrap();
    let bilinear = hessian_bilinear(&origin, &hp, &dir, &dir).unwrap();
    let h = CURVATURE_FD_STEP;
    let f0 = objective(&origin, &hp).unwrap();
    let fd = (objective(&origin.step(&dir, h), &hp).unwrap() - 2.0 * f0
        + objective(&origin.step(&dir, -h), &hp).unwrap())
        / (h * h);
    let lambda_min = min_eig_estimate(&origin, &hp, 200, 1e-10).unwrap().lambda_min;
    let probe = saddle_escape_probe(&hp, &optimizer_preset(OptimizerKind::GdMomentum), PROBE_SCALE).unwrap();
    let escape = probe.escape_iteration;

    let pass = grad_err <= ORIGIN_GRAD_TOL
        && (predicted - CURVATURE).abs() <= CURVATURE_TOL
        && (bilinear - predicted).abs() <= CURVATURE_TOL
        && (fd - predicted).abs() <= CURVATURE_FD_TOL
        && lambda_min <= MIN_EIG_BOUND + MIN_EIG_SLACK
        && escape.is_some_and(|i| i <= ESCAPE_ITERS);
    Outcome::new(
        pass,
        format!(
            "|grad g(0)| err {grad_err:.1e} <= {ORIGIN_GRAD_TOL:e}; curvature {predicted:.12} (bilinear {bilinear:.12}, \
             fd {fd:.8}); lambda_min {lambda_min:.12} <= {MIN_EIG_BOUND} + {MIN_EIG_SLACK:e}; escape at {} <= {ESCAPE_ITERS}",
            escape.map_or("none".to_string(), |i| i.to_string())
        ),
    )
}

fn lemmas() -> Outcome {
    let reports = run_lemma_suites(LEMMA_TRIALS, LEMMA_SEED).unwrap();
    let pass = reports.iter().all(|r| r.ok());
    let summary: Vec<String> = reports
        .iter()
        .map(|r| format!("{} {}/{} (skipped {})", r.suite, r.passed, r.trials, r.skipped))
        .collect();
    Outcome::new(pass, summary.join(", "))
}

fn fixed_etf() -> Outcome {
    let cfg = optimizer_preset(OptimizerKind::GdMomentum);
    let mut worst = 0.0f64;
    let mut pass = true;
    for d in [6, 4] {
        let hp = Hyperparams::new(4, d, 25, 5e-3, 5e-3, 1e-3).unwrap();
        let curve = rho_star(&hp).unwrap();
        for seed in 0..FIXED_SEEDS {
            let init = random_init(&hp, seed, INIT_SCALE);
            let free = run(&init, &hp, &cfg, MAX_ITERS).unwrap();
            let frame = lifted_etf(hp.k, hp.d, Lift::Random(seed))
                .unwrap()
                .with_scale((curve.rho_star / hp.k as f64).sqrt());
            let fixed = run_fixed_etf(&init.h, &init.b, &hp, &frame, &cfg, MAX_ITERS).unwrap();
            let gap = (fixed.final_objective - free.final_objective).abs();
            worst = worst.max(gap);
            pass &= free.converged && fixed.converged && gap <= FIXED_ETF_TOL;
        }
    }
    Outcome::new(
        pass,
        format!("{FIXED_SEEDS} seeds at d=6 and d=K=4: |f_fixed - f_free| {worst:.1e} <= {FIXED_ETF_TOL:e}"),
    )
}

fn heavy_regularization() -> Outcome {
    let hp = Hyperparams::new(4, 6, 25, 1.0, 1.0, 1e-3).unwrap();
    let curve = rho_star(&hp).unwrap();
    let origin = ModelState::zeros(&hp);
    let verdict = certify(&origin, &hp, CERTIFY_TOL).unwrap().verdict;
    let kkt = kkt_residuals(&DMatrix::zeros(hp.k, hp.n_total()), &DVector::zeros(hp.k), &hp).unwrap();
    let pass =
        curve.rho_star == 0.0 && curve.warning.is_some() && verdict == Verdict::GlobalMinimum && kkt.is_optimal(1e-12);
    Outcome::new(
        pass,
        format!(
            "rho* {} warning {}; origin {verdict:?}; KKT spectral slack {:.3e}",
            curve.rho_star,
            curve.warning.is_some(),
            kkt.spectral_slack
        ),
    )
}

fn backbone_run(setup: &BackboneSetup, hidden: usize, mode: DecayMode) -> BackboneRun {
    let data = synth_dataset(
        setup.classes,
        setup.per_class,
        setup.input_dim,
        setup.separation,
        setup.noise,
        setup.data_seed,
        setup.random_labels,
    )
    .unwrap();
    let arch = Architecture {
        input_dim: setup.input_dim,
        hidden,
        feature_dim: setup.feature_dim,
        classes: setup.classes,
    };
    train_backbone(&data, &arch, &setup.train, mode, 100).unwrap()
}

fn toy_backbone() -> Outcome {
    let sep = BackboneSetup::separable();
    let peeled = backbone_run(&sep, sep.hidden[0], DecayMode::PeeledWH);
    let reduction = peeled.first().nc1 / peeled.last().nc1;
    let all = backbone_run(&sep, sep.hidden[0], DecayMode::AllParams);
    let nc2_gap = (all.last().nc2 - peeled.last().nc2).abs();

    let rl = BackboneSetup::random_labels();
    let narrow = backbone_run(&rl, 8, rl.decay_mode);
    let wide = backbone_run(&rl, 256, rl.decay_mode);

    let pass = peeled.last().train_error == 0.0
        && reduction >= NC1_REDUCTION
        && wide.last().train_error == 0.0
        && narrow.last().train_error > 0.0
        && nc2_gap <= NC2_MODE_GAP;
    Outcome::new(
        pass,
        format!(
            "separable error {} NC1 reduced {reduction:.1}x >= {NC1_REDUCTION}x; random labels error hidden=256 {} \
             hidden=8 {:.3}; |NC2 all - NC2 peeled| {nc2_gap:.3} <= {NC2_MODE_GAP}",
            peeled.last().train_error,
            wide.last().train_error,
            narrow.last().train_error
        ),
    )
}

fn persistence(gd: &[RunResult]) -> Outcome {
    let hp = Hyperparams::reference();
    let dir = tempfile::tempdir().unwrap();
    let mut worst = 0.0f64;
    for (seed, res) in gd.iter().enumerate() {
        let path = dir.path().join(format!("state-{seed}.json"));
        save_state(&path, &res.final_state, &hp, Some(seed as u64)).unwrap();
        let back = load_state(&path).unwrap();
        let f0 = objective(&res.final_state, &hp).unwrap();
        worst = worst.max(rel(objective(&back.state, &hp).unwrap(), f0));
    }

    let record = TraceRecord {
        iter: 0,
        f: 1.25,
        grad_norm: 0.5,
        nc1: f64::NAN,
        nc2: 0.75,
        nc3: 0.125,
        nc4: 2.0,
        w_fro2: 3.0,
        h_fro2: 4.5,
        b_norm: 0.0,
        seconds: 0.0,
    };
    let trace = TrainTrace {
        records: vec![
            record,
            TraceRecord {
                iter: 100,
                f: 1.0,
                ..record
            },
        ],
    };
    let expected = "iter,f,grad_norm,nc1,nc2,nc3,nc4,w_fro2,h_fro2,b_norm,seconds\n\
                    0,1.25,0.5,NaN,0.75,0.125,2,3,4.5,0,0\n\
                    100,1,0.5,NaN,0.75,0.125,2,3,4.5,0,0\n";
    let csv_ok = trace_to_csv(&trace) == expected
        && TRACE_HEADER == "iter,f,grad_norm,nc1,nc2,nc3,nc4,w_fro2,h_fro2,b_norm,seconds"
        && EPOCH_HEADER == "epoch,loss,objective,train_error,nc1,nc2,nc3,nc4,seconds";
    Outcome::new(
        worst <= PERSIST_REL_TOL && csv_ok,
        format!(
            "{} trained states: objective rel change {worst:.1e} <= {PERSIST_REL_TOL:e}; CSV bytes match {csv_ok}",
            gd.len()
        ),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut results = Vec::new();
    let mut report = |id: usize, name: &str, out: Outcome| {
        println!(
            "criterion {id} {}: {name}: {}",
            if out.pass { "PASS" } else { "FAIL" },
            out.detail
        );
        results.push(out.pass);
    };

    report(1, "gradient and Hessian", timed(BUDGET_DERIVATIVES, derivatives));
    let mut gd = Vec::new();
    let c2 = timed(BUDGET_REFERENCE, || {
        gd = train_reference(OptimizerKind::GdMomentum);
        reference_problem(&gd)
    });
    report(2, "reference problem under GD-momentum", c2);
    report(3, "optimizer agreement", optimizer_agreement(&gd));
    report(4, "strict saddle at the origin", strict_saddle());
    report(5, "lemma suites", timed(BUDGET_LEMMAS, lemmas));
    report(6, "fixed-ETF training", timed(BUDGET_FIXED_ETF, fixed_etf));
    report(7, "heavy regularization", heavy_regularization());
    report(8, "toy backbone", timed(BUDGET_BACKBONE, toy_backbone));
    report(9, "persistence", persistence(&gd));

    let passed = results.iter().filter(|&&p| p).count();
    println!(
        "{passed}/{} criteria passed in {:.1}s",
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
