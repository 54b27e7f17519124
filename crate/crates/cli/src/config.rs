//! TOML run configuration. Every section is optional; missing keys fall back
//! to presets and command-line flags override file values.

use std::fs;
use std::path::{Path, PathBuf};

use collapse_core::backbone::{BackboneConfig, DecayMode};
use collapse_core::etf::Lift;
use collapse_core::optim::{OptimizerConfig, OptimizerKind};
use collapse_core::Hyperparams;
use serde::Deserialize;

use crate::Failure;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub seeds: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub record_every: Option<usize>,
    #[serde(default)]
    pub problem: ProblemSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub backbone: BackboneSection,
    #[serde(default)]
    pub lemmas: LemmaSection,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub fixed_etf: FixedEtfSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub k: Option<usize>,
    pub d: Option<usize>,
    pub n: Option<usize>,
    pub lambda_w: Option<f64>,
    pub lambda_h: Option<f64>,
    pub lambda_b: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub kind: Option<OptimizerKind>,
    pub step_size: Option<f64>,
    pub momentum: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub memory: Option<usize>,
    pub c1_wolfe: Option<f64>,
    pub c2_wolfe: Option<f64>,
    pub decay_factor: Option<f64>,
    pub decay_period: Option<usize>,
    pub max_iters: Option<usize>,
    pub grad_tol: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub classes: Option<usize>,
    pub per_class: Option<usize>,
    pub input_dim: Option<usize>,
    pub separation: Option<f64>,
    pub noise: Option<f64>,
    pub data_seed: Option<u64>,
    pub random_labels: Option<bool>,
    pub hidden: Option<Vec<usize>>,
    pub feature_dim: Option<usize>,
    pub decay_mode: Option<DecayMode>,
    pub step_size: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub epochs: Option<usize>,
    pub decay_factor: Option<f64>,
    pub decay_period: Option<usize>,
    pub init_seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LemmaSection {
    pub trials: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    pub scale: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedEtfSection {
    /// `identity` or `random`.
    pub lift: Option<String>,
}

pub fn load(path: &Path) -> Result<FileConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    parse(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

pub fn parse(text: &str) -> Result<FileConfig, String> {
    toml::from_str(text).map_err(|e| e.to_string())
}

impl ProblemSection {
    pub fn overlay(&self, other: &ProblemSection) -> ProblemSection {
        ProblemSection {
            k: other.k.or(self.k),
            d: other.d.or(self.d),
            n: other.n.or(self.n),
            lambda_w: other.lambda_w.or(self.lambda_w),
            lambda_h: other.lambda_h.or(self.lambda_h),
            lambda_b: other.lambda_b.or(self.lambda_b),
        }
    }

    /// Missing values come from the reference problem.
    pub fn resolve(&self) -> Result<Hyperparams, Failure> {
        let r = Hyperparams::reference();
        Hyperparams::new(
            self.k.unwrap_or(r.k),
            self.d.unwrap_or(r.d),
            self.n.unwrap_or(r.n),
            self.lambda_w.unwrap_or(r.lambda_w),
            self.lambda_h.unwrap_or(r.lambda_h),
            self.lambda_b.unwrap_or(r.lambda_b),
        )
        .map_err(|e| Failure::Config(e.to_string()))
    }
}

/// Tuned starting point for each optimizer family.
pub fn optimizer_preset(kind: OptimizerKind) -> OptimizerConfig {
    let cfg = match kind {
        OptimizerKind::GdMomentum => OptimizerConfig::gd_momentum(0.5, 0.9),
        OptimizerKind::Adam => OptimizerConfig::adam(0.01).with_schedule(0.5, 4000),
        OptimizerKind::Lbfgs => OptimizerConfig::lbfgs(10),
    };
    cfg.with_limits(50_000, 1e-12)
}

impl OptimizerSection {
    pub fn overlay(&self, other: &OptimizerSection) -> OptimizerSection {
        OptimizerSection {
            kind: other.kind.or(self.kind),
            step_size: other.step_size.or(self.step_size),
            momentum: other.momentum.or(self.momentum),
            beta1: other.beta1.or(self.beta1),
            beta2: other.beta2.or(self.beta2),
            epsilon: other.epsilon.or(self.epsilon),
            memory: other.memory.or(self.memory),
            c1_wolfe: other.c1_wolfe.or(self.c1_wolfe),
            c2_wolfe: other.c2_wolfe.or(self.c2_wolfe),
            decay_factor: other.decay_factor.or(self.decay_factor),
            decay_period: other.decay_period.or(self.decay_period),
            max_iters: other.max_iters.or(self.max_iters),
            grad_tol: other.grad_tol.or(self.grad_tol),
        }
    }

    pub fn resolve(&self) -> Result<OptimizerConfig, Failure> {
        let mut c = optimizer_preset(self.kind.unwrap_or(OptimizerKind::GdMomentum));
        c.step_size = self.step_size.unwrap_or(c.step_size);
        c.momentum = self.momentum.unwrap_or(c.momentum);
        c.beta1 = self.beta1.unwrap_or(c.beta1);
        c.beta2 = self.beta2.unwrap_or(c.beta2);
        c.epsilon = self.epsilon.unwrap_or(c.epsilon);
        c.memory = self.memory.unwrap_or(c.memory);
        c.c1_wolfe = self.c1_wolfe.unwrap_or(c.c1_wolfe);
        c.c2_wolfe = self.c2_wolfe.unwrap_or(c.c2_wolfe);
        c.decay_factor = self.decay_factor.unwrap_or(c.decay_factor);
        c.decay_period = self.decay_period.unwrap_or(c.decay_period);
        c.max_iters = self.max_iters.unwrap_or(c.max_iters);
        c.grad_tol = self.grad_tol.unwrap_or(c.grad_tol);
        c.validate().map_err(|e| Failure::Config(e.to_string()))?;
        Ok(c)
    }
}

/// Fully resolved backbone experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneSetup {
    pub classes: usize,
    pub per_class: usize,
    pub input_dim: usize,
    pub separation: f64,
    pub noise: f64,
    pub data_seed: u64,
    pub random_labels: bool,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub decay_mode: DecayMode,
    pub train: BackboneConfig,
}

impl BackboneSetup {
    /// Separable Gaussian mixture; collapses under peeled decay.
    pub fn separable() -> Self {
        Self {
            classes: 3,
            per_class: 100,
            input_dim: 10,
            separation: 3.0,
            noise: 0.5,
            data_seed: 1,
            random_labels: false,
            hidden: vec![64],
            feature_dim: 16,
            decay_mode: DecayMode::PeeledWH,
            train: BackboneConfig {
                epochs: 8000,
                ..BackboneConfig::default()
            },
        }
    }

    /// Shuffled labels on a wider, noisier mixture; width decides memorization.
    pub fn random_labels() -> Self {
        Self {
            input_dim: 20,
            separation: 4.0,
            noise: 1.0,
            random_labels: true,
            hidden: vec![8, 256],
            decay_mode: DecayMode::AllParams,
            train: BackboneConfig {
                step_size: 0.1,
                epochs: 6000,
                decay_period: 4000,
                ..BackboneConfig::default()
            },
            ..Self::separable()
        }
    }
}

impl BackboneSection {
    pub fn overlay(&self, other: &BackboneSection) -> BackboneSection {
        BackboneSection {
            classes: other.classes.or(self.classes),
            per_class: other.per_class.or(self.per_class),
            input_dim: other.input_dim.or(self.input_dim),
            separation: other.separation.or(self.separation),
            noise: other.noise.or(self.noise),
            data_seed: other.data_seed.or(self.data_seed),
            random_labels: other.random_labels.or(self.random_labels),
            hidden: other.hidden.clone().or_else(|| self.hidden.clone()),
            feature_dim: other.feature_dim.or(self.feature_dim),
            decay_mode: other.decay_mode.or(self.decay_mode),
            step_size: other.step_size.or(self.step_size),
            momentum: other.momentum.or(self.momentum),
            weight_decay: other.weight_decay.or(self.weight_decay),
            epochs: other.epochs.or(self.epochs),
            decay_factor: other.decay_factor.or(self.decay_factor),
            decay_period: other.decay_period.or(self.decay_period),
            init_seed: other.init_seed.or(self.init_seed),
        }
    }

    /// `random_labels` picks the preset; every other key overrides it.
    pub fn resolve(&self) -> Result<BackboneSetup, Failure> {
        let base = if self.random_labels.unwrap_or(false) {
            BackboneSetup::random_labels()
        } else {
            BackboneSetup::separable()
        };
        let t = base.train;
        let setup = BackboneSetup {
            classes: self.classes.unwrap_or(base.classes),
            per_class: self.per_class.unwrap_or(base.per_class),
            input_dim: self.input_dim.unwrap_or(base.input_dim),
            separation: self.separation.unwrap_or(base.separation),
            noise: self.noise.unwrap_or(base.noise),
            data_seed: self.data_seed.unwrap_or(base.data_seed),
            random_labels: base.random_labels,
            hidden: self.hidden.clone().unwrap_or(base.hidden),
            feature_dim: self.feature_dim.unwrap_or(base.feature_dim),
            decay_mode: self.decay_mode.unwrap_or(base.decay_mode),
            train: BackboneConfig {
                step_size: self.step_size.unwrap_or(t.step_size),
                momentum: self.momentum.unwrap_or(t.momentum),
                weight_decay: self.weight_decay.unwrap_or(t.weight_decay),
                epochs: self.epochs.unwrap_or(t.epochs),
                decay_factor: self.decay_factor.unwrap_or(t.decay_factor),
                decay_period: self.decay_period.unwrap_or(t.decay_period),
                init_seed: self.init_seed.unwrap_or(t.init_seed),
            },
        };
        setup.train.validate().map_err(|e| Failure::Config(e.to_string()))?;
        if setup.hidden.is_empty() || setup.hidden.contains(&0) {
            return Err(Failure::Config(
                "hidden widths must be a non-empty list of positive sizes".into(),
            ));
        }
        if setup.feature_dim == 0 || setup.classes < 2 {
            return Err(Failure::Config("feature_dim must be >= 1 and classes >= 2".into()));
        }
        Ok(setup)
    }
}

/// Parses `identity` or `random`; the random lift is seeded by the run seed.
pub fn parse_lift(text: &str, seed: u64) -> Result<Lift, Failure> {
    match text {
        "identity" => Ok(Lift::Identity),
        "random" => Ok(Lift::Random(seed)),
        other => Err(Failure::Config(format!(
            "unknown lift '{other}' (expected identity or random)"
        ))),
    }
}
