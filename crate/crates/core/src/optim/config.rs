use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Full-batch gradient descent with heavy-ball momentum (the deterministic
    /// stand-in for SGD: the unconstrained model has no minibatch structure).
    GdMomentum,
    Adam,
    Lbfgs,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "gd-momentum" | "sgd" | "gd" => Ok(Self::GdMomentum),
            "adam" => Ok(Self::Adam),
            "lbfgs" | "l-bfgs" => Ok(Self::Lbfgs),
            other => Err(format!(
                "unknown optimizer '{other}' (expected gd-momentum, adam or lbfgs)"
            )),
        }
    }
}

/// Hyperparameters of every optimizer family; fields unused by `kind` are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub step_size: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub memory: usize,
    pub c1_wolfe: f64,
    pub c2_wolfe: f64,
    /// Step size is multiplied by `decay_factor` every `decay_period` iterations.
    pub decay_factor: f64,
    /// `0` disables the schedule.
    pub decay_period: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::gd_momentum(0.5, 0.9)
    }
}

impl OptimizerConfig {
    pub fn gd_momentum(step_size: f64, momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::GdMomentum,
            step_size,
            momentum,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            memory: 10,
            c1_wolfe: 1e-4,
            c2_wolfe: 0.9,
            decay_factor: 0.1,
            decay_period: 0,
            max_iters: 50_000,
            grad_tol: 1e-8,
        }
    }

    pub fn adam(step_size: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            step_size,
            ..Self::gd_momentum(step_size, 0.0)
        }
    }

    pub fn lbfgs(memory: usize) -> Self {
        Self {
            kind: OptimizerKind::Lbfgs,
            memory,
            ..Self::gd_momentum(1.0, 0.0)
        }
    }

    pub fn with_schedule(mut self, factor: f64, period: usize) -> Self {
        self.decay_factor = factor;
        self.decay_period = period;
        self
    }

    pub fn with_limits(mut self, max_iters: usize, grad_tol: f64) -> Self {
        self.max_iters = max_iters;
        self.grad_tol = grad_tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| if ok { Ok(()) } else { Err(domain(what.to_string())) };
        check(
            self.step_size > 0.0 && self.step_size.is_finite(),
            "step_size must be > 0",
        )?;
        check((0.0..1.0).contains(&self.momentum), "momentum must lie in [0, 1)")?;
        check((0.0..1.0).contains(&self.beta1), "beta1 must lie in [0, 1)")?;
        check((0.0..1.0).contains(&self.beta2), "beta2 must lie in [0, 1)")?;
        check(self.epsilon > 0.0, "epsilon must be > 0")?;
        check(self.memory >= 1, "memory must be >= 1")?;
        check(
            0.0 < self.c1_wolfe && self.c1_wolfe < self.c2_wolfe && self.c2_wolfe < 1.0,
            "line-search constants need 0 < c1 < c2 < 1",
        )?;
        check(
            self.decay_factor > 0.0 && self.decay_factor <= 1.0,
            "decay_factor must lie in (0, 1]",
        )?;
        check(self.grad_tol >= 0.0, "grad_tol must be >= 0")?;
        Ok(())
    }

    /// Scheduled step size at iteration `t`.
    pub fn step_at(&self, t: usize) -> f64 {
        match t.checked_div(self.decay_period) {
            Some(periods) => self.step_size * self.decay_factor.powi(periods as i32),
            None => self.step_size,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_decays_stepwise() {
        let c = OptimizerConfig::gd_momentum(1.0, 0.9).with_schedule(0.1, 40);
        assert_eq!(c.step_at(39), 1.0);
        assert!((c.step_at(40) - 0.1).abs() < 1e-16);
        assert!((c.step_at(85) - 0.01).abs() < 1e-17);
    }

    #[test]
    fn invalid_momentum_rejected() {
        assert!(OptimizerConfig::gd_momentum(0.1, 1.0).validate().is_err());
        assert!(OptimizerConfig::gd_momentum(0.0, 0.5).validate().is_err());
        assert!(OptimizerConfig::lbfgs(0).validate().is_err());
    }
}
