//! Strong-Wolfe line search with cubic interpolation (Nocedal & Wright,
//! Algorithms 3.5 and 3.6).

use nalgebra::DVector;
use serde::Serialize;

use super::solver::Problem;
use crate::error::Result;

const MAX_BRACKET: usize = 30;
const MAX_ZOOM: usize = 40;

/// One accepted line-search step, enough to re-check the Wolfe conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LineSearchRecord {
    pub iteration: usize,
    pub step: f64,
    pub f0: f64,
    pub slope0: f64,
    pub f_step: f64,
    /// `f_step - f0`, evaluated without cancellation when the problem supports it.
    pub f_change: f64,
    pub slope_step: f64,
}

impl LineSearchRecord {
    pub fn satisfies_strong_wolfe(&self, c1: f64, c2: f64) -> bool {
        self.f_change <= c1 * self.step * self.slope0 && self.slope_step.abs() <= c2 * self.slope0.abs()
    }
}

pub(crate) struct Trial {
    pub step: f64,
    pub x: DVector<f64>,
    pub f: f64,
    /// `f - f0`.
    pub df: f64,
    pub g: DVector<f64>,
    pub slope: f64,
}

/// Minimizer of the cubic interpolating `(a, fa, da)` and `(b, fb, db)`,
/// clamped into the interior of `[min(a,b), max(a,b)]`.
fn cubic_step(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let width = hi - lo;
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    let fallback = 0.5 * (a + b);
    if !(disc >= 0.0) || !disc.is_finite() {
        return fallback;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    if !t.is_finite() {
        return fallback;
    }
    t.clamp(lo + 0.1 * width, hi - 0.1 * width)
}

/// Searches along `dir` from `x` for a step satisfying the strong Wolfe
/// conditions. Returns `None` when no such step was found.
#[allow(clippy::too_many_arguments)]
pub(crate) fn strong_wolfe<P: Problem + ?Sized>(
    problem: &mut P,
    x: &DVector<f64>,
    f0: f64,
    g0: &DVector<f64>,
    dir: &DVector<f64>,
    initial_step: f64,
    c1: f64,
    c2: f64,
) -> Result<Option<Trial>> {
    let slope0 = g0.dot(dir);
    if !(slope0 < 0.0) {
        return Ok(None);
    }
    let mut probe = |step: f64| -> Result<Trial> {
        let xt = x + dir * step;
        let (f, g) = problem.value_and_gradient(&xt)?;
        let df = if f.is_finite() {
            problem.difference(x, dir, step)?.unwrap_or(f - f0)
        } else {
            f64::INFINITY
        };
        let slope = g.dot(dir);
        Ok(Trial {
            step,
            x: xt,
            f,
            df,
            g,
            slope,
        })
    };
    let armijo = |t: &Trial| t.df.is_finite() && t.df <= c1 * t.step * slope0;
    let curvature = |t: &Trial| t.slope.abs() <= -c2 * slope0;

    let mut prev = Trial {
        step: 0.0,
        x: x.clone(),
        f: f0,
        df: 0.0,
        g: g0.clone(),
        slope: slope0,
    };
    let mut step = initial_step;
    for i in 0..MAX_BRACKET {
        let cur = probe(step)?;
        if !armijo(&cur) || (i > 0 && cur.df >= prev.df) {
            return zoom(&mut probe, prev, cur, slope0, c1, c2);
        }
        if curvature(&cur) {
            return Ok(Some(cur));
        }
        if cur.slope >= 0.0 {
            return zoom(&mut probe, cur, prev, slope0, c1, c2);
        }
        step = cur.step * 2.0;
        prev = cur;
    }
    Ok(None)
}

#[allow(clippy::too_many_arguments)]
fn zoom<P>(probe: &mut P, mut lo: Trial, mut hi: Trial, slope0: f64, c1: f64, c2: f64) -> Result<Option<Trial>>
where
    P: FnMut(f64) -> Result<Trial>,
{
    for _ in 0..MAX_ZOOM {
        let step = if hi.df.is_finite() {
            cubic_step(lo.step, lo.df, lo.slope, hi.step, hi.df, hi.slope)
        } else {
            0.5 * (lo.step + hi.step)
        };
        if (hi.step - lo.step).abs() <= f64::EPSILON * lo.step.abs().max(1.0) {
            break;
        }
        let cur = probe(step)?;
        if !(cur.df.is_finite() && cur.df <= c1 * cur.step * slope0) || cur.df >= lo.df {
            hi = cur;
        } else {
            if cur.slope.abs() <= -c2 * slope0 {
                return Ok(Some(cur));
            }
            if cur.slope * (hi.step - lo.step) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_recovers_quadratic_minimum() {
        // f(t) = (t - 0.3)^2 on [0, 1].
        let f = |t: f64| (t - 0.3) * (t - 0.3);
        let df = |t: f64| 2.0 * (t - 0.3);
        let t = cubic_step(0.0, f(0.0), df(0.0), 1.0, f(1.0), df(1.0));
        assert!((t - 0.3).abs() < 1e-12);
    }

    #[test]
    fn finds_wolfe_step_on_quadratic() {
        let mut eval = |x: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
            Ok((0.5 * 10.0 * x[0] * x[0], DVector::from_vec(vec![10.0 * x[0]])))
        };
        let x = DVector::from_vec(vec![1.0]);
        let (f0, g0) = eval(&x).unwrap();
        let dir = -&g0;
        let t = strong_wolfe(&mut eval, &x, f0, &g0, &dir, 1.0, 1e-4, 0.9)
            .unwrap()
            .unwrap();
        let rec = LineSearchRecord {
            iteration: 0,
            step: t.step,
            f0,
            slope0: g0.dot(&dir),
            f_step: t.f,
            f_change: t.df,
            slope_step: t.slope,
        };
        assert!(rec.satisfies_strong_wolfe(1e-4, 0.9));
    }
}
