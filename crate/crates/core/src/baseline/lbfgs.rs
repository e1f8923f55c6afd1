//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::autodiff::tensor::{dot, norm_inf};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iter: usize,
    /// Stop when `‖∇f‖∞` falls below this.
    pub grad_tol: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iter: 500,
            grad_tol: 1e-6,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 30,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterations,
    /// No decrease possible along any tried direction.
    Stalled,
}

#[derive(Clone, Debug)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_inf: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: Termination,
    /// Steps where the line search failed and a steepest-descent step was taken.
    pub fallbacks: usize,
    /// Objective after each accepted iterate (starting point first).
    pub history: Vec<f64>,
}

struct Probe {
    alpha: f64,
    f: f64,
    slope: f64,
    x: Vec<f64>,
    g: Vec<f64>,
}

fn probe<F>(f: &mut F, x: &[f64], d: &[f64], alpha: f64, evals: &mut usize) -> Result<Probe>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let xn: Vec<f64> = x.iter().zip(d).map(|(x, d)| x + alpha * d).collect();
    let (fv, g) = f(&xn)?;
    *evals += 1;
    Ok(Probe {
        alpha,
        f: fv,
        slope: dot(&g, d),
        x: xn,
        g,
    })
}

/// Strong-Wolfe search along `d` (bracketing then zoom by safeguarded
/// cubic interpolation). Returns `None` if no acceptable point was found.
fn line_search<F>(
    f: &mut F,
    x: &[f64],
    fx: f64,
    slope0: f64,
    d: &[f64],
    alpha0: f64,
    cfg: &LbfgsConfig,
    evals: &mut usize,
) -> Result<Option<Probe>>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut prev = Probe {
        alpha: 0.0,
        f: fx,
        slope: slope0,
        x: x.to_vec(),
        g: Vec::new(),
    };
    let mut alpha = alpha0;
    for i in 0..cfg.max_line_search {
        let cur = probe(f, x, d, alpha, evals)?;
        if !cur.f.is_finite() || cur.f > fx + cfg.c1 * alpha * slope0 || (i > 0 && cur.f >= prev.f)
        {
            return zoom(f, x, fx, slope0, d, prev, cur, cfg, evals);
        }
        if cur.slope.abs() <= -cfg.c2 * slope0 {
            return Ok(Some(cur));
        }
        if cur.slope >= 0.0 {
            return zoom(f, x, fx, slope0, d, cur, prev, cfg, evals);
        }
        prev = cur;
        alpha *= 2.0;
    }
    Ok(None)
}

/// Minimizer of the cubic through two points with slopes, safeguarded to the
/// middle of the bracket.
fn interpolate(lo: &Probe, hi: &Probe) -> f64 {
    let (a, b) = (lo.alpha, hi.alpha);
    let d1 = lo.slope + hi.slope - 3.0 * (lo.f - hi.f) / (a - b);
    let disc = d1 * d1 - lo.slope * hi.slope;
    let mut t = 0.5 * (a + b);
    if disc >= 0.0 && hi.f.is_finite() {
        let d2 = (b - a).signum() * disc.sqrt();
        let c = b - (b - a) * (hi.slope + d2 - d1) / (hi.slope - lo.slope + 2.0 * d2);
        if c.is_finite() {
            t = c;
        }
    }
    let (lo_b, hi_b) = (a.min(b), a.max(b));
    let margin = 0.1 * (hi_b - lo_b);
    t.clamp(lo_b + margin, hi_b - margin)
}

#[allow(clippy::too_many_arguments)]
fn zoom<F>(
    f: &mut F,
    x: &[f64],
    fx: f64,
    slope0: f64,
    d: &[f64],
    mut lo: Probe,
    mut hi: Probe,
    cfg: &LbfgsConfig,
    evals: &mut usize,
) -> Result<Option<Probe>>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    for _ in 0..cfg.max_line_search {
        let alpha = interpolate(&lo, &hi);
        let cur = probe(f, x, d, alpha, evals)?;
        if !cur.f.is_finite() || cur.f > fx + cfg.c1 * alpha * slope0 || cur.f >= lo.f {
            hi = cur;
        } else {
            if cur.slope.abs() <= -cfg.c2 * slope0 {
                return Ok(Some(cur));
            }
            if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
        if (hi.alpha - lo.alpha).abs() < 1e-16 * lo.alpha.abs().max(1.0) {
            break;
        }
    }
    // sufficient decrease without the curvature condition is still progress
    if lo.alpha > 0.0 && lo.f < fx {
        return Ok(Some(lo));
    }
    Ok(None)
}

/// Minimizes `f` from `x0`. `f` returns the value and gradient.
pub fn minimize<F>(mut f: F, x0: &[f64], cfg: &LbfgsConfig) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x)?;
    let mut evals = 1;
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.memory);
    let mut history = vec![fx];
    let mut fallbacks = 0;
    let mut status = Termination::MaxIterations;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        if norm_inf(&g) < cfg.grad_tol {
            status = Termination::Converged;
            break;
        }
        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot(s, &d);
            d.iter_mut().zip(y).for_each(|(d, y)| *d -= a * y);
            alphas.push(a);
        }
        if let Some((s, y, _)) = pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            d.iter_mut().zip(s).for_each(|(d, s)| *d += (a - b) * s);
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            pairs.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let alpha0 = if pairs.is_empty() {
            (1.0 / norm_inf(&g)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = line_search(&mut f, &x, fx, slope, &d, alpha0, cfg, &mut evals)?;
        if accepted.is_none() {
            fallbacks += 1;
            pairs.clear();
            let sd: Vec<f64> = g.iter().map(|v| -v).collect();
            let sd_slope = -dot(&g, &g);
            accepted = line_search(
                &mut f,
                &x,
                fx,
                sd_slope,
                &sd,
                (1.0 / norm_inf(&g)).min(1.0),
                cfg,
                &mut evals,
            )?;
        }
        let Some(p) = accepted else {
            status = Termination::Stalled;
            break;
        };
        let s: Vec<f64> = p.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = p.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if pairs.len() == cfg.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        x = p.x;
        fx = p.f;
        g = p.g;
        history.push(fx);
        iterations += 1;
    }
    if status == Termination::MaxIterations && norm_inf(&g) < cfg.grad_tol {
        status = Termination::Converged;
    }
    Ok(LbfgsResult {
        grad_inf: norm_inf(&g),
        x,
        f: fx,
        iterations,
        evaluations: evals,
        status,
        fallbacks,
        history,
    })
}
