//! First-order minimization with a backtracking line search. Both training
//! criteria run through this: generative fitting minimizes the negated log
//! marginal likelihood, MCE minimizes its soft error count directly.

use nalgebra::DVector;

use crate::error::{MogpError, Result};

/// The line-search contract is fixed; the tag exists so configurations are
/// explicit about it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    GradientDescentBacktracking,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    /// Stop when the relative objective improvement of an accepted step
    /// falls below this.
    pub rel_tolerance: f64,
    /// First trial step length of each run.
    pub initial_step: f64,
    pub method: Method,
    /// Seed for any randomized initialization done by callers; the
    /// optimizer itself is deterministic.
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iters: 200,
            rel_tolerance: 1e-6,
            initial_step: 1.0,
            method: Method::GradientDescentBacktracking,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tolerance > 0.0) {
            return Err(MogpError::Config("rel_tolerance must be > 0".into()));
        }
        if !(self.initial_step > 0.0) {
            return Err(MogpError::Config("initial_step must be > 0".into()));
        }
        Ok(())
    }
}

/// Result of a minimization run. `trace` holds the objective at the initial
/// point and after every accepted step, so it is non-increasing by the
/// line-search contract and has length `iterations + 1`.
#[derive(Debug, Clone)]
pub struct MinimizeOutcome {
    pub x: DVector<f64>,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

/// Minimize `f` from `x0`. The objective is called with `need_grad` telling
/// it whether to bother with the gradient (line-search probes only need the
/// value). Probe evaluations that error are treated as rejected steps, so a
/// wild trial point cannot kill the run; errors at the current iterate
/// propagate.
pub fn minimize<F>(mut f: F, x0: DVector<f64>, cfg: &OptimizerConfig) -> Result<MinimizeOutcome>
where
    F: FnMut(&DVector<f64>, bool) -> Result<(f64, Option<DVector<f64>>)>,
{
    cfg.validate()?;
    let (f0, g0) = f(&x0, true).map_err(|e| e.with_context("initial evaluation"))?;
    if !f0.is_finite() {
        return Err(MogpError::Numerical("objective not finite at the initial point".into()));
    }
    let mut x = x0;
    let mut fx = f0;
    let mut grad = g0.ok_or_else(|| MogpError::Numerical("objective did not return a gradient".into()))?;
    let mut trace = vec![fx];
    let mut step = cfg.initial_step;
    let mut converged = false;

    for iter in 0..cfg.max_iters {
        let gnorm2 = grad.norm_squared();
        if gnorm2 == 0.0 {
            converged = true;
            break;
        }
        let mut accepted = false;
        let mut trial = step;
        for _ in 0..MAX_BACKTRACKS {
            let x_new = &x - trial * &grad;
            match f(&x_new, false) {
                Ok((f_new, _)) if f_new.is_finite() && f_new <= fx - ARMIJO_C1 * trial * gnorm2 => {
                    let (f_chk, g_new) = f(&x_new, true)
                        .map_err(|e| e.with_context(&format!("iteration {iter}")))?;
                    x = x_new;
                    fx = f_chk;
                    grad = g_new.ok_or_else(|| {
                        MogpError::Numerical("objective did not return a gradient".into())
                    })?;
                    trace.push(fx);
                    accepted = true;
                    break;
                }
                // Rejected or failed probe: shrink and retry.
                _ => trial *= 0.5,
            }
        }
        if !accepted {
            // No acceptable step at any scale: stationary for our purposes.
            converged = true;
            break;
        }
        let prev = trace[trace.len() - 2];
        if (prev - fx).abs() <= cfg.rel_tolerance * prev.abs().max(1e-12) {
            converged = true;
            break;
        }
        // Reuse the accepted scale, probing slightly larger next time.
        step = trial * 2.0;
    }

    let iterations = trace.len() - 1;
    Ok(MinimizeOutcome { x, trace, iterations, converged })
}
