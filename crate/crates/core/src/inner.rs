//! Inner maximization of the robust surrogate.
//!
//! For a model `theta`, a natural point `z0` and a penalty `gamma > 0`, the
//! surrogate is
//!
//! ```text
//! phi_gamma(theta; z0) = sup_z  loss(theta; z) - gamma * c(z, z0)
//! ```
//!
//! and its maximizer is the transport map `T_gamma(theta; z0)`. Labels are
//! held fixed; only features move.
//!
//! Smooth costs use gradient ascent started at `z0` with stepsizes
//! `eta0 / sqrt(t)`. A step that lowers the objective (or overflows) is
//! rejected and all later stepsizes are halved, so the objective trace is
//! non-decreasing and `phi >= loss(z0)` always holds.
//!
//! The squared sup-norm cost has no useful gradient and goes through
//! [`proximal_ascent`], which alternates a gradient step on the loss with the
//! closed-form proximal map of `(alpha * lambda / 2) ||. - z0||_inf^2`
//! computed by [`prox_sup_norm`].

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Sample, SmoothNet};
use crate::transport::TransportCost;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InnerSolverConfig {
    /// Number of ascent steps.
    pub steps: usize,
    /// Base stepsize; step `t` (1-based) uses `eta0 / sqrt(t)`.
    pub eta0: f64,
    /// Stop once the ascent direction has norm `<= tol`.
    pub tol: f64,
}

impl Default for InnerSolverConfig {
    fn default() -> Self {
        Self {
            steps: 15,
            eta0: 1.0,
            tol: 0.0,
        }
    }
}

impl InnerSolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("inner.steps must be >= 1"));
        }
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(Error::config("inner.eta0 must be a positive finite number"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::config("inner.tol must be >= 0"));
        }
        Ok(())
    }

    fn stepsize(&self, t: usize) -> f64 {
        self.eta0 / (t as f64).sqrt()
    }
}

/// Output of an inner maximization.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateResult {
    pub z0: Sample,
    /// Approximate transport map `T_gamma(theta; z0)`.
    pub z_hat: Sample,
    /// `raw_loss - gamma * transport_cost`.
    pub phi_value: f64,
    /// `c(z_hat, z0)`.
    pub transport_cost: f64,
    /// `loss(theta; z_hat)`.
    pub raw_loss: f64,
    /// Objective value at the start and after every step.
    pub trace: Vec<f64>,
    /// An overflow was hit and the solver could not leave `z0`.
    pub degenerate: bool,
}

impl SurrogateResult {
    fn at(z0: &Sample, z_hat: Vec<f64>, raw_loss: f64, transport_cost: f64, gamma: f64, trace: Vec<f64>, degenerate: bool) -> Self {
        Self {
            z0: z0.clone(),
            z_hat: z0.with_x(z_hat),
            phi_value: raw_loss - gamma * transport_cost,
            transport_cost,
            raw_loss,
            trace,
            degenerate,
        }
    }

    /// `||z_hat - z0||_inf` on features.
    pub fn linf_displacement(&self) -> f64 {
        self.z_hat
            .x
            .iter()
            .zip(&self.z0.x)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("gamma must be positive and finite, got {gamma}")))
    }
}

/// Loss at `x`, mapping overflow to `None` and propagating real errors.
fn try_loss(model: &SmoothNet, z0: &Sample, x: &[f64]) -> Result<Option<(f64, Vec<f64>)>> {
    match model.loss_and_grads(&z0.with_x(x.to_vec()), false, true) {
        Ok((l, _, g)) => Ok(Some((l, g.unwrap()))),
        Err(Error::NonFinite { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Gradient ascent on `x -> loss(x) - gamma * c(x, x0)` for smooth costs.
pub fn surrogate_maximize(
    model: &SmoothNet,
    z0: &Sample,
    gamma: f64,
    cost: &TransportCost,
    cfg: &InnerSolverConfig,
) -> Result<SurrogateResult> {
    check_gamma(gamma)?;
    cfg.validate()?;
    if !cost.is_smooth() {
        return Err(Error::UnsupportedSmoothGradient { kind: cost.to_string() });
    }
    let base = cost.base();
    let (mut loss, mut grad) = model
        .loss_and_grads(z0, false, true)
        .map(|(l, _, g)| (l, g.unwrap()))?;
    let mut x = z0.x.clone();
    let mut c = 0.0;
    let mut obj = loss;
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    trace.push(obj);
    let mut scale = 1.0;
    let mut overflowed = false;

    for t in 1..=cfg.steps {
        let cost_grad = base.grad_first(&z0.with_x(x.clone()), z0)?;
        let dir: Vec<f64> = grad.iter().zip(&cost_grad).map(|(g, cg)| g - gamma * cg).collect();
        let dir_norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        if dir_norm <= cfg.tol {
            break;
        }
        let eta = scale * cfg.stepsize(t);
        let cand: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + eta * d).collect();
        let cand_cost = base.feature_cost(&cand, &z0.x);
        match try_loss(model, z0, &cand)? {
            Some((l, g)) if (l - gamma * cand_cost).is_finite() && l - gamma * cand_cost >= obj => {
                x = cand;
                loss = l;
                grad = g;
                c = cand_cost;
                obj = l - gamma * cand_cost;
            }
            Some(_) => scale *= 0.5,
            None => {
                overflowed = true;
                scale *= 0.5;
            }
        }
        trace.push(obj);
    }
    let degenerate = overflowed && x == z0.x;
    Ok(SurrogateResult::at(z0, x, loss, c, gamma, trace, degenerate))
}

/// Result of one proximal step for the squared sup-norm penalty.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxResult {
    /// Threshold `beta`; entries of `|w - z0|` above it are clipped to it.
    pub beta: f64,
    /// Number of clipped coordinates.
    pub j_star: usize,
    pub z_next: Vec<f64>,
}

/// `argmin_z (alpha_lambda / 2) ||z - z0||_inf^2 + (1/2) ||z - w||_2^2`.
///
/// With `v` the entries of `|w - z0|` sorted in decreasing order, the
/// threshold `beta` solves `sum_{v_i > beta} (v_i - beta) = alpha_lambda * beta`:
///
/// ```text
/// j*   = max { j : sum_{i<j} v_i - (alpha_lambda + j - 1) v_j < 0 }
/// beta = sum_{i<=j*} v_i / (alpha_lambda + j*)
/// ```
///
/// and `z = w - max(|w - z0| - beta, 0) * sign(w - z0)`.
pub fn prox_sup_norm(w: &[f64], z0: &[f64], alpha_lambda: f64) -> Result<ProxResult> {
    if w.len() != z0.len() {
        return Err(Error::DimensionMismatch {
            context: "prox_sup_norm",
            expected: z0.len(),
            got: w.len(),
        });
    }
    if w.iter().chain(z0).any(|v| !v.is_finite()) || !alpha_lambda.is_finite() {
        return Err(Error::NonFinite { context: "prox_sup_norm input" });
    }
    if alpha_lambda < 0.0 {
        return Err(Error::config("alpha_lambda must be >= 0"));
    }
    let diff: Vec<f64> = w.iter().zip(z0).map(|(a, b)| a - b).collect();
    let mut v: Vec<f64> = diff.iter().map(|d| d.abs()).collect();
    // stable, so ties keep index order
    v.sort_by(|a, b| b.total_cmp(a));

    if v.first().is_none_or(|&v1| v1 == 0.0) {
        return Ok(ProxResult {
            beta: 0.0,
            j_star: 0,
            z_next: w.to_vec(),
        });
    }
    let (j_star, beta) = if alpha_lambda == 0.0 {
        (1, v[0])
    } else {
        let mut prefix = 0.0;
        let mut j_star = 1;
        let mut sum_at_j = v[0];
        for (idx, &vj) in v.iter().enumerate() {
            let j = idx + 1;
            if prefix - (alpha_lambda + (j - 1) as f64) * vj < 0.0 {
                j_star = j;
                sum_at_j = prefix + vj;
            }
            prefix += vj;
        }
        (j_star, sum_at_j / (alpha_lambda + j_star as f64))
    };
    let z_next = w
        .iter()
        .zip(&diff)
        .map(|(wi, d)| wi - (d.abs() - beta).max(0.0) * d.signum())
        .collect();
    Ok(ProxResult { beta, j_star, z_next })
}

/// `sum_{v_i > beta} (v_i - beta) - alpha_lambda * beta` for `v = |w - z0|`.
pub fn prox_residual(w: &[f64], z0: &[f64], alpha_lambda: f64, beta: f64) -> f64 {
    w.iter()
        .zip(z0)
        .map(|(a, b)| (a - b).abs())
        .filter(|v| *v > beta)
        .map(|v| v - beta)
        .sum::<f64>()
        - alpha_lambda * beta
}

/// Proximal gradient ascent for `loss(z) - gamma ||x - x0||_inf^2`.
///
/// The penalty is written as `(alpha/2) ||.||_inf^2` with `alpha = 2 gamma`,
/// so each prox call receives `alpha * lambda_t = 2 gamma lambda_t`.
pub fn proximal_ascent(model: &SmoothNet, z0: &Sample, gamma: f64, cfg: &InnerSolverConfig) -> Result<SurrogateResult> {
    check_gamma(gamma)?;
    cfg.validate()?;
    let sup = TransportCost::SqSupNorm;
    let alpha = 2.0 * gamma;

    let (loss0, mut grad) = model
        .loss_and_grads(z0, false, true)
        .map(|(l, _, g)| (l, g.unwrap()))?;
    let mut x = z0.x.clone();
    let mut best = (x.clone(), loss0, 0.0, loss0);
    let mut trace = vec![loss0];
    let mut scale = 1.0;
    let mut overflowed = false;

    for t in 1..=cfg.steps {
        if grad.iter().map(|g| g * g).sum::<f64>().sqrt() <= cfg.tol && x == z0.x {
            break;
        }
        let lambda = scale * cfg.stepsize(t);
        let half: Vec<f64> = x.iter().zip(&grad).map(|(a, g)| a + lambda * g).collect();
        let cand = prox_sup_norm(&half, &z0.x, alpha * lambda)?.z_next;
        match try_loss(model, z0, &cand)? {
            Some((l, g)) => {
                let c = sup.feature_cost(&cand, &z0.x);
                let obj = l - gamma * c;
                let moved = cand != x;
                x = cand;
                grad = g;
                if obj.is_finite() && obj > best.3 {
                    best = (x.clone(), l, c, obj);
                }
                if !moved && grad.iter().map(|g| g * g).sum::<f64>().sqrt() <= cfg.tol {
                    trace.push(best.3);
                    break;
                }
            }
            None => {
                overflowed = true;
                scale *= 0.5;
            }
        }
        trace.push(best.3);
    }
    let (bx, bl, bc, _) = best;
    let degenerate = overflowed && bx == z0.x;
    Ok(SurrogateResult::at(z0, bx, bl, bc, gamma, trace, degenerate))
}

/// Dispatch on the cost: gradient ascent for smooth costs, proximal ascent
/// for the squared sup-norm.
pub fn maximize(
    model: &SmoothNet,
    z0: &Sample,
    gamma: f64,
    cost: &TransportCost,
    cfg: &InnerSolverConfig,
) -> Result<SurrogateResult> {
    if cost.is_smooth() {
        surrogate_maximize(model, z0, gamma, cost, cfg)
    } else {
        proximal_ascent(model, z0, gamma, cfg)
    }
}

/// Per-sample surrogate over a dataset, order preserved.
pub fn batch_surrogate(
    model: &SmoothNet,
    data: &[Sample],
    gamma: f64,
    cost: &TransportCost,
    cfg: &InnerSolverConfig,
) -> Result<Vec<SurrogateResult>> {
    data.par_iter().map(|z| maximize(model, z, gamma, cost, cfg)).collect()
}

/// Mean of a field over a batch of results; 0 for an empty batch.
pub fn mean_of(results: &[SurrogateResult], f: impl Fn(&SurrogateResult) -> f64) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().map(f).sum::<f64>() / results.len() as f64
}
