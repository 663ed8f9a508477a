//! Test-time perturbations: FGM, IFGM, PGM in the 2- and inf-norms, and the
//! Lagrangian (WRM) attack built on the inner maximizer.
//!
//! All attacks keep the label and the feature dimension. Norm-ball attacks
//! project onto the ball of radius `eps` around the original features
//! (radial rescaling for p = 2, coordinate clipping for p = inf). An optional
//! box (e.g. `[0, 1]` for pixels) is applied after each projection.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inner::{self, InnerSolverConfig, SurrogateResult};
use crate::model::{Sample, SmoothNet};
use crate::transport::TransportCost;

pub const DEFAULT_ADV_STEPS: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Norm {
    #[serde(rename = "2")]
    L2,
    #[serde(rename = "inf")]
    Linf,
}

impl Norm {
    pub fn of(self, v: &[f64]) -> f64 {
        match self {
            Norm::L2 => v.iter().map(|a| a * a).sum::<f64>().sqrt(),
            Norm::Linf => v.iter().map(|a| a.abs()).fold(0.0, f64::max),
        }
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2" | "l2" => Ok(Norm::L2),
            "inf" | "linf" => Ok(Norm::Linf),
            other => Err(Error::config(format!("unsupported norm `{other}` (only 2 and inf)"))),
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::L2 => "2",
            Norm::Linf => "inf",
        })
    }
}

/// `argmax_{||eta||_p <= eps} <g, eta>`; zero gradient gives zero.
pub fn steepest_ascent(g: &[f64], norm: Norm, eps: f64) -> Vec<f64> {
    match norm {
        Norm::L2 => {
            let n = Norm::L2.of(g);
            if n == 0.0 {
                vec![0.0; g.len()]
            } else {
                g.iter().map(|v| eps * v / n).collect()
            }
        }
        Norm::Linf => g
            .iter()
            .map(|v| if *v == 0.0 { 0.0 } else { eps * v.signum() })
            .collect(),
    }
}

/// Projection of `x` onto `{y : ||y - center||_p <= eps}`.
pub fn project_ball(x: &[f64], center: &[f64], norm: Norm, eps: f64) -> Vec<f64> {
    match norm {
        Norm::L2 => {
            let d: Vec<f64> = x.iter().zip(center).map(|(a, c)| a - c).collect();
            let n = Norm::L2.of(&d);
            if n <= eps {
                x.to_vec()
            } else {
                center.iter().zip(&d).map(|(c, di)| c + di * eps / n).collect()
            }
        }
        Norm::Linf => x
            .iter()
            .zip(center)
            .map(|(a, c)| a.clamp(c - eps, c + eps))
            .collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AttackMethod {
    Fgm,
    Ifgm,
    Pgm,
    Wrm,
}

/// A parsed attack description such as `pgm:p=inf,eps=0.1,T=15` or
/// `wrm:gamma=2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub method: AttackMethod,
    pub norm: Norm,
    /// `eps` for norm-ball attacks, `gamma` for WRM.
    pub budget: f64,
    pub steps: usize,
    /// PGM step multiplier; defaults to `2 / steps`.
    pub step_scale: Option<f64>,
    /// Optional box applied after each step.
    pub clip: Option<(f64, f64)>,
}

impl AttackSpec {
    pub fn new(method: AttackMethod, norm: Norm, budget: f64) -> Self {
        Self {
            method,
            norm,
            budget,
            steps: DEFAULT_ADV_STEPS,
            step_scale: None,
            clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.method {
            AttackMethod::Wrm if !(self.budget > 0.0 && self.budget.is_finite()) => {
                Err(Error::config("wrm attack needs gamma > 0"))
            }
            AttackMethod::Fgm | AttackMethod::Ifgm | AttackMethod::Pgm if !(self.budget >= 0.0 && self.budget.is_finite()) => {
                Err(Error::config("attack eps must be >= 0"))
            }
            _ if self.steps == 0 => Err(Error::config("attack T must be >= 1")),
            _ => Ok(()),
        }
    }

    /// Perturb one sample. WRM uses the squared cost matching `norm`, with
    /// labels frozen.
    pub fn perturb(&self, model: &SmoothNet, z: &Sample, inner_cfg: &InnerSolverConfig) -> Result<Sample> {
        let mut out = match self.method {
            AttackMethod::Fgm => fgm(model, z, self.norm, self.budget)?,
            AttackMethod::Ifgm => ifgm(model, z, self.norm, self.budget, self.steps)?,
            AttackMethod::Pgm => pgm(model, z, self.norm, self.budget, self.steps, self.step_scale)?,
            AttackMethod::Wrm => {
                let cost = TransportCost::covariate_shift(match self.norm {
                    Norm::L2 => TransportCost::SqEuclidean,
                    Norm::Linf => TransportCost::SqSupNorm,
                });
                let cfg = InnerSolverConfig {
                    steps: self.steps,
                    ..inner_cfg.clone()
                };
                wrm_attack(model, z, self.budget, &cost, &cfg)?.z_hat
            }
        };
        if let Some((lo, hi)) = self.clip {
            out.x.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        }
        Ok(out)
    }
}

impl FromStr for AttackSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (method, rest) = s.split_once(':').unwrap_or((s, ""));
        let method = match method.trim() {
            "fgm" => AttackMethod::Fgm,
            "ifgm" => AttackMethod::Ifgm,
            "pgm" => AttackMethod::Pgm,
            "wrm" => AttackMethod::Wrm,
            other => return Err(Error::config(format!("unknown attack method `{other}`"))),
        };
        let mut spec = AttackSpec::new(method, Norm::L2, f64::NAN);
        for item in rest.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::config(format!("attack option `{item}` is not key=value")))?;
            let num = || {
                value
                    .parse::<f64>()
                    .map_err(|_| Error::config(format!("attack option {key}: `{value}` is not a number")))
            };
            match (key, method) {
                ("p", _) => spec.norm = value.parse()?,
                ("eps", AttackMethod::Wrm) | ("gamma", AttackMethod::Fgm | AttackMethod::Ifgm | AttackMethod::Pgm) => {
                    return Err(Error::config(format!("`{key}` does not apply to this attack")))
                }
                ("eps" | "gamma", _) => spec.budget = num()?,
                ("T", _) => {
                    spec.steps = value
                        .parse()
                        .map_err(|_| Error::config(format!("attack T: `{value}` is not a count")))?
                }
                ("alpha", AttackMethod::Pgm) => spec.step_scale = Some(num()?),
                ("clip", _) => {
                    let (lo, hi) = value
                        .split_once(':')
                        .ok_or_else(|| Error::config("clip expects lo:hi"))?;
                    let parse = |v: &str| v.parse::<f64>().map_err(|_| Error::config("clip bounds must be numbers"));
                    spec.clip = Some((parse(lo)?, parse(hi)?));
                }
                _ => return Err(Error::config(format!("unknown attack option `{key}`"))),
            }
        }
        if spec.budget.is_nan() {
            return Err(Error::config(match method {
                AttackMethod::Wrm => "wrm attack needs gamma=<value>",
                _ => "attack needs eps=<value>",
            }));
        }
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (name, key) = match self.method {
            AttackMethod::Fgm => ("fgm", "eps"),
            AttackMethod::Ifgm => ("ifgm", "eps"),
            AttackMethod::Pgm => ("pgm", "eps"),
            AttackMethod::Wrm => ("wrm", "gamma"),
        };
        write!(f, "{name}:p={},{key}={},T={}", self.norm, self.budget, self.steps)?;
        if let Some(a) = self.step_scale {
            write!(f, ",alpha={a}")?;
        }
        if let Some((lo, hi)) = self.clip {
            write!(f, ",clip={lo}:{hi}")?;
        }
        Ok(())
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if eps >= 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("eps must be >= 0, got {eps}")))
    }
}

/// One linearized step of size `eps`.
pub fn fgm(model: &SmoothNet, z: &Sample, norm: Norm, eps: f64) -> Result<Sample> {
    check_eps(eps)?;
    let g = model.grad_input(z)?;
    let step = steepest_ascent(&g, norm, eps);
    Ok(z.with_x(z.x.iter().zip(&step).map(|(a, s)| a + s).collect()))
}

/// `steps` FGM steps of size `eps / steps`, re-projected onto the eps-ball
/// around the original features after each step.
pub fn ifgm(model: &SmoothNet, z: &Sample, norm: Norm, eps: f64, steps: usize) -> Result<Sample> {
    check_eps(eps)?;
    if steps == 0 {
        return Err(Error::config("ifgm needs T >= 1"));
    }
    let mut x = z.x.clone();
    for _ in 0..steps {
        let g = model.grad_input(&z.with_x(x.clone()))?;
        let step = steepest_ascent(&g, norm, eps / steps as f64);
        let moved: Vec<f64> = x.iter().zip(&step).map(|(a, s)| a + s).collect();
        x = project_ball(&moved, &z.x, norm, eps);
    }
    Ok(z.with_x(x))
}

/// Projected gradient ascent: `x <- proj(x + alpha * Delta)` with `Delta`
/// the steepest-ascent direction of length `eps` and `alpha` constant
/// (default `2 / steps`). Returns the final iterate.
pub fn pgm(model: &SmoothNet, z: &Sample, norm: Norm, eps: f64, steps: usize, step_scale: Option<f64>) -> Result<Sample> {
    check_eps(eps)?;
    if steps == 0 {
        return Err(Error::config("pgm needs T >= 1"));
    }
    let alpha = step_scale.unwrap_or(2.0 / steps as f64);
    let mut x = z.x.clone();
    for _ in 0..steps {
        let g = model.grad_input(&z.with_x(x.clone()))?;
        let delta = steepest_ascent(&g, norm, eps);
        let moved: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a + alpha * d).collect();
        x = project_ball(&moved, &z.x, norm, eps);
    }
    Ok(z.with_x(x))
}

/// Lagrangian attack: the inner maximizer at penalty `gamma_adv`.
pub fn wrm_attack(
    model: &SmoothNet,
    z: &Sample,
    gamma_adv: f64,
    cost: &TransportCost,
    cfg: &InnerSolverConfig,
) -> Result<SurrogateResult> {
    inner::maximize(model, z, gamma_adv, cost, cfg)
}

/// Norm-ball budget matching a WRM run: `sqrt(mean transport cost)` for
/// p = 2, mean inf-norm displacement for p = inf.
pub fn budget_from_wrm(results: &[SurrogateResult], norm: Norm) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::EmptyInput { context: "budget_from_wrm" });
    }
    let n = results.len() as f64;
    Ok(match norm {
        Norm::L2 => (results.iter().map(|r| r.transport_cost).sum::<f64>() / n).sqrt(),
        Norm::Linf => results.iter().map(SurrogateResult::linf_displacement).sum::<f64>() / n,
    })
}
