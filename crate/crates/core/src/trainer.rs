//! Minibatch stochastic gradient training: ERM, adversarial training on
//! FGM/IFGM/PGM perturbations, and WRM.
//!
//! WRM replaces each sampled point by its approximate transport map and
//! descends along the parameter gradient of the loss there, which is the
//! gradient of the robust surrogate when the inner problem is strongly
//! concave. Minibatches are drawn with replacement from a xoshiro256++
//! stream keyed by the seed, so a run is a pure function of
//! `(model, data, config, cost)`.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, Norm};
use crate::error::{Error, Result};
use crate::inner::{self, InnerSolverConfig};
use crate::model::{Sample, SmoothNet};
use crate::transport::TransportCost;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMethod {
    Erm,
    Fgm,
    Ifgm,
    Pgm,
    Wrm,
}

impl std::str::FromStr for TrainMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "erm" => Ok(TrainMethod::Erm),
            "fgm" => Ok(TrainMethod::Fgm),
            "ifgm" => Ok(TrainMethod::Ifgm),
            "pgm" => Ok(TrainMethod::Pgm),
            "wrm" => Ok(TrainMethod::Wrm),
            other => Err(Error::config(format!("unknown training method `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    /// `alpha_t = alpha`
    Constant,
    /// `alpha_t = alpha / sqrt(t + 1)`
    InvSqrt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: TrainMethod,
    /// Penalty for WRM.
    pub gamma: Option<f64>,
    /// Ball radius for FGM/IFGM/PGM.
    pub eps: Option<f64>,
    /// Norm of the FGM/IFGM/PGM ball.
    pub norm: Norm,
    /// Outer SGD steps.
    pub steps: usize,
    pub stepsize: f64,
    pub schedule: StepSchedule,
    pub batch_size: usize,
    pub seed: u64,
    /// Iterations of IFGM/PGM during training.
    pub adv_steps: usize,
    pub inner: InnerSolverConfig,
}

impl TrainConfig {
    pub fn new(method: TrainMethod) -> Self {
        Self {
            method,
            gamma: None,
            eps: None,
            norm: Norm::L2,
            steps: 1000,
            stepsize: 0.01,
            schedule: StepSchedule::Constant,
            batch_size: 32,
            seed: 0,
            adv_steps: attacks::DEFAULT_ADV_STEPS,
            inner: InnerSolverConfig::default(),
        }
    }

    pub fn wrm(gamma: f64) -> Self {
        Self {
            gamma: Some(gamma),
            ..Self::new(TrainMethod::Wrm)
        }
    }

    pub fn erm() -> Self {
        Self::new(TrainMethod::Erm)
    }

    pub fn adversarial(method: TrainMethod, eps: f64, norm: Norm) -> Self {
        Self {
            eps: Some(eps),
            norm,
            ..Self::new(method)
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.method, self.gamma, self.eps) {
            (TrainMethod::Erm, None, None) => {}
            (TrainMethod::Wrm, Some(g), None) if g > 0.0 && g.is_finite() => {}
            (TrainMethod::Wrm, _, _) => return Err(Error::config("wrm needs gamma > 0 and no eps")),
            (TrainMethod::Fgm | TrainMethod::Ifgm | TrainMethod::Pgm, None, Some(e)) if e >= 0.0 && e.is_finite() => {}
            (TrainMethod::Erm, _, _) => return Err(Error::config("erm takes neither gamma nor eps")),
            _ => return Err(Error::config("fgm/ifgm/pgm need eps >= 0 and no gamma")),
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.adv_steps == 0 {
            return Err(Error::config("adv_steps must be >= 1"));
        }
        if !(self.stepsize > 0.0 && self.stepsize.is_finite()) {
            return Err(Error::config("stepsize must be > 0"));
        }
        self.inner.validate()
    }

    fn alpha(&self, t: usize) -> f64 {
        match self.schedule {
            StepSchedule::Constant => self.stepsize,
            StepSchedule::InvSqrt => self.stepsize / ((t + 1) as f64).sqrt(),
        }
    }
}

/// Constant stepsize `sqrt(2 Delta_F / (L_phi sigma^2 T))` from the
/// nonconvex SGD rate, for callers that have estimates of the constants.
pub fn theory_stepsize(delta_f: f64, l_phi: f64, sigma2: f64, steps: usize) -> f64 {
    (2.0 * delta_f / (l_phi * sigma2 * steps as f64)).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean loss at the training points actually used (surrogate for WRM).
    pub surrogate: f64,
    /// Mean loss at the natural points.
    pub raw: f64,
    /// Mean transport cost of the perturbations (`||dx||_2^2` for norm-ball methods).
    pub rho: f64,
    /// Mean squared norm of the minibatch gradient.
    pub grad_norm_sq: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Squared minibatch gradient norm at every step.
    pub step_grad_norm_sq: Vec<f64>,
    pub steps_per_epoch: usize,
}

impl TrainReport {
    /// CSV with header `epoch,surrogate,raw,rho,gradnorm`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,surrogate,raw,rho,gradnorm\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.surrogate, e.raw, e.rho, e.grad_norm_sq
            ));
        }
        out
    }
}

/// Per-sample contribution of one training step.
struct PointStep {
    used_loss: f64,
    clean_loss: f64,
    rho: f64,
    grad: Vec<f64>,
}

fn point_step(model: &SmoothNet, z: &Sample, cfg: &TrainConfig, cost: &TransportCost) -> Result<PointStep> {
    let sq_dist = |a: &Sample| a.x.iter().zip(&z.x).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
    let (target, clean_loss, rho) = match cfg.method {
        TrainMethod::Erm => (z.clone(), None, 0.0),
        TrainMethod::Wrm => {
            let r = inner::maximize(model, z, cfg.gamma.unwrap(), cost, &cfg.inner)?;
            let clean = r.trace[0];
            let rho = r.transport_cost;
            (r.z_hat, Some(clean), rho)
        }
        TrainMethod::Fgm => {
            let a = attacks::fgm(model, z, cfg.norm, cfg.eps.unwrap())?;
            let d = sq_dist(&a);
            (a, None, d)
        }
        TrainMethod::Ifgm => {
            let a = attacks::ifgm(model, z, cfg.norm, cfg.eps.unwrap(), cfg.adv_steps)?;
            let d = sq_dist(&a);
            (a, None, d)
        }
        TrainMethod::Pgm => {
            let a = attacks::pgm(model, z, cfg.norm, cfg.eps.unwrap(), cfg.adv_steps, None)?;
            let d = sq_dist(&a);
            (a, None, d)
        }
    };
    let (used_loss, grad, _) = model.loss_and_grads(&target, true, false)?;
    let clean_loss = match clean_loss {
        Some(l) => l,
        None if target == *z => used_loss,
        None => model.loss(z)?,
    };
    let used_loss = match cfg.method {
        TrainMethod::Wrm => used_loss - cfg.gamma.unwrap() * rho,
        _ => used_loss,
    };
    Ok(PointStep {
        used_loss,
        clean_loss,
        rho,
        grad: grad.unwrap(),
    })
}

fn check_data(model: &SmoothNet, data: &[Sample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyInput { context: "training data" });
    }
    if let Some(z) = data.iter().find(|z| z.dim() != model.input_dim()) {
        return Err(Error::DimensionMismatch {
            context: "training data",
            expected: model.input_dim(),
            got: z.dim(),
        });
    }
    Ok(())
}

#[derive(Default)]
struct EpochAccumulator {
    surrogate: f64,
    raw: f64,
    rho: f64,
    grad: f64,
    points: usize,
    steps: usize,
}

impl EpochAccumulator {
    fn finish(&mut self, epoch: usize) -> EpochStats {
        let acc = std::mem::take(self);
        let p = acc.points.max(1) as f64;
        EpochStats {
            epoch,
            surrogate: acc.surrogate / p,
            raw: acc.raw / p,
            rho: acc.rho / p,
            grad_norm_sq: acc.grad / acc.steps.max(1) as f64,
        }
    }
}

/// Train `model` on `data`. On divergence, the error carries the last
/// finite model and the partial report.
pub fn train(model: &SmoothNet, data: &[Sample], cfg: &TrainConfig, cost: &TransportCost) -> Result<(SmoothNet, TrainReport)> {
    cfg.validate()?;
    check_data(model, data)?;
    let mut model = model.clone();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let mut report = TrainReport {
        steps_per_epoch,
        ..Default::default()
    };
    let mut acc = EpochAccumulator::default();

    for t in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let outcome: Result<Vec<PointStep>> = batch
            .par_iter()
            .map(|&i| point_step(&model, &data[i], cfg, cost))
            .collect();
        let points = match outcome {
            Ok(p) => p,
            Err(Error::NonFinite { .. }) => return Err(diverged(t, model, report)),
            Err(e) => return Err(e),
        };

        let mut grad = vec![0.0; model.num_params()];
        for p in &points {
            for (g, v) in grad.iter_mut().zip(&p.grad) {
                *g += v;
            }
            acc.surrogate += p.used_loss;
            acc.raw += p.clean_loss;
            acc.rho += p.rho;
        }
        let inv = 1.0 / points.len() as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        let gn = grad.iter().map(|g| g * g).sum::<f64>();
        if !gn.is_finite() || points.iter().any(|p| !p.used_loss.is_finite()) {
            return Err(diverged(t, model, report));
        }
        acc.points += points.len();
        acc.grad += gn;
        acc.steps += 1;
        report.step_grad_norm_sq.push(gn);

        let before = model.clone();
        model.descend(&grad, cfg.alpha(t)).or_else(|_| Err(diverged(t, before, report.clone())))?;

        if (t + 1) % steps_per_epoch == 0 || t + 1 == cfg.steps {
            let epoch = report.epochs.len();
            report.epochs.push(acc.finish(epoch));
        }
    }
    Ok((model, report))
}

fn diverged(step: usize, last_finite: SmoothNet, report: TrainReport) -> Error {
    Error::Diverged {
        step,
        last_finite: Box::new(last_finite),
        report: Box::new(report),
    }
}

/// Parameter gradient of the surrogate at one point (Danskin: the loss
/// gradient at the inner maximizer).
pub fn surrogate_gradient(
    model: &SmoothNet,
    z: &Sample,
    gamma: f64,
    cost: &TransportCost,
    cfg: &InnerSolverConfig,
) -> Result<Vec<f64>> {
    let r = inner::maximize(model, z, gamma, cost, cfg)?;
    model.grad_theta(&r.z_hat)
}

/// Mean of `||grad phi(z_i) - mean_j grad phi(z_j)||^2`. With
/// `probes >= data.len()` every point is used; otherwise `probes` points are
/// drawn with replacement using `seed`.
pub fn grad_variance_probe(
    model: &SmoothNet,
    data: &[Sample],
    gamma: f64,
    cost: &TransportCost,
    cfg: &InnerSolverConfig,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    check_data(model, data)?;
    let grads: Vec<Vec<f64>> = data
        .par_iter()
        .map(|z| surrogate_gradient(model, z, gamma, cost, cfg))
        .collect::<Result<_>>()?;
    let n = grads.len() as f64;
    let mut mean = vec![0.0; model.num_params()];
    for g in &grads {
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v / n;
        }
    }
    let dev = |g: &Vec<f64>| g.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    if probes >= grads.len() || probes == 0 {
        return Ok(grads.iter().map(dev).sum::<f64>() / n);
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let total: f64 = (0..probes).map(|_| dev(&grads[rng.random_range(0..grads.len())])).sum();
    Ok(total / probes as f64)
}
