//! Empirical curvature of the loss in the input features.
//!
//! The inner maximization `sup_x loss(x) - gamma * c(x, x0)` is strongly
//! concave once `gamma` exceeds the Lipschitz constant `L_zz` of the input
//! gradient. We estimate `L_zz` per sample as the spectral norm of the input
//! Hessian, using power iteration on Hessian-vector products obtained by
//! central differences of [`SmoothNet::grad_input`].
//!
//! Only `L_zz` is estimated. The parameter-side constants are not.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::model::{Sample, SmoothNet};

pub const POWER_ITERATIONS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct SmoothnessEstimate {
    /// Maximum of the per-sample estimates.
    pub lzz: f64,
    pub per_sample: Vec<f64>,
    /// `gamma - per_sample[i] > 0`, present when a `gamma` was supplied.
    pub concave: Vec<bool>,
    pub fraction_concave: f64,
    /// False for ReLU models, whose input Hessian is zero almost everywhere
    /// and says nothing about the kinks.
    pub reliable: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Central-difference Hessian-vector product of the input loss Hessian.
pub fn hessian_vector_product(model: &SmoothNet, z: &Sample, v: &[f64]) -> Result<Vec<f64>> {
    let h = 1e-4 * (1.0 + norm(&z.x));
    let plus: Vec<f64> = z.x.iter().zip(v).map(|(x, d)| x + h * d).collect();
    let minus: Vec<f64> = z.x.iter().zip(v).map(|(x, d)| x - h * d).collect();
    let gp = model.grad_input(&z.with_x(plus))?;
    let gm = model.grad_input(&z.with_x(minus))?;
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
}

/// Spectral-norm estimate of the input Hessian at one sample. Each probe is a
/// power iteration from a different random start; the largest wins.
pub fn sample_curvature(model: &SmoothNet, z: &Sample, probes: usize, seed: u64) -> Result<f64> {
    let m = z.dim();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut best = 0.0f64;
    for _ in 0..probes {
        let mut v: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = norm(&v);
        if n == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= n);
        let mut estimate = 0.0;
        for _ in 0..POWER_ITERATIONS {
            let hv = hessian_vector_product(model, z, &v)?;
            let n = norm(&hv);
            estimate = n;
            if n < 1e-300 {
                break;
            }
            v = hv.into_iter().map(|a| a / n).collect();
        }
        best = best.max(estimate);
    }
    Ok(best)
}

/// Estimate `L_zz` over `samples`; with `gamma`, also flag which samples
/// have a strongly concave inner problem.
pub fn estimate_lzz(
    model: &SmoothNet,
    samples: &[Sample],
    probes: usize,
    gamma: Option<f64>,
) -> Result<SmoothnessEstimate> {
    if probes == 0 {
        return Err(Error::config("estimate_lzz needs at least one probe"));
    }
    let per_sample = samples
        .iter()
        .enumerate()
        .map(|(i, z)| sample_curvature(model, z, probes, i as u64))
        .collect::<Result<Vec<_>>>()?;
    let lzz = per_sample.iter().cloned().fold(0.0, f64::max);
    let concave: Vec<bool> = match gamma {
        Some(g) => per_sample.iter().map(|l| g - l > 0.0).collect(),
        None => Vec::new(),
    };
    let fraction_concave = if concave.is_empty() {
        0.0
    } else {
        concave.iter().filter(|c| **c).count() as f64 / concave.len() as f64
    };
    Ok(SmoothnessEstimate {
        lzz,
        per_sample,
        concave,
        fraction_concave,
        reliable: model.is_smooth(),
    })
}
