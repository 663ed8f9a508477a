//! Data-dependent robustness certificates and finite-support duality oracles.
//!
//! The certificate is the line `rho -> gamma * rho + mean_surrogate`; it bounds
//! the worst-case loss over every Wasserstein ball around the empirical
//! distribution. The statistical error term is not computed.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inner::{self, InnerSolverConfig, SurrogateResult};
use crate::lp::{self, Constraint, Relation};
use crate::model::{Sample, SmoothNet};
use crate::transport::TransportCost;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub gamma: f64,
    /// Empirical mean of the robust surrogate.
    pub mean_surrogate: f64,
    /// Mean transport cost to the empirical maximizers.
    pub rho_hat: f64,
    /// Mean loss at the transported points.
    pub mean_transported_loss: f64,
    /// `(rho, gamma * rho + mean_surrogate)`, sorted by `rho`.
    pub curve: Vec<(f64, f64)>,
    /// Samples whose inner solve hit an overflow and stayed put.
    pub degenerate: usize,
}

impl Certificate {
    pub fn bound(&self, rho: f64) -> f64 {
        self.gamma * rho + self.mean_surrogate
    }

    /// The bound at `rho_hat`, which is the worst-case loss at that radius.
    pub fn tight_value(&self) -> f64 {
        self.bound(self.rho_hat)
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("gamma must be positive and finite, got {gamma}")))
    }
}

/// Certificate for `model` on `data` at penalty `gamma`.
pub fn certificate(
    model: &SmoothNet,
    data: &[Sample],
    gamma: f64,
    cost: &TransportCost,
    rho_grid: &[f64],
    cfg: &InnerSolverConfig,
) -> Result<Certificate> {
    check_gamma(gamma)?;
    if data.is_empty() {
        return Err(Error::EmptyInput { context: "certificate" });
    }
    if let Some(r) = rho_grid.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
        return Err(Error::config(format!("rho grid entries must be finite and >= 0, got {r}")));
    }
    let results = inner::batch_surrogate(model, data, gamma, cost, cfg)?;
    Ok(from_results(&results, gamma, rho_grid))
}

/// Assemble a certificate from precomputed inner solves.
pub fn from_results(results: &[SurrogateResult], gamma: f64, rho_grid: &[f64]) -> Certificate {
    let mean_surrogate = inner::mean_of(results, |r| r.phi_value);
    let rho_hat = inner::mean_of(results, |r| r.transport_cost);
    let mean_transported_loss = inner::mean_of(results, |r| r.raw_loss);
    let mut rhos: Vec<f64> = rho_grid.to_vec();
    rhos.push(rho_hat);
    rhos.sort_by(f64::total_cmp);
    rhos.dedup();
    Certificate {
        gamma,
        mean_surrogate,
        rho_hat,
        mean_transported_loss,
        curve: rhos.into_iter().map(|r| (r, gamma * r + mean_surrogate)).collect(),
        degenerate: results.iter().filter(|r| r.degenerate).count(),
    }
}

/// One point of the held-out worst-case curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorstCase {
    pub gamma_adv: f64,
    pub rho_test: f64,
    /// `mean phi + gamma_adv * rho_test`.
    pub worst_value: f64,
    pub degenerate: usize,
}

/// Attack every test point at penalty `gamma_adv` and report the mean
/// transport distance and the mean loss reached.
pub fn test_worst_case(
    model: &SmoothNet,
    test_data: &[Sample],
    gamma_adv: f64,
    cost: &TransportCost,
    cfg: &InnerSolverConfig,
) -> Result<WorstCase> {
    check_gamma(gamma_adv)?;
    if test_data.is_empty() {
        return Err(Error::EmptyInput { context: "test_worst_case" });
    }
    let results = inner::batch_surrogate(model, test_data, gamma_adv, cost, cfg)?;
    let rho_test = inner::mean_of(&results, |r| r.transport_cost);
    let mean_phi = inner::mean_of(&results, |r| r.phi_value);
    Ok(WorstCase {
        gamma_adv,
        rho_test,
        worst_value: mean_phi + gamma_adv * rho_test,
        degenerate: results.iter().filter(|r| r.degenerate).count(),
    })
}

/// A distribution `q` on base points together with losses and transport costs
/// to a finite support. Base point `i` is support point `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteInstance {
    weights: Vec<f64>,
    losses: Vec<f64>,
    /// `costs[i][j] = c(z_i, z_j)`, `n_base x n_support`.
    costs: Vec<Vec<f64>>,
}

impl FiniteInstance {
    pub fn new(weights: Vec<f64>, losses: Vec<f64>, costs: Vec<Vec<f64>>) -> Result<Self> {
        let (n, m) = (weights.len(), losses.len());
        if n == 0 || n > m {
            return Err(Error::config(format!("need 1 <= base points <= support points, got {n} and {m}")));
        }
        if costs.len() != n {
            return Err(Error::DimensionMismatch { context: "cost rows", expected: n, got: costs.len() });
        }
        if let Some(row) = costs.iter().find(|r| r.len() != m) {
            return Err(Error::DimensionMismatch { context: "cost columns", expected: m, got: row.len() });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("weights must be nonnegative and sum to 1"));
        }
        if losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite { context: "instance losses" });
        }
        for (i, row) in costs.iter().enumerate() {
            if row.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
                return Err(Error::config(format!("costs in row {i} must be finite and >= 0")));
            }
            if row[i] != 0.0 {
                return Err(Error::config(format!("cost from base point {i} to itself must be 0")));
            }
        }
        Ok(Self { weights, losses, costs })
    }

    /// Costs induced by `cost` between the first `weights.len()` points and
    /// all of `points`.
    pub fn from_points(points: &[Vec<f64>], weights: Vec<f64>, losses: Vec<f64>, cost: &TransportCost) -> Result<Self> {
        if losses.len() != points.len() {
            return Err(Error::DimensionMismatch { context: "instance losses", expected: points.len(), got: losses.len() });
        }
        let n = weights.len().min(points.len());
        let costs = points[..n]
            .iter()
            .map(|a| points.iter().map(|b| cost.feature_cost(b, a)).collect())
            .collect();
        Self::new(weights, losses, costs)
    }

    /// Random instance: points uniform in `[-1, 1]^2`, squared Euclidean
    /// costs, losses uniform in `[0, 1]`, weights uniform on the simplex.
    pub fn random(n_base: usize, n_support: usize, seed: u64) -> Result<Self> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let points: Vec<Vec<f64>> = (0..n_support)
            .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let losses = (0..n_support).map(|_| rng.random::<f64>()).collect();
        // normalized exponentials are uniform on the simplex
        let e: Vec<f64> = (0..n_base).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let total: f64 = e.iter().sum();
        let weights = e.iter().map(|v| v / total).collect();
        Self::from_points(&points, weights, losses, &TransportCost::SqEuclidean)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn costs(&self) -> &[Vec<f64>] {
        &self.costs
    }

    pub fn n_base(&self) -> usize {
        self.weights.len()
    }

    pub fn n_support(&self) -> usize {
        self.losses.len()
    }

    /// `E_q[loss]`.
    pub fn base_loss(&self) -> f64 {
        self.weights.iter().zip(&self.losses).map(|(q, l)| q * l).sum()
    }
}

/// Worst-case expected loss over distributions within transport budget `rho`
/// of the base distribution, solved exactly as an LP over couplings.
pub fn duality_oracle(inst: &FiniteInstance, rho: f64) -> Result<f64> {
    if rho.is_nan() || rho < 0.0 {
        return Err(Error::Infeasible { message: format!("transport budget {rho} is negative") });
    }
    let (n, m) = (inst.n_base(), inst.n_support());
    let vars = n * m;
    let objective: Vec<f64> = (0..n).flat_map(|_| inst.losses.iter().copied()).collect();
    let mut constraints = Vec::with_capacity(n + 1);
    for i in 0..n {
        let mut row = vec![0.0; vars];
        row[i * m..(i + 1) * m].iter_mut().for_each(|v| *v = 1.0);
        constraints.push(Constraint::new(row, Relation::Eq, inst.weights[i]));
    }
    let budget: Vec<f64> = inst.costs.iter().flatten().copied().collect();
    constraints.push(Constraint::new(budget, Relation::Le, rho));
    Ok(lp::maximize(&objective, &constraints)?.value)
}

/// `sum_i q_i max_j (loss_j - gamma c_ij)`.
pub fn penalty_oracle(inst: &FiniteInstance, gamma: f64) -> f64 {
    inst.weights
        .iter()
        .zip(&inst.costs)
        .map(|(q, row)| {
            q * row
                .iter()
                .zip(&inst.losses)
                .map(|(c, l)| l - gamma * c)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum()
}
