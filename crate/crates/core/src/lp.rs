//! Dense two-phase simplex with Bland's rule, for the small transport LPs
//! used to check duality numerically. Not meant for large problems.

use crate::error::{Error, Result};

const TOL: f64 = 1e-11;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

impl Constraint {
    pub fn new(coeffs: Vec<f64>, relation: Relation, rhs: f64) -> Self {
        Self { coeffs, relation, rhs }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpSolution {
    pub value: f64,
    pub x: Vec<f64>,
}

struct Tableau {
    /// `rows x (cols + 1)`, last column is the right-hand side.
    a: Vec<Vec<f64>>,
    basis: Vec<usize>,
    cols: usize,
}

impl Tableau {
    fn rhs(&self, i: usize) -> f64 {
        self.a[i][self.cols]
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let p = self.a[row][col];
        self.a[row].iter_mut().for_each(|v| *v /= p);
        let pivot_row = self.a[row].clone();
        for (i, r) in self.a.iter_mut().enumerate() {
            if i == row {
                continue;
            }
            let f = r[col];
            if f != 0.0 {
                for (v, pv) in r.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
            }
        }
        self.basis[row] = col;
    }

    /// Maximize `cost . x` over the current basis; columns with
    /// `allowed[j] == false` never enter.
    fn optimize(&mut self, cost: &[f64], allowed: &[bool]) -> Result<()> {
        loop {
            // Bland: lowest-index improving column enters
            let entering = (0..self.cols).find(|&j| {
                allowed[j]
                    && !self.basis.contains(&j)
                    && cost[j] - self.basis.iter().enumerate().map(|(i, &b)| cost[b] * self.a[i][j]).sum::<f64>() > TOL
            });
            let Some(col) = entering else { return Ok(()) };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.a.len() {
                let coef = self.a[i][col];
                if coef > TOL {
                    let ratio = self.rhs(i) / coef;
                    let better = match leave {
                        None => true,
                        Some((r, best)) => {
                            ratio < best - TOL || (ratio <= best + TOL && self.basis[i] < self.basis[r])
                        }
                    };
                    if better {
                        leave = Some((i, ratio));
                    }
                }
            }
            match leave {
                Some((row, _)) => self.pivot(row, col),
                None => return Err(Error::Unbounded),
            }
        }
    }
}

/// Maximize `objective . x` subject to `constraints` and `x >= 0`.
pub fn maximize(objective: &[f64], constraints: &[Constraint]) -> Result<LpSolution> {
    let n = objective.len();
    if let Some(c) = constraints.iter().find(|c| c.coeffs.len() != n) {
        return Err(Error::DimensionMismatch {
            context: "lp constraint",
            expected: n,
            got: c.coeffs.len(),
        });
    }
    // flip rows so every rhs is nonnegative
    let rows: Vec<Constraint> = constraints
        .iter()
        .map(|c| {
            if c.rhs < 0.0 {
                let relation = match c.relation {
                    Relation::Le => Relation::Ge,
                    Relation::Ge => Relation::Le,
                    Relation::Eq => Relation::Eq,
                };
                Constraint::new(c.coeffs.iter().map(|v| -v).collect(), relation, -c.rhs)
            } else {
                c.clone()
            }
        })
        .collect();
    let slacks = rows.iter().filter(|c| c.relation != Relation::Eq).count();
    let artificials = rows.iter().filter(|c| c.relation != Relation::Le).count();
    let cols = n + slacks + artificials;
    let mut a = Vec::with_capacity(rows.len());
    let mut basis = Vec::with_capacity(rows.len());
    let (mut s, mut art) = (n, n + slacks);
    for c in &rows {
        let mut row = vec![0.0; cols + 1];
        row[..n].copy_from_slice(&c.coeffs);
        row[cols] = c.rhs;
        match c.relation {
            Relation::Le => {
                row[s] = 1.0;
                basis.push(s);
                s += 1;
            }
            Relation::Ge => {
                row[s] = -1.0;
                s += 1;
                row[art] = 1.0;
                basis.push(art);
                art += 1;
            }
            Relation::Eq => {
                row[art] = 1.0;
                basis.push(art);
                art += 1;
            }
        }
        a.push(row);
    }
    let mut t = Tableau { a, basis, cols };
    let is_artificial = |j: usize| j >= n + slacks;

    if artificials > 0 {
        let phase1: Vec<f64> = (0..cols).map(|j| if is_artificial(j) { -1.0 } else { 0.0 }).collect();
        t.optimize(&phase1, &vec![true; cols])?;
        let infeas: f64 = t
            .basis
            .iter()
            .enumerate()
            .filter(|(_, &b)| is_artificial(b))
            .map(|(i, _)| t.rhs(i))
            .sum();
        if infeas > 1e-9 {
            return Err(Error::Infeasible {
                message: format!("phase one residual {infeas:e}"),
            });
        }
        // drive zero-level artificials out; drop rows that are redundant
        let mut i = 0;
        while i < t.a.len() {
            if is_artificial(t.basis[i]) {
                match (0..n + slacks).find(|&j| t.a[i][j].abs() > 1e-9) {
                    Some(j) => t.pivot(i, j),
                    None => {
                        t.a.remove(i);
                        t.basis.remove(i);
                        continue;
                    }
                }
            }
            i += 1;
        }
    }

    let mut cost = vec![0.0; cols];
    cost[..n].copy_from_slice(objective);
    let allowed: Vec<bool> = (0..cols).map(|j| !is_artificial(j)).collect();
    t.optimize(&cost, &allowed)?;

    let mut x = vec![0.0; n];
    for (i, &b) in t.basis.iter().enumerate() {
        if b < n {
            x[b] = t.rhs(i);
        }
    }
    let value = objective.iter().zip(&x).map(|(c, v)| c * v).sum();
    Ok(LpSolution { value, x })
}
