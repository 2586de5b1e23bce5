//! Multiple-choice knapsack over per-stage budget bins.
//!
//! The dynamic program runs over stages and keeps the Pareto frontier of
//! (spend, objective) pairs, which is exact for arbitrary real-valued bins.
//! Ties are resolved toward smaller total spend, then toward the
//! lexicographically smallest vector of chosen bin indices.

use crate::domain::{fit_within, BudgetPlan};
use crate::error::{Error, Result};

/// Relative slack when comparing a spend to the budget, absorbing rounding
/// in bin grids such as `B * j / (n - 1)`.
pub const BUDGET_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct MckpSolution {
    /// Chosen bin index per stage.
    pub choices: Vec<usize>,
    pub allocations: Vec<f64>,
    pub objective: f64,
    pub feasible: bool,
}

impl MckpSolution {
    pub fn spend(&self) -> f64 {
        self.allocations.iter().sum()
    }

    pub fn plan(&self, budget: f64) -> Result<BudgetPlan> {
        if !self.feasible {
            return Err(Error::invalid("infeasible knapsack solution has no budget plan"));
        }
        BudgetPlan::new(fit_within(self.allocations.clone(), budget), budget)
    }
}

#[derive(Debug, Clone)]
struct State {
    spend: f64,
    objective: f64,
    choices: Vec<usize>,
}

/// `a` is preferred to `b` under (objective desc, spend asc, choices lex asc).
fn better(a: &State, b: &State) -> bool {
    if a.objective != b.objective {
        return a.objective > b.objective;
    }
    if a.spend != b.spend {
        return a.spend < b.spend;
    }
    a.choices < b.choices
}

fn validate_bins(bins: &[f64]) -> Result<()> {
    if bins.len() < 2 {
        return Err(Error::invalid("need at least 2 bins"));
    }
    if bins.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
        return Err(Error::invalid("bins must be finite and nonnegative"));
    }
    if bins.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("bins must be strictly increasing"));
    }
    Ok(())
}

/// Keeps states not dominated in (lower spend, higher objective).
fn prune(mut states: Vec<State>) -> Vec<State> {
    states.sort_by(|a, b| {
        a.spend
            .total_cmp(&b.spend)
            .then(b.objective.total_cmp(&a.objective))
            .then_with(|| a.choices.cmp(&b.choices))
    });
    let mut kept: Vec<State> = Vec::with_capacity(states.len());
    for s in states {
        match kept.last() {
            Some(last) if last.spend == s.spend => {}
            Some(last) if last.objective >= s.objective => {}
            _ => kept.push(s),
        }
    }
    kept
}

/// Chooses one bin per stage maximizing the summed Q-values subject to the
/// total not exceeding `budget`. Entries of `allowed[i][j] == false` are
/// excluded.
pub(crate) fn solve_masked(q: &[Vec<f64>], bins: &[f64], budget: f64, allowed: Option<&[Vec<bool>]>) -> Result<MckpSolution> {
    validate_bins(bins)?;
    if q.is_empty() {
        return Err(Error::invalid("need at least one stage"));
    }
    for row in q {
        crate::error::ensure_dims(bins.len(), row.len())?;
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("knapsack values".into()));
        }
    }
    if !(budget.is_finite() && budget >= 0.0) {
        return Err(Error::invalid(format!("budget must be >= 0, got {budget}")));
    }
    let cap = budget * (1.0 + BUDGET_TOLERANCE);
    let m = q.len();
    if bins[0] * m as f64 > cap {
        return Ok(MckpSolution {
            choices: vec![0; m],
            allocations: vec![bins[0]; m],
            objective: q.iter().map(|row| row[0]).sum(),
            feasible: false,
        });
    }
    let mut frontier = vec![State { spend: 0.0, objective: 0.0, choices: Vec::new() }];
    for (i, row) in q.iter().enumerate() {
        let mut next = Vec::with_capacity(frontier.len() * bins.len());
        for s in &frontier {
            for (j, (&bin, &value)) in bins.iter().zip(row).enumerate() {
                if allowed.is_some_and(|a| !a[i][j]) {
                    continue;
                }
                let spend = s.spend + bin;
                if spend > cap {
                    break;
                }
                let mut choices = s.choices.clone();
                choices.push(j);
                next.push(State { spend, objective: s.objective + value, choices });
            }
        }
        if next.is_empty() {
            return Err(Error::invalid("no feasible bin combination under the mask"));
        }
        frontier = prune(next);
    }
    let best = frontier
        .into_iter()
        .reduce(|a, b| if better(&b, &a) { b } else { a })
        .expect("frontier is non-empty");
    Ok(MckpSolution {
        allocations: best.choices.iter().map(|&j| bins[j]).collect(),
        choices: best.choices,
        objective: best.objective,
        feasible: true,
    })
}

/// Exact multiple-choice knapsack over a `m x n_b` value matrix.
///
/// If even the smallest bin in every stage exceeds `budget`, returns the
/// all-smallest choice flagged infeasible.
pub fn solve_mckp(q: &[Vec<f64>], bins: &[f64], budget: f64) -> Result<MckpSolution> {
    solve_masked(q, bins, budget, None)
}

/// `n` evenly spaced bins spanning `[0, budget]`.
pub fn bin_grid(budget: f64, n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::invalid("need at least 2 bins"));
    }
    Ok((0..n).map(|j| budget * j as f64 / (n - 1) as f64).collect())
}

/// Index of the bin closest to `rho` (lower index on ties).
pub fn nearest_bin(bins: &[f64], rho: f64) -> usize {
    let mut best = 0;
    for (j, b) in bins.iter().enumerate() {
        if (b - rho).abs() < (bins[best] - rho).abs() {
            best = j;
        }
    }
    best
}
