//! Glue between the planner and the bidding environment: turning actions
//! into feasible plans, rewards, initial plans and input scaling.

use serde::{Deserialize, Serialize};

use crate::domain::{fit_within, BudgetPlan, EpisodeOutcome, PlannerState};
use crate::error::{ensure_dims, Error, Result};

/// Euclidean projection onto `{rho >= 0, sum(rho) <= budget}`.
pub fn project_onto_budget_simplex(raw: &[f64], budget: f64) -> Result<BudgetPlan> {
    if !(budget.is_finite() && budget > 0.0) {
        return Err(Error::invalid(format!("budget must be > 0, got {budget}")));
    }
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("projection input".into()));
    }
    let clipped: Vec<f64> = raw.iter().map(|x| x.max(0.0)).collect();
    if clipped.iter().sum::<f64>() <= budget {
        return BudgetPlan::new(clipped, budget);
    }
    let theta = simplex_threshold(&clipped, budget);
    let projected = clipped.iter().map(|x| (x - theta).max(0.0)).collect();
    BudgetPlan::new(fit_within(projected, budget), budget)
}

/// Shift `theta` such that `sum(max(x - theta, 0)) = total` (sort-based).
fn simplex_threshold(x: &[f64], total: f64) -> f64 {
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - total) / (j + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    theta
}

/// Per-component bound on actions, expressed as a multiple of `B / m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionClamp(pub Option<f64>);

impl Default for ActionClamp {
    fn default() -> Self {
        ActionClamp(Some(1.0))
    }
}

/// `rho^t = Proj(rho^{t-1} + a_t)`, with the action optionally clamped to
/// `[-c B/m, c B/m]` first.
pub fn apply_action(prev: &BudgetPlan, action: &[f64], budget: f64, clamp: ActionClamp) -> Result<BudgetPlan> {
    ensure_dims(prev.stages(), action.len())?;
    let bound = clamp.0.map(|c| c * budget / prev.stages() as f64);
    let raw: Vec<f64> = prev
        .allocations()
        .iter()
        .zip(action)
        .map(|(rho, a)| match bound {
            Some(b) => rho + a.clamp(-b, b),
            None => rho + a,
        })
        .collect();
    project_onto_budget_simplex(&raw, budget)
}

/// Increase of the episode's total return over the previous episode.
pub fn compute_reward(outcome: &EpisodeOutcome, previous: &EpisodeOutcome) -> Result<f64> {
    ensure_dims(previous.stages(), outcome.stages())?;
    Ok(outcome.total_return() - previous.total_return())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialPlanMode {
    EqualSplit,
    FirstEpisodeConsumption,
}

/// The plan `rho^0` in force before the planner's first adjustment.
pub fn initial_plan(
    mode: InitialPlanMode,
    budget: f64,
    stages: usize,
    first_outcome: Option<&EpisodeOutcome>,
) -> Result<BudgetPlan> {
    match mode {
        InitialPlanMode::EqualSplit => BudgetPlan::equal_split(budget, stages),
        InitialPlanMode::FirstEpisodeConsumption => {
            let outcome = first_outcome
                .ok_or_else(|| Error::invalid("consumption-based initial plan needs the first episode's outcome"))?;
            ensure_dims(stages, outcome.stages())?;
            let spent = outcome.total_cost();
            if spent <= 0.0 {
                return BudgetPlan::equal_split(budget, stages);
            }
            let rho = outcome.costs().iter().map(|c| c / spent * budget).collect();
            BudgetPlan::new(fit_within(rho, budget), budget)
        }
    }
}

/// Planner inputs scaled by `m / B`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedState {
    /// Scaled budget; always equal to `m`.
    pub budget: f64,
    /// One `[rho | R | C]` row of length `3m` per past episode.
    pub entries: Vec<Vec<f64>>,
}

pub fn normalize_state(state: &PlannerState, stages: usize) -> Result<NormalizedState> {
    let scale = stages as f64 / state.budget();
    let entries = state
        .history()
        .iter()
        .map(|e| {
            ensure_dims(stages, e.plan.stages())?;
            Ok(normalized_entry(e.plan.allocations(), e.outcome.returns(), e.outcome.costs(), scale))
        })
        .collect::<Result<_>>()?;
    Ok(NormalizedState { budget: state.budget() * scale, entries })
}

pub(crate) fn normalized_entry(plan: &[f64], returns: &[f64], costs: &[f64], scale: f64) -> Vec<f64> {
    plan.iter().chain(returns).chain(costs).map(|x| x * scale).collect()
}
