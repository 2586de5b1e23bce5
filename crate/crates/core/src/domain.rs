//! Value types shared by every part of the planner stack.
//!
//! All types are immutable once constructed: constructors validate their
//! invariants and fields are only exposed through accessors.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};

/// One auction opportunity within an episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Impression {
    index: usize,
    value: f64,
    price: f64,
}

impl Impression {
    pub fn new(index: usize, value: f64, price: f64) -> Result<Self> {
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::invalid(format!("impression value must be finite and >= 0, got {value}")));
        }
        if !(price.is_finite() && price > 0.0) {
            return Err(Error::invalid(format!("impression price must be finite and > 0, got {price}")));
        }
        if !(value / price).is_finite() {
            return Err(Error::invalid("cost-performance ratio is not finite"));
        }
        Ok(Self { index, value, price })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn price(&self) -> f64 {
        self.price
    }

    /// Value per unit of price.
    pub fn cpr(&self) -> f64 {
        self.value / self.price
    }
}

/// Cost-performance ratio `value / price` of raw numbers.
pub fn cpr(value: f64, price: f64) -> Result<f64> {
    if !(price > 0.0) {
        return Err(Error::invalid(format!("price must be > 0, got {price}")));
    }
    Ok(value / price)
}

/// Latent context of a simulated advertiser.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub c1: f64,
    pub c2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Advertiser {
    id: String,
    budget: f64,
    context: Context,
}

impl Advertiser {
    pub fn new(id: impl Into<String>, budget: f64, context: Context) -> Result<Self> {
        if !(budget.is_finite() && budget > 0.0) {
            return Err(Error::invalid(format!("advertiser budget must be > 0, got {budget}")));
        }
        for (name, c) in [("c1", context.c1), ("c2", context.c2)] {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::invalid(format!("context {name} must lie in [0, 1], got {c}")));
            }
        }
        Ok(Self {
            id: id.into(),
            budget,
            context,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn context(&self) -> Context {
        self.context
    }
}

/// Per-stage budget allocation `rho`, a point of the capped simplex
/// `{rho >= 0, sum(rho) <= budget}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    allocations: Vec<f64>,
    budget: f64,
}

impl BudgetPlan {
    pub fn new(allocations: Vec<f64>, budget: f64) -> Result<Self> {
        if !(budget.is_finite() && budget > 0.0) {
            return Err(Error::invalid(format!("plan budget must be > 0, got {budget}")));
        }
        if allocations.is_empty() {
            return Err(Error::invalid("budget plan needs at least one stage"));
        }
        if let Some(bad) = allocations.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
            return Err(Error::invalid(format!("allocation must be finite and >= 0, got {bad}")));
        }
        let total: f64 = allocations.iter().sum();
        if total > budget {
            return Err(Error::invalid(format!("allocations sum to {total}, exceeding budget {budget}")));
        }
        Ok(Self { allocations, budget })
    }

    /// `budget / m` in every stage.
    pub fn equal_split(budget: f64, stages: usize) -> Result<Self> {
        if stages == 0 {
            return Err(Error::invalid("stage count must be >= 1"));
        }
        let share = budget / stages as f64;
        Self::new(fit_within(vec![share; stages], budget), budget)
    }

    pub fn allocations(&self) -> &[f64] {
        &self.allocations
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn stages(&self) -> usize {
        self.allocations.len()
    }

    pub fn total(&self) -> f64 {
        self.allocations.iter().sum()
    }

    /// Allocations as fractions of the budget.
    pub fn proportions(&self) -> Vec<f64> {
        self.allocations.iter().map(|a| a / self.budget).collect()
    }
}

/// Shrinks a nonnegative vector until its left-to-right float sum is <= `cap`.
pub(crate) fn fit_within(mut xs: Vec<f64>, cap: f64) -> Vec<f64> {
    for _ in 0..8 {
        let total: f64 = xs.iter().sum();
        if total <= cap {
            return xs;
        }
        if total > cap * (1.0 + 1e-12) {
            let scale = cap / total;
            xs.iter_mut().for_each(|x| *x *= scale);
        } else {
            // Rounding residue: take it off the largest entry.
            let excess = total - cap;
            let (idx, _) = xs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .expect("non-empty");
            xs[idx] = (xs[idx] - excess.max(f64::EPSILON * cap)).max(0.0);
        }
    }
    xs
}

/// Lengths of the `m` consecutive stages of an episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageBoundaries {
    lengths: Vec<usize>,
}

impl StageBoundaries {
    /// Every stage must contain at least one impression.
    pub fn new(lengths: Vec<usize>) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::invalid("at least one stage is required"));
        }
        if lengths.contains(&0) {
            return Err(Error::invalid("stage lengths must be >= 1"));
        }
        Ok(Self { lengths })
    }

    /// Empty stages are permitted (replayed logs can have idle hours).
    pub fn allowing_empty(lengths: Vec<usize>) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::invalid("at least one stage is required"));
        }
        Ok(Self { lengths })
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn stages(&self) -> usize {
        self.lengths.len()
    }

    pub fn total(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Half-open index ranges of every stage.
    pub fn ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.lengths
            .iter()
            .map(|&len| {
                let r = start..start + len;
                start += len;
                r
            })
            .collect()
    }
}

/// Realized per-stage returns `R` and costs `C` of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    returns: Vec<f64>,
    costs: Vec<f64>,
}

impl EpisodeOutcome {
    pub fn new(returns: Vec<f64>, costs: Vec<f64>) -> Result<Self> {
        ensure_dims(returns.len(), costs.len())?;
        if returns.is_empty() {
            return Err(Error::invalid("episode outcome needs at least one stage"));
        }
        if returns.iter().chain(&costs).any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::invalid("returns and costs must be finite and >= 0"));
        }
        Ok(Self { returns, costs })
    }

    pub fn zeros(stages: usize) -> Self {
        Self {
            returns: vec![0.0; stages],
            costs: vec![0.0; stages],
        }
    }

    pub fn returns(&self) -> &[f64] {
        &self.returns
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn stages(&self) -> usize {
        self.returns.len()
    }

    pub fn total_return(&self) -> f64 {
        self.returns.iter().sum()
    }

    pub fn total_cost(&self) -> f64 {
        self.costs.iter().sum()
    }
}

/// One past episode: the plan in force and what it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub plan: BudgetPlan,
    pub outcome: EpisodeOutcome,
}

/// Planner observation `(B, rho^{0:t-1}, R^{0:t-1}, C^{0:t-1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerState {
    budget: f64,
    history: Vec<HistoryEntry>,
}

impl PlannerState {
    pub fn new(budget: f64, history: Vec<HistoryEntry>) -> Result<Self> {
        if !(budget.is_finite() && budget > 0.0) {
            return Err(Error::invalid(format!("state budget must be > 0, got {budget}")));
        }
        if let Some(first) = history.first() {
            let m = first.plan.stages();
            for entry in &history {
                ensure_dims(m, entry.plan.stages())?;
                ensure_dims(m, entry.outcome.stages())?;
            }
        }
        Ok(Self { budget, history })
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    pub fn latest(&self) -> Option<&HistoryEntry> {
        self.history.last()
    }

    /// A new state with one more episode appended.
    pub fn extended(&self, entry: HistoryEntry) -> Result<Self> {
        let mut history = self.history.clone();
        history.push(entry);
        Self::new(self.budget, history)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub state: PlannerState,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: PlannerState,
}

/// Successive planner decisions for a single advertiser.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a step; its state must be the previous step's successor.
    pub fn push(&mut self, step: TrajectoryStep) -> Result<()> {
        if !step.reward.is_finite() {
            return Err(Error::NonFinite("trajectory reward".into()));
        }
        if step.next_state.history().len() != step.state.history().len() + 1 {
            return Err(Error::invalid("next state must extend the state by one episode"));
        }
        if let Some(prev) = self.steps.last() {
            if prev.next_state != step.state {
                return Err(Error::invalid("trajectory steps are not contiguous"));
            }
        }
        self.steps.push(step);
        Ok(())
    }

    pub fn steps(&self) -> &[TrajectoryStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cpr_definition() {
        assert_eq!(cpr(2.0, 1.0).unwrap(), 2.0);
        assert_eq!(cpr(0.0, 0.5).unwrap(), 0.0);
        assert_eq!(cpr(1.5, 0.5).unwrap(), 3.0);
        assert!(cpr(1.0, 0.0).is_err());
        assert!(cpr(1.0, -1.0).is_err());
        assert_eq!(Impression::new(1, 1.5, 0.5).unwrap().cpr(), 3.0);
    }

    #[test]
    fn impression_rejects_bad_fields() {
        assert!(Impression::new(0, -1.0, 1.0).is_err());
        assert!(Impression::new(0, 1.0, 0.0).is_err());
        assert!(Impression::new(0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn advertiser_context_bounds() {
        let ok = Context { c1: 0.0, c2: 1.0 };
        assert!(Advertiser::new("a", 100.0, ok).is_ok());
        assert!(Advertiser::new("a", 0.0, ok).is_err());
        assert!(Advertiser::new("a", 1.0, Context { c1: 1.2, c2: 0.0 }).is_err());
    }

    #[test]
    fn plan_rejects_overspend_and_negatives() {
        assert!(BudgetPlan::new(vec![60.0, 50.0], 100.0).is_err());
        assert!(BudgetPlan::new(vec![-1.0, 50.0], 100.0).is_err());
        assert!(BudgetPlan::new(vec![50.0, 50.0], 100.0).is_ok());
        assert!(BudgetPlan::new(vec![], 100.0).is_err());
    }

    #[test]
    fn equal_split_stays_inside_budget() {
        for m in 1..50 {
            for b in [0.1, 1.0, 3.0, 100.0, 123.456, 199.9] {
                let plan = BudgetPlan::equal_split(b, m).unwrap();
                assert!(plan.total() <= b);
                assert!((plan.total() - b).abs() < 1e-9 * b);
            }
        }
    }

    #[test]
    fn stage_ranges_tile_the_episode() {
        let s = StageBoundaries::new(vec![2, 3, 1]).unwrap();
        assert_eq!(s.ranges(), vec![0..2, 2..5, 5..6]);
        assert!(StageBoundaries::new(vec![2, 0]).is_err());
        assert!(StageBoundaries::allowing_empty(vec![2, 0]).is_ok());
    }

    #[test]
    fn outcome_lengths_must_match() {
        assert!(EpisodeOutcome::new(vec![1.0], vec![1.0, 2.0]).is_err());
        assert!(EpisodeOutcome::new(vec![1.0, 0.0], vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn trajectory_requires_contiguous_states() {
        let plan = BudgetPlan::equal_split(10.0, 2).unwrap();
        let entry = HistoryEntry {
            plan,
            outcome: EpisodeOutcome::zeros(2),
        };
        let s0 = PlannerState::new(10.0, vec![entry.clone()]).unwrap();
        let s1 = s0.extended(entry.clone()).unwrap();
        let s2 = s1.extended(entry).unwrap();
        let mut traj = Trajectory::new();
        traj.push(TrajectoryStep {
            state: s0.clone(),
            action: vec![0.0, 0.0],
            reward: 0.0,
            next_state: s1.clone(),
        })
        .unwrap();
        // Skipping a state is rejected.
        assert!(traj
            .push(TrajectoryStep {
                state: s0.clone(),
                action: vec![0.0, 0.0],
                reward: 0.0,
                next_state: s1.clone(),
            })
            .is_err());
        traj.push(TrajectoryStep {
            state: s1,
            action: vec![0.0, 0.0],
            reward: 0.0,
            next_state: s2,
        })
        .unwrap();
        assert_eq!(traj.len(), 2);
    }
}
