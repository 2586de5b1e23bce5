//! Multi-episode runs for one advertiser: bidder preparation, the initial
//! episode, and the planner-free and fixed-plan references.

use serde::{Deserialize, Serialize};

use crate::bidders::{AdvertiserBidder, BidderSpec};
use crate::domain::{fit_within, BudgetPlan, EpisodeOutcome, HistoryEntry};
use crate::env::{run_planned_episode, run_vanilla_episode, AdvertiserEnv, PlanAllocator};
use crate::error::{Error, Result};
use crate::hier::{initial_plan, ActionClamp, InitialPlanMode};

/// How a plan-space planner starts and moves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerOptions {
    pub initial_plan: InitialPlanMode,
    /// Bound on each action component in units of `B / m`; `None` disables it.
    pub action_clamp: Option<f64>,
}

impl Default for PlannerOptions {
    fn default() -> Self {
        Self { initial_plan: InitialPlanMode::FirstEpisodeConsumption, action_clamp: ActionClamp::default().0 }
    }
}

impl PlannerOptions {
    /// An infinite bound behaves like no bound.
    pub fn clamp(&self) -> ActionClamp {
        ActionClamp(self.action_clamp.filter(|c| c.is_finite()))
    }

    pub fn validate(&self) -> Result<()> {
        match self.action_clamp {
            Some(c) if !(c > 0.0) => Err(Error::Config(format!("action_clamp must be > 0, got {c}"))),
            _ => Ok(()),
        }
    }
}

/// Plans and outcomes of every episode of one advertiser.
///
/// For planner-free runs the recorded plan is the realized per-stage spend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvertiserRun {
    pub advertiser: String,
    pub budget: f64,
    pub plans: Vec<BudgetPlan>,
    pub outcomes: Vec<EpisodeOutcome>,
}

impl AdvertiserRun {
    pub fn new(advertiser: &str, budget: f64) -> Self {
        Self { advertiser: advertiser.to_string(), budget, plans: Vec::new(), outcomes: Vec::new() }
    }

    pub fn push(&mut self, plan: BudgetPlan, outcome: EpisodeOutcome) {
        self.plans.push(plan);
        self.outcomes.push(outcome);
    }

    pub fn episodes(&self) -> usize {
        self.outcomes.len()
    }

    /// Total return per episode index.
    pub fn returns(&self) -> Vec<f64> {
        self.outcomes.iter().map(EpisodeOutcome::total_return).collect()
    }

    pub fn history(&self) -> Vec<HistoryEntry> {
        self.plans
            .iter()
            .zip(&self.outcomes)
            .map(|(plan, outcome)| HistoryEntry { plan: plan.clone(), outcome: outcome.clone() })
            .collect()
    }
}

/// A fresh bidder for `env`, warmed up if its kind needs history.
pub fn prepare_bidder(env: &dyn AdvertiserEnv, spec: &BidderSpec) -> Result<AdvertiserBidder> {
    let mut bidder = AdvertiserBidder::new(*spec)?;
    if spec.needs_warmup() {
        bidder.warm_up(&env.warmup_episode()?, env.budget())?;
    }
    Ok(bidder)
}

/// Realized spend as a plan (clipped to the budget for float safety).
pub fn consumption_plan(outcome: &EpisodeOutcome, budget: f64) -> Result<BudgetPlan> {
    BudgetPlan::new(fit_within(outcome.costs().to_vec(), budget), budget)
}

/// Episode 0: the plan `rho^0` and its outcome.
///
/// With consumption-based initialization the bidder runs unplanned and
/// `rho^0` is its spend rescaled to `B`; otherwise `rho^0` is the equal
/// split and the bidder runs under it.
pub fn initial_episode(
    env: &dyn AdvertiserEnv,
    bidder: &mut AdvertiserBidder,
    mode: InitialPlanMode,
) -> Result<HistoryEntry> {
    let budget = env.budget();
    let episode = env.episode(0)?;
    match mode {
        InitialPlanMode::EqualSplit => {
            let plan = initial_plan(mode, budget, env.stages(), None)?;
            let (_, outcome) = run_planned_episode(bidder, &episode, budget, &mut PlanAllocator::new(&plan))?;
            Ok(HistoryEntry { plan, outcome })
        }
        InitialPlanMode::FirstEpisodeConsumption => {
            let outcome = run_vanilla_episode(bidder, &episode, budget)?;
            let plan = initial_plan(mode, budget, env.stages(), Some(&outcome))?;
            Ok(HistoryEntry { plan, outcome })
        }
    }
}

/// The bidder alone for `episodes` episodes.
pub fn run_vanilla(env: &dyn AdvertiserEnv, spec: &BidderSpec, episodes: usize) -> Result<AdvertiserRun> {
    let mut bidder = prepare_bidder(env, spec)?;
    let mut run = AdvertiserRun::new(env.id(), env.budget());
    for t in 0..episodes {
        let outcome = run_vanilla_episode(&mut bidder, &env.episode(t)?, env.budget())?;
        run.push(consumption_plan(&outcome, env.budget())?, outcome);
    }
    Ok(run)
}

/// The same plan in every episode.
pub fn run_fixed_plan(env: &dyn AdvertiserEnv, spec: &BidderSpec, plan: &BudgetPlan, episodes: usize) -> Result<AdvertiserRun> {
    let mut bidder = prepare_bidder(env, spec)?;
    let mut run = AdvertiserRun::new(env.id(), env.budget());
    for t in 0..episodes {
        let (used, outcome) = run_planned_episode(&mut bidder, &env.episode(t)?, env.budget(), &mut PlanAllocator::new(plan))?;
        run.push(used, outcome);
    }
    Ok(run)
}
