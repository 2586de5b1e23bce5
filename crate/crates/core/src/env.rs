//! Episode sources and the stage-by-stage episode runner shared by every
//! planner.

use crate::bidders::AdvertiserBidder;
use crate::domain::{BudgetPlan, EpisodeOutcome, Impression, StageBoundaries};
use crate::error::{ensure_dims, Error, Result};

/// One episode's impression stream and its stage partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    impressions: Vec<Impression>,
    stages: StageBoundaries,
}

impl Episode {
    pub fn new(impressions: Vec<Impression>, stages: StageBoundaries) -> Result<Self> {
        ensure_dims(stages.total(), impressions.len())?;
        Ok(Self { impressions, stages })
    }

    pub fn impressions(&self) -> &[Impression] {
        &self.impressions
    }

    pub fn boundaries(&self) -> &StageBoundaries {
        &self.stages
    }

    pub fn stage_count(&self) -> usize {
        self.stages.stages()
    }

    /// The impressions of every stage, in order.
    pub fn stage_slices(&self) -> Vec<&[Impression]> {
        self.stages.ranges().into_iter().map(|r| &self.impressions[r]).collect()
    }
}

/// Training or held-out evaluation population.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub(crate) fn label(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Eval => 1,
        }
    }
}

/// A single advertiser's environment. Episode `t` must be a pure function
/// of the advertiser and `t`, so different planners see identical streams.
pub trait AdvertiserEnv: Send + Sync {
    fn id(&self) -> &str;
    fn budget(&self) -> f64;
    fn stages(&self) -> usize;
    fn episode(&self, index: usize) -> Result<Episode>;
    /// Stream shown to history-dependent bidders before episode 0.
    fn warmup_episode(&self) -> Result<Episode>;
}

/// Source of advertisers for training and evaluation.
pub trait EnvFactory: Send + Sync {
    fn stages(&self) -> usize;
    /// Episodes per advertiser, including the initial one.
    fn episodes(&self) -> usize;
    fn advertiser(&self, split: Split, index: u64) -> Result<Box<dyn AdvertiserEnv>>;
}

/// Decides each stage's budget as the episode unfolds.
pub trait StageAllocator {
    /// `consumed` is what earlier stages actually paid; `remaining` is the
    /// budget not yet allocated to any stage.
    fn allocate(&mut self, stage: usize, consumed: f64, remaining: f64) -> Result<f64>;
}

/// Replays a precomputed plan.
pub struct PlanAllocator<'a> {
    plan: &'a BudgetPlan,
}

impl<'a> PlanAllocator<'a> {
    pub fn new(plan: &'a BudgetPlan) -> Self {
        Self { plan }
    }
}

impl StageAllocator for PlanAllocator<'_> {
    fn allocate(&mut self, stage: usize, _consumed: f64, _remaining: f64) -> Result<f64> {
        self.plan
            .allocations()
            .get(stage)
            .copied()
            .ok_or(Error::DimensionMismatch { expected: stage + 1, got: self.plan.stages() })
    }
}

/// Runs an episode with per-stage hard caps supplied by `allocator`.
/// Returns the plan that was effectively used and the realized outcome.
pub fn run_planned_episode(
    bidder: &mut AdvertiserBidder,
    episode: &Episode,
    budget: f64,
    allocator: &mut dyn StageAllocator,
) -> Result<(BudgetPlan, EpisodeOutcome)> {
    let slices = episode.stage_slices();
    let mut allocations = Vec::with_capacity(slices.len());
    let mut returns = Vec::with_capacity(slices.len());
    let mut costs = Vec::with_capacity(slices.len());
    let mut consumed = 0.0;
    let mut remaining = budget;
    bidder.begin_episode();
    for (k, stage) in slices.iter().enumerate() {
        let rho = allocator.allocate(k, consumed, remaining)?;
        if !(rho.is_finite() && rho >= 0.0) {
            return Err(Error::invalid(format!("stage {k} allocation {rho} is not a nonnegative number")));
        }
        let rho = rho.min(remaining.max(0.0));
        let out = bidder.run_stage(k, stage, rho)?;
        consumed += out.cost;
        remaining -= rho;
        allocations.push(rho);
        returns.push(out.value);
        costs.push(out.cost);
    }
    bidder.end_episode(episode);
    let plan = BudgetPlan::new(crate::domain::fit_within(allocations, budget), budget)?;
    Ok((plan, EpisodeOutcome::new(returns, costs)?))
}

/// Runs the bidder without a planner, then attributes returns and costs
/// to stages.
pub fn run_vanilla_episode(bidder: &mut AdvertiserBidder, episode: &Episode, budget: f64) -> Result<EpisodeOutcome> {
    bidder.run_unplanned(episode, budget)
}
