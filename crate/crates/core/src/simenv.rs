//! Synthetic impression environment.
//!
//! An advertiser has a budget `B ~ U[budget_low, budget_high]` and a context
//! `(c1, c2) ~ U[0,1]^2`. Within an episode of `n` impressions the price of
//! impression `i` is log-normal and its value-per-price ratio is Pareto with
//! shape `3 + c2 * cos(2*pi*i/n - c1)`, so ratios peak mid-episode.

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::bidders::AdvertiserBidder;
use crate::domain::{Advertiser, BudgetPlan, Context, EpisodeOutcome, Impression, StageBoundaries};
use crate::env::{self, AdvertiserEnv, EnvFactory, Episode, PlanAllocator, Split};
use crate::error::{Error, Result};
use crate::rng::{self, domain};

/// Log-space location/scale of impression prices.
pub const PRICE_LOG_MEAN: f64 = 0.1;
pub const PRICE_LOG_STD: f64 = 0.1;
/// Log-space location/scale of the unnormalized stage-length weights.
pub const STAGE_WEIGHT_LOG_MEAN: f64 = 1.0;
pub const STAGE_WEIGHT_LOG_STD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Impressions per episode.
    pub impressions: usize,
    pub stages: usize,
    /// Episodes per advertiser, including the initial unplanned episode.
    pub episodes: usize,
    pub budget_low: f64,
    pub budget_high: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            impressions: 6000,
            stages: 6,
            episodes: 8,
            budget_low: 100.0,
            budget_high: 200.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.impressions < self.stages {
            return Err(Error::Config(format!(
                "need impressions >= stages >= 1, got impressions={} stages={}",
                self.impressions, self.stages
            )));
        }
        if self.episodes == 0 {
            return Err(Error::Config("episodes must be >= 1".into()));
        }
        if !(self.budget_low > 0.0 && self.budget_low <= self.budget_high && self.budget_high.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < budget_low <= budget_high, got {} and {}",
                self.budget_low, self.budget_high
            )));
        }
        Ok(())
    }
}

pub fn sample_advertiser<R: Rng + ?Sized>(config: &SimConfig, rng: &mut R) -> Result<Advertiser> {
    let budget = if config.budget_low == config.budget_high {
        config.budget_low
    } else {
        rng.random_range(config.budget_low..=config.budget_high)
    };
    let context = Context {
        c1: rng.random::<f64>(),
        c2: rng.random::<f64>(),
    };
    let id = format!("sim-{:016x}", rng.random::<u64>());
    Advertiser::new(id, budget, context)
}

/// Pareto shape of impression `index` (1-based) out of `n`.
pub fn pareto_shape(context: Context, index: usize, n: usize) -> f64 {
    let phase = std::f64::consts::TAU * index as f64 / n as f64 - context.c1;
    3.0 + context.c2 * phase.cos()
}

/// Draws one episode's impression stream.
pub fn generate_impressions<R: Rng + ?Sized>(
    advertiser: &Advertiser,
    config: &SimConfig,
    rng: &mut R,
) -> Result<Vec<Impression>> {
    let n = config.impressions;
    let price_dist = LogNormal::new(PRICE_LOG_MEAN, PRICE_LOG_STD).expect("valid log-normal");
    let context = advertiser.context();
    (1..=n)
        .map(|i| {
            let price = price_dist.sample(rng);
            let shape = pareto_shape(context, i, n);
            // Inverse CDF of Pareto(scale 1): u in (0, 1].
            let u = 1.0 - rng.random::<f64>();
            let ratio = u.powf(-1.0 / shape);
            Impression::new(i, ratio * price, price)
        })
        .collect()
}

/// Splits `n` impressions into `m` stages with log-normal relative lengths.
pub fn partition_stages<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Result<StageBoundaries> {
    if m == 0 || n < m {
        return Err(Error::invalid(format!("cannot split {n} impressions into {m} stages")));
    }
    let dist = LogNormal::new(STAGE_WEIGHT_LOG_MEAN, STAGE_WEIGHT_LOG_STD).expect("valid log-normal");
    let weights: Vec<f64> = (0..m).map(|_| dist.sample(rng)).collect();
    Ok(StageBoundaries::new(largest_remainder(n, &weights))
        .expect("largest remainder yields positive lengths"))
}

/// Integer lengths proportional to `weights`, summing to `n`, each >= 1.
pub(crate) fn largest_remainder(n: usize, weights: &[f64]) -> Vec<usize> {
    let m = weights.len();
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut lengths: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = lengths.iter().sum();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        lengths[k] += 1;
    }
    while let Some(empty) = lengths.iter().position(|&l| l == 0) {
        let largest = (0..m).max_by_key(|&k| (lengths[k], std::cmp::Reverse(k))).expect("m >= 1");
        lengths[largest] -= 1;
        lengths[empty] += 1;
    }
    lengths
}

/// Draws a fresh episode for `advertiser`.
pub fn generate_episode<R: Rng + ?Sized>(
    advertiser: &Advertiser,
    config: &SimConfig,
    rng: &mut R,
) -> Result<Episode> {
    let impressions = generate_impressions(advertiser, config, rng)?;
    let stages = partition_stages(config.impressions, config.stages, rng)?;
    Episode::new(impressions, stages)
}

/// Generates a fresh episode and runs `bidder` on it under `plan`.
pub fn run_environment_episode<R: Rng + ?Sized>(
    advertiser: &Advertiser,
    plan: &BudgetPlan,
    bidder: &mut AdvertiserBidder,
    config: &SimConfig,
    rng: &mut R,
) -> Result<EpisodeOutcome> {
    if plan.stages() != config.stages {
        return Err(Error::DimensionMismatch {
            expected: config.stages,
            got: plan.stages(),
        });
    }
    let episode = generate_episode(advertiser, config, rng)?;
    let (_, outcome) = env::run_planned_episode(bidder, &episode, advertiser.budget(), &mut PlanAllocator::new(plan))?;
    Ok(outcome)
}

/// One synthetic advertiser whose episode `t` is a pure function of `(key, t)`.
#[derive(Debug, Clone)]
pub struct SimAdvertiserEnv {
    advertiser: Advertiser,
    config: SimConfig,
    key: u64,
}

impl SimAdvertiserEnv {
    pub fn new(advertiser: Advertiser, config: SimConfig, key: u64) -> Self {
        Self { advertiser, config, key }
    }

    pub fn advertiser(&self) -> &Advertiser {
        &self.advertiser
    }
}

impl AdvertiserEnv for SimAdvertiserEnv {
    fn id(&self) -> &str {
        self.advertiser.id()
    }

    fn budget(&self) -> f64 {
        self.advertiser.budget()
    }

    fn stages(&self) -> usize {
        self.config.stages
    }

    fn episode(&self, index: usize) -> Result<Episode> {
        let mut rng = rng::stream(self.key, &[domain::EPISODE, index as u64]);
        generate_episode(&self.advertiser, &self.config, &mut rng)
    }

    fn warmup_episode(&self) -> Result<Episode> {
        let mut rng = rng::stream(self.key, &[domain::WARMUP]);
        generate_episode(&self.advertiser, &self.config, &mut rng)
    }
}

/// Samples synthetic advertisers; train and eval draw from disjoint streams.
#[derive(Debug, Clone)]
pub struct SimFactory {
    config: SimConfig,
}

impl SimFactory {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn sim_advertiser(&self, split: Split, index: u64) -> Result<SimAdvertiserEnv> {
        let key = rng::derive_seed(self.config.seed, &[domain::ADVERTISER, split.label(), index]);
        let mut rng = rng::stream(key, &[]);
        let advertiser = sample_advertiser(&self.config, &mut rng)?;
        Ok(SimAdvertiserEnv::new(advertiser, self.config.clone(), key))
    }
}

impl EnvFactory for SimFactory {
    fn stages(&self) -> usize {
        self.config.stages
    }

    fn episodes(&self) -> usize {
        self.config.episodes
    }

    fn advertiser(&self, split: Split, index: u64) -> Result<Box<dyn AdvertiserEnv>> {
        Ok(Box::new(self.sim_advertiser(split, index)?))
    }
}
