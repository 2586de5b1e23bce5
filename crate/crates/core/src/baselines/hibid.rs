//! HiBid'-style planner: a feedforward PPO policy that sets each stage's
//! budget from `(stage, consumed, remaining)` as the episode unfolds.
//!
//! The raw scalar action `u` is squashed to `rho = sigmoid(u) * remaining`,
//! so every allocation stays within what is left. Rewards are stage
//! returns scaled by `m/B`; one rollout covers the stages of one episode.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bidders::{AdvertiserBidder, BidderSpec};
use crate::env::{run_planned_episode, AdvertiserEnv, EnvFactory, Split, StageAllocator};
use crate::error::{ensure_dims, Error, Result};
use crate::nn::layers::{gaussian_log_prob_value, Mlp2};
use crate::nn::{Adam, Checkpoint, ParamId, ParamStore, Tape, Tensor};
use crate::ppo::{metrics_rows, ppo_update, ActorCritic, HeadOutputs, MetricsRow, PpoConfig, Rollout, RolloutStep};
use crate::rng::{self, domain, StreamRng};
use crate::runner::{initial_episode, prepare_bidder, AdvertiserRun, PlannerOptions};

pub const MODEL_NAME: &str = "hibid_prime";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HibidArch {
    pub stages: usize,
    pub hidden: usize,
    pub initial_log_std: f64,
}

impl Default for HibidArch {
    fn default() -> Self {
        Self { stages: 6, hidden: 64, initial_log_std: 0.5f64.ln() }
    }
}

#[derive(Debug, Clone)]
pub struct HibidPolicy {
    arch: HibidArch,
    store: ParamStore,
    mean_head: Mlp2,
    value_head: Mlp2,
    log_std: ParamId,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `rho = sigmoid(u) * remaining`, never negative.
pub fn squash_allocation(raw: f64, remaining: f64) -> f64 {
    sigmoid(raw) * remaining.max(0.0)
}

impl HibidPolicy {
    pub fn new<R: Rng + ?Sized>(arch: HibidArch, rng: &mut R) -> Result<Self> {
        if arch.stages == 0 || arch.hidden == 0 {
            return Err(Error::invalid("network sizes must be >= 1"));
        }
        if !arch.initial_log_std.is_finite() {
            return Err(Error::Config("initial_log_std must be finite".into()));
        }
        let mut store = ParamStore::new();
        let mean_head = Mlp2::new(&mut store, "policy", 3, arch.hidden, 1, rng);
        let value_head = Mlp2::new(&mut store, "value", 3, arch.hidden, 1, rng);
        let log_std = store.add("log_std", Tensor::scalar(arch.initial_log_std));
        Ok(Self { arch, store, mean_head, value_head, log_std })
    }

    pub fn arch(&self) -> &HibidArch {
        &self.arch
    }

    pub fn log_std(&self) -> f64 {
        self.store.get(self.log_std).data()[0]
    }

    /// Scaled state `(i/m, consumed m/B, remaining m/B)`.
    pub fn observation(&self, stage: usize, consumed: f64, remaining: f64, budget: f64) -> Vec<f64> {
        let m = self.arch.stages as f64;
        vec![stage as f64 / m, consumed * m / budget, remaining * m / budget]
    }

    /// Action mean and value for one observation.
    pub fn evaluate(&self, obs: &[f64]) -> Result<(f64, f64)> {
        ensure_dims(3, obs.len())?;
        let mut tape = Tape::new(&self.store);
        let x = tape.input(&Tensor::matrix(1, 3, obs.to_vec())?);
        let mean = self.mean_head.forward(&mut tape, x)?;
        let value = self.value_head.forward(&mut tape, x)?;
        Ok((tape.value(mean)[0], tape.value(value)[0]))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(MODEL_NAME, &self.arch, &self.store)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_model(MODEL_NAME)?;
        let arch: HibidArch = ckpt.meta()?;
        let mut policy = Self::new(arch, &mut rng::stream(0, &[]))?;
        policy.store.load_from(&ckpt.to_store()?)?;
        Ok(policy)
    }
}

impl ActorCritic for HibidPolicy {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn action_dim(&self) -> usize {
        1
    }

    /// Steps are independent, so rollouts of any lengths are flattened.
    fn forward_rollouts(&self, tape: &mut Tape<'_>, rollouts: &[&Rollout]) -> Result<HeadOutputs> {
        let mut rows = Vec::new();
        let mut data = Vec::new();
        for (i, r) in rollouts.iter().enumerate() {
            for (t, s) in r.steps.iter().enumerate() {
                ensure_dims(3, s.obs.len())?;
                data.extend_from_slice(&s.obs);
                rows.push((i, t));
            }
        }
        if rows.is_empty() {
            return Err(Error::invalid("empty rollout batch"));
        }
        let x = tape.input(&Tensor::matrix(rows.len(), 3, data)?);
        let mean = self.mean_head.forward(tape, x)?;
        let value = self.value_head.forward(tape, x)?;
        let log_std = tape.param(self.log_std);
        Ok(HeadOutputs { mean, value, log_std, rows })
    }
}

/// Stage allocator driven by the policy; records each decision.
pub struct HibidAllocator<'a> {
    policy: &'a HibidPolicy,
    budget: f64,
    noise: Option<&'a mut StreamRng>,
    steps: Vec<RolloutStep>,
}

impl<'a> HibidAllocator<'a> {
    pub fn new(policy: &'a HibidPolicy, budget: f64, noise: Option<&'a mut StreamRng>) -> Self {
        Self { policy, budget, noise, steps: Vec::new() }
    }

    /// Decisions so far, with rewards still zero.
    pub fn into_steps(self) -> Vec<RolloutStep> {
        self.steps
    }
}

impl StageAllocator for HibidAllocator<'_> {
    fn allocate(&mut self, stage: usize, consumed: f64, remaining: f64) -> Result<f64> {
        let obs = self.policy.observation(stage, consumed, remaining, self.budget);
        let (mean, value) = self.policy.evaluate(&obs)?;
        let log_std = self.policy.log_std();
        let raw = match self.noise.as_mut() {
            Some(rng) => {
                let z: f64 = StandardNormal.sample(&mut **rng);
                mean + log_std.exp() * z
            }
            None => mean,
        };
        let log_prob = gaussian_log_prob_value(&[mean], log_std, &[raw]);
        self.steps.push(RolloutStep { obs, action: vec![raw], log_prob, value, reward: 0.0 });
        Ok(squash_allocation(raw, remaining))
    }
}

/// One policy-driven episode; the rollout holds one step per stage.
pub fn run_hibid_episode(
    policy: &HibidPolicy,
    bidder: &mut AdvertiserBidder,
    env: &dyn AdvertiserEnv,
    index: usize,
    noise: Option<&mut StreamRng>,
) -> Result<(crate::domain::BudgetPlan, crate::domain::EpisodeOutcome, Rollout)> {
    let budget = env.budget();
    let scale = env.stages() as f64 / budget;
    let mut allocator = HibidAllocator::new(policy, budget, noise);
    let (plan, outcome) = run_planned_episode(bidder, &env.episode(index)?, budget, &mut allocator)?;
    let mut steps = allocator.into_steps();
    for (s, r) in steps.iter_mut().zip(outcome.returns()) {
        s.reward = r * scale;
    }
    Ok((plan, outcome, Rollout { steps }))
}

/// Episode 0 as for every planner, then `steps` policy-driven episodes.
pub fn run_hibid(
    policy: &HibidPolicy,
    env: &dyn AdvertiserEnv,
    bidder: &BidderSpec,
    options: &PlannerOptions,
    steps: usize,
    mut noise: Option<&mut StreamRng>,
) -> Result<(AdvertiserRun, Vec<Rollout>)> {
    ensure_dims(policy.arch.stages, env.stages())?;
    let mut bidder = prepare_bidder(env, bidder)?;
    let first = initial_episode(env, &mut bidder, options.initial_plan)?;
    let mut run = AdvertiserRun::new(env.id(), env.budget());
    run.push(first.plan, first.outcome);
    let mut rollouts = Vec::with_capacity(steps);
    for t in 1..=steps {
        let (plan, outcome, rollout) = run_hibid_episode(policy, &mut bidder, env, t, noise.as_deref_mut())?;
        run.push(plan, outcome);
        rollouts.push(rollout);
    }
    Ok((run, rollouts))
}

pub struct HibidOutcome {
    pub policy: HibidPolicy,
    pub metrics: Vec<MetricsRow>,
}

/// PPO on per-episode stage rollouts collected from training advertisers.
#[allow(clippy::too_many_arguments)]
pub fn train_hibid(
    factory: &dyn EnvFactory,
    bidder: &BidderSpec,
    options: &PlannerOptions,
    arch: HibidArch,
    ppo: &PpoConfig,
    seed: u64,
    on_iteration: &mut dyn FnMut(usize, &[MetricsRow], &HibidPolicy) -> Result<()>,
) -> Result<HibidOutcome> {
    ppo.validate()?;
    ensure_dims(factory.stages(), arch.stages)?;
    let steps = factory
        .episodes()
        .checked_sub(1)
        .filter(|&s| s > 0)
        .ok_or_else(|| Error::Config("training needs at least 2 episodes per advertiser".into()))?;
    let mut policy = HibidPolicy::new(arch, &mut rng::stream(seed, &[domain::INIT]))?;
    let mut opt = Adam::new(policy.params(), ppo.learning_rate);
    let mut metrics = Vec::new();
    for iteration in 0..ppo.iterations {
        let first = (iteration * ppo.trajectories) as u64;
        let frozen = &policy;
        let collected: Vec<(AdvertiserRun, Vec<Rollout>)> = (0..ppo.trajectories as u64)
            .into_par_iter()
            .map(|j| {
                let index = first + j;
                let env = factory.advertiser(Split::Train, index)?;
                let mut noise = rng::stream(seed, &[domain::POLICY, index]);
                run_hibid(frozen, env.as_ref(), bidder, options, steps, Some(&mut noise))
            })
            .collect::<Result<_>>()?;
        let batch: Vec<Rollout> = collected.iter().flat_map(|c| c.1.iter().cloned()).collect();
        let mut shuffle = rng::stream(seed, &[domain::SHUFFLE, iteration as u64]);
        let stats = ppo_update(&mut policy, &mut opt, &batch, ppo, &mut shuffle)?;
        let runs: Vec<&AdvertiserRun> = collected.iter().map(|c| &c.0).collect();
        let rewards: Vec<Vec<f64>> = runs
            .iter()
            .map(|r| r.returns().windows(2).map(|w| w[1] - w[0]).collect())
            .collect();
        let rows = metrics_rows(iteration, &runs, &rewards, &stats);
        on_iteration(iteration, &rows, &policy)?;
        metrics.extend(rows);
    }
    Ok(HibidOutcome { policy, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Impression, StageBoundaries};
    use crate::env::Episode;

    /// Three stages of 100 impressions; only stage 2 carries value, and its
    /// total price is twice the budget.
    struct MiddleStageEnv;

    impl AdvertiserEnv for MiddleStageEnv {
        fn id(&self) -> &str {
            "middle"
        }
        fn budget(&self) -> f64 {
            50.0
        }
        fn stages(&self) -> usize {
            3
        }
        fn episode(&self, _index: usize) -> Result<Episode> {
            let imps = (0..300)
                .map(|i| {
                    let value = if (100..200).contains(&i) { 2.0 } else { 0.0 };
                    Impression::new(i, value, 1.0)
                })
                .collect::<Result<Vec<_>>>()?;
            Episode::new(imps, StageBoundaries::new(vec![100, 100, 100])?)
        }
        fn warmup_episode(&self) -> Result<Episode> {
            self.episode(0)
        }
    }

    struct MiddleFactory;

    impl EnvFactory for MiddleFactory {
        fn stages(&self) -> usize {
            3
        }
        fn episodes(&self) -> usize {
            3
        }
        fn advertiser(&self, _split: Split, _index: u64) -> Result<Box<dyn AdvertiserEnv>> {
            Ok(Box::new(MiddleStageEnv))
        }
    }

    #[test]
    fn zero_remaining_gives_zero() {
        assert_eq!(squash_allocation(5.0, 0.0), 0.0);
        assert_eq!(squash_allocation(-5.0, 0.0), 0.0);
        assert!(squash_allocation(30.0, 7.0) <= 7.0);
    }

    #[test]
    fn plans_never_exceed_the_budget() {
        let policy = HibidPolicy::new(HibidArch { stages: 3, hidden: 8, ..HibidArch::default() }, &mut rng::stream(1, &[])).unwrap();
        let mut noise = rng::stream(2, &[]);
        let (run, rollouts) =
            run_hibid(&policy, &MiddleStageEnv, &BidderSpec::default(), &PlannerOptions::default(), 4, Some(&mut noise)).unwrap();
        assert_eq!(rollouts.len(), 4);
        for plan in &run.plans {
            assert!(plan.total() <= 50.0 + 1e-9);
        }
        assert!(rollouts.iter().all(|r| r.steps.len() == 3));
    }

    #[test]
    fn learns_to_fund_the_only_valuable_stage() {
        let arch = HibidArch { stages: 3, hidden: 16, ..HibidArch::default() };
        let ppo = PpoConfig { trajectories: 16, minibatch: 8, iterations: 60, learning_rate: 3e-3, ..PpoConfig::default() };
        let out = train_hibid(&MiddleFactory, &BidderSpec::default(), &PlannerOptions::default(), arch, &ppo, 3, &mut |_, _, _| Ok(()))
            .unwrap();
        let (run, _) = run_hibid(&out.policy, &MiddleStageEnv, &BidderSpec::default(), &PlannerOptions::default(), 1, None).unwrap();
        let plan = &run.plans[1];
        assert!(plan.allocations()[1] > 0.6 * 50.0, "{:?}", plan.allocations());
    }

    #[test]
    fn checkpoint_round_trip() {
        let policy = HibidPolicy::new(HibidArch::default(), &mut rng::stream(4, &[])).unwrap();
        let back = HibidPolicy::from_checkpoint(&policy.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back.params(), policy.params());
    }
}
