//! PPO-clip training of the recurrent planner: trajectory collection,
//! generalized advantage estimation and the clipped update.
//!
//! Collection runs advertisers in parallel against a frozen parameter
//! snapshot; the update is single-writer. Minibatches are formed over whole
//! trajectories because the recurrent encoder replays history in order.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bidders::BidderSpec;
use crate::domain::{HistoryEntry, PlannerState, Trajectory, TrajectoryStep};
use crate::env::{run_planned_episode, AdvertiserEnv, EnvFactory, PlanAllocator, Split};
use crate::error::{Error, Result};
use crate::hier::{apply_action, compute_reward, normalized_entry};
use crate::nn::layers::{gaussian_entropy, gaussian_log_prob, gaussian_log_prob_value};
use crate::nn::{AbPlannerNet, Adam, Gradients, ParamStore, PlannerArch, Tape, Tensor, Var};
use crate::rng::{self, domain, StreamRng};
use crate::runner::{initial_episode, prepare_bidder, AdvertiserRun, PlannerOptions};

/// Trajectories per gradient work unit; fixed so results do not depend on
/// the number of worker threads.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip: f64,
    pub learning_rate: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    /// Trajectories (advertisers) collected per iteration.
    pub trajectories: usize,
    /// Trajectories per minibatch.
    pub minibatch: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub iterations: usize,
    /// Global gradient-norm bound; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            learning_rate: 3e-4,
            gamma: 0.99,
            gae_lambda: 0.95,
            epochs: 4,
            trajectories: 64,
            minibatch: 16,
            entropy_coef: 0.01,
            value_coef: 0.5,
            iterations: 150,
            max_grad_norm: Some(0.5),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("ppo.clip must be in (0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("ppo.gamma must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("ppo.gae_lambda must be in [0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("ppo.learning_rate must be > 0");
        }
        if self.epochs == 0 || self.trajectories == 0 || self.minibatch == 0 {
            return bad("ppo.epochs, ppo.trajectories and ppo.minibatch must be >= 1");
        }
        if !(self.entropy_coef.is_finite() && self.value_coef.is_finite()) {
            return bad("ppo coefficients must be finite");
        }
        if let Some(g) = self.max_grad_norm {
            if !(g > 0.0 && g.is_finite()) {
                return bad("ppo.max_grad_norm must be > 0");
            }
        }
        Ok(())
    }
}

/// One decision as seen by the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStep {
    /// Model input for this step (for recurrent models: the newest entry).
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    /// Behavior log-probability at collection time.
    pub log_prob: f64,
    /// Value estimate at collection time.
    pub value: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Rollout {
    pub steps: Vec<RolloutStep>,
}

impl Rollout {
    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.value).collect()
    }
}

/// Head outputs for a batch of rollouts; `rows[k] = (rollout, step)`.
pub struct HeadOutputs {
    pub mean: Var,
    pub value: Var,
    pub log_std: Var,
    pub rows: Vec<(usize, usize)>,
}

/// A Gaussian actor-critic that can re-evaluate whole rollouts on a tape.
pub trait ActorCritic: Send + Sync {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn action_dim(&self) -> usize;
    fn forward_rollouts(&self, tape: &mut Tape<'_>, rollouts: &[&Rollout]) -> Result<HeadOutputs>;
}

impl ActorCritic for AbPlannerNet {
    fn params(&self) -> &ParamStore {
        AbPlannerNet::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        AbPlannerNet::params_mut(self)
    }

    fn action_dim(&self) -> usize {
        self.arch().stages
    }

    /// Runs the recurrence time-major across rollouts of equal length.
    fn forward_rollouts(&self, tape: &mut Tape<'_>, rollouts: &[&Rollout]) -> Result<HeadOutputs> {
        let n = rollouts.len();
        let len = rollouts.first().map_or(0, |r| r.steps.len());
        if n == 0 || len == 0 || rollouts.iter().any(|r| r.steps.len() != len) {
            return Err(Error::invalid("recurrent batches need non-empty rollouts of equal length"));
        }
        let width = self.arch().entry_width();
        let mut h = tape.constant(n, self.arch().hidden, 0.0);
        let mut states = Vec::with_capacity(len);
        let mut rows = Vec::with_capacity(n * len);
        for t in 0..len {
            let mut data = Vec::with_capacity(n * width);
            for (i, r) in rollouts.iter().enumerate() {
                data.extend_from_slice(&r.steps[t].obs);
                rows.push((i, t));
            }
            let x = tape.input(&Tensor::matrix(n, width, data)?);
            h = self.encode_step(tape, x, h)?;
            states.push(h);
        }
        let all = tape.concat_rows(&states)?;
        let (mean, value) = self.heads(tape, all)?;
        let log_std = tape.param(self.log_std_id());
        Ok(HeadOutputs { mean, value, log_std, rows })
    }
}

/// Per-step GAE advantages and value targets for one trajectory, with a
/// terminal bootstrap of zero.
pub fn compute_advantages(rewards: &[f64], values: &[f64], gamma: f64, gae_lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    crate::error::ensure_dims(rewards.len(), values.len())?;
    let mut advantages = vec![0.0; rewards.len()];
    let mut running = 0.0;
    for t in (0..rewards.len()).rev() {
        let next = values.get(t + 1).copied().unwrap_or(0.0);
        let delta = rewards[t] + gamma * next - values[t];
        running = delta + gamma * gae_lambda * running;
        advantages[t] = running;
    }
    let targets = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((advantages, targets))
}

/// Rescales to mean 0 and standard deviation 1 (population); a constant
/// batch is only centred.
pub fn normalize_advantages(xs: &mut [f64]) {
    if xs.len() < 2 {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for x in xs.iter_mut() {
        *x = if std > 1e-12 { (*x - mean) / std } else { *x - mean };
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
    pub minibatches: usize,
}

impl UpdateStats {
    fn add(&mut self, other: &UpdateStats) {
        self.policy_loss += other.policy_loss;
        self.value_loss += other.value_loss;
        self.entropy += other.entropy;
        self.clip_fraction += other.clip_fraction;
        self.mean_ratio += other.mean_ratio;
        self.approx_kl += other.approx_kl;
        self.grad_norm += other.grad_norm;
    }

    fn averaged(mut self, count: usize) -> Self {
        let k = count.max(1) as f64;
        for x in [
            &mut self.policy_loss,
            &mut self.value_loss,
            &mut self.entropy,
            &mut self.clip_fraction,
            &mut self.mean_ratio,
            &mut self.approx_kl,
            &mut self.grad_norm,
        ] {
            *x /= k;
        }
        self.minibatches = count;
        self
    }
}

/// Normalized advantages and value targets for a batch of rollouts.
pub fn prepare_targets(batch: &[Rollout], gamma: f64, gae_lambda: f64) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut advantages = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for r in batch {
        let (a, v) = compute_advantages(&r.rewards(), &r.values(), gamma, gae_lambda)?;
        advantages.push(a);
        targets.push(v);
    }
    let mut flat: Vec<f64> = advantages.concat();
    normalize_advantages(&mut flat);
    let mut offset = 0;
    for a in advantages.iter_mut() {
        let len = a.len();
        a.copy_from_slice(&flat[offset..offset + len]);
        offset += len;
    }
    Ok((advantages, targets))
}

struct Minibatch<'a> {
    rollouts: Vec<&'a Rollout>,
    advantages: Vec<&'a [f64]>,
    targets: Vec<&'a [f64]>,
}

/// Clipped-surrogate loss of `piece`, scaled so that summing over pieces
/// gives the minibatch mean; returns gradients and unnormalized sums.
fn piece_gradients<M: ActorCritic>(
    model: &M,
    piece: &Minibatch<'_>,
    total_rows: f64,
    cfg: &PpoConfig,
) -> Result<(Gradients, UpdateStats)> {
    let mut tape = Tape::new(model.params());
    let out = model.forward_rollouts(&mut tape, &piece.rollouts)?;
    let d = model.action_dim();
    let n = out.rows.len();
    let mut actions = Vec::with_capacity(n * d);
    let mut old = Vec::with_capacity(n);
    let mut adv = Vec::with_capacity(n);
    let mut tgt = Vec::with_capacity(n);
    for &(i, t) in &out.rows {
        let step = &piece.rollouts[i].steps[t];
        actions.extend_from_slice(&step.action);
        old.push(step.log_prob);
        adv.push(piece.advantages[i][t]);
        tgt.push(piece.targets[i][t]);
    }
    let actions_v = tape.input(&Tensor::matrix(n, d, actions)?);
    let old_v = tape.input(&Tensor::matrix(n, 1, old.clone())?);
    let adv_v = tape.input(&Tensor::matrix(n, 1, adv)?);
    let tgt_v = tape.input(&Tensor::matrix(n, 1, tgt)?);

    let logp = gaussian_log_prob(&mut tape, out.mean, out.log_std, actions_v)?;
    let log_ratio = tape.sub(logp, old_v)?;
    let ratio = tape.exp(log_ratio);
    let unclipped = tape.mul(ratio, adv_v)?;
    let clipped = tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
    let clipped = tape.mul(clipped, adv_v)?;
    let surrogate = tape.min(unclipped, clipped)?;
    let surrogate = tape.sum(surrogate);
    let policy = tape.scale(surrogate, -1.0 / total_rows);

    let err = tape.sub(out.value, tgt_v)?;
    let sq = tape.square(err);
    let sq = tape.sum(sq);
    let value = tape.scale(sq, 1.0 / total_rows);

    let weight = n as f64 / total_rows;
    let entropy = gaussian_entropy(&mut tape, out.log_std, d);
    let entropy_term = tape.scale(entropy, -cfg.entropy_coef * weight);
    let weighted_value = tape.scale(value, cfg.value_coef);
    let loss = tape.add(policy, weighted_value)?;
    let loss = tape.add(loss, entropy_term)?;

    let stats = {
        let ratios = tape.value(ratio);
        let new_logp = tape.value(logp);
        UpdateStats {
            policy_loss: tape.scalar(policy),
            value_loss: tape.scalar(value),
            entropy: tape.scalar(entropy) * weight,
            clip_fraction: ratios.iter().filter(|r| (*r - 1.0).abs() > cfg.clip).count() as f64 / total_rows,
            mean_ratio: ratios.iter().sum::<f64>() / total_rows,
            approx_kl: old.iter().zip(new_logp).map(|(o, l)| o - l).sum::<f64>() / total_rows,
            grad_norm: 0.0,
            minibatches: 0,
        }
    };
    let grads = tape.backward(loss).map_err(|e| match e {
        Error::NonFinite(what) => Error::Diverged(format!("non-finite {what} during the policy update")),
        other => other,
    })?;
    Ok((grads, stats))
}

fn minibatch_step<M: ActorCritic>(model: &mut M, opt: &mut Adam, mb: &Minibatch<'_>, cfg: &PpoConfig) -> Result<UpdateStats> {
    let total_rows = mb.rollouts.iter().map(|r| r.steps.len()).sum::<usize>() as f64;
    let pieces: Vec<Minibatch<'_>> = (0..mb.rollouts.len())
        .step_by(GRAD_CHUNK)
        .map(|s| {
            let e = (s + GRAD_CHUNK).min(mb.rollouts.len());
            Minibatch {
                rollouts: mb.rollouts[s..e].to_vec(),
                advantages: mb.advantages[s..e].to_vec(),
                targets: mb.targets[s..e].to_vec(),
            }
        })
        .collect();
    let shared: &M = model;
    let results: Vec<(Gradients, UpdateStats)> = pieces
        .par_iter()
        .map(|p| piece_gradients(shared, p, total_rows, cfg))
        .collect::<Result<_>>()?;
    let mut grads = Gradients::zeros_like(model.params());
    let mut stats = UpdateStats::default();
    for (g, s) in &results {
        grads.accumulate(g);
        stats.add(s);
    }
    stats.grad_norm = match cfg.max_grad_norm {
        Some(max) => grads.clip_global_norm(max),
        None => grads.global_norm(),
    };
    if !stats.grad_norm.is_finite() {
        return Err(Error::Diverged("non-finite gradient norm".into()));
    }
    opt.step(model.params_mut(), &grads)?;
    Ok(stats)
}

/// `epochs` passes of shuffled trajectory minibatches over `batch`.
pub fn ppo_update<M: ActorCritic>(
    model: &mut M,
    opt: &mut Adam,
    batch: &[Rollout],
    cfg: &PpoConfig,
    rng: &mut StreamRng,
) -> Result<UpdateStats> {
    if batch.is_empty() {
        return Ok(UpdateStats::default());
    }
    let (advantages, targets) = prepare_targets(batch, cfg.gamma, cfg.gae_lambda)?;
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut total = UpdateStats::default();
    let mut count = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch) {
            let mb = Minibatch {
                rollouts: chunk.iter().map(|&i| &batch[i]).collect(),
                advantages: chunk.iter().map(|&i| advantages[i].as_slice()).collect(),
                targets: chunk.iter().map(|&i| targets[i].as_slice()).collect(),
            };
            total.add(&minibatch_step(model, opt, &mb, cfg)?);
            count += 1;
        }
    }
    Ok(total.averaged(count))
}

/// Importance ratios of every stored step under the current parameters.
pub fn importance_ratios<M: ActorCritic>(model: &M, batch: &[Rollout]) -> Result<Vec<f64>> {
    let refs: Vec<&Rollout> = batch.iter().collect();
    let mut tape = Tape::new(model.params());
    let out = model.forward_rollouts(&mut tape, &refs)?;
    let d = model.action_dim();
    let mut actions = Vec::with_capacity(out.rows.len() * d);
    for &(i, t) in &out.rows {
        actions.extend_from_slice(&batch[i].steps[t].action);
    }
    let a = tape.input(&Tensor::matrix(out.rows.len(), d, actions)?);
    let logp = gaussian_log_prob(&mut tape, out.mean, out.log_std, a)?;
    Ok(out
        .rows
        .iter()
        .zip(tape.value(logp))
        .map(|(&(i, t), l)| (l - batch[i].steps[t].log_prob).exp())
        .collect())
}

/// How the planner turns its Gaussian into an action.
pub enum ActionMode<'a> {
    Sample(&'a mut StreamRng),
    Mean,
}

/// Everything produced by running the planner on one advertiser.
#[derive(Debug, Clone)]
pub struct PlannerEpisodes {
    pub run: AdvertiserRun,
    /// Learner view: scaled inputs, scaled actions and rewards scaled by `m/B`.
    pub rollout: Rollout,
    /// Framework view in budget units.
    pub trajectory: Trajectory,
}

/// Runs episode 0 and then `steps` planned episodes for one advertiser.
pub fn run_abplanner(
    net: &AbPlannerNet,
    env: &dyn AdvertiserEnv,
    bidder: &BidderSpec,
    options: &PlannerOptions,
    steps: usize,
    mut mode: ActionMode<'_>,
) -> Result<PlannerEpisodes> {
    let m = env.stages();
    crate::error::ensure_dims(net.arch().stages, m)?;
    let budget = env.budget();
    let scale = m as f64 / budget;
    let mut bidder = prepare_bidder(env, bidder)?;
    let first = initial_episode(env, &mut bidder, options.initial_plan)?;
    let mut run = AdvertiserRun::new(env.id(), budget);
    run.push(first.plan.clone(), first.outcome.clone());
    let mut state = PlannerState::new(budget, vec![first])?;
    let mut rollout = Rollout::default();
    let mut trajectory = Trajectory::new();
    let mut hidden = net.zero_hidden(1);
    for t in 1..=steps {
        let last = state.latest().expect("state holds episode 0").clone();
        let obs = normalized_entry(last.plan.allocations(), last.outcome.returns(), last.outcome.costs(), scale);
        let out = net.step(&hidden, &Tensor::matrix(1, 3 * m, obs.clone())?)?;
        hidden = out.hidden;
        let mean = &out.means[0];
        let action: Vec<f64> = match &mut mode {
            ActionMode::Mean => mean.clone(),
            ActionMode::Sample(rng) => {
                let sigma = out.log_std.exp();
                mean.iter()
                    .map(|mu| {
                        let z: f64 = StandardNormal.sample(&mut **rng);
                        mu + sigma * z
                    })
                    .collect()
            }
        };
        let log_prob = gaussian_log_prob_value(mean, out.log_std, &action);
        let budget_action: Vec<f64> = action.iter().map(|a| a / scale).collect();
        let plan = apply_action(&last.plan, &budget_action, budget, options.clamp())?;
        let (_, outcome) = run_planned_episode(&mut bidder, &env.episode(t)?, budget, &mut PlanAllocator::new(&plan))?;
        let reward = compute_reward(&outcome, &last.outcome)?;
        let next = state.extended(HistoryEntry { plan: plan.clone(), outcome: outcome.clone() })?;
        trajectory.push(TrajectoryStep { state, action: budget_action, reward, next_state: next.clone() })?;
        rollout.steps.push(RolloutStep { obs, action, log_prob, value: out.values[0], reward: reward * scale });
        run.push(plan, outcome);
        state = next;
    }
    Ok(PlannerEpisodes { run, rollout, trajectory })
}

/// Algorithm-style collection of `count` trajectories of `steps` decisions
/// from training advertisers `first..first + count`, in parallel.
#[allow(clippy::too_many_arguments)]
pub fn collect_trajectories(
    net: &AbPlannerNet,
    factory: &dyn EnvFactory,
    bidder: &BidderSpec,
    options: &PlannerOptions,
    first: u64,
    count: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<PlannerEpisodes>> {
    (0..count as u64)
        .into_par_iter()
        .map(|j| {
            let index = first + j;
            let env = factory.advertiser(Split::Train, index)?;
            let mut noise = rng::stream(seed, &[domain::POLICY, index]);
            run_abplanner(net, env.as_ref(), bidder, options, steps, ActionMode::Sample(&mut noise))
        })
        .collect()
}

pub const METRICS_HEADER: &str = "iteration,episode_index,mean_return,mean_reward,policy_loss,value_loss,clip_fraction";

/// One line of the training metrics file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub episode_index: usize,
    pub mean_return: f64,
    pub mean_reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
}

impl MetricsRow {
    pub fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration,
            self.episode_index,
            self.mean_return,
            self.mean_reward,
            self.policy_loss,
            self.value_loss,
            self.clip_fraction
        )
    }
}

/// Per-episode-index batch means plus the update statistics.
pub fn metrics_rows(iteration: usize, runs: &[&AdvertiserRun], rewards: &[Vec<f64>], stats: &UpdateStats) -> Vec<MetricsRow> {
    let episodes = runs.first().map_or(0, |r| r.episodes());
    let n = runs.len().max(1) as f64;
    (0..episodes)
        .map(|t| MetricsRow {
            iteration,
            episode_index: t,
            mean_return: runs.iter().map(|r| r.outcomes[t].total_return()).sum::<f64>() / n,
            mean_reward: if t == 0 { 0.0 } else { rewards.iter().map(|r| r[t - 1]).sum::<f64>() / n },
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            clip_fraction: stats.clip_fraction,
        })
        .collect()
}

pub struct TrainSetup<'a> {
    pub factory: &'a dyn EnvFactory,
    pub bidder: BidderSpec,
    pub options: PlannerOptions,
    pub arch: PlannerArch,
    pub ppo: PpoConfig,
    pub seed: u64,
}

pub struct IterationReport<'a> {
    pub iteration: usize,
    pub rows: &'a [MetricsRow],
    pub stats: UpdateStats,
    /// Parameters that generated this iteration's batch.
    pub behavior: &'a AbPlannerNet,
}

pub struct TrainOutcome {
    pub final_net: AbPlannerNet,
    /// Behavior network with the highest last-episode batch return.
    pub best: Option<(usize, AbPlannerNet)>,
    pub metrics: Vec<MetricsRow>,
}

/// Alternates collection and PPO updates for `ppo.iterations` iterations.
pub fn train(setup: &TrainSetup<'_>, on_iteration: &mut dyn FnMut(&IterationReport<'_>) -> Result<()>) -> Result<TrainOutcome> {
    setup.ppo.validate()?;
    setup.bidder.validate()?;
    setup.options.validate()?;
    crate::error::ensure_dims(setup.factory.stages(), setup.arch.stages)?;
    let episodes = setup.factory.episodes();
    if episodes < 2 {
        return Err(Error::Config("training needs at least 2 episodes per advertiser".into()));
    }
    let steps = episodes - 1;
    let mut net = AbPlannerNet::new(setup.arch, &mut rng::stream(setup.seed, &[domain::INIT]))?;
    let mut opt = Adam::new(net.params(), setup.ppo.learning_rate);
    let mut metrics = Vec::new();
    let mut best: Option<(usize, f64, AbPlannerNet)> = None;
    for iteration in 0..setup.ppo.iterations {
        let first = (iteration * setup.ppo.trajectories) as u64;
        let collected = collect_trajectories(
            &net,
            setup.factory,
            &setup.bidder,
            &setup.options,
            first,
            setup.ppo.trajectories,
            steps,
            setup.seed,
        )?;
        let behavior = net.clone();
        let rollouts: Vec<Rollout> = collected.iter().map(|c| c.rollout.clone()).collect();
        let mut shuffle = rng::stream(setup.seed, &[domain::SHUFFLE, iteration as u64]);
        let stats = ppo_update(&mut net, &mut opt, &rollouts, &setup.ppo, &mut shuffle)?;

        let runs: Vec<&AdvertiserRun> = collected.iter().map(|c| &c.run).collect();
        let rewards: Vec<Vec<f64>> =
            collected.iter().map(|c| c.trajectory.steps().iter().map(|s| s.reward).collect()).collect();
        let rows = metrics_rows(iteration, &runs, &rewards, &stats);
        let score = rows.last().map_or(f64::NEG_INFINITY, |r| r.mean_return);
        on_iteration(&IterationReport { iteration, rows: &rows, stats, behavior: &behavior })?;
        if best.as_ref().is_none_or(|(_, s, _)| score > *s) {
            best = Some((iteration, score, behavior));
        }
        metrics.extend(rows);
    }
    Ok(TrainOutcome { final_net: net, best: best.map(|(i, _, n)| (i, n)), metrics })
}
