//! Q-MCKP: per-stage Q-value regressors over discretized budgets, planned
//! by an exact multiple-choice knapsack each episode.
//!
//! Stage `i`'s network reads that stage's history `(rho_i, R_i, C_i)`
//! (scaled by `m/B`) through an encoder and GRU, then maps `[h, m]` to one
//! Q-value per budget bin. Targets are the realized stage returns, also
//! scaled by `m/B`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mckp::{bin_grid, solve_masked, MckpSolution};
use crate::bidders::BidderSpec;
use crate::domain::BudgetPlan;
use crate::env::{run_planned_episode, AdvertiserEnv, EnvFactory, PlanAllocator, Split};
use crate::error::{ensure_dims, Error, Result};
use crate::hier::normalized_entry;
use crate::nn::layers::{Dense, GruCell, Mlp2};
use crate::nn::{Adam, Checkpoint, Gradients, ParamStore, Tape, Tensor, Var};
use crate::ppo::{MetricsRow, PpoConfig};
use crate::rng::{self, domain, StreamRng};
use crate::runner::{initial_episode, prepare_bidder, AdvertiserRun, PlannerOptions};

pub const MODEL_NAME: &str = "qmckp";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QMckpArch {
    pub stages: usize,
    pub bins: usize,
    pub encoder: usize,
    pub hidden: usize,
    pub head: usize,
    /// Initial exploration rate, decayed linearly to zero over training.
    pub epsilon: f64,
}

impl Default for QMckpArch {
    fn default() -> Self {
        Self { stages: 6, bins: 40, encoder: 64, hidden: 128, head: 64, epsilon: 0.1 }
    }
}

#[derive(Debug, Clone, Copy)]
struct StageNet {
    encoder: Dense,
    gru: GruCell,
    head: Mlp2,
}

#[derive(Debug, Clone)]
pub struct QMckpModel {
    arch: QMckpArch,
    store: ParamStore,
    nets: Vec<StageNet>,
}

/// One advertiser's decisions for fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct QRollout {
    /// Scaled `[rho | R | C]` entries for episodes `0..L`.
    pub entries: Vec<Vec<f64>>,
    /// Bin chosen per stage at decisions `1..=L`.
    pub choices: Vec<Vec<usize>>,
    /// Scaled stage returns realized at decisions `1..=L`.
    pub targets: Vec<Vec<f64>>,
}

impl QMckpModel {
    pub fn new<R: Rng + ?Sized>(arch: QMckpArch, rng: &mut R) -> Result<Self> {
        if arch.stages == 0 || arch.encoder == 0 || arch.hidden == 0 || arch.head == 0 {
            return Err(Error::invalid("network sizes must be >= 1"));
        }
        if arch.bins < 2 {
            return Err(Error::Config("qmckp needs at least 2 bins".into()));
        }
        if !(0.0..=1.0).contains(&arch.epsilon) {
            return Err(Error::Config("qmckp epsilon must be in [0, 1]".into()));
        }
        let mut store = ParamStore::new();
        let nets = (0..arch.stages)
            .map(|i| StageNet {
                encoder: Dense::new(&mut store, &format!("stage{i}.encoder"), 3, arch.encoder, rng),
                gru: GruCell::new(&mut store, &format!("stage{i}.gru"), arch.encoder, arch.hidden, rng),
                head: Mlp2::new(&mut store, &format!("stage{i}.q"), arch.hidden + 1, arch.head, arch.bins, rng),
            })
            .collect();
        Ok(Self { arch, store, nets })
    }

    pub fn arch(&self) -> &QMckpArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Final-layer weights of stage `stage`'s Q head.
    pub fn head_weights(&self, stage: usize) -> crate::nn::ParamId {
        self.nets[stage].head.out.w
    }

    pub fn bins(&self, budget: f64) -> Result<Vec<f64>> {
        bin_grid(budget, self.arch.bins)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(MODEL_NAME, &self.arch, &self.store)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_model(MODEL_NAME)?;
        let arch: QMckpArch = ckpt.meta()?;
        let mut model = Self::new(arch, &mut rng::stream(0, &[]))?;
        model.store.load_from(&ckpt.to_store()?)?;
        Ok(model)
    }

    /// Per-stage Q outputs `(L n) x n_b`, rows ordered time-major, for
    /// rollouts holding `L` entries each.
    fn forward(&self, tape: &mut Tape<'_>, sequences: &[&[Vec<f64>]]) -> Result<Vec<Var>> {
        let n = sequences.len();
        let len = sequences.first().map_or(0, |s| s.len());
        if n == 0 || len == 0 || sequences.iter().any(|s| s.len() != len) {
            return Err(Error::invalid("q-mckp batches need non-empty histories of equal length"));
        }
        let m = self.arch.stages;
        let mut outputs = Vec::with_capacity(m);
        for (i, net) in self.nets.iter().enumerate() {
            let mut h = tape.constant(n, self.arch.hidden, 0.0);
            let mut states = Vec::with_capacity(len);
            for t in 0..len {
                let mut data = Vec::with_capacity(3 * n);
                for s in sequences {
                    ensure_dims(3 * m, s[t].len())?;
                    data.extend_from_slice(&[s[t][i], s[t][m + i], s[t][2 * m + i]]);
                }
                let x = tape.input(&Tensor::matrix(n, 3, data)?);
                let e = net.encoder.forward(tape, x)?;
                let e = tape.relu(e);
                h = net.gru.forward(tape, e, h)?;
                states.push(h);
            }
            let all = tape.concat_rows(&states)?;
            let budget = tape.constant(n * len, 1, m as f64);
            let x = tape.concat_cols(&[all, budget])?;
            outputs.push(net.head.forward(tape, x)?);
        }
        Ok(outputs)
    }

    /// `m x n_b` Q-values for a state with the given scaled history.
    pub fn q_values(&self, entries: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new(&self.store);
        let outs = self.forward(&mut tape, &[entries])?;
        let last = entries.len() - 1;
        let nb = self.arch.bins;
        Ok(outs.iter().map(|v| tape.value(*v)[last * nb..(last + 1) * nb].to_vec()).collect())
    }
}

/// Squared-error loss of the chosen bins against realized stage returns,
/// averaged over decisions and stages.
fn fit_loss(model: &QMckpModel, tape: &mut Tape<'_>, batch: &[&QRollout]) -> Result<Var> {
    let len = batch.first().map_or(0, |r| r.choices.len());
    if len == 0 || batch.iter().any(|r| r.choices.len() != len || r.entries.len() < len) {
        return Err(Error::invalid("q-mckp fitting needs rollouts with equal decision counts"));
    }
    let sequences: Vec<&[Vec<f64>]> = batch.iter().map(|r| &r.entries[..len]).collect();
    let outs = model.forward(tape, &sequences)?;
    let n = batch.len();
    let nb = model.arch.bins;
    let rows = n * len;
    let mut parts = Vec::with_capacity(outs.len());
    for (i, q) in outs.into_iter().enumerate() {
        let mut mask = vec![0.0; rows * nb];
        let mut target = Vec::with_capacity(rows);
        for t in 0..len {
            for (k, r) in batch.iter().enumerate() {
                let row = t * n + k;
                mask[row * nb + r.choices[t][i]] = 1.0;
                target.push(r.targets[t][i]);
            }
        }
        let mask = tape.input(&Tensor::matrix(rows, nb, mask)?);
        let selected = tape.mul(q, mask)?;
        let selected = tape.sum_cols(selected);
        let target = tape.input(&Tensor::matrix(rows, 1, target)?);
        let err = tape.sub(selected, target)?;
        let sq = tape.square(err);
        parts.push(tape.sum(sq));
    }
    let mut total = parts[0];
    for p in &parts[1..] {
        total = tape.add(total, *p)?;
    }
    Ok(tape.scale(total, 1.0 / (rows * model.arch.stages) as f64))
}

/// Loss and gradients of the regression on `batch` without updating.
pub fn qmckp_loss_and_gradients(model: &QMckpModel, batch: &[&QRollout]) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new(model.params());
    let loss = fit_loss(model, &mut tape, batch)?;
    let value = tape.scalar(loss);
    let grads = tape.backward(loss)?;
    Ok((value, grads))
}

/// One regression step on `batch`; returns the pre-step loss.
pub fn qmckp_fit_step(model: &mut QMckpModel, opt: &mut Adam, batch: &[&QRollout], max_grad_norm: Option<f64>) -> Result<f64> {
    let (loss, mut grads) = qmckp_loss_and_gradients(model, batch)?;
    if let Some(max) = max_grad_norm {
        grads.clip_global_norm(max);
    }
    opt.step(model.params_mut(), &grads)?;
    Ok(loss)
}

/// The knapsack plan for the current history, with each stage's bin
/// replaced by a uniformly random one with probability `epsilon`.
pub fn choose_plan(
    model: &QMckpModel,
    entries: &[Vec<f64>],
    budget: f64,
    exploration: Option<(f64, &mut StreamRng)>,
) -> Result<MckpSolution> {
    let q = model.q_values(entries)?;
    let bins = model.bins(budget)?;
    if let Some((epsilon, rng)) = exploration {
        let mut forced = false;
        let mask: Vec<Vec<bool>> = (0..q.len())
            .map(|_| {
                if rng.random::<f64>() < epsilon {
                    forced = true;
                    let j = rng.random_range(0..bins.len());
                    (0..bins.len()).map(|k| k == j).collect()
                } else {
                    vec![true; bins.len()]
                }
            })
            .collect();
        if forced {
            if let Ok(s) = solve_masked(&q, &bins, budget, Some(&mask)) {
                return Ok(s);
            }
        }
    }
    solve_masked(&q, &bins, budget, None)
}

/// Episode 0 and then `steps` knapsack-planned episodes for one advertiser.
pub fn run_qmckp(
    model: &QMckpModel,
    env: &dyn AdvertiserEnv,
    bidder: &BidderSpec,
    options: &PlannerOptions,
    steps: usize,
    mut exploration: Option<(f64, &mut StreamRng)>,
) -> Result<(AdvertiserRun, QRollout)> {
    let m = env.stages();
    ensure_dims(model.arch.stages, m)?;
    let budget = env.budget();
    let scale = m as f64 / budget;
    let mut bidder = prepare_bidder(env, bidder)?;
    let first = initial_episode(env, &mut bidder, options.initial_plan)?;
    let mut run = AdvertiserRun::new(env.id(), budget);
    let entry = |plan: &BudgetPlan, r: &[f64], c: &[f64]| normalized_entry(plan.allocations(), r, c, scale);
    let mut rollout = QRollout {
        entries: vec![entry(&first.plan, first.outcome.returns(), first.outcome.costs())],
        choices: Vec::new(),
        targets: Vec::new(),
    };
    run.push(first.plan, first.outcome);
    for t in 1..=steps {
        let explore = exploration.as_mut().map(|(e, r)| (*e, &mut **r));
        let solution = choose_plan(model, &rollout.entries, budget, explore)?;
        let plan = solution.plan(budget)?;
        let (_, outcome) = run_planned_episode(&mut bidder, &env.episode(t)?, budget, &mut PlanAllocator::new(&plan))?;
        rollout.entries.push(entry(&plan, outcome.returns(), outcome.costs()));
        rollout.choices.push(solution.choices);
        rollout.targets.push(outcome.returns().iter().map(|r| r * scale).collect());
        run.push(plan, outcome);
    }
    Ok((run, rollout))
}

pub struct QMckpOutcome {
    pub model: QMckpModel,
    pub metrics: Vec<MetricsRow>,
}

/// Alternates exploratory collection and regression epochs. Uses the
/// iteration, batch, epoch and learning-rate fields of `ppo`.
#[allow(clippy::too_many_arguments)]
pub fn train_qmckp(
    factory: &dyn EnvFactory,
    bidder: &BidderSpec,
    options: &PlannerOptions,
    arch: QMckpArch,
    ppo: &PpoConfig,
    seed: u64,
    on_iteration: &mut dyn FnMut(usize, &[MetricsRow], &QMckpModel) -> Result<()>,
) -> Result<QMckpOutcome> {
    ppo.validate()?;
    ensure_dims(factory.stages(), arch.stages)?;
    let steps = factory
        .episodes()
        .checked_sub(1)
        .filter(|&s| s > 0)
        .ok_or_else(|| Error::Config("training needs at least 2 episodes per advertiser".into()))?;
    let mut model = QMckpModel::new(arch, &mut rng::stream(seed, &[domain::INIT]))?;
    let mut opt = Adam::new(model.params(), ppo.learning_rate);
    let mut metrics = Vec::new();
    for iteration in 0..ppo.iterations {
        let epsilon = arch.epsilon * (1.0 - iteration as f64 / ppo.iterations as f64);
        let first = (iteration * ppo.trajectories) as u64;
        let frozen = &model;
        let collected: Vec<(AdvertiserRun, QRollout)> = (0..ppo.trajectories as u64)
            .into_par_iter()
            .map(|j| {
                let index = first + j;
                let env = factory.advertiser(Split::Train, index)?;
                let mut noise = rng::stream(seed, &[domain::EXPLORE, index]);
                run_qmckp(frozen, env.as_ref(), bidder, options, steps, Some((epsilon, &mut noise)))
            })
            .collect::<Result<_>>()?;
        let mut shuffle = rng::stream(seed, &[domain::SHUFFLE, iteration as u64]);
        let mut order: Vec<usize> = (0..collected.len()).collect();
        let mut loss_sum = 0.0;
        let mut count = 0;
        for _ in 0..ppo.epochs {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle);
            for chunk in order.chunks(ppo.minibatch) {
                let batch: Vec<&QRollout> = chunk.iter().map(|&i| &collected[i].1).collect();
                loss_sum += qmckp_fit_step(&mut model, &mut opt, &batch, ppo.max_grad_norm)?;
                count += 1;
            }
        }
        if !loss_sum.is_finite() {
            return Err(Error::Diverged("q-mckp regression loss".into()));
        }
        let stats = crate::ppo::UpdateStats { value_loss: loss_sum / count.max(1) as f64, ..Default::default() };
        let runs: Vec<&AdvertiserRun> = collected.iter().map(|c| &c.0).collect();
        let rewards: Vec<Vec<f64>> = runs
            .iter()
            .map(|r| r.returns().windows(2).map(|w| w[1] - w[0]).collect())
            .collect();
        let rows = crate::ppo::metrics_rows(iteration, &runs, &rewards, &stats);
        on_iteration(iteration, &rows, &model)?;
        metrics.extend(rows);
    }
    Ok(QMckpOutcome { model, metrics })
}
