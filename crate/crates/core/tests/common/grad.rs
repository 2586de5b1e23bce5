//! Finite-difference gradient checks for each differentiable unit and the
//! full planner network. Each function returns the worst relative error.

use abplanner::nn::{gaussian_entropy, gaussian_log_prob, AbPlannerNet, Dense, GruCell, ParamStore, PlannerArch, Tape, Tensor, Var};
use abplanner::ppo::{ActorCritic, Rollout, RolloutStep};
use abplanner::rng::{self, StreamRng};
use rand::seq::index::sample;
use rand::Rng;

use super::gradient_check;

/// Seeds per unit; each unit reports its worst error over all of them.
const SEEDS: u64 = 100;

fn random(rng: &mut StreamRng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Reduces `y` to a scalar with fixed random weights so that every output
/// entry receives a distinct upstream gradient.
fn project(tape: &mut Tape<'_>, y: Var, weights: &Tensor) -> Var {
    let w = tape.input(weights);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

fn worst_over_seeds(check: impl Fn(&mut StreamRng) -> f64) -> f64 {
    (0..SEEDS).map(|s| check(&mut rng::stream(s, &[77]))).fold(0.0, f64::max)
}

fn elementwise(op: fn(&mut Tape<'_>, Var) -> Var, avoid_zero: bool) -> f64 {
    worst_over_seeds(|r| {
        let mut store = ParamStore::new();
        let mut x = random(r, 3, 5, 3.0);
        if avoid_zero {
            // Keep inputs away from the kink so the difference quotient is valid.
            x.data_mut().iter_mut().for_each(|v| if v.abs() < 1e-2 { *v += 0.1 });
        }
        let id = store.add("x", x);
        let weights = random(r, 3, 5, 1.0);
        gradient_check(&store, &|tape| {
            let x = tape.param(id);
            let y = op(tape, x);
            project(tape, y, &weights)
        }, None)
    })
}

pub fn relu_error() -> f64 {
    elementwise(|t, x| t.relu(x), true)
}

pub fn sigmoid_error() -> f64 {
    elementwise(|t, x| t.sigmoid(x), false)
}

pub fn tanh_error() -> f64 {
    elementwise(|t, x| t.tanh(x), false)
}

pub fn dense_error() -> f64 {
    worst_over_seeds(|r| {
        let mut store = ParamStore::new();
        let layer = Dense::new(&mut store, "dense", 4, 3, r);
        store.get_mut(layer.b).data_mut().iter_mut().for_each(|b| *b = r.random_range(-0.5..0.5));
        let x = store.add("x", random(r, 2, 4, 1.0));
        let weights = random(r, 2, 3, 1.0);
        gradient_check(&store, &|tape| {
            let x = tape.param(x);
            let y = layer.forward(tape, x).unwrap();
            project(tape, y, &weights)
        }, None)
    })
}

pub fn gru_error() -> f64 {
    worst_over_seeds(|r| {
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "gru", 3, 4, r);
        for id in [cell.b_ih, cell.b_hh] {
            store.get_mut(id).data_mut().iter_mut().for_each(|b| *b = r.random_range(-0.5..0.5));
        }
        let x = store.add("x", random(r, 2, 3, 1.0));
        let h = store.add("h", random(r, 2, 4, 0.9));
        let weights = random(r, 2, 4, 1.0);
        gradient_check(&store, &|tape| {
            let (x, h) = (tape.param(x), tape.param(h));
            let h1 = cell.forward(tape, x, h).unwrap();
            let h2 = cell.forward(tape, x, h1).unwrap();
            project(tape, h2, &weights)
        }, None)
    })
}

pub fn gaussian_error() -> f64 {
    worst_over_seeds(|r| {
        let mut store = ParamStore::new();
        let mean = store.add("mean", random(r, 4, 3, 1.0));
        let log_std = store.add("log_std", Tensor::matrix(1, 1, vec![r.random_range(-1.0..0.5)]).unwrap());
        let actions = store.add("actions", random(r, 4, 3, 1.5));
        let weights = random(r, 4, 1, 1.0);
        gradient_check(&store, &|tape| {
            let (mean, log_std, actions) = (tape.param(mean), tape.param(log_std), tape.param(actions));
            let lp = gaussian_log_prob(tape, mean, log_std, actions).unwrap();
            let projected = project(tape, lp, &weights);
            let entropy = gaussian_entropy(tape, log_std, 3);
            let entropy = tape.scale(entropy, 0.3);
            tape.add(projected, entropy).unwrap()
        }, None)
    })
}

fn random_rollouts(r: &mut StreamRng, count: usize, len: usize, stages: usize) -> Vec<Rollout> {
    (0..count)
        .map(|_| Rollout {
            steps: (0..len)
                .map(|_| RolloutStep {
                    obs: (0..3 * stages).map(|_| r.random_range(0.0..1.5)).collect(),
                    action: (0..stages).map(|_| r.random_range(-0.5..0.5)).collect(),
                    log_prob: r.random_range(-3.0..0.0),
                    value: 0.0,
                    reward: 0.0,
                })
                .collect(),
        })
        .collect()
}

/// Actor-critic objective in the shape used for training, without the
/// non-smooth clipping.
fn full_network_loss(net: &AbPlannerNet, tape: &mut Tape<'_>, batch: &[Rollout], advantages: &Tensor, targets: &Tensor) -> Var {
    let refs: Vec<&Rollout> = batch.iter().collect();
    let out = net.forward_rollouts(tape, &refs).unwrap();
    let d = net.action_dim();
    let n = out.rows.len();
    let mut actions = Vec::with_capacity(n * d);
    let mut old = Vec::with_capacity(n);
    for &(i, t) in &out.rows {
        actions.extend_from_slice(&batch[i].steps[t].action);
        old.push(batch[i].steps[t].log_prob);
    }
    let actions = tape.input(&Tensor::matrix(n, d, actions).unwrap());
    let old = tape.input(&Tensor::matrix(n, 1, old).unwrap());
    let adv = tape.input(advantages);
    let tgt = tape.input(targets);
    let logp = gaussian_log_prob(tape, out.mean, out.log_std, actions).unwrap();
    let log_ratio = tape.sub(logp, old).unwrap();
    let ratio = tape.exp(log_ratio);
    let surrogate = tape.mul(ratio, adv).unwrap();
    let policy = tape.mean(surrogate);
    let policy = tape.scale(policy, -1.0);
    let err = tape.sub(out.value, tgt).unwrap();
    let sq = tape.square(err);
    let value = tape.mean(sq);
    let value = tape.scale(value, 0.5);
    let entropy = gaussian_entropy(tape, out.log_std, d);
    let entropy = tape.scale(entropy, -0.01);
    let loss = tape.add(policy, value).unwrap();
    tape.add(loss, entropy).unwrap()
}

pub fn full_network_error() -> f64 {
    worst_over_seeds(|r| {
        let stages = 2;
        let arch = PlannerArch { stages, encoder: 4, hidden: 8, head: 4, initial_log_std: -0.5, mean_init_scale: 1.0 };
        let mut net = AbPlannerNet::new(arch, r).unwrap();
        // Non-zero biases so that no unit sits exactly at a ReLU kink.
        for t in net.params_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x += r.random_range(-0.05..0.05));
        }
        let batch = random_rollouts(r, 2, 3, stages);
        let rows = 6;
        let advantages = random(r, rows, 1, 1.0);
        let targets = random(r, rows, 1, 1.0);
        let total = net.params().scalar_count();
        let picks: Vec<usize> = sample(r, total, 80.min(total)).into_vec();
        let mut pick = move |_: usize| picks.clone();
        gradient_check(
            net.params(),
            &|tape| full_network_loss(&net, tape, &batch, &advantages, &targets),
            Some(&mut pick),
        )
    })
}
