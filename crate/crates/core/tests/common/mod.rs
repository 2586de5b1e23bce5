//! Independent reference implementations shared by the property and
//! acceptance suites. None of these reuse library code paths.

#![allow(dead_code)]

pub mod grad;

use abplanner::baselines::mckp::BUDGET_TOLERANCE;

/// Euclidean projection onto `{x >= 0, sum(x) <= budget}` by enumerating
/// KKT active sets. Every candidate is primal feasible or discarded, and the
/// optimum is one of the candidates, so the closest feasible candidate is it.
pub fn projection_oracle(raw: &[f64], budget: f64) -> Vec<f64> {
    let m = raw.len();
    let mut best = vec![0.0; m];
    let mut best_dist = dist2(&best, raw);
    for mask in 1u32..(1 << m) {
        let support: Vec<usize> = (0..m).filter(|&i| mask & (1 << i) != 0).collect();
        // Sum constraint inactive: support keeps raw values.
        let free: Vec<f64> = (0..m).map(|i| if mask & (1 << i) != 0 { raw[i] } else { 0.0 }).collect();
        if support.iter().all(|&i| raw[i] > 0.0) && free.iter().sum::<f64>() <= budget {
            consider(&free, raw, &mut best, &mut best_dist);
        }
        // Sum constraint active: a common shift on the support.
        let shift = (support.iter().map(|&i| raw[i]).sum::<f64>() - budget) / support.len() as f64;
        let tight: Vec<f64> = (0..m)
            .map(|i| if mask & (1 << i) != 0 { raw[i] - shift } else { 0.0 })
            .collect();
        if shift >= 0.0 && support.iter().all(|&i| tight[i] >= 0.0) {
            consider(&tight, raw, &mut best, &mut best_dist);
        }
    }
    best
}

fn consider(candidate: &[f64], raw: &[f64], best: &mut Vec<f64>, best_dist: &mut f64) {
    let d = dist2(candidate, raw);
    if d < *best_dist {
        *best_dist = d;
        *best = candidate.to_vec();
    }
}

pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

pub fn norm(a: &[f64], b: &[f64]) -> f64 {
    dist2(a, b).sqrt()
}

/// Value of the best budget-feasible set of the form
/// `{i : v_i > 0, v_i / p_i > tau}`, summed in index order.
pub fn best_cpr_prefix(values: &[f64], prices: &[f64], budget: f64) -> f64 {
    let n = values.len();
    let thresholds = (0..n).map(|i| values[i] / prices[i]).chain(std::iter::once(0.0));
    let mut best = 0.0;
    for tau in thresholds {
        let members: Vec<usize> = (0..n).filter(|&i| values[i] > 0.0 && values[i] / prices[i] > tau).collect();
        let cost: f64 = members.iter().map(|&i| prices[i]).sum();
        if cost <= budget {
            let value = members.iter().fold(0.0, |acc, &i| acc + values[i]);
            if value > best {
                best = value;
            }
        }
    }
    best
}

/// Exact 0/1 knapsack by enumerating every subset.
pub fn knapsack_brute_force(values: &[f64], prices: &[f64], budget: f64) -> f64 {
    let n = values.len();
    assert!(n <= 20, "enumeration is exponential");
    let mut best: f64 = 0.0;
    for mask in 0u32..(1 << n) {
        let (mut v, mut p) = (0.0, 0.0);
        for i in 0..n {
            if mask & (1 << i) != 0 {
                v += values[i];
                p += prices[i];
            }
        }
        if p <= budget {
            best = best.max(v);
        }
    }
    best
}

/// Best objective of the multiple-choice knapsack by enumerating all
/// `n_b^m` bin combinations; `None` when nothing fits.
pub fn mckp_brute_force(q: &[Vec<f64>], bins: &[f64], budget: f64) -> Option<f64> {
    let m = q.len();
    let nb = bins.len();
    let cap = budget * (1.0 + BUDGET_TOLERANCE);
    let mut best: Option<f64> = None;
    let mut choice = vec![0usize; m];
    loop {
        let spend = choice.iter().fold(0.0, |acc, &j| acc + bins[j]);
        if spend <= cap {
            let objective = choice.iter().enumerate().fold(0.0, |acc, (i, &j)| acc + q[i][j]);
            best = Some(best.map_or(objective, |b: f64| b.max(objective)));
        }
        let mut k = 0;
        loop {
            if k == m {
                return best;
            }
            choice[k] += 1;
            if choice[k] < nb {
                break;
            }
            choice[k] = 0;
            k += 1;
        }
    }
}

/// Largest relative error between two gradient vectors, with an absolute
/// floor so that entries that are both near zero do not dominate.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Worst relative error between tape gradients of `loss` and central
/// finite differences, over every parameter scalar or the subset of flat
/// indices returned by `pick`.
pub fn gradient_check(
    store: &abplanner::nn::ParamStore,
    loss: &dyn Fn(&mut abplanner::nn::Tape<'_>) -> abplanner::nn::Var,
    pick: Option<&mut dyn FnMut(usize) -> Vec<usize>>,
) -> f64 {
    use abplanner::nn::Tape;
    let eval = |s: &abplanner::nn::ParamStore| {
        let mut tape = Tape::new(s);
        let l = loss(&mut tape);
        tape.scalar(l)
    };
    let mut tape = Tape::new(store);
    let l = loss(&mut tape);
    let grads = tape.backward(l).expect("backward");
    let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
    let total = analytic.len();
    let coords = match pick {
        Some(f) => f(total),
        None => (0..total).collect(),
    };
    let mut locate = Vec::with_capacity(total);
    for (p, t) in store.tensors().iter().enumerate() {
        locate.extend((0..t.len()).map(|k| (p, k)));
    }
    let h = 1e-5;
    let mut numeric = Vec::with_capacity(coords.len());
    let mut chosen = Vec::with_capacity(coords.len());
    let mut work = store.clone();
    for &c in &coords {
        let (p, k) = locate[c];
        let original = work.tensors()[p].data()[k];
        work.tensors_mut()[p].data_mut()[k] = original + h;
        let up = eval(&work);
        work.tensors_mut()[p].data_mut()[k] = original - h;
        let down = eval(&work);
        work.tensors_mut()[p].data_mut()[k] = original;
        numeric.push((up - down) / (2.0 * h));
        chosen.push(analytic[c]);
    }
    max_relative_error(&chosen, &numeric)
}
