//! Randomized invariants across the crate, checked against brute-force
//! references where one exists.

mod common;

use abplanner::baselines::{bin_grid, equal_split_plan, solve_mckp};
use abplanner::bidders::{hindsight_lambda, run_stage_lp, run_stage_pid, BidderSpec, PidGains};
use abplanner::domain::{BudgetPlan, Context, Impression};
use abplanner::env::{run_planned_episode, EnvFactory, PlanAllocator, Split};
use abplanner::hier::{apply_action, project_onto_budget_simplex, ActionClamp};
use abplanner::nn::{AbPlannerNet, PlannerArch, Tape, Tensor};
use abplanner::ppo::{importance_ratios, normalize_advantages, run_abplanner, ActionMode, Rollout};
use abplanner::replay::{export_writer, ingest_reader, LogStore};
use abplanner::rng;
use abplanner::runner::{prepare_bidder, PlannerOptions};
use abplanner::simenv::{generate_episode, pareto_shape, partition_stages, sample_advertiser, SimConfig, SimFactory};
use chrono::NaiveDate;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn impressions(values: &[f64], prices: &[f64]) -> Vec<Impression> {
    values
        .iter()
        .zip(prices)
        .enumerate()
        .map(|(i, (&v, &p))| Impression::new(i + 1, v, p).unwrap())
        .collect()
}

/// `(values, prices)` of equal length `1..=max_n`; values may be zero.
fn stream(max_n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..=max_n).prop_flat_map(|n| {
        (
            prop::collection::vec(prop_oneof![1 => Just(0.0), 9 => 0.01f64..5.0], n),
            prop::collection::vec(0.05f64..3.0, n),
        )
    })
}

fn small_sim(stages: usize, seed: u64) -> SimFactory {
    SimFactory::new(SimConfig { impressions: 60, stages, episodes: 3, seed, ..SimConfig::default() }).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn plan_constructor_accepts_exactly_the_feasible_set(
        xs in prop::collection::vec(-1.0f64..3.0, 1..8),
        budget in 0.1f64..10.0,
    ) {
        let feasible = xs.iter().all(|x| *x >= 0.0) && xs.iter().sum::<f64>() <= budget;
        match BudgetPlan::new(xs.clone(), budget) {
            Ok(plan) => {
                prop_assert!(feasible);
                prop_assert!(plan.allocations().iter().all(|a| *a >= 0.0));
                prop_assert!(plan.total() <= budget);
            }
            Err(_) => prop_assert!(!feasible),
        }
    }

    #[test]
    fn episode_outcomes_match_the_plan_length(
        stages in 1usize..7,
        seed in any::<u64>(),
        weights in prop::collection::vec(0.0f64..1.0, 7),
    ) {
        let factory = small_sim(stages, seed);
        let env = factory.advertiser(Split::Train, 0).unwrap();
        let spec = BidderSpec::default();
        let mut bidder = prepare_bidder(env.as_ref(), &spec).unwrap();
        let raw: Vec<f64> = weights[..stages].iter().map(|w| w * env.budget() / stages as f64).collect();
        let plan = BudgetPlan::new(raw, env.budget()).unwrap();
        let episode = env.episode(1).unwrap();
        let (used, outcome) = run_planned_episode(&mut bidder, &episode, env.budget(), &mut PlanAllocator::new(&plan)).unwrap();
        prop_assert_eq!(outcome.stages(), stages);
        prop_assert_eq!(used.stages(), stages);
        for k in 0..stages {
            prop_assert!(outcome.costs()[k] <= plan.allocations()[k]);
            prop_assert!(outcome.returns()[k] >= 0.0);
        }
    }

    #[test]
    fn simulated_episodes_are_deterministic(seed in any::<u64>(), index in 0usize..8) {
        let factory = small_sim(3, seed);
        let a = factory.advertiser(Split::Eval, 3).unwrap();
        let b = factory.advertiser(Split::Eval, 3).unwrap();
        prop_assert_eq!(a.budget().to_bits(), b.budget().to_bits());
        let (ea, eb) = (a.episode(index).unwrap(), b.episode(index).unwrap());
        prop_assert_eq!(ea.impressions(), eb.impressions());
        prop_assert_eq!(ea.boundaries(), eb.boundaries());

        let config = SimConfig { impressions: 40, stages: 4, ..SimConfig::default() };
        let adv = sample_advertiser(&config, &mut rng::stream(seed, &[1])).unwrap();
        let x = generate_episode(&adv, &config, &mut rng::stream(seed, &[2])).unwrap();
        let y = generate_episode(&adv, &config, &mut rng::stream(seed, &[2])).unwrap();
        prop_assert_eq!(x.impressions(), y.impressions());
    }

    #[test]
    fn pareto_shape_stays_in_range(c1 in 0.0f64..=1.0, c2 in 0.0f64..=1.0, n in 1usize..10_000, frac in 0.0f64..=1.0) {
        let i = 1 + ((n - 1) as f64 * frac) as usize;
        let alpha = pareto_shape(Context { c1, c2 }, i, n);
        prop_assert!((2.0..=4.0).contains(&alpha));
    }

    #[test]
    fn stage_partitions_cover_the_episode(m in 1usize..30, extra in 0usize..500, seed in any::<u64>()) {
        let n = m + extra;
        let parts = partition_stages(n, m, &mut rng::stream(seed, &[])).unwrap();
        prop_assert_eq!(parts.stages(), m);
        prop_assert_eq!(parts.lengths().iter().sum::<usize>(), n);
        prop_assert!(parts.lengths().iter().all(|&l| l >= 1));
    }

    #[test]
    fn stage_bidders_never_overspend(
        (values, prices) in stream(200),
        budget in 0.0f64..50.0,
        lambda in 0.01f64..10.0,
        window in 1usize..40,
    ) {
        let imps = impressions(&values, &prices);
        let gains = PidGains { window, ..PidGains::default() };
        let pid = run_stage_pid(&imps, budget, &gains, lambda);
        prop_assert!(pid.cost <= budget && pid.value >= 0.0);
        let lp = run_stage_lp(&imps, budget, lambda).unwrap();
        prop_assert!(lp.cost <= budget && lp.value >= 0.0);
    }

    #[test]
    fn hindsight_lambda_wins_the_best_cpr_prefix((values, prices) in stream(15), budget in 0.0f64..20.0) {
        let lambda = hindsight_lambda(&values, &prices, budget).unwrap();
        let realized = run_stage_lp(&impressions(&values, &prices), budget, lambda).unwrap().value;
        prop_assert_eq!(realized, common::best_cpr_prefix(&values, &prices, budget));
        let optimum = common::knapsack_brute_force(&values, &prices, budget);
        let vmax = values.iter().cloned().fold(0.0, f64::max);
        prop_assert!(realized >= optimum - vmax - 1e-9, "{} vs {} - {}", realized, optimum, vmax);
    }

    #[test]
    fn hindsight_return_is_monotone_in_budget((values, prices) in stream(40), b1 in 0.0f64..30.0, b2 in 0.0f64..30.0) {
        let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        let imps = impressions(&values, &prices);
        let ret = |b: f64| run_stage_lp(&imps, b, hindsight_lambda(&values, &prices, b).unwrap()).unwrap().value;
        prop_assert!(ret(lo) <= ret(hi));
    }

    #[test]
    fn projection_is_idempotent_and_matches_the_oracle(
        raw in prop::collection::vec(-5.0f64..10.0, 1..=8),
        budget in 0.1f64..20.0,
    ) {
        let p = project_onto_budget_simplex(&raw, budget).unwrap();
        prop_assert!(p.allocations().iter().all(|a| *a >= 0.0) && p.total() <= budget);
        let again = project_onto_budget_simplex(p.allocations(), budget).unwrap();
        prop_assert!(common::norm(again.allocations(), p.allocations()) < 1e-12);
        let oracle = common::projection_oracle(&raw, budget);
        prop_assert!(common::norm(p.allocations(), &oracle) < 1e-6);
    }

    #[test]
    fn projection_is_non_expansive(
        pair in (1usize..=8).prop_flat_map(|m| (
            prop::collection::vec(-5.0f64..10.0, m),
            prop::collection::vec(-5.0f64..10.0, m),
        )),
        budget in 0.1f64..20.0,
    ) {
        let (x, y) = pair;
        let px = project_onto_budget_simplex(&x, budget).unwrap();
        let py = project_onto_budget_simplex(&y, budget).unwrap();
        prop_assert!(common::norm(px.allocations(), py.allocations()) <= common::norm(&x, &y) + 1e-12);
    }

    #[test]
    fn applied_actions_stay_feasible(
        pair in (1usize..=8).prop_flat_map(|m| (
            prop::collection::vec(0.0f64..1.0, m),
            prop::collection::vec(-50.0f64..50.0, m),
        )),
        budget in 0.1f64..300.0,
        clamp in prop::option::of(0.05f64..2.0),
    ) {
        let (weights, action) = pair;
        let m = weights.len() as f64;
        let prev = BudgetPlan::new(weights.iter().map(|w| w * budget / m).collect(), budget).unwrap();
        let next = apply_action(&prev, &action, budget, ActionClamp(clamp)).unwrap();
        prop_assert!(next.allocations().iter().all(|a| *a >= 0.0 && a.is_finite()));
        prop_assert!(next.total() <= budget);
    }

    #[test]
    fn network_passes_are_bit_reproducible(seed in any::<u64>(), steps in 1usize..5) {
        let arch = PlannerArch { stages: 2, encoder: 4, hidden: 8, head: 4, ..PlannerArch::default() };
        let net = AbPlannerNet::new(arch, &mut rng::stream(seed, &[0])).unwrap();
        let twin = AbPlannerNet::new(arch, &mut rng::stream(seed, &[0])).unwrap();
        let mut r = rng::stream(seed, &[1]);
        let entries: Vec<Tensor> = (0..steps)
            .map(|_| Tensor::matrix(1, 6, (0..6).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect()).unwrap())
            .collect();
        let run = |n: &AbPlannerNet| {
            let mut tape = Tape::new(n.params());
            let states = n.encode_history(&mut tape, &entries).unwrap();
            let (mean, value) = n.heads(&mut tape, *states.last().unwrap()).unwrap();
            let s = tape.sum(mean);
            let loss = tape.add(s, value).unwrap();
            let grads = tape.backward(loss).unwrap();
            let flat: Vec<u64> = grads.tensors().iter().flat_map(|t| t.data().iter().map(|x| x.to_bits())).collect();
            (tape.scalar(loss).to_bits(), flat)
        };
        prop_assert_eq!(run(&net), run(&twin));
        prop_assert_eq!(run(&net), run(&net));
    }

    #[test]
    fn shape_mismatches_are_rejected(r in 1usize..5, c in 1usize..5, extra in 1usize..3) {
        let store = abplanner::nn::ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.input(&Tensor::zeros(&[r, c]));
        let b = tape.input(&Tensor::zeros(&[r, c + extra]));
        prop_assert!(tape.add(a, b).is_err());
        prop_assert!(tape.mul(a, b).is_err());
        let w = tape.input(&Tensor::zeros(&[2, c + extra]));
        prop_assert!(tape.linear(a, w, None).is_err());
        prop_assert!(Tensor::new(vec![r, c], vec![0.0; r * c + extra]).is_err());
    }

    #[test]
    fn clipped_surrogate_never_exceeds_the_unclipped_one(
        ratios in prop::collection::vec(0.01f64..5.0, 1..20),
        adv_seed in any::<u64>(),
        clip in 0.01f64..0.9,
    ) {
        let n = ratios.len();
        let mut r = rng::stream(adv_seed, &[]);
        let adv: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut r, -3.0..3.0)).collect();
        let store = abplanner::nn::ParamStore::new();
        let mut tape = Tape::new(&store);
        let ratio = tape.input(&Tensor::matrix(n, 1, ratios.clone()).unwrap());
        let a = tape.input(&Tensor::matrix(n, 1, adv.clone()).unwrap());
        let unclipped = tape.mul(ratio, a).unwrap();
        let clamped = tape.clamp(ratio, 1.0 - clip, 1.0 + clip);
        let clipped = tape.mul(clamped, a).unwrap();
        let surrogate = tape.min(unclipped, clipped).unwrap();
        for k in 0..n {
            let s = tape.value(surrogate)[k];
            prop_assert!(s <= tape.value(unclipped)[k]);
        }
    }

    #[test]
    fn normalized_advantages_have_unit_moments(xs in prop::collection::vec(-100.0f64..100.0, 2..200)) {
        let spread = xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-6);
        let mut ys = xs.clone();
        normalize_advantages(&mut ys);
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let std = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() < 1e-6);
        prop_assert!((std - 1.0).abs() < 1e-6);
    }

    #[test]
    fn mckp_matches_enumeration(
        q in (1usize..=4, 2usize..=6).prop_flat_map(|(m, nb)| (
            prop::collection::vec(prop::collection::vec(-5.0f64..10.0, nb), m),
            prop::collection::vec(0.01f64..3.0, nb),
        )),
        budget in 0.0f64..12.0,
    ) {
        let (values, gaps) = q;
        let bins: Vec<f64> = gaps.iter().scan(0.0, |acc, g| { let b = *acc; *acc += g; Some(b) }).collect();
        let sol = solve_mckp(&values, &bins, budget).unwrap();
        match common::mckp_brute_force(&values, &bins, budget) {
            Some(best) => {
                prop_assert!(sol.feasible);
                prop_assert_eq!(sol.objective, best);
                if budget > 0.0 {
                    prop_assert!(sol.plan(budget).unwrap().total() <= budget);
                }
            }
            None => prop_assert!(!sol.feasible),
        }
    }

    #[test]
    fn grid_knapsack_and_equal_split_plans_are_feasible(
        q in (1usize..=6).prop_flat_map(|m| prop::collection::vec(prop::collection::vec(0.0f64..10.0, 9), m)),
        budget in 0.1f64..500.0,
    ) {
        let m = q.len();
        let plan = solve_mckp(&q, &bin_grid(budget, 9).unwrap(), budget).unwrap().plan(budget).unwrap();
        prop_assert!(plan.total() <= budget && plan.stages() == m);
        let equal = equal_split_plan(budget, m).unwrap();
        prop_assert!(equal.total() <= budget && equal.allocations().iter().all(|a| *a >= 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ratios_are_one_under_the_behavior_policy(seed in any::<u64>(), stages in 1usize..4) {
        let factory = small_sim(stages, seed);
        let arch = PlannerArch { stages, encoder: 4, hidden: 6, head: 4, mean_init_scale: 1.0, ..PlannerArch::default() };
        let net = AbPlannerNet::new(arch, &mut rng::stream(seed, &[9])).unwrap();
        let batch: Vec<Rollout> = (0..3)
            .map(|i| {
                let env = factory.advertiser(Split::Train, i).unwrap();
                let mut noise = rng::stream(seed, &[i]);
                run_abplanner(&net, env.as_ref(), &BidderSpec::default(), &PlannerOptions::default(), 2, ActionMode::Sample(&mut noise))
                    .unwrap()
                    .rollout
            })
            .collect();
        for r in importance_ratios(&net, &batch).unwrap() {
            prop_assert!((r - 1.0).abs() < 1e-12, "ratio {}", r);
        }
    }

    #[test]
    fn replay_round_trip_and_ingestion_invariance(
        seed in any::<u64>(),
        advertisers in 1u64..4,
        episodes in 1usize..4,
    ) {
        let factory = small_sim(3, seed);
        let streams = abplanner::replay::collect_streams(&factory, Split::Train, advertisers, episodes).unwrap();
        let mut text = Vec::new();
        export_writer(&mut text, &streams, NaiveDate::from_ymd_opt(2024, 1, 1).unwrap()).unwrap();
        let store = ingest_reader(text.as_slice()).unwrap();
        prop_assert_eq!(store.report.malformed, 0);
        for (id, days) in &streams {
            let logged = &store.advertisers[id];
            prop_assert_eq!(logged.len(), days.len());
            for (day, original) in logged.iter().zip(days) {
                let got: Vec<(u64, u64)> = day.impressions.iter().map(|i| (i.value.to_bits(), i.price.to_bits())).collect();
                let want: Vec<(u64, u64)> = original.iter().map(|i| (i.value().to_bits(), i.price().to_bits())).collect();
                prop_assert_eq!(got, want);
            }
        }

        // Shuffled body lines give the same store.
        let body = String::from_utf8(text.clone()).unwrap();
        let mut lines: Vec<&str> = body.lines().collect();
        let header = lines.remove(0);
        lines.shuffle(&mut rng::stream(seed, &[5]));
        let shuffled = std::iter::once(header).chain(lines).collect::<Vec<_>>().join("\n") + "\n";
        prop_assert_eq!(&ingest_reader(shuffled.as_bytes()).unwrap(), &store);

        // Writing the store back out and ingesting again changes nothing.
        let rewritten = serialize_store(&store);
        prop_assert_eq!(&ingest_reader(rewritten.as_bytes()).unwrap(), &store);
    }
}

fn serialize_store(store: &LogStore) -> String {
    let mut out = String::from("advertiser_id,day,timestamp,value,price\n");
    for (id, days) in &store.advertisers {
        for day in days {
            for i in &day.impressions {
                out.push_str(&format!("{id},{},{},{},{}\n", day.day.format("%Y-%m-%d"), i.timestamp, i.value, i.price));
            }
        }
    }
    out
}
