//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Exact criteria (1-5, 9, 10) fail the run when they fail. The desk-scale
//! training criteria (6-8) are reported faithfully but do not fail the run:
//! they are qualitative reproductions whose outcome depends on training.
//!
//! `ABPLANNER_ACCEPTANCE=quick` shrinks training for smoke runs; the
//! reported lines then do not correspond to the desk-scale setting.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use abplanner::baselines::solve_mckp;
use abplanner::bidders::{hindsight_lambda, run_stage_lp, run_stage_pid, PidGains};
use abplanner::config::{ExperimentConfig, PlannerKind};
use abplanner::domain::Impression;
use abplanner::env::Split;
use abplanner::experiment::{self, Evaluation, Planner};
use abplanner::hier::project_onto_budget_simplex;
use abplanner::replay;
use abplanner::rng;
use abplanner::simenv::{SimConfig, SimFactory};
use rand::Rng;
use rand_distr::{Distribution, LogNormal};

struct Report {
    failures: Vec<usize>,
}

impl Report {
    /// Prints the criterion line; `gating` failures fail the run.
    fn line(&mut self, id: &str, pass: bool, gating: bool, started: Instant, detail: String) {
        let status = if pass { "PASS" } else { "FAIL" };
        let note = if gating || pass { "" } else { " (reported, not gating)" };
        println!("criterion {id:<3} {status}{note}  [{:.1}s] {detail}", started.elapsed().as_secs_f64());
        if gating && !pass {
            self.failures.push(id.trim_end_matches(|c: char| c.is_alphabetic()).parse().unwrap_or(0));
        }
    }
}

fn quick() -> bool {
    std::env::var("ABPLANNER_ACCEPTANCE").is_ok_and(|v| v == "quick")
}

fn criterion_1(report: &mut Report) {
    let t0 = Instant::now();
    let mut r = rng::stream(1, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let m = r.random_range(2..=8);
        let raw: Vec<f64> = (0..m).map(|_| r.random_range(-5.0..10.0)).collect();
        let budget = r.random_range(0.1..20.0);
        let p = project_onto_budget_simplex(&raw, budget).unwrap();
        worst = worst.max(common::norm(p.allocations(), &common::projection_oracle(&raw, budget)));
    }
    let secs = t0.elapsed().as_secs_f64();
    report.line("1", worst < 1e-6 && secs < 10.0, true, t0, format!("max distance to active-set oracle {worst:.2e} (< 1e-6)"));
}

fn criterion_2(report: &mut Report) {
    let t0 = Instant::now();
    let units = [
        ("dense", common::grad::dense_error()),
        ("relu", common::grad::relu_error()),
        ("sigmoid", common::grad::sigmoid_error()),
        ("tanh", common::grad::tanh_error()),
        ("gru", common::grad::gru_error()),
        ("gaussian", common::grad::gaussian_error()),
        ("network", common::grad::full_network_error()),
    ];
    let worst = units.iter().map(|u| u.1).fold(0.0, f64::max);
    let detail = units.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    let secs = t0.elapsed().as_secs_f64();
    report.line("2", worst < 1e-4 && secs < 60.0, true, t0, format!("worst relative error over 100 seeds: {detail}"));
}

fn criterion_3(report: &mut Report) {
    let t0 = Instant::now();
    let mut r = rng::stream(3, &[]);
    let (mut exact, mut bounded) = (0, 0);
    for _ in 0..500 {
        let n = r.random_range(1..=15);
        let values: Vec<f64> = (0..n).map(|_| if r.random_bool(0.1) { 0.0 } else { r.random_range(0.01..5.0) }).collect();
        let prices: Vec<f64> = (0..n).map(|_| r.random_range(0.05..3.0)).collect();
        let budget = r.random_range(0.0..15.0);
        let imps: Vec<Impression> = (0..n).map(|i| Impression::new(i + 1, values[i], prices[i]).unwrap()).collect();
        let lambda = hindsight_lambda(&values, &prices, budget).unwrap();
        let got = run_stage_lp(&imps, budget, lambda).unwrap().value;
        exact += usize::from(got == common::best_cpr_prefix(&values, &prices, budget));
        let vmax = values.iter().cloned().fold(0.0, f64::max);
        bounded += usize::from(got >= common::knapsack_brute_force(&values, &prices, budget) - vmax);
    }
    let secs = t0.elapsed().as_secs_f64();
    report.line(
        "3",
        exact == 500 && bounded == 500 && secs < 30.0,
        true,
        t0,
        format!("{exact}/500 equal the best ratio prefix, {bounded}/500 within max value of the knapsack optimum"),
    );
}

fn criterion_4(report: &mut Report) {
    let t0 = Instant::now();
    let mut r = rng::stream(4, &[]);
    let mut matched = 0;
    for _ in 0..200 {
        let m = r.random_range(1..=4);
        let nb = r.random_range(2..=6);
        let mut bins = vec![0.0];
        for _ in 1..nb {
            let last = *bins.last().unwrap();
            bins.push(last + r.random_range(0.01..3.0));
        }
        let q: Vec<Vec<f64>> = (0..m).map(|_| (0..nb).map(|_| r.random_range(-5.0..10.0)).collect()).collect();
        let budget = r.random_range(0.0..12.0);
        let sol = solve_mckp(&q, &bins, budget).unwrap();
        let ok = match common::mckp_brute_force(&q, &bins, budget) {
            Some(best) => sol.feasible && sol.objective == best,
            None => !sol.feasible,
        };
        matched += usize::from(ok);
    }
    let secs = t0.elapsed().as_secs_f64();
    report.line("4", matched == 200 && secs < 10.0, true, t0, format!("{matched}/200 match exhaustive enumeration"));
}

fn criterion_5(report: &mut Report) {
    let t0 = Instant::now();
    let price = LogNormal::new(0.1, 0.1).unwrap();
    let budget = 2500.0;
    let mut within = 0;
    for seed in 0..100 {
        let mut r = rng::stream(seed, &[5]);
        let imps: Vec<Impression> = (1..=10_000)
            .map(|i| {
                let p = price.sample(&mut r);
                let ratio = (1.0 - r.random::<f64>()).powf(-1.0 / 3.0);
                Impression::new(i, ratio * p, p).unwrap()
            })
            .collect();
        let supply: f64 = imps.iter().map(|i| i.price()).sum();
        assert!(supply > 2.0 * budget, "winnable supply must exceed the budget");
        let out = run_stage_pid(&imps, budget, &PidGains::default(), 1.0);
        within += usize::from(out.cost <= budget && (budget - out.cost) <= 0.05 * budget);
    }
    report.line("5", within >= 95, true, t0, format!("{within}/100 runs end within 5% of the stage budget (>= 95)"));
}

/// Everything criteria 6, 7 and 10 share.
struct DeskRun {
    cfg: ExperimentConfig,
    planner: Planner,
    eval: Evaluation,
    equal: Evaluation,
}

fn desk_config(out: &Path) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let mut cfg = ExperimentConfig::load(&path).expect("desk config");
    cfg.output.dir = out.to_path_buf();
    if quick() {
        cfg.ppo.iterations = 4;
        cfg.ppo.trajectories = 16;
        cfg.eval.advertisers = 50;
    }
    cfg
}

fn train_and_evaluate(cfg: &ExperimentConfig) -> (Planner, Evaluation) {
    let summary = experiment::train(cfg, &mut |_| {}).expect("training");
    let factory = cfg.factory().unwrap();
    let eval = experiment::evaluate_planner(cfg, factory.as_ref(), &summary.planner).unwrap();
    (summary.planner, eval)
}

fn desk_run(out: &Path) -> DeskRun {
    let cfg = desk_config(out);
    let (planner, eval) = train_and_evaluate(&cfg);
    let mut equal_cfg = cfg.clone();
    equal_cfg.planner.kind = PlannerKind::EqualSplit;
    let factory = cfg.factory().unwrap();
    let equal = experiment::evaluate_planner(&equal_cfg, factory.as_ref(), &Planner::EqualSplit).unwrap();
    DeskRun { cfg, planner, eval, equal }
}

fn criterion_6(report: &mut Report, desk: &DeskRun, t0: Instant) {
    let last = desk.cfg.episodes() - 1;
    let row = &desk.eval.returns[last];
    report.line(
        "6a",
        row.improvement_ci_low > 0.0,
        false,
        t0,
        format!(
            "episode {last}: planner {:.3} vs vanilla {:.3}, improvement {:.3} [95% CI {:.3}, {:.3}] (CI above 0)",
            row.mean_return, row.vanilla_mean_return, row.improvement, row.improvement_ci_low, row.improvement_ci_high
        ),
    );
    let equal_mean = desk.equal.returns[last].mean_return;
    let paired: Vec<f64> = desk.eval.runs.iter().zip(&desk.equal.runs).map(|(p, e)| p.returns()[last] - e.returns()[last]).collect();
    let ci = experiment::paired_ci(&desk.cfg, &paired, 1_000).unwrap();
    report.line(
        "6b",
        row.mean_return >= equal_mean,
        false,
        t0,
        format!(
            "episode {last}: planner {:.3} vs equal split {equal_mean:.3}, difference {:.3} [{:.3}, {:.3}] (>= 0)",
            row.mean_return, ci.mean, ci.low, ci.high
        ),
    );
}

fn criterion_7(report: &mut Report, desk: &DeskRun) {
    let t0 = Instant::now();
    let last = desk.cfg.episodes() - 1;
    let middle = 2..5;
    let initial = desk.eval.stage_share(0, middle.clone());
    let fin = desk.eval.stage_share(last, middle);
    let shift: Vec<f64> = fin.iter().zip(&initial).map(|(f, i)| f - i).collect();
    let ci = experiment::paired_ci(&desk.cfg, &shift, 2_000).unwrap();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    report.line(
        "7",
        ci.low > 0.0,
        false,
        t0,
        format!(
            "stages 3-5 share {:.4} -> {:.4}, shift {:.4} [95% CI {:.4}, {:.4}] (CI above 0)",
            mean(&initial),
            mean(&fin),
            ci.mean,
            ci.low,
            ci.high
        ),
    );
}

fn criterion_8(report: &mut Report, desk: &DeskRun, root: &Path) {
    let t0 = Instant::now();
    let mut parts = Vec::new();
    let mut all_positive = true;
    for m in [3, 6, 12] {
        let improvement = if m == desk.cfg.stages() {
            desk.eval.last_row().improvement
        } else {
            let mut cfg = desk.cfg.with_stages(m);
            cfg.output.dir = root.join(format!("stages-{m}"));
            train_and_evaluate(&cfg).1.last_row().improvement
        };
        all_positive &= improvement > 0.0;
        parts.push(format!("m={m} {improvement:.3}"));
    }
    report.line("8", all_positive, false, t0, format!("last-episode improvement over vanilla: {} (all > 0)", parts.join(", ")));
}

fn criterion_9(report: &mut Report, root: &Path) {
    let t0 = Instant::now();
    let factory = SimFactory::new(SimConfig { impressions: 6000, stages: 6, episodes: 1, ..SimConfig::default() }).unwrap();
    let streams = replay::collect_streams(&factory, Split::Train, 1, 1).unwrap();
    let path = root.join("roundtrip.csv");
    replay::export_logs(&path, &streams, chrono::NaiveDate::from_ymd_opt(2024, 1, 1).unwrap()).unwrap();
    let store = replay::ingest(&path).unwrap();
    let original = &streams[0].1[0];
    let logged = &store.advertisers[&streams[0].0][0].impressions;
    let identical = logged.len() == original.len()
        && logged
            .iter()
            .zip(original)
            .all(|(l, o)| l.value.to_bits() == o.value().to_bits() && l.price.to_bits() == o.price().to_bits());
    report.line("9", identical && original.len() == 6000, true, t0, format!("{} impressions re-ingested bit-exactly: {identical}", logged.len()));
}

fn criterion_10(report: &mut Report, desk: &DeskRun, root: &Path) {
    let t0 = Instant::now();
    let factory = desk.cfg.factory().unwrap();
    let read = |dir: &PathBuf| {
        [experiment::RETURNS_FILE, experiment::PROPORTIONS_FILE].map(|f| std::fs::read(dir.join(f)).unwrap())
    };
    let dirs = [root.join("repeat-a"), root.join("repeat-b")];
    for dir in &dirs {
        let eval = experiment::evaluate_planner(&desk.cfg, factory.as_ref(), &desk.planner).unwrap();
        experiment::write_evaluation(&desk.cfg, &eval, dir).unwrap();
    }
    let first = experiment::returns_csv(&desk.eval.returns).into_bytes();
    let identical = read(&dirs[0]) == read(&dirs[1]) && read(&dirs[0])[0] == first;
    report.line("10", identical, true, t0, format!("repeated evaluation tables byte-identical: {identical}"));
}

fn main() {
    let root = tempfile::tempdir().unwrap();
    let mut report = Report { failures: Vec::new() };
    if quick() {
        println!("quick mode: training criteria run at reduced scale");
    }
    criterion_1(&mut report);
    criterion_2(&mut report);
    criterion_3(&mut report);
    criterion_4(&mut report);
    criterion_5(&mut report);
    let t6 = Instant::now();
    let desk = desk_run(&root.path().join("desk"));
    criterion_6(&mut report, &desk, t6);
    criterion_7(&mut report, &desk);
    criterion_8(&mut report, &desk, root.path());
    criterion_9(&mut report, root.path());
    criterion_10(&mut report, &desk, root.path());
    if !report.failures.is_empty() {
        eprintln!("gating criteria failed: {:?}", report.failures);
        std::process::exit(1);
    }
}
