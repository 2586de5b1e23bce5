//! Train, evaluate, sweep and export pipelines driven by an
//! [`ExperimentConfig`], writing tidy CSV tables and JSON manifests.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::{hibid, qmckp, train_hibid, train_qmckp, HibidPolicy, QMckpModel};
use crate::bidders::BidderSpec;
use crate::config::{ExperimentConfig, PlannerKind};
use crate::domain::BudgetPlan;
use crate::env::{AdvertiserEnv, EnvFactory, Split};
use crate::error::{Error, Result};
use crate::nn::{AbPlannerNet, Checkpoint};
use crate::ppo::{self, run_abplanner, ActionMode, MetricsRow, TrainSetup, METRICS_HEADER};
use crate::replay;
use crate::rng::{self, domain};
use crate::runner::{run_fixed_plan, run_vanilla, AdvertiserRun, PlannerOptions};
use crate::stats::{bootstrap_mean_ci, MeanCi};

pub const RETURNS_FILE: &str = "returns.csv";
pub const PROPORTIONS_FILE: &str = "budget_proportions.csv";
pub const ADVERTISER_RETURNS_FILE: &str = "advertiser_returns.csv";
pub const ADVERTISER_PLANS_FILE: &str = "advertiser_plans.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EVAL_MANIFEST_FILE: &str = "eval_manifest.json";
pub const FINAL_CHECKPOINT: &str = "checkpoints/final.json";

/// A planner ready to run on advertisers.
#[derive(Debug, Clone)]
pub enum Planner {
    None,
    EqualSplit,
    AbPlanner(AbPlannerNet),
    Qmckp(QMckpModel),
    Hibid(HibidPolicy),
}

impl Planner {
    pub fn kind(&self) -> PlannerKind {
        match self {
            Planner::None => PlannerKind::None,
            Planner::EqualSplit => PlannerKind::EqualSplit,
            Planner::AbPlanner(_) => PlannerKind::Abplanner,
            Planner::Qmckp(_) => PlannerKind::Qmckp,
            Planner::Hibid(_) => PlannerKind::HibidPrime,
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind().name()
    }

    /// Loads a trained planner of `kind` and checks it plans `stages` stages.
    pub fn from_checkpoint(kind: PlannerKind, ckpt: &Checkpoint, stages: usize) -> Result<Self> {
        let (planner, m) = match kind {
            PlannerKind::Abplanner => {
                let net = AbPlannerNet::from_checkpoint(ckpt)?;
                let m = net.arch().stages;
                (Planner::AbPlanner(net), m)
            }
            PlannerKind::Qmckp => {
                let model = QMckpModel::from_checkpoint(ckpt)?;
                let m = model.arch().stages;
                (Planner::Qmckp(model), m)
            }
            PlannerKind::HibidPrime => {
                let policy = HibidPolicy::from_checkpoint(ckpt)?;
                let m = policy.arch().stages;
                (Planner::Hibid(policy), m)
            }
            PlannerKind::None | PlannerKind::EqualSplit => {
                return Err(Error::Config(format!("planner {} takes no checkpoint", kind.name())))
            }
        };
        if m != stages {
            return Err(Error::Config(format!("checkpoint plans {m} stages but the environment has {stages}")));
        }
        Ok(planner)
    }

    pub fn to_checkpoint(&self) -> Result<Option<Checkpoint>> {
        match self {
            Planner::AbPlanner(n) => n.to_checkpoint().map(Some),
            Planner::Qmckp(q) => q.to_checkpoint().map(Some),
            Planner::Hibid(h) => h.to_checkpoint().map(Some),
            Planner::None | Planner::EqualSplit => Ok(None),
        }
    }

    /// Greedy (mean-action) run over `episodes` episodes.
    pub fn run(&self, env: &dyn AdvertiserEnv, bidder: &BidderSpec, options: &PlannerOptions, episodes: usize) -> Result<AdvertiserRun> {
        let steps = episodes.saturating_sub(1);
        match self {
            Planner::None => run_vanilla(env, bidder, episodes),
            Planner::EqualSplit => run_fixed_plan(env, bidder, &BudgetPlan::equal_split(env.budget(), env.stages())?, episodes),
            Planner::AbPlanner(net) => Ok(run_abplanner(net, env, bidder, options, steps, ActionMode::Mean)?.run),
            Planner::Qmckp(model) => Ok(qmckp::run_qmckp(model, env, bidder, options, steps, None)?.0),
            Planner::Hibid(policy) => Ok(hibid::run_hibid(policy, env, bidder, options, steps, None)?.0),
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub planner: &'static str,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub outputs: Vec<String>,
}

impl Manifest {
    fn new(command: &str, cfg: &ExperimentConfig, outputs: Vec<String>) -> Self {
        Self {
            tool: "abplanner",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            planner: cfg.planner.kind.name(),
            seed: cfg.seed,
            config: cfg.clone(),
            outputs,
        }
    }

    fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        write_file(path, &(text + "\n"))
    }
}

pub fn metrics_csv(planner: &str, rows: &[MetricsRow]) -> String {
    let mut out = format!("planner,{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{planner},{}\n", r.csv_fields()));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub planner: Planner,
    pub metrics: Vec<MetricsRow>,
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
}

/// Trains the configured planner and writes metrics, checkpoints and a
/// manifest under `cfg.output.dir`. `progress` receives one line per
/// iteration.
pub fn train(cfg: &ExperimentConfig, progress: &mut dyn FnMut(&str)) -> Result<TrainSummary> {
    cfg.validate()?;
    let kind = cfg.planner.kind;
    if !kind.trainable() {
        return Err(Error::Config(format!("planner {} has nothing to train", kind.name())));
    }
    let factory = cfg.factory()?;
    let out_dir = cfg.output.dir.clone();
    let ckpt_dir = out_dir.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let m = factory.stages();
    let options = cfg.planner.options();
    let every = cfg.output.checkpoint_every;
    let mut saved = Vec::new();
    let mut save_periodic = |iteration: usize, ckpt: Result<Checkpoint>| -> Result<()> {
        if every > 0 && (iteration + 1) % every == 0 {
            let path = ckpt_dir.join(format!("iter-{:05}.json", iteration + 1));
            ckpt?.save(&path)?;
            saved.push(path);
        }
        Ok(())
    };
    let mut report = |iteration: usize, rows: &[MetricsRow]| {
        if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
            progress(&format!(
                "iteration {iteration}: episode-0 return {:.3}, last-episode return {:.3}, value loss {:.4}",
                first.mean_return, last.mean_return, last.value_loss
            ));
        }
    };
    let (planner, metrics) = match kind {
        PlannerKind::Abplanner => {
            let setup = TrainSetup {
                factory: factory.as_ref(),
                bidder: cfg.bidder,
                options,
                arch: cfg.planner.abplanner_arch(m),
                ppo: cfg.ppo,
                seed: cfg.seed,
            };
            let out = ppo::train(&setup, &mut |r| {
                report(r.iteration, r.rows);
                save_periodic(r.iteration, r.behavior.to_checkpoint())
            })?;
            (Planner::AbPlanner(out.final_net), out.metrics)
        }
        PlannerKind::Qmckp => {
            let out = train_qmckp(factory.as_ref(), &cfg.bidder, &options, cfg.planner.qmckp_arch(m), &cfg.ppo, cfg.seed, &mut |it, rows, model| {
                report(it, rows);
                save_periodic(it, model.to_checkpoint())
            })?;
            (Planner::Qmckp(out.model), out.metrics)
        }
        PlannerKind::HibidPrime => {
            let out = train_hibid(factory.as_ref(), &cfg.bidder, &options, cfg.planner.hibid_arch(m), &cfg.ppo, cfg.seed, &mut |it, rows, policy| {
                report(it, rows);
                save_periodic(it, policy.to_checkpoint())
            })?;
            (Planner::Hibid(out.policy), out.metrics)
        }
        PlannerKind::None | PlannerKind::EqualSplit => unreachable!("checked above"),
    };
    let checkpoint = out_dir.join(FINAL_CHECKPOINT);
    planner.to_checkpoint()?.expect("trainable planners have parameters").save(&checkpoint)?;
    write_file(&out_dir.join(METRICS_FILE), &metrics_csv(kind.name(), &metrics))?;
    let mut outputs = vec![METRICS_FILE.to_string(), FINAL_CHECKPOINT.to_string()];
    outputs.extend(saved.iter().filter_map(|p| p.strip_prefix(&out_dir).ok()).map(|p| p.display().to_string()));
    Manifest::new("train", cfg, outputs).write(&out_dir.join(MANIFEST_FILE))?;
    Ok(TrainSummary { planner, metrics, checkpoint, out_dir })
}

/// Resolves the planner to evaluate: the checkpoint argument, else the
/// configured one, for trained kinds.
pub fn load_planner(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Planner> {
    let kind = cfg.planner.kind;
    match kind {
        PlannerKind::None => Ok(Planner::None),
        PlannerKind::EqualSplit => Ok(Planner::EqualSplit),
        _ => {
            let path = checkpoint
                .map(Path::to_path_buf)
                .or_else(|| cfg.planner.checkpoint.clone())
                .ok_or_else(|| Error::Config(format!("planner {} needs a checkpoint to evaluate", kind.name())))?;
            if !path.exists() {
                return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
            }
            Planner::from_checkpoint(kind, &Checkpoint::load(&path)?, cfg.stages())
        }
    }
}

/// Per-episode-index return summary against the planner-free bidder.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReturnRow {
    pub planner: String,
    pub episode_index: usize,
    pub mean_return: f64,
    pub vanilla_mean_return: f64,
    pub improvement: f64,
    pub improvement_ci_low: f64,
    pub improvement_ci_high: f64,
    pub advertisers: usize,
}

/// Mean share of the budget allocated to one stage at one episode index.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProportionRow {
    pub planner: String,
    pub episode_index: usize,
    pub stage: usize,
    pub mean_proportion: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub planner: String,
    pub runs: Vec<AdvertiserRun>,
    pub vanilla: Vec<AdvertiserRun>,
    pub returns: Vec<ReturnRow>,
    pub proportions: Vec<ProportionRow>,
}

impl Evaluation {
    /// Paired per-advertiser improvement over vanilla at `episode`.
    pub fn improvements(&self, episode: usize) -> Vec<f64> {
        self.runs.iter().zip(&self.vanilla).map(|(p, v)| p.returns()[episode] - v.returns()[episode]).collect()
    }

    /// Per-advertiser budget share of `stages` (0-based) at `episode`.
    pub fn stage_share(&self, episode: usize, stages: std::ops::Range<usize>) -> Vec<f64> {
        self.runs
            .iter()
            .map(|r| {
                let p = r.plans[episode].proportions();
                stages.clone().map(|k| p[k]).sum()
            })
            .collect()
    }

    pub fn last_row(&self) -> &ReturnRow {
        self.returns.last().expect("evaluations cover at least one episode")
    }
}

/// Runs `planner` and the vanilla bidder on eval advertisers
/// `0..advertisers` and summarizes them.
pub fn evaluate_planner(cfg: &ExperimentConfig, factory: &dyn EnvFactory, planner: &Planner) -> Result<Evaluation> {
    let episodes = factory.episodes();
    let options = cfg.planner.options();
    let pairs: Vec<(AdvertiserRun, AdvertiserRun)> = (0..cfg.eval.advertisers as u64)
        .into_par_iter()
        .map(|i| {
            let env = factory.advertiser(Split::Eval, i)?;
            let vanilla = run_vanilla(env.as_ref(), &cfg.bidder, episodes)?;
            let run = match planner {
                Planner::None => vanilla.clone(),
                p => p.run(env.as_ref(), &cfg.bidder, &options, episodes)?,
            };
            Ok((run, vanilla))
        })
        .collect::<Result<_>>()?;
    let (runs, vanilla): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let name = planner.name().to_string();
    let n = runs.len();
    let mut returns = Vec::with_capacity(episodes);
    let mut proportions = Vec::new();
    for t in 0..episodes {
        let diffs: Vec<f64> = runs.iter().zip(&vanilla).map(|(p, v)| p.returns()[t] - v.returns()[t]).collect();
        let ci = bootstrap_mean_ci(
            &diffs,
            cfg.eval.bootstrap_resamples,
            cfg.eval.confidence,
            &mut rng::stream(cfg.seed, &[domain::BOOTSTRAP, t as u64]),
        )?;
        returns.push(ReturnRow {
            planner: name.clone(),
            episode_index: t,
            mean_return: runs.iter().map(|r| r.returns()[t]).sum::<f64>() / n as f64,
            vanilla_mean_return: vanilla.iter().map(|r| r.returns()[t]).sum::<f64>() / n as f64,
            improvement: ci.mean,
            improvement_ci_low: ci.low,
            improvement_ci_high: ci.high,
            advertisers: n,
        });
        let m = factory.stages();
        let mut sums = vec![0.0; m];
        for r in &runs {
            for (s, p) in sums.iter_mut().zip(r.plans[t].proportions()) {
                *s += p;
            }
        }
        for (k, s) in sums.into_iter().enumerate() {
            proportions.push(ProportionRow { planner: name.clone(), episode_index: t, stage: k + 1, mean_proportion: s / n as f64 });
        }
    }
    Ok(Evaluation { planner: name, runs, vanilla, returns, proportions })
}

pub fn returns_csv(rows: &[ReturnRow]) -> String {
    let mut out = String::from(
        "planner,episode_index,mean_return,vanilla_mean_return,improvement,improvement_ci_low,improvement_ci_high,advertisers\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.planner,
            r.episode_index,
            r.mean_return,
            r.vanilla_mean_return,
            r.improvement,
            r.improvement_ci_low,
            r.improvement_ci_high,
            r.advertisers
        ));
    }
    out
}

pub fn proportions_csv(rows: &[ProportionRow]) -> String {
    let mut out = String::from("planner,episode_index,stage,mean_proportion\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.planner, r.episode_index, r.stage, r.mean_proportion));
    }
    out
}

fn advertiser_tables(eval: &Evaluation) -> (String, String) {
    let mut returns = String::from("planner,advertiser_index,advertiser_id,episode_index,return,cost,vanilla_return\n");
    let mut plans = String::from("planner,advertiser_index,advertiser_id,episode_index,stage,allocation,proportion\n");
    for (i, (run, van)) in eval.runs.iter().zip(&eval.vanilla).enumerate() {
        for (t, (o, v)) in run.outcomes.iter().zip(&van.outcomes).enumerate() {
            returns.push_str(&format!(
                "{},{i},{},{t},{},{},{}\n",
                eval.planner,
                run.advertiser,
                o.total_return(),
                o.total_cost(),
                v.total_return()
            ));
            let plan = &run.plans[t];
            for (k, (a, p)) in plan.allocations().iter().zip(plan.proportions()).enumerate() {
                plans.push_str(&format!("{},{i},{},{t},{},{a},{p}\n", eval.planner, run.advertiser, k + 1));
            }
        }
    }
    (returns, plans)
}

/// Writes the evaluation tables and manifest into `dir`.
pub fn write_evaluation(cfg: &ExperimentConfig, eval: &Evaluation, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join(RETURNS_FILE), &returns_csv(&eval.returns))?;
    write_file(&dir.join(PROPORTIONS_FILE), &proportions_csv(&eval.proportions))?;
    let (returns, plans) = advertiser_tables(eval);
    write_file(&dir.join(ADVERTISER_RETURNS_FILE), &returns)?;
    write_file(&dir.join(ADVERTISER_PLANS_FILE), &plans)?;
    let outputs = [RETURNS_FILE, PROPORTIONS_FILE, ADVERTISER_RETURNS_FILE, ADVERTISER_PLANS_FILE].map(String::from).to_vec();
    Manifest::new("eval", cfg, outputs).write(&dir.join(EVAL_MANIFEST_FILE))
}

/// Loads the planner, evaluates it and writes the tables under
/// `cfg.output.dir`.
pub fn evaluate(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Evaluation> {
    cfg.validate()?;
    let planner = load_planner(cfg, checkpoint)?;
    let factory = cfg.factory()?;
    let eval = evaluate_planner(cfg, factory.as_ref(), &planner)?;
    write_evaluation(cfg, &eval, &cfg.output.dir)?;
    Ok(eval)
}

/// Last-episode improvement over vanilla for one stage count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub stages: usize,
    pub run_id: String,
    pub seed: u64,
    pub episode_index: usize,
    pub mean_return: f64,
    pub vanilla_mean_return: f64,
    pub improvement: f64,
    pub improvement_ci_low: f64,
    pub improvement_ci_high: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "stages,run_id,seed,episode_index,mean_return,vanilla_mean_return,improvement,improvement_ci_low,improvement_ci_high\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.stages,
            r.run_id,
            r.seed,
            r.episode_index,
            r.mean_return,
            r.vanilla_mean_return,
            r.improvement,
            r.improvement_ci_low,
            r.improvement_ci_high
        ));
    }
    out
}

/// Trains (when the planner is trainable) and evaluates one planner per
/// stage count, each in `<dir>/stages-<m>`, then writes the sweep table.
pub fn sweep_stages(cfg: &ExperimentConfig, stage_counts: &[usize], progress: &mut dyn FnMut(&str)) -> Result<Vec<SweepRow>> {
    if stage_counts.is_empty() || stage_counts.contains(&0) {
        return Err(Error::Config("stage counts must be a non-empty list of values >= 1".into()));
    }
    let root = cfg.output.dir.clone();
    let mut rows = Vec::with_capacity(stage_counts.len());
    for &m in stage_counts {
        let mut sub = cfg.with_stages(m);
        sub.output.dir = root.join(format!("stages-{m}"));
        sub.validate()?;
        progress(&format!("stages {m}: {}", sub.output.dir.display()));
        let planner = if sub.planner.kind.trainable() {
            train(&sub, progress)?.planner
        } else {
            load_planner(&sub, None)?
        };
        let factory = sub.factory()?;
        let eval = evaluate_planner(&sub, factory.as_ref(), &planner)?;
        write_evaluation(&sub, &eval, &sub.output.dir)?;
        let last = eval.last_row();
        rows.push(SweepRow {
            stages: m,
            run_id: format!("{}-m{m}-seed{}", sub.planner.kind.name(), sub.seed),
            seed: sub.seed,
            episode_index: last.episode_index,
            mean_return: last.mean_return,
            vanilla_mean_return: last.vanilla_mean_return,
            improvement: last.improvement,
            improvement_ci_low: last.improvement_ci_low,
            improvement_ci_high: last.improvement_ci_high,
        });
    }
    write_file(&root.join(SWEEP_FILE), &sweep_csv(&rows))?;
    let mut manifest = Manifest::new("sweep-stages", cfg, vec![SWEEP_FILE.to_string()]);
    manifest.outputs.extend(stage_counts.iter().map(|m| format!("stages-{m}/")));
    manifest.write(&root.join(MANIFEST_FILE))?;
    Ok(rows)
}

/// Writes `advertisers` advertisers of the configured environment's
/// `split` in the replay log format; returns the number of data lines.
pub fn export_logs(cfg: &ExperimentConfig, path: &Path, advertisers: u64, split: Split) -> Result<usize> {
    cfg.validate()?;
    let factory = cfg.factory()?;
    let streams = replay::collect_streams(factory.as_ref(), split, advertisers, factory.episodes())?;
    let start = chrono::NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date");
    replay::export_logs(path, &streams, start)?;
    Ok(streams.iter().flat_map(|(_, days)| days).map(Vec::len).sum())
}

/// Paired bootstrap summary of `xs` under the evaluation settings.
pub fn paired_ci(cfg: &ExperimentConfig, xs: &[f64], label: u64) -> Result<MeanCi> {
    bootstrap_mean_ci(xs, cfg.eval.bootstrap_resamples, cfg.eval.confidence, &mut rng::stream(cfg.seed, &[domain::BOOTSTRAP, label]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(dir: &Path, kind: PlannerKind) -> ExperimentConfig {
        let text = format!(
            r#"
            seed = 3
            [environment]
            kind = "sim"
            impressions = 120
            stages = 3
            episodes = 3
            [bidder]
            kind = "pid"
            window = 5
            [planner]
            kind = "{}"
            encoder = 4
            hidden = 6
            head = 5
            bins = 5
            [ppo]
            iterations = 2
            trajectories = 4
            minibatch = 2
            epochs = 1
            [eval]
            advertisers = 6
            bootstrap_resamples = 50
            [output]
            dir = "{}"
            checkpoint_every = 1
            "#,
            kind.name(),
            dir.display()
        );
        ExperimentConfig::from_toml_str(&text).unwrap()
    }

    #[test]
    fn train_writes_manifest_metrics_and_checkpoints() {
        for kind in [PlannerKind::Abplanner, PlannerKind::Qmckp, PlannerKind::HibidPrime] {
            let dir = tempfile::tempdir().unwrap();
            let cfg = tiny_config(dir.path(), kind);
            let summary = train(&cfg, &mut |_| {}).unwrap();
            assert_eq!(summary.metrics.len(), 2 * 3);
            assert!(dir.path().join(MANIFEST_FILE).exists());
            assert!(dir.path().join("checkpoints/iter-00002.json").exists());
            let metrics = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
            assert_eq!(metrics.lines().count(), 1 + 6);
            assert!(metrics.lines().nth(1).unwrap().starts_with(kind.name()));
            let planner = load_planner(&cfg, Some(&summary.checkpoint)).unwrap();
            assert_eq!(planner.kind(), kind);
        }
    }

    #[test]
    fn untrainable_planners_are_rejected_for_training() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [PlannerKind::None, PlannerKind::EqualSplit] {
            assert!(matches!(train(&tiny_config(dir.path(), kind), &mut |_| {}), Err(Error::Config(_))));
        }
    }

    #[test]
    fn vanilla_eval_has_zero_improvement_and_feasible_proportions() {
        let dir = tempfile::tempdir().unwrap();
        let eval = evaluate(&tiny_config(dir.path(), PlannerKind::None), None).unwrap();
        assert!(eval.returns.iter().all(|r| r.improvement == 0.0 && r.improvement_ci_low == 0.0));
        for t in 0..3 {
            let total: f64 = eval.proportions.iter().filter(|p| p.episode_index == t).map(|p| p.mean_proportion).sum();
            assert!(total <= 1.0 + 1e-9);
        }
        assert!(dir.path().join(RETURNS_FILE).exists());
    }

    #[test]
    fn eval_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for d in [a.path(), b.path()] {
            evaluate(&tiny_config(d, PlannerKind::EqualSplit), None).unwrap();
        }
        for f in [RETURNS_FILE, PROPORTIONS_FILE, ADVERTISER_PLANS_FILE] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
    }

    #[test]
    fn stage_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path(), PlannerKind::Abplanner);
        let summary = train(&cfg, &mut |_| {}).unwrap();
        let other = cfg.with_stages(4);
        assert!(matches!(load_planner(&other, Some(&summary.checkpoint)), Err(Error::Config(_))));
        assert!(matches!(load_planner(&cfg, Some(Path::new("/missing.json"))), Err(Error::Config(_))));
        assert!(matches!(load_planner(&cfg, None), Err(Error::Config(_))));
    }

    #[test]
    fn sweep_has_one_row_per_stage_count() {
        let dir = tempfile::tempdir().unwrap();
        let rows = sweep_stages(&tiny_config(dir.path(), PlannerKind::EqualSplit), &[2, 3], &mut |_| {}).unwrap();
        assert_eq!(rows.iter().map(|r| r.stages).collect::<Vec<_>>(), vec![2, 3]);
        assert_ne!(rows[0].run_id, rows[1].run_id);
        assert!(dir.path().join(SWEEP_FILE).exists());
        assert!(dir.path().join("stages-3").join(RETURNS_FILE).exists());
    }

    #[test]
    fn export_writes_one_line_per_impression() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path(), PlannerKind::None);
        let path = dir.path().join("logs.csv");
        let n = export_logs(&cfg, &path, 2, Split::Train).unwrap();
        assert_eq!(n, 2 * 3 * 120);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), n + 1);
        let again = dir.path().join("again.csv");
        export_logs(&cfg, &again, 2, Split::Train).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }
}
