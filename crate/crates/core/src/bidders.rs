//! Low-level auto-bidders.
//!
//! Every bidder bids `lambda * value` and never overspends: a won
//! impression whose price exceeds the remaining stage budget is skipped
//! without payment.

use serde::{Deserialize, Serialize};

use crate::domain::{EpisodeOutcome, Impression};
use crate::env::Episode;
use crate::error::{ensure_dims, Error, Result};

/// Aggregate of one stage run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageOutcome {
    pub value: f64,
    pub cost: f64,
    pub wins: usize,
    pub final_shading: f64,
}

/// The bidder wins iff its bid strictly exceeds the highest competing bid.
pub fn win_rule(bid: f64, price: f64) -> bool {
    bid > price
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PidGains {
    /// Impressions between controller updates.
    pub window: usize,
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub initial_lambda: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            window: 50,
            kp: 0.1,
            ki: 0.01,
            kd: 0.0,
            lambda_min: 1e-3,
            lambda_max: 1e3,
            initial_lambda: 1.0,
        }
    }
}

impl PidGains {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("pid window must be >= 1".into()));
        }
        if ![self.kp, self.ki, self.kd].iter().all(|g| g.is_finite()) {
            return Err(Error::Config("pid gains must be finite".into()));
        }
        if !(self.lambda_min > 0.0 && self.lambda_min <= self.lambda_max && self.lambda_max.is_finite()) {
            return Err(Error::Config("need 0 < lambda_min <= lambda_max".into()));
        }
        if !(self.initial_lambda > 0.0 && self.initial_lambda.is_finite()) {
            return Err(Error::Config("initial_lambda must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BidderSpec {
    Pid(PidGains),
    /// Per-stage hindsight-optimal shading from the previous episode.
    LpHindsight,
    /// Constant shading; calibrated on the warm-up stream when unset.
    FixedShading { lambda: Option<f64> },
}

impl Default for BidderSpec {
    fn default() -> Self {
        BidderSpec::Pid(PidGains::default())
    }
}

impl BidderSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            BidderSpec::Pid(g) => g.validate(),
            BidderSpec::LpHindsight => Ok(()),
            BidderSpec::FixedShading { lambda: Some(l) } if !(*l > 0.0 && l.is_finite()) => {
                Err(Error::Config(format!("fixed shading lambda must be > 0, got {l}")))
            }
            BidderSpec::FixedShading { .. } => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BidderSpec::Pid(_) => "pid",
            BidderSpec::LpHindsight => "lp_hindsight",
            BidderSpec::FixedShading { .. } => "fixed_shading",
        }
    }

    /// Whether the bidder must observe a stream before its first episode.
    pub fn needs_warmup(&self) -> bool {
        !matches!(self, BidderSpec::Pid(_) | BidderSpec::FixedShading { lambda: Some(_) })
    }
}

/// Bids `lambda * value` across `impressions` under a hard budget cap,
/// optionally recording which impressions were won.
fn run_constant_shading(impressions: &[Impression], budget: f64, lambda: f64, mut wins: Option<&mut [bool]>) -> StageOutcome {
    let mut out = StageOutcome { value: 0.0, cost: 0.0, wins: 0, final_shading: lambda };
    if budget <= 0.0 {
        return out;
    }
    for (j, imp) in impressions.iter().enumerate() {
        if win_rule(lambda * imp.value(), imp.price()) && out.cost + imp.price() <= budget {
            out.value += imp.value();
            out.cost += imp.price();
            out.wins += 1;
            if let Some(w) = wins.as_deref_mut() {
                w[j] = true;
            }
        }
    }
    out
}

/// Shading factor that, on a known stream, wins exactly the longest
/// budget-feasible prefix of impressions ranked by value-per-price.
///
/// Ties at the cutoff cannot be separated by a single multiplier, so the
/// whole tied group is left out of the prefix. Zero-value impressions are
/// never winnable.
pub fn hindsight_lambda(values: &[f64], prices: &[f64], budget: f64) -> Result<f64> {
    ensure_dims(values.len(), prices.len())?;
    if !(budget >= 0.0) {
        return Err(Error::invalid(format!("budget must be >= 0, got {budget}")));
    }
    if prices.iter().any(|p| !(*p > 0.0)) {
        return Err(Error::invalid("prices must be > 0"));
    }
    let order = cpr_order(values, prices);
    if order.is_empty() {
        return Ok(1.0);
    }
    let ratio = |k: usize| values[order[k]] / prices[order[k]];
    let mut spent = 0.0;
    let mut k = 0;
    while k < order.len() && spent + prices[order[k]] <= budget {
        spent += prices[order[k]];
        k += 1;
    }
    // Pull the cutoff back to the nearest strict drop in ratio.
    while k > 0 && k < order.len() && ratio(k - 1) <= ratio(k) {
        k -= 1;
    }
    Ok(if k == order.len() {
        let worst = order.iter().map(|&i| prices[i] / values[i]).fold(0.0, f64::max);
        2.0 * worst
    } else if k == 0 {
        0.5 / ratio(0)
    } else {
        2.0 / (ratio(k - 1) + ratio(k))
    })
}

/// Indices of positive-value impressions, by ratio descending then price
/// ascending.
pub(crate) fn cpr_order(values: &[f64], prices: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).filter(|&i| values[i] > 0.0).collect();
    order.sort_by(|&a, &b| {
        let ra = values[a] / prices[a];
        let rb = values[b] / prices[b];
        rb.total_cmp(&ra).then(prices[a].total_cmp(&prices[b])).then(a.cmp(&b))
    });
    order
}

fn split_stream(impressions: &[Impression]) -> (Vec<f64>, Vec<f64>) {
    impressions.iter().map(|i| (i.value(), i.price())).unzip()
}

/// Pacing controller: every `window` impressions sets
/// `log lambda = log lambda_0 + kp e + ki sum(e) + kd delta(e)`, where `e`
/// is the lag of cumulative spend behind a straight line reaching
/// `stage_budget` at the end of the stream, measured in units of the
/// per-window budget share so that behaviour does not depend on the
/// stream length.
pub fn run_stage_pid(impressions: &[Impression], stage_budget: f64, gains: &PidGains, initial_lambda: f64) -> StageOutcome {
    pid_pacing(impressions, stage_budget, gains, initial_lambda, None)
}

fn pid_pacing(
    impressions: &[Impression],
    budget: f64,
    gains: &PidGains,
    initial_lambda: f64,
    mut wins: Option<&mut [bool]>,
) -> StageOutcome {
    let (lo, hi) = (gains.lambda_min.ln(), gains.lambda_max.ln());
    let base = initial_lambda.ln().clamp(lo, hi);
    let mut log_lambda = base;
    let mut out = StageOutcome { value: 0.0, cost: 0.0, wins: 0, final_shading: log_lambda.exp() };
    if budget <= 0.0 || impressions.is_empty() {
        return out;
    }
    let len = impressions.len() as f64;
    let window_budget = budget * gains.window as f64 / len;
    let mut integral = 0.0;
    let mut prev_error = 0.0;
    for (j, imp) in impressions.iter().enumerate() {
        if win_rule(log_lambda.exp() * imp.value(), imp.price()) && out.cost + imp.price() <= budget {
            out.value += imp.value();
            out.cost += imp.price();
            out.wins += 1;
            if let Some(w) = wins.as_deref_mut() {
                w[j] = true;
            }
        }
        if (j + 1) % gains.window == 0 {
            let target = budget * (j + 1) as f64 / len;
            let error = (target - out.cost) / window_budget;
            // No integration while pinned at a bound (anti-windup).
            let saturated = (log_lambda >= hi && error > 0.0) || (log_lambda <= lo && error < 0.0);
            if !saturated {
                integral += error;
            }
            let control = gains.kp * error + gains.ki * integral + gains.kd * (error - prev_error);
            log_lambda = (base + control).clamp(lo, hi);
            prev_error = error;
        }
    }
    out.final_shading = log_lambda.exp();
    out
}

/// Bids with a fixed multiplier computed from the previous episode.
pub fn run_stage_lp(impressions: &[Impression], stage_budget: f64, lambda_prev: f64) -> Result<StageOutcome> {
    if !(lambda_prev > 0.0) {
        return Err(Error::invalid(format!("lambda must be > 0, got {lambda_prev}")));
    }
    Ok(run_constant_shading(impressions, stage_budget, lambda_prev, None))
}

/// Episode-spanning bidder state for one advertiser.
#[derive(Debug, Clone)]
pub struct AdvertiserBidder {
    spec: BidderSpec,
    kind: BidderState,
}

#[derive(Debug, Clone)]
enum BidderState {
    Pid { gains: PidGains, carried: f64 },
    Lp { previous: Option<Vec<Vec<Impression>>> },
    Fixed { lambda: Option<f64> },
}

impl AdvertiserBidder {
    pub fn new(spec: BidderSpec) -> Result<Self> {
        spec.validate()?;
        let kind = match spec {
            BidderSpec::Pid(gains) => BidderState::Pid { gains, carried: gains.initial_lambda },
            BidderSpec::LpHindsight => BidderState::Lp { previous: None },
            BidderSpec::FixedShading { lambda } => BidderState::Fixed { lambda },
        };
        Ok(Self { spec, kind })
    }

    pub fn spec(&self) -> &BidderSpec {
        &self.spec
    }

    /// Observes a stream before any bidding (history for LP, calibration
    /// for fixed shading).
    pub fn warm_up(&mut self, episode: &Episode, budget: f64) -> Result<()> {
        match &mut self.kind {
            BidderState::Pid { .. } => {}
            BidderState::Lp { previous } => {
                *previous = Some(episode.stage_slices().into_iter().map(<[Impression]>::to_vec).collect());
            }
            BidderState::Fixed { lambda } => {
                if lambda.is_none() {
                    let (v, p) = split_stream(episode.impressions());
                    *lambda = Some(hindsight_lambda(&v, &p, budget)?);
                }
            }
        }
        Ok(())
    }

    pub(crate) fn begin_episode(&mut self) {
        if let BidderState::Pid { gains, carried } = &mut self.kind {
            *carried = gains.initial_lambda;
        }
    }

    pub(crate) fn end_episode(&mut self, episode: &Episode) {
        if let BidderState::Lp { previous } = &mut self.kind {
            *previous = Some(episode.stage_slices().into_iter().map(<[Impression]>::to_vec).collect());
        }
    }

    fn fixed_lambda(lambda: Option<f64>) -> Result<f64> {
        lambda.ok_or_else(|| Error::invalid("fixed-shading bidder used before calibration"))
    }

    /// Runs stage `stage` with a hard cap of `stage_budget`.
    pub fn run_stage(&mut self, stage: usize, impressions: &[Impression], stage_budget: f64) -> Result<StageOutcome> {
        match &mut self.kind {
            BidderState::Pid { gains, carried } => {
                let out = run_stage_pid(impressions, stage_budget, gains, *carried);
                *carried = out.final_shading;
                Ok(out)
            }
            BidderState::Lp { previous } => {
                let history = previous
                    .as_ref()
                    .ok_or_else(|| Error::invalid("LP bidder needs a previous episode (warm up first)"))?;
                let past = history
                    .get(stage)
                    .ok_or(Error::DimensionMismatch { expected: stage + 1, got: history.len() })?;
                let (v, p) = split_stream(past);
                let lambda = hindsight_lambda(&v, &p, stage_budget)?;
                run_stage_lp(impressions, stage_budget, lambda)
            }
            BidderState::Fixed { lambda } => run_stage_lp(impressions, stage_budget, Self::fixed_lambda(*lambda)?),
        }
    }

    /// The bidder on its own: PID and fixed shading pace over the whole
    /// episode against `budget`; the LP bidder splits the budget evenly.
    pub fn run_unplanned(&mut self, episode: &Episode, budget: f64) -> Result<EpisodeOutcome> {
        let stages = episode.stage_count();
        let mut wins = vec![false; episode.impressions().len()];
        match &self.kind {
            BidderState::Pid { gains, .. } => {
                pid_pacing(episode.impressions(), budget, gains, gains.initial_lambda, Some(&mut wins));
            }
            BidderState::Fixed { lambda } => {
                run_constant_shading(episode.impressions(), budget, Self::fixed_lambda(*lambda)?, Some(&mut wins));
            }
            BidderState::Lp { .. } => {
                let plan = crate::domain::BudgetPlan::equal_split(budget, stages)?;
                let (_, outcome) =
                    crate::env::run_planned_episode(self, episode, budget, &mut crate::env::PlanAllocator::new(&plan))?;
                return Ok(outcome);
            }
        }
        let mut returns = vec![0.0; stages];
        let mut costs = vec![0.0; stages];
        for (k, range) in episode.boundaries().ranges().into_iter().enumerate() {
            for j in range {
                if wins[j] {
                    let imp = &episode.impressions()[j];
                    returns[k] += imp.value();
                    costs[k] += imp.price();
                }
            }
        }
        self.end_episode(episode);
        EpisodeOutcome::new(returns, costs)
    }
}
