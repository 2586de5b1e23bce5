//! Bidding-log ingestion, export and the replay environment.
//!
//! Log files are UTF-8 CSV with the header
//! `advertiser_id,day,timestamp,value,price`: one impression per line,
//! `day` an ISO-8601 date and `timestamp` integer seconds of that day.
//! Each (advertiser, day) becomes one episode; day `k` in date order is
//! episode `k`, cycling when more episodes are requested than days exist.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::domain::{Impression, StageBoundaries};
use crate::env::{AdvertiserEnv, EnvFactory, Episode, Split};
use crate::error::{Error, Result};
use crate::rng::{self, domain};

pub const SECONDS_PER_DAY: u32 = 86_400;
pub const LOG_HEADER: [&str; 5] = ["advertiser_id", "day", "timestamp", "value", "price"];
/// Largest tolerated share of malformed data lines; a single malformed
/// line is always tolerated.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

/// Malformed lines tolerated among `total` data lines.
pub fn malformed_allowance(total: usize) -> usize {
    ((total as f64 * MAX_MALFORMED_FRACTION).floor() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub advertiser_id: String,
    pub day: NaiveDate,
    pub timestamp: u32,
    pub value: f64,
    pub price: f64,
}

impl LogRecord {
    fn parse(fields: &csv::StringRecord) -> std::result::Result<Self, String> {
        if fields.len() != LOG_HEADER.len() {
            return Err(format!("expected {} fields, got {}", LOG_HEADER.len(), fields.len()));
        }
        let advertiser_id = fields[0].to_string();
        if advertiser_id.is_empty() {
            return Err("empty advertiser_id".into());
        }
        let day = NaiveDate::parse_from_str(&fields[1], "%Y-%m-%d").map_err(|e| format!("day: {e}"))?;
        let timestamp: u32 = fields[2].parse().map_err(|e| format!("timestamp: {e}"))?;
        if timestamp >= SECONDS_PER_DAY {
            return Err(format!("timestamp {timestamp} outside [0, {SECONDS_PER_DAY})"));
        }
        let value: f64 = fields[3].parse().map_err(|e| format!("value: {e}"))?;
        let price: f64 = fields[4].parse().map_err(|e| format!("price: {e}"))?;
        if !(value.is_finite() && value >= 0.0) {
            return Err(format!("value must be finite and >= 0, got {value}"));
        }
        if !(price.is_finite() && price > 0.0) {
            return Err(format!("price must be finite and > 0, got {price}"));
        }
        Ok(Self { advertiser_id, day, timestamp, value, price })
    }
}

/// One impression of a replayed day.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoggedImpression {
    pub timestamp: u32,
    pub value: f64,
    pub price: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DayLog {
    pub day: NaiveDate,
    /// Sorted by timestamp, then value, then price.
    pub impressions: Vec<LoggedImpression>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub records: usize,
    pub malformed: usize,
    /// Up to the first ten diagnostics, as `line N: reason`.
    pub diagnostics: Vec<String>,
}

/// Ingested logs: advertiser id to its days in date order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LogStore {
    pub advertisers: BTreeMap<String, Vec<DayLog>>,
    pub report: IngestReport,
}

impl LogStore {
    pub fn impressions(&self) -> usize {
        self.advertisers.values().flatten().map(|d| d.impressions.len()).sum()
    }
}

/// Parses log text. Malformed lines are skipped and reported; more than
/// 1% malformed (and more than one) aborts.
pub fn ingest_reader<R: std::io::Read>(reader: R) -> Result<LogStore> {
    let mut csv = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut rows = csv.records();
    let header = match rows.next() {
        None => return Ok(LogStore::default()),
        Some(h) => h.map_err(|e| Error::Malformed(format!("header: {e}")))?,
    };
    if header.iter().map(str::trim).ne(LOG_HEADER.iter().copied()) {
        return Err(Error::Malformed(format!("expected header `{}`", LOG_HEADER.join(","))));
    }
    let mut report = IngestReport::default();
    let mut groups: BTreeMap<String, BTreeMap<NaiveDate, Vec<LoggedImpression>>> = BTreeMap::new();
    for (k, row) in rows.enumerate() {
        let line = k + 2;
        let parsed = row.map_err(|e| e.to_string()).and_then(|r| LogRecord::parse(&r));
        match parsed {
            Ok(r) => {
                report.records += 1;
                groups.entry(r.advertiser_id).or_default().entry(r.day).or_default().push(LoggedImpression {
                    timestamp: r.timestamp,
                    value: r.value,
                    price: r.price,
                });
            }
            Err(reason) => {
                report.malformed += 1;
                if report.diagnostics.len() < 10 {
                    report.diagnostics.push(format!("line {line}: {reason}"));
                }
            }
        }
    }
    let total = report.records + report.malformed;
    if report.malformed > malformed_allowance(total) {
        return Err(Error::Malformed(format!(
            "{} of {} lines malformed (limit {}); first: {}",
            report.malformed,
            total,
            malformed_allowance(total),
            report.diagnostics.first().map_or("", String::as_str)
        )));
    }
    let advertisers = groups
        .into_iter()
        .map(|(id, days)| {
            let days = days
                .into_iter()
                .map(|(day, mut impressions)| {
                    impressions.sort_by(|a, b| {
                        a.timestamp
                            .cmp(&b.timestamp)
                            .then(a.value.total_cmp(&b.value))
                            .then(a.price.total_cmp(&b.price))
                    });
                    DayLog { day, impressions }
                })
                .collect();
            (id, days)
        })
        .collect();
    Ok(LogStore { advertisers, report })
}

pub fn ingest(path: &Path) -> Result<LogStore> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(std::io::BufReader::new(file))
}

/// Hourly (for `m = 24`) stage lengths: stage `k` holds timestamps in
/// `[k D / m, (k + 1) D / m)` with `D` seconds per day.
pub fn replay_stage_partition(timestamps: &[u32], m: usize) -> Result<StageBoundaries> {
    if m == 0 || SECONDS_PER_DAY as usize % m != 0 {
        return Err(Error::Config(format!("stage count {m} must divide {SECONDS_PER_DAY}")));
    }
    let width = SECONDS_PER_DAY as usize / m;
    let mut lengths = vec![0; m];
    for &ts in timestamps {
        if ts >= SECONDS_PER_DAY {
            return Err(Error::invalid(format!("timestamp {ts} outside the day")));
        }
        lengths[ts as usize / width] += 1;
    }
    StageBoundaries::allowing_empty(lengths)
}

/// A replayed day as an episode; impressions are indexed from 1.
pub fn day_episode(day: &DayLog, m: usize) -> Result<Episode> {
    let timestamps: Vec<u32> = day.impressions.iter().map(|i| i.timestamp).collect();
    let stages = replay_stage_partition(&timestamps, m)?;
    let impressions = day
        .impressions
        .iter()
        .enumerate()
        .map(|(j, i)| Impression::new(j + 1, i.value, i.price))
        .collect::<Result<Vec<_>>>()?;
    Episode::new(impressions, stages)
}

/// Evenly spread second-of-day stamps for `n` impressions; distinct
/// whenever `n <= 86400`.
pub fn synthetic_timestamps(n: usize) -> Result<Vec<u32>> {
    if n > SECONDS_PER_DAY as usize {
        return Err(Error::invalid(format!("cannot give {n} impressions distinct seconds in one day")));
    }
    Ok((0..n).map(|j| (j as u64 * SECONDS_PER_DAY as u64 / n.max(1) as u64) as u32).collect())
}

/// Writes streams as log lines; episode `k` of each advertiser is dated
/// `start + k` days. Floats use the shortest representation that parses
/// back to the same value.
pub fn export_writer<W: Write>(writer: W, streams: &[(String, Vec<Vec<Impression>>)], start: NaiveDate) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Malformed(format!("writing log: {e}"));
    out.write_record(LOG_HEADER).map_err(csv_err)?;
    for (id, episodes) in streams {
        if id.is_empty() || id.contains([',', '\n', '\r', '"']) {
            return Err(Error::invalid(format!("advertiser id {id:?} cannot be written unquoted")));
        }
        for (k, impressions) in episodes.iter().enumerate() {
            let day = start
                .checked_add_days(chrono::Days::new(k as u64))
                .ok_or_else(|| Error::invalid("export date overflow"))?;
            let day = day.format("%Y-%m-%d").to_string();
            for (ts, imp) in synthetic_timestamps(impressions.len())?.into_iter().zip(impressions) {
                out.write_record([id.as_str(), &day, &ts.to_string(), &imp.value().to_string(), &imp.price().to_string()])
                    .map_err(csv_err)?;
            }
        }
    }
    out.flush().map_err(|e| Error::Malformed(format!("writing log: {e}")))?;
    Ok(())
}

pub fn export_logs(path: &Path, streams: &[(String, Vec<Vec<Impression>>)], start: NaiveDate) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    export_writer(std::io::BufWriter::new(file), streams, start)
}

/// Episodes `0..episodes` of advertisers `0..count` of `factory`'s split.
pub fn collect_streams(
    factory: &dyn EnvFactory,
    split: Split,
    count: u64,
    episodes: usize,
) -> Result<Vec<(String, Vec<Vec<Impression>>)>> {
    (0..count)
        .map(|i| {
            let env = factory.advertiser(split, i)?;
            let days = (0..episodes)
                .map(|t| Ok(env.episode(t)?.impressions().to_vec()))
                .collect::<Result<Vec<_>>>()?;
            Ok((env.id().to_string(), days))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayConfig {
    /// Stages per day; must divide 86400.
    pub stages: usize,
    /// Episodes per advertiser, including the initial one.
    pub episodes: usize,
    /// Budget of advertisers without an entry in `budgets`.
    pub budget: f64,
    pub budgets: BTreeMap<String, f64>,
    /// Share of advertisers held out for evaluation.
    pub eval_fraction: f64,
    /// Seeds the train/eval assignment.
    pub seed: u64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self { stages: 24, episodes: 8, budget: 150.0, budgets: BTreeMap::new(), eval_fraction: 0.1, seed: 0 }
    }
}

impl ReplayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || SECONDS_PER_DAY as usize % self.stages != 0 {
            return Err(Error::Config(format!("replay stages {} must divide {SECONDS_PER_DAY}", self.stages)));
        }
        if self.episodes == 0 {
            return Err(Error::Config("episodes must be >= 1".into()));
        }
        if std::iter::once(&self.budget).chain(self.budgets.values()).any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(Error::Config("replay budgets must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::Config("eval_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One logged advertiser; episode `t` replays day `t mod days`.
#[derive(Debug, Clone)]
pub struct ReplayAdvertiserEnv {
    id: String,
    budget: f64,
    days: Arc<Vec<Episode>>,
    stages: usize,
}

impl AdvertiserEnv for ReplayAdvertiserEnv {
    fn id(&self) -> &str {
        &self.id
    }

    fn budget(&self) -> f64 {
        self.budget
    }

    fn stages(&self) -> usize {
        self.stages
    }

    fn episode(&self, index: usize) -> Result<Episode> {
        Ok(self.days[index % self.days.len()].clone())
    }

    /// The last logged day, i.e. the day cyclically preceding episode 0.
    fn warmup_episode(&self) -> Result<Episode> {
        Ok(self.days[self.days.len() - 1].clone())
    }
}

/// Logged advertisers split into train and eval; indices wrap around each
/// split's size.
#[derive(Debug, Clone)]
pub struct ReplayFactory {
    config: ReplayConfig,
    train: Vec<ReplayAdvertiserEnv>,
    eval: Vec<ReplayAdvertiserEnv>,
}

impl ReplayFactory {
    pub fn new(store: &LogStore, config: ReplayConfig) -> Result<Self> {
        config.validate()?;
        let mut envs = store
            .advertisers
            .iter()
            .filter(|(_, days)| !days.is_empty())
            .map(|(id, days)| {
                let episodes = days.iter().map(|d| day_episode(d, config.stages)).collect::<Result<Vec<_>>>()?;
                Ok(ReplayAdvertiserEnv {
                    id: id.clone(),
                    budget: config.budgets.get(id).copied().unwrap_or(config.budget),
                    days: Arc::new(episodes),
                    stages: config.stages,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if envs.len() < 2 {
            return Err(Error::Config("replay needs at least 2 advertisers to form train and eval splits".into()));
        }
        envs.shuffle(&mut rng::stream(config.seed, &[domain::ADVERTISER]));
        let held_out = ((envs.len() as f64 * config.eval_fraction).round() as usize).clamp(1, envs.len() - 1);
        let train = envs.split_off(held_out);
        Ok(Self { config, train, eval: envs })
    }

    pub fn config(&self) -> &ReplayConfig {
        &self.config
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train.len(),
            Split::Eval => self.eval.len(),
        }
    }
}

impl EnvFactory for ReplayFactory {
    fn stages(&self) -> usize {
        self.config.stages
    }

    fn episodes(&self) -> usize {
        self.config.episodes
    }

    fn advertiser(&self, split: Split, index: u64) -> Result<Box<dyn AdvertiserEnv>> {
        let pool = match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
        };
        Ok(Box::new(pool[(index % pool.len() as u64) as usize].clone()))
    }
}
