//! Shared fixtures for the benchmarks.

use abplanner::domain::Impression;
use abplanner::env::{EnvFactory, Episode, Split};
use abplanner::simenv::{SimConfig, SimFactory};

/// A simulated factory with `impressions` per episode and `stages` stages.
pub fn sim_factory(impressions: usize, stages: usize) -> SimFactory {
    SimFactory::new(SimConfig { impressions, stages, ..SimConfig::default() }).expect("valid config")
}

/// Episode 0 of training advertiser 0.
pub fn sample_episode(impressions: usize, stages: usize) -> Episode {
    sim_factory(impressions, stages)
        .advertiser(Split::Train, 0)
        .and_then(|env| env.episode(0))
        .expect("simulated episode")
}

pub fn values_and_prices(impressions: &[Impression]) -> (Vec<f64>, Vec<f64>) {
    impressions.iter().map(|i| (i.value(), i.price())).unzip()
}
