//! Baseline versus full-policy comparison over many seeds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tts_sim_core::sim::{run, MetricsReport, PolicyBundle, SimConfig};

/// Headline numbers of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub precise_goodput: f64,
    pub avg_completion_time: f64,
    pub eviction_tokens_total: u64,
    pub mean_occupancy: f64,
    pub spec_hit_rate: f64,
    pub verifier_time: f64,
    pub generator_time: f64,
}

impl From<&MetricsReport> for RunSummary {
    fn from(r: &MetricsReport) -> Self {
        RunSummary {
            precise_goodput: r.precise_goodput,
            avg_completion_time: r.avg_completion_time,
            eviction_tokens_total: r.eviction_tokens_total,
            mean_occupancy: r.mean_occupancy(),
            spec_hit_rate: r.spec_hit_rate,
            verifier_time: r.verifier_time,
            generator_time: r.generator_time,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedComparison {
    pub seed: u64,
    pub baseline: RunSummary,
    pub full: RunSummary,
    /// Full goodput over baseline goodput; above 1 is better.
    pub goodput_ratio: f64,
    /// Full completion time over baseline completion time; below 1 is better.
    pub latency_ratio: f64,
    /// Full evictions over baseline evictions; absent when the baseline
    /// evicted nothing.
    pub eviction_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSummary {
    pub baseline_policies: PolicyBundle,
    pub full_policies: PolicyBundle,
    pub seeds: Vec<SeedComparison>,
    pub mean_goodput_ratio: f64,
    pub mean_latency_ratio: f64,
    pub mean_eviction_ratio: Option<f64>,
    /// Goodput ratio above 1 on every seed.
    pub goodput_improved_on_all: bool,
    /// Latency ratio below 1 on every seed.
    pub latency_reduced_on_all: bool,
}

/// The two bundles being compared; both keep the config's cache budget
/// override.
pub fn bundles(config: &SimConfig) -> (PolicyBundle, PolicyBundle) {
    let fraction = config.policies.cache_budget_fraction;
    (
        PolicyBundle {
            cache_budget_fraction: fraction,
            ..PolicyBundle::baseline()
        },
        PolicyBundle {
            cache_budget_fraction: fraction,
            ..PolicyBundle::full()
        },
    )
}

pub fn compare_seed(config: &SimConfig, seed: u64) -> tts_sim_core::Result<SeedComparison> {
    let (base, full) = bundles(config);
    let b = run(&config.clone().with_seed(seed).with_policies(base))?;
    let f = run(&config.clone().with_seed(seed).with_policies(full))?;
    Ok(SeedComparison {
        seed,
        baseline: RunSummary::from(&b),
        full: RunSummary::from(&f),
        goodput_ratio: f.precise_goodput / b.precise_goodput,
        latency_ratio: f.avg_completion_time / b.avg_completion_time,
        eviction_ratio: (b.eviction_tokens_total > 0)
            .then(|| f.eviction_tokens_total as f64 / b.eviction_tokens_total as f64),
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Run both bundles for every seed in parallel; results keep seed order.
pub fn compare(config: &SimConfig, seeds: &[u64]) -> tts_sim_core::Result<CompareSummary> {
    let per_seed = seeds
        .par_iter()
        .map(|&s| compare_seed(config, s))
        .collect::<tts_sim_core::Result<Vec<_>>>()?;
    let (baseline_policies, full_policies) = bundles(config);
    Ok(CompareSummary {
        baseline_policies,
        full_policies,
        mean_goodput_ratio: mean(per_seed.iter().map(|s| s.goodput_ratio)).unwrap_or(f64::NAN),
        mean_latency_ratio: mean(per_seed.iter().map(|s| s.latency_ratio)).unwrap_or(f64::NAN),
        mean_eviction_ratio: mean(per_seed.iter().filter_map(|s| s.eviction_ratio)),
        goodput_improved_on_all: per_seed.iter().all(|s| s.goodput_ratio > 1.0),
        latency_reduced_on_all: per_seed.iter().all(|s| s.latency_ratio < 1.0),
        seeds: per_seed,
    })
}
