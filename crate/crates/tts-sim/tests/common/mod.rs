//! Value generators shared by the integration tests.

#![allow(dead_code)]

use proptest::prelude::*;
use rand::Rng;
use tts_sim::compare::{CompareSummary, RunSummary, SeedComparison};
use tts_sim::io::{OccupancySample, ProfilesFile};
use tts_sim::schedule::ScheduleReport;
use tts_sim_core::prefix_sched::{Cot, ScheduleInstance, SchedulePolicy};
use tts_sim_core::roofline::{Allocation, DeviceSpec, ModelProfile, Strategy as AllocStrategy};
use tts_sim_core::search::{SearchConfig, SelectionPolicy};
use tts_sim_core::sim::{Allocator, MetricsReport, PolicyBundle, SimConfig};
use tts_sim_core::workload::{InitialScore, ScoreProcess, StepLengthDist, TraceRecord, WorkloadSpec};

/// Any finite double.
pub fn finite() -> impl Strategy<Value = f64> {
    use proptest::num::f64;
    f64::POSITIVE | f64::NEGATIVE | f64::NORMAL | f64::SUBNORMAL | f64::ZERO
}

pub fn unit() -> impl Strategy<Value = f64> {
    0.0f64..=1.0
}

pub fn selection_policy() -> impl Strategy<Value = SelectionPolicy> {
    prop::sample::select(SelectionPolicy::ALL.to_vec())
}

pub fn schedule_policy() -> impl Strategy<Value = SchedulePolicy> {
    prop::sample::select(vec![SchedulePolicy::Greedy, SchedulePolicy::Random, SchedulePolicy::WorstCase])
}

pub fn search_config() -> impl Strategy<Value = SearchConfig> {
    (
        1u32..=16,
        1u32..=8,
        1u32..=20,
        selection_policy(),
        prop::collection::vec(1u32..=4096, 1..5),
        (0.0f64..=1.0).prop_filter("positive", |r| *r > 0.0),
        0.0f64..=1.0,
        any::<bool>(),
        any::<bool>(),
    )
        .prop_map(|(k, b, iters, policy, schedule, ratio, sd, spec, la)| SearchConfig {
            n: k * b,
            branching_factor: b,
            max_iterations: iters,
            selection_policy: policy,
            step_granularity_schedule: schedule,
            truncation_ratio: ratio,
            truncation_sd: sd,
            speculation_enabled: spec,
            lookahead_enabled: la,
        })
}

pub fn workload() -> impl Strategy<Value = WorkloadSpec> {
    (
        1u32..=10,
        -5.0f64..10.0,
        0.0f64..3.0,
        1u32..=4096,
        0.0f64..1.0,
        prop_oneof![Just(InitialScore::Uniform), unit().prop_map(|value| InitialScore::Fixed { value })],
        1u32..=32,
    )
        .prop_map(|(problems, mu, sigma, cap, rho, initial, steps)| WorkloadSpec {
            num_problems: problems,
            step_length_dist: StepLengthDist {
                lognormal_mu: mu,
                lognormal_sigma: sigma,
                max_tokens: cap,
            },
            score_process: ScoreProcess { rho, initial },
            max_steps: steps,
        })
}

pub fn device() -> impl Strategy<Value = DeviceSpec> {
    (1e-3f64..1e4, 1e-3f64..1e5, 1u64..=u64::MAX, 0.0f64..10.0).prop_map(|(f, bw, m, o)| DeviceSpec {
        peak_tflops: f,
        peak_bw_gbs: bw,
        kv_budget_bytes: m,
        offload_overhead_s: o,
    })
}

pub fn profile() -> impl Strategy<Value = ModelProfile> {
    (1u64..=1 << 40, 1u32..=128, 1u32..=64, 1u32..=512, 1u32..=8).prop_map(|(p, l, h, d, t)| ModelProfile {
        n_params: p,
        n_layers: l,
        n_kv_heads: h,
        head_dim: d,
        dtype_bytes: t,
    })
}

pub fn policies() -> impl Strategy<Value = PolicyBundle> {
    (
        schedule_policy(),
        prop_oneof![
            Just(Allocator::Roofline),
            (0.0f64..1.0).prop_filter("open interval", |f| *f > 0.0).prop_map(Allocator::StaticSplit)
        ],
        any::<bool>(),
        any::<bool>(),
        prop::option::of((0.0f64..=1.0).prop_filter("positive", |f| *f > 0.0)),
    )
        .prop_map(|(prefix_sched, allocator, speculation, lookahead, fraction)| PolicyBundle {
            prefix_sched,
            allocator,
            speculation,
            lookahead,
            cache_budget_fraction: fraction,
        })
}

/// Configs that pass validation.
pub fn sim_config() -> impl Strategy<Value = SimConfig> {
    (search_config(), workload(), device(), profile(), profile(), policies(), any::<u64>()).prop_map(
        |(search, workload, device, gen_profile, ver_profile, policies, seed)| SimConfig {
            search,
            workload,
            device,
            gen_profile,
            ver_profile,
            policies,
            seed,
        },
    )
}

pub fn metrics() -> impl Strategy<Value = MetricsReport> {
    (
        (finite(), finite(), finite(), finite(), any::<u64>(), any::<u64>(), any::<u64>()),
        prop::collection::vec(unit(), 0..50),
        prop::collection::vec(any::<u64>(), 0..10),
        (finite(), finite(), finite()),
    )
        .prop_map(|((g, c, l, bt, n, e, r), occ, rounds, (h, v, gt))| MetricsReport {
            precise_goodput: g,
            avg_completion_time: c,
            avg_beam_token_length: l,
            avg_beam_completion_time: bt,
            completed_beams: n,
            eviction_tokens_total: e,
            recompute_tokens: r,
            occupancy_trace: occ,
            round_ticks: rounds,
            spec_hit_rate: h,
            verifier_time: v,
            generator_time: gt,
        })
}

pub fn trace_record() -> impl Strategy<Value = TraceRecord> {
    (any::<u32>(), any::<u64>(), prop::option::of(any::<u64>()), 1u32..=u32::MAX, finite(), any::<bool>(), any::<bool>())
        .prop_map(|(iter, beam_id, parent_id, step_tokens, score, selected, speculative)| TraceRecord {
            iter,
            beam_id,
            parent_id,
            step_tokens,
            score,
            selected,
            speculative,
        })
}

pub fn occupancy_sample() -> impl Strategy<Value = OccupancySample> {
    (any::<u32>(), any::<u64>(), unit()).prop_map(|(round, tick, occupancy)| OccupancySample { round, tick, occupancy })
}

pub fn profiles_file() -> impl Strategy<Value = ProfilesFile> {
    (profile(), profile(), 1u64..=1 << 20, any::<u64>(), any::<u64>()).prop_map(|(g, v, n, s, d)| ProfilesFile {
        generator: g,
        verifier: v,
        n_requests: n,
        verifier_seq: s,
        decode_len: d,
    })
}

pub fn allocation() -> impl Strategy<Value = Allocation> {
    (any::<u64>(), any::<u64>(), finite(), any::<bool>()).prop_map(|(b_pre, b_dec, t_tot, off)| Allocation {
        b_pre,
        b_dec,
        t_tot,
        strategy: if off { AllocStrategy::Offload } else { AllocStrategy::Collocated },
    })
}

pub fn schedule_report() -> impl Strategy<Value = ScheduleReport> {
    (schedule_policy(), prop::option::of(any::<u32>()), any::<u64>(), prop::collection::vec(any::<u64>(), 0..20), any::<u64>(), any::<u64>())
        .prop_map(|(policy, iter, budget_tokens, order, prefix_sum, eviction_cost)| ScheduleReport {
            policy,
            iter,
            budget_tokens,
            order,
            prefix_sum,
            eviction_cost,
        })
}

fn run_summary() -> impl Strategy<Value = RunSummary> {
    (finite(), finite(), any::<u64>(), unit(), unit(), finite(), finite()).prop_map(|(g, c, e, o, h, v, t)| RunSummary {
        precise_goodput: g,
        avg_completion_time: c,
        eviction_tokens_total: e,
        mean_occupancy: o,
        spec_hit_rate: h,
        verifier_time: v,
        generator_time: t,
    })
}

pub fn compare_summary() -> impl Strategy<Value = CompareSummary> {
    let seed = (any::<u64>(), run_summary(), run_summary(), finite(), finite(), prop::option::of(finite())).prop_map(
        |(seed, baseline, full, g, l, e)| SeedComparison {
            seed,
            baseline,
            full,
            goodput_ratio: g,
            latency_ratio: l,
            eviction_ratio: e,
        },
    );
    (policies(), policies(), prop::collection::vec(seed, 0..5), finite(), finite(), prop::option::of(finite()), any::<bool>(), any::<bool>())
        .prop_map(|(b, f, seeds, g, l, e, gi, lr)| CompareSummary {
            baseline_policies: b,
            full_policies: f,
            seeds,
            mean_goodput_ratio: g,
            mean_latency_ratio: l,
            mean_eviction_ratio: e,
            goodput_improved_on_all: gi,
            latency_reduced_on_all: lr,
        })
}

/// CoTs read off a random branching tree: every root-to-leaf path is one
/// CoT, at most `max_cots` of them, in shuffled order.
pub fn random_tree_instance<R: Rng>(rng: &mut R, max_cots: usize) -> ScheduleInstance {
    use rand::seq::SliceRandom;
    let mut next_id = 1u64;
    let mut frontier: Vec<Cot> = Vec::new();
    for _ in 0..rng.random_range(1..=2) {
        frontier.push(vec![(next_id, rng.random_range(1..=40))]);
        next_id += 1;
    }
    for _ in 1..rng.random_range(1..=5) {
        let mut grown = Vec::new();
        for cot in frontier {
            for _ in 0..rng.random_range(1..=3) {
                let mut c = cot.clone();
                c.push((next_id, rng.random_range(1..=40)));
                next_id += 1;
                grown.push(c);
            }
        }
        grown.shuffle(rng);
        grown.truncate(max_cots);
        frontier = grown;
    }
    let target = rng.random_range(1..=max_cots);
    frontier.shuffle(rng);
    frontier.truncate(target);
    let total: u64 = frontier.iter().flatten().map(|&(_, t)| u64::from(t)).sum();
    ScheduleInstance {
        cots: frontier,
        budget_tokens: total,
    }
}
