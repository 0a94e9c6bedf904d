//! Discrete-event simulation of the generation and verification loop.
//!
//! Problems are served one at a time. Each iteration picks batch capacities,
//! orders the beams, runs a token-level generation round over a KV trie,
//! verifies in prefill batches and then selects and branches. Time advances
//! by roofline latencies; nothing is measured on the host.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_trie::KvTrie;
use crate::prefix_sched::{schedule, ScheduleInstance, SchedulePolicy};
use crate::rng::{combine, keyed_rng, PURPOSE_PROBLEM, PURPOSE_SCHEDULE, PURPOSE_TRUNCATE};
use crate::roofline::{
    search_with_offload, stage_time, AllocationProblem, DeviceSpec, ModelProfile, Stage, Strategy,
};
use crate::search::{child_step_id, duplicate_then_truncate, select_top, Beam, BeamId, SearchConfig, StepId};
use crate::speculation::{lookahead_requests, GenerationRound, RoundBeam, RoundHooks, SpeculativeStep, VerifyCandidate};
use crate::workload::{KeyedWorkload, TraceRecord, WorkloadSpec};

/// How the KV budget is split between generator and verifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocator {
    /// Roofline search over batch capacities, with the offload fallback.
    Roofline,
    /// Fixed generator share of the budget.
    StaticSplit(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyBundle {
    pub prefix_sched: SchedulePolicy,
    pub allocator: Allocator,
    pub speculation: bool,
    pub lookahead: bool,
    /// Overrides both cache budgets with this fraction of the iteration's
    /// working set (never below the longest path).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_budget_fraction: Option<f64>,
}

impl PolicyBundle {
    /// Random order, 50/50 split, no speculation, no look-ahead.
    pub fn baseline() -> Self {
        PolicyBundle {
            prefix_sched: SchedulePolicy::Random,
            allocator: Allocator::StaticSplit(0.5),
            speculation: false,
            lookahead: false,
            cache_budget_fraction: None,
        }
    }

    /// Every optimisation enabled.
    pub fn full() -> Self {
        PolicyBundle {
            prefix_sched: SchedulePolicy::Greedy,
            allocator: Allocator::Roofline,
            speculation: true,
            lookahead: true,
            cache_budget_fraction: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub search: SearchConfig,
    pub workload: WorkloadSpec,
    pub device: DeviceSpec,
    pub gen_profile: ModelProfile,
    pub ver_profile: ModelProfile,
    pub policies: PolicyBundle,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            search: SearchConfig::default(),
            workload: WorkloadSpec::default(),
            device: DeviceSpec::edge_gpu(),
            gen_profile: ModelProfile::qwen_1_5b(),
            ver_profile: ModelProfile::mistral_7b(),
            policies: PolicyBundle::full(),
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.search.validate()?;
        self.workload.validate()?;
        self.device.validate()?;
        self.gen_profile
            .validate()
            .map_err(|_| Error::OutOfRange { field: "gen_profile" })?;
        self.ver_profile
            .validate()
            .map_err(|_| Error::OutOfRange { field: "ver_profile" })?;
        if let Allocator::StaticSplit(f) = self.policies.allocator {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::OutOfRange { field: "policies.allocator.static_split" });
            }
        }
        if let Some(f) = self.policies.cache_budget_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::OutOfRange { field: "policies.cache_budget_fraction" });
            }
        }
        Ok(())
    }

    pub fn with_policies(mut self, policies: PolicyBundle) -> Self {
        self.policies = policies;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Search settings with the policy bundle's speculation flags applied.
    pub fn effective_search(&self) -> SearchConfig {
        SearchConfig {
            speculation_enabled: self.policies.speculation,
            lookahead_enabled: self.policies.lookahead,
            ..self.search.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    /// Tokens per second: `avg_beam_token_length / avg_beam_completion_time`.
    pub precise_goodput: f64,
    /// Seconds per problem.
    pub avg_completion_time: f64,
    pub avg_beam_token_length: f64,
    pub avg_beam_completion_time: f64,
    pub completed_beams: u64,
    /// Tokens evicted from the generator cache.
    pub eviction_tokens_total: u64,
    /// Lineage tokens prefilled again after eviction.
    pub recompute_tokens: u64,
    /// Slot occupancy per generation tick.
    pub occupancy_trace: Vec<f64>,
    /// Ticks of each generation round, in order; partitions `occupancy_trace`.
    pub round_ticks: Vec<u64>,
    pub spec_hit_rate: f64,
    pub verifier_time: f64,
    pub generator_time: f64,
}

impl MetricsReport {
    pub fn mean_occupancy(&self) -> f64 {
        if self.occupancy_trace.is_empty() {
            return 0.0;
        }
        self.occupancy_trace.iter().sum::<f64>() / self.occupancy_trace.len() as f64
    }

    /// Occupancy trace split into generation rounds.
    pub fn rounds(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.round_ticks.len());
        let mut at = 0;
        for &t in &self.round_ticks {
            let end = at + t as usize;
            out.push(&self.occupancy_trace[at..end]);
            at = end;
        }
        out
    }
}

/// A finished reasoning path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamCompletion {
    pub tokens: u64,
    /// Seconds from the start of its problem.
    pub seconds: f64,
}

/// Mean path length over mean completion time.
pub fn precise_goodput(completions: &[BeamCompletion]) -> Result<f64> {
    let (len, time) = beam_means(completions)?;
    Ok(len / time)
}

fn beam_means(completions: &[BeamCompletion]) -> Result<(f64, f64)> {
    if completions.is_empty() {
        return Err(Error::NoCompletedBeams);
    }
    let n = completions.len() as f64;
    let len = completions.iter().map(|c| c.tokens as f64).sum::<f64>() / n;
    let time = completions.iter().map(|c| c.seconds).sum::<f64>() / n;
    Ok((len, time))
}

/// Resources of one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationPlan {
    pub slots: usize,
    pub verify_batch: usize,
    pub gen_budget_tokens: u64,
    pub overhead_s: f64,
    pub strategy: Strategy,
}

/// Allocate the KV budget for an iteration whose requests have
/// `mean_lineage` cached tokens and are about to generate a step of
/// `expected_step` tokens on average.
pub fn plan_iteration(config: &SimConfig, n: usize, mean_lineage: f64, expected_step: f64) -> Result<IterationPlan> {
    let seq = libm::ceil(mean_lineage + expected_step).max(1.0) as u64;
    let problem = AllocationProblem {
        n_requests: n as u64,
        verifier_seq: seq,
        decode_len: seq,
        generator: config.gen_profile,
        verifier: config.ver_profile,
        device: config.device,
    };
    let m = config.device.kv_budget_bytes;
    let (b_pre, b_dec, gen_bytes, overhead, strategy) = match config.policies.allocator {
        Allocator::Roofline => {
            let a = search_with_offload(&problem)?;
            match a.strategy {
                Strategy::Collocated => (a.b_pre, a.b_dec, m - a.b_pre * problem.prefill_kv(), 0.0, a.strategy),
                Strategy::Offload => (a.b_pre, a.b_dec, m, config.device.offload_overhead_s, a.strategy),
            }
        }
        Allocator::StaticSplit(f) => {
            let gen = libm::floor(f * m as f64) as u64;
            let ver = m - gen;
            let b_dec = gen / problem.decode_kv().max(1);
            let b_pre = ver / problem.prefill_kv().max(1);
            if b_dec == 0 || b_pre == 0 {
                return Err(Error::MemoryInsufficient);
            }
            (b_pre, b_dec, gen, 0.0, Strategy::Collocated)
        }
    };
    let cap = |b: u64| (b.min(n as u64) as usize).max(1);
    Ok(IterationPlan {
        slots: cap(b_dec),
        verify_batch: cap(b_pre),
        gen_budget_tokens: gen_bytes / config.gen_profile.kv_bytes_per_token(),
        overhead_s: overhead,
        strategy,
    })
}

fn path_tokens(path: &[(StepId, u32)]) -> u64 {
    path.iter().map(|&(_, t)| u64::from(t)).sum()
}

/// Generator-side slot hooks: residency of beam paths and speculative steps.
struct GenHooks<'a> {
    trie: &'a mut KvTrie,
    workload: &'a KeyedWorkload,
    next_cap: u32,
    /// Lineage plus the step being generated, per round index.
    paths: Vec<Vec<(StepId, u32)>>,
    held: Vec<bool>,
    spec: BTreeMap<(usize, u32), Vec<(StepId, u32)>>,
    clock: u64,
}

impl GenHooks<'_> {
    fn child_target(&self, idx: usize, child: u32) -> (StepId, u32) {
        let step = child_step_id(self.paths[idx].last().expect("non-empty path").0, child);
        (step, self.workload.step_len(step).min(self.next_cap))
    }

    fn release_all_spec(&mut self) {
        for path in core::mem::take(&mut self.spec).into_values() {
            self.trie.release_path(&path);
        }
    }
}

impl RoundHooks for GenHooks<'_> {
    fn admit(&mut self, idx: usize, force: bool) -> Option<u64> {
        let path = &self.paths[idx];
        let lineage = path.len() - 1;
        let resident = self.trie.resident_prefix(path).min(lineage);
        let missing = path_tokens(&path[resident..lineage]);
        match self.trie.acquire_path(path, self.clock) {
            Ok(_) => {
                self.held[idx] = true;
                Some(missing)
            }
            // nothing else runs: stream the path without caching it
            Err(_) if force => Some(missing),
            Err(_) => None,
        }
    }

    fn finish(&mut self, idx: usize) {
        if core::mem::take(&mut self.held[idx]) {
            self.trie.release_path(&self.paths[idx]);
        }
    }

    fn spec_start(&mut self, idx: usize, child: u32) -> Option<u32> {
        let mut path = self.paths[idx].clone();
        let (step, target) = self.child_target(idx, child);
        path.push((step, target));
        self.trie.acquire_path(&path, self.clock).ok()?;
        self.spec.insert((idx, child), path);
        Some(target)
    }

    fn spec_finish(&mut self, idx: usize, child: u32) {
        if let Some(path) = self.spec.remove(&(idx, child)) {
            self.trie.release_path(&path);
        }
    }

    fn spec_drop(&mut self, idx: usize, child: u32) {
        if let Some(path) = self.spec.remove(&(idx, child)) {
            self.trie.release_and_drop_tail(&path);
        }
    }
}

#[derive(Default)]
struct Totals {
    gen_time: f64,
    ver_time: f64,
    occupancy: Vec<f64>,
    round_ticks: Vec<u64>,
    spec_tokens: u64,
    spec_hits: u64,
    evicted: u64,
    recompute: u64,
    completions: Vec<BeamCompletion>,
    problem_times: Vec<f64>,
}

struct Problem<'a> {
    config: &'a SimConfig,
    search: SearchConfig,
    workload: KeyedWorkload,
    index: u64,
    gen: KvTrie,
    clock: f64,
    lru_clock: u64,
    preverified: BTreeSet<StepId>,
}

impl Problem<'_> {
    fn run(&mut self, next_id: &mut BeamId, totals: &mut Totals, mut trace: Option<&mut Vec<TraceRecord>>) -> Result<()> {
        let n = self.search.n as usize;
        let b = self.search.branching_factor;
        let iterations = self.search.max_iterations.min(self.config.workload.max_steps);
        let problem_key = combine(PURPOSE_PROBLEM, self.index);
        let mut beams: Vec<Beam> = (0..n)
            .map(|i| {
                let id = *next_id;
                *next_id += 1;
                Beam::new(id, i as u32 % b, combine(problem_key, i as u64))
            })
            .collect();
        let device = self.config.device;
        let gen_profile = self.config.gen_profile;

        for iter in 0..iterations {
            let last = iter + 1 == iterations;
            let cap = self.search.step_cap(iter);
            let next_cap = self.search.step_cap(iter + 1);
            let targets: Vec<u32> = beams.iter().map(|x| self.workload.step_len(x.next_step).min(cap)).collect();
            let paths: Vec<Vec<(StepId, u32)>> = beams
                .iter()
                .zip(&targets)
                .map(|(x, &t)| {
                    let mut p = x.weighted_lineage();
                    p.push((x.next_step, t));
                    p
                })
                .collect();

            let mean_lineage = beams.iter().map(|x| x.total_tokens() as f64).sum::<f64>() / n as f64;
            let expected_step = self.config.workload.step_length_dist.mean().min(f64::from(cap));
            let plan = plan_iteration(self.config, beams.len(), mean_lineage, expected_step)?;
            self.clock += plan.overhead_s;
            totals.gen_time += plan.overhead_s;

            let longest = paths.iter().map(|p| path_tokens(p)).max().unwrap_or(1);
            let gen_budget = match self.config.policies.cache_budget_fraction {
                Some(f) => {
                    let mut seen = BTreeMap::new();
                    for p in &paths {
                        for &(s, t) in p {
                            seen.insert(s, t);
                        }
                    }
                    let ws: u64 = seen.values().map(|&t| u64::from(t)).sum();
                    (libm::ceil(f * ws as f64) as u64).max(longest)
                }
                None => plan.gen_budget_tokens.max(longest),
            };
            self.gen.set_budget(gen_budget)?;

            let instance = ScheduleInstance {
                cots: paths.clone(),
                budget_tokens: gen_budget,
            };
            let mut sched_rng = keyed_rng(self.config.seed, PURPOSE_SCHEDULE, combine(problem_key, u64::from(iter)));
            let order = schedule(self.config.policies.prefix_sched, &instance, &mut sched_rng)?.order;

            // generation
            // the final iteration has no children to give a head start
            let mut round = GenerationRound::new(plan.slots, b, self.search.speculation_enabled && !last);
            for &i in &order {
                let x = &beams[i];
                round.enqueue(RoundBeam {
                    id: x.id,
                    prev_score: x.last_score,
                    remaining: targets[i] - x.head_start.min(targets[i]),
                });
            }
            let lineage_tokens: Vec<u64> = order.iter().map(|&i| beams[i].total_tokens()).collect();
            let round_targets: Vec<u32> = order.iter().map(|&i| targets[i]).collect();
            let mut hooks = GenHooks {
                trie: &mut self.gen,
                workload: &self.workload,
                next_cap,
                paths: order.iter().map(|&i| paths[i].clone()).collect(),
                held: alloc::vec![false; n],
                spec: BTreeMap::new(),
                clock: self.lru_clock,
            };
            while let Some(tick) = round.step(&mut hooks) {
                hooks.clock += 1;
                let mut ctx = 0u64;
                let finished_now = tick.newly_finished.iter().filter(|&&k| round.generated(k) > 0);
                for &k in round.running().iter().chain(finished_now) {
                    let done = round_targets[k] - round.beam(k).remaining;
                    ctx += lineage_tokens[k] + u64::from(done) - 1;
                }
                for br in round.speculating() {
                    let parent = lineage_tokens[br.beam] + u64::from(round_targets[br.beam]);
                    ctx += parent + u64::from(round.spec_tokens(br.beam)[br.child as usize]) - 1;
                }
                let batch = tick.batch() as u64;
                let mut dt = stage_time(&gen_profile, Stage::Decode, batch, 0, ctx as f64 / batch as f64, &device);
                if tick.recompute_tokens > 0 {
                    dt += stage_time(&gen_profile, Stage::Prefill, 1, tick.recompute_tokens, 0.0, &device);
                    totals.recompute += tick.recompute_tokens;
                }
                self.clock += dt;
                totals.gen_time += dt;
                totals.occupancy.push(tick.occupancy());
                debug_assert!(hooks.trie.resident_tokens() <= hooks.trie.budget_tokens());
                debug_assert!(hooks.trie.pinned_tokens() <= hooks.trie.resident_tokens());
            }
            hooks.release_all_spec();
            debug_assert!(hooks.trie.check_invariants(), "generator cache invariant broken");
            self.lru_clock = hooks.clock;
            totals.round_ticks.push(round.ticks());
            let gen_end = self.clock;

            for (k, &i) in order.iter().enumerate() {
                beams[i].complete_step(targets[i]);
                beams[i].speculative = round.spec_tokens(k).to_vec();
                totals.spec_tokens += beams[i].speculative.iter().map(|&t| u64::from(t)).sum::<u64>();
            }

            // verification: the verifier prefills only new step content
            let lookahead = self.search.lookahead_enabled && !last;
            let mut members = Vec::with_capacity(n);
            let mut candidates = Vec::with_capacity(n);
            for &i in &order {
                let x = &beams[i];
                let step = *x.lineage.last().expect("completed step");
                if self.preverified.remove(&step) {
                    continue;
                }
                let child = child_step_id(step, 0);
                let speculative = x.speculative.first().filter(|&&t| t > 0).map(|&tokens| SpeculativeStep {
                    step: child,
                    tokens,
                    complete: tokens >= self.workload.step_len(child).min(next_cap),
                });
                members.push(i);
                candidates.push(VerifyCandidate {
                    beam_id: x.id,
                    step_tokens: targets[i],
                    speculative,
                });
            }
            let requests = lookahead_requests(&candidates, lookahead);
            let mut done_at = alloc::vec![gen_end; n];
            for (chunk, who) in requests.chunks(plan.verify_batch).zip(members.chunks(plan.verify_batch)) {
                let tokens: u64 = chunk.iter().map(|r| u64::from(r.tokens)).sum();
                let t = stage_time(&self.config.ver_profile, Stage::Prefill, 1, tokens, 0.0, &self.config.device);
                self.clock += t;
                totals.ver_time += t;
                for &i in who {
                    done_at[i] = self.clock;
                }
                self.preverified.extend(chunk.iter().filter_map(|r| r.lookahead));
            }

            let mut scores = Vec::with_capacity(n);
            for x in beams.iter_mut() {
                let step = *x.lineage.last().expect("completed step");
                let s = self.workload.score(step, x.last_score);
                x.last_score = Some(s.value());
                scores.push(s);
            }
            let selected = select_top(&beams, &scores, &self.search)?;

            if let Some(out) = trace.as_deref_mut() {
                let chosen: BTreeSet<BeamId> = selected.iter().map(|(x, _)| x.id).collect();
                for x in &beams {
                    let rec = TraceRecord {
                        iter,
                        beam_id: x.id,
                        parent_id: x.parent,
                        step_tokens: *x.step_tokens.last().expect("completed step"),
                        score: x.last_score.expect("verified"),
                        selected: chosen.contains(&x.id),
                        speculative: false,
                    };
                    out.push(rec);
                    for &t in x.speculative.iter().filter(|&&t| t > 0) {
                        out.push(TraceRecord {
                            step_tokens: t,
                            speculative: true,
                            ..rec
                        });
                    }
                }
            }

            if last {
                for (i, x) in beams.iter().enumerate() {
                    totals.completions.push(BeamCompletion {
                        tokens: x.total_tokens(),
                        seconds: done_at[i],
                    });
                }
                break;
            }

            let mut trunc_rng = keyed_rng(self.config.seed, PURPOSE_TRUNCATE, combine(problem_key, u64::from(iter)));
            let next = duplicate_then_truncate(
                &selected,
                self.search.truncation_ratio,
                self.search.truncation_sd,
                &mut trunc_rng,
                next_id,
            );
            let mut at = 0;
            for (parent, count) in &selected {
                let mut hits = alloc::vec![0u32; parent.speculative.len()];
                for c in 0..*count {
                    let child = &next[at + c as usize];
                    if parent.speculative.is_empty() {
                        continue;
                    }
                    let src = if (c as usize) < parent.speculative.len() { c as usize } else { 0 };
                    let target = self.workload.step_len(child.next_step).min(next_cap);
                    hits[src] = hits[src].max(child.head_start.min(target));
                }
                totals.spec_hits += hits.iter().map(|&h| u64::from(h)).sum::<u64>();
                at += *count as usize;
            }
            beams = next;
        }
        totals.problem_times.push(self.clock);
        totals.evicted += self.gen.evicted_total();
        Ok(())
    }
}

fn simulate(config: &SimConfig, mut trace: Option<&mut Vec<TraceRecord>>) -> Result<MetricsReport> {
    config.validate()?;
    let mut totals = Totals::default();
    let mut next_id: BeamId = 0;
    for p in 0..config.workload.num_problems {
        let mut problem = Problem {
            config,
            search: config.effective_search(),
            workload: KeyedWorkload::new(config.seed, config.workload),
            index: u64::from(p),
            gen: KvTrie::new(0),
            clock: 0.0,
            lru_clock: 0,
            preverified: BTreeSet::new(),
        };
        problem.run(&mut next_id, &mut totals, trace.as_deref_mut())?;
    }
    let (avg_len, avg_time) = beam_means(&totals.completions)?;
    let problems = totals.problem_times.len() as f64;
    Ok(MetricsReport {
        precise_goodput: avg_len / avg_time,
        avg_completion_time: totals.problem_times.iter().sum::<f64>() / problems,
        avg_beam_token_length: avg_len,
        avg_beam_completion_time: avg_time,
        completed_beams: totals.completions.len() as u64,
        eviction_tokens_total: totals.evicted,
        recompute_tokens: totals.recompute,
        occupancy_trace: totals.occupancy,
        round_ticks: totals.round_ticks,
        spec_hit_rate: if totals.spec_tokens == 0 {
            0.0
        } else {
            totals.spec_hits as f64 / totals.spec_tokens as f64
        },
        verifier_time: totals.ver_time,
        generator_time: totals.gen_time,
    })
}

/// Run a simulation.
pub fn run(config: &SimConfig) -> Result<MetricsReport> {
    simulate(config, None)
}

/// Run a simulation and record every verified step and speculative branch.
pub fn run_with_trace(config: &SimConfig) -> Result<(MetricsReport, Vec<TraceRecord>)> {
    let mut trace = Vec::new();
    let report = simulate(config, Some(&mut trace))?;
    Ok((report, trace))
}
