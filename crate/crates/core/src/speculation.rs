//! Speculative beam extension.
//!
//! A generation round advances every beam of an iteration one token per
//! tick. Slots freed by beams that finish early are handed to speculative
//! branches of finished beams, prioritised by the score bin of their previous
//! verification. Speculative tokens never influence verification; they only
//! give the children of a selected beam a head start in the next iteration.

use alloc::collections::{BTreeSet, VecDeque};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search::{
    child_step_id, duplicate_then_truncate, select_top, Beam, BeamId, SearchConfig, StepId, VerifierScore,
};

/// Score bin and speculative potential of one beam.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecPriority {
    pub beam_id: BeamId,
    /// 1 is the highest-score bin.
    pub bin: u32,
    /// Maximum number of speculative branches, `B − bin + 1`.
    pub potential: u32,
}

/// Equal-width binning of `[0, 1]` into `branching` bins. A score on a bin
/// boundary belongs to the higher bin.
pub fn bin_score(beam_id: BeamId, score: VerifierScore, branching: u32) -> SpecPriority {
    let b = branching.max(1);
    let bf = f64::from(b);
    let raw = libm::ceil(bf - score.value() * bf);
    let bin = (raw.max(1.0) as u32).min(b);
    SpecPriority {
        beam_id,
        bin,
        potential: b - bin + 1,
    }
}

/// Potential for a beam that has not been verified yet: the lowest bin.
fn priority_of(beam_id: BeamId, score: Option<f64>, branching: u32) -> SpecPriority {
    match score {
        Some(s) => bin_score(beam_id, VerifierScore::saturating(s), branching),
        None => SpecPriority {
            beam_id,
            bin: branching.max(1),
            potential: 1,
        },
    }
}

/// Order by potential (descending) then beam id.
fn by_priority(list: &mut [(SpecPriority, u32)]) {
    list.sort_by(|a, b| {
        b.0.potential
            .cmp(&a.0.potential)
            .then(a.0.beam_id.cmp(&b.0.beam_id))
    });
}

fn fill(mut caps: Vec<(SpecPriority, u32)>, free_slots: usize) -> Vec<(BeamId, u32)> {
    by_priority(&mut caps);
    let mut left = free_slots as u32;
    let mut out = Vec::new();
    for (p, cap) in caps {
        if left == 0 {
            break;
        }
        let take = cap.min(left);
        if take > 0 {
            out.push((p.beam_id, take));
            left -= take;
        }
    }
    out
}

/// Fill `free_slots` with speculative branches of finished beams, highest
/// potential first, each beam capped by its potential.
pub fn select_spec(newly_finished: &[(BeamId, f64)], free_slots: usize, branching: u32) -> Vec<(BeamId, u32)> {
    let caps = newly_finished
        .iter()
        .map(|&(id, s)| {
            let p = bin_score(id, VerifierScore::saturating(s), branching);
            (p, p.potential)
        })
        .collect();
    fill(caps, free_slots)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    BeamBatching,
    SpeculativeExecution,
}

pub fn decide_phase(waiting_queue_len: usize, active_paths_scheduled: bool) -> Phase {
    if waiting_queue_len == 0 && active_paths_scheduled {
        Phase::SpeculativeExecution
    } else {
        Phase::BeamBatching
    }
}

/// Set view of a generation round.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SpecState {
    pub finished: BTreeSet<BeamId>,
    pub speculating: BTreeSet<BeamId>,
    pub stragglers: BTreeSet<BeamId>,
    pub slot_capacity: usize,
}

impl SpecState {
    /// Slots in use: stragglers plus speculating beams.
    pub fn occupied(&self) -> usize {
        self.stragglers.len() + self.speculating.len()
    }
}

/// Stop all speculation.
pub fn preempt(mut state: SpecState) -> SpecState {
    state.speculating.clear();
    state
}

/// Input to look-ahead request construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyCandidate {
    pub beam_id: BeamId,
    pub step_tokens: u32,
    /// Speculative continuation toward the first child's step.
    pub speculative: Option<SpeculativeStep>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeculativeStep {
    pub step: StepId,
    pub tokens: u32,
    /// Whether the speculative step reached its end.
    pub complete: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierRequest {
    pub beam_id: BeamId,
    /// Prefill length of the new content.
    pub tokens: u32,
    /// Speculative step verified ahead of time, if merged.
    pub lookahead: Option<StepId>,
}

/// Build verifier requests. With look-ahead enabled, a beam whose speculative
/// continuation completed a whole step is verified together with it in one
/// request; partial speculative steps are never verified early.
pub fn lookahead_requests(candidates: &[VerifyCandidate], lookahead_enabled: bool) -> Vec<VerifierRequest> {
    candidates
        .iter()
        .map(|c| match c.speculative {
            Some(s) if lookahead_enabled && s.complete => VerifierRequest {
                beam_id: c.beam_id,
                tokens: c.step_tokens + s.tokens,
                lookahead: Some(s.step),
            },
            _ => VerifierRequest {
                beam_id: c.beam_id,
                tokens: c.step_tokens,
                lookahead: None,
            },
        })
        .collect()
}

/// One beam's work in a generation round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundBeam {
    pub id: BeamId,
    /// Score of the previous verification, the speculation priority proxy.
    pub prev_score: Option<f64>,
    /// Tokens still to generate for the current step.
    pub remaining: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecBranch {
    /// Round index of the finished beam being extended.
    pub beam: usize,
    /// Child index the branch speculates for.
    pub child: u32,
    /// Length of the speculative step; the branch ends when it is reached.
    pub target: u32,
}

/// Side effects of slot management, e.g. KV residency.
pub trait RoundHooks {
    /// Admit a waiting beam. Returns the tokens that must be recomputed, or
    /// `None` when the beam cannot be admitted yet. Must succeed when `force`
    /// is set (nothing else is running).
    fn admit(&mut self, beam: usize, force: bool) -> Option<u64>;
    fn finish(&mut self, _beam: usize) {}
    /// Start a speculative branch and return the length of its step, or
    /// `None` to leave the slot empty. Unknown lengths may be `u32::MAX`.
    fn spec_start(&mut self, _beam: usize, _child: u32) -> Option<u32> {
        Some(u32::MAX)
    }
    /// Speculative branch reached the end of its step.
    fn spec_finish(&mut self, _beam: usize, _child: u32) {}
    /// Speculative branch discarded by preemption.
    fn spec_drop(&mut self, _beam: usize, _child: u32) {}
}

/// Hooks without memory modelling.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoHooks;

impl RoundHooks for NoHooks {
    fn admit(&mut self, _beam: usize, _force: bool) -> Option<u64> {
        Some(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TickReport {
    pub phase: Phase,
    /// Standard beams that generated a token.
    pub running: usize,
    /// Speculative branches that generated a token.
    pub speculating: usize,
    pub capacity: usize,
    pub newly_finished: Vec<usize>,
    pub recompute_tokens: u64,
    /// Branches dropped at the start of this tick.
    pub preempted: usize,
}

impl TickReport {
    pub fn occupancy(&self) -> f64 {
        (self.running + self.speculating) as f64 / self.capacity as f64
    }

    pub fn batch(&self) -> usize {
        self.running + self.speculating
    }
}

/// Token-level loop of one generation phase with continuous beam batching
/// and preemptible speculation.
#[derive(Debug, Clone)]
pub struct GenerationRound {
    capacity: usize,
    branching: u32,
    speculate: bool,
    beams: Vec<RoundBeam>,
    queue: VecDeque<usize>,
    running: Vec<usize>,
    spec: Vec<SpecBranch>,
    spec_tokens: Vec<Vec<u32>>,
    /// Child slots whose branch was dropped and may be restarted.
    dropped: Vec<Vec<bool>>,
    finished: Vec<bool>,
    finished_order: Vec<usize>,
    generated: Vec<u32>,
    ticks: u64,
}

impl GenerationRound {
    pub fn new(capacity: usize, branching: u32, speculate: bool) -> Self {
        assert!(capacity >= 1, "slot capacity must be >= 1");
        GenerationRound {
            capacity,
            branching: branching.max(1),
            speculate,
            beams: Vec::new(),
            queue: VecDeque::new(),
            running: Vec::new(),
            spec: Vec::new(),
            spec_tokens: Vec::new(),
            dropped: Vec::new(),
            finished: Vec::new(),
            finished_order: Vec::new(),
            generated: Vec::new(),
            ticks: 0,
        }
    }

    /// Append a beam to the waiting queue; returns its round index.
    pub fn enqueue(&mut self, beam: RoundBeam) -> usize {
        let idx = self.beams.len();
        self.beams.push(beam);
        self.spec_tokens.push(Vec::new());
        self.dropped.push(Vec::new());
        self.finished.push(false);
        self.generated.push(0);
        self.queue.push_back(idx);
        idx
    }

    pub fn beam(&self, idx: usize) -> &RoundBeam {
        &self.beams[idx]
    }

    pub fn len(&self) -> usize {
        self.beams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beams.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    pub fn is_done(&self) -> bool {
        self.finished_order.len() == self.beams.len()
    }

    pub fn is_finished(&self, idx: usize) -> bool {
        self.finished[idx]
    }

    pub fn waiting(&self) -> usize {
        self.queue.len()
    }

    pub fn running(&self) -> &[usize] {
        &self.running
    }

    pub fn speculating(&self) -> &[SpecBranch] {
        &self.spec
    }

    /// Tokens generated so far for the beam's current step.
    pub fn generated(&self, idx: usize) -> u32 {
        self.generated[idx]
    }

    /// Speculative tokens per child index.
    pub fn spec_tokens(&self, idx: usize) -> &[u32] {
        &self.spec_tokens[idx]
    }

    pub fn finished_order(&self) -> &[usize] {
        &self.finished_order
    }

    pub fn state(&self) -> SpecState {
        let mut s = SpecState {
            slot_capacity: self.capacity,
            ..SpecState::default()
        };
        for (i, b) in self.beams.iter().enumerate() {
            if self.finished[i] {
                s.finished.insert(b.id);
            } else {
                s.stragglers.insert(b.id);
            }
        }
        for br in &self.spec {
            s.speculating.insert(self.beams[br.beam].id);
        }
        s
    }

    fn mark_finished(&mut self, idx: usize, hooks: &mut impl RoundHooks, out: &mut Vec<usize>) {
        self.finished[idx] = true;
        self.finished_order.push(idx);
        hooks.finish(idx);
        out.push(idx);
    }

    /// Drop every speculative branch and its tokens.
    pub fn preempt(&mut self, hooks: &mut impl RoundHooks) -> usize {
        let n = self.spec.len();
        for br in self.spec.drain(..) {
            hooks.spec_drop(br.beam, br.child);
            self.spec_tokens[br.beam][br.child as usize] = 0;
            self.dropped[br.beam][br.child as usize] = true;
        }
        n
    }

    /// Advance one tick. Returns `None` once no standard beam is left to run.
    pub fn step(&mut self, hooks: &mut impl RoundHooks) -> Option<TickReport> {
        let mut newly_finished = Vec::new();
        let phase = decide_phase(self.queue.len(), true);
        let mut preempted = 0;
        if !self.queue.is_empty() && !self.spec.is_empty() {
            preempted = self.preempt(hooks);
        }

        let mut recompute = 0;
        while self.running.len() + self.spec.len() < self.capacity {
            let Some(&idx) = self.queue.front() else { break };
            let force = self.running.is_empty();
            match hooks.admit(idx, force) {
                Some(r) => {
                    self.queue.pop_front();
                    recompute += r;
                    if self.beams[idx].remaining == 0 {
                        self.mark_finished(idx, hooks, &mut newly_finished);
                    } else {
                        self.running.push(idx);
                    }
                }
                None => {
                    debug_assert!(!force, "forced admission refused");
                    break;
                }
            }
        }
        if self.running.is_empty() {
            debug_assert!(self.queue.is_empty());
            return None;
        }

        if self.speculate && self.queue.is_empty() {
            self.fill_speculation(hooks);
        }

        let running = self.running.len();
        let speculating = self.spec.len();
        let mut still = Vec::with_capacity(self.running.len());
        for idx in core::mem::take(&mut self.running) {
            self.beams[idx].remaining -= 1;
            self.generated[idx] += 1;
            if self.beams[idx].remaining == 0 {
                self.mark_finished(idx, hooks, &mut newly_finished);
            } else {
                still.push(idx);
            }
        }
        self.running = still;
        let mut still = Vec::with_capacity(self.spec.len());
        for br in core::mem::take(&mut self.spec) {
            let t = &mut self.spec_tokens[br.beam][br.child as usize];
            *t += 1;
            if *t >= br.target {
                hooks.spec_finish(br.beam, br.child);
            } else {
                still.push(br);
            }
        }
        self.spec = still;
        self.ticks += 1;
        Some(TickReport {
            phase,
            running,
            speculating,
            capacity: self.capacity,
            newly_finished,
            recompute_tokens: recompute,
            preempted,
        })
    }

    fn fill_speculation(&mut self, hooks: &mut impl RoundHooks) {
        let free = self.capacity - self.running.len() - self.spec.len();
        if free == 0 {
            return;
        }
        let caps: Vec<(SpecPriority, u32)> = self
            .finished_order
            .iter()
            .filter_map(|&i| {
                let b = &self.beams[i];
                let p = priority_of(b.id, b.prev_score, self.branching);
                let started = self.dropped[i].iter().filter(|&&d| !d).count() as u32;
                (p.potential > started).then(|| (p, p.potential - started))
            })
            .collect();
        for (beam_id, count) in fill(caps, free) {
            let idx = self
                .finished_order
                .iter()
                .copied()
                .find(|&i| self.beams[i].id == beam_id)
                .expect("candidate is finished");
            for _ in 0..count {
                let child = match self.dropped[idx].iter().position(|&d| d) {
                    Some(c) => c as u32,
                    None => self.dropped[idx].len() as u32,
                };
                let Some(target) = hooks.spec_start(idx, child) else {
                    return;
                };
                if child as usize == self.dropped[idx].len() {
                    self.dropped[idx].push(false);
                    self.spec_tokens[idx].push(0);
                } else {
                    self.dropped[idx][child as usize] = false;
                }
                self.spec.push(SpecBranch { beam: idx, child, target: target.max(1) });
            }
        }
    }

    /// Run until every standard beam finished; returns the per-tick reports.
    pub fn run(&mut self, hooks: &mut impl RoundHooks) -> Vec<TickReport> {
        let mut out = Vec::new();
        while let Some(r) = self.step(hooks) {
            out.push(r);
        }
        out
    }
}

/// Source of step lengths.
pub trait StepGenerator {
    /// Uncapped length of `step`.
    fn step_len(&mut self, step: StepId) -> Result<u32>;
}

/// Source of verifier scores.
pub trait StepVerifier {
    /// Score of the beam's just-completed step; `beam.last_score` still holds
    /// the previous score.
    fn score(&mut self, beam: &Beam) -> VerifierScore;
}

/// Step lengths replayed from a recorded table.
#[derive(Debug, Clone, Default)]
pub struct TraceGenerator {
    pub lengths: alloc::collections::BTreeMap<StepId, u32>,
}

impl StepGenerator for TraceGenerator {
    fn step_len(&mut self, step: StepId) -> Result<u32> {
        self.lengths.get(&step).copied().ok_or(Error::TraceUnderrun)
    }
}

fn verified_steps(beams: &[Beam]) -> Vec<StepId> {
    beams.iter().map(|b| b.next_step).collect()
}

/// Speculative step lengths from the generator oracle; steps the oracle
/// does not know run until the round ends.
struct ExtendHooks<'a, G> {
    generator: &'a mut G,
    steps: Vec<StepId>,
    cap: u32,
}

impl<G: StepGenerator> RoundHooks for ExtendHooks<'_, G> {
    fn admit(&mut self, _beam: usize, _force: bool) -> Option<u64> {
        Some(0)
    }

    fn spec_start(&mut self, beam: usize, child: u32) -> Option<u32> {
        let step = child_step_id(self.steps[beam], child);
        Some(self.generator.step_len(step).map_or(u32::MAX, |l| l.min(self.cap)))
    }
}

/// Result of one speculative beam extension.
#[derive(Debug, Clone)]
pub struct ExtendOutcome {
    /// Verified beams with their completed step and speculative tokens.
    pub verified: Vec<Beam>,
    pub selected: Vec<(Beam, u32)>,
    pub next: Vec<Beam>,
    pub occupancy: Vec<f64>,
}

/// One iteration of speculative beam extension: generate with speculation,
/// verify, select, then branch and truncate.
///
/// With speculation disabled this is the plain two-stage loop. Scores are
/// computed from the beams' own steps only, so the selection is identical
/// either way.
#[allow(clippy::too_many_arguments)]
pub fn spec_beam_extend<G, V, R>(
    beams: Vec<Beam>,
    config: &SearchConfig,
    iteration: u32,
    slot_capacity: usize,
    generator: &mut G,
    verifier: &mut V,
    rng: &mut R,
    next_id: &mut BeamId,
) -> Result<ExtendOutcome>
where
    G: StepGenerator,
    V: StepVerifier,
    R: Rng + ?Sized,
{
    if beams.is_empty() {
        return Err(Error::NoActiveBeams);
    }
    let cap = config.step_cap(iteration);
    let mut lengths = Vec::with_capacity(beams.len());
    let mut round = GenerationRound::new(slot_capacity, config.branching_factor, config.speculation_enabled);
    for b in &beams {
        let len = generator.step_len(b.next_step)?.min(cap);
        lengths.push(len);
        round.enqueue(RoundBeam {
            id: b.id,
            prev_score: b.last_score,
            remaining: len - b.head_start.min(len),
        });
    }
    let mut hooks = ExtendHooks {
        generator,
        steps: verified_steps(&beams),
        cap: config.step_cap(iteration + 1),
    };
    let occupancy = round.run(&mut hooks).iter().map(TickReport::occupancy).collect();

    let mut verified = beams;
    let mut scores = Vec::with_capacity(verified.len());
    for (i, b) in verified.iter_mut().enumerate() {
        b.complete_step(lengths[i]);
        let s = verifier.score(b);
        b.last_score = Some(s.value());
        b.speculative = round.spec_tokens(i).to_vec();
        scores.push(s);
    }
    let selected = select_top(&verified, &scores, config)?;
    let next = duplicate_then_truncate(&selected, config.truncation_ratio, config.truncation_sd, rng, next_id);
    Ok(ExtendOutcome {
        verified,
        selected,
        next,
        occupancy,
    })
}

/// Step id that speculative branch `child` of `beam` works toward.
pub fn speculative_step(beam: &Beam, child: u32) -> StepId {
    child_step_id(beam.lineage.last().copied().unwrap_or(beam.next_step), child)
}
