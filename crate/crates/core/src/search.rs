//! Beams, search configuration and the selection/branching primitives shared
//! by every search policy.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::combine;

pub type BeamId = u64;
pub type StepId = u64;

/// Default spread of the retained-fraction distribution used when truncating
/// speculative tokens on duplicates.
pub const DEFAULT_TRUNCATION_SD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeamState {
    Running,
    StepFinished,
    Speculative,
    Terminated,
}

/// One reasoning path.
///
/// A beam generates exactly one step (`next_step`). When that step completes
/// it is appended to `lineage`, and branching creates fresh child beams that
/// share the lineage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Beam {
    pub id: BeamId,
    pub parent: Option<BeamId>,
    /// Subtree the beam descends from; used by diverse selection.
    pub root: u32,
    pub lineage: Vec<StepId>,
    pub step_tokens: Vec<u32>,
    pub last_score: Option<f64>,
    pub state: BeamState,
    /// Step this beam is generating (or has just generated).
    pub next_step: StepId,
    /// Speculative tokens per speculative branch; index `i` targets child `i`.
    pub speculative: Vec<u32>,
    /// Tokens of `next_step` already produced speculatively by the parent.
    pub head_start: u32,
}

impl Beam {
    pub fn new(id: BeamId, root: u32, next_step: StepId) -> Self {
        Beam {
            id,
            parent: None,
            root,
            lineage: Vec::new(),
            step_tokens: Vec::new(),
            last_score: None,
            state: BeamState::Running,
            next_step,
            speculative: Vec::new(),
            head_start: 0,
        }
    }

    /// Record completion of `next_step` with `tokens` tokens.
    pub fn complete_step(&mut self, tokens: u32) {
        self.lineage.push(self.next_step);
        self.step_tokens.push(tokens);
        self.state = BeamState::StepFinished;
    }

    pub fn total_tokens(&self) -> u64 {
        self.step_tokens.iter().map(|&t| u64::from(t)).sum()
    }

    /// Lineage paired with per-step token weights.
    pub fn weighted_lineage(&self) -> Vec<(StepId, u32)> {
        self.lineage
            .iter()
            .copied()
            .zip(self.step_tokens.iter().copied())
            .collect()
    }

    pub fn speculative_tokens(&self) -> u32 {
        self.speculative.iter().sum()
    }
}

/// Step id of the `child_index`-th child of a beam whose last completed step
/// is `completed`.
pub fn child_step_id(completed: StepId, child_index: u32) -> StepId {
    combine(completed, u64::from(child_index) + 1)
}

/// Verifier score, always within `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct VerifierScore(f64);

impl VerifierScore {
    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(VerifierScore(value))
        } else {
            Err(Error::OutOfRange { field: "score" })
        }
    }

    /// Clamps into range; NaN maps to 0.
    pub fn saturating(value: f64) -> Self {
        if value.is_nan() {
            VerifierScore(0.0)
        } else {
            VerifierScore(value.clamp(0.0, 1.0))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    BeamSearch,
    DiverseSelection,
    DynamicBranching,
    BestOfN,
}

impl SelectionPolicy {
    pub const ALL: [SelectionPolicy; 4] = [
        SelectionPolicy::BeamSearch,
        SelectionPolicy::DiverseSelection,
        SelectionPolicy::DynamicBranching,
        SelectionPolicy::BestOfN,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    /// Total beam budget.
    pub n: u32,
    pub branching_factor: u32,
    pub max_iterations: u32,
    pub selection_policy: SelectionPolicy,
    /// Per-iteration step-length caps; the last entry repeats.
    pub step_granularity_schedule: Vec<u32>,
    /// Mean retained fraction of speculative tokens on duplicates.
    pub truncation_ratio: f64,
    #[serde(default = "default_truncation_sd")]
    pub truncation_sd: f64,
    pub speculation_enabled: bool,
    pub lookahead_enabled: bool,
}

fn default_truncation_sd() -> f64 {
    DEFAULT_TRUNCATION_SD
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            n: 64,
            branching_factor: 4,
            max_iterations: 8,
            selection_policy: SelectionPolicy::BeamSearch,
            step_granularity_schedule: alloc::vec![2048],
            truncation_ratio: 0.85,
            truncation_sd: DEFAULT_TRUNCATION_SD,
            speculation_enabled: false,
            lookahead_enabled: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::OutOfRange { field: "search.n" });
        }
        if self.branching_factor == 0 {
            return Err(Error::OutOfRange {
                field: "search.branching_factor",
            });
        }
        if matches!(
            self.selection_policy,
            SelectionPolicy::BeamSearch | SelectionPolicy::DiverseSelection
        ) && !self.n.is_multiple_of(self.branching_factor)
        {
            return Err(Error::InvalidConfig(
                "search.n must be a multiple of search.branching_factor",
            ));
        }
        if self.max_iterations == 0 {
            return Err(Error::OutOfRange {
                field: "search.max_iterations",
            });
        }
        if self.step_granularity_schedule.is_empty()
            || self.step_granularity_schedule.contains(&0)
        {
            return Err(Error::OutOfRange {
                field: "search.step_granularity_schedule",
            });
        }
        if !(self.truncation_ratio > 0.0 && self.truncation_ratio <= 1.0) {
            return Err(Error::OutOfRange {
                field: "search.truncation_ratio",
            });
        }
        if !(self.truncation_sd >= 0.0 && self.truncation_sd.is_finite()) {
            return Err(Error::OutOfRange {
                field: "search.truncation_sd",
            });
        }
        Ok(())
    }

    /// Maximum step length at `iteration` (0-based).
    pub fn step_cap(&self, iteration: u32) -> u32 {
        let schedule = &self.step_granularity_schedule;
        let idx = (iteration as usize).min(schedule.len().saturating_sub(1));
        schedule.get(idx).copied().unwrap_or(u32::MAX)
    }
}

/// Score-descending, id-ascending.
fn rank_order(a: (f64, BeamId), b: (f64, BeamId)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

/// Indices of `beams` sorted best first.
fn ranked(beams: &[Beam], scores: &[VerifierScore]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..beams.len()).collect();
    idx.sort_by(|&a, &b| rank_order((scores[a].value(), beams[a].id), (scores[b].value(), beams[b].id)));
    idx
}

/// Choose the beams to keep and how many children each one gets.
///
/// Retained beams are returned in their input order. Ties are broken by the
/// lower beam id.
///
/// # Panics
///
/// If `beams` and `scores` differ in length.
pub fn select_top(
    beams: &[Beam],
    scores: &[VerifierScore],
    config: &SearchConfig,
) -> Result<Vec<(Beam, u32)>> {
    assert_eq!(
        beams.len(),
        scores.len(),
        "select_top: beams and scores must have equal length"
    );
    if beams.is_empty() {
        return Err(Error::NoActiveBeams);
    }
    let n = config.n;
    let b = config.branching_factor.max(1);
    let mut picks: Vec<(usize, u32)> = match config.selection_policy {
        SelectionPolicy::BeamSearch => {
            let keep = (n / b).max(1) as usize;
            ranked(beams, scores)
                .into_iter()
                .take(keep)
                .map(|i| (i, b))
                .collect()
        }
        SelectionPolicy::DiverseSelection => {
            let mut best: BTreeMap<u32, usize> = BTreeMap::new();
            for i in ranked(beams, scores) {
                best.entry(beams[i].root).or_insert(i);
            }
            // rank the subtree winners so leftover branches go to the best
            let mut winners: Vec<usize> = best.into_values().collect();
            winners.sort_by(|&x, &y| {
                rank_order((scores[x].value(), beams[x].id), (scores[y].value(), beams[y].id))
            });
            let groups = winners.len() as u32;
            let base = n / groups;
            let extra = n % groups;
            winners
                .into_iter()
                .enumerate()
                .map(|(rank, i)| (i, base + u32::from((rank as u32) < extra)))
                .filter(|&(_, c)| c > 0)
                .collect()
        }
        SelectionPolicy::DynamicBranching => {
            let keep = ((n / b).max(1) as usize).min(beams.len());
            let top: Vec<usize> = ranked(beams, scores).into_iter().take(keep).collect();
            let weights: Vec<f64> = top.iter().map(|&i| scores[i].value()).collect();
            let counts = apportion_with_floor(n, &weights);
            top.into_iter().zip(counts).collect()
        }
        SelectionPolicy::BestOfN => (0..beams.len()).map(|i| (i, 1)).collect(),
    };
    picks.sort_by_key(|&(i, _)| i);
    Ok(picks
        .into_iter()
        .map(|(i, c)| (beams[i].clone(), c))
        .collect())
}

/// Split `total` seats over `weights` (ranked best first): one seat each,
/// then the rest by largest remainder. Equal remainders favour the earlier
/// entry. All-zero weights are treated as equal.
pub fn apportion_with_floor(total: u32, weights: &[f64]) -> Vec<u32> {
    let k = weights.len() as u32;
    if k == 0 {
        return Vec::new();
    }
    if total <= k {
        // cannot give everyone a seat; best ranked first
        return (0..k).map(|i| u32::from(i < total)).collect();
    }
    let mut counts = alloc::vec![1u32; weights.len()];
    let seats = total - k;
    let sum: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    let quotas: Vec<f64> = if sum > 0.0 {
        weights
            .iter()
            .map(|w| w.max(0.0) / sum * f64::from(seats))
            .collect()
    } else {
        alloc::vec![f64::from(seats) / f64::from(k); weights.len()]
    };
    let mut assigned = 0u32;
    for (c, q) in counts.iter_mut().zip(&quotas) {
        let fl = libm::floor(*q) as u32;
        *c += fl;
        assigned += fl;
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - libm::floor(quotas[a]);
        let rb = quotas[b] - libm::floor(quotas[b]);
        rb.partial_cmp(&ra).unwrap_or(Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(seats.saturating_sub(assigned) as usize) {
        counts[i] += 1;
    }
    counts
}

/// Draw the retained fraction for one duplicate.
pub fn sample_retained_fraction<R: Rng + ?Sized>(mean: f64, sd: f64, rng: &mut R) -> f64 {
    if sd <= 0.0 {
        return mean.clamp(0.0, 1.0);
    }
    match Normal::new(mean, sd) {
        Ok(dist) => dist.sample(rng).clamp(0.0, 1.0),
        Err(_) => mean.clamp(0.0, 1.0),
    }
}

/// Expand each selected beam into `branch_count` children.
///
/// Child `0` keeps the speculative tokens of branch `0` intact. Child `c > 0`
/// keeps a fraction `f ~ Normal(ratio, sd)` (clamped to `[0, 1]`, rounded
/// down) of branch `c`, or of branch `0` when the beam ran fewer branches.
/// Kept tokens become the child's `head_start`. Child ids are allocated from
/// `next_id`.
///
/// # Panics
///
/// If any branch count is zero.
pub fn duplicate_then_truncate<R: Rng + ?Sized>(
    selected: &[(Beam, u32)],
    ratio: f64,
    sd: f64,
    rng: &mut R,
    next_id: &mut BeamId,
) -> Vec<Beam> {
    let mut out = Vec::with_capacity(selected.iter().map(|(_, c)| *c as usize).sum());
    for (beam, count) in selected {
        assert!(*count >= 1, "duplicate_then_truncate: branch count must be >= 1");
        let completed = beam.lineage.last().copied().unwrap_or(beam.next_step);
        for child in 0..*count {
            let source = beam
                .speculative
                .get(child as usize)
                .or_else(|| beam.speculative.first())
                .copied()
                .unwrap_or(0);
            let kept = if child == 0 || source == 0 {
                source
            } else {
                let f = sample_retained_fraction(ratio, sd, rng);
                libm::floor(f * f64::from(source)) as u32
            };
            out.push(Beam {
                id: *next_id,
                parent: Some(beam.id),
                root: beam.root,
                lineage: beam.lineage.clone(),
                step_tokens: beam.step_tokens.clone(),
                last_score: beam.last_score,
                state: BeamState::Running,
                next_step: child_step_id(completed, child),
                speculative: Vec::new(),
                head_start: kept,
            });
            *next_id += 1;
        }
    }
    out
}
