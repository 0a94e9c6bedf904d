//! Prefix-aware ordering of CoTs.
//!
//! A schedule is scored by the sum of shared-prefix sizes between
//! consecutive CoTs. [`greedy_schedule`] keeps the invariant that each next
//! CoT maximises its shared prefix with the previous one. The exhaustive
//! oracle and the pairwise-swap checker live here too so that the heuristic
//! can be validated against them.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_trie::shared_prefix_size;
use crate::search::StepId;

/// Largest instance accepted by [`brute_force_schedule`].
pub const ORACLE_LIMIT: usize = 9;

/// A lineage with per-step token weights.
pub type Cot = Vec<(StepId, u32)>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleInstance {
    pub cots: Vec<Cot>,
    pub budget_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleResult {
    pub order: Vec<usize>,
    pub prefix_sum: u64,
    pub eviction_cost: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulePolicy {
    Greedy,
    Random,
    WorstCase,
}

fn shared(a: &Cot, b: &Cot) -> u64 {
    shared_prefix_size(a, b) as u64
}

/// Pairwise shared-prefix matrix.
fn prefix_matrix(cots: &[Cot]) -> Vec<Vec<u64>> {
    let n = cots.len();
    let mut m = alloc::vec![alloc::vec![0u64; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let p = shared(&cots[i], &cots[j]);
            m[i][j] = p;
            m[j][i] = p;
        }
    }
    m
}

fn score_with(order: &[usize], m: &[Vec<u64>]) -> u64 {
    order.windows(2).map(|w| m[w[0]][w[1]]).sum()
}

/// Sum of shared prefixes between consecutive CoTs of `order`.
pub fn prefix_score(order: &[usize], instance: &ScheduleInstance) -> u64 {
    order
        .windows(2)
        .map(|w| shared(&instance.cots[w[0]], &instance.cots[w[1]]))
        .sum()
}

fn check_instance(instance: &ScheduleInstance) -> Result<()> {
    if instance.cots.is_empty() {
        return Err(Error::EmptyInstance);
    }
    Ok(())
}

fn finish(order: Vec<usize>, instance: &ScheduleInstance) -> ScheduleResult {
    let prefix_sum = prefix_score(&order, instance);
    let (eviction_cost, _) = eviction_cost(&order, instance);
    ScheduleResult {
        order,
        prefix_sum,
        eviction_cost,
    }
}

/// Nearest-neighbour ordering by shared prefix, anchored at the first CoT.
/// `maximise = false` gives the adversarial (nearest-is-farthest) variant.
fn chain(instance: &ScheduleInstance, maximise: bool) -> Vec<usize> {
    let n = instance.cots.len();
    let mut used = alloc::vec![false; n];
    let mut order = Vec::with_capacity(n);
    order.push(0);
    used[0] = true;
    for _ in 1..n {
        let last = &instance.cots[*order.last().unwrap()];
        let mut best: Option<(usize, u64)> = None;
        for (i, cot) in instance.cots.iter().enumerate() {
            if used[i] {
                continue;
            }
            let p = shared(last, cot);
            let better = match best {
                None => true,
                Some((_, bp)) => {
                    if maximise {
                        p > bp
                    } else {
                        p < bp
                    }
                }
            };
            if better {
                best = Some((i, p));
            }
        }
        let (i, _) = best.expect("unscheduled CoT remains");
        used[i] = true;
        order.push(i);
    }
    order
}

/// Greedy prefix-aware schedule. `order[0]` is the first CoT of the input;
/// each following CoT maximises its shared prefix with its predecessor, ties
/// going to the earlier input position.
pub fn greedy_schedule(instance: &ScheduleInstance) -> Result<ScheduleResult> {
    check_instance(instance)?;
    Ok(finish(chain(instance, true), instance))
}

/// Adversarial counterpart of [`greedy_schedule`]: each next CoT minimises
/// the shared prefix with its predecessor.
pub fn worst_case_schedule(instance: &ScheduleInstance) -> Result<ScheduleResult> {
    check_instance(instance)?;
    Ok(finish(chain(instance, false), instance))
}

/// Uniformly random order.
pub fn random_schedule<R: Rng + ?Sized>(instance: &ScheduleInstance, rng: &mut R) -> Result<ScheduleResult> {
    check_instance(instance)?;
    let mut order: Vec<usize> = (0..instance.cots.len()).collect();
    order.shuffle(rng);
    Ok(finish(order, instance))
}

/// Group CoTs that share a parent (lineage minus its last step), keeping
/// groups in order of first appearance.
pub fn parent_grouped_schedule(instance: &ScheduleInstance) -> Result<ScheduleResult> {
    check_instance(instance)?;
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot: BTreeMap<&[(StepId, u32)], usize> = BTreeMap::new();
    for (i, cot) in instance.cots.iter().enumerate() {
        let parent = &cot[..cot.len().saturating_sub(1)];
        let g = *slot.entry(parent).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    Ok(finish(groups.into_iter().flatten().collect(), instance))
}

pub fn schedule(
    policy: SchedulePolicy,
    instance: &ScheduleInstance,
    rng: &mut impl Rng,
) -> Result<ScheduleResult> {
    match policy {
        SchedulePolicy::Greedy => greedy_schedule(instance),
        SchedulePolicy::Random => random_schedule(instance, rng),
        SchedulePolicy::WorstCase => worst_case_schedule(instance),
    }
}

/// Partition `order` into tries: maximal consecutive groups whose union of
/// nodes fits `budget_tokens`. A CoT larger than the budget forms its own
/// trie.
pub fn pack_tries<'a>(order: &[usize], instance: &'a ScheduleInstance) -> Vec<BTreeSet<&'a [(StepId, u32)]>> {
    let mut tries: Vec<BTreeSet<&'a [(StepId, u32)]>> = Vec::new();
    let mut current: BTreeSet<&'a [(StepId, u32)]> = BTreeSet::new();
    let mut weight = 0u64;
    for &i in order {
        let cot = &instance.cots[i];
        let mut added = 0u64;
        let mut fresh = Vec::new();
        for k in 1..=cot.len() {
            let node = &cot[..k];
            if !current.contains(node) {
                added += u64::from(cot[k - 1].1);
                fresh.push(node);
            }
        }
        if !current.is_empty() && weight + added > instance.budget_tokens {
            tries.push(core::mem::take(&mut current));
            weight = 0;
            fresh.clear();
            added = 0;
            for k in 1..=cot.len() {
                added += u64::from(cot[k - 1].1);
                fresh.push(&cot[..k]);
            }
        }
        current.extend(fresh);
        weight += added;
    }
    if !current.is_empty() {
        tries.push(current);
    }
    tries
}

/// Eviction cost of a schedule: `Σ (Nodes(T_i) − P(T_i, T_{i+1}))` over the
/// packed tries, where `P` counts common nodes and the last trie's successor
/// shares nothing. Returns `(cost, prefix_sum)` with `prefix_sum` measured
/// between consecutive tries.
pub fn eviction_cost(order: &[usize], instance: &ScheduleInstance) -> (u64, u64) {
    let tries = pack_tries(order, instance);
    let mut cost = 0u64;
    let mut prefix_sum = 0u64;
    for (i, t) in tries.iter().enumerate() {
        let shared = tries
            .get(i + 1)
            .map_or(0, |next| t.intersection(next).count() as u64);
        cost += t.len() as u64 - shared;
        prefix_sum += shared;
    }
    (cost, prefix_sum)
}

/// Rearrange into the next lexicographic permutation; false when `v` was the
/// last one.
fn next_permutation(v: &mut [usize]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Exhaustive search for the order with the largest prefix sum; ties go to
/// the lexicographically smallest order.
pub fn brute_force_schedule(instance: &ScheduleInstance) -> Result<ScheduleResult> {
    check_instance(instance)?;
    if instance.cots.len() > ORACLE_LIMIT {
        return Err(Error::OracleLimitExceeded);
    }
    let m = prefix_matrix(&instance.cots);
    let mut perm: Vec<usize> = (0..instance.cots.len()).collect();
    let mut best = perm.clone();
    let mut best_score = score_with(&perm, &m);
    while next_permutation(&mut perm) {
        let s = score_with(&perm, &m);
        if s > best_score {
            best_score = s;
            best.copy_from_slice(&perm);
        }
    }
    Ok(finish(best, instance))
}

/// True iff no transposition of two positions strictly increases the prefix
/// sum. Every swap is evaluated.
pub fn is_locally_optimal(order: &[usize], instance: &ScheduleInstance) -> bool {
    let m = prefix_matrix(&instance.cots);
    let base = score_with(order, &m);
    let mut v = order.to_vec();
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            v.swap(i, j);
            let s = score_with(&v, &m);
            v.swap(i, j);
            if s > base {
                return false;
            }
        }
    }
    true
}
