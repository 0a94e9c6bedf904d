//! Prefix-aware scheduling of the CoTs recorded in a trace.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tts_sim_core::prefix_sched::{schedule, Cot, ScheduleInstance, SchedulePolicy};
use tts_sim_core::rng::{keyed_rng, PURPOSE_SCHEDULE};
use tts_sim_core::workload::TraceRecord;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("trace has no non-speculative records")]
    Empty,
    #[error("beam {0} appears twice")]
    DuplicateBeam(u64),
    #[error("parent {parent} of beam {beam} is not in the trace")]
    MissingParent { beam: u64, parent: u64 },
    #[error("beam {0} is its own ancestor")]
    Cycle(u64),
    #[error("iteration {0} has no leaf records")]
    NoSuchIteration(u32),
}

/// Root-to-leaf CoTs of a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceCots {
    /// Iteration the leaves were restricted to, if any.
    pub iter: Option<u32>,
    /// Beam id of each CoT's last step.
    pub leaves: Vec<u64>,
    pub instance: ScheduleInstance,
}

/// Build one CoT per leaf of the trace's search tree: a non-speculative
/// record that no other record names as parent. Each record is one step
/// keyed by its beam id, and `parent_id` links a step to its predecessor.
/// With `iter` set only leaves of that iteration are used. The cache budget
/// defaults to the full working set.
pub fn cots_from_trace(records: &[TraceRecord], iter: Option<u32>, budget_tokens: Option<u64>) -> Result<TraceCots, TraceError> {
    let mut by_id: BTreeMap<u64, &TraceRecord> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.speculative) {
        if by_id.insert(r.beam_id, r).is_some() {
            return Err(TraceError::DuplicateBeam(r.beam_id));
        }
    }
    if by_id.is_empty() {
        return Err(TraceError::Empty);
    }
    let parents: BTreeSet<u64> = by_id.values().filter_map(|r| r.parent_id).collect();
    let leaves: Vec<u64> = records
        .iter()
        .filter(|r| !r.speculative && !parents.contains(&r.beam_id))
        .filter(|r| iter.is_none_or(|i| r.iter == i))
        .map(|r| r.beam_id)
        .collect();
    if leaves.is_empty() {
        return Err(TraceError::NoSuchIteration(iter.unwrap_or(0)));
    }
    let mut cots: Vec<Cot> = Vec::with_capacity(leaves.len());
    for &leaf in &leaves {
        let mut cot = Vec::new();
        let mut at = Some(leaf);
        while let Some(id) = at {
            let r = by_id[&id];
            cot.push((r.beam_id, r.step_tokens));
            if cot.len() > by_id.len() {
                return Err(TraceError::Cycle(leaf));
            }
            at = match r.parent_id {
                Some(p) if !by_id.contains_key(&p) => return Err(TraceError::MissingParent { beam: id, parent: p }),
                other => other,
            };
        }
        cot.reverse();
        cots.push(cot);
    }
    let nodes: BTreeSet<(u64, u32)> = cots.iter().flatten().copied().collect();
    let working_set: u64 = nodes.iter().map(|&(_, t)| u64::from(t)).sum();
    Ok(TraceCots {
        iter,
        leaves,
        instance: ScheduleInstance {
            cots,
            budget_tokens: budget_tokens.unwrap_or(working_set),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleReport {
    pub policy: SchedulePolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iter: Option<u32>,
    pub budget_tokens: u64,
    /// Leaf beam ids in scheduled order.
    pub order: Vec<u64>,
    pub prefix_sum: u64,
    pub eviction_cost: u64,
}

/// Order the CoTs with `policy`; `seed` drives the random policy.
pub fn schedule_trace(cots: &TraceCots, policy: SchedulePolicy, seed: u64) -> tts_sim_core::Result<ScheduleReport> {
    let mut rng = keyed_rng(seed, PURPOSE_SCHEDULE, 0);
    let result = schedule(policy, &cots.instance, &mut rng)?;
    Ok(ScheduleReport {
        policy,
        iter: cots.iter,
        budget_tokens: cots.instance.budget_tokens,
        order: result.order.iter().map(|&i| cots.leaves[i]).collect(),
        prefix_sum: result.prefix_sum,
        eviction_cost: result.eviction_cost,
    })
}
