//! Radix tree over thinking steps modelling KV-cache residency.
//!
//! Nodes are keyed by `(parent, step)` and weighted by their token count. The
//! tree is unit-agnostic: callers convert tokens to bytes with the model's
//! per-token KV size. Paths may be pinned (`acquire_path`) while a sequence
//! runs; only unpinned leaves are evicted.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search::StepId;

type NodeIdx = usize;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictionPolicy {
    #[default]
    Lru,
    Fifo,
}

#[derive(Debug, Clone)]
pub struct TrieNode {
    pub step: StepId,
    pub parent: Option<NodeIdx>,
    pub token_count: u32,
    pub ref_count: u32,
    pub last_access: u64,
    inserted: u64,
    children: u32,
}

/// Result of an insertion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InsertOutcome {
    pub new_nodes: usize,
    /// Tokens of the newly created nodes.
    pub new_tokens: u64,
    pub evicted_tokens: u64,
}

#[derive(Debug, Clone)]
pub struct KvTrie {
    nodes: Vec<Option<TrieNode>>,
    free: Vec<NodeIdx>,
    index: BTreeMap<(Option<NodeIdx>, StepId), NodeIdx>,
    /// Unpinned leaves ordered by eviction priority.
    evictable: BTreeSet<(u64, u64, NodeIdx)>,
    resident_tokens: u64,
    pinned_tokens: u64,
    budget_tokens: u64,
    evicted_total: u64,
    policy: EvictionPolicy,
    seq: u64,
}

impl KvTrie {
    pub fn new(budget_tokens: u64) -> Self {
        Self::with_policy(budget_tokens, EvictionPolicy::Lru)
    }

    pub fn with_policy(budget_tokens: u64, policy: EvictionPolicy) -> Self {
        KvTrie {
            nodes: Vec::new(),
            free: Vec::new(),
            index: BTreeMap::new(),
            evictable: BTreeSet::new(),
            resident_tokens: 0,
            pinned_tokens: 0,
            budget_tokens,
            evicted_total: 0,
            policy,
            seq: 0,
        }
    }

    pub fn resident_tokens(&self) -> u64 {
        self.resident_tokens
    }

    pub fn budget_tokens(&self) -> u64 {
        self.budget_tokens
    }

    pub fn pinned_tokens(&self) -> u64 {
        self.pinned_tokens
    }

    /// Tokens evicted over the trie's lifetime.
    pub fn evicted_total(&self) -> u64 {
        self.evicted_total
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len() - self.free.len()
    }

    pub fn node(&self, idx: NodeIdx) -> Option<&TrieNode> {
        self.nodes.get(idx).and_then(Option::as_ref)
    }

    fn get(&self, idx: NodeIdx) -> &TrieNode {
        self.nodes[idx].as_ref().expect("live node")
    }

    fn get_mut(&mut self, idx: NodeIdx) -> &mut TrieNode {
        self.nodes[idx].as_mut().expect("live node")
    }

    fn priority(&self, idx: NodeIdx) -> (u64, u64, NodeIdx) {
        let n = self.get(idx);
        match self.policy {
            EvictionPolicy::Lru => (n.last_access, n.inserted, idx),
            EvictionPolicy::Fifo => (n.inserted, 0, idx),
        }
    }

    fn is_evictable(&self, idx: NodeIdx) -> bool {
        let n = self.get(idx);
        n.ref_count == 0 && n.children == 0
    }

    fn unlist(&mut self, idx: NodeIdx) {
        let key = self.priority(idx);
        self.evictable.remove(&key);
    }

    fn relist(&mut self, idx: NodeIdx) {
        if self.is_evictable(idx) {
            let key = self.priority(idx);
            self.evictable.insert(key);
        }
    }

    /// Resident node indices along `path`, stopping at the first miss.
    fn walk(&self, path: &[(StepId, u32)]) -> Vec<NodeIdx> {
        let mut out = Vec::with_capacity(path.len());
        let mut parent = None;
        for &(step, _) in path {
            match self.index.get(&(parent, step)) {
                Some(&idx) => {
                    out.push(idx);
                    parent = Some(idx);
                }
                None => break,
            }
        }
        out
    }

    /// True when every node of `path` is resident.
    pub fn contains(&self, path: &[(StepId, u32)]) -> bool {
        self.walk(path).len() == path.len()
    }

    /// Number of leading steps of `path` that are resident.
    pub fn resident_prefix(&self, path: &[(StepId, u32)]) -> usize {
        self.walk(path).len()
    }

    fn evict_one(&mut self) -> Option<u64> {
        let &(a, b, idx) = self.evictable.iter().next()?;
        self.evictable.remove(&(a, b, idx));
        let node = self.nodes[idx].take().expect("live node");
        self.index.remove(&(node.parent, node.step));
        self.free.push(idx);
        let tokens = u64::from(node.token_count);
        self.resident_tokens -= tokens;
        self.evicted_total += tokens;
        if let Some(p) = node.parent {
            self.get_mut(p).children -= 1;
            self.relist(p);
        }
        Some(tokens)
    }

    fn evict_until(&mut self, limit: u64) -> u64 {
        let mut evicted = 0;
        while self.resident_tokens > limit {
            match self.evict_one() {
                Some(t) => evicted += t,
                None => break,
            }
        }
        evicted
    }

    /// Change the budget, evicting unpinned nodes to fit.
    pub fn set_budget(&mut self, budget_tokens: u64) -> Result<u64> {
        if self.pinned_tokens > budget_tokens {
            return Err(Error::CachePinned);
        }
        self.budget_tokens = budget_tokens;
        Ok(self.evict_until(budget_tokens))
    }

    fn pin(&mut self, idx: NodeIdx) {
        self.unlist(idx);
        let n = self.get_mut(idx);
        n.ref_count += 1;
        if n.ref_count == 1 {
            let t = u64::from(n.token_count);
            self.pinned_tokens += t;
        }
    }

    fn unpin(&mut self, idx: NodeIdx) {
        let n = self.get_mut(idx);
        debug_assert!(n.ref_count > 0, "unpin of unpinned node");
        n.ref_count = n.ref_count.saturating_sub(1);
        if n.ref_count == 0 {
            let t = u64::from(n.token_count);
            self.pinned_tokens -= t;
        }
        self.relist(idx);
    }

    fn insert_impl(&mut self, path: &[(StepId, u32)], clock: u64, pin: bool) -> Result<InsertOutcome> {
        assert!(!path.is_empty(), "insert_path: empty lineage");
        assert!(path.iter().all(|&(_, t)| t >= 1), "insert_path: token_count must be >= 1");
        let path_tokens: u64 = path.iter().map(|&(_, t)| u64::from(t)).sum();
        if path_tokens > self.budget_tokens {
            return Err(Error::PathExceedsBudget);
        }
        let existing = self.walk(path);
        let missing_tokens: u64 = path[existing.len()..].iter().map(|&(_, t)| u64::from(t)).sum();
        let protected_unpinned: u64 = existing
            .iter()
            .map(|&i| self.get(i))
            .filter(|n| n.ref_count == 0)
            .map(|n| u64::from(n.token_count))
            .sum();
        let floor = self.pinned_tokens + protected_unpinned;
        if floor + missing_tokens > self.budget_tokens {
            return Err(Error::CachePinned);
        }

        // protect the reused prefix while evicting
        for &i in &existing {
            self.pin(i);
        }
        let evicted = self.evict_until(self.budget_tokens - missing_tokens);
        self.seq += 1;
        let mut parent = existing.last().copied();
        let mut created = Vec::with_capacity(path.len() - existing.len());
        for &(step, tokens) in &path[existing.len()..] {
            let node = TrieNode {
                step,
                parent,
                token_count: tokens,
                ref_count: 0,
                last_access: clock,
                inserted: self.seq,
                children: 0,
            };
            let idx = match self.free.pop() {
                Some(i) => {
                    self.nodes[i] = Some(node);
                    i
                }
                None => {
                    self.nodes.push(Some(node));
                    self.nodes.len() - 1
                }
            };
            if let Some(p) = parent {
                self.unlist(p);
                self.get_mut(p).children += 1;
            }
            self.index.insert((parent, step), idx);
            self.resident_tokens += u64::from(tokens);
            created.push(idx);
            parent = Some(idx);
        }
        for &i in &existing {
            self.unlist(i);
            self.get_mut(i).last_access = clock;
        }
        for &i in &existing {
            self.unpin(i);
        }
        if pin {
            for &i in existing.iter().chain(&created) {
                self.pin(i);
            }
        } else {
            for &i in &created {
                self.relist(i);
            }
        }
        debug_assert!(self.resident_tokens <= self.budget_tokens);
        Ok(InsertOutcome {
            new_nodes: created.len(),
            new_tokens: missing_tokens,
            evicted_tokens: evicted,
        })
    }

    /// Make `path` resident without pinning it.
    ///
    /// Shared ancestors are reused. When space is short, least recently used
    /// unpinned leaves are evicted first.
    pub fn insert_path(&mut self, path: &[(StepId, u32)], clock: u64) -> Result<InsertOutcome> {
        self.insert_impl(path, clock, false)
    }

    /// Like [`insert_path`](Self::insert_path) but pins every node of the path
    /// until [`release_path`](Self::release_path).
    pub fn acquire_path(&mut self, path: &[(StepId, u32)], clock: u64) -> Result<InsertOutcome> {
        self.insert_impl(path, clock, true)
    }

    /// Unpin a path previously acquired.
    pub fn release_path(&mut self, path: &[(StepId, u32)]) {
        let nodes = self.walk(path);
        debug_assert_eq!(nodes.len(), path.len(), "release of non-resident path");
        for i in nodes.into_iter().rev() {
            self.unpin(i);
        }
    }

    /// Release an acquired path and drop its last node immediately if nothing
    /// else holds it. Returns the tokens freed.
    pub fn release_and_drop_tail(&mut self, path: &[(StepId, u32)]) -> u64 {
        let nodes = self.walk(path);
        let full = nodes.len() == path.len();
        for &i in nodes.iter().rev() {
            self.unpin(i);
        }
        if !full {
            return 0;
        }
        let Some(&tail) = nodes.last() else { return 0 };
        if !self.is_evictable(tail) {
            return 0;
        }
        self.unlist(tail);
        let node = self.nodes[tail].take().expect("live node");
        self.index.remove(&(node.parent, node.step));
        self.free.push(tail);
        let tokens = u64::from(node.token_count);
        self.resident_tokens -= tokens;
        if let Some(p) = node.parent {
            self.get_mut(p).children -= 1;
            self.relist(p);
        }
        tokens
    }

    /// Walk every resident node and confirm the structural invariants:
    /// prefix closure, token accounting, budget and pin accounting.
    pub fn check_invariants(&self) -> bool {
        let mut tokens = 0u64;
        let mut pinned = 0u64;
        let mut child_counts: BTreeMap<NodeIdx, u32> = BTreeMap::new();
        for (idx, slot) in self.nodes.iter().enumerate() {
            let Some(n) = slot else { continue };
            tokens += u64::from(n.token_count);
            if n.ref_count > 0 {
                pinned += u64::from(n.token_count);
            }
            if self.index.get(&(n.parent, n.step)) != Some(&idx) {
                return false;
            }
            if let Some(p) = n.parent {
                match self.nodes.get(p).and_then(Option::as_ref) {
                    Some(parent) => {
                        if n.ref_count > parent.ref_count {
                            return false;
                        }
                    }
                    None => return false,
                }
                *child_counts.entry(p).or_default() += 1;
            }
        }
        for (idx, slot) in self.nodes.iter().enumerate() {
            let Some(n) = slot else { continue };
            if child_counts.get(&idx).copied().unwrap_or(0) != n.children {
                return false;
            }
        }
        tokens == self.resident_tokens
            && pinned == self.pinned_tokens
            && tokens <= self.budget_tokens
            && self.index.len() == self.node_count()
    }
}

/// Length of the common prefix of two lineages.
pub fn shared_prefix_size<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}
