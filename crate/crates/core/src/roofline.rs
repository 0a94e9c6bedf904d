//! Roofline latency model and generator/verifier KV allocation.
//!
//! Stage latency is `max(FLOPs / (P·10¹²), Bytes / (BW·10⁹))` with a
//! first-order transformer cost: `2·N_params` FLOPs per processed token, and
//! traffic made of the weights plus the KV cache read and written.
//!
//! Batch sizes chosen by the allocator are capacities. A stage given capacity
//! `b` runs its `N` requests with whichever batch size `b' ≤ b` is fastest,
//! so stage time never grows with more memory and the optimum sits on the
//! memory boundary.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    /// Peak compute, TFLOP/s.
    pub peak_tflops: f64,
    /// Peak memory bandwidth, GB/s.
    pub peak_bw_gbs: f64,
    /// KV-cache budget shared by both models, bytes.
    pub kv_budget_bytes: u64,
    /// Cost of swapping the inactive model's KV cache to host memory, seconds.
    #[serde(default)]
    pub offload_overhead_s: f64,
}

impl DeviceSpec {
    /// Consumer GPU in the 24 GB class (fp16 tensor peak, GDDR6X bandwidth)
    /// with a 4 GiB KV budget.
    pub fn edge_gpu() -> Self {
        DeviceSpec {
            peak_tflops: 165.0,
            peak_bw_gbs: 1008.0,
            kv_budget_bytes: 4 << 30,
            offload_overhead_s: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_tflops > 0.0 && self.peak_tflops.is_finite()) {
            return Err(Error::OutOfRange { field: "device.peak_tflops" });
        }
        if !(self.peak_bw_gbs > 0.0 && self.peak_bw_gbs.is_finite()) {
            return Err(Error::OutOfRange { field: "device.peak_bw_gbs" });
        }
        if self.kv_budget_bytes == 0 {
            return Err(Error::OutOfRange { field: "device.kv_budget_bytes" });
        }
        if !(self.offload_overhead_s >= 0.0 && self.offload_overhead_s.is_finite()) {
            return Err(Error::OutOfRange { field: "device.offload_overhead_s" });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelProfile {
    pub n_params: u64,
    pub n_layers: u32,
    pub n_kv_heads: u32,
    pub head_dim: u32,
    pub dtype_bytes: u32,
}

impl ModelProfile {
    /// 1.5B-parameter decoder with grouped-query attention (28 layers, 2 KV
    /// heads of width 128, 16-bit).
    pub fn qwen_1_5b() -> Self {
        ModelProfile {
            n_params: 1_540_000_000,
            n_layers: 28,
            n_kv_heads: 2,
            head_dim: 128,
            dtype_bytes: 2,
        }
    }

    /// 7B-parameter decoder (32 layers, 8 KV heads of width 128, 16-bit).
    pub fn mistral_7b() -> Self {
        ModelProfile {
            n_params: 7_240_000_000,
            n_layers: 32,
            n_kv_heads: 8,
            head_dim: 128,
            dtype_bytes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_params == 0 || self.n_layers == 0 || self.n_kv_heads == 0 || self.head_dim == 0 || self.dtype_bytes == 0 {
            return Err(Error::OutOfRange { field: "profile" });
        }
        Ok(())
    }

    /// K and V bytes for one token across all layers.
    pub fn kv_bytes_per_token(&self) -> u64 {
        2 * u64::from(self.n_layers) * u64::from(self.n_kv_heads) * u64::from(self.head_dim) * u64::from(self.dtype_bytes)
    }

    pub fn weight_bytes(&self) -> u64 {
        self.n_params * u64::from(self.dtype_bytes)
    }
}

/// KV bytes held by `batch` sequences of `seq_len` tokens.
pub fn kv_bytes(profile: &ModelProfile, batch: u64, seq_len: u64) -> u64 {
    batch * seq_len * profile.kv_bytes_per_token()
}

/// Roofline latency in seconds.
pub fn t_roof(flops: f64, bytes: f64, device: &DeviceSpec) -> f64 {
    let compute = flops / (device.peak_tflops * 1e12);
    let memory = bytes / (device.peak_bw_gbs * 1e9);
    compute.max(memory)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prefill,
    Decode,
}

/// `(flops, bytes)` of one stage invocation.
///
/// Prefill processes `seq` tokens per sequence and writes their KV. Decode
/// produces one token per sequence, reading `cache_len` cached tokens.
pub fn stage_cost(profile: &ModelProfile, stage: Stage, batch: u64, seq: u64, cache_len: f64) -> (f64, f64) {
    let params = profile.n_params as f64;
    let weights = profile.weight_bytes() as f64;
    let kvt = profile.kv_bytes_per_token() as f64;
    let b = batch as f64;
    match stage {
        Stage::Prefill => (2.0 * b * seq as f64 * params, weights + kv_bytes(profile, batch, seq) as f64),
        Stage::Decode => (2.0 * b * params, weights + b * cache_len * kvt + kv_bytes(profile, batch, 1) as f64),
    }
}

/// Latency of one batch of a stage.
pub fn stage_time(profile: &ModelProfile, stage: Stage, batch: u64, seq: u64, cache_len: f64, device: &DeviceSpec) -> f64 {
    let (f, b) = stage_cost(profile, stage, batch, seq, cache_len);
    t_roof(f, b, device)
}

/// Inputs of the allocation search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocationProblem {
    /// Requests (beams) to serve.
    pub n_requests: u64,
    /// Verifier input length.
    pub verifier_seq: u64,
    /// Generation length.
    pub decode_len: u64,
    pub generator: ModelProfile,
    pub verifier: ModelProfile,
    pub device: DeviceSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Collocated,
    Offload,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub b_pre: u64,
    pub b_dec: u64,
    pub t_tot: f64,
    pub strategy: Strategy,
}

impl AllocationProblem {
    fn n(&self) -> u64 {
        self.n_requests.max(1)
    }

    /// `KVBytes(1, S)` on the verifier.
    pub fn prefill_kv(&self) -> u64 {
        kv_bytes(&self.verifier, 1, self.verifier_seq)
    }

    /// `KVBytes(1, S_dec)` on the generator.
    pub fn decode_kv(&self) -> u64 {
        kv_bytes(&self.generator, 1, self.decode_len)
    }

    /// `⌈N/b⌉ · T_roof^pre(b, S)` with the batch fixed at `b`.
    pub fn prefill_total_fixed(&self, b: u64) -> f64 {
        let batches = self.n().div_ceil(b) as f64;
        batches * stage_time(&self.verifier, Stage::Prefill, b, self.verifier_seq, 0.0, &self.device)
    }

    /// `⌈N/b⌉ · S_dec · T_roof^dec(b, S_dec/2)` with the batch fixed at `b`.
    pub fn decode_total_fixed(&self, b: u64) -> f64 {
        if self.decode_len == 0 {
            return 0.0;
        }
        let batches = self.n().div_ceil(b) as f64;
        let cache = self.decode_len as f64 / 2.0;
        batches * self.decode_len as f64 * stage_time(&self.generator, Stage::Decode, b, 0, cache, &self.device)
    }

    /// Best fixed-batch time for every capacity `1..=N`; index `b - 1`.
    fn capacity_table(&self, fixed: impl Fn(u64) -> f64) -> Vec<f64> {
        let n = self.n();
        let mut out = Vec::with_capacity(n as usize);
        let mut best = f64::INFINITY;
        for b in 1..=n {
            best = best.min(fixed(b));
            out.push(best);
        }
        out
    }

    /// Precomputed stage times for repeated evaluation of the objective.
    pub fn tables(&self) -> StageTables {
        StageTables {
            prefill: self.capacity_table(|b| self.prefill_total_fixed(b)),
            decode: self.capacity_table(|b| self.decode_total_fixed(b)),
        }
    }

    /// Objective `T_tot` for capacities `(b_pre, b_dec)`.
    pub fn t_total(&self, b_pre: u64, b_dec: u64) -> f64 {
        self.tables().t_total(b_pre, b_dec)
    }

    fn max_b_pre_collocated(&self) -> Option<u64> {
        let m = self.device.kv_budget_bytes;
        let (kp, kd) = (self.prefill_kv(), self.decode_kv());
        if kp.saturating_add(kd) > m {
            return None;
        }
        Some((m - kd).checked_div(kp).unwrap_or(self.n()))
    }

    /// Largest decode capacity fitting beside `b_pre` prefill sequences.
    pub fn boundary_b_dec(&self, b_pre: u64) -> u64 {
        let rest = self.device.kv_budget_bytes - b_pre * self.prefill_kv();
        match self.decode_kv() {
            0 => self.n(),
            kd => rest / kd,
        }
    }
}

/// Stage times indexed by capacity.
#[derive(Debug, Clone)]
pub struct StageTables {
    pub prefill: Vec<f64>,
    pub decode: Vec<f64>,
}

impl StageTables {
    fn at(table: &[f64], cap: u64) -> f64 {
        assert!(cap >= 1, "batch capacity must be >= 1");
        let i = (cap.min(table.len() as u64) - 1) as usize;
        table[i]
    }

    pub fn prefill_time(&self, b_pre: u64) -> f64 {
        Self::at(&self.prefill, b_pre)
    }

    pub fn decode_time(&self, b_dec: u64) -> f64 {
        Self::at(&self.decode, b_dec)
    }

    pub fn t_total(&self, b_pre: u64, b_dec: u64) -> f64 {
        self.prefill_time(b_pre) + self.decode_time(b_dec)
    }
}

/// Linear search over the prefill capacity with the decode capacity on the
/// memory boundary. Ties go to the larger decode capacity, then to the
/// smaller prefill capacity.
pub fn search_allocation(problem: &AllocationProblem) -> Result<Allocation> {
    let max_pre = problem.max_b_pre_collocated().ok_or(Error::MemoryInsufficient)?;
    let tables = problem.tables();
    // prefill capacity beyond N buys nothing and only shrinks b_dec
    let last = max_pre.min(problem.n());
    let mut best: Option<Allocation> = None;
    for b_pre in 1..=last {
        let b_dec = problem.boundary_b_dec(b_pre);
        let t = tables.t_total(b_pre, b_dec);
        let better = match &best {
            None => true,
            Some(a) => t < a.t_tot || (t == a.t_tot && b_dec > a.b_dec),
        };
        if better {
            best = Some(Allocation {
                b_pre,
                b_dec,
                t_tot: t,
                strategy: Strategy::Collocated,
            });
        }
    }
    best.ok_or(Error::MemoryInsufficient)
}

/// Offload strategy: each model gets the whole budget in turn, paying
/// `offload_overhead_s`.
pub fn offload_allocation(problem: &AllocationProblem) -> Result<Allocation> {
    let m = problem.device.kv_budget_bytes;
    let (kp, kd) = (problem.prefill_kv(), problem.decode_kv());
    if kp.max(kd) > m {
        return Err(Error::MemoryInsufficient);
    }
    let b_pre = m.checked_div(kp).unwrap_or(problem.n());
    let b_dec = m.checked_div(kd).unwrap_or(problem.n());
    Ok(Allocation {
        b_pre,
        b_dec,
        t_tot: problem.t_total(b_pre, b_dec) + problem.device.offload_overhead_s,
        strategy: Strategy::Offload,
    })
}

/// Pick the faster of the collocated optimum and the offload strategy; ties
/// favour collocation.
pub fn search_with_offload(problem: &AllocationProblem) -> Result<Allocation> {
    match (search_allocation(problem), offload_allocation(problem)) {
        (Ok(c), Ok(o)) => Ok(if o.t_tot < c.t_tot { o } else { c }),
        (Ok(c), Err(_)) => Ok(c),
        (Err(_), Ok(o)) => Ok(o),
        (Err(e), Err(_)) => Err(e),
    }
}

/// Throughput of one stage as a function of its KV budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaturationPoint {
    pub batch: u64,
    pub kv_bytes: u64,
    pub throughput: f64,
    pub asymptote: f64,
}

/// Tokens per second of a stage at batch `b`. For prefill `seq` is the
/// prompt length; for decode it is the cached context length.
pub fn stage_throughput(profile: &ModelProfile, stage: Stage, batch: u64, seq: u64, device: &DeviceSpec) -> f64 {
    match stage {
        Stage::Prefill => (batch * seq) as f64 / stage_time(profile, stage, batch, seq, 0.0, device),
        Stage::Decode => batch as f64 / stage_time(profile, stage, batch, 0, seq as f64, device),
    }
}

/// Limit of [`stage_throughput`] as the batch grows without bound.
pub fn asymptotic_throughput(profile: &ModelProfile, stage: Stage, seq: u64, device: &DeviceSpec) -> f64 {
    let compute = 2.0 * profile.n_params as f64 / (device.peak_tflops * 1e12);
    let kvt = profile.kv_bytes_per_token() as f64;
    let per_token_bytes = match stage {
        Stage::Prefill => kvt,
        Stage::Decode => (seq as f64 + 1.0) * kvt,
    };
    let memory = per_token_bytes / (device.peak_bw_gbs * 1e9);
    1.0 / compute.max(memory)
}

/// Smallest KV budget at which the stage reaches `fraction` of its asymptotic
/// throughput. Batches are scanned up to `max_batch`.
pub fn saturation_budget(
    profile: &ModelProfile,
    stage: Stage,
    seq: u64,
    device: &DeviceSpec,
    fraction: f64,
    max_batch: u64,
) -> Option<SaturationPoint> {
    let asymptote = asymptotic_throughput(profile, stage, seq, device);
    (1..=max_batch).find_map(|b| {
        let tp = stage_throughput(profile, stage, b, seq, device);
        (tp >= fraction * asymptote).then(|| SaturationPoint {
            batch: b,
            kv_bytes: kv_bytes(profile, b, seq),
            throughput: tp,
            asymptote,
        })
    })
}

#[cfg(test)]
mod tests {
    use alloc::string::ToString;
    use super::*;

    fn unit_device(m: u64) -> DeviceSpec {
        DeviceSpec {
            peak_tflops: 1.0,
            peak_bw_gbs: 1.0,
            kv_budget_bytes: m,
            offload_overhead_s: 0.0,
        }
    }

    fn tiny() -> ModelProfile {
        ModelProfile {
            n_params: 1000,
            n_layers: 1,
            n_kv_heads: 1,
            head_dim: 1,
            dtype_bytes: 1,
        }
    }

    #[test]
    fn kv_bytes_examples() {
        let p = ModelProfile { n_params: 1, n_layers: 2, n_kv_heads: 2, head_dim: 4, dtype_bytes: 2 };
        assert_eq!(kv_bytes(&p, 0, 10), 0);
        assert_eq!(kv_bytes(&p, 1, 10), 10 * 2 * 2 * 2 * 4 * 2);
        assert_eq!(kv_bytes(&p, 2, 37), 2 * kv_bytes(&p, 1, 37));
    }

    #[test]
    fn t_roof_examples() {
        let d = unit_device(1);
        assert_eq!(t_roof(1e12, 1e9, &d), 1.0);
        assert_eq!(t_roof(2e12, 1e9, &d), 2.0);
        assert_eq!(t_roof(1e12, 5e9, &d), 5.0);
    }

    #[test]
    fn decode_cost_plug_in() {
        let (f, b) = stage_cost(&tiny(), Stage::Decode, 1, 0, 0.0);
        assert_eq!(f, 2000.0);
        // weights 1000*1, no cache read, one token written (2*1*1*1*1)
        assert_eq!(b, 1000.0 + 0.0 + 2.0);
    }

    #[test]
    fn decode_cost_with_two_byte_weights() {
        let p = ModelProfile { dtype_bytes: 2, ..tiny() };
        assert_eq!(stage_cost(&p, Stage::Decode, 1, 0, 0.0), (2000.0, 2000.0 + 0.0 + 4.0));
    }

    #[test]
    fn prefill_flops_linear_in_batch() {
        let p = ModelProfile::qwen_1_5b();
        let one = stage_cost(&p, Stage::Prefill, 1, 128, 0.0).0;
        let two = stage_cost(&p, Stage::Prefill, 2, 128, 0.0).0;
        assert_eq!(two, 2.0 * one);
    }

    #[test]
    fn decode_bytes_grow_with_cache() {
        let p = ModelProfile::qwen_1_5b();
        let mut last = 0.0;
        for c in [0.0, 1.0, 10.0, 1000.0] {
            let b = stage_cost(&p, Stage::Decode, 4, 0, c).1;
            assert!(b > last);
            last = b;
        }
    }

    fn problem(n: u64, s: u64, s_dec: u64, m: u64) -> AllocationProblem {
        AllocationProblem {
            n_requests: n,
            verifier_seq: s,
            decode_len: s_dec,
            generator: tiny(),
            verifier: tiny(),
            device: unit_device(m),
        }
    }

    #[test]
    fn single_batch_total() {
        let p = AllocationProblem { device: DeviceSpec::edge_gpu(), generator: ModelProfile::qwen_1_5b(), verifier: ModelProfile::mistral_7b(), ..problem(8, 512, 256, 0) };
        let pre = stage_time(&p.verifier, Stage::Prefill, 8, 512, 0.0, &p.device);
        let dec = stage_time(&p.generator, Stage::Decode, 8, 0, 128.0, &p.device);
        let t = p.t_total(8, 8);
        assert!((t - (pre + 256.0 * dec)).abs() <= 1e-12 * t);
    }

    #[test]
    fn zero_decode_length_has_no_decode_term() {
        let p = problem(4, 10, 0, 1000);
        assert_eq!(p.t_total(2, 3), p.prefill_total_fixed(2).min(p.prefill_total_fixed(1)));
    }

    #[test]
    fn doubling_batch_in_bytes_linear_regime_keeps_prefill_time() {
        // negligible weights and compute: time is KV traffic only
        let prof = ModelProfile { n_params: 1, n_layers: 32, n_kv_heads: 8, head_dim: 128, dtype_bytes: 2 };
        let p = AllocationProblem { verifier: prof, generator: prof, ..problem(64, 4096, 1, 1 << 40) };
        let a = p.prefill_total_fixed(8);
        let b = p.prefill_total_fixed(16);
        assert!((a - b).abs() <= 1e-9 * a, "{a} vs {b}");
    }

    #[test]
    fn boundary_formula() {
        // KVBytes(1,S) = 5 * 2 = 10, KVBytes(1,S_dec) = 10 * 2 = 20
        let p = problem(2, 5, 10, 100);
        assert_eq!(p.prefill_kv(), 10);
        assert_eq!(p.decode_kv(), 20);
        assert_eq!(p.boundary_b_dec(2), 4);
        let a = search_allocation(&p).unwrap();
        assert_eq!(a.b_dec, 4);
        assert_eq!(a.strategy, Strategy::Collocated);
        let used = a.b_pre * 10 + a.b_dec * 20;
        assert!(used <= 100 && 100 - used < 20);
    }

    #[test]
    fn infeasible_budget() {
        let p = problem(2, 5, 10, 29);
        assert_eq!(search_allocation(&p).unwrap_err(), Error::MemoryInsufficient);
        assert_eq!(search_allocation(&p).unwrap_err().to_string(), "memory budget insufficient");
    }

    #[test]
    fn offload_when_collocation_impossible() {
        let mut p = problem(4, 5, 10, 25);
        p.device.offload_overhead_s = 1.0;
        assert!(search_allocation(&p).is_err());
        let a = search_with_offload(&p).unwrap();
        assert_eq!(a.strategy, Strategy::Offload);
        assert_eq!((a.b_pre, a.b_dec), (2, 1));
    }

    #[test]
    fn huge_overhead_keeps_collocation() {
        let mut p = problem(16, 5, 10, 400);
        p.device.offload_overhead_s = 1e30;
        assert_eq!(search_with_offload(&p).unwrap().strategy, Strategy::Collocated);
    }

    #[test]
    fn neither_strategy_fits() {
        let p = problem(4, 5, 10, 15);
        assert!(search_with_offload(&p).is_err());
    }

    #[test]
    fn saturation_prefill_before_decode() {
        let d = DeviceSpec::edge_gpu();
        let pre = saturation_budget(&ModelProfile::mistral_7b(), Stage::Prefill, 512, &d, 0.8, 1 << 16).unwrap();
        let dec = saturation_budget(&ModelProfile::qwen_1_5b(), Stage::Decode, 1024, &d, 0.8, 1 << 16).unwrap();
        assert!(pre.kv_bytes * 5 <= dec.kv_bytes, "{pre:?} {dec:?}");
        assert!(pre.throughput <= pre.asymptote * (1.0 + 1e-12));
    }
}
