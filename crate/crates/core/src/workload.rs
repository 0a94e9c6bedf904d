//! Synthetic workload: heavy-tailed step lengths and a correlated verifier
//! score process.
//!
//! The default parameters are synthetic. They reproduce the qualitative gap
//! between mean and maximum step length, not any measured trace.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{keyed_rng, PURPOSE_SCORE, PURPOSE_STEP_LEN};
use crate::search::{Beam, StepId, VerifierScore};
use crate::speculation::{StepGenerator, StepVerifier};

/// Log-normal step lengths, rounded up and clamped to `[1, max_tokens]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepLengthDist {
    pub lognormal_mu: f64,
    pub lognormal_sigma: f64,
    pub max_tokens: u32,
}

impl Default for StepLengthDist {
    fn default() -> Self {
        StepLengthDist {
            lognormal_mu: libm::log(200.0),
            lognormal_sigma: 1.0,
            max_tokens: 2048,
        }
    }
}

impl StepLengthDist {
    /// Mean of the uncapped distribution.
    pub fn mean(&self) -> f64 {
        libm::exp(self.lognormal_mu + 0.5 * self.lognormal_sigma * self.lognormal_sigma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialScore {
    Uniform,
    Fixed { value: f64 },
}

/// AR(1) score process: `s' = rho·s + (1 − rho)·u`, `u ~ U(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreProcess {
    pub rho: f64,
    pub initial: InitialScore,
}

impl Default for ScoreProcess {
    fn default() -> Self {
        ScoreProcess {
            rho: 0.7,
            initial: InitialScore::Uniform,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub num_problems: u32,
    pub step_length_dist: StepLengthDist,
    pub score_process: ScoreProcess,
    /// Steps after which a path terminates.
    pub max_steps: u32,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            num_problems: 2,
            step_length_dist: StepLengthDist::default(),
            score_process: ScoreProcess::default(),
            max_steps: 8,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_problems == 0 {
            return Err(Error::OutOfRange { field: "workload.num_problems" });
        }
        let d = &self.step_length_dist;
        if !d.lognormal_mu.is_finite() {
            return Err(Error::OutOfRange { field: "workload.step_length_dist.lognormal_mu" });
        }
        if !(d.lognormal_sigma >= 0.0 && d.lognormal_sigma.is_finite()) {
            return Err(Error::OutOfRange { field: "workload.step_length_dist.lognormal_sigma" });
        }
        if d.max_tokens == 0 {
            return Err(Error::OutOfRange { field: "workload.step_length_dist.max_tokens" });
        }
        let rho = self.score_process.rho;
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::OutOfRange { field: "workload.score_process.rho" });
        }
        if let InitialScore::Fixed { value } = self.score_process.initial {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::OutOfRange { field: "workload.score_process.initial.value" });
            }
        }
        if self.max_steps == 0 {
            return Err(Error::OutOfRange { field: "workload.max_steps" });
        }
        Ok(())
    }
}

/// One verified step (or one speculative branch) of a simulation run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub iter: u32,
    pub beam_id: u64,
    pub parent_id: Option<u64>,
    pub step_tokens: u32,
    pub score: f64,
    pub selected: bool,
    /// Speculative records carry the speculating beam's id and score.
    pub speculative: bool,
}

/// Draw one step length.
pub fn sample_step_length<R: Rng + ?Sized>(dist: &StepLengthDist, rng: &mut R) -> u32 {
    let z: f64 = StandardNormal.sample(rng);
    let x = libm::exp(dist.lognormal_mu + dist.lognormal_sigma * z);
    // e^mu lands a few ulps off integers; do not let that round up a whole token
    let up = libm::ceil(x - 1e-9);
    if up >= f64::from(dist.max_tokens) {
        dist.max_tokens
    } else {
        (up as u32).max(1)
    }
}

/// Next verifier score given the previous one on the same path.
pub fn next_score<R: Rng + ?Sized>(prev: Option<f64>, process: &ScoreProcess, rng: &mut R) -> VerifierScore {
    let u: f64 = rng.random();
    let s = match prev {
        None => match process.initial {
            InitialScore::Uniform => u,
            InitialScore::Fixed { value } => value,
        },
        Some(p) => process.rho * p + (1.0 - process.rho) * u,
    };
    VerifierScore::saturating(s)
}

/// Workload whose draws are keyed by step id, so a step's length and score
/// do not depend on the order in which steps are generated or verified.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyedWorkload {
    pub seed: u64,
    pub spec: WorkloadSpec,
}

impl KeyedWorkload {
    pub fn new(seed: u64, spec: WorkloadSpec) -> Self {
        KeyedWorkload { seed, spec }
    }

    pub fn step_len(&self, step: StepId) -> u32 {
        let mut rng = keyed_rng(self.seed, PURPOSE_STEP_LEN, step);
        sample_step_length(&self.spec.step_length_dist, &mut rng)
    }

    /// Score of `step`, the newest step of a path whose previous score is `prev`.
    pub fn score(&self, step: StepId, prev: Option<f64>) -> VerifierScore {
        let mut rng = keyed_rng(self.seed, PURPOSE_SCORE, step);
        next_score(prev, &self.spec.score_process, &mut rng)
    }
}

impl StepGenerator for KeyedWorkload {
    fn step_len(&mut self, step: StepId) -> Result<u32> {
        Ok(KeyedWorkload::step_len(self, step))
    }
}

impl StepVerifier for KeyedWorkload {
    fn score(&mut self, beam: &Beam) -> VerifierScore {
        let step = *beam.lineage.last().expect("verified beam has a step");
        KeyedWorkload::score(self, step, beam.last_score)
    }
}
