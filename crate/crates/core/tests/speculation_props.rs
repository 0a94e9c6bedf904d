//! Properties of speculative beam extension.

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tts_sim_core::search::{Beam, SearchConfig, SelectionPolicy, StepId};
use tts_sim_core::speculation::{
    bin_score, select_spec, spec_beam_extend, GenerationRound, NoHooks, RoundBeam, TickReport,
};
use tts_sim_core::workload::{KeyedWorkload, WorkloadSpec};
use tts_sim_core::search::VerifierScore;

fn search(policy: SelectionPolicy, speculate: bool) -> SearchConfig {
    SearchConfig {
        n: 16,
        branching_factor: 4,
        max_iterations: 5,
        selection_policy: policy,
        speculation_enabled: speculate,
        ..SearchConfig::default()
    }
}

fn small_workload() -> WorkloadSpec {
    let mut w = WorkloadSpec::default();
    w.step_length_dist.lognormal_mu = 30f64.ln();
    w.step_length_dist.max_tokens = 400;
    w
}

/// Per-iteration multisets of selected lineages and the occupancy traces.
fn trajectory(seed: u64, policy: SelectionPolicy, speculate: bool, slots: usize) -> (Vec<Vec<Vec<StepId>>>, Vec<Vec<f64>>) {
    let cfg = search(policy, speculate);
    let mut wl = KeyedWorkload::new(seed, small_workload());
    let mut ver = wl;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut beams: Vec<Beam> = (0..cfg.n as u64).map(|i| Beam::new(i, (i % 4) as u32, 10_000 + i)).collect();
    let mut next_id = u64::from(cfg.n);
    let mut selections = Vec::new();
    let mut occupancy = Vec::new();
    for iter in 0..cfg.max_iterations {
        let out = spec_beam_extend(beams, &cfg, iter, slots, &mut wl, &mut ver, &mut rng, &mut next_id).unwrap();
        let mut sel: Vec<Vec<StepId>> = out
            .selected
            .iter()
            .flat_map(|(b, c)| std::iter::repeat_n(b.lineage.clone(), *c as usize))
            .collect();
        sel.sort();
        selections.push(sel);
        occupancy.push(out.occupancy);
        beams = out.next;
    }
    (selections, occupancy)
}

#[test]
fn speculation_does_not_change_selection() {
    for seed in 0..50 {
        for policy in SelectionPolicy::ALL {
            for slots in [16, 7] {
                let (on, _) = trajectory(seed, policy, true, slots);
                let (off, _) = trajectory(seed, policy, false, slots);
                assert_eq!(on, off, "seed {seed} {policy:?} slots {slots}");
            }
        }
    }
}

#[test]
fn speculation_only_adds_occupancy() {
    let cfg_on = search(SelectionPolicy::BeamSearch, true);
    let cfg_off = search(SelectionPolicy::BeamSearch, false);
    for seed in 0..30 {
        let wl = KeyedWorkload::new(seed, small_workload());
        let mut beams: Vec<Beam> = (0..16).map(|i| Beam::new(i, (i % 4) as u32, 500 + i)).collect();
        let mut next_id = 16;
        for iter in 0..4 {
            let run = |cfg: &SearchConfig, beams: Vec<Beam>, next_id: &mut u64| {
                let (mut g, mut v) = (wl, wl);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ u64::from(iter));
                spec_beam_extend(beams, cfg, iter, 16, &mut g, &mut v, &mut rng, next_id).unwrap()
            };
            let mut scratch = next_id;
            let off = run(&cfg_off, beams.clone(), &mut scratch);
            let on = run(&cfg_on, beams, &mut next_id);
            assert_eq!(on.occupancy.len(), off.occupancy.len());
            for (a, b) in on.occupancy.iter().zip(&off.occupancy) {
                assert!(a >= b, "seed {seed} iter {iter}");
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            assert!(mean(&on.occupancy) > mean(&off.occupancy));
            beams = on.next;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn slots_are_conserved(
        lens in prop::collection::vec(1u32..60, 1..24),
        capacity in 1usize..12,
        scores in prop::collection::vec(0.0f64..=1.0, 24..=24),
    ) {
        let mut round = GenerationRound::new(capacity, 4, true);
        for (i, &l) in lens.iter().enumerate() {
            round.enqueue(RoundBeam { id: i as u64, prev_score: Some(scores[i]), remaining: l });
        }
        let reports = round.run(&mut NoHooks);
        prop_assert_eq!(reports.len() as u32 >= *lens.iter().max().unwrap(), true);
        for r in &reports {
            prop_assert!(r.batch() <= capacity);
            prop_assert!(r.running >= 1);
        }
        for i in 0..lens.len() {
            prop_assert_eq!(round.generated(i), lens[i]);
            let p = bin_score(i as u64, VerifierScore::saturating(scores[i]), 4).potential as usize;
            prop_assert!(round.spec_tokens(i).len() <= p);
        }
    }

    #[test]
    fn arrivals_preempt_within_one_tick(
        lens in prop::collection::vec(1u32..40, 2..10),
        arrive_at in 1usize..30,
        capacity in 2usize..8,
    ) {
        let mut round = GenerationRound::new(capacity, 4, true);
        for (i, &l) in lens.iter().enumerate() {
            round.enqueue(RoundBeam { id: i as u64, prev_score: Some(0.9), remaining: l });
        }
        let mut reports: Vec<TickReport> = Vec::new();
        for _ in 0..arrive_at {
            match round.step(&mut NoHooks) {
                Some(r) => reports.push(r),
                None => break,
            }
        }
        if !round.is_done() {
            let was_speculating = !round.speculating().is_empty();
            let ahead = round.waiting() + round.running().len();
            let idx = round.enqueue(RoundBeam { id: 99, prev_score: None, remaining: 5 });
            let next = round.step(&mut NoHooks).unwrap();
            prop_assert_eq!(next.preempted > 0, was_speculating);
            // speculative slots never delay a standard beam
            if ahead < capacity {
                prop_assert_eq!(round.generated(idx), 1);
            }
        }
    }

    #[test]
    fn speculation_prefers_high_potential(
        scores in prop::collection::vec(0.0f64..=1.0, 1..12),
        free in 0usize..20,
    ) {
        let finished: Vec<(u64, f64)> = scores.iter().enumerate().map(|(i, &s)| (i as u64, s)).collect();
        let picks = select_spec(&finished, free, 4);
        let total: u32 = picks.iter().map(|(_, c)| c).sum();
        let potential: BTreeMap<u64, u32> = finished
            .iter()
            .map(|&(id, s)| (id, bin_score(id, VerifierScore::saturating(s), 4).potential))
            .collect();
        let cap: u32 = potential.values().sum();
        prop_assert_eq!(total, (free as u32).min(cap));
        for w in picks.windows(2) {
            prop_assert!(potential[&w[0].0] >= potential[&w[1].0]);
        }
        for (id, c) in &picks {
            prop_assert!(*c <= potential[id]);
        }
        // a skipped beam never outranks a chosen one
        let chosen: Vec<u64> = picks.iter().map(|p| p.0).collect();
        for (id, p) in &potential {
            if !chosen.contains(id) {
                prop_assert!(chosen.iter().all(|c| potential[c] >= *p));
            }
        }
    }
}
