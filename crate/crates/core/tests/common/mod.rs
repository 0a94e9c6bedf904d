//! Random instance generators shared by the integration tests.

#![allow(dead_code)]

use rand::Rng;
use tts_sim_core::prefix_sched::{Cot, ScheduleInstance};

/// CoTs read off a random branching tree: every root-to-leaf path is one
/// CoT, at most `max_cots` of them, listed in shuffled order.
pub fn random_tree_instance<R: Rng>(rng: &mut R, max_cots: usize) -> ScheduleInstance {
    use rand::seq::SliceRandom;
    let mut next_id = 1u64;
    let mut frontier: Vec<Cot> = Vec::new();
    let roots = rng.random_range(1..=2);
    for _ in 0..roots {
        frontier.push(vec![(next_id, rng.random_range(1..=40))]);
        next_id += 1;
    }
    let depth = rng.random_range(1..=5);
    for _ in 1..depth {
        let mut grown = Vec::new();
        for cot in frontier {
            let kids = rng.random_range(1..=3);
            for _ in 0..kids {
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
