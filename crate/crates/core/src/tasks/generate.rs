use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Example, Family, Task, TaskSpec, FIRST_CONTENT, QUERY};
use crate::error::{Error, Result};

const MAX_ATTEMPTS: usize = 200;

fn infeasible(spec: &TaskSpec, why: &str) -> Error {
    Error::InfeasibleSpec(format!("{} ({}): {why}", spec.name, spec.family.name()))
}

fn validate(spec: &TaskSpec) -> Result<Vec<u32>> {
    let (lo, hi) = spec.alphabet;
    if lo < FIRST_CONTENT || hi <= lo {
        return Err(infeasible(spec, "alphabet must be a non-empty range of content tokens"));
    }
    if spec.content_len == 0 {
        return Err(infeasible(spec, "empty content"));
    }
    if spec.labels[0] == spec.labels[1] {
        return Err(infeasible(spec, "label tokens must differ"));
    }
    let alphabet: Vec<u32> = (lo..hi).collect();
    let inside = |ts: &[u32]| ts.iter().all(|t| alphabet.contains(t));
    let l = spec.content_len;
    match spec.family {
        Family::ContainsToken | Family::Parity => {
            if spec.targets.len() != 1 {
                return Err(infeasible(spec, "needs exactly one target token"));
            }
            if !inside(&spec.targets) {
                return Err(infeasible(spec, "target can never appear, every example would share one class"));
            }
            if alphabet.len() < 2 {
                return Err(infeasible(spec, "alphabet has no filler tokens"));
            }
            if spec.family == Family::Parity && (spec.max_count < 2 || spec.max_count > l) {
                return Err(infeasible(spec, "parity needs 2 <= max_count <= content_len"));
            }
        }
        Family::MajorityClass => {
            if spec.targets.is_empty() || spec.others.is_empty() || !inside(&spec.targets) || !inside(&spec.others) {
                return Err(infeasible(spec, "both token groups must be non-empty and inside the alphabet"));
            }
            if spec.targets.iter().any(|t| spec.others.contains(t)) {
                return Err(infeasible(spec, "token groups overlap"));
            }
            if l.is_multiple_of(2) {
                return Err(infeasible(spec, "even content length allows ties"));
            }
        }
        Family::PositionProbe => {
            if spec.position >= l || spec.targets.is_empty() || !inside(&spec.targets) {
                return Err(infeasible(spec, "probe position or target set invalid"));
            }
            if spec.targets.len() >= alphabet.len() {
                return Err(infeasible(spec, "target set covers the whole alphabet"));
            }
        }
        Family::PatternMatch => {
            if spec.targets.len() != 2 || spec.targets[0] == spec.targets[1] || !inside(&spec.targets) || l < 2 {
                return Err(infeasible(spec, "needs two distinct tokens and length >= 2"));
            }
        }
    }
    Ok(alphabet)
}

fn filler(rng: &mut ChaCha8Rng, pool: &[u32], len: usize) -> Vec<u32> {
    (0..len).map(|_| *pool.choose(rng).expect("non-empty pool")).collect()
}

fn count(tokens: &[u32], t: u32) -> usize {
    tokens.iter().filter(|&&x| x == t).count()
}

fn has_bigram(tokens: &[u32], a: u32, b: u32) -> bool {
    tokens.windows(2).any(|w| w[0] == a && w[1] == b)
}

/// Content tokens for one example of class `label`.
fn sample(spec: &TaskSpec, alphabet: &[u32], label: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let l = spec.content_len;
    match spec.family {
        Family::ContainsToken => {
            let t = spec.targets[0];
            let rest: Vec<u32> = alphabet.iter().copied().filter(|&x| x != t).collect();
            let mut seq = filler(rng, &rest, l);
            if label == 1 {
                let k = rng.gen_range(1..=spec.max_count.clamp(1, l));
                let mut positions: Vec<usize> = (0..l).collect();
                positions.shuffle(rng);
                for &p in &positions[..k] {
                    seq[p] = t;
                }
            }
            seq
        }
        Family::Parity => {
            let t = spec.targets[0];
            let rest: Vec<u32> = alphabet.iter().copied().filter(|&x| x != t).collect();
            let counts: Vec<usize> = (1..=spec.max_count).filter(|c| c % 2 == label).collect();
            let k = *counts.choose(rng).expect("max_count >= 2 gives both parities");
            let mut seq = filler(rng, &rest, l);
            let mut positions: Vec<usize> = (0..l).collect();
            positions.shuffle(rng);
            for &p in &positions[..k] {
                seq[p] = t;
            }
            seq
        }
        Family::MajorityClass => {
            let half = l / 2;
            let first = if label == 1 { rng.gen_range(half + 1..=l) } else { rng.gen_range(0..=half) };
            let mut seq: Vec<u32> = (0..l)
                .map(|i| {
                    let pool = if i < first { &spec.targets } else { &spec.others };
                    *pool.choose(rng).expect("non-empty group")
                })
                .collect();
            seq.shuffle(rng);
            seq
        }
        Family::PositionProbe => {
            let mut seq = filler(rng, alphabet, l);
            let pool: Vec<u32> = if label == 1 {
                spec.targets.clone()
            } else {
                alphabet.iter().copied().filter(|x| !spec.targets.contains(x)).collect()
            };
            seq[spec.position] = *pool.choose(rng).expect("non-empty pool");
            seq
        }
        Family::PatternMatch => {
            let (a, b) = (spec.targets[0], spec.targets[1]);
            loop {
                let mut seq = filler(rng, alphabet, l);
                let i = rng.gen_range(0..l - 1);
                if label == 1 {
                    seq[i] = a;
                    seq[i + 1] = b;
                    return seq;
                }
                if rng.gen_bool(0.5) {
                    // Reversed order: both tokens present, pattern absent.
                    seq[i] = b;
                    seq[i + 1] = a;
                }
                if !has_bigram(&seq, a, b) {
                    return seq;
                }
            }
        }
    }
}

/// Gold class of a content sequence under `spec`.
pub(crate) fn label_of(spec: &TaskSpec, content: &[u32]) -> usize {
    match spec.family {
        Family::ContainsToken => usize::from(content.contains(&spec.targets[0])),
        Family::Parity => count(content, spec.targets[0]) % 2,
        Family::MajorityClass => {
            let p = content.iter().filter(|t| spec.targets.contains(t)).count();
            usize::from(2 * p > content.len())
        }
        Family::PositionProbe => usize::from(spec.targets.contains(&content[spec.position])),
        Family::PatternMatch => usize::from(has_bigram(content, spec.targets[0], spec.targets[1])),
    }
}

/// Deterministic, class-balanced dataset with disjoint splits.
pub fn generate_task(spec: &TaskSpec) -> Result<Task> {
    let alphabet = validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = &spec.splits;
    let total = s.train + s.dev + s.test;
    let mut labels: Vec<usize> = (0..total).map(|i| i % 2).collect();
    labels.shuffle(&mut rng);

    let mut seen = HashSet::with_capacity(total);
    let mut examples = Vec::with_capacity(total);
    for label in labels {
        let mut attempts = 0;
        let content = loop {
            let c = sample(spec, &alphabet, label, &mut rng);
            if seen.insert(c.clone()) {
                break c;
            }
            attempts += 1;
            if attempts >= MAX_ATTEMPTS {
                return Err(infeasible(spec, "not enough distinct sequences for the requested splits"));
            }
        };
        debug_assert_eq!(label_of(spec, &content), label);
        let mut tokens = content;
        tokens.push(QUERY);
        examples.push(Example { tokens, label });
    }
    let test = examples.split_off(s.train + s.dev);
    let dev = examples.split_off(s.train);
    let task = Task {
        spec: spec.clone(),
        train: examples,
        dev,
        test,
    };
    task.check_disjoint()?;
    Ok(task)
}
