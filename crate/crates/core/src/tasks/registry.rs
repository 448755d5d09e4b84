//! Desk-scale task registry: 12 training and 4 held-out tasks in multi-task
//! mode, or one training task and same-category test tasks in single-task
//! mode.

use serde::{Deserialize, Serialize};

use super::{Family, SplitSizes, TaskSpec, NO, YES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Single,
    Multi,
}

const CONTENT_LEN: usize = 9;
const ALPHABET: (u32, u32) = (4, 32);

fn base(name: &str, family: Family, targets: Vec<u32>, seed: u64) -> TaskSpec {
    TaskSpec {
        name: name.to_string(),
        family,
        targets,
        others: Vec::new(),
        position: 0,
        max_count: 2,
        content_len: CONTENT_LEN,
        alphabet: ALPHABET,
        labels: [NO, YES],
        splits: SplitSizes::default(),
        seed,
    }
}

pub(crate) fn contains_spec(name: &str, target: u32, content_len: usize, seed: u64) -> TaskSpec {
    TaskSpec {
        content_len,
        ..base(name, Family::ContainsToken, vec![target], seed)
    }
}

fn majority(name: &str, first: Vec<u32>, second: Vec<u32>, seed: u64) -> TaskSpec {
    TaskSpec {
        others: second,
        ..base(name, Family::MajorityClass, first, seed)
    }
}

fn probe(name: &str, position: usize, set: Vec<u32>, seed: u64) -> TaskSpec {
    TaskSpec {
        position,
        ..base(name, Family::PositionProbe, set, seed)
    }
}

fn pattern(name: &str, a: u32, b: u32, seed: u64) -> TaskSpec {
    base(name, Family::PatternMatch, vec![a, b], seed)
}

fn parity(name: &str, target: u32, seed: u64) -> TaskSpec {
    base(name, Family::Parity, vec![target], seed)
}

fn mix(seed: u64, i: u64) -> u64 {
    // splitmix64 step, so per-task seeds are decorrelated
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(i + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn seeded(mut specs: Vec<TaskSpec>, seed: u64, offset: u64) -> Vec<TaskSpec> {
    for (i, s) in specs.iter_mut().enumerate() {
        s.seed = mix(seed, offset + i as u64);
    }
    specs
}

/// Training and held-out test task specs for `mode`.
pub fn registry(mode: Mode, seed: u64) -> (Vec<TaskSpec>, Vec<TaskSpec>) {
    match mode {
        Mode::Single => {
            let train = vec![contains_spec("contains-05", 5, CONTENT_LEN, 0)];
            // Same keyword as the training task under shifted input
            // distributions: narrower filler vocabularies, shorter inputs,
            // more occurrences.
            let test = vec![
                TaskSpec {
                    alphabet: (4, 18),
                    ..contains_spec("contains-05-low", 5, CONTENT_LEN, 0)
                },
                TaskSpec {
                    alphabet: (5, 20),
                    ..contains_spec("contains-05-mid", 5, CONTENT_LEN, 0)
                },
                contains_spec("contains-05-short", 5, 7, 0),
                TaskSpec {
                    max_count: 4,
                    ..contains_spec("contains-05-dense", 5, CONTENT_LEN, 0)
                },
            ];
            (seeded(train, seed, 0), seeded(test, seed, 100))
        }
        Mode::Multi => {
            let train = vec![
                contains_spec("contains-05", 5, CONTENT_LEN, 0),
                contains_spec("contains-09", 9, CONTENT_LEN, 0),
                contains_spec("contains-14", 14, CONTENT_LEN, 0),
                contains_spec("contains-20", 20, CONTENT_LEN, 0),
                majority("majority-04", vec![4, 5, 6, 7], vec![8, 9, 10, 11], 0),
                majority("majority-12", vec![12, 13, 14, 15], vec![16, 17, 18, 19], 0),
                probe("probe-0", 0, (4..18).collect(), 0),
                probe("probe-4", 4, (18..32).collect(), 0),
                pattern("pattern-06-07", 6, 7, 0),
                pattern("pattern-22-23", 22, 23, 0),
                parity("parity-10", 10, 0),
                parity("parity-25", 25, 0),
            ];
            let test = vec![
                contains_spec("contains-27", 27, CONTENT_LEN, 0),
                majority("majority-20", vec![20, 21, 22, 23], vec![24, 25, 26, 27], 0),
                probe("probe-8", 8, (11..25).collect(), 0),
                pattern("pattern-11-12", 11, 12, 0),
            ];
            (seeded(train, seed, 0), seeded(test, seed, 100))
        }
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::tasks::generate_task;

    #[test]
    fn multi_mode_shape() {
        let (train, test) = registry(Mode::Multi, 1);
        assert_eq!(train.len(), 12);
        assert_eq!(test.len(), 4);
        let families: BTreeSet<Family> = train.iter().map(|s| s.family).collect();
        assert!(families.len() >= 4);
        for t in &test {
            assert!(train.iter().all(|s| s != t && s.name != t.name));
        }
    }

    #[test]
    fn single_mode_tests_share_category() {
        let (train, test) = registry(Mode::Single, 1);
        assert_eq!(train.len(), 1);
        assert!(test.len() >= 4);
        assert!(test.iter().all(|t| t.category() == train[0].category()));
    }

    #[test]
    fn every_registered_task_generates() {
        for mode in [Mode::Single, Mode::Multi] {
            let (train, test) = registry(mode, 7);
            for spec in train.iter().chain(&test) {
                let task = generate_task(spec).unwrap();
                let ones = task.train.iter().filter(|e| e.label == 1).count() as f64 / task.train.len() as f64;
                assert!((ones - 0.5).abs() <= 0.05, "{}: {ones}", spec.name);
            }
        }
    }

    #[test]
    fn registry_is_deterministic() {
        assert_eq!(registry(Mode::Multi, 3), registry(Mode::Multi, 3));
        assert_ne!(registry(Mode::Multi, 3).0[0].seed, registry(Mode::Multi, 4).0[0].seed);
    }
}
