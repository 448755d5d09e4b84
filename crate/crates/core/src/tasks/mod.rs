//! Synthetic sequence-classification tasks standing in for downstream NLP
//! datasets.
//!
//! Every example is a run of content tokens followed by [`QUERY`]; the label
//! is a single vocabulary token read at that final position.

mod generate;
mod registry;

pub use generate::generate_task;
pub use registry::{registry, Mode};

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pet::{Solution, TunedModel};

/// Label token for class 0.
pub const NO: u32 = 0;
/// Label token for class 1.
pub const YES: u32 = 1;
/// Final-position token whose representation carries the prediction.
pub const QUERY: u32 = 2;
/// Masking token used only by backbone pretraining.
pub const MASK: u32 = 3;
/// First token id available for content.
pub const FIRST_CONTENT: u32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Yes iff the target token occurs anywhere.
    ContainsToken,
    /// Yes iff tokens from the first group outnumber those from the second.
    MajorityClass,
    /// Yes iff the token at a fixed position belongs to the target set.
    PositionProbe,
    /// Yes iff the bigram `targets[0] targets[1]` occurs.
    PatternMatch,
    /// Yes iff the target token occurs an odd number of times.
    Parity,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::ContainsToken,
        Family::MajorityClass,
        Family::PositionProbe,
        Family::PatternMatch,
        Family::Parity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::ContainsToken => "contains-token",
            Family::MajorityClass => "majority-class",
            Family::PositionProbe => "position-probe",
            Family::PatternMatch => "pattern-match",
            Family::Parity => "parity",
        }
    }
}

/// Category label grouping tasks for single-task evaluation. Each family is
/// its own category.
pub type TaskCategory = Family;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 512,
            dev: 128,
            test: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub family: Family,
    /// Family-specific key tokens (see [`Family`]).
    pub targets: Vec<u32>,
    /// Second token group for majority-class, or the probed position's set
    /// for position-probe when `targets` is the set itself.
    #[serde(default)]
    pub others: Vec<u32>,
    /// Probed position for position-probe.
    #[serde(default)]
    pub position: usize,
    /// Largest occurrence count for contains-token and parity.
    #[serde(default = "default_max_count")]
    pub max_count: usize,
    /// Number of content tokens before the query token.
    pub content_len: usize,
    /// Content alphabet `[lo, hi)` from which filler tokens are drawn.
    pub alphabet: (u32, u32),
    /// Vocabulary tokens for class 0 and class 1.
    pub labels: [u32; 2],
    pub splits: SplitSizes,
    pub seed: u64,
}

fn default_max_count() -> usize {
    2
}

impl TaskSpec {
    pub fn category(&self) -> TaskCategory {
        self.family
    }

    pub fn seq_len(&self) -> usize {
        self.content_len + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    /// Class index into [`TaskSpec::labels`].
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl Task {
    pub fn id(&self) -> &str {
        &self.spec.name
    }

    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn label_tokens(&self) -> Vec<usize> {
        self.spec.labels.iter().map(|&t| t as usize).collect()
    }

    /// Line-oriented dump: space-separated token ids, a tab, the label token.
    pub fn to_text(&self, split: Split) -> String {
        let mut out = String::new();
        for ex in self.split(split) {
            let toks: Vec<String> = ex.tokens.iter().map(u32::to_string).collect();
            let _ = writeln!(out, "{}\t{}", toks.join(" "), self.spec.labels[ex.label]);
        }
        out
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for ex in self.train.iter().chain(&self.dev).chain(&self.test) {
            if !seen.insert(&ex.tokens) {
                return Err(Error::InfeasibleSpec(format!("{}: duplicate example across splits", self.spec.name)));
            }
        }
        Ok(())
    }
}

/// Fraction of examples for which `predicted[i]` equals the gold class.
pub fn accuracy(examples: &[Example], predicted: &[usize]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptySplit("evaluation".into()));
    }
    assert_eq!(examples.len(), predicted.len());
    let hits = examples.iter().zip(predicted).filter(|(e, &p)| e.label == p).count();
    Ok(hits as f64 / examples.len() as f64)
}

/// Accuracy of `solution` attached to `model` on one split of `task`.
pub fn evaluate(model: &TunedModel, solution: Solution, task: &Task, split: Split) -> Result<f64> {
    let examples = task.split(split);
    if examples.is_empty() {
        return Err(Error::EmptySplit(format!("{}/{}", task.id(), split.name())));
    }
    model.accuracy(solution, examples, &task.label_tokens())
}
