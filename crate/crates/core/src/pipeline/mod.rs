//! Subspace approximation, subspace optimization and solution transfer,
//! plus the shared-intrinsic variant and the fine-tuning extension.

mod approximate;
mod optimize;
mod shared;

pub use approximate::{approximate_subspace, ApproxLogEntry, SubspaceArtifacts};
pub use optimize::{subspace_optimize, transfer, transfer_matrix, MatrixCell, SubspaceRun, TransferResult};
pub use shared::{init_generator, shared_intrinsic_approximate, train_full_finetune, FullFinetune, SharedSubspace};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pet::{PetKind, PetSolution};
use crate::subspace::Generator;
use crate::tensor::{Graph, Real, Var};

/// Stored PET solutions keyed by `(task id, kind)`.
pub type SolutionBank = BTreeMap<(String, PetKind), PetSolution>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproximationConfig {
    /// Weight of the reconstruction term against the task term.
    pub dist_weight: f64,
    /// Weight of the task term; zero trains on reconstruction alone.
    pub task_weight: f64,
    pub lr_proj: f32,
    /// Learning rate of shared intrinsic vectors (shared-intrinsic mode only).
    pub lr_intrinsic: f32,
    pub steps: usize,
    /// Loss-log period.
    pub eval_every: usize,
    pub y: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ApproximationConfig {
    fn default() -> Self {
        ApproximationConfig {
            dist_weight: 10.0,
            task_weight: 1.0,
            lr_proj: 1e-3,
            lr_intrinsic: 1e-2,
            steps: 1500,
            eval_every: 100,
            y: 4,
            batch: 32,
            seed: 29,
        }
    }
}

impl ApproximationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dist_weight > 0.0) {
            return Err(Error::ConfigInvalid("dist_weight must be positive".into()));
        }
        if self.task_weight < 0.0 || self.y == 0 || self.batch == 0 || self.eval_every == 0 {
            return Err(Error::ConfigInvalid("task_weight ≥ 0; y, batch, eval_every > 0".into()));
        }
        if !(self.lr_proj > 0.0 && self.lr_intrinsic > 0.0) {
            return Err(Error::ConfigInvalid("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Which checkpoint of a source run is transferred.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferSelect {
    /// The checkpoint that maximizes the target method's dev accuracy.
    TargetDev,
    /// The source run's own best-dev checkpoint.
    SourceBest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubspaceConfig {
    pub steps: usize,
    pub lr: f32,
    pub batch: usize,
    pub eval_every: usize,
    /// Std of the random initial intrinsic vector.
    pub init_std: f32,
    pub seed: u64,
    pub select: TransferSelect,
}

impl Default for SubspaceConfig {
    fn default() -> Self {
        SubspaceConfig {
            steps: 400,
            lr: 5e-2,
            batch: 32,
            eval_every: 5,
            init_std: 0.1,
            seed: 41,
            select: TransferSelect::TargetDev,
        }
    }
}

impl SubspaceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.eval_every == 0 || !(self.lr > 0.0) || !(self.init_std >= 0.0) {
            return Err(Error::ConfigInvalid("subspace batch, eval_every, lr must be positive".into()));
        }
        Ok(())
    }
}

/// One generator per method, all reading the same `y`-dimensional subspace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSet {
    pub id: String,
    pub y: usize,
    pub generators: BTreeMap<PetKind, Generator>,
}

impl GeneratorSet {
    pub fn new(generators: BTreeMap<PetKind, Generator>) -> Result<Self> {
        let y = generators
            .values()
            .next()
            .map(Generator::y)
            .ok_or_else(|| Error::SubspaceMismatch("no generators".into()))?;
        if generators.values().any(|g| g.y() != y) {
            return Err(Error::SubspaceMismatch("generators disagree on y".into()));
        }
        let mut h = Sha256::new();
        for (kind, gen) in &generators {
            h.update(kind.name().as_bytes());
            for v in gen.params() {
                h.update(v.to_le_bytes());
            }
        }
        Ok(GeneratorSet {
            id: hex::encode(&h.finalize()[..16]),
            y,
            generators,
        })
    }

    pub fn get(&self, kind: PetKind) -> Result<&Generator> {
        self.generators
            .get(&kind)
            .ok_or_else(|| Error::SubspaceMismatch(format!("no generator for {kind}")))
    }

    pub fn kinds(&self) -> Vec<PetKind> {
        self.generators.keys().copied().collect()
    }
}

/// `‖θ̄ − θ‖²`, summed.
pub fn dist_loss<T: Real>(g: &mut Graph<T>, approx: Var, target: Var) -> Result<Var> {
    if g.shape(approx) != g.shape(target) {
        return Err(Error::shape(
            "dist_loss",
            format!("{:?} vs {:?}", g.shape(approx), g.shape(target)),
        ));
    }
    let diff = g.sub(approx, target)?;
    g.sum_sq(diff)
}

/// `E_sub / E_ori`.
pub fn relative_performance(e_sub: f64, e_ori: f64) -> Result<f64> {
    if !(e_ori > 0.0) {
        return Err(Error::ZeroBaseline);
    }
    Ok(e_sub / e_ori)
}

/// One cell of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub task: String,
    pub source_kind: PetKind,
    pub target_kind: PetKind,
    #[serde(rename = "E_ori")]
    pub e_ori: f64,
    #[serde(rename = "E_sub")]
    pub e_sub: f64,
    /// `100 · E_sub / E_ori`.
    pub ratio: f64,
}

impl ResultRow {
    pub fn new(task: &str, source: PetKind, target: PetKind, e_ori: f64, e_sub: f64) -> Result<Self> {
        Ok(ResultRow {
            task: task.to_string(),
            source_kind: source,
            target_kind: target,
            e_ori,
            e_sub,
            ratio: 100.0 * relative_performance(e_sub, e_ori)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn dist(a: Vec<f64>, b: Vec<f64>) -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::vector(a));
        let b = g.constant(Tensor::vector(b));
        let l = dist_loss(&mut g, a, b)?;
        Ok(g.scalar_value(l))
    }

    #[test]
    fn dist_loss_cases() {
        assert_eq!(dist(vec![1.0, 2.0], vec![1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(dist(vec![2.0, 2.0], vec![1.0, 0.0]).unwrap(), 5.0);
        assert!(dist(vec![1.0], vec![1.0, 2.0]).is_err());
        let a: Vec<f64> = (0..50).map(|i| (i as f64 * 0.91).sin()).collect();
        let b: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).cos()).collect();
        let oracle: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        assert!((dist(a, b).unwrap() - oracle).abs() <= 1e-4 * oracle);
    }

    #[test]
    fn relative_performance_cases() {
        assert_eq!(relative_performance(0.7, 0.7).unwrap(), 1.0);
        assert!((relative_performance(84.9, 100.0).unwrap() - 0.849).abs() < 1e-12);
        assert!(relative_performance(1.018, 1.0).unwrap() > 1.0);
        assert!(matches!(relative_performance(0.5, 0.0), Err(Error::ZeroBaseline)));
    }
}
