use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GeneratorSet, SubspaceConfig, TransferSelect};
use crate::error::{Error, Result};
use crate::pet::{fit_vector, Batcher, PetKind, TunedModel};
use crate::subspace::{Generator, IntrinsicVector};
use crate::tasks::Task;
use crate::tensor::Tensor;

/// Result of tuning an intrinsic vector for one method on one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubspaceRun {
    pub task: String,
    pub kind: PetKind,
    pub artifact_id: String,
    pub best: IntrinsicVector,
    pub best_step: usize,
    /// Best dev accuracy.
    pub dev: f64,
    /// Test accuracy at the best-dev checkpoint.
    pub e_sub: f64,
    /// Intrinsic vector at every evaluation, in step order.
    pub checkpoints: Vec<(usize, IntrinsicVector)>,
}

/// Accuracy of the method `kind` generated from `i` on `examples`.
fn score(model: &TunedModel, kind: PetKind, gen: &Generator, i: &IntrinsicVector, examples: &[crate::tasks::Example], labels: &[usize]) -> Result<f64> {
    let out = gen.generate(i)?;
    model.accuracy(Generator::solution(kind, &out), examples, labels)
}

/// Tunes only a random intrinsic vector through the frozen generator of
/// `kind`; backbone and generator stay fixed.
pub fn subspace_optimize(
    model: &TunedModel,
    task: &Task,
    kind: PetKind,
    set: &GeneratorSet,
    cfg: &SubspaceConfig,
) -> Result<SubspaceRun> {
    cfg.validate()?;
    let gen = set.get(kind)?;
    let params = Tensor::vector(gen.params());
    let labels = task.label_tokens();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut batches = Batcher::new(&task.train, cfg.batch)?;
    let init = IntrinsicVector::random(set.y, cfg.init_std, cfg.seed ^ 0x1a7e);
    let mut checkpoints = Vec::new();
    let fit = fit_vector(
        init.values,
        cfg.steps,
        cfg.lr,
        cfg.eval_every,
        |g, i, _| {
            let batch = batches.next(&mut rng);
            let p = g.constant(params.clone());
            let out = gen.apply_graph(g, p, i)?;
            model.loss(g, Generator::payload(kind, out), &batch, &labels)
        },
        |v| {
            let iv = IntrinsicVector::new(v.to_vec())?;
            let dev = score(model, kind, gen, &iv, &task.dev, &labels)?;
            checkpoints.push((0, iv));
            Ok(dev)
        },
    )?;
    for ((step, _), cp) in fit.history.iter().zip(checkpoints.iter_mut()) {
        cp.0 = *step;
    }
    let best = IntrinsicVector::new(fit.best.into_iter().next().expect("one group"))?;
    let e_sub = score(model, kind, gen, &best, &task.test, &labels)?;
    Ok(SubspaceRun {
        task: task.id().to_string(),
        kind,
        artifact_id: set.id.clone(),
        best,
        best_step: fit.best_step,
        dev: fit.best_dev,
        e_sub,
        checkpoints,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub task: String,
    pub source: PetKind,
    pub target: PetKind,
    /// Step of the transferred checkpoint.
    pub step: usize,
    pub vector: IntrinsicVector,
    /// Target parameters (or backbone delta for fine-tuning).
    pub theta: Vec<f32>,
    pub dev: f64,
    /// Test accuracy of the target method.
    pub e_transfer: f64,
}

/// Decodes a source run's intrinsic vector through the target's generator.
pub fn transfer(
    model: &TunedModel,
    src: &SubspaceRun,
    target: PetKind,
    set: &GeneratorSet,
    task: &Task,
    select: TransferSelect,
) -> Result<TransferResult> {
    if src.artifact_id != set.id {
        return Err(Error::SubspaceMismatch(format!(
            "run from {} applied to {}",
            src.artifact_id, set.id
        )));
    }
    if src.best.y() != set.y || src.task != task.id() {
        return Err(Error::SubspaceMismatch(format!("y {} vs {} on task {}", src.best.y(), set.y, task.id())));
    }
    let gen = set.get(target)?;
    let labels = task.label_tokens();
    let (step, vector, dev) = match select {
        TransferSelect::SourceBest => {
            let dev = score(model, target, gen, &src.best, &task.dev, &labels)?;
            (src.best_step, src.best.clone(), dev)
        }
        TransferSelect::TargetDev => {
            let mut best: Option<(usize, &IntrinsicVector, f64)> = None;
            for (step, iv) in &src.checkpoints {
                let dev = score(model, target, gen, iv, &task.dev, &labels)?;
                if best.is_none_or(|b| dev > b.2) {
                    best = Some((*step, iv, dev));
                }
            }
            let (step, iv, dev) = best.ok_or_else(|| Error::SubspaceMismatch("source run has no checkpoints".into()))?;
            (step, iv.clone(), dev)
        }
    };
    let theta = gen.generate(&vector)?;
    let e_transfer = model.accuracy(Generator::solution(target, &theta), &task.test, &labels)?;
    Ok(TransferResult {
        task: task.id().to_string(),
        source: src.kind,
        target,
        step,
        vector,
        theta,
        dev,
        e_transfer,
    })
}

/// One entry of a source × target matrix. Diagonal cells reproduce the
/// subspace-optimization result of the source method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub task: String,
    pub source: PetKind,
    pub target: PetKind,
    pub e_sub: f64,
}

/// Subspace optimization for every method in `set`, then transfer of each
/// run to every method.
pub fn transfer_matrix(model: &TunedModel, task: &Task, set: &GeneratorSet, cfg: &SubspaceConfig) -> Result<(Vec<SubspaceRun>, Vec<MatrixCell>)> {
    let kinds = set.kinds();
    let mut runs = Vec::with_capacity(kinds.len());
    let mut cells = Vec::with_capacity(kinds.len() * kinds.len());
    for &source in &kinds {
        let run = subspace_optimize(model, task, source, set, cfg)?;
        for &target in &kinds {
            let e_sub = transfer(model, &run, target, set, task, cfg.select)?.e_transfer;
            cells.push(MatrixCell {
                task: task.id().to_string(),
                source,
                target,
                e_sub,
            });
        }
        runs.push(run);
    }
    Ok((runs, cells))
}
