use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ApproximationConfig, GeneratorSet};
use crate::error::{Error, Result};
use crate::pet::{fit_groups, fit_vector, param_count, Batcher, Payload, PetKind, Solution, TrainConfig, TunedModel};
use crate::subspace::{FastfoodProjector, Generator, IntrinsicVector, UpProjection};
use crate::tasks::Task;

/// Jointly trained per-task intrinsic vectors and per-method generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedSubspace {
    pub intrinsics: BTreeMap<String, IntrinsicVector>,
    pub set: GeneratorSet,
    pub losses: Vec<f32>,
}

/// Initial generator for `kind`: a dense up-projection for PETs, a Fastfood
/// projector over all backbone weights for full fine-tuning.
pub fn init_generator(model: &TunedModel, kind: PetKind, y: usize, seed: u64) -> Result<Generator> {
    match kind {
        PetKind::FullFineTune => Ok(Generator::Fastfood(FastfoodProjector::new(y, model.weights.num_params(), seed)?)),
        kind => Ok(Generator::Linear(UpProjection::init(
            y,
            param_count(kind, model.hyper, model.cfg)?,
            seed,
        ))),
    }
}

/// Trains one intrinsic vector per task, shared by all `kinds`, together
/// with one generator per kind, on `(1/K)·Σ_k L_task(gen_k(I_i))`.
///
/// Intrinsic vectors use `cfg.lr_intrinsic`; generators use `cfg.lr_proj`.
pub fn shared_intrinsic_approximate(
    model: &TunedModel,
    tasks: &[Task],
    kinds: &[PetKind],
    cfg: &ApproximationConfig,
) -> Result<SharedSubspace> {
    cfg.validate()?;
    if tasks.is_empty() || kinds.is_empty() {
        return Err(Error::ConfigInvalid("shared-intrinsic needs tasks and kinds".into()));
    }
    let n = tasks.len();
    let gens: Vec<Generator> = kinds
        .iter()
        .map(|&kind| init_generator(model, kind, cfg.y, cfg.seed.wrapping_add(20 + kind as u64)))
        .collect::<Result<_>>()?;
    let mut init: Vec<Vec<f32>> = (0..n)
        .map(|t| IntrinsicVector::random(cfg.y, 0.5, cfg.seed.wrapping_add(100 + t as u64)).values)
        .collect();
    init.extend(gens.iter().map(Generator::params));
    let mut lrs = vec![cfg.lr_intrinsic; n];
    lrs.extend(std::iter::repeat_n(cfg.lr_proj, kinds.len()));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut batchers = tasks
        .iter()
        .map(|t| Batcher::new(&t.train, cfg.batch))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Vec<usize>> = tasks.iter().map(Task::label_tokens).collect();
    let k = kinds.len() as f64;

    let fit = fit_groups(
        init,
        &lrs,
        cfg.steps,
        cfg.steps.max(1),
        |g, vars, _| {
            let i = rng.gen_range(0..n);
            let batch = batchers[i].next(&mut rng);
            let mut total = None;
            for (j, &kind) in kinds.iter().enumerate() {
                let out = gens[j].apply_graph(g, vars[n + j], vars[i])?;
                let l = model.loss(g, Generator::payload(kind, out), &batch, &labels[i])?;
                total = Some(match total {
                    None => l,
                    Some(acc) => g.add(acc, l)?,
                });
            }
            g.scale(total.expect("non-empty kinds"), 1.0 / k)
        },
        |_, _| Ok(0.0),
    )?;

    let intrinsics = tasks
        .iter()
        .zip(&fit.best)
        .map(|(t, v)| Ok((t.id().to_string(), IntrinsicVector::new(v.clone())?)))
        .collect::<Result<_>>()?;
    let mut generators = BTreeMap::new();
    for (j, &kind) in kinds.iter().enumerate() {
        generators.insert(kind, gens[j].with_params(&fit.best[n + j])?);
    }
    Ok(SharedSubspace {
        intrinsics,
        set: GeneratorSet::new(generators)?,
        losses: fit.losses,
    })
}

/// Full fine-tuning baseline trained as a delta over every backbone weight.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FullFinetune {
    pub delta: Vec<f32>,
    pub dev: f64,
    pub e_ori: f64,
}

pub fn train_full_finetune(model: &TunedModel, task: &Task, cfg: &TrainConfig, seed: u64) -> Result<FullFinetune> {
    cfg.validate()?;
    let labels = task.label_tokens();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf17e);
    let mut batches = Batcher::new(&task.train, cfg.batch)?;
    let fit = fit_vector(
        vec![0.0; model.weights.num_params()],
        cfg.steps,
        cfg.lr,
        cfg.eval_every,
        |g, delta, _| {
            let batch = batches.next(&mut rng);
            model.loss(g, Payload::Delta(delta), &batch, &labels)
        },
        |v| model.accuracy(Solution::Delta(v), &task.dev, &labels),
    )?;
    let delta = fit.best.into_iter().next().expect("one group");
    let e_ori = model.accuracy(Solution::Delta(&delta), &task.test, &labels)?;
    Ok(FullFinetune {
        delta,
        dev: fit.best_dev,
        e_ori,
    })
}
