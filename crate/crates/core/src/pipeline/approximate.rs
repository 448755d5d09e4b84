use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{dist_loss, ApproximationConfig, GeneratorSet, SolutionBank};
use crate::error::{Error, Result};
use crate::pet::{fit_groups, Batcher, Payload, PetKind, TunedModel};
use crate::subspace::{sample_ratios, DownProjection, Generator, UpProjection};
use crate::tasks::Task;
use crate::tensor::{Graph, Tensor, Var};

/// Mean losses over one logging window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproxLogEntry {
    pub step: usize,
    pub dist: f64,
    pub task: f64,
}

/// Learned projections for the three methods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubspaceArtifacts {
    pub downs: BTreeMap<PetKind, DownProjection>,
    /// Up-projections wrapped as generators.
    pub ups: GeneratorSet,
    /// Per-step total loss.
    pub losses: Vec<f32>,
    pub log: Vec<ApproxLogEntry>,
}

/// Jointly trains a down- and an up-projection per method so that every
/// interpolation of the three intrinsic vectors of a task decodes to all
/// three of its stored solutions.
///
/// Each step samples one task and one `(α, β)`; the loss is
/// `Σ_k dist_weight·‖θ̄_k − θ_k‖² + task_weight·L_task(θ̄_k)` on a fresh
/// minibatch of that task. Only projection parameters are updated.
pub fn approximate_subspace(
    model: &TunedModel,
    tasks: &[Task],
    solutions: &SolutionBank,
    cfg: &ApproximationConfig,
) -> Result<SubspaceArtifacts> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::ConfigInvalid("approximation needs at least one task".into()));
    }
    let kinds = PetKind::PETS;
    let mut targets: Vec<[Tensor; 3]> = Vec::with_capacity(tasks.len());
    for task in tasks {
        let mut per = Vec::with_capacity(3);
        for kind in kinds {
            let sol = solutions.get(&(task.id().to_string(), kind)).ok_or_else(|| Error::MissingSolution {
                task: task.id().to_string(),
                kind: kind.name().to_string(),
            })?;
            per.push(Tensor::vector(sol.vector.clone()));
        }
        targets.push(per.try_into().expect("three kinds"));
    }
    let widths: Vec<usize> = targets[0].iter().map(Tensor::numel).collect();
    let downs: Vec<DownProjection> = kinds
        .iter()
        .zip(&widths)
        .enumerate()
        .map(|(k, (_, &n))| DownProjection::init(n, cfg.y, cfg.seed.wrapping_add(k as u64)))
        .collect();
    let ups: Vec<UpProjection> = widths
        .iter()
        .enumerate()
        .map(|(k, &n)| UpProjection::init(cfg.y, n, cfg.seed.wrapping_add(10 + k as u64)))
        .collect();
    let init: Vec<Vec<f32>> = downs
        .iter()
        .map(DownProjection::params)
        .chain(ups.iter().map(|u| u.weight.data().to_vec()))
        .collect();
    let lrs = vec![cfg.lr_proj; init.len()];

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut batchers = tasks
        .iter()
        .map(|t| Batcher::new(&t.train, cfg.batch))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Vec<usize>> = tasks.iter().map(Task::label_tokens).collect();
    let mut log = Vec::new();
    let (mut win_dist, mut win_task, mut win_n) = (0.0, 0.0, 0usize);

    let fit = fit_groups(
        init,
        &lrs,
        cfg.steps,
        cfg.steps.max(1),
        |g: &mut Graph<f32>, vars: &[Var], step| {
            let i = rng.gen_range(0..tasks.len());
            let (alpha, beta) = sample_ratios(&mut rng);
            let gamma = 1.0 - alpha - beta;
            let thetas: Vec<Var> = targets[i].iter().map(|t| g.constant(t.clone())).collect();
            let mut mixed = None;
            for (k, w) in [alpha, beta, gamma].into_iter().enumerate() {
                let ik = downs[k].apply_graph(g, vars[k], thetas[k])?;
                let term = g.scale(ik, w)?;
                mixed = Some(match mixed {
                    None => term,
                    Some(acc) => g.add(acc, term)?,
                });
            }
            let mixed = mixed.expect("three kinds");
            let batch = if cfg.task_weight > 0.0 {
                batchers[i].next(&mut rng)
            } else {
                Vec::new()
            };
            let (mut total, mut d_sum, mut t_sum) = (None, 0.0, 0.0);
            for (k, &kind) in kinds.iter().enumerate() {
                let approx = ups[k].apply_graph(g, vars[3 + k], mixed)?;
                let d = dist_loss(g, approx, thetas[k])?;
                d_sum += g.scalar_value(d) as f64;
                let mut term = g.scale(d, cfg.dist_weight)?;
                if cfg.task_weight > 0.0 {
                    let t = model.loss(g, Payload::Pet { kind, theta: approx }, &batch, &labels[i])?;
                    t_sum += g.scalar_value(t) as f64;
                    let t = g.scale(t, cfg.task_weight)?;
                    term = g.add(term, t)?;
                }
                total = Some(match total {
                    None => term,
                    Some(acc) => g.add(acc, term)?,
                });
            }
            win_dist += d_sum;
            win_task += t_sum;
            win_n += 1;
            if step % cfg.eval_every == 0 || step == cfg.steps {
                log.push(ApproxLogEntry {
                    step,
                    dist: win_dist / win_n as f64,
                    task: win_task / win_n as f64,
                });
                (win_dist, win_task, win_n) = (0.0, 0.0, 0);
            }
            Ok(total.expect("three kinds"))
        },
        |_, _| Ok(0.0),
    )?;

    let mut trained_downs = BTreeMap::new();
    let mut generators = BTreeMap::new();
    for (k, &kind) in kinds.iter().enumerate() {
        trained_downs.insert(kind, downs[k].with_params(&fit.best[k])?);
        let up = Generator::Linear(ups[k].clone()).with_params(&fit.best[3 + k])?;
        generators.insert(kind, up);
    }
    Ok(SubspaceArtifacts {
        downs: trained_downs,
        ups: GeneratorSet::new(generators)?,
        losses: fit.losses,
        log,
    })
}
