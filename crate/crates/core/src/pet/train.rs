use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Payload, Solution, TunedModel};
use super::{init_pet, PetKind, PetSolution};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tasks::{Example, Task};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    /// Dev evaluation period; the final step is always evaluated.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            batch: 32,
            lr: 1e-2,
            eval_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.eval_every == 0 || !(self.lr > 0.0) {
            return Err(Error::ConfigInvalid("steps, batch, eval_every and lr must be positive".into()));
        }
        Ok(())
    }
}

/// Reshuffled-epoch minibatches over one split.
pub(crate) struct Batcher<'a> {
    examples: &'a [Example],
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl<'a> Batcher<'a> {
    pub(crate) fn new(examples: &'a [Example], batch: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptySplit("train".into()));
        }
        Ok(Batcher {
            examples,
            order: (0..examples.len()).collect(),
            cursor: examples.len(),
            batch: batch.min(examples.len()),
        })
    }

    pub(crate) fn next(&mut self, rng: &mut ChaCha8Rng) -> Vec<Example> {
        if self.cursor + self.batch > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + self.batch]
            .iter()
            .map(|&i| self.examples[i].clone())
            .collect();
        self.cursor += self.batch;
        out
    }
}

/// Result of [`fit_groups`]: the best-dev parameters and the dev history.
#[derive(Clone, Debug)]
pub struct Fit {
    pub best: Vec<Vec<f32>>,
    pub best_dev: f64,
    pub best_step: usize,
    /// `(step, dev metric)` at every evaluation.
    pub history: Vec<(usize, f64)>,
    pub losses: Vec<f32>,
}

/// Adam over several flat parameter groups, each with its own learning
/// rate, with periodic dev checkpointing.
///
/// `loss` builds the objective from one parameter node per group. `eval`
/// scores the current parameters; the first strictly greater score wins.
pub fn fit_groups<L, E>(init: Vec<Vec<f32>>, lrs: &[f32], steps: usize, eval_every: usize, mut loss: L, mut eval: E) -> Result<Fit>
where
    L: FnMut(&mut Graph<f32>, &[Var], usize) -> Result<Var>,
    E: FnMut(&[Vec<f32>], usize) -> Result<f64>,
{
    assert_eq!(init.len(), lrs.len());
    let mut params = init;
    let mut opts: Vec<Adam> = lrs.iter().map(|&lr| Adam::new(lr)).collect();
    let mut fit = Fit {
        best: params.clone(),
        best_dev: f64::NEG_INFINITY,
        best_step: 0,
        history: Vec::new(),
        losses: Vec::with_capacity(steps),
    };
    for step in 1..=steps {
        let mut g = Graph::<f32>::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(Tensor::vector(p.clone()))).collect();
        let l = loss(&mut g, &vars, step).map_err(|e| e.into_diverged(step))?;
        let value = g.scalar_value(l);
        if !value.is_finite() {
            return Err(Error::DivergedLoss { step });
        }
        g.backward(l).map_err(|e| e.into_diverged(step))?;
        fit.losses.push(value);
        for ((p, v), opt) in params.iter_mut().zip(&vars).zip(&mut opts) {
            if let Some(grad) = g.grad(*v) {
                opt.update(&mut [p.as_mut_slice()], &[grad]);
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::DivergedLoss { step });
            }
        }
        if step % eval_every == 0 || step == steps {
            let dev = eval(&params, step)?;
            fit.history.push((step, dev));
            if dev > fit.best_dev {
                fit.best_dev = dev;
                fit.best_step = step;
                fit.best.clone_from(&params);
            }
        }
    }
    if steps == 0 {
        fit.best_dev = eval(&params, 0)?;
        fit.history.push((0, fit.best_dev));
    }
    Ok(fit)
}

/// [`fit_groups`] for a single parameter vector.
pub fn fit_vector<L, E>(init: Vec<f32>, steps: usize, lr: f32, eval_every: usize, mut loss: L, mut eval: E) -> Result<Fit>
where
    L: FnMut(&mut Graph<f32>, Var, usize) -> Result<Var>,
    E: FnMut(&[f32]) -> Result<f64>,
{
    fit_groups(
        vec![init],
        &[lr],
        steps,
        eval_every,
        |g, vars, step| loss(g, vars[0], step),
        |p, _| eval(&p[0]),
    )
}

/// A trained PET solution with its dev and test accuracy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainedPet {
    pub solution: PetSolution,
    /// Best dev accuracy reached during training.
    pub dev: f64,
    /// Test accuracy of the best-dev checkpoint.
    pub e_ori: f64,
}

/// Trains one PET on `task` from a seeded initialization.
pub fn train_pet(model: &TunedModel, kind: PetKind, task: &Task, cfg: &TrainConfig, seed: u64) -> Result<TrainedPet> {
    cfg.validate()?;
    let init = init_pet(kind, model.hyper, model.cfg, seed)?;
    let labels = task.label_tokens();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut batches = Batcher::new(&task.train, cfg.batch)?;
    let fit = fit_vector(
        init.vector.clone(),
        cfg.steps,
        cfg.lr,
        cfg.eval_every,
        |g, theta, _| {
            let batch = batches.next(&mut rng);
            model.loss(g, Payload::Pet { kind, theta }, &batch, &labels)
        },
        |v| model.accuracy(Solution::Pet(kind, v), &task.dev, &labels),
    )?;
    let best = fit.best.into_iter().next().expect("one group");
    let e_ori = model.accuracy(Solution::Pet(kind, &best), &task.test, &labels)?;
    let solution = PetSolution::new(kind, best, model.hyper, model.cfg, task.id())?;
    Ok(TrainedPet {
        solution,
        dev: fit.best_dev,
        e_ori,
    })
}
