use super::{build_hooks, PetHyper, PetKind};
use crate::backbone::{BackboneVars, BackboneWeights, ModelConfig, PetHooks};
use crate::error::Result;
use crate::tasks::{accuracy, Example};
use crate::tensor::{Graph, Real, Tensor, Var};

/// What is attached to the frozen backbone, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub enum Payload {
    Bare,
    Pet { kind: PetKind, theta: Var },
    /// Flat delta `|θ₀|` added to every backbone weight.
    Delta(Var),
}

/// Concrete counterpart of [`Payload`] for evaluation.
#[derive(Clone, Copy, Debug)]
pub enum Solution<'a> {
    Bare,
    Pet(PetKind, &'a [f32]),
    Delta(&'a [f32]),
}

/// Frozen backbone plus PET hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct TunedModel<'a> {
    pub cfg: &'a ModelConfig,
    pub weights: &'a BackboneWeights,
    pub hyper: &'a PetHyper,
}

const EVAL_CHUNK: usize = 128;

impl<'a> TunedModel<'a> {
    pub fn new(cfg: &'a ModelConfig, weights: &'a BackboneWeights, hyper: &'a PetHyper) -> Self {
        TunedModel { cfg, weights, hyper }
    }

    /// Final-position logits restricted to the label tokens, `[batch, labels]`.
    pub fn logits<T: Real>(&self, g: &mut Graph<T>, payload: Payload, batch: &[Vec<u32>], labels: &[usize]) -> Result<Var> {
        let (vars, hooks) = match payload {
            Payload::Bare => (BackboneVars::bind(g, self.cfg, self.weights, false), PetHooks::none()),
            Payload::Pet { kind, theta } => {
                let vars = BackboneVars::bind(g, self.cfg, self.weights, false);
                let hooks = build_hooks(g, kind, theta, self.hyper, self.cfg)?;
                (vars, hooks)
            }
            Payload::Delta(delta) => (
                BackboneVars::bind_with_delta(g, self.cfg, self.weights, delta)?,
                PetHooks::none(),
            ),
        };
        let full = vars.forward(g, batch, &hooks)?;
        g.gather_last(full, labels)
    }

    /// Mean cross-entropy of `examples` over the label tokens.
    pub fn loss<T: Real>(&self, g: &mut Graph<T>, payload: Payload, examples: &[Example], labels: &[usize]) -> Result<Var> {
        let batch: Vec<Vec<u32>> = examples.iter().map(|e| e.tokens.clone()).collect();
        let targets: Vec<usize> = examples.iter().map(|e| e.label).collect();
        let logits = self.logits(g, payload, &batch, labels)?;
        g.cross_entropy(logits, &targets)
    }

    /// Argmax class per example; ties resolve to the lower class index.
    pub fn predict(&self, solution: Solution, examples: &[Example], labels: &[usize]) -> Result<Vec<usize>> {
        let shifted;
        let (model, solution) = match solution {
            Solution::Delta(delta) => {
                shifted = self.weights.with_delta(delta)?;
                (TunedModel { weights: &shifted, ..*self }, Solution::Bare)
            }
            other => (*self, other),
        };
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(EVAL_CHUNK) {
            let mut g = Graph::<f32>::new();
            let payload = match solution {
                Solution::Pet(kind, v) => Payload::Pet {
                    kind,
                    theta: g.constant(Tensor::vector(v.to_vec())),
                },
                _ => Payload::Bare,
            };
            let batch: Vec<Vec<u32>> = chunk.iter().map(|e| e.tokens.clone()).collect();
            let logits = model.logits(&mut g, payload, &batch, labels)?;
            for row in g.value(logits).data().chunks(labels.len()) {
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
                out.push(best);
            }
        }
        Ok(out)
    }

    pub fn accuracy(&self, solution: Solution, examples: &[Example], labels: &[usize]) -> Result<f64> {
        let predicted = self.predict(solution, examples, labels)?;
        accuracy(examples, &predicted)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pet::init_pet;
    use crate::tasks::{generate_task, registry, Mode};

    #[test]
    fn delta_of_zero_matches_bare_model() {
        let cfg = ModelConfig::default();
        let w = BackboneWeights::init(&cfg).unwrap();
        let hyper = PetHyper::desk();
        let model = TunedModel::new(&cfg, &w, &hyper);
        let task = generate_task(&registry(Mode::Single, 0).0[0]).unwrap();
        let labels = task.label_tokens();
        let zeros = vec![0.0; w.num_params()];
        let a = model.predict(Solution::Bare, &task.dev, &labels).unwrap();
        let b = model.predict(Solution::Delta(&zeros), &task.dev, &labels).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn restricted_logits_have_two_columns() {
        let cfg = ModelConfig::default();
        let w = BackboneWeights::init(&cfg).unwrap();
        let hyper = PetHyper::desk();
        let model = TunedModel::new(&cfg, &w, &hyper);
        let sol = init_pet(PetKind::Adapter, &hyper, &cfg, 0).unwrap();
        let mut g = Graph::<f32>::new();
        let theta = g.param(Tensor::vector(sol.vector));
        let out = model
            .logits(&mut g, Payload::Pet { kind: PetKind::Adapter, theta }, &[vec![4, 5, 2]], &[0, 1])
            .unwrap();
        assert_eq!(g.shape(out), [1, 2]);
    }
}
