//! Generic masked-token pretraining that produces θ₀.
//!
//! Sequences come from a fixed sparse bigram chain over the content
//! alphabet and end with the query token, so the positions and token
//! statistics the downstream tasks rely on are all exercised.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BackboneVars, BackboneWeights, ModelConfig, PetHooks};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tasks::{FIRST_CONTENT, MASK, QUERY};
use crate::tensor::Graph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub seq_len: usize,
    pub mask_prob: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 300,
            batch: 32,
            lr: 3e-3,
            seq_len: 10,
            mask_prob: 0.2,
            seed: 11,
        }
    }
}

/// Each content token transitions to one of a few preferred successors.
struct BigramChain {
    successors: Vec<Vec<u32>>,
    content: Vec<u32>,
}

impl BigramChain {
    fn new(vocab: usize, rng: &mut ChaCha8Rng) -> Self {
        let content: Vec<u32> = (FIRST_CONTENT..vocab as u32).collect();
        let successors = content
            .iter()
            .map(|_| (0..3).map(|_| *content.choose(rng).expect("content tokens")).collect())
            .collect();
        BigramChain { successors, content }
    }

    fn sample(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        let mut cur = *self.content.choose(rng).expect("content tokens");
        for _ in 0..len {
            out.push(cur);
            cur = if rng.gen_bool(0.3) {
                *self.content.choose(rng).expect("content tokens")
            } else {
                *self.successors[(cur - FIRST_CONTENT) as usize].choose(rng).expect("successors")
            };
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainLog {
    pub losses: Vec<f32>,
}

/// Trains all backbone weights with a masked-token objective.
pub fn pretrain(cfg: &ModelConfig, pcfg: &PretrainConfig) -> Result<(BackboneWeights, PretrainLog)> {
    if pcfg.seq_len < 2 || pcfg.seq_len > cfg.max_len {
        return Err(Error::ConfigInvalid("pretrain seq_len must be in [2, max_len]".into()));
    }
    let mut weights = BackboneWeights::init(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(pcfg.seed);
    let chain = BigramChain::new(cfg.vocab, &mut rng);
    let mut opt = Adam::new(pcfg.lr);
    let mut losses = Vec::with_capacity(pcfg.steps);
    let content_len = pcfg.seq_len - 1;

    for step in 0..pcfg.steps {
        let mut inputs = Vec::with_capacity(pcfg.batch);
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for b in 0..pcfg.batch {
            let mut seq = chain.sample(content_len, &mut rng);
            let mut masked_any = false;
            for i in 0..content_len {
                if rng.gen_bool(pcfg.mask_prob) || (!masked_any && i == content_len - 1) {
                    rows.push(b * pcfg.seq_len + i);
                    targets.push(seq[i] as usize);
                    seq[i] = MASK;
                    masked_any = true;
                }
            }
            seq.push(QUERY);
            inputs.push(seq);
        }
        let mut g = Graph::<f32>::new();
        let vars = BackboneVars::bind(&mut g, cfg, &weights, true);
        let logits = vars.forward_all(&mut g, &inputs, &PetHooks::none())?;
        let picked = g.gather_rows(logits, &rows)?;
        let loss = g.cross_entropy(picked, &targets)?;
        g.backward(loss)?;
        losses.push(g.scalar_value(loss));
        let grads: Vec<Vec<f32>> = vars
            .all()
            .iter()
            .map(|&v| g.grad(v).map(<[f32]>::to_vec).ok_or(Error::DivergedLoss { step }))
            .collect::<Result<_>>()?;
        let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
        let mut params: Vec<&mut [f32]> = weights.tensors_mut().into_iter().map(|t| t.data_mut()).collect();
        opt.update(&mut params, &grad_refs);
        if weights.tensors().iter().any(|t| !t.is_finite()) {
            return Err(Error::DivergedLoss { step });
        }
    }
    Ok((weights, PretrainLog { losses }))
}
