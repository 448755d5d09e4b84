//! Frozen micro-transformer backbone.
//!
//! Each layer computes
//! `x ← x + MHA(x)`, adapter hook, `x ← x + FFN(x)`, adapter hook,
//! with no layer normalization. Labels are read from the final position
//! through an output head tied to the token embedding.

mod forward;
mod pretrain;

pub use forward::{AdapterPair, BackboneVars, LayerHooks, LayerVars, LoraPair, PetHooks};
pub use pretrain::{pretrain, PretrainConfig, PretrainLog};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            vocab: 32,
            max_len: 16,
            seed: 17,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.vocab == 0 || self.max_len == 0 {
            return bad("model dimensions must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.d_ff <= self.d_model {
            return bad("d_ff must exceed d_model");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    /// Per-head query maps `d×d_h`, concatenated column-wise into `d×d`.
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl LayerWeights {
    fn tensors(&self) -> [&Tensor; 8] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Pretrained weights θ₀.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneWeights {
    pub token_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerWeights>,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f32) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

impl BackboneWeights {
    /// Random initialization from `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let proj = 1.0 / (d as f32).sqrt();
        let token_emb = gaussian(&mut rng, vec![cfg.vocab, d], 0.5);
        let pos_emb = gaussian(&mut rng, vec![cfg.max_len, d], 0.1);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                wq: gaussian(&mut rng, vec![d, d], proj),
                wk: gaussian(&mut rng, vec![d, d], proj),
                wv: gaussian(&mut rng, vec![d, d], proj),
                wo: gaussian(&mut rng, vec![d, d], proj * 0.5),
                w1: gaussian(&mut rng, vec![d, cfg.d_ff], proj),
                b1: Tensor::zeros(vec![cfg.d_ff]),
                w2: gaussian(&mut rng, vec![cfg.d_ff, d], 0.5 / (cfg.d_ff as f32).sqrt()),
                b2: Tensor::zeros(vec![d]),
            })
            .collect();
        Ok(BackboneWeights {
            token_emb,
            pos_emb,
            layers,
        })
    }

    /// Every weight tensor in flattening order: embeddings, then per layer
    /// `wq wk wv wo w1 b1 w2 b2`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.token_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out
    }

    /// Number of tunable backbone parameters `|θ₀|`.
    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn flatten(&self) -> Vec<f32> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// `θ₀ + delta` as a new set of weights.
    pub fn with_delta(&self, delta: &[f32]) -> Result<Self> {
        if delta.len() != self.num_params() {
            return Err(Error::shape(
                "with_delta",
                format!("{} deltas for {} weights", delta.len(), self.num_params()),
            ));
        }
        let mut out = self.clone();
        let mut offset = 0;
        for t in out.tensors_mut() {
            let n = t.numel();
            for (w, d) in t.data_mut().iter_mut().zip(&delta[offset..offset + n]) {
                *w += d;
            }
            offset += n;
        }
        Ok(out)
    }

    /// SHA-256 over the little-endian weight bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
