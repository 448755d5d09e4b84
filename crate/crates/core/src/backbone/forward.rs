use super::{BackboneWeights, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Var};

/// Low-rank pair for `X ← X + s·X·A·B`, `A ∈ d×r`, `B ∈ r×d`.
#[derive(Clone, Copy, Debug)]
pub struct LoraPair {
    pub a: Var,
    pub b: Var,
}

/// Bottleneck pair for `X ← X + silu(X·W_down)·W_up`.
#[derive(Clone, Copy, Debug)]
pub struct AdapterPair {
    pub down: Var,
    pub up: Var,
}

/// Injection points of one layer. All fields default to absent.
#[derive(Clone, Copy, Debug, Default)]
pub struct LayerHooks {
    pub lora_q: Option<LoraPair>,
    pub lora_v: Option<LoraPair>,
    pub lora_scale: f64,
    /// Per-head prefix keys and values, each `[n_heads, m, d_head]`.
    pub prefix: Option<(Var, Var)>,
    pub adapter_attn: Option<AdapterPair>,
    pub adapter_ffn: Option<AdapterPair>,
}

/// Hooks for every layer; an empty list means the bare backbone.
#[derive(Clone, Debug, Default)]
pub struct PetHooks {
    pub layers: Vec<LayerHooks>,
}

impl PetHooks {
    pub fn none() -> Self {
        PetHooks::default()
    }

    fn layer(&self, i: usize) -> LayerHooks {
        self.layers.get(i).copied().unwrap_or_default()
    }
}

/// Layer weights bound onto a graph.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Backbone weights bound onto a graph, ready for forward passes.
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub cfg: ModelConfig,
    pub token_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<LayerVars>,
}

fn layer_vars(vars: &[Var]) -> LayerVars {
    LayerVars {
        wq: vars[0],
        wk: vars[1],
        wv: vars[2],
        wo: vars[3],
        w1: vars[4],
        b1: vars[5],
        w2: vars[6],
        b2: vars[7],
    }
}

impl BackboneVars {
    fn from_list(cfg: &ModelConfig, vars: Vec<Var>) -> Self {
        BackboneVars {
            cfg: cfg.clone(),
            token_emb: vars[0],
            pos_emb: vars[1],
            layers: vars[2..].chunks(8).map(layer_vars).collect(),
        }
    }

    /// Binds θ₀ as constants, or as parameters when `trainable`.
    pub fn bind<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, w: &BackboneWeights, trainable: bool) -> Self {
        let vars = w
            .tensors()
            .into_iter()
            .map(|t| if trainable { g.param(t.cast()) } else { g.constant(t.cast()) })
            .collect();
        Self::from_list(cfg, vars)
    }

    /// Binds `θ₀ + delta` where `delta` is a flat node of length `|θ₀|`.
    pub fn bind_with_delta<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, w: &BackboneWeights, delta: Var) -> Result<Self> {
        if g.shape(delta) != [w.num_params()] {
            return Err(Error::shape(
                "bind_with_delta",
                format!("delta {:?} for {} weights", g.shape(delta), w.num_params()),
            ));
        }
        let mut offset = 0;
        let mut vars = Vec::new();
        for t in w.tensors() {
            let base = g.constant(t.cast());
            let piece = g.slice(delta, 0, offset, t.numel())?;
            let piece = g.reshape(piece, t.shape())?;
            vars.push(g.add(base, piece)?);
            offset += t.numel();
        }
        Ok(Self::from_list(cfg, vars))
    }

    /// All bound weight nodes in flattening order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.token_emb, self.pos_emb];
        for l in &self.layers {
            out.extend([l.wq, l.wk, l.wv, l.wo, l.w1, l.b1, l.w2, l.b2]);
        }
        out
    }

    fn project<T: Real>(&self, g: &mut Graph<T>, x: Var, w: Var, lora: Option<LoraPair>, s: f64) -> Result<Var> {
        let base = g.matmul(x, w)?;
        match lora {
            None => Ok(base),
            Some(LoraPair { a, b }) => {
                let xa = g.matmul(x, a)?;
                let xab = g.matmul(xa, b)?;
                let delta = g.scale(xab, s)?;
                g.add(base, delta)
            }
        }
    }

    fn split_heads<T: Real>(&self, g: &mut Graph<T>, x: Var, batch: usize, n: usize) -> Result<Var> {
        let (h, dh) = (self.cfg.n_heads, self.cfg.d_head());
        let x = g.reshape(x, &[batch, n, h, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[batch * h, n, dh])
    }

    fn with_prefix<T: Real>(&self, g: &mut Graph<T>, prefix: Var, x: Var, batch: usize) -> Result<Var> {
        let (h, dh) = (self.cfg.n_heads, self.cfg.d_head());
        let shape = g.shape(prefix).to_vec();
        if shape.len() != 3 || shape[0] != h || shape[2] != dh {
            return Err(Error::PrefixShapeMismatch(format!(
                "expected [{h}, m, {dh}], got {shape:?}"
            )));
        }
        let m = shape[1];
        // An empty prefix is the empty concatenation.
        if m == 0 {
            return Ok(x);
        }
        let p = g.expand(prefix, batch)?;
        let p = g.reshape(p, &[batch * h, m, dh])?;
        g.concat(&[p, x], 1)
    }

    /// Multi-head attention of `layer` over `x: [batch·n, d]`. Returns the
    /// projected output and the attention weights `[batch·heads, n, m + n]`.
    pub fn attention<T: Real>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        batch: usize,
        layer: usize,
        hooks: &LayerHooks,
    ) -> Result<(Var, Var)> {
        let d = self.cfg.d_model;
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != d || !shape[0].is_multiple_of(batch) {
            return Err(Error::shape("mha_forward", format!("{shape:?} for batch {batch}, d={d}")));
        }
        let n = shape[0] / batch;
        let lw = self.layers[layer];
        let s = hooks.lora_scale;
        let q = self.project(g, x, lw.wq, hooks.lora_q, s)?;
        let k = g.matmul(x, lw.wk)?;
        let v = self.project(g, x, lw.wv, hooks.lora_v, s)?;
        let q = self.split_heads(g, q, batch, n)?;
        let mut k = self.split_heads(g, k, batch, n)?;
        let mut v = self.split_heads(g, v, batch, n)?;
        if let Some((pk, pv)) = hooks.prefix {
            k = self.with_prefix(g, pk, k, batch)?;
            v = self.with_prefix(g, pv, v, batch)?;
        }
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (self.cfg.d_head() as f64).sqrt())?;
        let att = g.softmax_rows(scores)?;
        let heads = g.bmm(att, v, false)?;
        let heads = g.reshape(heads, &[batch, self.cfg.n_heads, n, self.cfg.d_head()])?;
        let heads = g.permute(heads, &[0, 2, 1, 3])?;
        let heads = g.reshape(heads, &[batch * n, d])?;
        Ok((g.matmul(heads, lw.wo)?, att))
    }

    pub fn mha<T: Real>(&self, g: &mut Graph<T>, x: Var, batch: usize, layer: usize, hooks: &LayerHooks) -> Result<Var> {
        Ok(self.attention(g, x, batch, layer, hooks)?.0)
    }

    /// `relu(H·W_1 + b_1)·W_2 + b_2`.
    pub fn ffn<T: Real>(&self, g: &mut Graph<T>, h: Var, layer: usize) -> Result<Var> {
        if g.shape(h).last() != Some(&self.cfg.d_model) {
            return Err(Error::shape("ffn_forward", format!("{:?}", g.shape(h))));
        }
        let lw = self.layers[layer];
        let z = g.matmul(h, lw.w1)?;
        let z = g.add_row(z, lw.b1)?;
        let z = g.relu(z)?;
        let z = g.matmul(z, lw.w2)?;
        g.add_row(z, lw.b2)
    }

    fn adapter<T: Real>(g: &mut Graph<T>, x: Var, pair: Option<AdapterPair>) -> Result<Var> {
        match pair {
            None => Ok(x),
            Some(AdapterPair { down, up }) => {
                let z = g.matmul(x, down)?;
                let z = g.silu(z)?;
                let z = g.matmul(z, up)?;
                g.add(x, z)
            }
        }
    }

    fn check_tokens(&self, batch: &[Vec<u32>]) -> Result<usize> {
        let n = batch.first().map_or(0, Vec::len);
        if n == 0 || batch.iter().any(|s| s.len() != n) {
            return Err(Error::shape("model_forward", "batch needs equal, non-zero sequence lengths"));
        }
        if n > self.cfg.max_len {
            return Err(Error::SequenceTooLong {
                len: n,
                max_len: self.cfg.max_len,
            });
        }
        if let Some(&t) = batch.iter().flatten().find(|&&t| t as usize >= self.cfg.vocab) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: self.cfg.vocab,
            });
        }
        Ok(n)
    }

    /// Final hidden states `[batch·n, d]`.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, batch: &[Vec<u32>], hooks: &PetHooks) -> Result<Var> {
        let n = self.check_tokens(batch)?;
        let b = batch.len();
        let ids: Vec<usize> = batch.iter().flatten().map(|&t| t as usize).collect();
        let tok = g.gather_rows(self.token_emb, &ids)?;
        let pos = g.slice(self.pos_emb, 0, 0, n)?;
        let pos = g.expand(pos, b)?;
        let pos = g.reshape(pos, &[b * n, self.cfg.d_model])?;
        let mut x = g.add(tok, pos)?;
        for layer in 0..self.layers.len() {
            let h = hooks.layer(layer);
            let a = self.mha(g, x, b, layer, &h)?;
            x = g.add(x, a)?;
            x = Self::adapter(g, x, h.adapter_attn)?;
            let f = self.ffn(g, x, layer)?;
            x = g.add(x, f)?;
            x = Self::adapter(g, x, h.adapter_ffn)?;
        }
        Ok(x)
    }

    fn head<T: Real>(&self, g: &mut Graph<T>, h: Var) -> Result<Var> {
        let et = g.transpose(self.token_emb)?;
        g.matmul(h, et)
    }

    /// Logits at the final position of each sequence, `[batch, vocab]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, batch: &[Vec<u32>], hooks: &PetHooks) -> Result<Var> {
        let x = self.encode(g, batch, hooks)?;
        let (b, d) = (batch.len(), self.cfg.d_model);
        let n = g.shape(x)[0] / b;
        let x = g.reshape(x, &[b, n, d])?;
        let last = g.slice(x, 1, n - 1, 1)?;
        let last = g.reshape(last, &[b, d])?;
        self.head(g, last)
    }

    /// Logits at every position, `[batch·n, vocab]`.
    pub fn forward_all<T: Real>(&self, g: &mut Graph<T>, batch: &[Vec<u32>], hooks: &PetHooks) -> Result<Var> {
        let x = self.encode(g, batch, hooks)?;
        self.head(g, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 4,
            n_heads: 2,
            d_ff: 6,
            vocab: 7,
            max_len: 5,
            seed: 3,
        }
    }

    #[test]
    fn ffn_zero_weights_give_zero() {
        let cfg = tiny();
        let mut w = BackboneWeights::init(&cfg).unwrap();
        let l = &mut w.layers[0];
        for t in [&mut l.w1, &mut l.w2] {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::<f64>::new();
        let vars = BackboneVars::bind(&mut g, &cfg, &w, false);
        let h = g.constant(Tensor::new(vec![2, 4], vec![1., -2., 3., 0.5, 0.1, 0.2, 0.3, 0.4]).unwrap());
        let out = vars.ffn(&mut g, h, 0).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ffn_scalar_hand_case() {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 1,
            n_heads: 1,
            d_ff: 2,
            vocab: 2,
            max_len: 2,
            seed: 0,
        };
        let mut w = BackboneWeights::init(&cfg).unwrap();
        let l = &mut w.layers[0];
        l.w1 = Tensor::new(vec![1, 2], vec![2.0, -1.0]).unwrap();
        l.b1 = Tensor::vector(vec![0.5, 0.25]);
        l.w2 = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        l.b2 = Tensor::vector(vec![-1.0]);
        let mut g = Graph::<f64>::new();
        let vars = BackboneVars::bind(&mut g, &cfg, &w, false);
        let h = g.constant(Tensor::new(vec![1, 1], vec![1.5]).unwrap());
        let out = vars.ffn(&mut g, h, 0).unwrap();
        // relu(3.5)=3.5, relu(-1.25)=0 → 3.5·3 − 1
        assert!((g.value(out).data()[0] - 9.5).abs() < 1e-12);
    }

    #[test]
    fn empty_prefix_is_bit_identical_to_none() {
        let cfg = tiny();
        let w = BackboneWeights::init(&cfg).unwrap();
        let run = |m: Option<usize>| {
            let mut g = Graph::<f32>::new();
            let vars = BackboneVars::bind(&mut g, &cfg, &w, false);
            let x = g.constant(Tensor::new(vec![3, 4], (0..12).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap());
            let mut hooks = LayerHooks::default();
            if let Some(m) = m {
                let p = g.constant(Tensor::zeros(vec![2, m, 2]));
                hooks.prefix = Some((p, p));
            }
            let out = vars.mha(&mut g, x, 1, 0, &hooks).unwrap();
            g.value(out).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(Some(0)), run(None));
        assert_ne!(run(Some(1)), run(None));
    }

    #[test]
    fn single_head_prefix_hand_case() {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 2,
            n_heads: 1,
            d_ff: 3,
            vocab: 2,
            max_len: 2,
            seed: 0,
        };
        let mut w = BackboneWeights::init(&cfg).unwrap();
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = &mut w.layers[0];
        l.wq = eye.clone();
        l.wk = eye.clone();
        l.wo = eye;
        l.wv = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let mut g = Graph::<f64>::new();
        let vars = BackboneVars::bind(&mut g, &cfg, &w, false);
        let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let pk = g.constant(Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap());
        let pv = g.constant(Tensor::new(vec![1, 1, 2], vec![2.0, -1.0]).unwrap());
        let hooks = LayerHooks {
            prefix: Some((pk, pv)),
            ..Default::default()
        };
        let out = vars.mha(&mut g, x, 1, 0, &hooks).unwrap();
        // q = k = (1, 2), v = (1, 4); scores (2, 5)/√2 over keys [P_K; k].
        let a0 = 1.0 / (1.0 + (3.0 / 2f64.sqrt()).exp());
        let want = [a0 * 2.0 + (1.0 - a0), -a0 + (1.0 - a0) * 4.0];
        for (got, want) in g.value(out).data().iter().zip(want) {
            assert!((got - want).abs() < 1e-5);
        }
    }

    #[test]
    fn rejects_bad_tokens() {
        let cfg = tiny();
        let w = BackboneWeights::init(&cfg).unwrap();
        let mut g = Graph::<f32>::new();
        let vars = BackboneVars::bind(&mut g, &cfg, &w, false);
        assert!(matches!(
            vars.forward(&mut g, &[vec![1, 9]], &PetHooks::none()),
            Err(Error::TokenOutOfRange { token: 9, .. })
        ));
        assert!(matches!(
            vars.forward(&mut g, &[vec![1; 6]], &PetHooks::none()),
            Err(Error::SequenceTooLong { len: 6, max_len: 5 })
        ));
    }

    #[test]
    fn prefix_shape_is_checked() {
        let cfg = tiny();
        let w = BackboneWeights::init(&cfg).unwrap();
        let mut g = Graph::<f32>::new();
        let vars = BackboneVars::bind(&mut g, &cfg, &w, false);
        let bad = g.constant(Tensor::zeros(vec![2, 3, 3]));
        let hooks = PetHooks {
            layers: vec![LayerHooks {
                prefix: Some((bad, bad)),
                ..Default::default()
            }],
        };
        assert!(matches!(
            vars.forward(&mut g, &[vec![1, 2]], &hooks),
            Err(Error::PrefixShapeMismatch(_))
        ));
    }
}
