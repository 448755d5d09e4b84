use super::{layout, Layout, PetHyper, PetKind};
use crate::backbone::{AdapterPair, LayerHooks, LoraPair, ModelConfig, PetHooks};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Var};

fn piece<T: Real>(g: &mut Graph<T>, theta: Var, layout: &Layout, name: &str) -> Result<Var> {
    let slot = layout.slot(name)?;
    let flat = g.slice(theta, 0, slot.offset, slot.numel())?;
    g.reshape(flat, &slot.shape)
}

/// Per-layer prefix keys and values produced by the reparameterization MLP
/// `tanh(S·W₁ + b₁)·W₂ + b₂`, each `[n_heads, m, d_head]`.
pub fn prefix_kv<T: Real>(
    g: &mut Graph<T>,
    theta: Var,
    hyper: &PetHyper,
    cfg: &ModelConfig,
) -> Result<Vec<(Var, Var)>> {
    let lay = layout(PetKind::Prefix, hyper, cfg)?;
    let m = hyper.prefix_len;
    if m == 0 {
        return Err(Error::PrefixShapeMismatch("prefix length must be positive".into()));
    }
    let (l, h, dh) = (cfg.n_layers, cfg.n_heads, cfg.d_head());
    let s = piece(g, theta, &lay, "prefix.source")?;
    let w1 = piece(g, theta, &lay, "prefix.w1")?;
    let b1 = piece(g, theta, &lay, "prefix.b1")?;
    let w2 = piece(g, theta, &lay, "prefix.w2")?;
    let b2 = piece(g, theta, &lay, "prefix.b2")?;
    let z = g.matmul(s, w1)?;
    let z = g.add_row(z, b1)?;
    let z = g.tanh(z)?;
    let z = g.matmul(z, w2)?;
    let z = g.add_row(z, b2)?;
    // [m, L·2·d] → [L, 2, H, m, d_h]
    let z = g.reshape(z, &[m, l, 2, h, dh])?;
    let z = g.permute(z, &[1, 2, 3, 0, 4])?;
    let z = g.reshape(z, &[l * 2, h * m * dh])?;
    let mut out = Vec::with_capacity(l);
    for layer in 0..l {
        let k = g.slice(z, 0, 2 * layer, 1)?;
        let k = g.reshape(k, &[h, m, dh])?;
        let v = g.slice(z, 0, 2 * layer + 1, 1)?;
        let v = g.reshape(v, &[h, m, dh])?;
        out.push((k, v));
    }
    Ok(out)
}

/// Turns a flat PET vector node into backbone hooks.
pub fn build_hooks<T: Real>(
    g: &mut Graph<T>,
    kind: PetKind,
    theta: Var,
    hyper: &PetHyper,
    cfg: &ModelConfig,
) -> Result<PetHooks> {
    let lay = layout(kind, hyper, cfg)?;
    if g.shape(theta) != [lay.len()] {
        return Err(Error::shape(
            "build_hooks",
            format!("{kind} vector {:?}, layout needs {}", g.shape(theta), lay.len()),
        ));
    }
    let mut layers = vec![LayerHooks::default(); cfg.n_layers];
    match kind {
        PetKind::Adapter => {
            for (l, hook) in layers.iter_mut().enumerate() {
                let mut pair = |site: &str| -> Result<AdapterPair> {
                    Ok(AdapterPair {
                        down: piece(g, theta, &lay, &format!("layer{l}.{site}.down"))?,
                        up: piece(g, theta, &lay, &format!("layer{l}.{site}.up"))?,
                    })
                };
                hook.adapter_attn = Some(pair("attn")?);
                hook.adapter_ffn = Some(pair("ffn")?);
            }
        }
        PetKind::Lora => {
            for (l, hook) in layers.iter_mut().enumerate() {
                let mut pair = |site: &str| -> Result<LoraPair> {
                    Ok(LoraPair {
                        a: piece(g, theta, &lay, &format!("layer{l}.{site}.a"))?,
                        b: piece(g, theta, &lay, &format!("layer{l}.{site}.b"))?,
                    })
                };
                hook.lora_q = Some(pair("q")?);
                hook.lora_v = Some(pair("v")?);
                hook.lora_scale = hyper.lora_scale;
            }
        }
        PetKind::Prefix => {
            for (hook, kv) in layers.iter_mut().zip(prefix_kv(g, theta, hyper, cfg)?) {
                hook.prefix = Some(kv);
            }
        }
        PetKind::FullFineTune => unreachable!("layout() rejects full fine-tuning"),
    }
    Ok(PetHooks { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneVars, BackboneWeights};
    use crate::pet::init_pet;
    use crate::tensor::Tensor;

    #[test]
    fn zero_lora_b_leaves_logits_unchanged() {
        let cfg = ModelConfig::default();
        let w = BackboneWeights::init(&cfg).unwrap();
        let hyper = PetHyper::desk();
        let sol = init_pet(PetKind::Lora, &hyper, &cfg, 1).unwrap();
        let batch = vec![vec![5, 6, 7, 2], vec![9, 9, 4, 2]];

        let mut g = Graph::<f32>::new();
        let vars = BackboneVars::bind(&mut g, &cfg, &w, false);
        let base = vars.forward(&mut g, &batch, &PetHooks::none()).unwrap();
        let theta = g.constant(Tensor::vector(sol.vector.clone()));
        let hooks = build_hooks(&mut g, PetKind::Lora, theta, &hyper, &cfg).unwrap();
        let tuned = vars.forward(&mut g, &batch, &hooks).unwrap();
        assert_eq!(g.value(base).data(), g.value(tuned).data());
    }

    #[test]
    fn prefix_attention_rows_sum_to_one() {
        let cfg = ModelConfig::default();
        let w = BackboneWeights::init(&cfg).unwrap();
        let hyper = PetHyper::desk();
        let sol = init_pet(PetKind::Prefix, &hyper, &cfg, 2).unwrap();
        let mut g = Graph::<f64>::new();
        let vars = BackboneVars::bind(&mut g, &cfg, &w, false);
        let theta = g.constant(Tensor::vector(sol.vector.iter().map(|&v| v as f64).collect()));
        let hooks = build_hooks(&mut g, PetKind::Prefix, theta, &hyper, &cfg).unwrap();
        let batch = [vec![5u32, 6, 7, 2]];
        let ids: Vec<usize> = batch[0].iter().map(|&t| t as usize).collect();
        let x = g.gather_rows(vars.token_emb, &ids).unwrap();
        let (_, att) = vars.attention(&mut g, x, 1, 0, &hooks.layers[0]).unwrap();
        let shape = g.shape(att).to_vec();
        assert_eq!(shape, vec![cfg.n_heads, 4, hyper.prefix_len + 4]);
        for row in g.value(att).data().chunks(shape[2]) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_vector_length_is_rejected() {
        let cfg = ModelConfig::default();
        let mut g = Graph::<f32>::new();
        let theta = g.constant(Tensor::zeros(vec![10]));
        assert!(build_hooks(&mut g, PetKind::Adapter, theta, &PetHyper::desk(), &cfg).is_err());
    }
}
