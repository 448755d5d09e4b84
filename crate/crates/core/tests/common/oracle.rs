//! Oracle comparisons returning their error, so the integration tests can
//! assert on them and the acceptance harness can report them.

use super::*;
use unisub::backbone::{pretrain, BackboneVars, LayerHooks, PetHooks, PretrainConfig};
use unisub::pet::build_hooks;
use unisub::subspace::{fwht, IntrinsicVector};

/// Maximum of `|a − b| / max(1, |b|)`.
pub fn max_err(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}

pub fn desk() -> (ModelConfig, BackboneWeights, PetHyper) {
    let cfg = ModelConfig::default();
    let pc = PretrainConfig {
        steps: 20,
        ..PretrainConfig::default()
    };
    let (w, _) = pretrain(&cfg, &pc).unwrap();
    (cfg, w, PetHyper::desk())
}

pub fn batch() -> Vec<Vec<u32>> {
    vec![vec![4, 9, 17, 5, 30, 2], vec![12, 12, 5, 8, 21, 2], vec![31, 4, 6, 7, 5, 2]]
}

pub fn graph_logits(cfg: &ModelConfig, w: &BackboneWeights, pet: Option<(PetKind, &[f32], &PetHyper)>) -> Vec<f32> {
    let mut g = Graph::<f32>::new();
    let vars = BackboneVars::bind(&mut g, cfg, w, false);
    let hooks = match pet {
        None => PetHooks::none(),
        Some((kind, theta, hyper)) => {
            let t = g.constant(Tensor::vector(theta.to_vec()));
            build_hooks(&mut g, kind, t, hyper, cfg).unwrap()
        }
    };
    let out = vars.forward(&mut g, &batch(), &hooks).unwrap();
    g.value(out).data().to_vec()
}

/// Sylvester Hadamard matrix of order `n`.
pub fn hadamard(n: usize) -> Mat {
    let mut h = Mat::new(1, 1, vec![1.0]);
    while h.rows < n {
        let top = Mat::hstack(&[h.clone(), h.clone()]);
        let bottom = Mat::hstack(&[h.clone(), h.scale(-1.0)]);
        h = top.vstack(&bottom);
    }
    h
}

/// Whether the in-place transform equals `H·v` exactly for integer inputs.
pub fn fwht_is_exact() -> bool {
    (0..=6).all(|p| {
        let n = 1usize << p;
        let v: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
        let want = hadamard(n).matmul(&Mat::new(n, 1, v.clone()));
        let mut got = v;
        fwht(&mut got).unwrap();
        got == want.data
    })
}

/// Fastfood delta against the dense `s·H·diag(G)·Π·H·diag(B)` chain per block.
pub fn fastfood_error(y: usize, out_len: usize, seed: u64) -> f64 {
    let ff = FastfoodProjector::new(y, out_len, seed).unwrap();
    let yp = ff.y_pad;
    let iv = IntrinsicVector::new(randn32(y, 1.0, seed + 1)).unwrap();
    let got = ff.delta(&iv).unwrap();
    let h = hadamard(yp);
    let mut padded: Vec<f64> = iv.values.iter().map(|&v| v as f64).collect();
    padded.resize(yp, 0.0);
    let mut want = Vec::new();
    for k in 0..ff.blocks {
        let diag = |d: &[f32]| {
            let mut m = Mat::new(yp, yp, vec![0.0; yp * yp]);
            for j in 0..yp {
                m.data[j * yp + j] = d[k * yp + j] as f64;
            }
            m
        };
        let mut perm = Mat::new(yp, yp, vec![0.0; yp * yp]);
        for j in 0..yp {
            perm.data[j * yp + (ff.perm[k * yp + j] - k * yp)] = 1.0;
        }
        let chain = h.matmul(&diag(&ff.g)).matmul(&perm).matmul(&h).matmul(&diag(&ff.b));
        let out = chain.matmul(&Mat::new(yp, 1, padded.clone())).scale(ff.scale[k] as f64);
        want.extend(out.data);
    }
    want.truncate(out_len);
    max_err(&got, &want)
}

/// Multi-head attention with prefixes against explicit concatenation.
pub fn mha_prefix_error(cfg: &ModelConfig, w: &BackboneWeights) -> f64 {
    let (n, m, d) = (6, 5, cfg.d_model);
    let x = randn32(n * d, 1.0, 1);
    let pk = randn32(cfg.n_heads * m * cfg.d_head(), 1.0, 2);
    let pv = randn32(cfg.n_heads * m * cfg.d_head(), 1.0, 3);

    let mut g = Graph::<f32>::new();
    let vars = BackboneVars::bind(&mut g, cfg, w, false);
    let xv = g.constant(Tensor::new(vec![n, d], x.clone()).unwrap());
    let kv = g.constant(Tensor::new(vec![cfg.n_heads, m, cfg.d_head()], pk.clone()).unwrap());
    let vv = g.constant(Tensor::new(vec![cfg.n_heads, m, cfg.d_head()], pv.clone()).unwrap());
    let hooks = LayerHooks {
        prefix: Some((kv, vv)),
        ..LayerHooks::default()
    };
    let out = vars.mha(&mut g, xv, 1, 1, &hooks).unwrap();

    let dh = cfg.d_head();
    let heads: Vec<(Mat, Mat)> = (0..cfg.n_heads)
        .map(|h| {
            let span = h * m * dh..(h + 1) * m * dh;
            (Mat::from_slice(m, dh, &pk[span.clone()]), Mat::from_slice(m, dh, &pv[span]))
        })
        .collect();
    let lw = &w.layers[1];
    let ws = [&lw.wq, &lw.wk, &lw.wv, &lw.wo].map(Mat::from_tensor);
    let want = ref_mha(cfg, &Mat::from_slice(n, d, &x), [&ws[0], &ws[1], &ws[2], &ws[3]], None, 0.0, Some(&heads));
    max_err(g.value(out).data(), &want.data)
}

/// Hooked logits against the reference forward pass.
pub fn hook_error(cfg: &ModelConfig, w: &BackboneWeights, hyper: &PetHyper, kind: PetKind, std: f64, seed: u64) -> f64 {
    let theta = randn32(layout(kind, hyper, cfg).unwrap().len(), std, seed);
    let got = graph_logits(cfg, w, Some((kind, &theta, hyper)));
    let want = ref_logits(cfg, w, &RefHooks::from_pet(kind, &theta, hyper, cfg), &batch()).concat();
    max_err(&got, &want)
}

/// LoRA logits against a bare backbone with `W + s·A·B` folded into Q and V.
pub fn lora_merge_error(cfg: &ModelConfig, w: &BackboneWeights, hyper: &PetHyper) -> f64 {
    let theta = randn32(layout(PetKind::Lora, hyper, cfg).unwrap().len(), 0.2, 5);
    let got = graph_logits(cfg, w, Some((PetKind::Lora, &theta, hyper)));
    let hooks = RefHooks::from_pet(PetKind::Lora, &theta, hyper, cfg);
    let mut merged = w.clone();
    for (l, layer) in merged.layers.iter_mut().enumerate() {
        let [qa, qb, va, vb] = hooks.lora[l].as_ref().unwrap();
        for (t, a, b) in [(&mut layer.wq, qa, qb), (&mut layer.wv, va, vb)] {
            let upd = a.matmul(b).scale(hyper.lora_scale);
            for (x, u) in t.data_mut().iter_mut().zip(&upd.data) {
                *x = (*x as f64 + u) as f32;
            }
        }
    }
    let via_merge: Vec<f64> = graph_logits(cfg, &merged, None).iter().map(|&v| v as f64).collect();
    max_err(&got, &via_merge)
}

/// Whether a zero-update PET leaves the logits bit-identical.
pub fn is_neutral(cfg: &ModelConfig, w: &BackboneWeights, hyper: &PetHyper, kind: PetKind) -> bool {
    let bits = |v: Vec<f32>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let zeros = vec![0.0; layout(kind, hyper, cfg).unwrap().len()];
    bits(graph_logits(cfg, w, Some((kind, &zeros, hyper)))) == bits(graph_logits(cfg, w, None))
}
