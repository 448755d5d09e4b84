//! Shared by the integration tests and the acceptance harness: an
//! independent plain-loop reference forward pass and the gradient suite.
#![allow(dead_code)]

pub mod oracle;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use unisub::backbone::{BackboneWeights, ModelConfig};
use unisub::pet::{layout, Payload, PetHyper, PetKind, TunedModel};
use unisub::pipeline::dist_loss;
use unisub::subspace::{DownProjection, FastfoodProjector, UpProjection};
use unisub::tasks::Example;
use unisub::tensor::{grad_check, Graph, Tensor, Var};

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 4,
        n_heads: 2,
        d_ff: 6,
        vocab: 7,
        max_len: 5,
        seed: 3,
    }
}

pub fn tiny_hyper() -> PetHyper {
    PetHyper {
        adapter_rank: 2,
        lora_rank: 2,
        prefix_len: 2,
        prefix_hidden: 3,
        lora_scale: 1.6,
    }
}

pub fn randn(n: usize, std: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0, std).unwrap();
    (0..n).map(|_| d.sample(&mut rng)).collect()
}

pub fn randn32(n: usize, std: f64, seed: u64) -> Vec<f32> {
    randn(n, std, seed).into_iter().map(|v| v as f32).collect()
}

pub fn tiny_examples() -> Vec<Example> {
    vec![
        Example { tokens: vec![4, 5, 2, 6], label: 0 },
        Example { tokens: vec![6, 6, 3, 1], label: 1 },
        Example { tokens: vec![5, 4, 4, 2], label: 1 },
    ]
}

// ---------------------------------------------------------------------------
// Reference forward pass over row-major f64 matrices.

#[derive(Clone, Debug)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Mat { rows, cols, data }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        let (r, c) = if s.len() == 1 { (1, s[0]) } else { (s[0], s[1]) };
        Mat::new(r, c, t.data().iter().map(|&v| v as f64).collect())
    }

    pub fn from_slice(rows: usize, cols: usize, v: &[f32]) -> Self {
        Mat::new(rows, cols, v.iter().map(|&x| x as f64).collect())
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn matmul(&self, o: &Mat) -> Mat {
        assert_eq!(self.cols, o.rows);
        let mut out = vec![0.0; self.rows * o.cols];
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                for j in 0..o.cols {
                    out[i * o.cols + j] += a * o.at(k, j);
                }
            }
        }
        Mat::new(self.rows, o.cols, out)
    }

    pub fn add(&self, o: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (o.rows, o.cols));
        Mat::new(self.rows, self.cols, self.data.iter().zip(&o.data).map(|(a, b)| a + b).collect())
    }

    pub fn add_row(&self, v: &Mat) -> Mat {
        let data = (0..self.data.len()).map(|i| self.data[i] + v.data[i % self.cols]).collect();
        Mat::new(self.rows, self.cols, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat::new(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|v| v * s)
    }

    pub fn cols_range(&self, start: usize, len: usize) -> Mat {
        let data = (0..self.rows)
            .flat_map(|i| (start..start + len).map(move |j| (i, j)))
            .map(|(i, j)| self.at(i, j))
            .collect();
        Mat::new(self.rows, len, data)
    }

    pub fn transpose(&self) -> Mat {
        let data = (0..self.cols)
            .flat_map(|j| (0..self.rows).map(move |i| (i, j)))
            .map(|(i, j)| self.at(i, j))
            .collect();
        Mat::new(self.cols, self.rows, data)
    }

    pub fn vstack(&self, o: &Mat) -> Mat {
        assert_eq!(self.cols, o.cols);
        let mut data = self.data.clone();
        data.extend_from_slice(&o.data);
        Mat::new(self.rows + o.rows, self.cols, data)
    }

    pub fn hstack(parts: &[Mat]) -> Mat {
        let rows = parts[0].rows;
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend((0..p.cols).map(|j| p.at(i, j)));
            }
        }
        Mat::new(rows, cols, data)
    }

    pub fn softmax_rows(&self) -> Mat {
        let mut out = self.data.clone();
        for row in out.chunks_mut(self.cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for v in row.iter_mut() {
                *v = (*v - m).exp() / s;
            }
        }
        Mat::new(self.rows, self.cols, out)
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Per-layer hook matrices for the reference model.
#[derive(Clone, Debug, Default)]
pub struct RefHooks {
    pub lora: Vec<Option<[Mat; 4]>>,
    pub lora_scale: f64,
    /// Per layer, per head: `(K_prefix, V_prefix)` of shape `m×d_h`.
    pub prefix: Vec<Option<Vec<(Mat, Mat)>>>,
    pub adapter: Vec<Option<[Mat; 4]>>,
}

impl RefHooks {
    pub fn none(layers: usize) -> Self {
        RefHooks {
            lora: vec![None; layers],
            lora_scale: 0.0,
            prefix: vec![None; layers],
            adapter: vec![None; layers],
        }
    }

    /// Materializes a flat PET vector with explicit index arithmetic.
    pub fn from_pet(kind: PetKind, theta: &[f32], hyper: &PetHyper, cfg: &ModelConfig) -> Self {
        let lay = layout(kind, hyper, cfg).unwrap();
        let get = |name: &str| {
            let s = lay.slot(name).unwrap();
            let (r, c) = if s.shape.len() == 1 { (1, s.shape[0]) } else { (s.shape[0], s.shape[1]) };
            Mat::from_slice(r, c, &theta[s.offset..s.offset + r * c])
        };
        let l = cfg.n_layers;
        let mut h = RefHooks::none(l);
        match kind {
            PetKind::Adapter => {
                for i in 0..l {
                    h.adapter[i] = Some([
                        get(&format!("layer{i}.attn.down")),
                        get(&format!("layer{i}.attn.up")),
                        get(&format!("layer{i}.ffn.down")),
                        get(&format!("layer{i}.ffn.up")),
                    ]);
                }
            }
            PetKind::Lora => {
                h.lora_scale = hyper.lora_scale;
                for i in 0..l {
                    h.lora[i] = Some([
                        get(&format!("layer{i}.q.a")),
                        get(&format!("layer{i}.q.b")),
                        get(&format!("layer{i}.v.a")),
                        get(&format!("layer{i}.v.b")),
                    ]);
                }
            }
            PetKind::Prefix => {
                let z = get("prefix.source")
                    .matmul(&get("prefix.w1"))
                    .add_row(&get("prefix.b1"))
                    .map(f64::tanh)
                    .matmul(&get("prefix.w2"))
                    .add_row(&get("prefix.b2"));
                // Columns of z are ordered (layer, k|v, head, d_h).
                let (nh, dh, m) = (cfg.n_heads, cfg.d_head(), hyper.prefix_len);
                for layer in 0..l {
                    let heads = (0..nh)
                        .map(|head| {
                            let pick = |kv: usize| {
                                let base = ((layer * 2 + kv) * nh + head) * dh;
                                Mat::new(m, dh, (0..m).flat_map(|r| (0..dh).map(move |c| (r, c))).map(|(r, c)| z.at(r, base + c)).collect())
                            };
                            (pick(0), pick(1))
                        })
                        .collect();
                    h.prefix[layer] = Some(heads);
                }
            }
            PetKind::FullFineTune => unreachable!(),
        }
        h
    }
}

/// Multi-head attention of one sequence `x: n×d`, prefixes prepended to the
/// keys and values of each head.
pub fn ref_mha(
    cfg: &ModelConfig,
    x: &Mat,
    w: [&Mat; 4],
    lora: Option<&[Mat; 4]>,
    s: f64,
    prefix: Option<&Vec<(Mat, Mat)>>,
) -> Mat {
    let [wq, wk, wv, wo] = w;
    let mut q = x.matmul(wq);
    let k = x.matmul(wk);
    let mut v = x.matmul(wv);
    if let Some([qa, qb, va, vb]) = lora {
        q = q.add(&x.matmul(qa).matmul(qb).scale(s));
        v = v.add(&x.matmul(va).matmul(vb).scale(s));
    }
    let dh = cfg.d_head();
    let heads: Vec<Mat> = (0..cfg.n_heads)
        .map(|h| {
            let qh = q.cols_range(h * dh, dh);
            let mut kh = k.cols_range(h * dh, dh);
            let mut vh = v.cols_range(h * dh, dh);
            if let Some(p) = prefix {
                kh = p[h].0.vstack(&kh);
                vh = p[h].1.vstack(&vh);
            }
            qh.matmul(&kh.transpose()).scale(1.0 / (dh as f64).sqrt()).softmax_rows().matmul(&vh)
        })
        .collect();
    Mat::hstack(&heads).matmul(wo)
}

/// Final-position logits over the full vocabulary, one row per sequence.
pub fn ref_logits(cfg: &ModelConfig, w: &BackboneWeights, hooks: &RefHooks, batch: &[Vec<u32>]) -> Vec<Vec<f64>> {
    let emb = Mat::from_tensor(&w.token_emb);
    let pos = Mat::from_tensor(&w.pos_emb);
    let d = cfg.d_model;
    batch
        .iter()
        .map(|seq| {
            let n = seq.len();
            let mut x = Mat::new(n, d, (0..n).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| emb.at(seq[i] as usize, j) + pos.at(i, j)).collect());
            for (l, lw) in w.layers.iter().enumerate() {
                let ws = [&lw.wq, &lw.wk, &lw.wv, &lw.wo].map(Mat::from_tensor);
                let a = ref_mha(cfg, &x, [&ws[0], &ws[1], &ws[2], &ws[3]], hooks.lora[l].as_ref(), hooks.lora_scale, hooks.prefix[l].as_ref());
                x = x.add(&a);
                if let Some([d1, u1, _, _]) = &hooks.adapter[l] {
                    x = x.add(&x.matmul(d1).map(silu).matmul(u1));
                }
                let f = x
                    .matmul(&Mat::from_tensor(&lw.w1))
                    .add_row(&Mat::from_tensor(&lw.b1))
                    .map(|v| v.max(0.0))
                    .matmul(&Mat::from_tensor(&lw.w2))
                    .add_row(&Mat::from_tensor(&lw.b2));
                x = x.add(&f);
                if let Some([_, _, d2, u2]) = &hooks.adapter[l] {
                    x = x.add(&x.matmul(d2).map(silu).matmul(u2));
                }
            }
            let last = Mat::new(1, d, x.data[(n - 1) * d..].to_vec());
            last.matmul(&emb.transpose()).data
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Gradient suite.

fn t64(shape: Vec<usize>, v: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, v).unwrap()
}

fn c64(g: &mut Graph<f64>, shape: Vec<usize>, seed: u64) -> Var {
    let n = shape.iter().product();
    g.constant(t64(shape, randn(n, 0.7, seed)))
}

/// Scalar of a node through a fixed random linear functional, so that every
/// output coordinate contributes a distinct weight.
fn probe(g: &mut Graph<f64>, x: Var, seed: u64) -> unisub::Result<Var> {
    let shape = g.shape(x).to_vec();
    let w = c64(g, shape, seed);
    let p = g.mul(x, w)?;
    g.sum(p)
}

const EPS: f64 = 1e-5;

/// Runs every differentiable path through `grad_check` in f64 and returns
/// `(path, max relative error)`.
pub fn gradient_suite() -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    let mut check = |name: &str, params: Tensor<f64>, f: &dyn Fn(&mut Graph<f64>, Var) -> unisub::Result<Var>| {
        let err = grad_check(f, &params, EPS).unwrap_or_else(|e| panic!("{name}: {e}"));
        out.push((name.to_string(), err));
    };

    // Primitive ops.
    check("matmul", t64(vec![3, 4], randn(12, 1.0, 1)), &|g, p| {
        let b = c64(g, vec![4, 2], 2);
        let m = g.matmul(p, b)?;
        probe(g, m, 3)
    });
    check("bmm", t64(vec![2, 3, 4], randn(24, 1.0, 4)), &|g, p| {
        let b = c64(g, vec![2, 4, 2], 5);
        let k = c64(g, vec![2, 5, 4], 6);
        let x = g.bmm(p, b, false)?;
        let y = g.bmm(p, k, true)?;
        let (a, b) = (probe(g, x, 7)?, probe(g, y, 8)?);
        g.add(a, b)
    });
    check("elementwise", t64(vec![2, 5], randn(10, 1.0, 9)), &|g, p| {
        let c = c64(g, vec![2, 5], 10);
        let r = c64(g, vec![5], 11);
        let a = g.add(p, c)?;
        let b = g.sub(a, p)?;
        let s = g.mul(p, b)?;
        let s = g.add_row(s, r)?;
        let s = g.mul_row(s, r)?;
        let s = g.scale(s, -1.7)?;
        let t = g.tanh(s)?;
        let u = g.silu(p)?;
        let v = g.relu(p)?;
        let tu = g.add(t, u)?;
        let all = g.add(tu, v)?;
        probe(g, all, 12)
    });
    check("softmax and cross-entropy", t64(vec![3, 4], randn(12, 1.5, 13)), &|g, p| {
        let s = g.softmax_rows(p)?;
        let a = probe(g, s, 14)?;
        let ce = g.cross_entropy(p, &[1, 3, 0])?;
        g.add(a, ce)
    });
    check("shape ops", t64(vec![2, 3, 4], randn(24, 1.0, 15)), &|g, p| {
        let r = g.reshape(p, &[6, 4])?;
        let t = g.transpose(r)?;
        let q = g.permute(p, &[2, 0, 1])?;
        let s = g.slice(q, 0, 1, 2)?;
        let e = g.expand(s, 2)?;
        let rows = g.gather_rows(r, &[5, 0, 0, 3])?;
        let last = g.gather_last(r, &[3, 1])?;
        let c = g.concat(&[r, rows], 0)?;
        let mut acc = probe(g, t, 16)?;
        for (i, v) in [e, c, last].into_iter().enumerate() {
            let pv = probe(g, v, 17 + i as u64)?;
            acc = g.add(acc, pv)?;
        }
        let sq = g.sum_sq(p)?;
        g.add(acc, sq)
    });
    check("fwht", t64(vec![3, 8], randn(24, 1.0, 20)), &|g, p| {
        let h = g.fwht(p)?;
        probe(g, h, 21)
    });

    // Model paths at tiny dimensions.
    let cfg = tiny_config();
    let hyper = tiny_hyper();
    let w = BackboneWeights::init(&cfg).unwrap();
    let model = TunedModel::new(&cfg, &w, &hyper);
    let ex = tiny_examples();
    let labels = [0usize, 1];
    let n0 = w.num_params();

    check("backbone (all weights)", t64(vec![n0], randn(n0, 0.05, 22)), &|g, p| {
        model.loss(g, Payload::Delta(p), &ex, &labels)
    });
    for (kind, seed) in [(PetKind::Adapter, 23), (PetKind::Prefix, 24), (PetKind::Lora, 25)] {
        let n = layout(kind, &hyper, &cfg).unwrap().len();
        check(&format!("{kind} hook"), t64(vec![n], randn(n, 0.4, seed)), &|g, p| {
            model.loss(g, Payload::Pet { kind, theta: p }, &ex, &labels)
        });
    }

    // Projections.
    let n_pet = layout(PetKind::Lora, &hyper, &cfg).unwrap().len();
    let y = 3;
    let down = DownProjection::init(n_pet, y, 26);
    let up = UpProjection::init(y, n_pet, 27);
    let theta: Vec<f64> = randn(n_pet, 0.4, 28);
    check("down-projection (weights)", t64(vec![down.params().len()], down.params().iter().map(|&v| v as f64).collect()), &|g, p| {
        let th = g.constant(t64(vec![n_pet], theta.clone()));
        let i = down.apply_graph(g, p, th)?;
        probe(g, i, 29)
    });
    check("down-projection (input)", t64(vec![n_pet], theta.clone()), &|g, p| {
        let params = g.constant(t64(vec![down.params().len()], down.params().iter().map(|&v| v as f64).collect()));
        let i = down.apply_graph(g, params, p)?;
        probe(g, i, 30)
    });
    let up_w: Vec<f64> = up.weight.data().iter().map(|&v| v as f64).collect();
    check("up-projection (weights) into LoRA loss", t64(vec![y * n_pet], up_w.clone()), &|g, p| {
        let i = g.constant(t64(vec![y], vec![0.3, -0.5, 0.8]));
        let th = up.apply_graph(g, p, i)?;
        model.loss(g, Payload::Pet { kind: PetKind::Lora, theta: th }, &ex, &labels)
    });
    let n_prefix = layout(PetKind::Prefix, &hyper, &cfg).unwrap().len();
    let up_p = UpProjection::init(y, n_prefix, 33);
    check("up-projection (intrinsic) into prefix loss", t64(vec![y], vec![0.3, -0.5, 0.8]), &|g, p| {
        let wv = g.constant(up_p.weight.cast());
        let wv = g.reshape(wv, &[y * n_prefix])?;
        let th = up_p.apply_graph(g, wv, p)?;
        model.loss(g, Payload::Pet { kind: PetKind::Prefix, theta: th }, &ex, &labels)
    });
    let nd = down.params().len();
    let mut joint: Vec<f64> = down.params().iter().map(|&v| v as f64).collect();
    joint.extend(&up_w);
    check("approximation objective (down + up)", t64(vec![joint.len()], joint), &|g, p| {
        let dp = g.slice(p, 0, 0, nd)?;
        let upp = g.slice(p, 0, nd, y * n_pet)?;
        let th = g.constant(t64(vec![n_pet], theta.clone()));
        let i = down.apply_graph(g, dp, th)?;
        let i = g.scale(i, 0.6)?;
        let approx = up.apply_graph(g, upp, i)?;
        let d = dist_loss(g, approx, th)?;
        let d = g.scale(d, 10.0)?;
        let t = model.loss(g, Payload::Pet { kind: PetKind::Adapter, theta: approx }, &ex, &labels)?;
        g.add(d, t)
    });

    // Fastfood.
    let ff = FastfoodProjector::new(y, n0, 31).unwrap();
    let gdiag: Vec<f64> = ff.g.iter().map(|&v| v as f64).collect();
    check("fastfood (G)", t64(vec![gdiag.len()], gdiag.clone()), &|g, p| {
        let i = g.constant(t64(vec![y], vec![0.9, -1.1, 0.4]));
        let dlt = ff.apply_graph(g, p, i)?;
        probe(g, dlt, 32)
    });
    check("fastfood (intrinsic) into backbone loss", t64(vec![y], vec![0.9, -1.1, 0.4]), &|g, p| {
        let gp = g.constant(t64(vec![gdiag.len()], gdiag.clone()));
        let dlt = ff.apply_graph(g, gp, p)?;
        model.loss(g, Payload::Delta(dlt), &ex, &labels)
    });
    out
}

/// An experiment that runs every stage in a few seconds.
pub fn reduced_config(output: &std::path::Path) -> unisub::persist::ExperimentConfig {
    let mut cfg = unisub::persist::ExperimentConfig::default();
    cfg.output = output.to_path_buf();
    cfg.max_test_tasks = Some(1);
    cfg.pretrain.steps = 40;
    cfg.train.steps = 30;
    cfg.approximation.steps = 30;
    cfg.approximation.eval_every = 10;
    cfg.subspace.steps = 10;
    cfg.shared.steps = 20;
    cfg.shared.eval_every = 10;
    cfg.finetune.approximation.steps = 10;
    cfg.finetune.approximation.eval_every = 5;
    cfg.finetune.train.steps = 10;
    cfg.landscape.grid.range = 0.8;
    cfg.landscape.grid.step = 0.4;
    cfg.landscape.grid.cap = 32;
    cfg
}
