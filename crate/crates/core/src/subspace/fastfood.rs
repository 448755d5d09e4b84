use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::IntrinsicVector;
use crate::error::{Error, Result};
use crate::tensor::{fwht_rows, Graph, Real, Tensor, Var};

/// In-place unnormalized Walsh–Hadamard transform, `H₂ₙ = [[H, H], [H, −H]]`.
pub fn fwht<T: Real>(v: &mut [T]) -> Result<()> {
    if !v.len().is_power_of_two() {
        return Err(Error::NotPowerOfTwo(v.len()));
    }
    fwht_rows(v, v.len());
    Ok(())
}

/// Block-structured `s·H·G·Π·H·B` map from `y` intrinsic dimensions to a
/// delta over all backbone weights.
///
/// Each of the `blocks` blocks has its own sign diagonal `B`, permutation
/// `Π` and trainable diagonal `G`; block outputs are concatenated and
/// truncated to `out_len`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FastfoodProjector {
    pub y: usize,
    /// `y' = next_power_of_two(y)`.
    pub y_pad: usize,
    pub blocks: usize,
    pub out_len: usize,
    pub seed: u64,
    /// Signs, `blocks·y'` entries of ±1.
    pub b: Vec<f32>,
    /// Global gather index: block `k` maps to `k·y' + π_k(j)`.
    pub perm: Vec<usize>,
    /// Trainable diagonal, `blocks·y'`.
    pub g: Vec<f32>,
    /// Per-block `1 / (√y'·‖G_k‖₂)` fixed from the initial `G`, so that the
    /// map has unit gain at construction.
    pub scale: Vec<f32>,
}

impl FastfoodProjector {
    pub fn new(y: usize, out_len: usize, seed: u64) -> Result<Self> {
        if y == 0 || out_len == 0 {
            return Err(Error::ConfigInvalid("fastfood dimensions must be positive".into()));
        }
        let y_pad = y.next_power_of_two();
        let blocks = out_len.div_ceil(y_pad);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = (0..blocks * y_pad)
            .map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        let mut perm = Vec::with_capacity(blocks * y_pad);
        for k in 0..blocks {
            let mut p: Vec<usize> = (0..y_pad).collect();
            p.shuffle(&mut rng);
            perm.extend(p.into_iter().map(|j| k * y_pad + j));
        }
        let g: Vec<f32> = (0..blocks * y_pad).map(|_| StandardNormal.sample(&mut rng)).collect();
        let scale = g
            .chunks(y_pad)
            .map(|gk| {
                let norm = gk.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
                (1.0 / ((y_pad as f64).sqrt() * norm)) as f32
            })
            .collect();
        Ok(FastfoodProjector {
            y,
            y_pad,
            blocks,
            out_len,
            seed,
            b,
            perm,
            g,
            scale,
        })
    }

    fn block_constant(&self, per_block: &[f32]) -> Tensor {
        let data = per_block.iter().flat_map(|&s| std::iter::repeat_n(s, self.y_pad)).collect();
        Tensor::new(vec![self.blocks, self.y_pad], data).expect("block shape")
    }

    /// Graph form with `g_param` holding diag(G) for all blocks.
    pub fn apply_graph<T: Real>(&self, g: &mut Graph<T>, g_param: Var, i: Var) -> Result<Var> {
        let (yp, nb) = (self.y_pad, self.blocks);
        if g.shape(i) != [self.y] {
            return Err(Error::shape("fastfood_delta", format!("{:?} for y={}", g.shape(i), self.y)));
        }
        if g.shape(g_param) != [nb * yp] {
            return Err(Error::shape("fastfood_delta", "G has the wrong length"));
        }
        let padded = if yp > self.y {
            let zeros = g.constant(Tensor::zeros(vec![yp - self.y]));
            g.concat(&[i, zeros], 0)?
        } else {
            i
        };
        let v = g.expand(padded, nb)?;
        let signs = g.constant(Tensor::new(vec![nb, yp], self.b.clone())?.cast());
        let v = g.mul(v, signs)?;
        let v = g.fwht(v)?;
        let v = g.reshape(v, &[nb * yp])?;
        let v = g.gather_last(v, &self.perm)?;
        let v = g.reshape(v, &[nb, yp])?;
        let diag = g.reshape(g_param, &[nb, yp])?;
        let v = g.mul(v, diag)?;
        let v = g.fwht(v)?;
        let s = g.constant(self.block_constant(&self.scale).cast());
        let v = g.mul(v, s)?;
        let v = g.reshape(v, &[nb * yp])?;
        g.slice(v, 0, 0, self.out_len)
    }

    /// `fastfood_delta(I)` with the current G.
    pub fn delta(&self, i: &IntrinsicVector) -> Result<Vec<f32>> {
        let mut g = Graph::<f32>::new();
        let gp = g.constant(Tensor::vector(self.g.clone()));
        let iv = g.constant(Tensor::vector(i.values.clone()));
        let out = self.apply_graph(&mut g, gp, iv)?;
        Ok(g.value(out).data().to_vec())
    }
}
