//! Learned maps between PET parameter spaces and a shared intrinsic
//! subspace, and the Fastfood generator for full-model deltas.

mod fastfood;

pub use fastfood::{fwht, FastfoodProjector};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pet::{Payload, PetKind, Solution};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Coordinates of a solution inside the `y`-dimensional subspace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicVector {
    pub values: Vec<f32>,
}

impl IntrinsicVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "IntrinsicVector" });
        }
        Ok(IntrinsicVector { values })
    }

    pub fn zeros(y: usize) -> Self {
        IntrinsicVector { values: vec![0.0; y] }
    }

    /// Seeded N(0, std²) entries.
    pub fn random(y: usize, std: f32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, std).expect("valid std");
        IntrinsicVector {
            values: (0..y).map(|_| dist.sample(&mut rng)).collect(),
        }
    }

    pub fn y(&self) -> usize {
        self.values.len()
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let dist = Normal::new(0.0, 1.0 / (rows as f32).sqrt()).expect("valid std");
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| dist.sample(rng)).collect()).expect("shape")
}

fn matvec<T: Real>(g: &mut Graph<T>, x: Var, w: Var) -> Result<Var> {
    let n = g.shape(x).iter().product::<usize>();
    let row = g.reshape(x, &[1, n])?;
    let out = g.matmul(row, w)?;
    let cols = g.shape(out)[1];
    g.reshape(out, &[cols])
}

/// `I = tanh(θ·L₁)·L₂` with `L₁: |θ|×y`, `L₂: y×y`, no biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownProjection {
    pub layer1: Tensor,
    pub layer2: Tensor,
}

impl DownProjection {
    pub fn init(input: usize, y: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DownProjection {
            layer1: gaussian(&mut rng, input, y),
            layer2: gaussian(&mut rng, y, y),
        }
    }

    pub fn input(&self) -> usize {
        self.layer1.shape()[0]
    }

    pub fn y(&self) -> usize {
        self.layer2.shape()[1]
    }

    /// Flat trainable parameters, `layer1` then `layer2`.
    pub fn params(&self) -> Vec<f32> {
        self.layer1.data().iter().chain(self.layer2.data()).copied().collect()
    }

    pub fn with_params(&self, flat: &[f32]) -> Result<Self> {
        let n1 = self.layer1.numel();
        if flat.len() != n1 + self.layer2.numel() {
            return Err(Error::shape("DownProjection", "parameter count"));
        }
        Ok(DownProjection {
            layer1: Tensor::new(self.layer1.shape().to_vec(), flat[..n1].to_vec())?,
            layer2: Tensor::new(self.layer2.shape().to_vec(), flat[n1..].to_vec())?,
        })
    }

    /// Graph form over a flat parameter node laid out as [`Self::params`].
    pub fn apply_graph<T: Real>(&self, g: &mut Graph<T>, params: Var, theta: Var) -> Result<Var> {
        let (n, y) = (self.input(), self.y());
        if g.shape(theta) != [n] {
            return Err(Error::shape("project_down", format!("{:?} into width {n}", g.shape(theta))));
        }
        let l1 = g.slice(params, 0, 0, n * y)?;
        let l1 = g.reshape(l1, &[n, y])?;
        let l2 = g.slice(params, 0, n * y, y * y)?;
        let l2 = g.reshape(l2, &[y, y])?;
        let h = matvec(g, theta, l1)?;
        let h = g.tanh(h)?;
        matvec(g, h, l2)
    }

    pub fn project(&self, theta: &[f32]) -> Result<IntrinsicVector> {
        let mut g = Graph::<f32>::new();
        let p = g.constant(Tensor::vector(self.params()));
        let t = g.constant(Tensor::vector(theta.to_vec()));
        let out = self.apply_graph(&mut g, p, t)?;
        IntrinsicVector::new(g.value(out).data().to_vec())
    }
}

/// `θ̄ = I·W` with `W: y×|θ|`, no bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpProjection {
    pub weight: Tensor,
}

impl UpProjection {
    pub fn init(y: usize, output: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        UpProjection {
            weight: gaussian(&mut rng, y, output),
        }
    }

    pub fn y(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn apply_graph<T: Real>(&self, g: &mut Graph<T>, params: Var, i: Var) -> Result<Var> {
        let (y, n) = (self.y(), self.output());
        if g.shape(i) != [y] {
            return Err(Error::shape("project_up", format!("{:?} for y={y}", g.shape(i))));
        }
        let w = g.reshape(params, &[y, n])?;
        matvec(g, i, w)
    }

    pub fn project(&self, i: &IntrinsicVector) -> Result<Vec<f32>> {
        let mut g = Graph::<f32>::new();
        let p = g.constant(self.weight.clone());
        let p = g.reshape(p, &[self.weight.numel()])?;
        let iv = g.constant(Tensor::vector(i.values.clone()));
        let out = self.apply_graph(&mut g, p, iv)?;
        Ok(g.value(out).data().to_vec())
    }
}

/// Maps an intrinsic vector to a tunable payload for one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Generator {
    /// Dense up-projection into a PET's parameter vector.
    Linear(UpProjection),
    /// Fastfood projection into a full backbone delta.
    Fastfood(FastfoodProjector),
}

impl Generator {
    pub fn y(&self) -> usize {
        match self {
            Generator::Linear(up) => up.y(),
            Generator::Fastfood(ff) => ff.y,
        }
    }

    /// Flat trainable parameters: the up-projection weights or diag(G).
    pub fn params(&self) -> Vec<f32> {
        match self {
            Generator::Linear(up) => up.weight.data().to_vec(),
            Generator::Fastfood(ff) => ff.g.clone(),
        }
    }

    pub fn with_params(&self, flat: &[f32]) -> Result<Self> {
        if flat.len() != self.params().len() {
            return Err(Error::shape("Generator::with_params", "parameter count"));
        }
        Ok(match self {
            Generator::Linear(up) => Generator::Linear(UpProjection {
                weight: Tensor::new(up.weight.shape().to_vec(), flat.to_vec())?,
            }),
            Generator::Fastfood(ff) => Generator::Fastfood(FastfoodProjector { g: flat.to_vec(), ..ff.clone() }),
        })
    }

    /// Output node for intrinsic node `i` under parameter node `params`.
    pub fn apply_graph<T: Real>(&self, g: &mut Graph<T>, params: Var, i: Var) -> Result<Var> {
        match self {
            Generator::Linear(up) => up.apply_graph(g, params, i),
            Generator::Fastfood(ff) => ff.apply_graph(g, params, i),
        }
    }

    /// Numeric output for `i`.
    pub fn generate(&self, i: &IntrinsicVector) -> Result<Vec<f32>> {
        match self {
            Generator::Linear(up) => up.project(i),
            Generator::Fastfood(ff) => ff.delta(i),
        }
    }

    /// Wraps a generated node as a model payload for `kind`.
    pub fn payload(kind: PetKind, out: Var) -> Payload {
        match kind {
            PetKind::FullFineTune => Payload::Delta(out),
            kind => Payload::Pet { kind, theta: out },
        }
    }

    pub fn solution(kind: PetKind, out: &[f32]) -> Solution<'_> {
        match kind {
            PetKind::FullFineTune => Solution::Delta(out),
            kind => Solution::Pet(kind, out),
        }
    }
}

/// `α·I_A + β·I_P + (1−α−β)·I_L`.
pub fn interpolate(
    ia: &IntrinsicVector,
    ip: &IntrinsicVector,
    il: &IntrinsicVector,
    alpha: f64,
    beta: f64,
) -> Result<IntrinsicVector> {
    check_ratios(alpha, beta)?;
    if ia.y() != ip.y() || ia.y() != il.y() {
        return Err(Error::shape("interpolate", "intrinsic dimensions differ"));
    }
    let gamma = 1.0 - alpha - beta;
    let values = (0..ia.y())
        .map(|k| (alpha * ia.values[k] as f64 + beta * ip.values[k] as f64 + gamma * il.values[k] as f64) as f32)
        .collect();
    IntrinsicVector::new(values)
}

pub(crate) fn check_ratios(alpha: f64, beta: f64) -> Result<()> {
    // small slack for 1 − α computed in floating point
    let ok = (0.0..=1.0).contains(&alpha) && beta >= 0.0 && beta <= 1.0 - alpha + 1e-12;
    if ok {
        Ok(())
    } else {
        Err(Error::RatioOutOfRange { alpha, beta })
    }
}

/// `α ~ U[0,1]`, then `β ~ U[0, 1−α]`.
pub fn sample_ratios<R: Rng>(rng: &mut R) -> (f64, f64) {
    let alpha: f64 = rng.gen();
    let beta = rng.gen::<f64>() * (1.0 - alpha);
    (alpha, beta)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn dense_down_oracle(dp: &DownProjection, theta: &[f32]) -> Vec<f64> {
        let (n, y) = (dp.input(), dp.y());
        let l1 = dp.layer1.data();
        let l2 = dp.layer2.data();
        let h: Vec<f64> = (0..y)
            .map(|j| (0..n).map(|i| theta[i] as f64 * l1[i * y + j] as f64).sum::<f64>().tanh())
            .collect();
        (0..y).map(|k| (0..y).map(|j| h[j] * l2[j * y + k] as f64).sum()).collect()
    }

    #[test]
    fn zero_theta_gives_zero_intrinsic() {
        let dp = DownProjection::init(12, 4, 3);
        assert!(dp.project(&[0.0; 12]).unwrap().values.iter().all(|&v| v == 0.0));
        let up = UpProjection::init(4, 12, 3);
        assert!(up.project(&IntrinsicVector::zeros(4)).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn down_projection_hand_case() {
        // L1 = I₂, L2 = [[1,2],[0,1]], θ = (0.5, −0.25)
        let dp = DownProjection {
            layer1: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            layer2: Tensor::new(vec![2, 2], vec![1.0, 2.0, 0.0, 1.0]).unwrap(),
        };
        let out = dp.project(&[0.5, -0.25]).unwrap().values;
        let (a, b) = (0.5f64.tanh(), (-0.25f64).tanh());
        assert!((out[0] as f64 - a).abs() < 1e-6);
        assert!((out[1] as f64 - (2.0 * a + b)).abs() < 1e-6);
    }

    #[test]
    fn projections_match_dense_oracle() {
        let dp = DownProjection::init(40, 6, 9);
        let theta: Vec<f32> = (0..40).map(|i| ((i as f32) * 0.37).sin() * 0.3).collect();
        let got = dp.project(&theta).unwrap().values;
        for (g, o) in got.iter().zip(dense_down_oracle(&dp, &theta)) {
            assert!((*g as f64 - o).abs() < 1e-5);
        }
        let up = UpProjection::init(6, 40, 9);
        let i = IntrinsicVector::random(6, 1.0, 2);
        let got = up.project(&i).unwrap();
        let w = up.weight.data();
        for (c, g) in got.iter().enumerate() {
            let o: f64 = (0..6).map(|k| i.values[k] as f64 * w[k * 40 + c] as f64).sum();
            assert!((*g as f64 - o).abs() < 1e-5);
        }
    }

    #[test]
    fn interpolation_endpoints() {
        let a = IntrinsicVector::new(vec![1.0, 2.0]).unwrap();
        let p = IntrinsicVector::new(vec![-1.0, 0.5]).unwrap();
        let l = IntrinsicVector::new(vec![3.0, -4.0]).unwrap();
        assert_eq!(interpolate(&a, &p, &l, 1.0, 0.0).unwrap(), a);
        assert_eq!(interpolate(&a, &p, &l, 0.0, 1.0).unwrap(), p);
        assert_eq!(interpolate(&a, &p, &l, 0.0, 0.0).unwrap(), l);
        assert!(matches!(
            interpolate(&a, &p, &l, 0.7, 0.5),
            Err(Error::RatioOutOfRange { .. })
        ));
    }

    #[test]
    fn ratio_sampling_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 100_000;
        let (mut sa, mut sb) = (0.0, 0.0);
        for _ in 0..n {
            let (a, b) = sample_ratios(&mut rng);
            assert!(a + b <= 1.0);
            sa += a;
            sb += b;
        }
        assert!((sa / n as f64 - 0.5).abs() < 0.01);
        assert!((sb / n as f64 - 0.25).abs() < 0.01);
    }

    #[test]
    fn gradient_reaches_only_intrinsic_vector() {
        let up = UpProjection::init(4, 10, 1);
        let mut g = Graph::<f32>::new();
        let w = g.constant(Tensor::vector(up.weight.data().to_vec()));
        let i = g.param(Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]));
        let out = up.apply_graph(&mut g, w, i).unwrap();
        let loss = g.sum_sq(out).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(i).unwrap().len(), 4);
        assert!(g.grad(w).is_none());
    }

    proptest! {
        #[test]
        fn up_projection_is_linear(
            a in -2.0f32..2.0,
            b in -2.0f32..2.0,
            seed in 0u64..1000,
        ) {
            let up = UpProjection::init(5, 30, seed);
            let i1 = IntrinsicVector::random(5, 1.0, seed + 1);
            let i2 = IntrinsicVector::random(5, 1.0, seed + 2);
            let mix = IntrinsicVector::new(i1.values.iter().zip(&i2.values).map(|(x, y)| a * x + b * y).collect()).unwrap();
            let lhs = up.project(&mix).unwrap();
            let p1 = up.project(&i1).unwrap();
            let p2 = up.project(&i2).unwrap();
            for k in 0..30 {
                prop_assert!((lhs[k] - (a * p1[k] + b * p2[k])).abs() < 1e-5 * (1.0 + lhs[k].abs()));
            }
        }

        #[test]
        fn interpolation_of_equal_points_is_fixed(alpha in 0.0f64..=1.0, t in 0.0f64..=1.0, seed in any::<u64>()) {
            let v = IntrinsicVector::random(7, 1.0, seed);
            let out = interpolate(&v, &v, &v, alpha, t * (1.0 - alpha)).unwrap();
            for (x, y) in out.values.iter().zip(&v.values) {
                prop_assert!((x - y).abs() <= 1e-6 * (1.0 + y.abs()));
            }
        }
    }
}
