//! Performance landscape over a 2-D affine slice of the subspace through
//! the three PET solutions.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pet::{PetKind, TunedModel};
use crate::pipeline::GeneratorSet;
use crate::subspace::{Generator, IntrinsicVector};
use crate::tasks::{Example, Task};

const MIN_NORM: f64 = 1e-8;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn widen(i: &IntrinsicVector) -> Vec<f64> {
    i.values.iter().map(|&v| v as f64).collect()
}

/// Gram–Schmidt frame with `I_A` as origin:
/// `u ∝ I_P − I_A`, `v ∝` the part of `I_L − I_A` orthogonal to `u`.
pub fn orthonormal_axes(
    i_a: &IntrinsicVector,
    i_p: &IntrinsicVector,
    i_l: &IntrinsicVector,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if i_p.y() != i_a.y() || i_l.y() != i_a.y() {
        return Err(Error::SubspaceMismatch("intrinsic vectors differ in y".into()));
    }
    let o = widen(i_a);
    let du: Vec<f64> = widen(i_p).iter().zip(&o).map(|(p, a)| p - a).collect();
    let nu = norm(&du);
    if nu < MIN_NORM {
        return Err(Error::DegenerateGeometry("I_P coincides with I_A".into()));
    }
    let u: Vec<f64> = du.iter().map(|x| x / nu).collect();
    let dv: Vec<f64> = widen(i_l).iter().zip(&o).map(|(l, a)| l - a).collect();
    let proj = dot(&dv, &u);
    let perp: Vec<f64> = dv.iter().zip(&u).map(|(x, ui)| x - proj * ui).collect();
    let nv = norm(&perp);
    if nv < MIN_NORM {
        return Err(Error::DegenerateGeometry("I_L is collinear with I_P − I_A".into()));
    }
    let v = perp.iter().map(|x| x / nv).collect();
    Ok((o, u, v))
}

/// Evaluation context shared by every grid point.
pub struct LandscapeEval<'a> {
    pub model: &'a TunedModel<'a>,
    pub set: &'a GeneratorSet,
    pub examples: &'a [Example],
    pub labels: Vec<usize>,
    /// Mean original-space metric of the three PETs.
    pub e_pet: f64,
}

impl<'a> LandscapeEval<'a> {
    pub fn new(model: &'a TunedModel<'a>, set: &'a GeneratorSet, task: &'a Task, cap: usize, e_pet: f64) -> Result<Self> {
        if !(e_pet > 0.0) {
            return Err(Error::ZeroBaseline);
        }
        let n = task.test.len().min(cap);
        if n == 0 {
            return Err(Error::EmptySplit(format!("{}/test", task.id())));
        }
        Ok(LandscapeEval {
            model,
            set,
            examples: &task.test[..n],
            labels: task.label_tokens(),
            e_pet,
        })
    }

    /// Metric of each PET decoded from `i`, in `PetKind::PETS` order.
    pub fn terms(&self, i: &IntrinsicVector) -> Result<[f64; 3]> {
        let mut out = [0.0; 3];
        for (slot, kind) in out.iter_mut().zip(PetKind::PETS) {
            let theta = self.set.get(kind)?.generate(i)?;
            *slot = self.model.accuracy(Generator::solution(kind, &theta), self.examples, &self.labels)?;
        }
        Ok(out)
    }

    /// `P = (1/3) Σ_k E(gen_k(I₀ + αu + βv)) / E_PET`.
    pub fn value(&self, origin: &[f64], u: &[f64], v: &[f64], alpha: f64, beta: f64) -> Result<f64> {
        let point: Vec<f32> = (0..origin.len())
            .map(|j| (origin[j] + alpha * u[j] + beta * v[j]) as f32)
            .collect();
        let terms = self.terms(&IntrinsicVector::new(point)?)?;
        Ok(terms.iter().sum::<f64>() / 3.0 / self.e_pet)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Half-width of the square `[−range, range]²`.
    pub range: f64,
    pub step: f64,
    /// Maximum number of test examples per evaluation.
    pub cap: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            range: 4.0,
            step: 0.4,
            cap: 256,
        }
    }
}

impl GridSpec {
    /// Axis coordinates `−range, −range + step, …, range`.
    pub fn coords(&self) -> Result<Vec<f64>> {
        if !(self.range > 0.0 && self.step > 0.0) || self.cap == 0 {
            return Err(Error::ConfigInvalid("grid range, step and cap must be positive".into()));
        }
        let n = (2.0 * self.range / self.step).round() as usize + 1;
        Ok((0..n).map(|i| -self.range + i as f64 * self.step).collect())
    }
}

/// Landscape values plus the frame they were computed in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub task: String,
    pub origin: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub spec: GridSpec,
    pub e_pet: f64,
    /// `(α, β)` of each PET's own solution in the `(u, v)` frame.
    pub solutions: BTreeMap<PetKind, (f64, f64)>,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `values[i][j]` is `P` at `(alphas[i], betas[j])`.
    #[serde(skip)]
    pub values: Vec<Vec<f64>>,
}

impl LandscapeGrid {
    pub fn points(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// CSV with header `alpha,beta,P`, α-major.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["alpha", "beta", "P"])?;
        for (i, a) in self.alphas.iter().enumerate() {
            for (j, b) in self.betas.iter().enumerate() {
                w.write_record([format!("{a:.1}"), format!("{b:.1}"), format!("{}", self.values[i][j])])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Evaluates `P` on the grid spanned by the subspace solutions in `runs`.
/// Points are evaluated in parallel; the result does not depend on the
/// number of threads.
pub fn landscape_grid(
    eval: &LandscapeEval,
    task: &str,
    runs: &BTreeMap<PetKind, IntrinsicVector>,
    spec: &GridSpec,
) -> Result<LandscapeGrid> {
    let get = |k: PetKind| {
        runs.get(&k).ok_or_else(|| Error::MissingSolution {
            task: task.to_string(),
            kind: k.name().to_string(),
        })
    };
    let (origin, u, v) = orthonormal_axes(get(PetKind::Adapter)?, get(PetKind::Prefix)?, get(PetKind::Lora)?)?;
    let coords = spec.coords()?;
    let points: Vec<(usize, usize)> = (0..coords.len())
        .flat_map(|i| (0..coords.len()).map(move |j| (i, j)))
        .collect();
    let flat = points
        .par_iter()
        .map(|&(i, j)| eval.value(&origin, &u, &v, coords[i], coords[j]))
        .collect::<Result<Vec<f64>>>()?;
    let values = flat.chunks(coords.len()).map(<[f64]>::to_vec).collect();

    let mut solutions = BTreeMap::new();
    for kind in PetKind::PETS {
        let d: Vec<f64> = widen(get(kind)?).iter().zip(&origin).map(|(x, o)| x - o).collect();
        solutions.insert(kind, (dot(&d, &u), dot(&d, &v)));
    }
    Ok(LandscapeGrid {
        task: task.to_string(),
        origin,
        u,
        v,
        spec: spec.clone(),
        e_pet: eval.e_pet,
        solutions,
        alphas: coords.clone(),
        betas: coords,
        values,
    })
}
