//! Typed conversions between pipeline artifacts and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Checkpoint;
use crate::backbone::{BackboneWeights, ModelConfig};
use crate::error::{Error, Result};
use crate::pet::{PetHyper, PetKind, PetSolution, TrainedPet};
use crate::pipeline::{ApproxLogEntry, FullFinetune, GeneratorSet, SharedSubspace, SubspaceArtifacts, SubspaceRun};
use crate::subspace::{DownProjection, FastfoodProjector, Generator, IntrinsicVector, UpProjection};
use crate::tensor::Tensor;

fn owned(c: &Checkpoint, name: &str) -> Result<Vec<f32>> {
    Ok(c.array(name)?.1.to_vec())
}

pub fn save_backbone(dir: &Path, cfg: &ModelConfig, w: &BackboneWeights) -> Result<()> {
    let mut c = Checkpoint::new("backbone", cfg.seed, cfg)?;
    for (i, t) in w.tensors().iter().enumerate() {
        c.push(format!("t{i}"), t.shape().to_vec(), t.data().to_vec())?;
    }
    c.save(dir, "backbone")
}

pub fn load_backbone(dir: &Path) -> Result<(ModelConfig, BackboneWeights)> {
    let c = Checkpoint::load(dir, "backbone", "backbone")?;
    let cfg: ModelConfig = c.meta()?;
    let mut w = BackboneWeights::init(&cfg)?;
    for (i, t) in w.tensors_mut().into_iter().enumerate() {
        let (shape, data) = c.array(&format!("t{i}"))?;
        *t = Tensor::new(shape.to_vec(), data.to_vec())?;
    }
    Ok((cfg, w))
}

#[derive(Serialize, Deserialize)]
struct PetMeta {
    kind: PetKind,
    task: String,
    hyper: PetHyper,
    dev: f64,
    e_ori: f64,
}

pub fn save_pet(dir: &Path, stem: &str, pet: &TrainedPet, seed: u64) -> Result<()> {
    let s = &pet.solution;
    let meta = PetMeta {
        kind: s.kind,
        task: s.task_id.clone(),
        hyper: s.hyper.clone(),
        dev: pet.dev,
        e_ori: pet.e_ori,
    };
    let mut c = Checkpoint::new("pet", seed, &meta)?;
    c.push("theta", vec![s.vector.len()], s.vector.clone())?;
    c.save(dir, stem)
}

pub fn load_pet(dir: &Path, stem: &str, cfg: &ModelConfig) -> Result<TrainedPet> {
    let c = Checkpoint::load(dir, stem, "pet")?;
    let m: PetMeta = c.meta()?;
    Ok(TrainedPet {
        solution: PetSolution::new(m.kind, owned(&c, "theta")?, &m.hyper, cfg, &m.task)?,
        dev: m.dev,
        e_ori: m.e_ori,
    })
}

#[derive(Serialize, Deserialize)]
enum GenMeta {
    Linear { y: usize, n: usize },
    Fastfood { y: usize, n: usize, seed: u64 },
}

#[derive(Serialize, Deserialize)]
struct SetMeta {
    y: usize,
    generators: Vec<(PetKind, GenMeta)>,
}

fn push_set(c: &mut Checkpoint, set: &GeneratorSet) -> Result<SetMeta> {
    let mut generators = Vec::new();
    for (&kind, gen) in &set.generators {
        let meta = match gen {
            Generator::Linear(up) => GenMeta::Linear { y: up.y(), n: up.output() },
            Generator::Fastfood(ff) => GenMeta::Fastfood {
                y: ff.y,
                n: ff.out_len,
                seed: ff.seed,
            },
        };
        c.push(format!("gen.{}", kind.name()), vec![gen.params().len()], gen.params())?;
        generators.push((kind, meta));
    }
    Ok(SetMeta { y: set.y, generators })
}

fn read_set(c: &Checkpoint, meta: &SetMeta) -> Result<GeneratorSet> {
    let mut gens = BTreeMap::new();
    for (kind, m) in &meta.generators {
        let base = match *m {
            GenMeta::Linear { y, n } => Generator::Linear(UpProjection::init(y, n, 0)),
            GenMeta::Fastfood { y, n, seed } => Generator::Fastfood(FastfoodProjector::new(y, n, seed)?),
        };
        gens.insert(*kind, base.with_params(&owned(c, &format!("gen.{}", kind.name()))?)?);
    }
    let set = GeneratorSet::new(gens)?;
    if set.y != meta.y {
        return Err(Error::SubspaceMismatch("stored y disagrees with generators".into()));
    }
    Ok(set)
}

#[derive(Serialize, Deserialize)]
struct ArtifactsMeta {
    set: SetMeta,
    downs: Vec<(PetKind, usize, usize)>,
    log: Vec<ApproxLogEntry>,
}

pub fn save_subspace(dir: &Path, stem: &str, a: &SubspaceArtifacts, seed: u64) -> Result<()> {
    let mut c = Checkpoint::new("subspace", seed, &())?;
    let set = push_set(&mut c, &a.ups)?;
    let mut downs = Vec::new();
    for (&kind, d) in &a.downs {
        c.push(format!("down.{}", kind.name()), vec![d.params().len()], d.params())?;
        downs.push((kind, d.input(), d.y()));
    }
    c.push("losses", vec![a.losses.len()], a.losses.clone())?;
    c.manifest.meta = serde_json::to_value(ArtifactsMeta {
        set,
        downs,
        log: a.log.clone(),
    })?;
    c.save(dir, stem)
}

pub fn load_subspace(dir: &Path, stem: &str) -> Result<SubspaceArtifacts> {
    let c = Checkpoint::load(dir, stem, "subspace")?;
    let m: ArtifactsMeta = c.meta()?;
    let mut downs = BTreeMap::new();
    for &(kind, input, y) in &m.downs {
        let d = DownProjection::init(input, y, 0).with_params(&owned(&c, &format!("down.{}", kind.name()))?)?;
        downs.insert(kind, d);
    }
    Ok(SubspaceArtifacts {
        downs,
        ups: read_set(&c, &m.set)?,
        losses: owned(&c, "losses")?,
        log: m.log,
    })
}

#[derive(Serialize, Deserialize)]
struct SharedMeta {
    set: SetMeta,
    tasks: Vec<String>,
}

pub fn save_shared(dir: &Path, stem: &str, s: &SharedSubspace, seed: u64) -> Result<()> {
    let mut c = Checkpoint::new("shared", seed, &())?;
    let set = push_set(&mut c, &s.set)?;
    for (task, i) in &s.intrinsics {
        c.push(format!("intrinsic.{task}"), vec![i.y()], i.values.clone())?;
    }
    c.push("losses", vec![s.losses.len()], s.losses.clone())?;
    c.manifest.meta = serde_json::to_value(SharedMeta {
        set,
        tasks: s.intrinsics.keys().cloned().collect(),
    })?;
    c.save(dir, stem)
}

pub fn load_shared(dir: &Path, stem: &str) -> Result<SharedSubspace> {
    let c = Checkpoint::load(dir, stem, "shared")?;
    let m: SharedMeta = c.meta()?;
    let intrinsics = m
        .tasks
        .iter()
        .map(|t| Ok((t.clone(), IntrinsicVector::new(owned(&c, &format!("intrinsic.{t}"))?)?)))
        .collect::<Result<_>>()?;
    Ok(SharedSubspace {
        intrinsics,
        set: read_set(&c, &m.set)?,
        losses: owned(&c, "losses")?,
    })
}

#[derive(Serialize, Deserialize)]
struct RunMeta {
    task: String,
    kind: PetKind,
    artifact_id: String,
    best_step: usize,
    dev: f64,
    e_sub: f64,
    steps: Vec<usize>,
}

pub fn save_run(dir: &Path, stem: &str, r: &SubspaceRun, seed: u64) -> Result<()> {
    let meta = RunMeta {
        task: r.task.clone(),
        kind: r.kind,
        artifact_id: r.artifact_id.clone(),
        best_step: r.best_step,
        dev: r.dev,
        e_sub: r.e_sub,
        steps: r.checkpoints.iter().map(|c| c.0).collect(),
    };
    let mut c = Checkpoint::new("subspace-run", seed, &meta)?;
    c.push("best", vec![r.best.y()], r.best.values.clone())?;
    let flat: Vec<f32> = r.checkpoints.iter().flat_map(|c| c.1.values.iter().copied()).collect();
    c.push("checkpoints", vec![r.checkpoints.len(), r.best.y()], flat)?;
    c.save(dir, stem)
}

pub fn load_run(dir: &Path, stem: &str) -> Result<SubspaceRun> {
    let c = Checkpoint::load(dir, stem, "subspace-run")?;
    let m: RunMeta = c.meta()?;
    let best = IntrinsicVector::new(owned(&c, "best")?)?;
    let flat = owned(&c, "checkpoints")?;
    let checkpoints = m
        .steps
        .iter()
        .zip(flat.chunks(best.y().max(1)))
        .map(|(&s, v)| Ok((s, IntrinsicVector::new(v.to_vec())?)))
        .collect::<Result<_>>()?;
    Ok(SubspaceRun {
        task: m.task,
        kind: m.kind,
        artifact_id: m.artifact_id,
        best,
        best_step: m.best_step,
        dev: m.dev,
        e_sub: m.e_sub,
        checkpoints,
    })
}

#[derive(Serialize, Deserialize)]
struct FinetuneMeta {
    dev: f64,
    e_ori: f64,
}

pub fn save_finetune(dir: &Path, stem: &str, f: &FullFinetune, seed: u64) -> Result<()> {
    let mut c = Checkpoint::new("finetune", seed, &FinetuneMeta { dev: f.dev, e_ori: f.e_ori })?;
    c.push("delta", vec![f.delta.len()], f.delta.clone())?;
    c.save(dir, stem)
}

pub fn load_finetune(dir: &Path, stem: &str) -> Result<FullFinetune> {
    let c = Checkpoint::load(dir, stem, "finetune")?;
    let m: FinetuneMeta = c.meta()?;
    Ok(FullFinetune {
        delta: owned(&c, "delta")?,
        dev: m.dev,
        e_ori: m.e_ori,
    })
}

/// Array-free artifact: everything lives in the manifest metadata.
pub fn save_records<M: Serialize>(dir: &Path, stem: &str, kind: &str, records: &M, seed: u64) -> Result<()> {
    Checkpoint::new(kind, seed, records)?.save(dir, stem)
}

pub fn load_records<M: serde::de::DeserializeOwned>(dir: &Path, stem: &str, kind: &str) -> Result<M> {
    Checkpoint::load(dir, stem, kind)?.meta()
}
