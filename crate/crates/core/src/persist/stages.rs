//! Stage runners. Every stage reads its inputs from the output directory,
//! so stages can be run one at a time from the CLI.
//!
//! Layout of the output directory:
//!
//! ```text
//! backbone.{json,bin}
//! pets/<task>.<kind>            trained PETs, train and test tasks
//! subspace                      approximated projections
//! runs/<task>.<kind>            subspace optimization on test tasks
//! transfer                      transfer records
//! shared/{subspace,runs/..}     shared-intrinsic pipeline
//! finetune/{subspace,delta,matrix,runs/..}
//! landscape/<task>.{csv,json}
//! report/<table>.csv, report/report.csv
//! ```

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::artifacts::*;
use super::report;
use super::{ExperimentConfig, Stage};
use crate::backbone::{pretrain, BackboneWeights, ModelConfig};
use crate::error::{Error, Result};
use crate::landscape::{landscape_grid, LandscapeEval};
use crate::pet::{train_pet, PetKind, TrainedPet, TunedModel};
use crate::pipeline::{
    approximate_subspace, shared_intrinsic_approximate, subspace_optimize, train_full_finetune, transfer,
    transfer_matrix, MatrixCell, SolutionBank,
};
use crate::tasks::{generate_task, registry, Task};

/// Exclusive lock on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Training and test tasks of the configured registry.
pub fn load_tasks(cfg: &ExperimentConfig) -> Result<(Vec<Task>, Vec<Task>)> {
    let (train, test) = registry(cfg.mode, cfg.task_seed);
    let limit = cfg.max_test_tasks.unwrap_or(usize::MAX);
    let train = train.iter().map(generate_task).collect::<Result<Vec<_>>>()?;
    let test = test.iter().take(limit).map(generate_task).collect::<Result<Vec<_>>>()?;
    Ok((train, test))
}

pub fn pet_stem(task: &str, kind: PetKind) -> String {
    format!("{task}.{kind}")
}

/// One transferred cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub task: String,
    pub source: PetKind,
    pub target: PetKind,
    pub step: usize,
    pub dev: f64,
    pub e_transfer: f64,
}

/// Resolved directory plus shared state for the stage runners.
pub struct Runner<'a> {
    pub cfg: &'a ExperimentConfig,
    pub dir: PathBuf,
    pub train: Vec<Task>,
    pub test: Vec<Task>,
}

struct Loaded {
    cfg: ModelConfig,
    weights: BackboneWeights,
}

impl<'a> Runner<'a> {
    pub fn new(cfg: &'a ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let (train, test) = load_tasks(cfg)?;
        Ok(Runner {
            cfg,
            dir: cfg.output_dir(),
            train,
            test,
        })
    }

    fn sub(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn backbone(&self) -> Result<Loaded> {
        let (cfg, weights) = load_backbone(&self.dir)?;
        if cfg != self.cfg.model {
            return Err(Error::ConfigInvalid("stored backbone was built from a different model config".into()));
        }
        Ok(Loaded { cfg, weights })
    }

    fn test_task(&self, index: usize) -> Result<&Task> {
        self.test
            .get(index)
            .ok_or_else(|| Error::ConfigInvalid(format!("test task index {index} out of range ({})", self.test.len())))
    }

    pub fn pet(&self, task: &str, kind: PetKind) -> Result<TrainedPet> {
        load_pet(&self.sub("pets"), &pet_stem(task, kind), &self.cfg.model)
    }

    pub fn run(&self, stage: Stage) -> Result<()> {
        let _lock = DirLock::acquire(&self.dir)?;
        match stage {
            Stage::PretrainBackbone => self.pretrain_backbone(),
            Stage::TrainPets => self.train_pets(),
            Stage::Approximate => self.approximate(),
            Stage::SubspaceOpt => self.subspace_opt(),
            Stage::Transfer => self.transfer(),
            Stage::SharedIntrinsic => self.shared_intrinsic(),
            Stage::FinetuneExt => self.finetune_ext(),
            Stage::Landscape => self.landscape(),
            Stage::Report => report::write_reports(self).map(|_| ()),
        }
    }

    fn pretrain_backbone(&self) -> Result<()> {
        let (w, _) = pretrain(&self.cfg.model, &self.cfg.pretrain)?;
        save_backbone(&self.dir, &self.cfg.model, &w)
    }

    fn train_pets(&self) -> Result<()> {
        let b = self.backbone()?;
        let model = TunedModel::new(&b.cfg, &b.weights, &self.cfg.pet);
        let jobs: Vec<(&Task, PetKind)> = self
            .train
            .iter()
            .chain(&self.test)
            .flat_map(|t| PetKind::PETS.into_iter().map(move |k| (t, k)))
            .collect();
        let trained = jobs
            .par_iter()
            .map(|&(t, k)| train_pet(&model, k, t, &self.cfg.train, self.cfg.pet_seed))
            .collect::<Result<Vec<_>>>()?;
        let dir = self.sub("pets");
        for ((t, k), pet) in jobs.iter().zip(&trained) {
            save_pet(&dir, &pet_stem(t.id(), *k), pet, self.cfg.pet_seed)?;
        }
        Ok(())
    }

    fn approximate(&self) -> Result<()> {
        let b = self.backbone()?;
        let model = TunedModel::new(&b.cfg, &b.weights, &self.cfg.pet);
        let mut bank = SolutionBank::new();
        for t in &self.train {
            for k in PetKind::PETS {
                bank.insert((t.id().to_string(), k), self.pet(t.id(), k)?.solution);
            }
        }
        let art = approximate_subspace(&model, &self.train, &bank, &self.cfg.approximation)?;
        save_subspace(&self.dir, "subspace", &art, self.cfg.approximation.seed)
    }

    fn optimize_all(&self, model: &TunedModel, set: &crate::pipeline::GeneratorSet, dir: &Path) -> Result<()> {
        let jobs: Vec<(&Task, PetKind)> = self
            .test
            .iter()
            .flat_map(|t| set.kinds().into_iter().map(move |k| (t, k)))
            .collect();
        let runs = jobs
            .par_iter()
            .map(|&(t, k)| subspace_optimize(model, t, k, set, &self.cfg.subspace))
            .collect::<Result<Vec<_>>>()?;
        for r in &runs {
            save_run(dir, &pet_stem(&r.task, r.kind), r, self.cfg.subspace.seed)?;
        }
        Ok(())
    }

    fn subspace_opt(&self) -> Result<()> {
        let b = self.backbone()?;
        let model = TunedModel::new(&b.cfg, &b.weights, &self.cfg.pet);
        let art = load_subspace(&self.dir, "subspace")?;
        self.optimize_all(&model, &art.ups, &self.sub("runs"))
    }

    fn transfer(&self) -> Result<()> {
        let b = self.backbone()?;
        let model = TunedModel::new(&b.cfg, &b.weights, &self.cfg.pet);
        let art = load_subspace(&self.dir, "subspace")?;
        let mut jobs = Vec::new();
        for t in &self.test {
            for src in PetKind::PETS {
                let run = load_run(&self.sub("runs"), &pet_stem(t.id(), src))?;
                for target in PetKind::PETS {
                    jobs.push((t, run.clone(), target));
                }
            }
        }
        let records = jobs
            .par_iter()
            .map(|(t, run, target)| {
                let r = transfer(&model, run, *target, &art.ups, t, self.cfg.subspace.select)?;
                Ok(TransferRecord {
                    task: r.task,
                    source: r.source,
                    target: r.target,
                    step: r.step,
                    dev: r.dev,
                    e_transfer: r.e_transfer,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        save_records(&self.dir, "transfer", "transfer", &records, self.cfg.subspace.seed)
    }

    fn shared_intrinsic(&self) -> Result<()> {
        let b = self.backbone()?;
        let model = TunedModel::new(&b.cfg, &b.weights, &self.cfg.pet);
        let shared = shared_intrinsic_approximate(&model, &self.train, &PetKind::PETS, &self.cfg.shared)?;
        let dir = self.sub("shared");
        save_shared(&dir, "subspace", &shared, self.cfg.shared.seed)?;
        self.optimize_all(&model, &shared.set, &dir.join("runs"))
    }

    fn finetune_ext(&self) -> Result<()> {
        let b = self.backbone()?;
        let model = TunedModel::new(&b.cfg, &b.weights, &self.cfg.pet);
        let fc = &self.cfg.finetune;
        let task = self.test_task(fc.task)?;
        let shared = shared_intrinsic_approximate(&model, &self.train, &PetKind::WITH_FINETUNE, &fc.approximation)?;
        let dir = self.sub("finetune");
        save_shared(&dir, "subspace", &shared, fc.approximation.seed)?;
        let ft = train_full_finetune(&model, task, &fc.train, fc.seed)?;
        save_finetune(&dir, "delta", &ft, fc.seed)?;
        let (runs, cells) = transfer_matrix(&model, task, &shared.set, &self.cfg.subspace)?;
        for r in &runs {
            save_run(&dir.join("runs"), &pet_stem(&r.task, r.kind), r, self.cfg.subspace.seed)?;
        }
        save_records(&dir, "matrix", "matrix", &cells, self.cfg.subspace.seed)
    }

    fn landscape(&self) -> Result<()> {
        let b = self.backbone()?;
        let model = TunedModel::new(&b.cfg, &b.weights, &self.cfg.pet);
        let task = self.test_task(self.cfg.landscape.task)?;
        let art = load_subspace(&self.dir, "subspace")?;
        let mut runs = BTreeMap::new();
        let mut e_pet = 0.0;
        for k in PetKind::PETS {
            runs.insert(k, load_run(&self.sub("runs"), &pet_stem(task.id(), k))?.best);
            e_pet += self.pet(task.id(), k)?.e_ori / 3.0;
        }
        let eval = LandscapeEval::new(&model, &art.ups, task, self.cfg.landscape.grid.cap, e_pet)?;
        let grid = landscape_grid(&eval, task.id(), &runs, &self.cfg.landscape.grid)?;
        let dir = self.sub("landscape");
        fs::create_dir_all(&dir)?;
        grid.write_csv(fs::File::create(dir.join(format!("{}.csv", task.id())))?)?;
        fs::write(dir.join(format!("{}.json", task.id())), serde_json::to_string_pretty(&grid)?)?;
        Ok(())
    }

    pub fn matrix(&self) -> Result<Vec<MatrixCell>> {
        load_records(&self.sub("finetune"), "matrix", "matrix")
    }
}

/// Runs one stage of `cfg`.
pub fn run_stage(cfg: &ExperimentConfig, stage: Stage) -> Result<()> {
    Runner::new(cfg)?.run(stage)
}

/// Runs every stage listed in `cfg.stages`, in order.
pub fn run_all(cfg: &ExperimentConfig) -> Result<()> {
    let runner = Runner::new(cfg)?;
    for &stage in &cfg.stages {
        runner.run(stage)?;
    }
    Ok(())
}
