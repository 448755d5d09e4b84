use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{ModelConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::landscape::GridSpec;
use crate::pet::{PetHyper, TrainConfig};
use crate::pipeline::{ApproximationConfig, SubspaceConfig};
use crate::tasks::Mode;

/// Environment variable that, when set, roots relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "UNISUB_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    /// Shared-intrinsic approximation over all four methods.
    pub approximation: ApproximationConfig,
    /// Full fine-tuning baseline on the chosen test task.
    pub train: TrainConfig,
    /// Index into the test tasks.
    pub task: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            approximation: ApproximationConfig::default(),
            train: TrainConfig {
                lr: 1e-3,
                ..TrainConfig::default()
            },
            task: 0,
            seed: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct LandscapeConfig {
    #[serde(flatten)]
    pub grid: GridSpec,
    /// Index into the test tasks.
    pub task: usize,
}


/// Every knob of a run. Sections map one-to-one onto TOML tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Seed of the task registry.
    pub task_seed: u64,
    /// Seed of PET training.
    pub pet_seed: u64,
    /// Output directory; relative paths resolve under `$UNISUB_OUTPUT_ROOT`
    /// when it is set.
    pub output: PathBuf,
    /// Stages run by `--stage all`, in order.
    pub stages: Vec<Stage>,
    /// Upper bound on the number of test tasks used (all when absent).
    pub max_test_tasks: Option<usize>,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub pet: PetHyper,
    pub train: TrainConfig,
    pub approximation: ApproximationConfig,
    pub subspace: SubspaceConfig,
    /// Shared-intrinsic pipeline over the three PETs.
    pub shared: ApproximationConfig,
    pub finetune: FinetuneConfig,
    pub landscape: LandscapeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Single,
            task_seed: 1,
            pet_seed: 5,
            output: PathBuf::from("runs/desk"),
            stages: Stage::ALL.to_vec(),
            max_test_tasks: None,
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            pet: PetHyper::desk(),
            train: TrainConfig::default(),
            approximation: ApproximationConfig::default(),
            subspace: SubspaceConfig::default(),
            shared: ApproximationConfig::default(),
            finetune: FinetuneConfig::default(),
            landscape: LandscapeConfig::default(),
        }
    }
}

/// Hyperparameters of the T5-base reference setup, kept for side-by-side
/// comparison with the desk values. Not runnable at desk scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferencePreset {
    pub pet: PetHyper,
    pub shared_pet: PetHyper,
    pub dist_weight: f64,
    pub y_single: usize,
    pub y_multi: usize,
    pub approx_lr_multi: f32,
    pub approx_batch_multi: usize,
    pub approx_lr_single: [f32; 2],
    pub approx_batch_single: usize,
    pub approx_max_steps_single: usize,
    pub approx_eval_every: usize,
    pub subspace_lr: [f32; 2],
    pub subspace_batch: usize,
    pub subspace_max_steps: usize,
    pub subspace_eval_every: usize,
    pub shared_lr_intrinsic: f32,
    pub shared_lr_pet: f32,
    pub shared_batch_single: usize,
    pub shared_batch_multi: usize,
    pub finetune_approx_lr: f32,
    pub finetune_approx_batch: usize,
    pub finetune_subspace_eval_every: usize,
    pub train_tasks: usize,
    pub test_tasks: usize,
}

impl ReferencePreset {
    pub fn t5_base() -> Self {
        ReferencePreset {
            pet: PetHyper::reference_main(),
            shared_pet: PetHyper::reference_shared(),
            dist_weight: 10.0,
            y_single: 4,
            y_multi: 100,
            approx_lr_multi: 1e-4,
            approx_batch_multi: 4,
            approx_lr_single: [1e-5, 5e-5],
            approx_batch_single: 8,
            approx_max_steps_single: 100_000,
            approx_eval_every: 1000,
            subspace_lr: [1e-2, 5e-2],
            subspace_batch: 8,
            subspace_max_steps: 5000,
            subspace_eval_every: 500,
            shared_lr_intrinsic: 5e-5,
            shared_lr_pet: 1e-4,
            shared_batch_single: 16,
            shared_batch_multi: 8,
            finetune_approx_lr: 1e-4,
            finetune_approx_batch: 8,
            finetune_subspace_eval_every: 100,
            train_tasks: 60,
            test_tasks: 9,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.approximation.validate()?;
        self.subspace.validate()?;
        self.shared.validate()?;
        self.finetune.approximation.validate()?;
        self.finetune.train.validate()?;
        self.landscape.grid.coords()?;
        crate::pet::check_parity(&self.pet, &self.model)?;
        if self.stages.is_empty() {
            return Err(Error::ConfigInvalid("no stages selected".into()));
        }
        if self.max_test_tasks == Some(0) {
            return Err(Error::ConfigInvalid("max_test_tasks must be positive".into()));
        }
        Ok(())
    }

    /// Output directory after applying `$UNISUB_OUTPUT_ROOT`.
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output.is_relative() => PathBuf::from(root).join(&self.output),
            _ => self.output.clone(),
        }
    }
}

/// Pipeline stages in dependency order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    PretrainBackbone,
    TrainPets,
    Approximate,
    SubspaceOpt,
    Transfer,
    SharedIntrinsic,
    FinetuneExt,
    Landscape,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::PretrainBackbone,
        Stage::TrainPets,
        Stage::Approximate,
        Stage::SubspaceOpt,
        Stage::Transfer,
        Stage::SharedIntrinsic,
        Stage::FinetuneExt,
        Stage::Landscape,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::PretrainBackbone => "pretrain-backbone",
            Stage::TrainPets => "train-pets",
            Stage::Approximate => "approximate",
            Stage::SubspaceOpt => "subspace-opt",
            Stage::Transfer => "transfer",
            Stage::SharedIntrinsic => "shared-intrinsic",
            Stage::FinetuneExt => "finetune-ext",
            Stage::Landscape => "landscape",
            Stage::Report => "report",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown stage {s}")))
    }
}
