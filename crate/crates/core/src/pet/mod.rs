//! Delta-tuning methods as flat parameter vectors with named layouts.

mod hooks;
mod model;
mod train;

pub use hooks::{build_hooks, prefix_kv};
pub use model::{Payload, Solution, TunedModel};
pub use train::{fit_groups, fit_vector, train_pet, Fit, TrainConfig, TrainedPet};
pub(crate) use train::Batcher;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PetKind {
    Adapter,
    Prefix,
    Lora,
    /// Full-model weight delta; only reachable through a Fastfood generator.
    #[serde(rename = "finetune")]
    FullFineTune,
}

impl PetKind {
    /// The three delta-tuning methods, in reporting order.
    pub const PETS: [PetKind; 3] = [PetKind::Adapter, PetKind::Prefix, PetKind::Lora];
    pub const WITH_FINETUNE: [PetKind; 4] = [PetKind::Adapter, PetKind::Prefix, PetKind::Lora, PetKind::FullFineTune];

    pub fn name(self) -> &'static str {
        match self {
            PetKind::Adapter => "adapter",
            PetKind::Prefix => "prefix",
            PetKind::Lora => "lora",
            PetKind::FullFineTune => "finetune",
        }
    }

    pub fn short(self) -> char {
        match self {
            PetKind::Adapter => 'A',
            PetKind::Prefix => 'P',
            PetKind::Lora => 'L',
            PetKind::FullFineTune => 'F',
        }
    }
}

impl fmt::Display for PetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adapter" => Ok(PetKind::Adapter),
            "prefix" => Ok(PetKind::Prefix),
            "lora" => Ok(PetKind::Lora),
            "finetune" => Ok(PetKind::FullFineTune),
            other => Err(Error::ConfigInvalid(format!("unknown tuning method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PetHyper {
    /// Adapter bottleneck `r_A`.
    pub adapter_rank: usize,
    /// LoRA rank `r_L`.
    pub lora_rank: usize,
    /// Virtual tokens `m`.
    pub prefix_len: usize,
    /// Hidden width `d_P` of the prefix reparameterization MLP.
    pub prefix_hidden: usize,
    /// LoRA scale `s`.
    pub lora_scale: f64,
}

impl PetHyper {
    /// Parity solution for the default desk backbone (2 layers, d=32):
    /// every method has exactly 2048 parameters.
    pub fn desk() -> Self {
        PetHyper {
            adapter_rank: 8,
            lora_rank: 8,
            prefix_len: 19,
            prefix_hidden: 12,
            lora_scale: 1.6,
        }
    }

    /// Reference setting used against T5-base in the main experiments.
    pub fn reference_main() -> Self {
        PetHyper {
            adapter_rank: 12,
            lora_rank: 10,
            prefix_len: 120,
            prefix_hidden: 24,
            lora_scale: 1.6,
        }
    }

    /// Reference setting of the shared-intrinsic variant (m and d_P swapped).
    pub fn reference_shared() -> Self {
        PetHyper {
            prefix_len: 24,
            prefix_hidden: 120,
            ..Self::reference_main()
        }
    }
}

impl Default for PetHyper {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSlot {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered `(name, shape, offset)` records covering a flat vector.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Layout {
    pub slots: Vec<ParamSlot>,
}

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>) {
        let offset = self.len();
        self.slots.push(ParamSlot { name, shape, offset });
    }

    /// Total extent of all slots.
    pub fn len(&self) -> usize {
        self.slots.last().map_or(0, |s| s.offset + s.numel())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slot(&self, name: &str) -> Result<&ParamSlot> {
        self.slots
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::shape("layout", format!("no slot named {name}")))
    }
}

/// Parameter layout of one PET on `cfg`.
pub fn layout(kind: PetKind, hyper: &PetHyper, cfg: &ModelConfig) -> Result<Layout> {
    let d = cfg.d_model;
    let mut out = Layout::default();
    match kind {
        PetKind::Adapter => {
            let r = hyper.adapter_rank;
            for l in 0..cfg.n_layers {
                for site in ["attn", "ffn"] {
                    out.push(format!("layer{l}.{site}.down"), vec![d, r]);
                    out.push(format!("layer{l}.{site}.up"), vec![r, d]);
                }
            }
        }
        PetKind::Lora => {
            let r = hyper.lora_rank;
            for l in 0..cfg.n_layers {
                for site in ["q", "v"] {
                    out.push(format!("layer{l}.{site}.a"), vec![d, r]);
                    out.push(format!("layer{l}.{site}.b"), vec![r, d]);
                }
            }
        }
        PetKind::Prefix => {
            let (m, h) = (hyper.prefix_len, hyper.prefix_hidden);
            let width = 2 * cfg.n_layers * d;
            out.push("prefix.source".into(), vec![m, h]);
            out.push("prefix.w1".into(), vec![h, h]);
            out.push("prefix.b1".into(), vec![h]);
            out.push("prefix.w2".into(), vec![h, width]);
            out.push("prefix.b2".into(), vec![width]);
        }
        PetKind::FullFineTune => {
            return Err(Error::ConfigInvalid(
                "full fine-tuning has no PET layout; it is generated through a Fastfood projector".into(),
            ))
        }
    }
    Ok(out)
}

/// `|θ_t|` for one method.
pub fn param_count(kind: PetKind, hyper: &PetHyper, cfg: &ModelConfig) -> Result<usize> {
    Ok(layout(kind, hyper, cfg)?.len())
}

/// Returns the shared count when adapter, prefix and LoRA sizes agree.
pub fn check_parity(hyper: &PetHyper, cfg: &ModelConfig) -> Result<usize> {
    let adapter = param_count(PetKind::Adapter, hyper, cfg)?;
    let prefix = param_count(PetKind::Prefix, hyper, cfg)?;
    let lora = param_count(PetKind::Lora, hyper, cfg)?;
    if adapter == prefix && prefix == lora {
        Ok(adapter)
    } else {
        Err(Error::ParityViolation { adapter, prefix, lora })
    }
}

/// Parameter counts of adapter and LoRA at T5-base scale: d=768, adapters
/// after each of the 60 attention/FFN sublayers (12 encoder layers with two,
/// 12 decoder layers with three), LoRA on Q and V of all 36 attention modules.
pub fn t5_base_counts(hyper: &PetHyper) -> (usize, usize) {
    const D: usize = 768;
    const ADAPTER_SITES: usize = 12 * 2 + 12 * 3;
    const ATTENTION_MODULES: usize = 12 + 12 * 2;
    let adapter = ADAPTER_SITES * 2 * D * hyper.adapter_rank;
    let lora = ATTENTION_MODULES * 2 * (2 * D * hyper.lora_rank);
    (adapter, lora)
}

/// A PET solution θ_t for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PetSolution {
    pub kind: PetKind,
    pub vector: Vec<f32>,
    pub layout: Layout,
    pub task_id: String,
    pub hyper: PetHyper,
}

impl PetSolution {
    pub fn new(kind: PetKind, vector: Vec<f32>, hyper: &PetHyper, cfg: &ModelConfig, task_id: &str) -> Result<Self> {
        let layout = layout(kind, hyper, cfg)?;
        if layout.len() != vector.len() {
            return Err(Error::shape(
                "PetSolution::new",
                format!("{} values for a layout of {}", vector.len(), layout.len()),
            ));
        }
        Ok(PetSolution {
            kind,
            vector,
            layout,
            task_id: task_id.to_string(),
            hyper: hyper.clone(),
        })
    }

    /// Splits the flat vector into named tensors.
    pub fn unflatten(&self) -> Vec<(String, Tensor)> {
        self.layout
            .slots
            .iter()
            .map(|s| {
                let data = self.vector[s.offset..s.offset + s.numel()].to_vec();
                (s.name.clone(), Tensor::new(s.shape.clone(), data).expect("slot shape"))
            })
            .collect()
    }

    /// Inverse of [`PetSolution::unflatten`].
    pub fn flatten_from(&self, tensors: &[(String, Tensor)]) -> Result<Vec<f32>> {
        if tensors.len() != self.layout.slots.len() {
            return Err(Error::shape("flatten", "tensor count differs from layout"));
        }
        let mut out = Vec::with_capacity(self.layout.len());
        for ((name, t), slot) in tensors.iter().zip(&self.layout.slots) {
            if *name != slot.name || t.shape() != slot.shape.as_slice() {
                return Err(Error::shape("flatten", format!("{name} {:?} vs {} {:?}", t.shape(), slot.name, slot.shape)));
            }
            out.extend_from_slice(t.data());
        }
        Ok(out)
    }
}

/// Initial PET parameters. Adapter and prefix weights are N(0, 0.02²) with
/// zero biases; LoRA `A` is N(0, 1/d) and `B` is zero, so the LoRA hook
/// starts as the identity.
pub fn init_pet(kind: PetKind, hyper: &PetHyper, cfg: &ModelConfig, seed: u64) -> Result<PetSolution> {
    check_parity(hyper, cfg)?;
    let layout = layout(kind, hyper, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let small = Normal::new(0.0f32, 0.02).expect("valid std");
    let lora_a = Normal::new(0.0f32, 1.0 / (cfg.d_model as f32).sqrt()).expect("valid std");
    let mut vector = Vec::with_capacity(layout.len());
    for slot in &layout.slots {
        let n = slot.numel();
        let name = slot.name.as_str();
        if name.ends_with(".b") || name.ends_with("b1") || name.ends_with("b2") {
            vector.extend(std::iter::repeat_n(0.0, n));
        } else if kind == PetKind::Lora {
            vector.extend((0..n).map(|_| lora_a.sample(&mut rng)));
        } else {
            vector.extend((0..n).map(|_| small.sample(&mut rng)));
        }
    }
    Ok(PetSolution {
        kind,
        vector,
        layout,
        task_id: String::new(),
        hyper: hyper.clone(),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn desk_hyper_has_parity() {
        // adapter: 2 layers × 2 sites × (32·8 + 8·32) = 2048
        // lora:    2 layers × {q,v} × (32·8 + 8·32)   = 2048
        // prefix:  19·12 + 12·12 + 12 + 12·128 + 128   = 2048
        let cfg = ModelConfig::default();
        assert_eq!(check_parity(&PetHyper::desk(), &cfg).unwrap(), 2048);
    }

    #[test]
    fn parity_violation_is_reported() {
        let cfg = ModelConfig::default();
        let hyper = PetHyper {
            adapter_rank: 9,
            ..PetHyper::desk()
        };
        assert!(matches!(
            init_pet(PetKind::Adapter, &hyper, &cfg, 0),
            Err(Error::ParityViolation { adapter: 2304, .. })
        ));
    }

    #[test]
    fn t5_reference_counts() {
        let (adapter, lora) = t5_base_counts(&PetHyper::reference_main());
        assert_eq!(adapter, 1_105_920);
        assert_eq!(lora, 1_105_920);
    }

    #[test]
    fn init_is_deterministic_and_lora_b_is_zero() {
        let cfg = ModelConfig::default();
        let h = PetHyper::desk();
        let a = init_pet(PetKind::Lora, &h, &cfg, 4).unwrap();
        assert_eq!(a, init_pet(PetKind::Lora, &h, &cfg, 4).unwrap());
        for (name, t) in a.unflatten() {
            if name.ends_with(".b") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn finetune_has_no_pet_layout() {
        assert!(init_pet(PetKind::FullFineTune, &PetHyper::desk(), &ModelConfig::default(), 0).is_err());
    }

    proptest! {
        #[test]
        fn flatten_roundtrip_is_exact(kind in prop::sample::select(PetKind::PETS.to_vec()), seed in any::<u64>()) {
            let cfg = ModelConfig::default();
            let sol = init_pet(kind, &PetHyper::desk(), &cfg, seed).unwrap();
            let back = sol.flatten_from(&sol.unflatten()).unwrap();
            prop_assert_eq!(back.len(), sol.vector.len());
            prop_assert!(back.iter().zip(&sol.vector).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
