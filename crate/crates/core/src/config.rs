//! Experiment configuration: one JSON document drives dataset choice,
//! model family, architecture, and training hyperparameters.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::optim::OptAlgorithm;
use crate::quantizer::QuantizerSpec;
use crate::sr::SrConfig;
use crate::vddib::VddibConfig;
use crate::vib::VibConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelFamily {
    Vib,
    Vddib,
    VddibSr,
    DvibBaseline,
}

impl std::fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelFamily::Vib => "vib",
            ModelFamily::Vddib => "vddib",
            ModelFamily::VddibSr => "vddib-sr",
            ModelFamily::DvibBaseline => "dvib-baseline",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainHyper {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    #[serde(default = "default_opt")]
    pub optimizer: OptAlgorithm,
}

fn default_opt() -> OptAlgorithm {
    OptAlgorithm::Adam
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ArchSettings {
    /// Extractor trunk widths.
    #[serde(default = "default_trunk")]
    pub trunk_hidden: Vec<usize>,
    /// Extracted feature dimension per device.
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    /// Extractor classifier head widths (empty = linear head).
    #[serde(default)]
    pub classifier_hidden: Vec<usize>,
    /// Device-side coding encoder widths.
    #[serde(default = "default_encoder")]
    pub encoder_hidden: Vec<usize>,
    /// Server joint / internal predictor widths.
    #[serde(default = "default_head")]
    pub head_hidden: Vec<usize>,
    /// Auxiliary per-device predictor widths.
    #[serde(default = "default_aux")]
    pub aux_hidden: Vec<usize>,
    /// Attention gate widths (one hidden layer = two FC layers total).
    #[serde(default = "default_gate")]
    pub gate_hidden: Vec<usize>,
}

fn default_trunk() -> Vec<usize> {
    vec![256, 256]
}
fn default_feature_dim() -> usize {
    16
}
fn default_encoder() -> Vec<usize> {
    vec![256]
}
fn default_head() -> Vec<usize> {
    vec![256, 256]
}
fn default_aux() -> Vec<usize> {
    vec![256]
}
fn default_gate() -> Vec<usize> {
    vec![64]
}

impl Default for ArchSettings {
    fn default() -> Self {
        ArchSettings {
            trunk_hidden: default_trunk(),
            feature_dim: default_feature_dim(),
            classifier_hidden: vec![],
            encoder_hidden: default_encoder(),
            head_hidden: default_head(),
            aux_hidden: default_aux(),
            gate_hidden: default_gate(),
        }
    }
}

/// Grid for `sweep`: the cartesian product of the listed values, with the
/// base config supplying anything left empty.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct SweepGrid {
    #[serde(default)]
    pub betas: Vec<f64>,
    #[serde(default)]
    pub t_values: Vec<usize>,
    #[serde(default)]
    pub delta0s: Vec<f64>,
    /// Per-device quantizer lists, one entry per bit budget.
    #[serde(default)]
    pub budgets: Vec<Vec<QuantizerSpec>>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub family: ModelFamily,
    /// Bottleneck weight for extractor training.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Auxiliary-plus-rate weight for coding training.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Maximum transmission attempts; 1 for the one-shot family.
    #[serde(default = "default_t")]
    pub t_max: usize,
    /// Confidence threshold at inference; values above 1 never stop early.
    #[serde(default = "default_delta0")]
    pub delta0: f64,
    /// Per-device quantizers. For the retransmission family these are
    /// per-round chunk specs.
    pub quantizers: Vec<QuantizerSpec>,
    pub vib_train: TrainHyper,
    pub coding_train: TrainHyper,
    #[serde(default)]
    pub arch: ArchSettings,
    pub seed: u64,
    #[serde(default)]
    pub sweep: Option<SweepGrid>,
}

fn default_gamma() -> f64 {
    1e-4
}
fn default_beta() -> f64 {
    1e-2
}
fn default_t() -> usize {
    1
}
fn default_delta0() -> f64 {
    1.01
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 || self.beta < 0.0 {
            return Err(Error::BadConfig("gamma and beta must be >= 0".into()));
        }
        match self.family {
            ModelFamily::Vddib | ModelFamily::DvibBaseline => {
                if self.t_max != 1 {
                    return Err(Error::BadConfig(format!(
                        "family {} is one-shot; t_max must be 1",
                        self.family
                    )));
                }
            }
            ModelFamily::VddibSr => {
                if self.t_max < 1 {
                    return Err(Error::BadConfig("t_max must be >= 1".into()));
                }
            }
            ModelFamily::Vib => {}
        }
        if self.family != ModelFamily::Vib && self.quantizers.is_empty() {
            return Err(Error::BadConfig("coding families need quantizers".into()));
        }
        Ok(())
    }

    /// Content hash over the canonical (key-sorted) JSON form, so field
    /// order in the source document does not matter.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn vib_config(&self) -> VibConfig {
        VibConfig {
            gamma: self.gamma,
            batch_size: self.vib_train.batch_size,
            steps: self.vib_train.steps,
            learning_rate: self.vib_train.learning_rate,
            samples_per_example: 1,
            seed: self.seed,
            trunk_hidden: self.arch.trunk_hidden.clone(),
            feature_dim: self.arch.feature_dim,
            classifier_hidden: self.arch.classifier_hidden.clone(),
            optimizer: self.vib_train.optimizer,
        }
    }

    pub fn vddib_config(&self) -> VddibConfig {
        VddibConfig {
            beta: self.beta,
            quantizers: self.quantizers.clone(),
            batch_size: self.coding_train.batch_size,
            steps: self.coding_train.steps,
            learning_rate: self.coding_train.learning_rate,
            seed: self.seed,
            encoder_hidden: self.arch.encoder_hidden.clone(),
            head_hidden: self.arch.head_hidden.clone(),
            aux_hidden: self.arch.aux_hidden.clone(),
            optimizer: self.coding_train.optimizer,
        }
    }

    pub fn sr_config(&self) -> SrConfig {
        SrConfig {
            t_max: self.t_max,
            beta: self.beta,
            delta0: self.delta0,
            chunk_quantizers: self.quantizers.clone(),
            batch_size: self.coding_train.batch_size,
            steps: self.coding_train.steps,
            learning_rate: self.coding_train.learning_rate,
            seed: self.seed,
            encoder_hidden: self.arch.encoder_hidden.clone(),
            head_hidden: self.arch.head_hidden.clone(),
            aux_hidden: self.arch.aux_hidden.clone(),
            gate_hidden: self.arch.gate_hidden.clone(),
            optimizer: self.coding_train.optimizer,
        }
    }

    /// Total transmitted bits when every round is used.
    pub fn full_budget_bits(&self) -> u64 {
        let per_round: u64 = self.quantizers.iter().map(|q| q.bit_cost()).sum();
        per_round * self.t_max as u64
    }
}
