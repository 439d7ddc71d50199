use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sipit_core::model::ModelConfig;

use crate::error::CliError;

/// Which candidate policies an inversion runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PolicyChoice {
    Random,
    Gradient,
    /// Both policies on the same states, reported side by side.
    Both,
}

/// Everything a run depends on. Written into every report in full.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Standard deviation of the Gaussian initialization.
    pub init_std: f64,
    /// Scan every matrix op for NaN/Inf.
    pub checked: bool,
    pub out_dir: PathBuf,
    /// Layer for margin, dump-states and invert; defaults to the last block.
    /// When set, scans cover only this layer.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub scan: ScanSection,
    pub invert: InvertSection,
    pub witness: WitnessSection,
    pub hessian: HessianSection,
    pub gradcheck: GradcheckSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            init_std: 0.02,
            checked: false,
            out_dir: PathBuf::from("out"),
            layer: None,
            model: ModelConfig::toy(),
            train: TrainSection::default(),
            scan: ScanSection::default(),
            invert: InvertSection::default(),
            witness: WitnessSection::default(),
            hessian: HessianSection::default(),
            gradcheck: GradcheckSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub eta: f64,
    /// Batch sizes cycled over steps; a size equal to the corpus is full GD.
    pub batch_sizes: Vec<usize>,
    pub corpus_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Steps after which the scan prompts are checked for collisions.
    pub checkpoints: Vec<usize>,
    pub scan_prompts: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 50,
            eta: 0.1,
            batch_sizes: vec![1, 8, 32],
            corpus_size: 32,
            min_len: 2,
            max_len: 12,
            checkpoints: vec![0, 10, 25, 50],
            scan_prompts: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanSection {
    /// Random prompts drawn when no prompt file is given.
    pub prompts: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Layers to scan; empty means every block output `1..=L`.
    pub layers: Vec<usize>,
    pub threshold: f64,
    /// Optional length sweep: prompt lengths to bucket by.
    pub lengths: Vec<usize>,
    pub per_length: usize,
}

impl Default for ScanSection {
    fn default() -> Self {
        ScanSection {
            prompts: 200,
            min_len: 1,
            max_len: 12,
            layers: Vec::new(),
            threshold: 1e-6,
            lengths: Vec::new(),
            per_length: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvertSection {
    pub epsilon: f64,
    /// Tenfold backoff up to this tolerance; absent means no backoff.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backoff_cap: Option<f64>,
    pub policy: PolicyChoice,
    pub gamma: f64,
    pub k_proj: usize,
    pub steps_per_proposal: usize,
}

impl Default for InvertSection {
    fn default() -> Self {
        InvertSection {
            epsilon: 0.0,
            backoff_cap: None,
            policy: PolicyChoice::Gradient,
            gamma: 0.1,
            k_proj: 50,
            steps_per_proposal: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WitnessSection {
    /// First differing position of the default attention-witness pair.
    pub i_star: usize,
}

impl Default for WitnessSection {
    fn default() -> Self {
        WitnessSection { i_star: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HessianSection {
    /// Model the Hessian is taken on; small, since the matrix is `p x p`.
    pub model: ModelConfig,
    pub prompt: Vec<usize>,
    pub target: Vec<f64>,
    pub etas: Vec<f64>,
}

impl Default for HessianSection {
    fn default() -> Self {
        HessianSection {
            model: ModelConfig::tiny(),
            prompt: vec![0, 1],
            target: vec![0.0, 1.0, 0.0],
            etas: vec![0.1, 0.5, 0.9],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub models: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection {
            models: 20,
            step: 1e-5,
            tolerance: 1e-6,
            floor: 1e-3,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes to JSON");
        hex::encode(Sha256::digest(json))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        if let Some(layer) = self.layer {
            if layer > self.model.blocks {
                return Err(CliError::Input(format!(
                    "layer {layer} out of range for {} blocks",
                    self.model.blocks
                )));
            }
        }
        if !(self.init_std > 0.0) {
            return Err(CliError::Input(format!(
                "init_std must be > 0, got {}",
                self.init_std
            )));
        }
        if !(self.train.eta > 0.0 && self.train.eta < 1.0) {
            return Err(CliError::Input(format!(
                "train.eta must lie in (0, 1), got {}",
                self.train.eta
            )));
        }
        Ok(())
    }
}
