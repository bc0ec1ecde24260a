//! Run configuration: one JSON object with a section per stage.
//!
//! Missing keys take their defaults; unknown keys are rejected. Command-line
//! flags are applied on top of the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detect::FinetuneConfig;
use crate::embed::ProviderConfig;
use crate::error::{Result, SegaError};
use crate::model::Dims;
use crate::pretrain::PretrainConfig;
use crate::synth::SynthConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Drop list nodes and every list-touching relation.
    pub no_list: bool,
    /// Skip pre-training; fine-tune from fresh parameters.
    pub no_pretrain: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub seed: u64,
    /// Pre-trained checkpoint for a standalone fine-tuning run.
    pub init_checkpoint: Option<PathBuf>,
    pub dims: Dims,
    pub text_provider: ProviderConfig,
    pub prompt_provider: ProviderConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub ablation: Ablation,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            seed: 7,
            init_checkpoint: None,
            dims: Dims::default(),
            text_provider: ProviderConfig::stub(0x7e47),
            prompt_provider: ProviderConfig::stub(0x9e0f),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            ablation: Ablation::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SegaError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| SegaError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Rejects invalid sections and contradictory flags.
    pub fn check(&self) -> Result<()> {
        self.dims.check().map_err(SegaError::Config)?;
        self.finetune.check()?;
        if self.ablation.no_pretrain && self.init_checkpoint.is_some() {
            return Err(SegaError::Config(
                "no_pretrain contradicts init_checkpoint: a fresh run cannot start from a checkpoint".into(),
            ));
        }
        if !self.ablation.no_pretrain {
            self.pretrain.check()?;
        }
        if self.dims.node_input() != self.dims.out {
            return Err(SegaError::Config(format!(
                "graph width {} must equal four times the feature width {}",
                self.dims.out, self.dims.hidden
            )));
        }
        Ok(())
    }

    pub fn with_lists(&self) -> bool {
        !self.ablation.no_list
    }
}
