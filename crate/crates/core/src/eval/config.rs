use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, PretrainOptions};
use crate::bench::{MissingCase, StreamConfig, SynthConfig};
use crate::error::{config_err, Result};
use crate::pipeline::{PromptConfig, TrainOptions, VariantSpec};
use crate::seed::derive_seed;
use crate::tensor::AdamWConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Every random stream of a run. All are explicit; [`Seeds::from_root`]
/// derives a full set from one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub backbone: u64,
    pub corpus: u64,
    pub split: u64,
    pub mask: u64,
    pub model: u64,
    pub train: u64,
}

impl Seeds {
    pub fn from_root(root: u64) -> Self {
        Self {
            backbone: derive_seed(root, "backbone", 0),
            corpus: derive_seed(root, "corpus", 0),
            split: derive_seed(root, "split", 0),
            mask: derive_seed(root, "mask", 0),
            model: derive_seed(root, "model", 0),
            train: derive_seed(root, "train", 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Load this corpus instead of generating one.
    #[serde(default)]
    pub corpus_path: Option<PathBuf>,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSetup {
    pub config: BackboneConfig,
    /// Loaded when it exists; otherwise the pretrained backbone is saved here.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub pretrain: PretrainOptions,
    pub pretrain_samples_per_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub name: String,
    pub backbone: BackboneSetup,
    pub data: DataConfig,
    pub stream: StreamConfig,
    pub prompt: PromptConfig,
    pub lambda: f64,
    pub variant: VariantSpec,
    pub train: TrainOptions,
    pub seeds: Seeds,
    /// Where `emit_report` writes; relative paths resolve against the output
    /// root.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Write the query-embedding export alongside the report.
    #[serde(default)]
    pub export_queries: bool,
    /// Write an experiment checkpoint after every session.
    #[serde(default)]
    pub checkpoint_sessions: bool,
}

impl Default for RunConfig {
    /// The desk benchmark: 20 classes in 5 sessions, 200 samples per class,
    /// 70% of each session missing a modality (half text, half image).
    fn default() -> Self {
        let backbone = BackboneConfig {
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            ffn_dim: 128,
            text_vocab_size: 512,
            max_text_len: 16,
            num_patches: 16,
            patch_dim: 16,
            pretrain_classes: 80,
        };
        let synth = SynthConfig {
            shape: backbone.input_shape(),
            token_noise: 0.5,
            ..SynthConfig::default()
        };
        Self {
            version: CONFIG_VERSION,
            name: "rebq".into(),
            backbone: BackboneSetup {
                config: backbone,
                checkpoint: None,
                pretrain: PretrainOptions::default(),
                pretrain_samples_per_class: 60,
            },
            data: DataConfig {
                corpus_path: None,
                num_classes: 20,
                samples_per_class: 200,
                synth,
            },
            stream: StreamConfig {
                num_sessions: 5,
                eta: 70.0,
                case: MissingCase::BothMissing,
            },
            prompt: PromptConfig {
                pool_size: 8,
                memory_pool_size: 8,
                prompt_len: 4,
                prompted_layers: 4,
            },
            lambda: 0.01,
            variant: VariantSpec::canonical(),
            train: TrainOptions {
                epochs: 2,
                batch_size: 4,
                optimizer: AdamWConfig {
                    lr: 1e-3,
                    ..AdamWConfig::default()
                },
                session_logit_mask: true,
            },
            seeds: Seeds::from_root(0),
            output_dir: None,
            export_queries: false,
            checkpoint_sessions: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn with_root_seed(mut self, root: u64) -> Self {
        self.seeds = Seeds::from_root(root);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(config_err(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.backbone.config.validate()?;
        self.variant.validate()?;
        self.train.optimizer.validate()?;
        let shape = self.backbone.config.input_shape();
        if self.data.corpus_path.is_none() && self.data.synth.shape != shape {
            return Err(config_err("synthetic data shape must match the backbone input shape"));
        }
        if !(0.0..=100.0).contains(&self.stream.eta) {
            return Err(config_err("eta must lie in [0, 100]"));
        }
        if self.prompt.prompted_layers > self.backbone.config.num_layers {
            return Err(config_err("more prompted layers than backbone layers"));
        }
        Ok(())
    }
}
