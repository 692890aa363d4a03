use serde::{Deserialize, Serialize};

use crate::backbone::InjectionMode;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptForm {
    Pool,
    Vector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    /// Query-addressed prompts with optional reconstruction and ablations.
    Rebq,
    /// One learnable prompt vector per missing type; no pools, no
    /// reconstruction.
    NaivePromptVector,
}

/// Which parts of the model are present and how prompts are injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub kind: VariantKind,
    pub reconstruction: bool,
    pub modality_specific_query: bool,
    pub memory: PromptForm,
    pub text_prompts: PromptForm,
    pub visual_prompts: PromptForm,
    /// One pool addressed by both modality queries.
    pub unified_pool: bool,
    pub text_injection: InjectionMode,
    pub visual_injection: InjectionMode,
    pub memory_injection: InjectionMode,
}

impl Default for VariantSpec {
    fn default() -> Self {
        Self::canonical()
    }
}

pub const PRESETS: [&str; 6] = [
    "rebq",
    "no_reconstruction",
    "no_modality_specific_query",
    "no_memory_pool",
    "unified_pool",
    "naive",
];

impl VariantSpec {
    pub fn canonical() -> Self {
        Self {
            kind: VariantKind::Rebq,
            reconstruction: true,
            modality_specific_query: true,
            memory: PromptForm::Pool,
            text_prompts: PromptForm::Pool,
            visual_prompts: PromptForm::Pool,
            unified_pool: false,
            text_injection: InjectionMode::Attention,
            visual_injection: InjectionMode::Attention,
            memory_injection: InjectionMode::Attention,
        }
    }

    pub fn without_reconstruction() -> Self {
        Self {
            reconstruction: false,
            ..Self::canonical()
        }
    }

    pub fn without_modality_specific_query() -> Self {
        Self {
            reconstruction: false,
            modality_specific_query: false,
            ..Self::canonical()
        }
    }

    pub fn without_memory_pool() -> Self {
        Self {
            memory: PromptForm::Vector,
            ..Self::canonical()
        }
    }

    pub fn unified() -> Self {
        Self {
            unified_pool: true,
            ..Self::canonical()
        }
    }

    pub fn naive() -> Self {
        Self {
            kind: VariantKind::NaivePromptVector,
            reconstruction: false,
            ..Self::canonical()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "rebq" => Self::canonical(),
            "no_reconstruction" => Self::without_reconstruction(),
            "no_modality_specific_query" => Self::without_modality_specific_query(),
            "no_memory_pool" => Self::without_memory_pool(),
            "unified_pool" => Self::unified(),
            "naive" => Self::naive(),
            other => {
                return Err(Error::Variant(format!(
                    "unknown preset `{other}`; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    /// Rejects combinations that cannot be built.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Variant(m.to_string()));
        if self.kind == VariantKind::NaivePromptVector && self.reconstruction {
            return bad("the naive prompt-vector baseline has no reconstruction stage");
        }
        if self.reconstruction && !self.modality_specific_query {
            return bad("reconstruction produces a missing modality's query, which needs modality-specific queries");
        }
        if self.unified_pool {
            if self.text_prompts != PromptForm::Pool || self.visual_prompts != PromptForm::Pool {
                return bad("a unified pool cannot be combined with vector prompts");
            }
            if self.text_injection != self.visual_injection {
                return bad("a unified pool has a single injection mode");
            }
        }
        Ok(())
    }
}
