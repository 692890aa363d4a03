use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::variant::{PromptForm, VariantKind, VariantSpec};
use crate::backbone::{argmax, MultimodalBackbone, PromptInjection, UNIFIED_LAYOUT};
use crate::bench::{Modality, Sample};
use crate::error::{config_err, Error, Result};
use crate::prompt::{PoolRole, PromptGeometry, PromptPool, PromptSource, PromptVector};
use crate::reconstruct::{generate_queries, reconstruct_query_on, CompleteQueries, QueryBundle};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Components per modality pool.
    pub pool_size: usize,
    /// Components in the memory pool.
    pub memory_pool_size: usize,
    pub prompt_len: usize,
    pub prompted_layers: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            pool_size: 128,
            memory_pool_size: 128,
            prompt_len: 8,
            prompted_layers: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub multi_label: bool,
    pub prompt: PromptConfig,
    pub lambda: f64,
}

/// A sample with its prompt-free queries computed once.
///
/// The backbone is frozen, so queries never change during training and can
/// be shared across epochs and evaluations.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub sample: Sample,
    pub queries: QueryBundle,
    /// Counterparts for the reconstruction loss (complete samples only).
    pub complete: Option<CompleteQueries>,
}

impl PreparedSample {
    pub fn new(backbone: &MultimodalBackbone, sample: &Sample, with_counterparts: bool) -> Result<Self> {
        let complete = if with_counterparts && sample.is_complete() {
            Some(CompleteQueries::prepare(backbone, sample)?)
        } else {
            None
        };
        Ok(Self {
            queries: match &complete {
                Some(c) => c.original.clone(),
                None => generate_queries(backbone, sample)?,
            },
            sample: sample.clone(),
            complete,
        })
    }
}

pub fn prepare_all(backbone: &MultimodalBackbone, samples: &[Sample], with_counterparts: bool) -> Result<Vec<PreparedSample>> {
    samples
        .par_iter()
        .map(|s| PreparedSample::new(backbone, s, with_counterparts))
        .collect()
}

/// Output of one classification forward.
#[derive(Debug, Clone, Copy)]
pub struct ForwardTrace {
    pub logits: Var,
    pub text_reconstructed: bool,
    pub visual_reconstructed: bool,
}

#[derive(Debug, Clone)]
pub struct RebQModel {
    pub backbone: Arc<MultimodalBackbone>,
    pub spec: VariantSpec,
    pub config: ModelConfig,
    /// Text prompts, or the shared pool of a unified variant.
    pub folder: Option<PromptSource>,
    /// Visual prompts; absent for unified and naive variants.
    pub album: Option<PromptSource>,
    pub memory: Option<PromptSource>,
    /// Naive baseline prompts indexed by [`missing_slot`].
    pub missing_prompts: Vec<PromptVector>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// 0: complete, 1: text missing, 2: visual missing.
pub fn missing_slot(sample: &Sample) -> usize {
    match sample.missing() {
        None => 0,
        Some(Modality::Text) => 1,
        Some(Modality::Visual) => 2,
    }
}

fn source(
    form: PromptForm,
    role: PoolRole,
    geometry: PromptGeometry,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PromptSource> {
    Ok(match form {
        PromptForm::Pool => PromptSource::Pool(PromptPool::new(role, geometry, size, rng)?),
        PromptForm::Vector => PromptSource::Vector(PromptVector::new(geometry, rng)?),
    })
}

/// Builds the canonical model or one of its ablations and baselines on a
/// frozen backbone.
pub fn build_variant(spec: VariantSpec, backbone: Arc<MultimodalBackbone>, config: &ModelConfig, seed: u64) -> Result<RebQModel> {
    spec.validate()?;
    if !backbone.is_frozen() {
        return Err(config_err("prompt models need a frozen backbone"));
    }
    if config.num_classes == 0 {
        return Err(config_err("num_classes must be >= 1"));
    }
    if !(config.lambda >= 0.0 && config.lambda.is_finite()) {
        return Err(config_err("lambda must be finite and non-negative"));
    }
    let p = config.prompt;
    if p.prompted_layers > backbone.config.num_layers {
        return Err(config_err(format!(
            "{} prompted layers exceed the backbone's {}",
            p.prompted_layers, backbone.config.num_layers
        )));
    }
    let d = backbone.config.embed_dim;
    let geometry = |mode| PromptGeometry {
        embed_dim: d,
        prompt_len: p.prompt_len,
        num_layers: p.prompted_layers,
        mode,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut folder, mut album, mut memory, mut missing_prompts) = (None, None, None, Vec::new());
    match spec.kind {
        VariantKind::NaivePromptVector => {
            for _ in 0..3 {
                missing_prompts.push(PromptVector::new(geometry(spec.text_injection), &mut rng)?);
            }
        }
        VariantKind::Rebq => {
            if spec.unified_pool {
                folder = Some(source(PromptForm::Pool, PoolRole::Unified, geometry(spec.text_injection), p.pool_size, &mut rng)?);
            } else {
                folder = Some(source(spec.text_prompts, PoolRole::Text, geometry(spec.text_injection), p.pool_size, &mut rng)?);
                album = Some(source(spec.visual_prompts, PoolRole::Visual, geometry(spec.visual_injection), p.pool_size, &mut rng)?);
            }
            if spec.reconstruction {
                memory = Some(source(
                    spec.memory,
                    PoolRole::Memory,
                    geometry(spec.memory_injection),
                    p.memory_pool_size,
                    &mut rng,
                )?);
            }
        }
    }
    Ok(RebQModel {
        head_w: Tensor::zeros(&[d, config.num_classes]).with_trainable(true),
        head_b: Tensor::zeros(&[1, config.num_classes]).with_trainable(true),
        backbone,
        spec,
        config: *config,
        folder,
        album,
        memory,
        missing_prompts,
    })
}

impl RebQModel {
    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Trainable parameters in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (name, src) in [("folder", &self.folder), ("album", &self.album), ("memory", &self.memory)] {
            if let Some(s) = src {
                v.extend(s.named_params().into_iter().map(|(n, t)| (format!("{name}.{n}"), t)));
            }
        }
        for (i, p) in self.missing_prompts.iter().enumerate() {
            v.extend(p.named_params().into_iter().map(|(n, t)| (format!("missing.{i}.{n}"), t)));
        }
        v.push(("head.w".into(), &self.head_w));
        v.push(("head.b".into(), &self.head_b));
        v
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = Vec::new();
        for (name, src) in [("folder", &mut self.folder), ("album", &mut self.album), ("memory", &mut self.memory)] {
            if let Some(s) = src {
                v.extend(s.named_params_mut().into_iter().map(|(n, t)| (format!("{name}.{n}"), t)));
            }
        }
        for (i, p) in self.missing_prompts.iter_mut().enumerate() {
            v.extend(p.named_params_mut().into_iter().map(|(n, t)| (format!("missing.{i}.{n}"), t)));
        }
        v.push(("head.w".into(), &mut self.head_w));
        v.push(("head.b".into(), &mut self.head_b));
        v
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    fn album_or_shared(&self) -> Option<&PromptSource> {
        self.album.as_ref().or(if self.spec.unified_pool { self.folder.as_ref() } else { None })
    }

    /// Query for modality `m`, reconstructed when `m` is absent and the
    /// variant reconstructs; `None` when the variant skips `m`.
    fn query_on<'a>(&'a self, tape: &mut Tape<'a>, p: &PreparedSample, m: Modality) -> Result<Option<(Var, bool)>> {
        let present = p.sample.has(m);
        if !present && !self.spec.modality_specific_query {
            return Ok(None);
        }
        if !present && self.spec.reconstruction {
            let memory = self.memory.as_ref().ok_or_else(|| Error::Variant("reconstruction without a memory".into()))?;
            let q = reconstruct_query_on(tape, &self.backbone, memory, &p.sample, &p.queries.memory)?;
            return Ok(Some((q, true)));
        }
        Ok(Some((tape.constant_row(p.queries.query(m)), false)))
    }

    /// Prompts for one sample, text block before visual block.
    pub fn injection_on<'a>(&'a self, tape: &mut Tape<'a>, p: &PreparedSample) -> Result<(PromptInjection, [bool; 2])> {
        if !p.sample.has_text && !p.sample.has_visual {
            return Err(Error::Sample(format!("{}: both modalities missing", p.sample.id)));
        }
        match self.spec.kind {
            VariantKind::NaivePromptVector => {
                let inj = self.missing_prompts[missing_slot(&p.sample)].injection(tape)?;
                Ok((inj, [false, false]))
            }
            VariantKind::Rebq => {
                let mut parts = Vec::with_capacity(2);
                let mut flags = [false, false];
                let sources = [(Modality::Text, self.folder.as_ref()), (Modality::Visual, self.album_or_shared())];
                for (i, (m, src)) in sources.into_iter().enumerate() {
                    let src = src.ok_or_else(|| Error::Variant("missing prompt source".into()))?;
                    if let Some((q, rec)) = self.query_on(tape, p, m)? {
                        flags[i] = rec;
                        parts.push(src.select_injection(tape, q)?);
                    }
                }
                let refs: Vec<&PromptInjection> = parts.iter().collect();
                Ok((PromptInjection::combine(tape, &refs)?, flags))
            }
        }
    }

    pub fn forward_on<'a>(&'a self, tape: &mut Tape<'a>, p: &PreparedSample) -> Result<ForwardTrace> {
        let (inj, [t, v]) = self.injection_on(tape, p)?;
        let out = self.backbone.encode(tape, &p.sample, &UNIFIED_LAYOUT, Some(&inj))?;
        let cls = tape.row(out, 0)?;
        let (w, b) = (tape.leaf(&self.head_w), tape.leaf(&self.head_b));
        let logits = tape.matmul(cls, w)?;
        Ok(ForwardTrace {
            logits: tape.add_row(logits, b)?,
            text_reconstructed: t,
            visual_reconstructed: v,
        })
    }

    pub fn logits(&self, p: &PreparedSample) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let t = self.forward_on(&mut tape, p)?;
        Ok(tape.value(t.logits).to_vec())
    }

    /// Task-agnostic prediction over all classes.
    pub fn predict(&self, p: &PreparedSample) -> Result<Vec<usize>> {
        Ok(predict_from_logits(&self.logits(p)?, self.config.multi_label))
    }

    pub fn predict_all(&self, samples: &[PreparedSample]) -> Result<Vec<Vec<usize>>> {
        samples.par_iter().map(|p| self.predict(p)).collect()
    }
}

/// Argmax for single-label; `sigmoid > 0.5` (logit > 0) per class otherwise.
pub fn predict_from_logits(logits: &[f64], multi_label: bool) -> Vec<usize> {
    if multi_label {
        logits.iter().enumerate().filter(|(_, &z)| z > 0.0).map(|(i, _)| i).collect()
    } else {
        vec![argmax(logits)]
    }
}
