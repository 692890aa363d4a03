//! Missing-query reconstruction through the memory pool.
//!
//! Queries come from one prompt-free pass over the unified layout. When a
//! modality is absent, the memory prompts selected by the joint query are
//! injected into a second pass over `[x_cls, X^t, X^v]` (the absent side
//! holding its dummy) and the output at `x_cls` stands in for the absent
//! modality's query.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{MultimodalBackbone, Segment, RECONSTRUCTION_LAYOUT, UNIFIED_LAYOUT};
use crate::bench::{Modality, Sample};
use crate::error::{Error, Result};
use crate::prompt::PromptSource;
use crate::tensor::{cosine_similarity, Tape, Var};

/// Prompt-free queries of one sample.
///
/// `text` and `visual` always hold the raw cls outputs; for an absent
/// modality that raw value is computed from the dummy and is what a model
/// without reconstruction consumes. The `*_reconstructed` flags record that
/// a query was later replaced by a reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryBundle {
    pub text: Vec<f64>,
    pub visual: Vec<f64>,
    pub memory: Vec<f64>,
    pub missing: Option<Modality>,
    pub text_reconstructed: bool,
    pub visual_reconstructed: bool,
}

impl QueryBundle {
    pub fn query(&self, m: Modality) -> &[f64] {
        match m {
            Modality::Text => &self.text,
            Modality::Visual => &self.visual,
        }
    }

    pub fn mark_reconstructed(&mut self, m: Modality) {
        match m {
            Modality::Text => self.text_reconstructed = true,
            Modality::Visual => self.visual_reconstructed = true,
        }
    }
}

pub fn generate_queries(backbone: &MultimodalBackbone, sample: &Sample) -> Result<QueryBundle> {
    let cfg = &backbone.config;
    let mut tape = Tape::new();
    let out = backbone.encode(&mut tape, sample, &UNIFIED_LAYOUT, None)?;
    let at = |tape: &Tape<'_>, seg: Segment| {
        let p = cfg.position(&UNIFIED_LAYOUT, seg).expect("unified layout has every cls");
        tape.value(out)[p * cfg.embed_dim..(p + 1) * cfg.embed_dim].to_vec()
    };
    Ok(QueryBundle {
        text: at(&tape, Segment::TextCls),
        visual: at(&tape, Segment::VisualCls),
        memory: at(&tape, Segment::JointCls),
        missing: sample.missing(),
        text_reconstructed: false,
        visual_reconstructed: false,
    })
}

/// Reconstructed query `[1, D]` for the absent modality of `sample`,
/// differentiable in the memory parameters.
pub fn reconstruct_query_on<'a>(
    tape: &mut Tape<'a>,
    backbone: &'a MultimodalBackbone,
    memory: &'a PromptSource,
    sample: &Sample,
    memory_query: &[f64],
) -> Result<Var> {
    if sample.missing().is_none() {
        return Err(Error::Sample(format!(
            "{}: reconstruction needs exactly one missing modality",
            sample.id
        )));
    }
    let q = tape.constant_row(memory_query);
    let inj = memory.select_injection(tape, q)?;
    let out = backbone.encode(tape, sample, &RECONSTRUCTION_LAYOUT, Some(&inj))?;
    tape.row(out, 0)
}

pub fn reconstruct_query(
    sample: &Sample,
    bundle: &QueryBundle,
    memory: &PromptSource,
    backbone: &MultimodalBackbone,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let q = reconstruct_query_on(&mut tape, backbone, memory, sample, &bundle.memory)?;
    Ok(tape.value(q).to_vec())
}

/// A modality-complete sample with its two single-modality counterparts and
/// all three sets of prompt-free queries.
#[derive(Debug, Clone)]
pub struct CompleteQueries {
    pub original: QueryBundle,
    /// Visual replaced by its dummy.
    pub text_only: Sample,
    pub text_only_queries: QueryBundle,
    /// Text replaced by its dummy.
    pub visual_only: Sample,
    pub visual_only_queries: QueryBundle,
}

impl CompleteQueries {
    pub fn prepare(backbone: &MultimodalBackbone, sample: &Sample) -> Result<Self> {
        if !sample.is_complete() {
            return Err(Error::Sample(format!(
                "{}: reconstruction loss needs modality-complete samples",
                sample.id
            )));
        }
        let shape = backbone.config.input_shape();
        let text_only = sample.without(Modality::Visual, &shape);
        let visual_only = sample.without(Modality::Text, &shape);
        Ok(Self {
            original: generate_queries(backbone, sample)?,
            text_only_queries: generate_queries(backbone, &text_only)?,
            visual_only_queries: generate_queries(backbone, &visual_only)?,
            text_only,
            visual_only,
        })
    }
}

/// `(1/N) Σ (‖q^t − q̂^t‖² + ‖q^v − q̂^v‖²)` over `[gt_t, rec_t, gt_v, rec_v]`
/// quadruples of `[1, D]` rows.
pub fn squared_residual_mean(tape: &mut Tape<'_>, items: &[[Var; 4]]) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::Sample("reconstruction loss over an empty batch".into()));
    }
    let mut terms = Vec::with_capacity(2 * items.len());
    for &[gt_t, rec_t, gt_v, rec_v] in items {
        let dt = tape.sub(gt_t, rec_t)?;
        let dv = tape.sub(gt_v, rec_v)?;
        terms.push(tape.sum_squares(dt));
        terms.push(tape.sum_squares(dv));
    }
    let all = tape.concat_cols(&terms)?;
    let total = tape.sum(all);
    Ok(tape.scale(total, 1.0 / items.len() as f64))
}

/// Reconstruction loss on the tape. Ground-truth queries enter as constants.
pub fn reconstruction_loss_on<'a>(
    tape: &mut Tape<'a>,
    backbone: &'a MultimodalBackbone,
    memory: &'a PromptSource,
    batch: &[&CompleteQueries],
) -> Result<Var> {
    let mut items = Vec::with_capacity(batch.len());
    for c in batch {
        let rec_v = reconstruct_query_on(tape, backbone, memory, &c.text_only, &c.text_only_queries.memory)?;
        let rec_t = reconstruct_query_on(tape, backbone, memory, &c.visual_only, &c.visual_only_queries.memory)?;
        let gt_t = tape.constant_row(&c.original.text);
        let gt_v = tape.constant_row(&c.original.visual);
        items.push([gt_t, rec_t, gt_v, rec_v]);
    }
    squared_residual_mean(tape, &items)
}

pub fn reconstruction_loss(batch: &[Sample], memory: &PromptSource, backbone: &MultimodalBackbone) -> Result<f64> {
    let prepared = batch
        .iter()
        .map(|s| CompleteQueries::prepare(backbone, s))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&CompleteQueries> = prepared.iter().collect();
    let mut tape = Tape::new();
    let l = reconstruction_loss_on(&mut tape, backbone, memory, &refs)?;
    Ok(tape.scalar(l))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    GroundTruth,
    Reconstructed,
    Unreconstructed,
}

/// One exported query embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub classes: Vec<usize>,
    pub modality: Modality,
    pub kind: QueryKind,
    pub embedding: Vec<f64>,
}

/// Ground-truth, reconstructed and unreconstructed queries of both
/// modalities for each complete sample, with each modality dropped in turn.
pub fn collect_query_records(
    backbone: &MultimodalBackbone,
    memory: &PromptSource,
    samples: &[Sample],
) -> Result<Vec<QueryRecord>> {
    let per_sample = samples
        .par_iter()
        .map(|s| {
            let c = CompleteQueries::prepare(backbone, s)?;
            let rec = |m: Modality, queries: Vec<f64>, kind| QueryRecord {
                id: s.id.clone(),
                classes: s.label.classes().to_vec(),
                modality: m,
                kind,
                embedding: queries,
            };
            let rec_t = reconstruct_query(&c.visual_only, &c.visual_only_queries, memory, backbone)?;
            let rec_v = reconstruct_query(&c.text_only, &c.text_only_queries, memory, backbone)?;
            Ok(vec![
                rec(Modality::Text, c.original.text.clone(), QueryKind::GroundTruth),
                rec(Modality::Text, rec_t, QueryKind::Reconstructed),
                rec(Modality::Text, c.visual_only_queries.text.clone(), QueryKind::Unreconstructed),
                rec(Modality::Visual, c.original.visual.clone(), QueryKind::GroundTruth),
                rec(Modality::Visual, rec_v, QueryKind::Reconstructed),
                rec(Modality::Visual, c.text_only_queries.visual.clone(), QueryKind::Unreconstructed),
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_sample.into_iter().flatten().collect())
}

pub fn export_queries(records: &[QueryRecord], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_vec(records)?)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionQuality {
    /// Mean cosine between reconstructed and ground-truth queries.
    pub reconstructed: f64,
    /// Mean cosine between raw dummy-derived and ground-truth queries.
    pub unreconstructed: f64,
    pub count: usize,
}

/// Drops each modality of every complete sample in turn and compares the
/// resulting queries with the ground truth.
pub fn reconstruction_quality(
    backbone: &MultimodalBackbone,
    memory: &PromptSource,
    samples: &[Sample],
) -> Result<ReconstructionQuality> {
    let records = collect_query_records(backbone, memory, samples)?;
    let (mut rec, mut raw, mut n) = (0.0, 0.0, 0usize);
    for group in records.chunks(3) {
        let [gt, r, u] = group else { unreachable!("records come in triples") };
        rec += cosine_similarity(&r.embedding, &gt.embedding);
        raw += cosine_similarity(&u.embedding, &gt.embedding);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Sample("no samples to assess reconstruction on".into()));
    }
    Ok(ReconstructionQuality {
        reconstructed: rec / n as f64,
        unreconstructed: raw / n as f64,
        count: n,
    })
}
