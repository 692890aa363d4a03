//! A small multimodal transformer encoder standing in for a pre-trained
//! vision-language model.
//!
//! Text tokens and image patches are embedded into a shared width `D`,
//! concatenated with learned special tokens, and run through pre-LN
//! transformer blocks. Prompts can be injected either as per-layer
//! key/value prefixes or as extra input tokens.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{InputShape, Sample};
use crate::checkpoint::Container;
use crate::error::{config_err, Error, Result};
use crate::tensor::{AdamW, AdamWConfig, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-6;
pub const CHECKPOINT_KIND: &str = "rebq-backbone";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub text_vocab_size: usize,
    pub max_text_len: usize,
    pub num_patches: usize,
    pub patch_dim: usize,
    pub pretrain_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            ffn_dim: 128,
            text_vocab_size: 512,
            max_text_len: 16,
            num_patches: 16,
            patch_dim: 16,
            pretrain_classes: 16,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(config_err(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.max_text_len == 0 || self.num_patches == 0 || self.patch_dim == 0 {
            return Err(config_err("max_text_len, num_patches and patch_dim must be >= 1"));
        }
        if self.num_layers == 0 || self.ffn_dim == 0 || self.text_vocab_size < 2 || self.pretrain_classes < 2 {
            return Err(config_err("num_layers, ffn_dim >= 1; vocab and pretrain classes >= 2"));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> InputShape {
        InputShape {
            vocab_size: self.text_vocab_size,
            max_text_len: self.max_text_len,
            num_patches: self.num_patches,
            patch_dim: self.patch_dim,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Input segments that can be arranged into a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    JointCls,
    TextCls,
    VisualCls,
    Text,
    Visual,
}

/// `[x_cls, x_cls^t, X^t, x_cls^v, X^v]`: yields the joint memory query and
/// both modality queries from one pass.
pub const UNIFIED_LAYOUT: [Segment; 5] = [
    Segment::JointCls,
    Segment::TextCls,
    Segment::Text,
    Segment::VisualCls,
    Segment::Visual,
];

/// `[x_cls, X^t, X^v]`, the single-cls layout used for reconstruction.
pub const RECONSTRUCTION_LAYOUT: [Segment; 3] = [Segment::JointCls, Segment::Text, Segment::Visual];

impl BackboneConfig {
    fn segment_len(&self, s: Segment) -> usize {
        match s {
            Segment::Text => self.max_text_len,
            Segment::Visual => self.num_patches,
            _ => 1,
        }
    }

    /// Start index of `seg` within `layout` (before any appended prompts).
    pub fn position(&self, layout: &[Segment], seg: Segment) -> Option<usize> {
        let mut pos = 0;
        for &s in layout {
            if s == seg {
                return Some(pos);
            }
            pos += self.segment_len(s);
        }
        None
    }

    pub fn layout_len(&self, layout: &[Segment]) -> usize {
        layout.iter().map(|&s| self.segment_len(s)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    /// Prompt blocks are concatenated to a layer's keys and values.
    Attention,
    /// Prompt tokens are inserted into the input sequence.
    Input,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerPrefix {
    pub key: Var,
    pub value: Var,
}

/// Prompts to inject into one forward pass.
///
/// `layers[l]` is the key/value prefix of layer `l`, so prompts always occupy
/// the first `layers.len()` layers. `appended` tokens are placed right after
/// the leading position of the input sequence.
#[derive(Debug, Clone, Default)]
pub struct PromptInjection {
    pub layers: Vec<LayerPrefix>,
    pub appended: Option<Var>,
}

impl PromptInjection {
    pub fn is_empty(&self) -> bool {
        self.layers.is_empty() && self.appended.is_none()
    }

    pub fn appended_len(&self, tape: &Tape<'_>) -> usize {
        self.appended.map_or(0, |v| tape.dims(v).0)
    }

    /// Concatenates several injections in order, layer by layer.
    pub fn combine(tape: &mut Tape<'_>, parts: &[&PromptInjection]) -> Result<PromptInjection> {
        let depth = parts.iter().map(|p| p.layers.len()).max().unwrap_or(0);
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let present: Vec<&LayerPrefix> = parts.iter().filter_map(|p| p.layers.get(l)).collect();
            if present.len() == 1 {
                layers.push(*present[0]);
                continue;
            }
            let keys: Vec<Var> = present.iter().map(|p| p.key).collect();
            let values: Vec<Var> = present.iter().map(|p| p.value).collect();
            layers.push(LayerPrefix {
                key: tape.concat_rows(&keys)?,
                value: tape.concat_rows(&values)?,
            });
        }
        let appended: Vec<Var> = parts.iter().filter_map(|p| p.appended).collect();
        let appended = match appended.len() {
            0 => None,
            1 => Some(appended[0]),
            _ => Some(tape.concat_rows(&appended)?),
        };
        Ok(PromptInjection { layers, appended })
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

macro_rules! block_fields {
    ($m:ident) => {
        $m!(ln1_gamma, ln1_beta, wq, bq, wk, bk, wv, bv, wo, bo, ln2_gamma, ln2_beta, w1, b1, w2, b2)
    };
}

fn linear(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (Tensor::uniform(&[fan_in, fan_out], bound, rng), Tensor::zeros(&[1, fan_out]))
}

impl Block {
    fn init(cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.embed_dim;
        let (wq, bq) = linear(d, d, rng);
        let (wk, bk) = linear(d, d, rng);
        let (wv, bv) = linear(d, d, rng);
        let (wo, bo) = linear(d, d, rng);
        let (w1, b1) = linear(d, cfg.ffn_dim, rng);
        let (w2, b2) = linear(cfg.ffn_dim, d, rng);
        Self {
            ln1_gamma: Tensor::filled(&[1, d], 1.0),
            ln1_beta: Tensor::zeros(&[1, d]),
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2_gamma: Tensor::filled(&[1, d], 1.0),
            ln2_beta: Tensor::zeros(&[1, d]),
            w1,
            b1,
            w2,
            b2,
        }
    }

    fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        macro_rules! list {
            ($($f:ident),*) => { vec![$((format!("{prefix}{}", stringify!($f)), &self.$f)),*] };
        }
        block_fields!(list)
    }

    fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        macro_rules! list {
            ($($f:ident),*) => { vec![$((format!("{prefix}{}", stringify!($f)), &mut self.$f)),*] };
        }
        block_fields!(list)
    }

    fn forward<'a>(&'a self, cfg: &BackboneConfig, tape: &mut Tape<'a>, x: Var, prefix: Option<&LayerPrefix>) -> Result<Var> {
        let d = cfg.embed_dim;
        let dh = cfg.head_dim();
        let lin = |tape: &mut Tape<'a>, x: Var, w: &'a Tensor, b: &'a Tensor| -> Result<Var> {
            let (w, b) = (tape.leaf(w), tape.leaf(b));
            let y = tape.matmul(x, w)?;
            tape.add_row(y, b)
        };

        let (g1, b1) = (tape.leaf(&self.ln1_gamma), tape.leaf(&self.ln1_beta));
        let h = tape.layer_norm(x, g1, b1, LN_EPS)?;
        let q = lin(tape, h, &self.wq, &self.bq)?;
        let mut k = lin(tape, h, &self.wk, &self.bk)?;
        let mut v = lin(tape, h, &self.wv, &self.bv)?;
        if let Some(p) = prefix {
            if tape.dims(p.key).1 != d || tape.dims(p.value).1 != d || tape.dims(p.key).0 != tape.dims(p.value).0 {
                return Err(Error::ShapeMismatch {
                    op: "attention prefix",
                    lhs: tape.shape(p.key).to_vec(),
                    rhs: tape.shape(p.value).to_vec(),
                });
            }
            k = tape.concat_rows(&[p.key, k])?;
            v = tape.concat_rows(&[p.value, v])?;
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for head in 0..cfg.num_heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            heads.push(tape.matmul(attn, vh)?);
        }
        let o = tape.concat_cols(&heads)?;
        let o = lin(tape, o, &self.wo, &self.bo)?;
        let x = tape.add(x, o)?;

        let (g2, b2) = (tape.leaf(&self.ln2_gamma), tape.leaf(&self.ln2_beta));
        let h = tape.layer_norm(x, g2, b2, LN_EPS)?;
        let f = lin(tape, h, &self.w1, &self.b1)?;
        let f = tape.gelu(f);
        let f = lin(tape, f, &self.w2, &self.b2)?;
        tape.add(x, f)
    }
}

/// Text and visual token embeddings of one sample.
#[derive(Debug, Clone, Copy)]
pub struct Embedded {
    pub text: Var,
    pub visual: Var,
}

#[derive(Debug, Clone)]
pub struct MultimodalBackbone {
    pub config: BackboneConfig,
    pub token_embedding: Tensor,
    pub patch_proj: Tensor,
    pub patch_bias: Tensor,
    pub text_pos: Tensor,
    pub patch_pos: Tensor,
    pub type_text: Tensor,
    pub type_visual: Tensor,
    pub cls_joint: Tensor,
    pub cls_text: Tensor,
    pub cls_visual: Tensor,
    pub blocks: Vec<Block>,
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
    frozen: bool,
}

impl MultimodalBackbone {
    /// Randomly initialized, trainable backbone.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let emb = 0.5;
        let token_embedding = Tensor::normal(&[config.text_vocab_size, d], emb, &mut rng);
        let (patch_proj, patch_bias) = linear(config.patch_dim, d, &mut rng);
        let text_pos = Tensor::normal(&[config.max_text_len, d], 0.1, &mut rng);
        let patch_pos = Tensor::normal(&[config.num_patches, d], 0.1, &mut rng);
        let type_text = Tensor::normal(&[1, d], 0.1, &mut rng);
        let type_visual = Tensor::normal(&[1, d], 0.1, &mut rng);
        let cls_joint = Tensor::normal(&[1, d], emb, &mut rng);
        let cls_text = Tensor::normal(&[1, d], emb, &mut rng);
        let cls_visual = Tensor::normal(&[1, d], emb, &mut rng);
        let blocks = (0..config.num_layers).map(|_| Block::init(&config, &mut rng)).collect();
        let (head_w, head_b) = linear(d, config.pretrain_classes, &mut rng);
        let mut b = Self {
            config,
            token_embedding,
            patch_proj,
            patch_bias,
            text_pos,
            patch_pos,
            type_text,
            type_visual,
            cls_joint,
            cls_text,
            cls_visual,
            blocks,
            final_gamma: Tensor::filled(&[1, d], 1.0),
            final_beta: Tensor::zeros(&[1, d]),
            head_w,
            head_b,
            frozen: false,
        };
        b.set_trainable(true);
        Ok(b)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks every parameter non-trainable, permanently.
    pub fn freeze(&mut self) {
        self.set_trainable(false);
        self.frozen = true;
    }

    fn set_trainable(&mut self, on: bool) {
        for (_, t) in self.named_params_mut() {
            t.set_trainable(on);
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("patch_proj".to_string(), &self.patch_proj),
            ("patch_bias".to_string(), &self.patch_bias),
            ("text_pos".to_string(), &self.text_pos),
            ("patch_pos".to_string(), &self.patch_pos),
            ("type_text".to_string(), &self.type_text),
            ("type_visual".to_string(), &self.type_visual),
            ("cls_joint".to_string(), &self.cls_joint),
            ("cls_text".to_string(), &self.cls_text),
            ("cls_visual".to_string(), &self.cls_visual),
            ("final_gamma".to_string(), &self.final_gamma),
            ("final_beta".to_string(), &self.final_beta),
            ("head_w".to_string(), &self.head_w),
            ("head_b".to_string(), &self.head_b),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(b.named(&format!("blocks.{i}.")));
        }
        v
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = vec![
            ("token_embedding".to_string(), &mut self.token_embedding),
            ("patch_proj".to_string(), &mut self.patch_proj),
            ("patch_bias".to_string(), &mut self.patch_bias),
            ("text_pos".to_string(), &mut self.text_pos),
            ("patch_pos".to_string(), &mut self.patch_pos),
            ("type_text".to_string(), &mut self.type_text),
            ("type_visual".to_string(), &mut self.type_visual),
            ("cls_joint".to_string(), &mut self.cls_joint),
            ("cls_text".to_string(), &mut self.cls_text),
            ("cls_visual".to_string(), &mut self.cls_visual),
            ("final_gamma".to_string(), &mut self.final_gamma),
            ("final_beta".to_string(), &mut self.final_beta),
            ("head_w".to_string(), &mut self.head_w),
            ("head_b".to_string(), &mut self.head_b),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.extend(b.named_mut(&format!("blocks.{i}.")));
        }
        v
    }

    /// Token embedding + positional + modality-type embedding for both
    /// modalities. Missing modalities are embedded from their dummies like
    /// any other input.
    pub fn embed<'a>(&'a self, tape: &mut Tape<'a>, sample: &Sample) -> Result<Embedded> {
        let cfg = &self.config;
        if sample.text_tokens.len() > cfg.max_text_len {
            return Err(Error::Sample(format!(
                "{} text tokens exceed max_text_len {}",
                sample.text_tokens.len(),
                cfg.max_text_len
            )));
        }
        let ids: Vec<usize> = sample.padded_tokens(cfg.max_text_len).iter().map(|&t| t as usize).collect();
        let table = tape.leaf(&self.token_embedding);
        let tok = tape.gather_rows(table, &ids)?;
        let pos = tape.leaf(&self.text_pos);
        let text = tape.add(tok, pos)?;
        let ty = tape.leaf(&self.type_text);
        let text = tape.add_row(text, ty)?;

        if sample.patches.len() != cfg.num_patches || sample.patches.iter().any(|p| p.len() != cfg.patch_dim) {
            return Err(Error::Sample(format!(
                "expected {} patches of width {}",
                cfg.num_patches, cfg.patch_dim
            )));
        }
        let patches = tape.constant(vec![cfg.num_patches, cfg.patch_dim], sample.flat_patches())?;
        let (w, b) = (tape.leaf(&self.patch_proj), tape.leaf(&self.patch_bias));
        let vis = tape.matmul(patches, w)?;
        let vis = tape.add_row(vis, b)?;
        let pos = tape.leaf(&self.patch_pos);
        let vis = tape.add(vis, pos)?;
        let ty = tape.leaf(&self.type_visual);
        let visual = tape.add_row(vis, ty)?;
        Ok(Embedded { text, visual })
    }

    /// Arranges embedded segments and special tokens into one sequence.
    pub fn assemble<'a>(&'a self, tape: &mut Tape<'a>, emb: &Embedded, layout: &[Segment]) -> Result<Var> {
        let parts: Vec<Var> = layout
            .iter()
            .map(|s| match s {
                Segment::JointCls => tape.leaf(&self.cls_joint),
                Segment::TextCls => tape.leaf(&self.cls_text),
                Segment::VisualCls => tape.leaf(&self.cls_visual),
                Segment::Text => emb.text,
                Segment::Visual => emb.visual,
            })
            .collect();
        tape.concat_rows(&parts)
    }

    /// Encodes an input sequence `[n, D]`. Attention-prefix prompts keep the
    /// output at `n` rows; appended prompts add their row count.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, input: Var, injection: Option<&PromptInjection>) -> Result<Var> {
        let cfg = &self.config;
        let (n, d) = tape.dims(input);
        if d != cfg.embed_dim {
            return Err(Error::ShapeMismatch {
                op: "backbone forward",
                lhs: tape.shape(input).to_vec(),
                rhs: vec![n, cfg.embed_dim],
            });
        }
        let empty = PromptInjection::default();
        let inj = injection.unwrap_or(&empty);
        if inj.layers.len() > cfg.num_layers {
            return Err(config_err(format!(
                "{} prompted layers exceed the backbone's {}",
                inj.layers.len(),
                cfg.num_layers
            )));
        }
        let mut x = input;
        if let Some(extra) = inj.appended {
            if tape.dims(extra).1 != d {
                return Err(Error::ShapeMismatch {
                    op: "appended prompts",
                    lhs: tape.shape(extra).to_vec(),
                    rhs: vec![0, d],
                });
            }
            let head = tape.slice_rows(x, 0, 1)?;
            x = if n > 1 {
                let tail = tape.slice_rows(x, 1, n - 1)?;
                tape.concat_rows(&[head, extra, tail])?
            } else {
                tape.concat_rows(&[head, extra])?
            };
        }
        for (l, block) in self.blocks.iter().enumerate() {
            x = block.forward(cfg, tape, x, inj.layers.get(l))?;
        }
        let (g, b) = (tape.leaf(&self.final_gamma), tape.leaf(&self.final_beta));
        tape.layer_norm(x, g, b, LN_EPS)
    }

    /// `embed` + `assemble` + `forward` in one call.
    pub fn encode<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        sample: &Sample,
        layout: &[Segment],
        injection: Option<&PromptInjection>,
    ) -> Result<Var> {
        let emb = self.embed(tape, sample)?;
        let input = self.assemble(tape, &emb, layout)?;
        self.forward(tape, input, injection)
    }

    /// Logits of the pretraining head on the joint cls output.
    pub fn pretrain_logits<'a>(&'a self, tape: &mut Tape<'a>, sample: &Sample) -> Result<Var> {
        let out = self.encode(tape, sample, &UNIFIED_LAYOUT, None)?;
        let cls = tape.row(out, 0)?;
        let (w, b) = (tape.leaf(&self.head_w), tape.leaf(&self.head_b));
        let logits = tape.matmul(cls, w)?;
        tape.add_row(logits, b)
    }

    fn pretrain_predict(&self, sample: &Sample) -> Result<usize> {
        let mut tape = Tape::new();
        let logits = self.pretrain_logits(&mut tape, sample)?;
        Ok(argmax(tape.value(logits)))
    }

    pub fn to_container(&self, meta: serde_json::Value) -> Container {
        let mut c = Container::new(
            CHECKPOINT_KIND,
            serde_json::json!({ "config": self.config, "frozen": self.frozen, "info": meta }),
        );
        c.insert_all("", self.named_params());
        c
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        let config: BackboneConfig = serde_json::from_value(
            c.meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing backbone config".into()))?,
        )?;
        let frozen = c.meta.get("frozen").and_then(|v| v.as_bool()).unwrap_or(true);
        let mut b = Self::init(config, 0)?;
        c.restore_into("", b.named_params_mut())?;
        if frozen {
            b.freeze();
        }
        Ok(b)
    }

    pub fn save(&self, path: &std::path::Path, meta: serde_json::Value) -> Result<()> {
        self.to_container(meta).write(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(Container::read(path, CHECKPOINT_KIND)?)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub holdout_fraction: f64,
    pub target_accuracy: f64,
    pub min_accuracy: f64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            batch_size: 16,
            max_epochs: 8,
            holdout_fraction: 0.2,
            target_accuracy: 0.9,
            min_accuracy: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub holdout_accuracy: f64,
    pub epochs: usize,
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
    pub reached_target: bool,
}

/// Trains a fresh backbone on joint-cls classification of `corpus` and
/// freezes it.
///
/// Stops once held-out accuracy reaches `target_accuracy` or after
/// `max_epochs`; a final accuracy below `min_accuracy` is an error.
pub fn pretrain(
    config: BackboneConfig,
    corpus: &[Sample],
    opts: &PretrainOptions,
    seed: u64,
) -> Result<(MultimodalBackbone, PretrainReport)> {
    if corpus.len() < 2 {
        return Err(Error::EmptyCorpus);
    }
    let mut backbone = MultimodalBackbone::init(config, seed)?;
    let shape = config.input_shape();
    for s in corpus {
        s.validate(&shape, config.pretrain_classes)?;
        if !s.is_complete() {
            return Err(Error::Sample(format!("{}: pretraining needs modality-complete samples", s.id)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((corpus.len() as f64 * opts.holdout_fraction).round() as usize).clamp(1, corpus.len() - 1);
    let (hold, train) = order.split_at(n_hold);
    let mut train = train.to_vec();

    let batch = opts.batch_size.max(1);
    let steps_per_epoch = train.len().div_ceil(batch);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: opts.lr,
            ..AdamWConfig::default()
        },
        steps_per_epoch * opts.max_epochs,
    )?;

    let mut report = PretrainReport {
        holdout_accuracy: 0.0,
        epochs: 0,
        steps: 0,
        epoch_losses: Vec::new(),
        reached_target: false,
    };
    for _epoch in 0..opts.max_epochs {
        train.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in train.chunks(batch) {
            let mut params: Vec<&mut Tensor> = Vec::new();
            let mut grads_all = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &corpus[i];
                let mut tape = Tape::new();
                let logits = backbone.pretrain_logits(&mut tape, s)?;
                let target = s.label.target(config.pretrain_classes)?;
                let loss = tape.cross_entropy(logits, &target, None)?;
                epoch_loss += tape.scalar(loss);
                grads_all.push(tape.backward(loss)?);
            }
            for (_, p) in backbone.named_params_mut() {
                p.zero_grad();
                for g in &grads_all {
                    p.accumulate(g, 1.0 / chunk.len() as f64);
                }
                params.push(p);
            }
            opt.step(&mut params)?;
            report.steps += 1;
        }
        report.epochs += 1;
        report.epoch_losses.push(epoch_loss / train.len() as f64);
        let correct = hold
            .iter()
            .map(|&i| backbone.pretrain_predict(&corpus[i]).map(|p| corpus[i].label.classes().contains(&p)))
            .collect::<Result<Vec<bool>>>()?
            .into_iter()
            .filter(|&c| c)
            .count();
        report.holdout_accuracy = correct as f64 / hold.len() as f64;
        log::info!(
            "pretrain epoch {}: loss {:.4}, held-out accuracy {:.3}",
            report.epochs,
            report.epoch_losses.last().unwrap(),
            report.holdout_accuracy
        );
        if report.holdout_accuracy >= opts.target_accuracy {
            report.reached_target = true;
            break;
        }
    }
    if report.holdout_accuracy < opts.min_accuracy {
        return Err(Error::UnusableBackbone {
            accuracy: report.holdout_accuracy,
            min: opts.min_accuracy,
        });
    }
    backbone.freeze();
    Ok((backbone, report))
}
