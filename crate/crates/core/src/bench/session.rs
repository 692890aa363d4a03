use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::Corpus;
use super::sample::{InputShape, Modality, Sample};
use crate::error::{config_err, Error, Result};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingCase {
    TextMissing,
    ImageMissing,
    BothMissing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub index: usize,
    pub classes: Vec<usize>,
    pub eta: f64,
    pub case: MissingCase,
}

/// One session's class subset with its unmasked train/test samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionSplit {
    pub index: usize,
    pub classes: Vec<usize>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub spec: SessionSpec,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmmlStream {
    pub num_classes: usize,
    pub multi_label: bool,
    pub sessions: Vec<Session>,
}

/// Fraction of each class held out for testing.
pub const TEST_FRACTION: f64 = 0.2;

/// `round(pct% · n)` with halves rounded up.
pub fn round_percent(pct: f64, n: usize) -> usize {
    (pct * n as f64 / 100.0 + 0.5).floor() as usize
}

/// Composition of a masked set of `n` samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskCounts {
    /// Visual missing.
    pub text_only: usize,
    /// Text missing.
    pub image_only: usize,
    pub complete: usize,
}

pub fn mask_counts(n: usize, eta: f64, case: MissingCase) -> MaskCounts {
    let (text_only, image_only) = match case {
        MissingCase::TextMissing => (0, round_percent(eta, n)),
        MissingCase::ImageMissing => (round_percent(eta, n), 0),
        MissingCase::BothMissing => {
            let t = round_percent(eta / 2.0, n);
            // only binds at eta near 100 with odd n
            (t, round_percent(eta / 2.0, n).min(n - t))
        }
    };
    MaskCounts {
        text_only,
        image_only,
        complete: n - text_only - image_only,
    }
}

fn primary_class(s: &Sample) -> Result<usize> {
    s.label
        .classes()
        .first()
        .copied()
        .ok_or_else(|| Error::Sample(format!("{}: sample without a class cannot be assigned to a session", s.id)))
}

/// Shuffles classes by `seed`, partitions them contiguously into
/// `num_sessions` equal groups and splits each class 80/20 into train/test.
/// Multi-label samples follow their first (primary) class.
pub fn split_sessions(corpus: &Corpus, num_sessions: usize, seed: u64) -> Result<Vec<SessionSplit>> {
    let c = corpus.num_classes();
    if num_sessions == 0 || c < num_sessions {
        return Err(config_err(format!("cannot split {c} classes into {num_sessions} sessions")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<usize> = (0..c).collect();
    classes.shuffle(&mut rng);
    let per = c / num_sessions;
    if !c.is_multiple_of(num_sessions) {
        log::info!(
            "dropping {} trailing classes {:?} ({c} classes, {num_sessions} sessions)",
            c % num_sessions,
            &classes[per * num_sessions..]
        );
    }

    let mut by_class: Vec<Vec<&Sample>> = vec![Vec::new(); c];
    for s in &corpus.samples {
        by_class[primary_class(s)?].push(s);
    }
    (0..num_sessions)
        .map(|j| {
            let mut set = classes[j * per..(j + 1) * per].to_vec();
            set.sort_unstable();
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for &k in &set {
                let mut group = by_class[k].clone();
                group.shuffle(&mut rng);
                let n_test = round_percent(TEST_FRACTION * 100.0, group.len());
                test.extend(group[..n_test].iter().map(|&s| s.clone()));
                train.extend(group[n_test..].iter().map(|&s| s.clone()));
            }
            Ok(SessionSplit {
                index: j,
                classes: set,
                train,
                test,
            })
        })
        .collect()
}

fn shape_of(s: &Sample) -> InputShape {
    InputShape {
        vocab_size: usize::MAX,
        max_text_len: s.text_tokens.len(),
        num_patches: s.patches.len(),
        patch_dim: s.patches.first().map_or(0, |p| p.len()),
    }
}

/// Drops modalities from a uniformly chosen subset so the composition
/// matches [`mask_counts`] exactly. Inputs must be modality-complete.
pub fn apply_missing_mask(samples: &[Sample], eta: f64, case: MissingCase, seed: u64) -> Result<Vec<Sample>> {
    if !(0.0..=100.0).contains(&eta) {
        return Err(config_err(format!("missing ratio {eta} outside [0, 100]")));
    }
    if let Some(s) = samples.iter().find(|s| !s.is_complete()) {
        return Err(Error::Sample(format!("{}: masking expects modality-complete input", s.id)));
    }
    let counts = mask_counts(samples.len(), eta, case);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = samples.to_vec();
    for (rank, &i) in order.iter().enumerate() {
        let shape = shape_of(&out[i]);
        if rank < counts.image_only {
            out[i] = out[i].without(Modality::Text, &shape);
        } else if rank < counts.image_only + counts.text_only {
            out[i] = out[i].without(Modality::Visual, &shape);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub num_sessions: usize,
    pub eta: f64,
    pub case: MissingCase,
}

/// Splits a corpus into sessions and masks each session's train and test
/// sets from separate seed streams.
pub fn build_stream(corpus: &Corpus, cfg: &StreamConfig, split_seed: u64, mask_seed: u64) -> Result<CmmlStream> {
    let sessions = split_sessions(corpus, cfg.num_sessions, split_seed)?
        .into_iter()
        .map(|s| {
            let j = s.index as u64;
            Ok(Session {
                train: apply_missing_mask(&s.train, cfg.eta, cfg.case, derive_seed(mask_seed, "mask.train", j))?,
                test: apply_missing_mask(&s.test, cfg.eta, cfg.case, derive_seed(mask_seed, "mask.test", j))?,
                spec: SessionSpec {
                    index: s.index,
                    classes: s.classes,
                    eta: cfg.eta,
                    case: cfg.case,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CmmlStream {
        num_classes: corpus.num_classes(),
        multi_label: corpus.header.multi_label,
        sessions,
    })
}
