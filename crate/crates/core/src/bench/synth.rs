use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, CorpusHeader};
use super::sample::{InputShape, Label, Sample, PAD_TOKEN};
use crate::error::{config_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub shape: InputShape,
    /// Class-specific token ids per class.
    pub bag_size: usize,
    /// Probability that a text position is replaced by a uniform noise token.
    pub token_noise: f64,
    /// Std of the Gaussian noise added to every patch value.
    pub patch_noise: f64,
    /// Std of the visual prototype entries.
    pub prototype_std: f64,
    pub multi_label: bool,
    pub max_active: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            shape: InputShape {
                vocab_size: 512,
                max_text_len: 16,
                num_patches: 16,
                patch_dim: 16,
            },
            bag_size: 6,
            token_noise: 0.2,
            patch_noise: 0.5,
            prototype_std: 1.0,
            multi_label: false,
            max_active: 3,
        }
    }
}

impl SynthConfig {
    /// Largest class count whose bags fit disjointly in the vocabulary.
    pub fn class_capacity(&self) -> usize {
        (self.shape.vocab_size.saturating_sub(1)) / self.bag_size.max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototype {
    pub bag: Vec<u32>,
    pub patches: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub prototypes: Vec<ClassPrototype>,
    pub samples: Vec<Sample>,
}

impl SynthCorpus {
    /// Noiseless text for an active class set: bags interleaved and cycled
    /// to the full text length.
    pub fn prototype_text(&self, active: &[usize]) -> Vec<u32> {
        let a = active.len();
        (0..self.config.shape.max_text_len)
            .map(|i| {
                let bag = &self.prototypes[active[i % a]].bag;
                bag[(i / a) % bag.len()]
            })
            .collect()
    }

    /// Noiseless patches for an active class set: prototypes summed.
    pub fn prototype_patches(&self, active: &[usize]) -> Vec<Vec<f64>> {
        let s = &self.config.shape;
        let mut out = vec![vec![0.0; s.patch_dim]; s.num_patches];
        for &c in active {
            for (o, p) in out.iter_mut().zip(&self.prototypes[c].patches) {
                for (x, y) in o.iter_mut().zip(p) {
                    *x += y;
                }
            }
        }
        out
    }

    pub fn into_corpus(self) -> Corpus {
        Corpus {
            header: CorpusHeader {
                num_classes: self.prototypes.len(),
                patch_dim: self.config.shape.patch_dim,
                max_text_len: self.config.shape.max_text_len,
                multi_label: self.config.multi_label,
                num_patches: Some(self.config.shape.num_patches),
                vocab_size: Some(self.config.shape.vocab_size),
            },
            samples: self.samples,
        }
    }
}

/// Generates a modality-complete corpus in which each class has a token bag
/// and a visual prototype, both individually predictive of the class.
pub fn synth_generate(num_classes: usize, samples_per_class: usize, config: &SynthConfig, seed: u64) -> Result<SynthCorpus> {
    if num_classes < 2 {
        return Err(config_err("synthetic corpus needs at least 2 classes"));
    }
    if config.bag_size == 0 || samples_per_class == 0 {
        return Err(config_err("bag_size and samples_per_class must be >= 1"));
    }
    if num_classes > config.class_capacity() {
        return Err(config_err(format!(
            "{num_classes} classes with bags of {} exceed the vocabulary capacity of {}",
            config.bag_size,
            config.class_capacity()
        )));
    }
    if !(0.0..=1.0).contains(&config.token_noise) || !(0.0..).contains(&config.patch_noise) || !(0.0..).contains(&config.prototype_std) {
        return Err(config_err("noise levels must be non-negative (token noise at most 1)"));
    }
    if config.multi_label && !(1..=num_classes).contains(&config.max_active) {
        return Err(config_err("max_active must lie in 1..=num_classes"));
    }
    let shape = config.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut ids: Vec<u32> = (1..shape.vocab_size as u32).collect();
    ids.shuffle(&mut rng);
    let proto_dist = Normal::new(0.0, config.prototype_std).map_err(|e| config_err(e.to_string()))?;
    let prototypes: Vec<ClassPrototype> = (0..num_classes)
        .map(|c| ClassPrototype {
            bag: ids[c * config.bag_size..(c + 1) * config.bag_size].to_vec(),
            patches: (0..shape.num_patches)
                .map(|_| (0..shape.patch_dim).map(|_| proto_dist.sample(&mut rng)).collect())
                .collect(),
        })
        .collect();
    let mut corpus = SynthCorpus {
        config: *config,
        prototypes,
        samples: Vec::with_capacity(num_classes * samples_per_class),
    };

    let noise = Normal::new(0.0, config.patch_noise).map_err(|e| config_err(e.to_string()))?;
    let all: Vec<usize> = (0..num_classes).collect();
    for i in 0..samples_per_class {
        for c in 0..num_classes {
            let mut active = vec![c];
            if config.multi_label {
                let extra = rng.random_range(1..=config.max_active) - 1;
                let others: Vec<usize> = all.iter().copied().filter(|&o| o != c).collect();
                active.extend(others.choose_multiple(&mut rng, extra).copied());
            }
            let mut text = corpus.prototype_text(&active);
            for t in text.iter_mut() {
                if config.token_noise > 0.0 && rng.random_bool(config.token_noise) {
                    *t = rng.random_range(1..shape.vocab_size as u32);
                }
            }
            debug_assert!(text.iter().all(|&t| t != PAD_TOKEN));
            let mut patches = corpus.prototype_patches(&active);
            if config.patch_noise > 0.0 {
                for v in patches.iter_mut().flatten() {
                    *v += noise.sample(&mut rng);
                }
            }
            let label = if config.multi_label {
                // primary class first; it decides the sample's session
                let mut rest = active[1..].to_vec();
                rest.sort_unstable();
                Label::Multi([vec![c], rest].concat())
            } else {
                Label::Single(c)
            };
            corpus.samples.push(Sample {
                id: format!("c{c}-{i}"),
                text_tokens: text,
                patches,
                label,
                has_text: true,
                has_visual: true,
            });
        }
    }
    Ok(corpus)
}
