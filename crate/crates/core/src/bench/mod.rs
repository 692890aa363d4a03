//! Benchmark construction: samples, synthetic corpora, session streams and
//! missing-modality masking.

mod corpus;
mod sample;
mod session;
mod synth;

pub use corpus::{load_corpus, Corpus, CorpusHeader};
pub use sample::{InputShape, Label, Modality, Sample, DUMMY_PIXEL, PAD_TOKEN};
pub use session::{
    apply_missing_mask, build_stream, mask_counts, round_percent, split_sessions, CmmlStream, MaskCounts, MissingCase,
    Session, SessionSpec, SessionSplit, StreamConfig, TEST_FRACTION,
};
pub use synth::{synth_generate, ClassPrototype, SynthConfig, SynthCorpus};
