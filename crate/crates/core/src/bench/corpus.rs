//! Line-delimited JSON corpus files.
//!
//! The first line is a header; every following non-blank line is one record.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sample::{InputShape, Label, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub num_classes: usize,
    pub patch_dim: usize,
    pub max_text_len: usize,
    pub multi_label: bool,
    /// Taken from the first record when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_patches: Option<usize>,
    /// Token ids are only range-checked when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    #[serde(default)]
    text_tokens: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    patches: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<usize>>,
    has_text: bool,
    has_visual: bool,
}

impl Corpus {
    pub fn num_classes(&self) -> usize {
        self.header.num_classes
    }

    pub fn input_shape(&self) -> InputShape {
        InputShape {
            vocab_size: self.header.vocab_size.unwrap_or(u32::MAX as usize),
            max_text_len: self.header.max_text_len,
            num_patches: self.header.num_patches.unwrap_or(0),
            patch_dim: self.header.patch_dim,
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for s in &self.samples {
            let (label, labels) = match &s.label {
                Label::Single(c) => (Some(*c), None),
                Label::Multi(cs) => (None, Some(cs.clone())),
            };
            let rec = Record {
                id: s.id.clone(),
                text_tokens: s.text_tokens.clone(),
                patches: Some(s.patches.clone()),
                label,
                labels,
                has_text: s.has_text,
                has_visual: s.has_visual,
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(self.to_jsonl()?.as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(Error::EmptyCorpus)?;
        let header: CorpusHeader = serde_json::from_str(first).map_err(|e| Error::Corpus {
            line: 1,
            msg: format!("bad header: {e}"),
        })?;
        let mut corpus = Corpus {
            header,
            samples: Vec::new(),
        };
        for (i, line) in lines {
            let lineno = i + 1;
            let bad = |msg: String| Error::Corpus { line: lineno, msg };
            let rec: Record = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            let label = match (rec.label, rec.labels) {
                (Some(c), None) if !header.multi_label => Label::Single(c),
                (None, Some(cs)) if header.multi_label => Label::Multi(cs),
                _ => {
                    return Err(bad(format!(
                        "expected `{}` for a {} corpus",
                        if header.multi_label { "labels" } else { "label" },
                        if header.multi_label { "multi-label" } else { "single-label" }
                    )))
                }
            };
            let patches = match rec.patches {
                Some(p) => p,
                None if !rec.has_visual => match corpus.header.num_patches {
                    Some(_) => Sample::dummy_patches(&corpus.input_shape()),
                    None => return Err(bad("cannot infer the patch count from a record without patches".into())),
                },
                None => return Err(bad("missing `patches` on a record with has_visual=true".into())),
            };
            if corpus.header.num_patches.is_none() {
                corpus.header.num_patches = Some(patches.len());
            }
            let sample = Sample {
                id: rec.id,
                text_tokens: rec.text_tokens,
                patches,
                label,
                has_text: rec.has_text,
                has_visual: rec.has_visual,
            };
            sample
                .validate(&corpus.input_shape(), header.num_classes)
                .map_err(|e| bad(e.to_string()))?;
            corpus.samples.push(sample);
        }
        if corpus.samples.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(corpus)
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    Corpus::parse(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::synth::{synth_generate, SynthConfig};

    const HEADER: &str = r#"{"num_classes":2,"patch_dim":2,"max_text_len":3,"multi_label":false}"#;

    #[test]
    fn synthetic_corpus_round_trips_bit_exactly() {
        let c = synth_generate(3, 2, &SynthConfig::default(), 4).unwrap().into_corpus();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        c.write(&p).unwrap();
        assert_eq!(load_corpus(&p).unwrap(), c);
    }

    #[test]
    fn missing_patches_with_visual_present_is_rejected() {
        let text = format!("{HEADER}\n{}\n", r#"{"id":"a","text_tokens":[1],"label":0,"has_text":true,"has_visual":true}"#);
        assert!(matches!(Corpus::parse(&text), Err(Error::Corpus { line: 2, .. })));
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(matches!(Corpus::parse(""), Err(Error::EmptyCorpus)));
        assert!(matches!(Corpus::parse(&format!("{HEADER}\n")), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let good = r#"{"id":"a","text_tokens":[1],"patches":[[0.0,0.0]],"label":0,"has_text":true,"has_visual":true}"#;
        let oob = r#"{"id":"b","text_tokens":[1],"patches":[[0.0,0.0]],"label":5,"has_text":true,"has_visual":true}"#;
        let text = format!("{HEADER}\n{good}\n{oob}\n");
        assert!(matches!(Corpus::parse(&text), Err(Error::Corpus { line: 3, .. })));
        let text = format!("{HEADER}\n{good}\nnot json\n");
        assert!(matches!(Corpus::parse(&text), Err(Error::Corpus { line: 3, .. })));
    }
}
