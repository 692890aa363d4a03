use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token id reserved for padding; the dummy text is all padding.
pub const PAD_TOKEN: u32 = 0;

/// Value of every pixel in the dummy image.
pub const DUMMY_PIXEL: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Visual,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::Text => Modality::Visual,
            Modality::Visual => Modality::Text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Single(usize),
    Multi(Vec<usize>),
}

impl Label {
    pub fn classes(&self) -> &[usize] {
        match self {
            Label::Single(c) => std::slice::from_ref(c),
            Label::Multi(cs) => cs,
        }
    }

    /// Dense target vector over `num_classes`.
    pub fn target(&self, num_classes: usize) -> Result<Vec<f64>> {
        let mut t = vec![0.0; num_classes];
        for &c in self.classes() {
            if c >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: c,
                    classes: num_classes,
                });
            }
            t[c] = 1.0;
        }
        Ok(t)
    }

    pub fn is_multi(&self) -> bool {
        matches!(self, Label::Multi(_))
    }
}

/// Fixed input geometry shared by data and backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub num_patches: usize,
    pub patch_dim: usize,
}

/// One multimodal record. Missing modalities hold the canonical dummy.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub text_tokens: Vec<u32>,
    pub patches: Vec<Vec<f64>>,
    pub label: Label,
    pub has_text: bool,
    pub has_visual: bool,
}

impl Sample {
    pub fn dummy_patches(shape: &InputShape) -> Vec<Vec<f64>> {
        vec![vec![DUMMY_PIXEL; shape.patch_dim]; shape.num_patches]
    }

    pub fn is_complete(&self) -> bool {
        self.has_text && self.has_visual
    }

    /// The absent modality, if exactly one is absent.
    pub fn missing(&self) -> Option<Modality> {
        match (self.has_text, self.has_visual) {
            (false, true) => Some(Modality::Text),
            (true, false) => Some(Modality::Visual),
            _ => None,
        }
    }

    pub fn has(&self, m: Modality) -> bool {
        match m {
            Modality::Text => self.has_text,
            Modality::Visual => self.has_visual,
        }
    }

    /// Replaces one modality with its dummy.
    pub fn without(&self, m: Modality, shape: &InputShape) -> Sample {
        let mut s = self.clone();
        match m {
            Modality::Text => {
                s.text_tokens.clear();
                s.has_text = false;
            }
            Modality::Visual => {
                s.patches = Self::dummy_patches(shape);
                s.has_visual = false;
            }
        }
        s
    }

    /// Text ids padded to `max_text_len` with [`PAD_TOKEN`].
    pub fn padded_tokens(&self, max_text_len: usize) -> Vec<u32> {
        let mut t = self.text_tokens.clone();
        t.resize(max_text_len, PAD_TOKEN);
        t
    }

    pub fn flat_patches(&self) -> Vec<f64> {
        self.patches.concat()
    }

    pub fn validate(&self, shape: &InputShape, num_classes: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Sample(format!("{}: {msg}", self.id)));
        if !self.has_text && !self.has_visual {
            return bad("both modalities missing".into());
        }
        if self.text_tokens.len() > shape.max_text_len {
            return bad(format!(
                "{} text tokens exceed max_text_len {}",
                self.text_tokens.len(),
                shape.max_text_len
            ));
        }
        if let Some(&t) = self.text_tokens.iter().find(|&&t| t as usize >= shape.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: t,
                vocab: shape.vocab_size,
            });
        }
        if self.patches.len() != shape.num_patches || self.patches.iter().any(|p| p.len() != shape.patch_dim) {
            return bad(format!(
                "patches must be {} x {}",
                shape.num_patches, shape.patch_dim
            ));
        }
        if !self.has_text && !self.text_tokens.is_empty() {
            return bad("missing text must be the empty dummy".into());
        }
        if !self.has_visual && self.patches.iter().flatten().any(|&v| v != DUMMY_PIXEL) {
            return bad("missing image must be the all-ones dummy".into());
        }
        if self.label.classes().is_empty() && !self.label.is_multi() {
            return bad("empty label".into());
        }
        for &c in self.label.classes() {
            if c >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: c,
                    classes: num_classes,
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> InputShape {
        InputShape {
            vocab_size: 10,
            max_text_len: 4,
            num_patches: 2,
            patch_dim: 3,
        }
    }

    fn sample() -> Sample {
        Sample {
            id: "s".into(),
            text_tokens: vec![1, 2],
            patches: vec![vec![0.5; 3]; 2],
            label: Label::Single(1),
            has_text: true,
            has_visual: true,
        }
    }

    #[test]
    fn dropping_modalities_yields_canonical_dummies() {
        let s = sample();
        let t = s.without(Modality::Visual, &shape());
        assert_eq!(t.missing(), Some(Modality::Visual));
        assert!(t.patches.iter().flatten().all(|&v| v == 1.0));
        let v = s.without(Modality::Text, &shape());
        assert!(v.text_tokens.is_empty());
        assert_eq!(v.padded_tokens(4), vec![PAD_TOKEN; 4]);
        t.validate(&shape(), 3).unwrap();
        v.validate(&shape(), 3).unwrap();
    }

    #[test]
    fn validation_rejects_bad_samples() {
        let mut s = sample();
        s.has_text = false;
        s.has_visual = false;
        assert!(s.validate(&shape(), 3).is_err());
        let mut s = sample();
        s.text_tokens = vec![11];
        assert!(s.validate(&shape(), 3).is_err());
        let s = sample();
        assert!(matches!(s.validate(&shape(), 1), Err(Error::LabelOutOfRange { .. })));
    }
}
