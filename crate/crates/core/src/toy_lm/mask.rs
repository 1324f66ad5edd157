use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::losses::IGNORE_INDEX;

/// Token ids plus the positions whose tokens are training targets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedExample {
    tokens: Vec<usize>,
    supervised: Vec<bool>,
}

impl TokenizedExample {
    pub fn new(tokens: Vec<usize>, supervised: Vec<bool>) -> Result<Self, ModelError> {
        if tokens.len() != supervised.len() {
            return Err(ModelError::MaskLength {
                mask: supervised.len(),
                tokens: tokens.len(),
            });
        }
        if tokens.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        // Position 0 has no left context, so it can never be predicted.
        if supervised[0] || !supervised.iter().any(|&s| s) {
            return Err(ModelError::EmptySupervision);
        }
        Ok(Self { tokens, supervised })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn supervised(&self) -> &[bool] {
        &self.supervised
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_supervised(&self) -> usize {
        self.supervised.iter().filter(|&&s| s).count()
    }

    /// Next-token labels: `labels[t]` is `tokens[t + 1]` when that position is
    /// supervised, otherwise the ignore sentinel.
    pub fn labels(&self) -> Vec<i64> {
        (0..self.tokens.len())
            .map(|t| match self.supervised.get(t + 1) {
                Some(true) => self.tokens[t + 1] as i64,
                _ => IGNORE_INDEX,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    Bos,
    Template,
    Question,
    Answer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub len: usize,
}

impl Segment {
    pub fn new(kind: SegmentKind, len: usize) -> Self {
        Self { kind, len }
    }
}

/// Supervises answer positions except the first one of each answer span,
/// which carries only the response style.
pub fn apply_mask(tokens: Vec<usize>, layout: &[Segment]) -> Result<TokenizedExample, ModelError> {
    let covered: usize = layout.iter().map(|s| s.len).sum();
    if covered != tokens.len() {
        return Err(ModelError::LayoutLength {
            layout: covered,
            tokens: tokens.len(),
        });
    }
    let mut supervised = Vec::with_capacity(tokens.len());
    for seg in layout {
        let answer = seg.kind == SegmentKind::Answer;
        supervised.extend((0..seg.len).map(|i| answer && i > 0));
    }
    TokenizedExample::new(tokens, supervised)
}
