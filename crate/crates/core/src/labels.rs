//! Token-level explanation labels.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{masked_position, RelationInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelSource {
    Rule,
    Latent,
    Predicted,
}

/// One bit per masked position (`[CLS]` first). Entity and `[CLS]` positions
/// are always 0.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExplanationLabels {
    pub bits: Vec<bool>,
    pub source: LabelSource,
}

impl ExplanationLabels {
    pub fn zeros(inst: &RelationInstance, source: LabelSource) -> Self {
        ExplanationLabels {
            bits: vec![false; inst.len() + 1],
            source,
        }
    }

    /// Labels from original token indices; entity tokens are dropped.
    pub fn from_tokens<'a>(
        inst: &RelationInstance,
        tokens: impl IntoIterator<Item = &'a usize>,
        source: LabelSource,
    ) -> Self {
        let mut out = Self::zeros(inst, source);
        for &i in tokens {
            if i < inst.len() && !inst.in_entity(i) {
                out.bits[masked_position(i)] = true;
            }
        }
        out
    }

    /// Original token indices labeled 1.
    pub fn tokens(&self) -> BTreeSet<usize> {
        self.bits
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, b)| **b)
            .map(|(p, _)| p - 1)
            .collect()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count_ones() == 0
    }

    pub fn with_source(mut self, source: LabelSource) -> Self {
        self.source = source;
        self
    }

    pub fn as_u8(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| b as u8).collect()
    }
}

/// Masked positions that may carry a 1: not `[CLS]` and not inside an entity.
pub fn context_mask(inst: &RelationInstance) -> Vec<bool> {
    let mut m = vec![false; inst.len() + 1];
    for i in 0..inst.len() {
        m[masked_position(i)] = !inst.in_entity(i);
    }
    m
}
