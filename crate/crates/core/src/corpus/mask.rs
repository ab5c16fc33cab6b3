use super::{obj_symbol, subj_symbol, RelationInstance, TokenVocab};

/// Encoder input: `[CLS]` followed by one id per original token, with entity
/// tokens replaced position by position with their typed mask symbol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub ids: Vec<usize>,
    /// Original token index for every masked position; `None` for `[CLS]`.
    pub token_map: Vec<Option<usize>>,
}

impl MaskedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Masked position of original token `i`.
#[inline]
pub fn masked_position(i: usize) -> usize {
    i + 1
}

pub fn mask_entities(instance: &RelationInstance, vocab: &TokenVocab) -> MaskedSequence {
    let subj = vocab.id_or_unk(&subj_symbol(&instance.subj_type));
    let obj = vocab.id_or_unk(&obj_symbol(&instance.obj_type));
    let mut ids = Vec::with_capacity(instance.len() + 1);
    let mut token_map = Vec::with_capacity(instance.len() + 1);
    ids.push(TokenVocab::CLS_ID);
    token_map.push(None);
    for (i, tok) in instance.tokens.iter().enumerate() {
        let id = if instance.subj.contains(i) {
            subj
        } else if instance.obj.contains(i) {
            obj
        } else {
            vocab.id_or_unk(&tok.form)
        };
        ids.push(id);
        token_map.push(Some(i));
    }
    MaskedSequence { ids, token_map }
}
