use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{masked_position, RelationInstance, TokenVocab};
use crate::error::{Error, Result};
use crate::neural::Model;

/// Ways of choosing the tokens that explain a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttributionMethod {
    /// The rationale the model itself pooled.
    Ours,
    Attention,
    Saliency,
    Occlusion,
    Greedy,
    AllBetween,
}

impl AttributionMethod {
    pub const ALL: [AttributionMethod; 6] = [
        AttributionMethod::Ours,
        AttributionMethod::Attention,
        AttributionMethod::Saliency,
        AttributionMethod::Occlusion,
        AttributionMethod::Greedy,
        AttributionMethod::AllBetween,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttributionMethod::Ours => "ours",
            AttributionMethod::Attention => "attention",
            AttributionMethod::Saliency => "saliency",
            AttributionMethod::Occlusion => "occlusion",
            AttributionMethod::Greedy => "greedy",
            AttributionMethod::AllBetween => "all-between",
        }
    }

    /// Whether the method takes a top-N budget.
    pub fn is_ranked(self) -> bool {
        matches!(
            self,
            AttributionMethod::Attention | AttributionMethod::Saliency | AttributionMethod::Occlusion
        )
    }
}

impl fmt::Display for AttributionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttributionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown attribution method {s:?}")))
    }
}

/// Context tokens ranked by descending score, lower index first on ties.
fn top_n(inst: &RelationInstance, scores: &[f64], n: usize) -> BTreeSet<usize> {
    let mut idx: Vec<usize> = (0..inst.len()).filter(|&i| !inst.in_entity(i)).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.into_iter().take(n).collect()
}

/// Tokens strictly between the two entity spans.
fn all_between(inst: &RelationInstance) -> BTreeSet<usize> {
    let (a, b) = if inst.subj.start <= inst.obj.start {
        (inst.subj, inst.obj)
    } else {
        (inst.obj, inst.subj)
    };
    (a.end + 1..b.start).filter(|&i| !inst.in_entity(i)).collect()
}

/// Explanation of the model's prediction on `inst`. `n` bounds the ranked
/// methods and is ignored by the others.
pub fn attribute(method: AttributionMethod, model: &Model, inst: &RelationInstance, n: usize) -> Result<BTreeSet<usize>> {
    match method {
        AttributionMethod::Ours => Ok(model.predict(inst)?.rationale),
        AttributionMethod::Attention => Ok(top_n(inst, &model.cls_attention(inst)?, n)),
        AttributionMethod::Saliency => Ok(top_n(inst, &model.embedding_gradients(inst)?, n)),
        AttributionMethod::Occlusion => Ok(top_n(inst, &occlusion_scores(model, inst)?, n)),
        AttributionMethod::Greedy => greedy(model, inst),
        AttributionMethod::AllBetween => Ok(all_between(inst)),
    }
}

/// Explanations for every instance, keyed by id.
pub fn rationales(
    method: AttributionMethod,
    model: &Model,
    instances: &[RelationInstance],
    n: usize,
) -> Result<BTreeMap<String, BTreeSet<usize>>> {
    instances
        .iter()
        .map(|i| Ok((i.id.clone(), attribute(method, model, i, n)?)))
        .collect()
}

/// Drop in the top class probability when a token is replaced by `[UNK]`;
/// the pooling mask stays that of the unperturbed input.
pub(crate) fn occlusion_scores(model: &Model, inst: &RelationInstance) -> Result<Vec<f64>> {
    let f = model.features(inst)?;
    let out = model.encode(&f);
    let mask = model.inference_mask(&out, &f);
    let probs = model.rc_distribution(&out, &mask, &f);
    let c = crate::neural::ops::argmax(&probs);
    Ok((0..inst.len())
        .map(|i| {
            if inst.in_entity(i) {
                return 0.0;
            }
            let mut ids = f.ids.clone();
            ids[masked_position(i)] = TokenVocab::UNK_ID;
            let o = model.encode_ids(&ids);
            probs[c] - model.rc_distribution(&o, &mask, &f)[c]
        })
        .collect())
}

/// Grows a token set one token at a time, always adding the token that most
/// raises the probability of the predicted class, until no token helps.
pub(crate) fn greedy(model: &Model, inst: &RelationInstance) -> Result<BTreeSet<usize>> {
    let f = model.features(inst)?;
    let out = model.encode(&f);
    let base = model.inference_mask(&out, &f);
    let c = crate::neural::ops::argmax(&model.rc_distribution(&out, &base, &f));
    let mut mask = vec![false; f.len()];
    let mut chosen = BTreeSet::new();
    let mut current = model.rc_distribution(&out, &mask, &f)[c];
    loop {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..inst.len()).filter(|&i| !inst.in_entity(i) && !chosen.contains(&i)) {
            let p = masked_position(i);
            mask[p] = true;
            let prob = model.rc_distribution(&out, &mask, &f)[c];
            mask[p] = false;
            if best.is_none_or(|(_, b)| prob > b) {
                best = Some((i, prob));
            }
        }
        match best {
            Some((i, prob)) if prob > current => {
                chosen.insert(i);
                mask[masked_position(i)] = true;
                current = prob;
            }
            _ => return Ok(chosen),
        }
    }
}
