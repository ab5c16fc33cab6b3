use std::collections::{BTreeMap, BTreeSet};

use super::{match_rule, RuleSet};
use crate::corpus::{Corpus, RelationInstance};
use crate::labels::{ExplanationLabels, LabelSource};
use crate::NO_RELATION;

/// Rule-derived explanation labels for the training partition.
///
/// A positive instance is labeled when at least one rule with its gold label
/// matches; the 1s are the union of those matches' trigger tokens.
pub fn annotate_explanations(rules: &RuleSet, corpus: &Corpus) -> BTreeMap<String, ExplanationLabels> {
    annotate_instances(rules, &corpus.train)
}

pub fn annotate_instances(
    rules: &RuleSet,
    instances: &[RelationInstance],
) -> BTreeMap<String, ExplanationLabels> {
    let mut out = BTreeMap::new();
    for inst in instances.iter().filter(|i| i.is_positive()) {
        let mut tokens = BTreeSet::new();
        let mut matched = false;
        for rule in rules.iter().filter(|r| r.label == inst.relation) {
            if let Some(m) = match_rule(rule, inst) {
                matched = true;
                tokens.extend(m.trigger_tokens);
            }
        }
        if matched {
            out.insert(
                inst.id.clone(),
                ExplanationLabels::from_tokens(inst, &tokens, LabelSource::Rule),
            );
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RulePrediction {
    pub label: String,
    pub rule_id: Option<String>,
    pub trigger_tokens: BTreeSet<usize>,
}

/// First matching rule in set order wins; no match means `no_relation`.
pub fn predict_with_rules(rules: &RuleSet, inst: &RelationInstance) -> String {
    rule_predictions(rules, inst).label
}

pub fn rule_predictions(rules: &RuleSet, inst: &RelationInstance) -> RulePrediction {
    rules
        .iter()
        .find_map(|r| match_rule(r, inst))
        .map(|m| RulePrediction {
            label: m.label,
            rule_id: Some(m.rule_id),
            trigger_tokens: m.trigger_tokens,
        })
        .unwrap_or_else(|| RulePrediction {
            label: NO_RELATION.to_string(),
            rule_id: None,
            trigger_tokens: BTreeSet::new(),
        })
}
