//! Turning local rationales into global syntactic rules.
//!
//! A rule is built from the longest contiguous run of rationale tokens: the
//! run's words become the trigger, and the shortest dependency paths from
//! the run's shallowest token to each entity become the argument paths.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{shortest_dep_path, RelationInstance};
use crate::error::{Error, Result};
use crate::labels::ExplanationLabels;
use crate::neural::{Ablation, Model};
use crate::rules::matcher::run_head;
use crate::rules::{matches_any, Argument, Provenance, Rule, RuleBody, RuleSet, SyntacticPattern, TriggerConstraint};
use crate::train::latent_explanation;
use crate::NO_RELATION;

/// Where labels and rationales come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenMode {
    /// Gold relations of training instances with rule or latent rationales.
    TrainGold,
    /// Model predictions on unlabeled (test) instances.
    TestPredicted,
}

impl GenMode {
    fn provenance(self) -> Provenance {
        match self {
            GenMode::TrainGold => Provenance::GenTrain,
            GenMode::TestPredicted => Provenance::GenTest,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            GenMode::TrainGold => "gen-train",
            GenMode::TestPredicted => "gen-test",
        }
    }
}

impl std::str::FromStr for GenMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "gold" | "train-gold" => Ok(GenMode::TrainGold),
            "predicted" | "test-predicted" => Ok(GenMode::TestPredicted),
            other => Err(Error::Config(format!("unknown generation mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Only build rules for instances no manual rule matches.
    pub skip_if_manual_match: bool,
    pub dedupe: bool,
    /// Thresholds for latent rationales of unannotated training instances.
    pub t_low: f64,
    pub t_up: f64,
    pub candidate_cap: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            skip_if_manual_match: true,
            dedupe: true,
            t_low: 0.2,
            t_up: 0.8,
            candidate_cap: 256,
        }
    }
}

/// Maximal runs of consecutive indices.
fn runs(tokens: &BTreeSet<usize>) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = Vec::new();
    for &i in tokens {
        match out.last_mut() {
            Some(r) if r.end == i => r.end = i + 1,
            _ => out.push(i..i + 1),
        }
    }
    out
}

fn distance_to_subject(inst: &RelationInstance, run: &std::ops::Range<usize>) -> usize {
    let s = inst.subj;
    if run.end <= s.start {
        s.start - (run.end - 1)
    } else if run.start > s.end {
        run.start - s.end
    } else {
        0
    }
}

/// The run a rule is built from: longest first, then nearest the subject,
/// then leftmost.
pub fn trigger_run(inst: &RelationInstance, rationale: &BTreeSet<usize>) -> Option<std::ops::Range<usize>> {
    let tokens: BTreeSet<usize> = rationale
        .iter()
        .copied()
        .filter(|&i| i < inst.len() && !inst.in_entity(i))
        .collect();
    runs(&tokens)
        .into_iter()
        .min_by_key(|r| (std::cmp::Reverse(r.len()), distance_to_subject(inst, r), r.start))
}

/// Whether a form can be written as one trigger word.
fn writable(form: &str) -> bool {
    !form.is_empty() && !form.contains(|c: char| c.is_whitespace() || c == '|')
}

/// Builds one syntactic rule from a rationale. Returns `None` when the
/// rationale has no context token, a trigger word cannot be written, or
/// `manual` is given and one of its rules already matches the instance.
pub fn generate_rule(
    inst: &RelationInstance,
    label: &str,
    rationale: &BTreeSet<usize>,
    manual: Option<&RuleSet>,
    id: &str,
    provenance: Provenance,
) -> Option<Rule> {
    if label == NO_RELATION || manual.is_some_and(|m| matches_any(m, inst)) {
        return None;
    }
    let run = trigger_run(inst, rationale)?;
    let forms: Vec<&str> = run.clone().map(|i| inst.tokens[i].form.as_str()).collect();
    if !forms.iter().all(|f| writable(f)) {
        return None;
    }
    let head = run_head(&inst.depths(), run);
    let subj: Vec<usize> = inst.subj.indices().collect();
    let obj: Vec<usize> = inst.obj.indices().collect();
    let (subj_path, _) = shortest_dep_path(inst, &[head], &subj);
    let (obj_path, _) = shortest_dep_path(inst, &[head], &obj);
    if subj_path.is_empty() || obj_path.is_empty() {
        return None;
    }
    Some(Rule {
        id: id.to_string(),
        label: label.to_string(),
        provenance,
        body: RuleBody::Syntactic(SyntacticPattern {
            trigger: TriggerConstraint::word(&forms),
            subject: Argument {
                entity_type: inst.subj_type.clone(),
                path: subj_path,
            },
            object: Argument {
                entity_type: inst.obj_type.clone(),
                path: obj_path,
            },
        }),
    })
}

/// Label and rationale the generator uses for one instance.
fn source(
    model: &Model,
    inst: &RelationInstance,
    mode: GenMode,
    annotations: &BTreeMap<String, ExplanationLabels>,
    cfg: &GenConfig,
) -> Result<Option<(String, BTreeSet<usize>)>> {
    match mode {
        GenMode::TestPredicted => {
            let p = model.predict(inst)?;
            Ok((p.label != NO_RELATION).then_some((p.label, p.rationale)))
        }
        GenMode::TrainGold => {
            if !inst.is_positive() {
                return Ok(None);
            }
            if let Some(a) = annotations.get(&inst.id) {
                return Ok(Some((inst.relation.clone(), a.tokens())));
            }
            let Some(class) = model.class_index(&inst.relation) else {
                return Ok(None);
            };
            if model.ablation == Ablation::Ec {
                return Ok(Some((inst.relation.clone(), BTreeSet::new())));
            }
            let f = model.features(inst)?;
            let tc = crate::train::TrainConfig {
                t_low: cfg.t_low,
                t_up: cfg.t_up,
                candidate_cap: cfg.candidate_cap,
                ..Default::default()
            };
            let (mask, _) = latent_explanation(model, &f, class, &tc);
            let tokens = crate::train::mask_tokens(inst, &mask).into_iter().collect();
            Ok(Some((inst.relation.clone(), tokens)))
        }
    }
}

/// Rules for every usable instance of `instances`, in instance order, each
/// paired with the index of the instance it came from. Nothing is deduplicated.
pub fn generate_sourced_rules(
    model: &Model,
    instances: &[RelationInstance],
    manual: &RuleSet,
    mode: GenMode,
    annotations: &BTreeMap<String, ExplanationLabels>,
    cfg: &GenConfig,
) -> Result<Vec<(usize, Rule)>> {
    let manual = cfg.skip_if_manual_match.then_some(manual);
    let mut rules = Vec::new();
    for (k, inst) in instances.iter().enumerate() {
        let Some((label, rationale)) = source(model, inst, mode, annotations, cfg)? else {
            continue;
        };
        let id = format!("{}-{}", mode.prefix(), rules.len() + 1);
        if let Some(r) = generate_rule(inst, &label, &rationale, manual, &id, mode.provenance()) {
            rules.push((k, r));
        }
    }
    Ok(rules)
}

/// Rules for every usable instance of `instances`, in instance order.
pub fn generate_ruleset(
    model: &Model,
    instances: &[RelationInstance],
    manual: &RuleSet,
    mode: GenMode,
    annotations: &BTreeMap<String, ExplanationLabels>,
    cfg: &GenConfig,
) -> Result<RuleSet> {
    let rules = generate_sourced_rules(model, instances, manual, mode, annotations, cfg)?;
    let set = RuleSet::new(rules.into_iter().map(|(_, r)| r).collect())?;
    Ok(if cfg.dedupe { set.dedupe() } else { set })
}

/// Concatenates rule sets, drops repeated content and renames clashing ids
/// by appending `-2`, `-3`, and so on.
pub fn merge_rulesets<'a>(sets: impl IntoIterator<Item = &'a RuleSet>) -> RuleSet {
    let all = RuleSet {
        rules: sets.into_iter().flat_map(|s| s.rules.iter().cloned()).collect(),
    }
    .dedupe();
    let mut taken: BTreeSet<String> = BTreeSet::new();
    let mut counts: HashMap<String, usize> = HashMap::new();
    let rules = all
        .rules
        .into_iter()
        .map(|mut r| {
            if !taken.insert(r.id.clone()) {
                let base = r.id.clone();
                let n = counts.entry(base.clone()).or_insert(1);
                loop {
                    *n += 1;
                    let candidate = format!("{base}-{n}");
                    if taken.insert(candidate.clone()) {
                        r.id = candidate;
                        break;
                    }
                }
            }
            r
        })
        .collect();
    RuleSet { rules }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::corpus::fixtures::{born_in, walkthrough};
    use crate::corpus::synth::{gen_synthetic, GenSpec};
    use crate::rules::{match_rule, parse_rules_str};

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn walkthrough_rule() {
        let inst = walkthrough();
        let r = generate_rule(&inst, "per:children", &set(&[2]), None, "g1", Provenance::GenTrain).unwrap();
        let text = r.to_string();
        assert!(text.contains("trigger: word=daughter"), "{text}");
        assert!(text.contains("subject: SUBJ_PERSON = >nmod:poss"), "{text}");
        assert!(text.contains("object: OBJ_PERSON = >appos"), "{text}");
        assert_eq!(match_rule(&r, &inst).unwrap().trigger_tokens, set(&[2]));
    }

    #[test]
    fn born_in_rule_uses_shallowest_token() {
        let inst = born_in();
        let r = generate_rule(&inst, "per:city_of_birth", &set(&[1, 2, 3]), None, "g", Provenance::GenTest).unwrap();
        let RuleBody::Syntactic(p) = &r.body else { panic!("syntactic rule expected") };
        assert_eq!(p.trigger, TriggerConstraint::word(&["was", "born", "in"]));
        assert_eq!(p.subject.path.to_string(), ">nsubj:pass");
        assert_eq!(p.object.path.to_string(), ">obl");
    }

    #[test]
    fn run_choice_prefers_length_then_subject_distance() {
        let inst = walkthrough();
        // Runs {2,3} and {6,7}: equal length, {2,3} is nearer the subject.
        assert_eq!(trigger_run(&inst, &set(&[2, 3, 6, 7])), Some(2..4));
        assert_eq!(trigger_run(&inst, &set(&[2, 6, 7])), Some(6..8));
        // Entity tokens never join a run.
        assert_eq!(trigger_run(&inst, &set(&[0, 4])), None);
    }

    #[test]
    fn empty_rationale_and_negative_label_give_nothing() {
        let inst = born_in();
        assert!(generate_rule(&inst, "per:city_of_birth", &set(&[]), None, "g", Provenance::GenTrain).is_none());
        assert!(generate_rule(&inst, NO_RELATION, &set(&[2]), None, "g", Provenance::GenTrain).is_none());
    }

    #[test]
    fn manual_match_skips_instance() {
        let inst = born_in();
        let manual = parse_rules_str(
            "id: m\nkind: surface\nlabel: per:city_of_birth\npattern: SUBJ-PER was born in OBJ-CITY\n",
        )
        .unwrap();
        assert!(generate_rule(&inst, "per:city_of_birth", &set(&[2]), Some(&manual), "g", Provenance::GenTrain).is_none());
        assert!(generate_rule(&inst, "per:city_of_birth", &set(&[2]), None, "g", Provenance::GenTrain).is_some());
    }

    #[test]
    fn merge_dedupes_and_renames() {
        let inst = born_in();
        let a = generate_rule(&inst, "per:city_of_birth", &set(&[2]), None, "r", Provenance::GenTrain).unwrap();
        let mut b = generate_rule(&inst, "per:city_of_birth", &set(&[3]), None, "r", Provenance::GenTest).unwrap();
        let one = RuleSet { rules: vec![a.clone()] };
        assert_eq!(merge_rulesets([&one, &one]), one);
        let two = RuleSet { rules: vec![b.clone()] };
        let merged = merge_rulesets([&one, &two]);
        assert_eq!(merged.len(), 2);
        assert_eq!(merged.rules[1].id, "r-2");
        b.id = "r-2".into();
        assert_eq!(merged.rules[1], b);
        RuleSet::new(merged.rules).unwrap();
    }

    fn small_synthetic() -> crate::corpus::synth::Synthetic {
        let mut spec = GenSpec::builtin();
        spec.train = 120;
        spec.dev = 10;
        spec.test = 10;
        gen_synthetic(&spec, 4).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn generated_rules_match_their_source_and_round_trip(k in 0usize..120, picks in proptest::collection::btree_set(0usize..20, 1..5)) {
            let syn = small_synthetic();
            let inst = &syn.corpus.train[k];
            let rationale: BTreeSet<usize> = picks.into_iter().filter(|&i| i < inst.len()).collect();
            let label = if inst.is_positive() { inst.relation.clone() } else { "per:spouse".into() };
            if let Some(r) = generate_rule(inst, &label, &rationale, None, "g", Provenance::GenTrain) {
                let m = match_rule(&r, inst);
                prop_assert!(m.is_some());
                prop_assert_eq!(m.unwrap().label, label);
                let back = parse_rules_str(&RuleSet { rules: vec![r.clone()] }.to_rule_file()).unwrap();
                prop_assert_eq!(&back.rules[0], &r);
            } else {
                prop_assert!(trigger_run(inst, &rationale).is_none());
            }
        }
    }
}
