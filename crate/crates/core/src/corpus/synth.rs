//! Template-driven synthetic corpus with a matching seeded rule set.
//!
//! Every relation draws its trigger word either from a *seeded* bank, which
//! the generated manual rules recognise, or from an *unseeded* bank that no
//! manual rule mentions. The share of positives built from seeded triggers is
//! fixed by `rule_coverage`, so the manual rules annotate that share exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{shortest_dep_path, Corpus, RelationInstance, Span, Token};
use crate::error::{Error, Result};
use crate::eval::HumanAnnotation;
use crate::rules::{
    Argument, Provenance, Rule, RuleBody, RuleSet, SyntacticPattern, TriggerConstraint, TriggerField,
};
use crate::NO_RELATION;

/// Built-in generator configuration (eight relations, 2000/400/500).
pub const DEFAULT_SPEC: &str = include_str!("../../data/synthetic.toml");

fn default_negative_fraction() -> f64 {
    0.3
}

fn default_coverage() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    #[serde(default = "default_negative_fraction")]
    pub negative_fraction: f64,
    /// Share of positive instances whose trigger comes from a seeded bank.
    #[serde(default = "default_coverage")]
    pub rule_coverage: f64,
    /// Name bank per entity type; a name may span several tokens.
    pub entities: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub fillers: Vec<String>,
    #[serde(default)]
    pub frames: BTreeMap<String, Vec<String>>,
    #[serde(rename = "relation")]
    pub relations: Vec<RelationSpec>,
    #[serde(default, rename = "distractor")]
    pub distractors: Vec<DistractorSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationSpec {
    pub name: String,
    pub subj_type: String,
    pub obj_type: String,
    #[serde(default)]
    pub seeded: Vec<String>,
    #[serde(default)]
    pub unseeded: Vec<String>,
    #[serde(default)]
    pub frame: Option<String>,
    #[serde(default)]
    pub templates: Vec<String>,
}

/// Negative sentences: same frames, triggers that express no relation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistractorSpec {
    pub subj_type: String,
    pub obj_type: String,
    #[serde(default)]
    pub triggers: Vec<String>,
    #[serde(default)]
    pub frame: Option<String>,
    #[serde(default)]
    pub templates: Vec<String>,
}

impl GenSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("generator spec: {e}")))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn builtin() -> Self {
        Self::from_toml_str(DEFAULT_SPEC).expect("built-in spec parses")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Slot {
    Literal(String),
    Subj,
    Obj,
    Trigger,
    Filler,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct TemplateToken {
    slot: Slot,
    head: Option<usize>,
    deprel: String,
    pos: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Template {
    tokens: Vec<TemplateToken>,
}

impl Template {
    fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut tokens = Vec::new();
        for item in text.split_whitespace() {
            let parts: Vec<&str> = item.split('/').collect();
            if !(3..=4).contains(&parts.len()) || parts[0].is_empty() || parts[2].is_empty() {
                return Err(format!("bad template token {item:?}"));
            }
            let head: usize = parts[1]
                .parse()
                .map_err(|_| format!("bad head in {item:?}"))?;
            let slot = match parts[0] {
                "{S}" => Slot::Subj,
                "{O}" => Slot::Obj,
                "{T}" => Slot::Trigger,
                "{A}" => Slot::Filler,
                w => Slot::Literal(w.to_string()),
            };
            tokens.push(TemplateToken {
                slot,
                head: head.checked_sub(1),
                deprel: parts[2].to_string(),
                pos: parts.get(3).map(|p| p.to_string()),
            });
        }
        let n = tokens.len();
        if tokens.iter().any(|t| t.head.is_some_and(|h| h >= n)) {
            return Err(format!("head out of range in {text:?}"));
        }
        let count = |s: Slot| tokens.iter().filter(|t| t.slot == s).count();
        if count(Slot::Subj) != 1 || count(Slot::Obj) != 1 {
            return Err(format!("template needs one {{S}} and one {{O}}: {text:?}"));
        }
        if count(Slot::Trigger) > 1 {
            return Err(format!("template has several {{T}} slots: {text:?}"));
        }
        Ok(Template { tokens })
    }

    fn has(&self, slot: &Slot) -> bool {
        self.tokens.iter().any(|t| t.slot == *slot)
    }

    fn index_of(&self, slot: &Slot) -> Option<usize> {
        self.tokens.iter().position(|t| t.slot == *slot)
    }
}

struct Entry<'a> {
    label: &'a str,
    subj_type: &'a str,
    obj_type: &'a str,
    templates: Vec<Template>,
}

struct Compiled<'a> {
    spec: &'a GenSpec,
    relations: Vec<Entry<'a>>,
    distractors: Vec<Entry<'a>>,
    names: BTreeMap<&'a str, Vec<Vec<&'a str>>>,
}

fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn templates_for<'a>(
    spec: &'a GenSpec,
    what: &str,
    frame: &Option<String>,
    inline: &'a [String],
) -> Result<Vec<Template>> {
    let mut texts: Vec<&String> = inline.iter().collect();
    if let Some(f) = frame {
        let framed = spec
            .frames
            .get(f)
            .ok_or_else(|| config(format!("{what}: unknown frame {f:?}")))?;
        texts.extend(framed);
    }
    if texts.is_empty() {
        return Err(config(format!("{what}: no templates")));
    }
    texts
        .into_iter()
        .map(|t| Template::parse(t).map_err(|m| config(format!("{what}: {m}"))))
        .collect()
}

impl<'a> Compiled<'a> {
    fn new(spec: &'a GenSpec) -> Result<Self> {
        if spec.relations.len() < 2 {
            return Err(config("at least two relations are required"));
        }
        if !(0.0..=1.0).contains(&spec.rule_coverage) {
            return Err(config("rule_coverage must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&spec.negative_fraction) {
            return Err(config("negative_fraction must lie in [0, 1)"));
        }
        if spec.negative_fraction > 0.0 && spec.distractors.is_empty() {
            return Err(config("negative_fraction > 0 needs at least one distractor"));
        }
        let mut names = BTreeMap::new();
        for (ty, bank) in &spec.entities {
            let parsed: Vec<Vec<&str>> = bank
                .iter()
                .map(|n| n.split_whitespace().collect::<Vec<_>>())
                .filter(|n| !n.is_empty())
                .collect();
            if parsed.len() < 2 {
                return Err(config(format!("entity type {ty} needs at least two names")));
            }
            names.insert(ty.as_str(), parsed);
        }
        let check_types = |what: &str, s: &str, o: &str| -> Result<()> {
            for t in [s, o] {
                if !names.contains_key(t) {
                    return Err(config(format!("{what}: no names for entity type {t}")));
                }
            }
            Ok(())
        };
        let mut relations = Vec::new();
        for r in &spec.relations {
            let what = format!("relation {}", r.name);
            if r.name == NO_RELATION {
                return Err(config("no_relation cannot be declared as a relation"));
            }
            check_types(&what, &r.subj_type, &r.obj_type)?;
            let templates = templates_for(spec, &what, &r.frame, &r.templates)?;
            if templates.iter().any(|t| !t.has(&Slot::Trigger)) {
                return Err(config(format!("{what}: every template needs a {{T}} slot")));
            }
            if spec.rule_coverage > 0.0 && r.seeded.is_empty() {
                return Err(config(format!("{what}: no seeded triggers")));
            }
            if spec.rule_coverage < 1.0 && r.unseeded.is_empty() {
                return Err(config(format!("{what}: no unseeded triggers")));
            }
            relations.push(Entry {
                label: &r.name,
                subj_type: &r.subj_type,
                obj_type: &r.obj_type,
                templates,
            });
        }
        let mut distractors = Vec::new();
        for (k, d) in spec.distractors.iter().enumerate() {
            let what = format!("distractor {k}");
            check_types(&what, &d.subj_type, &d.obj_type)?;
            let templates = templates_for(spec, &what, &d.frame, &d.templates)?;
            if d.triggers.is_empty() && templates.iter().any(|t| t.has(&Slot::Trigger)) {
                return Err(config(format!("{what}: {{T}} slot without triggers")));
            }
            distractors.push(Entry {
                label: NO_RELATION,
                subj_type: &d.subj_type,
                obj_type: &d.obj_type,
                templates,
            });
        }
        let all = relations.iter().chain(&distractors);
        if spec.fillers.is_empty() && all.flat_map(|e| &e.templates).any(|t| t.has(&Slot::Filler)) {
            return Err(config("templates use {A} but no fillers are given"));
        }
        Ok(Compiled {
            spec,
            relations,
            distractors,
            names,
        })
    }
}

/// One planned sentence before surface realisation.
struct Plan {
    entry: usize,
    positive: bool,
    covered: bool,
}

fn instantiate(
    c: &Compiled<'_>,
    entry: &Entry<'_>,
    triggers: &[String],
    rng: &mut ChaCha8Rng,
) -> (Vec<Token>, Span, Span, Option<usize>) {
    let tpl = entry.templates.choose(rng).expect("non-empty templates");
    let subj_name = c.names[entry.subj_type].choose(rng).expect("names");
    let obj_name = loop {
        let n = c.names[entry.obj_type].choose(rng).expect("names");
        if n != subj_name {
            break n;
        }
    };
    // Each template token expands to one or more tokens; `anchor` is the
    // expansion's head, which takes over the template token's attachments.
    let mut forms: Vec<(Vec<&str>, &TemplateToken)> = Vec::with_capacity(tpl.tokens.len());
    for t in &tpl.tokens {
        let words: Vec<&str> = match &t.slot {
            Slot::Literal(w) => vec![w.as_str()],
            Slot::Subj => subj_name.clone(),
            Slot::Obj => obj_name.clone(),
            Slot::Trigger => vec![triggers.choose(rng).expect("triggers").as_str()],
            Slot::Filler => vec![c.spec.fillers.choose(rng).expect("fillers").as_str()],
        };
        forms.push((words, t));
    }
    let mut anchor = Vec::with_capacity(forms.len());
    let mut next = 0;
    for (words, _) in &forms {
        next += words.len();
        anchor.push(next - 1);
    }
    let mut tokens = Vec::with_capacity(next);
    let (mut subj, mut obj) = (Span::new(0, 0), Span::new(0, 0));
    let mut trigger = None;
    for (k, (words, t)) in forms.iter().enumerate() {
        let start = tokens.len();
        let (ner, default_pos) = match t.slot {
            Slot::Subj => (entry.subj_type, "NNP"),
            Slot::Obj => (entry.obj_type, "NNP"),
            _ => ("O", "X"),
        };
        for (j, w) in words.iter().enumerate() {
            let last = j + 1 == words.len();
            tokens.push(Token {
                form: w.to_string(),
                lemma: w.to_lowercase(),
                pos: t.pos.clone().unwrap_or_else(|| default_pos.to_string()),
                ner: ner.to_string(),
                head: if last { t.head.map(|h| anchor[h]) } else { Some(anchor[k]) },
                deprel: if last { t.deprel.clone() } else { "compound".to_string() },
            });
        }
        let span = Span::new(start, tokens.len() - 1);
        match t.slot {
            Slot::Subj => subj = span,
            Slot::Obj => obj = span,
            Slot::Trigger => trigger = Some(start),
            _ => {}
        }
    }
    (tokens, subj, obj, trigger)
}

fn split_sizes(n: usize, fraction: f64) -> (usize, usize) {
    let neg = (n as f64 * fraction).round() as usize;
    (n - neg, neg)
}

/// Two simulated annotators per positive instance: one marks the trigger,
/// the other the trigger and the context token after it.
fn annotate(inst: &RelationInstance, trigger: usize) -> HumanAnnotation {
    let mut wide = BTreeSet::from([trigger]);
    if trigger + 1 < inst.len() && !inst.in_entity(trigger + 1) {
        wide.insert(trigger + 1);
    }
    HumanAnnotation {
        id: inst.id.clone(),
        annotators: vec![BTreeSet::from([trigger]), wide],
    }
}

fn gen_split(
    c: &Compiled<'_>,
    name: &str,
    n: usize,
    seed: u64,
    stream: u64,
) -> Result<(Vec<RelationInstance>, Vec<HumanAnnotation>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let (n_pos, n_neg) = split_sizes(n, c.spec.negative_fraction);
    let n_cov = (n_pos as f64 * c.spec.rule_coverage).round() as usize;
    let mut covered: Vec<bool> = (0..n_pos).map(|i| i < n_cov).collect();
    covered.shuffle(&mut rng);
    let mut plans: Vec<Plan> = (0..n_pos)
        .map(|i| Plan {
            entry: i % c.relations.len(),
            positive: true,
            covered: covered[i],
        })
        .collect();
    plans.extend((0..n_neg).map(|i| Plan {
        entry: i % c.distractors.len().max(1),
        positive: false,
        covered: false,
    }));
    plans.shuffle(&mut rng);
    let mut out = Vec::with_capacity(n);
    let mut human = Vec::new();
    for (i, plan) in plans.iter().enumerate() {
        let (entry, triggers) = if plan.positive {
            let spec = &c.spec.relations[plan.entry];
            let bank = if plan.covered { &spec.seeded } else { &spec.unseeded };
            (&c.relations[plan.entry], bank)
        } else {
            (&c.distractors[plan.entry], &c.spec.distractors[plan.entry].triggers)
        };
        let (tokens, subj, obj, trigger) = instantiate(c, entry, triggers, &mut rng);
        let inst = RelationInstance {
            id: format!("{name}-{i:05}"),
            tokens,
            subj,
            obj,
            subj_type: entry.subj_type.to_string(),
            obj_type: entry.obj_type.to_string(),
            relation: entry.label.to_string(),
        };
        inst.validate()
            .map_err(|e| config(format!("template produced an invalid sentence: {e}")))?;
        if let (true, Some(t)) = (plan.positive, trigger) {
            human.push(annotate(&inst, t));
        }
        out.push(inst);
    }
    Ok((out, human))
}

fn rule_id(label: &str, k: usize) -> String {
    let slug: String = label
        .chars()
        .map(|ch| if ch.is_ascii_alphanumeric() { ch } else { '_' })
        .collect();
    format!("manual-{slug}-{k}")
}

/// One syntactic rule per (relation, frame template) over the seeded triggers,
/// with duplicate patterns collapsed.
fn seeded_rules(c: &Compiled<'_>) -> RuleSet {
    let mut rules = Vec::new();
    for (entry, spec) in c.relations.iter().zip(&c.spec.relations) {
        if spec.seeded.is_empty() {
            continue;
        }
        for (k, tpl) in entry.templates.iter().enumerate() {
            let proto = prototype(tpl);
            let t = tpl.index_of(&Slot::Trigger).expect("relation templates have triggers");
            let s = tpl.index_of(&Slot::Subj).expect("validated");
            let o = tpl.index_of(&Slot::Obj).expect("validated");
            let (subj_path, _) = shortest_dep_path(&proto, &[t], &[s]);
            let (obj_path, _) = shortest_dep_path(&proto, &[t], &[o]);
            rules.push(Rule {
                id: rule_id(entry.label, k + 1),
                label: entry.label.to_string(),
                provenance: Provenance::Manual,
                body: RuleBody::Syntactic(SyntacticPattern {
                    trigger: TriggerConstraint {
                        field: TriggerField::Word,
                        sequence: vec![spec.seeded.clone()],
                    },
                    subject: Argument {
                        entity_type: entry.subj_type.to_string(),
                        path: subj_path,
                    },
                    object: Argument {
                        entity_type: entry.obj_type.to_string(),
                        path: obj_path,
                    },
                }),
            });
        }
    }
    RuleSet { rules }.dedupe()
}

/// The template as a sentence with one token per slot.
fn prototype(tpl: &Template) -> RelationInstance {
    let tokens = tpl
        .tokens
        .iter()
        .map(|t| Token {
            form: String::new(),
            lemma: String::new(),
            pos: String::new(),
            ner: String::new(),
            head: t.head,
            deprel: t.deprel.clone(),
        })
        .collect();
    let s = tpl.index_of(&Slot::Subj).expect("validated");
    let o = tpl.index_of(&Slot::Obj).expect("validated");
    RelationInstance {
        id: String::new(),
        tokens,
        subj: Span::new(s, s),
        obj: Span::new(o, o),
        subj_type: String::new(),
        obj_type: String::new(),
        relation: String::new(),
    }
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub corpus: Corpus,
    /// Rules over the seeded triggers; they match exactly the covered positives.
    pub manual_rules: RuleSet,
    /// Simulated rationale annotations for the positive test instances.
    pub human: Vec<HumanAnnotation>,
}

/// Generates all three partitions and the seeded rule set. The output depends
/// only on `(spec, seed)`.
pub fn gen_synthetic(spec: &GenSpec, seed: u64) -> Result<Synthetic> {
    let c = Compiled::new(spec)?;
    let (train, _) = gen_split(&c, "train", spec.train, seed, 0)?;
    let (dev, _) = gen_split(&c, "dev", spec.dev, seed, 1)?;
    let (test, human) = gen_split(&c, "test", spec.test, seed, 2)?;
    let manual_rules = seeded_rules(&c);
    Ok(Synthetic {
        corpus: Corpus::from_splits(train, dev, test),
        manual_rules,
        human,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::eval::validate_annotations;
    use crate::rules::{annotate_explanations, matches_any};

    fn small(seed: u64) -> Synthetic {
        let mut spec = GenSpec::builtin();
        spec.train = 400;
        spec.dev = 50;
        spec.test = 50;
        gen_synthetic(&spec, seed).unwrap()
    }

    fn label_counts(insts: &[RelationInstance]) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for i in insts {
            *m.entry(i.relation.clone()).or_default() += 1;
        }
        m
    }

    #[test]
    fn builtin_spec_has_eight_relations_and_sizes() {
        let spec = GenSpec::builtin();
        let s = gen_synthetic(&spec, 13).unwrap();
        assert_eq!(s.corpus.relations.len(), 8);
        assert_eq!((s.corpus.train.len(), s.corpus.dev.len(), s.corpus.test.len()), (2000, 400, 500));
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = small(13);
        let b = small(13);
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.manual_rules, b.manual_rules);
    }

    #[test]
    fn new_seed_changes_forms_not_distribution() {
        let a = small(13);
        let b = small(14);
        assert_ne!(a.corpus.train, b.corpus.train);
        assert_eq!(label_counts(&a.corpus.train), label_counts(&b.corpus.train));
        assert_eq!(label_counts(&a.corpus.test), label_counts(&b.corpus.test));
    }

    #[test]
    fn seeded_rules_cover_the_requested_share() {
        let s = small(13);
        let ann = annotate_explanations(&s.manual_rules, &s.corpus);
        let positives = s.corpus.train.iter().filter(|i| i.is_positive()).count();
        let share = ann.len() as f64 / positives as f64;
        assert!((0.20..=0.30).contains(&share), "coverage {share}");
        for inst in s.corpus.train.iter().filter(|i| !i.is_positive()) {
            assert!(!matches_any(&s.manual_rules, inst), "{}", inst.id);
        }
    }

    #[test]
    fn human_annotations_cover_test_positives() {
        let syn = small(9);
        let positives = syn.corpus.test.iter().filter(|i| i.is_positive()).count();
        assert_eq!(syn.human.len(), positives);
        validate_annotations(&syn.human, &syn.corpus.test).unwrap();
        for a in &syn.human {
            assert!(a.annotators[0].is_subset(&a.annotators[1]));
            assert_eq!(a.annotators[0].len(), 1);
        }
    }

    #[test]
    fn multi_token_names_attach_with_compound() {
        let s = small(13);
        let inst = s
            .corpus
            .train
            .iter()
            .find(|i| i.subj.len() == 2)
            .expect("two-token subject");
        let first = &inst.tokens[inst.subj.start];
        assert_eq!(first.deprel, "compound");
        assert_eq!(first.head, Some(inst.subj.end));
    }

    #[test]
    fn relation_without_templates_is_a_config_error() {
        let mut spec = GenSpec::builtin();
        spec.relations[0].frame = None;
        let err = gen_synthetic(&spec, 1).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("no templates")), "{err}");
    }

    #[test]
    fn single_relation_is_rejected() {
        let mut spec = GenSpec::builtin();
        spec.relations.truncate(1);
        assert!(gen_synthetic(&spec, 1).is_err());
    }

    #[test]
    fn bad_template_reports_the_token() {
        let err = Template::parse("{S}/2/nsubj {T}/x/root {O}/2/obj").unwrap_err();
        assert!(err.contains("{T}/x/root"), "{err}");
    }
}
