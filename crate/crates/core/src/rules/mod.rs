//! Surface and syntactic extraction rules.
//!
//! A surface rule is a token pattern over the entity-masked sentence:
//! literals, one `SUBJ-<T>` and one `OBJ-<T>` placeholder, and `*` gaps. A
//! syntactic rule anchors on a trigger (one or more consecutive tokens whose
//! word or lemma is in an alternation) and reaches each typed argument by
//! walking a dependency path from the trigger's head token.

mod annotate;
pub(crate) mod matcher;
mod parse;

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::DepPath;
use crate::error::{Error, Result};

pub use annotate::{annotate_explanations, annotate_instances, predict_with_rules, rule_predictions, RulePrediction};
pub use matcher::{match_rule, matches_any};
pub use parse::{parse_rules, parse_rules_str, parse_path};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SurfaceElement {
    Literal(String),
    Subj(String),
    Obj(String),
    Gap,
}

impl fmt::Display for SurfaceElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SurfaceElement::Literal(w) => f.write_str(w),
            SurfaceElement::Subj(t) => write!(f, "SUBJ-{t}"),
            SurfaceElement::Obj(t) => write!(f, "OBJ-{t}"),
            SurfaceElement::Gap => f.write_str("*"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SurfacePattern {
    pub elements: Vec<SurfaceElement>,
}

impl SurfacePattern {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let count = |pred: fn(&SurfaceElement) -> bool| self.elements.iter().filter(|e| pred(e)).count();
        if count(|e| matches!(e, SurfaceElement::Subj(_))) != 1 {
            return Err("pattern needs exactly one SUBJ placeholder".into());
        }
        if count(|e| matches!(e, SurfaceElement::Obj(_))) != 1 {
            return Err("pattern needs exactly one OBJ placeholder".into());
        }
        if count(|e| matches!(e, SurfaceElement::Literal(_))) == 0 {
            return Err("pattern needs at least one literal".into());
        }
        if self
            .elements
            .windows(2)
            .any(|w| w[0] == SurfaceElement::Gap && w[1] == SurfaceElement::Gap)
        {
            return Err("adjacent gaps".into());
        }
        Ok(())
    }
}

impl fmt::Display for SurfacePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.elements.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TriggerField {
    Word,
    Lemma,
}

/// One alternation per trigger position; a single position is the usual case.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TriggerConstraint {
    pub field: TriggerField,
    pub sequence: Vec<Vec<String>>,
}

impl TriggerConstraint {
    pub fn word(forms: &[&str]) -> Self {
        TriggerConstraint {
            field: TriggerField::Word,
            sequence: forms.iter().map(|f| vec![f.to_string()]).collect(),
        }
    }
}

impl fmt::Display for TriggerConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let field = match self.field {
            TriggerField::Word => "word",
            TriggerField::Lemma => "lemma",
        };
        write!(f, "{field}=")?;
        for (i, alts) in self.sequence.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            f.write_str(&alts.join("|"))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Argument {
    pub entity_type: String,
    pub path: DepPath,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SyntacticPattern {
    pub trigger: TriggerConstraint,
    pub subject: Argument,
    pub object: Argument,
}

impl SyntacticPattern {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.trigger.sequence.is_empty()
            || self
                .trigger
                .sequence
                .iter()
                .any(|alts| alts.is_empty() || alts.iter().any(|a| a.is_empty()))
        {
            return Err("empty trigger alternation".into());
        }
        for (name, arg) in [("subject", &self.subject), ("object", &self.object)] {
            if arg.entity_type.is_empty() {
                return Err(format!("{name} has no entity type"));
            }
            if arg.path.is_empty() {
                return Err(format!("{name} path is empty"));
            }
            if arg.path.steps.iter().any(|s| s.deprel.is_empty()) {
                return Err(format!("{name} path has a step without a label"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RuleBody {
    Surface(SurfacePattern),
    Syntactic(SyntacticPattern),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    Manual,
    GenTrain,
    GenTest,
}

impl Provenance {
    fn as_str(self) -> &'static str {
        match self {
            Provenance::Manual => "manual",
            Provenance::GenTrain => "gen-train",
            Provenance::GenTest => "gen-test",
        }
    }
}

impl std::str::FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "manual" => Ok(Provenance::Manual),
            "gen-train" => Ok(Provenance::GenTrain),
            "gen-test" => Ok(Provenance::GenTest),
            other => Err(format!("unknown provenance {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub id: String,
    pub label: String,
    pub provenance: Provenance,
    pub body: RuleBody,
}

impl Rule {
    pub fn validate(&self) -> Result<()> {
        let check = match &self.body {
            RuleBody::Surface(p) => p.validate(),
            RuleBody::Syntactic(p) => p.validate(),
        };
        check.map_err(|message| Error::RuleValidation {
            id: self.id.clone(),
            message,
        })?;
        if self.label.is_empty() {
            return Err(Error::RuleValidation {
                id: self.id.clone(),
                message: "missing label".into(),
            });
        }
        Ok(())
    }

    /// Identity used for de-duplication: label plus pattern, ignoring id and
    /// provenance.
    pub fn same_content(&self, other: &Rule) -> bool {
        self.label == other.label && self.body == other.body
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "id: {}", self.id)?;
        match &self.body {
            RuleBody::Surface(p) => {
                writeln!(f, "kind: surface")?;
                writeln!(f, "label: {}", self.label)?;
                writeln!(f, "provenance: {}", self.provenance.as_str())?;
                writeln!(f, "pattern: {p}")
            }
            RuleBody::Syntactic(p) => {
                writeln!(f, "kind: syntactic")?;
                writeln!(f, "label: {}", self.label)?;
                writeln!(f, "provenance: {}", self.provenance.as_str())?;
                writeln!(f, "trigger: {}", p.trigger)?;
                writeln!(f, "subject: SUBJ_{} = {}", p.subject.entity_type, p.subject.path)?;
                writeln!(f, "object: OBJ_{} = {}", p.object.entity_type, p.object.path)
            }
        }
    }
}

/// Ordered rules. Order decides which rule wins when several match.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    pub rules: Vec<Rule>,
}

impl RuleSet {
    pub fn new(rules: Vec<Rule>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &rules {
            r.validate()?;
            if !seen.insert(r.id.as_str()) {
                return Err(Error::RuleValidation {
                    id: r.id.clone(),
                    message: "duplicate rule id".into(),
                });
            }
        }
        Ok(RuleSet { rules })
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Rule> {
        self.rules.iter()
    }

    /// Drops rules whose content repeats an earlier rule.
    pub fn dedupe(&self) -> RuleSet {
        let mut kept: Vec<Rule> = Vec::with_capacity(self.rules.len());
        let mut seen: HashSet<(&str, &RuleBody)> = HashSet::new();
        for r in &self.rules {
            if seen.insert((r.label.as_str(), &r.body)) {
                kept.push(r.clone());
            }
        }
        RuleSet { rules: kept }
    }

    /// Labels mentioned by any rule.
    pub fn labels(&self) -> BTreeSet<&str> {
        self.rules.iter().map(|r| r.label.as_str()).collect()
    }

    pub fn to_rule_file(&self) -> String {
        let mut out = String::new();
        for (i, r) in self.rules.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&r.to_string());
        }
        out
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_rule_file()).map_err(|e| Error::io(path, e))
    }
}

impl<'a> IntoIterator for &'a RuleSet {
    type Item = &'a Rule;
    type IntoIter = std::slice::Iter<'a, Rule>;

    fn into_iter(self) -> Self::IntoIter {
        self.rules.iter()
    }
}

/// One successful application of a rule to an instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleMatch {
    pub rule_id: String,
    pub instance_id: String,
    /// Original token indices of the rule's lexical elements.
    pub trigger_tokens: BTreeSet<usize>,
    pub label: String,
}
