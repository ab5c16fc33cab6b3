//! Scoring of relation predictions and explanations, and baseline
//! explanation methods.

mod attribution;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::RelationInstance;
use crate::error::{Error, Result};
use crate::NO_RELATION;

pub use attribution::{attribute, rationales, AttributionMethod};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Counts {
    /// Counts over positive relation labels.
    Relation { tp: usize, fp: usize, fn_: usize },
    /// Instances averaged over and instances skipped for an empty reference.
    Overlap { instances: usize, skipped: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Micro-averaged scores where `no_relation` is the negative label.
///
/// A prediction counts as a true positive when it names the gold relation;
/// any other positive prediction is a false positive, and a positive gold
/// label not predicted exactly is a false negative.
pub fn rc_micro(preds: &BTreeMap<String, String>, golds: &BTreeMap<String, String>) -> Result<EvalReport> {
    if let Some(id) = preds.keys().find(|k| !golds.contains_key(*k)) {
        return Err(Error::Eval(format!("prediction for unknown instance {id}")));
    }
    if let Some(id) = golds.keys().find(|k| !preds.contains_key(*k)) {
        return Err(Error::Eval(format!("no prediction for instance {id}")));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (id, gold) in golds {
        let pred = &preds[id];
        let (pp, gp) = (pred != NO_RELATION, gold != NO_RELATION);
        if pp && pred == gold {
            tp += 1;
            continue;
        }
        fp += usize::from(pp);
        fn_ += usize::from(gp);
    }
    let (p, r) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
    Ok(EvalReport {
        precision: p,
        recall: r,
        f1: f1(p, r),
        counts: Counts::Relation { tp, fp, fn_ },
    })
}

/// Token-overlap precision, recall and F1 of one predicted set.
pub fn overlap(pred: &BTreeSet<usize>, gold: &BTreeSet<usize>) -> (f64, f64, f64) {
    let hit = pred.intersection(gold).count();
    let (p, r) = (ratio(hit, pred.len()), ratio(hit, gold.len()));
    (p, r, f1(p, r))
}

/// Overlap averaged over instances (macro). Instances with an empty
/// reference are skipped; a missing prediction counts as an empty set.
pub fn ec_overlap(
    preds: &BTreeMap<String, BTreeSet<usize>>,
    golds: &BTreeMap<String, BTreeSet<usize>>,
) -> EvalReport {
    let empty = BTreeSet::new();
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    let (mut n, mut skipped) = (0, 0);
    for (id, gold) in golds {
        if gold.is_empty() {
            skipped += 1;
            continue;
        }
        let (p, r, f) = overlap(preds.get(id).unwrap_or(&empty), gold);
        sp += p;
        sr += r;
        sf += f;
        n += 1;
    }
    let avg = |s: f64| if n == 0 { 0.0 } else { s / n as f64 };
    EvalReport {
        precision: avg(sp),
        recall: avg(sr),
        f1: avg(sf),
        counts: Counts::Overlap { instances: n, skipped },
    }
}

/// Drops entity tokens from a token set.
pub fn context_only(inst: &RelationInstance, tokens: &BTreeSet<usize>) -> BTreeSet<usize> {
    tokens.iter().copied().filter(|&i| i < inst.len() && !inst.in_entity(i)).collect()
}

/// Token sets chosen by the two annotators of one instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanAnnotation {
    pub id: String,
    pub annotators: Vec<BTreeSet<usize>>,
}

/// Reads one annotation per line: `{"id": .., "annotators": [[..], ..]}`.
pub fn load_human_annotations(path: &Path) -> Result<Vec<HumanAnnotation>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let a: HumanAnnotation = serde_json::from_str(&line).map_err(|e| Error::Load {
            record: format!("{}:{}", path.display(), n + 1),
            message: e.to_string(),
        })?;
        out.push(a);
    }
    Ok(out)
}

/// Checks annotations against the instances they describe.
pub fn validate_annotations(annotations: &[HumanAnnotation], instances: &[RelationInstance]) -> Result<()> {
    let by_id: BTreeMap<&str, &RelationInstance> = instances.iter().map(|i| (i.id.as_str(), i)).collect();
    for a in annotations {
        let inst = by_id
            .get(a.id.as_str())
            .ok_or_else(|| Error::Eval(format!("annotation for unknown instance {}", a.id)))?;
        check_annotators(a)?;
        for &i in a.annotators.iter().flatten() {
            if i >= inst.len() {
                return Err(Error::Eval(format!("annotation {} marks token {i} out of range", a.id)));
            }
            if inst.in_entity(i) {
                return Err(Error::Eval(format!("annotation {} marks entity token {i}", a.id)));
            }
        }
    }
    Ok(())
}

fn check_annotators(a: &HumanAnnotation) -> Result<()> {
    if a.annotators.len() != 2 {
        return Err(Error::Eval(format!(
            "annotation {} has {} annotator sets, expected 2",
            a.id,
            a.annotators.len()
        )));
    }
    Ok(())
}

/// Overlap with human rationales. Each instance is scored against both
/// annotators and keeps the one with the higher F1 (the first on ties);
/// scores are then averaged over instances. Instances where both annotators
/// marked nothing are skipped; a missing prediction counts as empty.
pub fn plausibility(preds: &BTreeMap<String, BTreeSet<usize>>, annotations: &[HumanAnnotation]) -> Result<EvalReport> {
    let empty = BTreeSet::new();
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    let (mut n, mut skipped) = (0, 0);
    for a in annotations {
        check_annotators(a)?;
        if a.annotators.iter().all(BTreeSet::is_empty) {
            skipped += 1;
            continue;
        }
        let pred = preds.get(&a.id).unwrap_or(&empty);
        let best = a
            .annotators
            .iter()
            .map(|g| overlap(pred, g))
            .reduce(|best, s| if s.2 > best.2 { s } else { best })
            .expect("two annotators");
        sp += best.0;
        sr += best.1;
        sf += best.2;
        n += 1;
    }
    let avg = |s: f64| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(EvalReport {
        precision: avg(sp),
        recall: avg(sr),
        f1: avg(sf),
        counts: Counts::Overlap { instances: n, skipped },
    })
}

/// Named reports rendered as an aligned table or JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<(String, EvalReport)>,
}

impl Report {
    pub fn push(&mut self, name: impl Into<String>, r: EvalReport) {
        self.rows.push((name.into(), r));
    }

    pub fn to_json(&self) -> Result<String> {
        let rows: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(|(n, r)| {
                let mut v = serde_json::to_value(r)?;
                v["name"] = serde_json::Value::String(n.clone());
                Ok(v)
            })
            .collect::<Result<_>>()?;
        Ok(serde_json::to_string_pretty(&rows)?)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
        writeln!(f, "{:<w$}  {:>9}  {:>9}  {:>9}  counts", "method", "precision", "recall", "f1")?;
        for (name, r) in &self.rows {
            let counts = match r.counts {
                Counts::Relation { tp, fp, fn_ } => format!("tp={tp} fp={fp} fn={fn_}"),
                Counts::Overlap { instances, skipped } => format!("n={instances} skipped={skipped}"),
            };
            writeln!(
                f,
                "{name:<w$}  {:>9.4}  {:>9.4}  {:>9.4}  {counts}",
                r.precision, r.recall, r.f1
            )?;
        }
        Ok(())
    }
}
