use std::collections::BTreeSet;

use super::{
    Argument, Rule, RuleBody, RuleMatch, SurfaceElement, SurfacePattern, SyntacticPattern,
    TriggerConstraint, TriggerField,
};
use crate::corpus::{DepPath, Direction, RelationInstance};

/// Applies one rule. When a rule can match in several places the match with
/// the smallest trigger index is returned.
pub fn match_rule(rule: &Rule, inst: &RelationInstance) -> Option<RuleMatch> {
    let trigger_tokens = match &rule.body {
        RuleBody::Surface(p) => match_surface(p, inst)?.literals,
        RuleBody::Syntactic(p) => match_syntactic(p, inst)?,
    };
    Some(RuleMatch {
        rule_id: rule.id.clone(),
        instance_id: inst.id.clone(),
        trigger_tokens,
        label: rule.label.clone(),
    })
}

pub fn matches_any<'a>(rules: impl IntoIterator<Item = &'a Rule>, inst: &RelationInstance) -> bool {
    rules.into_iter().any(|r| match_rule(r, inst).is_some())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct SurfaceMatch {
    pub start: usize,
    /// Length consumed by each gap, in pattern order.
    pub gaps: Vec<usize>,
    pub literals: BTreeSet<usize>,
}

fn match_surface(p: &SurfacePattern, inst: &RelationInstance) -> Option<SurfaceMatch> {
    if !placeholder_types_agree(p, inst) {
        return None;
    }
    (0..inst.len()).find_map(|start| {
        let mut gaps = Vec::new();
        let mut literals = BTreeSet::new();
        step(&p.elements, inst, start, &mut gaps, &mut literals).then_some(SurfaceMatch {
            start,
            gaps,
            literals,
        })
    })
}

fn placeholder_types_agree(p: &SurfacePattern, inst: &RelationInstance) -> bool {
    p.elements.iter().all(|e| match e {
        SurfaceElement::Subj(t) => *t == inst.subj_type,
        SurfaceElement::Obj(t) => *t == inst.obj_type,
        _ => true,
    })
}

/// Left-to-right backtracking; every gap tries the shortest run first.
fn step(
    elems: &[SurfaceElement],
    inst: &RelationInstance,
    pos: usize,
    gaps: &mut Vec<usize>,
    literals: &mut BTreeSet<usize>,
) -> bool {
    let Some((head, rest)) = elems.split_first() else {
        return true;
    };
    match head {
        SurfaceElement::Subj(_) | SurfaceElement::Obj(_) => {
            let span = if matches!(head, SurfaceElement::Subj(_)) {
                inst.subj
            } else {
                inst.obj
            };
            pos == span.start && step(rest, inst, span.end + 1, gaps, literals)
        }
        SurfaceElement::Literal(w) => {
            if pos < inst.len() && !inst.in_entity(pos) && inst.tokens[pos].form == *w {
                literals.insert(pos);
                if step(rest, inst, pos + 1, gaps, literals) {
                    return true;
                }
                literals.remove(&pos);
            }
            false
        }
        SurfaceElement::Gap => {
            for len in 0..=inst.len().saturating_sub(pos) {
                gaps.push(len);
                if step(rest, inst, pos + len, gaps, literals) {
                    return true;
                }
                gaps.pop();
            }
            false
        }
    }
}

fn trigger_accepts(t: &TriggerConstraint, alts: &[String], inst: &RelationInstance, i: usize) -> bool {
    let tok = &inst.tokens[i];
    match t.field {
        TriggerField::Word => alts.iter().any(|a| *a == tok.form),
        TriggerField::Lemma => alts.iter().any(|a| a.eq_ignore_ascii_case(&tok.lemma)),
    }
}

/// Nodes reachable from `from` by walking `path`; optional steps may be
/// skipped.
pub(crate) fn walk(inst: &RelationInstance, children: &[Vec<usize>], from: usize, path: &DepPath) -> BTreeSet<usize> {
    let mut cur = BTreeSet::from([from]);
    for s in &path.steps {
        let mut next = if s.optional { cur.clone() } else { BTreeSet::new() };
        for &n in &cur {
            match s.direction {
                Direction::Up => {
                    if let Some(h) = inst.tokens[n].head {
                        if inst.tokens[n].deprel == s.deprel {
                            next.insert(h);
                        }
                    }
                }
                Direction::Down => next.extend(
                    children[n]
                        .iter()
                        .copied()
                        .filter(|&c| inst.tokens[c].deprel == s.deprel),
                ),
            }
        }
        if next.is_empty() {
            return next;
        }
        cur = next;
    }
    cur
}

/// The shallowest token of a run, leftmost on ties.
pub(crate) fn run_head(depths: &[usize], run: std::ops::Range<usize>) -> usize {
    run.min_by_key(|&i| (depths[i], i)).expect("non-empty run")
}

fn reaches(
    inst: &RelationInstance,
    children: &[Vec<usize>],
    head: usize,
    arg: &Argument,
    span: crate::corpus::Span,
) -> bool {
    walk(inst, children, head, &arg.path)
        .iter()
        .any(|&n| span.contains(n))
}

fn match_syntactic(p: &SyntacticPattern, inst: &RelationInstance) -> Option<BTreeSet<usize>> {
    if p.subject.entity_type != inst.subj_type || p.object.entity_type != inst.obj_type {
        return None;
    }
    let k = p.trigger.sequence.len();
    if k == 0 || k > inst.len() {
        return None;
    }
    let children = inst.children();
    let depths = inst.depths();
    (0..=inst.len() - k).find_map(|start| {
        let run = start..start + k;
        let ok = run.clone().zip(&p.trigger.sequence).all(|(i, alts)| {
            !inst.in_entity(i) && trigger_accepts(&p.trigger, alts, inst, i)
        });
        if !ok {
            return None;
        }
        let head = run_head(&depths, run.clone());
        (reaches(inst, &children, head, &p.subject, inst.subj)
            && reaches(inst, &children, head, &p.object, inst.obj))
        .then(|| run.collect())
    })
}
