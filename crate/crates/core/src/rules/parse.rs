use std::path::Path;

use super::{
    Argument, Provenance, Rule, RuleBody, RuleSet, SurfaceElement, SurfacePattern,
    SyntacticPattern, TriggerConstraint, TriggerField,
};
use crate::corpus::{DepPath, Direction, PathStep};
use crate::error::{Error, Result};

pub fn parse_rules(path: &Path) -> Result<RuleSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rules_str(&text)
}

#[derive(Default)]
struct Block {
    start: usize,
    id: Option<String>,
    kind: Option<(usize, String)>,
    label: Option<String>,
    provenance: Option<(usize, String)>,
    pattern: Option<(usize, String)>,
    trigger: Option<(usize, String)>,
    subject: Option<(usize, String)>,
    object: Option<(usize, String)>,
}

fn syntax(line: usize, message: impl Into<String>) -> Error {
    Error::RuleSyntax {
        line,
        message: message.into(),
    }
}

/// Parses the block format: `key: value` lines, rules separated by blank
/// lines, `#` starts a comment line.
pub fn parse_rules_str(text: &str) -> Result<RuleSet> {
    let mut blocks = Vec::new();
    let mut cur: Option<Block> = None;
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.trim();
        if line.starts_with('#') {
            continue;
        }
        if line.is_empty() {
            if let Some(b) = cur.take() {
                blocks.push(b);
            }
            continue;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| syntax(line_no, format!("expected `key: value`, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim().to_string());
        let b = cur.get_or_insert_with(|| Block {
            start: line_no,
            ..Block::default()
        });
        let slot = match key {
            "id" => {
                set(&mut b.id, value, line_no, key)?;
                continue;
            }
            "label" => {
                set(&mut b.label, value, line_no, key)?;
                continue;
            }
            "kind" => &mut b.kind,
            "provenance" => &mut b.provenance,
            "pattern" => &mut b.pattern,
            "trigger" => &mut b.trigger,
            "subject" => &mut b.subject,
            "object" => &mut b.object,
            other => return Err(syntax(line_no, format!("unknown key {other:?}"))),
        };
        set(slot, (line_no, value), line_no, key)?;
    }
    if let Some(b) = cur.take() {
        blocks.push(b);
    }
    let rules = blocks.into_iter().map(build).collect::<Result<Vec<_>>>()?;
    RuleSet::new(rules)
}

fn set<T>(slot: &mut Option<T>, value: T, line: usize, key: &str) -> Result<()> {
    if slot.is_some() {
        return Err(syntax(line, format!("duplicate key {key:?}")));
    }
    *slot = Some(value);
    Ok(())
}

fn build(b: Block) -> Result<Rule> {
    let id = b
        .id
        .ok_or_else(|| syntax(b.start, "rule block without id"))?;
    let label = b
        .label
        .ok_or_else(|| syntax(b.start, format!("rule {id} has no label")))?;
    let (kind_line, kind) = b
        .kind
        .ok_or_else(|| syntax(b.start, format!("rule {id} has no kind")))?;
    let provenance = match b.provenance {
        None => Provenance::Manual,
        Some((line, p)) => p.parse().map_err(|m: String| syntax(line, m))?,
    };
    let body = match kind.as_str() {
        "surface" => {
            if let Some((line, _)) = b.trigger.as_ref().or(b.subject.as_ref()).or(b.object.as_ref()) {
                return Err(syntax(*line, "surface rules take only a pattern"));
            }
            let (line, pattern) = b
                .pattern
                .ok_or_else(|| syntax(kind_line, format!("surface rule {id} has no pattern")))?;
            RuleBody::Surface(parse_surface(&pattern).map_err(|m| syntax(line, m))?)
        }
        "syntactic" => {
            if let Some((line, _)) = b.pattern {
                return Err(syntax(line, "syntactic rules take trigger/subject/object"));
            }
            let (tline, trigger) = b
                .trigger
                .ok_or_else(|| syntax(kind_line, format!("syntactic rule {id} has no trigger")))?;
            let trigger = parse_trigger(&trigger).map_err(|m| syntax(tline, m))?;
            let (subject, object) = match (b.subject, b.object) {
                (Some(s), Some(o)) => (s, o),
                (None, None) => {
                    return Err(Error::RuleValidation {
                        id,
                        message: "syntactic rule has no arguments".into(),
                    })
                }
                _ => {
                    return Err(Error::RuleValidation {
                        id,
                        message: "syntactic rule needs both subject and object".into(),
                    })
                }
            };
            let subject = parse_argument(&subject.1, "SUBJ_").map_err(|m| syntax(subject.0, m))?;
            let object = parse_argument(&object.1, "OBJ_").map_err(|m| syntax(object.0, m))?;
            RuleBody::Syntactic(SyntacticPattern {
                trigger,
                subject,
                object,
            })
        }
        other => return Err(syntax(kind_line, format!("unknown rule kind {other:?}"))),
    };
    let rule = Rule {
        id,
        label,
        provenance,
        body,
    };
    rule.validate()?;
    Ok(rule)
}

fn parse_surface(text: &str) -> std::result::Result<SurfacePattern, String> {
    let elements = text
        .split_whitespace()
        .map(|tok| {
            if tok == "*" {
                SurfaceElement::Gap
            } else if let Some(t) = tok.strip_prefix("SUBJ-") {
                SurfaceElement::Subj(t.to_string())
            } else if let Some(t) = tok.strip_prefix("OBJ-") {
                SurfaceElement::Obj(t.to_string())
            } else {
                SurfaceElement::Literal(tok.to_string())
            }
        })
        .collect();
    let p = SurfacePattern { elements };
    p.validate()?;
    Ok(p)
}

/// `word=a|b c` or the bracketed form `[word=/a|b/] [word=/c/]`.
fn parse_trigger(text: &str) -> std::result::Result<TriggerConstraint, String> {
    let parse_field = |f: &str| match f.trim() {
        "word" => Ok(TriggerField::Word),
        "lemma" => Ok(TriggerField::Lemma),
        other => Err(format!("unknown trigger field {other:?}")),
    };
    let split_alts = |s: &str| -> Vec<String> { s.split('|').map(str::to_string).collect() };
    if text.starts_with('[') {
        let mut field = None;
        let mut sequence = Vec::new();
        for part in text.split_whitespace() {
            let inner = part
                .strip_prefix('[')
                .and_then(|p| p.strip_suffix(']'))
                .ok_or_else(|| format!("malformed token constraint {part:?}"))?;
            let (f, v) = inner
                .split_once('=')
                .ok_or_else(|| format!("missing `=` in {part:?}"))?;
            let f = parse_field(f)?;
            if field.is_some_and(|g| g != f) {
                return Err("mixed trigger fields".into());
            }
            field = Some(f);
            let v = v.trim_matches('/');
            sequence.push(split_alts(v));
        }
        let field = field.ok_or("empty trigger")?;
        return Ok(TriggerConstraint { field, sequence });
    }
    let (f, v) = text
        .split_once('=')
        .ok_or_else(|| format!("trigger must be field=alternatives, got {text:?}"))?;
    let sequence: Vec<Vec<String>> = v.split_whitespace().map(split_alts).collect();
    if sequence.is_empty() {
        return Err("empty trigger alternation".into());
    }
    Ok(TriggerConstraint {
        field: parse_field(f)?,
        sequence,
    })
}

fn parse_argument(text: &str, prefix: &str) -> std::result::Result<Argument, String> {
    let (ty, path) = text
        .split_once('=')
        .ok_or_else(|| format!("argument must be `TYPE = path`, got {text:?}"))?;
    let ty = ty.trim();
    let ty = ty.strip_prefix(prefix).unwrap_or(ty);
    if ty.is_empty() {
        return Err("argument has no entity type".into());
    }
    let other = if prefix == "SUBJ_" { "OBJ_" } else { "SUBJ_" };
    if ty.starts_with(other) {
        return Err(format!("argument type {ty:?} uses the wrong role prefix"));
    }
    Ok(Argument {
        entity_type: ty.to_string(),
        path: parse_path(path)?,
    })
}

/// Whitespace-separated steps: `<label` goes up to the head, `>label` or a
/// bare label goes down to a dependent, a trailing `?` makes the step optional.
pub fn parse_path(text: &str) -> std::result::Result<DepPath, String> {
    let steps = text
        .split_whitespace()
        .map(|tok| {
            let (tok, optional) = match tok.strip_suffix('?') {
                Some(t) => (t, true),
                None => (tok, false),
            };
            let (direction, label) = if let Some(l) = tok.strip_prefix('<') {
                (Direction::Up, l)
            } else if let Some(l) = tok.strip_prefix('>') {
                (Direction::Down, l)
            } else {
                (Direction::Down, tok)
            };
            if label.is_empty() {
                return Err(format!("path step {tok:?} has no label"));
            }
            Ok(PathStep {
                direction,
                deprel: label.to_string(),
                optional,
            })
        })
        .collect::<std::result::Result<Vec<_>, String>>()?;
    Ok(DepPath::new(steps))
}
