use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, RelationInstance, Span, Split, Token};
use crate::error::{Error, Result};

/// On-disk layout of a corpus file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorpusFormat {
    /// One JSON object per line.
    #[default]
    JsonLines,
    /// A single JSON array of objects, as in the original TACRED release.
    JsonArray,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" | "tacred-jsonl" => Ok(CorpusFormat::JsonLines),
            "json" | "tacred" => Ok(CorpusFormat::JsonArray),
            other => Err(Error::Config(format!("unknown corpus format {other:?}"))),
        }
    }
}

/// TACRED-style record. Heads are 1-based with 0 for the root.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Record {
    id: String,
    token: Vec<String>,
    subj_start: usize,
    subj_end: usize,
    obj_start: usize,
    obj_end: usize,
    subj_type: String,
    obj_type: String,
    stanford_pos: Vec<String>,
    stanford_ner: Vec<String>,
    stanford_head: Vec<usize>,
    stanford_deprel: Vec<String>,
    relation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lemma: Option<Vec<String>>,
}

impl Record {
    fn into_instance(self) -> Result<RelationInstance> {
        let n = self.token.len();
        let id = self.id.clone();
        let mismatch = |field: &str, len: usize| Error::Load {
            record: id.clone(),
            message: format!("{field} has {len} entries for {n} tokens"),
        };
        for (field, len) in [
            ("stanford_pos", self.stanford_pos.len()),
            ("stanford_ner", self.stanford_ner.len()),
            ("stanford_head", self.stanford_head.len()),
            ("stanford_deprel", self.stanford_deprel.len()),
        ] {
            if len != n {
                return Err(mismatch(field, len));
            }
        }
        if let Some(l) = &self.lemma {
            if l.len() != n {
                return Err(mismatch("lemma", l.len()));
            }
        }
        let mut tokens = Vec::with_capacity(n);
        for i in 0..n {
            let lemma = match &self.lemma {
                Some(l) => l[i].clone(),
                None => self.token[i].to_lowercase(),
            };
            let head = match self.stanford_head[i] {
                0 => None,
                h if h > n => {
                    return Err(Error::Validation {
                        id: self.id.clone(),
                        message: format!("token {i} has out-of-range head {h}"),
                    })
                }
                h => Some(h - 1),
            };
            tokens.push(Token {
                form: self.token[i].clone(),
                lemma,
                pos: self.stanford_pos[i].clone(),
                ner: self.stanford_ner[i].clone(),
                head,
                deprel: self.stanford_deprel[i].clone(),
            });
        }
        let inst = RelationInstance {
            id: self.id,
            tokens,
            subj: Span::new(self.subj_start, self.subj_end),
            obj: Span::new(self.obj_start, self.obj_end),
            subj_type: self.subj_type,
            obj_type: self.obj_type,
            relation: self.relation,
        };
        inst.validate()?;
        Ok(inst)
    }

    fn from_instance(inst: &RelationInstance) -> Self {
        let col = |f: fn(&Token) -> String| inst.tokens.iter().map(f).collect::<Vec<_>>();
        Record {
            id: inst.id.clone(),
            token: col(|t| t.form.clone()),
            subj_start: inst.subj.start,
            subj_end: inst.subj.end,
            obj_start: inst.obj.start,
            obj_end: inst.obj.end,
            subj_type: inst.subj_type.clone(),
            obj_type: inst.obj_type.clone(),
            stanford_pos: col(|t| t.pos.clone()),
            stanford_ner: col(|t| t.ner.clone()),
            stanford_head: inst
                .tokens
                .iter()
                .map(|t| t.head.map_or(0, |h| h + 1))
                .collect(),
            stanford_deprel: col(|t| t.deprel.clone()),
            relation: inst.relation.clone(),
            lemma: Some(col(|t| t.lemma.clone())),
        }
    }
}

fn parse_value(value: serde_json::Value, fallback: &str) -> Result<RelationInstance> {
    let id = value
        .get("id")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .unwrap_or_else(|| fallback.to_string());
    let record: Record = serde_json::from_value(value).map_err(|e| Error::Load {
        record: id,
        message: e.to_string(),
    })?;
    record.into_instance()
}

/// Reads and validates every instance of one corpus file.
pub fn load_split(path: &Path, format: CorpusFormat) -> Result<Vec<RelationInstance>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        CorpusFormat::JsonLines => text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, line)| {
                let fallback = format!("at line {}", n + 1);
                let value: serde_json::Value =
                    serde_json::from_str(line).map_err(|e| Error::Load {
                        record: fallback.clone(),
                        message: e.to_string(),
                    })?;
                parse_value(value, &fallback)
            })
            .collect(),
        CorpusFormat::JsonArray => {
            if text.trim().is_empty() {
                return Ok(Vec::new());
            }
            let values: Vec<serde_json::Value> = serde_json::from_str(&text)?;
            values
                .into_iter()
                .enumerate()
                .map(|(n, v)| parse_value(v, &format!("#{n}")))
                .collect()
        }
    }
}

/// Loads a single file as the training partition of a corpus.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus> {
    let train = load_split(path, format)?;
    Ok(Corpus::from_splits(train, Vec::new(), Vec::new()))
}

/// Loads `train.jsonl`, `dev.jsonl` and `test.jsonl` from a directory. Missing
/// partitions are treated as empty.
pub fn load_corpus_dir(dir: &Path) -> Result<Corpus> {
    let read = |split: Split| {
        let path = dir.join(split.file_name());
        if path.exists() {
            load_split(&path, CorpusFormat::JsonLines)
        } else {
            Ok(Vec::new())
        }
    };
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "corpus directory not found"),
        ));
    }
    Ok(Corpus::from_splits(
        read(Split::Train)?,
        read(Split::Dev)?,
        read(Split::Test)?,
    ))
}

/// Writes instances as JSON lines in the format [`load_split`] reads.
pub fn write_split(path: &Path, instances: &[RelationInstance]) -> Result<()> {
    let mut out = Vec::new();
    for inst in instances {
        serde_json::to_writer(&mut out, &Record::from_instance(inst))?;
        out.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::walkthrough;

    const WALKTHROUGH: &str = r#"{"id": "w1", "token": ["John", "'s", "daughter", ",", "Emma", ",", "likes", "swimming", "."], "subj_start": 0, "subj_end": 0, "obj_start": 4, "obj_end": 4, "subj_type": "PERSON", "obj_type": "PERSON", "stanford_pos": ["NNP", "POS", "NN", ",", "NNP", ",", "VBZ", "VBG", "."], "stanford_ner": ["PERSON", "O", "O", "O", "PERSON", "O", "O", "O", "O"], "stanford_head": [3, 1, 7, 5, 3, 5, 0, 7, 7], "stanford_deprel": ["nmod:poss", "case", "nsubj", "punct", "appos", "punct", "root", "xcomp", "punct"], "relation": "per:children"}"#;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_walkthrough_record() {
        let f = write(WALKTHROUGH);
        let corpus = load_corpus(f.path(), CorpusFormat::JsonLines).unwrap();
        assert_eq!(corpus.train.len(), 1);
        let inst = &corpus.train[0];
        assert_eq!(inst.tokens.len(), 9);
        assert_eq!(inst.relation, "per:children");
        assert_eq!(inst.tokens[6].head, None);
        assert_eq!(inst.tokens[0].head, Some(2));
        assert_eq!(inst.tokens[2].lemma, "daughter");
        assert_eq!(corpus.relations, vec!["per:children".to_string()]);
        let expected = walkthrough();
        let heads: Vec<_> = inst.tokens.iter().map(|t| t.head).collect();
        let want: Vec<_> = expected.tokens.iter().map(|t| t.head).collect();
        assert_eq!(heads, want);
    }

    #[test]
    fn empty_file_gives_empty_corpus() {
        let f = write("");
        let corpus = load_corpus(f.path(), CorpusFormat::JsonLines).unwrap();
        assert!(corpus.is_empty());
        assert!(corpus.relations.is_empty());
        assert!(corpus.vocab.is_empty());
        let f = write("");
        assert!(load_corpus(f.path(), CorpusFormat::JsonArray)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn missing_field_names_the_record() {
        let text = WALKTHROUGH.replace(r#""relation": "per:children""#, r#""x": 1"#);
        let f = write(&text);
        let err = load_corpus(f.path(), CorpusFormat::JsonLines).unwrap_err();
        match err {
            Error::Load { record, message } => {
                assert_eq!(record, "w1");
                assert!(message.contains("relation"), "{message}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn head_cycle_is_a_validation_error() {
        // "John" and "'s" point at each other.
        let text = WALKTHROUGH.replace("[3, 1, 7, 5, 3, 5, 0, 7, 7]", "[2, 1, 7, 5, 3, 5, 0, 7, 7]");
        let f = write(&text);
        let err = load_corpus(f.path(), CorpusFormat::JsonLines).unwrap_err();
        assert!(matches!(err, Error::Validation { .. }), "{err}");
    }

    #[test]
    fn out_of_range_head_is_a_validation_error() {
        let text = WALKTHROUGH.replace("[3, 1, 7, 5, 3, 5, 0, 7, 7]", "[3, 1, 7, 5, 3, 5, 0, 7, 12]");
        let f = write(&text);
        assert!(matches!(
            load_corpus(f.path(), CorpusFormat::JsonLines),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn overlapping_spans_are_rejected() {
        let text = WALKTHROUGH.replace(r#""obj_start": 4"#, r#""obj_start": 0"#);
        let f = write(&text);
        assert!(matches!(
            load_corpus(f.path(), CorpusFormat::JsonLines),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn write_then_read_preserves_instances() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        let inst = walkthrough();
        write_split(&path, std::slice::from_ref(&inst)).unwrap();
        let back = load_split(&path, CorpusFormat::JsonLines).unwrap();
        assert_eq!(back, vec![inst]);
    }

    #[test]
    fn json_array_format() {
        let f = write(&format!("[{WALKTHROUGH}]"));
        let corpus = load_corpus(f.path(), CorpusFormat::JsonArray).unwrap();
        assert_eq!(corpus.train.len(), 1);
    }
}
