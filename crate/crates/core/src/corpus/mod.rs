//! Annotated sentences and everything needed to read, validate and mask them.

mod load;
mod mask;
pub mod synth;
mod tree;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::NO_RELATION;

pub use load::{load_corpus, load_corpus_dir, load_split, write_split, CorpusFormat};
pub use mask::{mask_entities, masked_position, MaskedSequence};
pub use tree::{shortest_dep_path, DepPath, Direction, PathStep};

pub const CLS: &str = "[CLS]";
pub const UNK: &str = "[UNK]";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub form: String,
    pub lemma: String,
    pub pos: String,
    pub ner: String,
    /// 0-based index of the syntactic head, `None` for the root.
    pub head: Option<usize>,
    pub deprel: String,
}

/// Inclusive token range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i <= self.end
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn indices(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationInstance {
    pub id: String,
    pub tokens: Vec<Token>,
    pub subj: Span,
    pub obj: Span,
    pub subj_type: String,
    pub obj_type: String,
    pub relation: String,
}

impl RelationInstance {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_positive(&self) -> bool {
        self.relation != NO_RELATION
    }

    pub fn in_entity(&self, i: usize) -> bool {
        self.subj.contains(i) || self.obj.contains(i)
    }

    /// Children of every token, in index order.
    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.tokens.len()];
        for (i, t) in self.tokens.iter().enumerate() {
            if let Some(h) = t.head {
                out[h].push(i);
            }
        }
        out
    }

    /// Distance of each token from the root.
    pub fn depths(&self) -> Vec<usize> {
        (0..self.tokens.len())
            .map(|mut i| {
                let mut d = 0;
                while let Some(h) = self.tokens[i].head {
                    i = h;
                    d += 1;
                }
                d
            })
            .collect()
    }

    /// Checks the token and span invariants. The head function must form a
    /// single tree rooted at exactly one token.
    pub fn validate(&self) -> Result<()> {
        let err = |message: String| Error::Validation {
            id: self.id.clone(),
            message,
        };
        let n = self.tokens.len();
        if n == 0 {
            return Err(err("sentence has no tokens".into()));
        }
        for (name, span) in [("subject", &self.subj), ("object", &self.obj)] {
            if span.start > span.end || span.end >= n {
                return Err(err(format!(
                    "{name} span [{}, {}] out of bounds for {n} tokens",
                    span.start, span.end
                )));
            }
        }
        if self.subj.overlaps(&self.obj) {
            return Err(err("subject and object spans overlap".into()));
        }
        let mut roots = 0;
        for (i, t) in self.tokens.iter().enumerate() {
            match t.head {
                None => roots += 1,
                Some(h) if h >= n => {
                    return Err(err(format!("token {i} has out-of-range head {h}")))
                }
                Some(h) if h == i => return Err(err(format!("token {i} is its own head"))),
                Some(_) => {}
            }
        }
        if roots != 1 {
            return Err(err(format!("expected exactly one root, found {roots}")));
        }
        for start in 0..n {
            let mut cur = start;
            let mut steps = 0;
            while let Some(h) = self.tokens[cur].head {
                cur = h;
                steps += 1;
                if steps > n {
                    return Err(err(format!("head cycle through token {start}")));
                }
            }
        }
        Ok(())
    }
}

/// Ordered symbol list with the reserved `[CLS]` and `[UNK]` entries at ids 0
/// and 1, followed by entity mask symbols and then word forms, each sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct TokenVocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for TokenVocab {
    fn from(symbols: Vec<String>) -> Self {
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        TokenVocab { symbols, index }
    }
}

impl From<TokenVocab> for Vec<String> {
    fn from(v: TokenVocab) -> Self {
        v.symbols
    }
}

impl TokenVocab {
    pub const CLS_ID: usize = 0;
    pub const UNK_ID: usize = 1;

    pub fn build<'a>(
        entity_types: impl IntoIterator<Item = &'a str>,
        forms: impl IntoIterator<Item = &'a str>,
    ) -> Self {
        let types: BTreeSet<&str> = entity_types.into_iter().collect();
        let mut symbols = vec![CLS.to_string(), UNK.to_string()];
        for t in &types {
            symbols.push(subj_symbol(t));
        }
        for t in &types {
            symbols.push(obj_symbol(t));
        }
        let reserved: BTreeSet<String> = symbols.iter().cloned().collect();
        let forms: BTreeSet<&str> = forms.into_iter().collect();
        symbols.extend(
            forms
                .into_iter()
                .filter(|f| !reserved.contains(*f))
                .map(str::to_string),
        );
        symbols.into()
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn id_or_unk(&self, symbol: &str) -> usize {
        self.id(symbol).unwrap_or(Self::UNK_ID)
    }

    pub fn symbol(&self, id: usize) -> &str {
        &self.symbols[id]
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// Total size including the reserved symbols.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    /// True when nothing beyond the reserved symbols was learned from data.
    pub fn is_empty(&self) -> bool {
        self.symbols.len() <= 2
    }
}

pub fn subj_symbol(entity_type: &str) -> String {
    format!("SUBJ-{entity_type}")
}

pub fn obj_symbol(entity_type: &str) -> String {
    format!("OBJ-{entity_type}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<RelationInstance>,
    pub dev: Vec<RelationInstance>,
    pub test: Vec<RelationInstance>,
    /// Sorted relation labels, `no_relation` excluded.
    pub relations: Vec<String>,
    pub vocab: TokenVocab,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Dev => "dev.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl Corpus {
    /// Builds vocabularies from the given partitions. Word forms come from the
    /// training partition only; entity types and relation labels from all.
    pub fn from_splits(
        train: Vec<RelationInstance>,
        dev: Vec<RelationInstance>,
        test: Vec<RelationInstance>,
    ) -> Self {
        let all = || train.iter().chain(&dev).chain(&test);
        let relations: BTreeSet<&str> = all()
            .map(|i| i.relation.as_str())
            .filter(|r| *r != NO_RELATION)
            .collect();
        let types: Vec<&str> = all()
            .flat_map(|i| [i.subj_type.as_str(), i.obj_type.as_str()])
            .collect();
        let forms: Vec<&str> = train
            .iter()
            .flat_map(|inst| {
                inst.tokens
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !inst.in_entity(*i))
                    .map(|(_, t)| t.form.as_str())
            })
            .collect();
        let vocab = TokenVocab::build(types, forms);
        let relations = relations.into_iter().map(str::to_string).collect();
        Corpus {
            train,
            dev,
            test,
            relations,
            vocab,
        }
    }

    pub fn split(&self, split: Split) -> &[RelationInstance] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
