use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    /// Probability of replacing a context token by `[UNK]` during training.
    pub word_dropout: f64,
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_seq_len: usize,
    /// Share of optimiser steps spent warming the learning rate up.
    pub warmup_fraction: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            layers: 2,
            heads: 4,
            ff_mult: 4,
            dropout: 0.1,
            word_dropout: 0.25,
            seed: 13,
            lr: 3e-4,
            weight_decay: 0.01,
            batch_size: 16,
            max_seq_len: 64,
            warmup_fraction: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad("d must be a positive multiple of heads");
        }
        if self.layers == 0 {
            return bad("at least one encoder layer is required");
        }
        if self.ff_mult == 0 || self.max_seq_len < 2 || self.batch_size == 0 {
            return bad("ff_mult, batch_size must be positive and max_seq_len at least 2");
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.word_dropout) {
            return bad("dropout and word_dropout must lie in [0, 1)");
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn ff(&self) -> usize {
        self.d * self.ff_mult
    }
}

/// A contiguous run of the flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Seg {
    pub off: usize,
    pub len: usize,
}

impl Seg {
    pub fn of(self, v: &[f64]) -> &[f64] {
        &v[self.off..self.off + self.len]
    }

    pub fn of_mut(self, v: &mut [f64]) -> &mut [f64] {
        &mut v[self.off..self.off + self.len]
    }

    pub fn range(self) -> std::ops::Range<usize> {
        self.off..self.off + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct LayerSegs {
    pub ln1_g: Seg,
    pub ln1_b: Seg,
    pub wq: Seg,
    pub bq: Seg,
    pub wk: Seg,
    pub bk: Seg,
    pub wv: Seg,
    pub bv: Seg,
    pub wo: Seg,
    pub bo: Seg,
    pub ln2_g: Seg,
    pub ln2_b: Seg,
    pub w1: Seg,
    pub b1: Seg,
    pub w2: Seg,
    pub b2: Seg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub(crate) seg: Seg,
    pub(crate) init: Init,
}

impl TensorInfo {
    /// Where the tensor lives in the flat parameter buffer.
    pub fn range(&self) -> std::ops::Range<usize> {
        self.seg.range()
    }

    /// Matrices and embeddings; these receive weight decay.
    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }
}

/// Where every tensor sits in the flat buffer, in declaration order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub tok_emb: Seg,
    pub pos_emb: Seg,
    pub layers: Vec<LayerSegs>,
    pub nrc_w: Seg,
    pub nrc_b: Seg,
    pub ec_w: Seg,
    pub ec_b: Seg,
    pub rc_w: Seg,
    pub rc_b: Seg,
    pub tensors: Vec<TensorInfo>,
    pub total: usize,
}

struct Builder {
    tensors: Vec<TensorInfo>,
    next: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> Seg {
        let len = shape.iter().product();
        let seg = Seg { off: self.next, len };
        self.next += len;
        self.tensors.push(TensorInfo {
            name,
            shape: shape.to_vec(),
            seg,
            init,
        });
        seg
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig, vocab: usize, classes: usize) -> Layout {
        let (d, f) = (cfg.d, cfg.ff());
        let mut b = Builder {
            tensors: Vec::new(),
            next: 0,
        };
        let tok_emb = b.add("tok_emb".into(), &[vocab, d], Init::Normal);
        let pos_emb = b.add("pos_emb".into(), &[cfg.max_seq_len, d], Init::Normal);
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let mut t = |n: &str, shape: &[usize], init| b.add(format!("layer{l}.{n}"), shape, init);
            layers.push(LayerSegs {
                ln1_g: t("ln1_g", &[d], Init::Ones),
                ln1_b: t("ln1_b", &[d], Init::Zeros),
                wq: t("wq", &[d, d], Init::Normal),
                bq: t("bq", &[d], Init::Zeros),
                wk: t("wk", &[d, d], Init::Normal),
                bk: t("bk", &[d], Init::Zeros),
                wv: t("wv", &[d, d], Init::Normal),
                bv: t("bv", &[d], Init::Zeros),
                wo: t("wo", &[d, d], Init::Normal),
                bo: t("bo", &[d], Init::Zeros),
                ln2_g: t("ln2_g", &[d], Init::Ones),
                ln2_b: t("ln2_b", &[d], Init::Zeros),
                w1: t("w1", &[d, f], Init::Normal),
                b1: t("b1", &[f], Init::Zeros),
                w2: t("w2", &[f, d], Init::Normal),
                b2: t("b2", &[d], Init::Zeros),
            });
        }
        let nrc_w = b.add("nrc_w".into(), &[d], Init::Normal);
        let nrc_b = b.add("nrc_b".into(), &[1], Init::Zeros);
        let ec_w = b.add("ec_w".into(), &[d], Init::Normal);
        let ec_b = b.add("ec_b".into(), &[1], Init::Zeros);
        let rc_w = b.add("rc_w".into(), &[3 * d, classes], Init::Normal);
        let rc_b = b.add("rc_b".into(), &[classes], Init::Zeros);
        Layout {
            tok_emb,
            pos_emb,
            layers,
            nrc_w,
            nrc_b,
            ec_w,
            ec_b,
            rc_w,
            rc_b,
            tensors: b.tensors,
            total: b.next,
        }
    }

    pub fn init(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut data = vec![0.0; self.total];
        for t in &self.tensors {
            let out = t.seg.of_mut(&mut data);
            match t.init {
                Init::Normal => out.iter_mut().for_each(|x| *x = normal.sample(&mut rng)),
                Init::Zeros => {}
                Init::Ones => out.fill(1.0),
            }
        }
        data
    }
}
