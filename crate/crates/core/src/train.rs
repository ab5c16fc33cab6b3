//! Burn-in followed by semi-supervised training with latent explanations.
//!
//! During burn-in the EC and RC only see instances annotated by rules. After
//! it, every other positive instance gets a pseudo-gold explanation: tokens
//! the EC scores above `t_up` are fixed to 1, those below `t_low` to 0, and
//! every assignment of the remaining tokens is tried; the one under which the
//! RC gives the gold relation the highest probability wins.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{masked_position, Corpus, RelationInstance};
use crate::error::{Error, Result};
use crate::eval::rc_micro;
use crate::labels::{ExplanationLabels, LabelSource};
use crate::neural::{Ablation, EncoderOutput, Features, LossParts, Model, ModelConfig, PoolMask, Schedule, Targets};
use crate::NO_RELATION;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub t_up: f64,
    pub t_low: f64,
    pub burn_in_epochs: usize,
    pub total_epochs: usize,
    pub candidate_cap: usize,
    pub nrc_threshold: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            t_up: 0.8,
            t_low: 0.2,
            burn_in_epochs: 6,
            total_epochs: 16,
            candidate_cap: 256,
            nrc_threshold: 0.5,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(format!("training config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// `burn_in_epochs == total_epochs` is allowed and gives the burn-in-only
    /// baseline.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0 < self.t_low && self.t_low < self.t_up && self.t_up < 1.0) {
            return bad("thresholds must satisfy 0 < t_low < t_up < 1");
        }
        if self.candidate_cap == 0 {
            return bad("candidate_cap must be at least 1");
        }
        if self.total_epochs == 0 || self.burn_in_epochs > self.total_epochs {
            return bad("need 0 < total_epochs and burn_in_epochs <= total_epochs");
        }
        if !(0.0..=1.0).contains(&self.nrc_threshold) {
            return bad("nrc_threshold must lie in [0, 1]");
        }
        self.model.validate()
    }
}

/// Thresholded candidate explanations over one score vector.
///
/// Scores above `t_up` fix a 1, scores below `t_low` a 0; the rest are
/// ambiguous and enumerated by binary counting with the first ambiguous
/// position as the lowest bit. When more than `cap` candidates would result,
/// the ambiguous scores furthest from 0.5 are first resolved to their nearer
/// side.
pub fn generate_candidates(scores: &[f64], t_low: f64, t_up: f64, cap: usize) -> Vec<Vec<bool>> {
    let mut base: Vec<bool> = scores.iter().map(|&s| s > t_up).collect();
    let mut ambiguous: Vec<usize> = (0..scores.len())
        .filter(|&i| scores[i] >= t_low && scores[i] <= t_up)
        .collect();
    let max_bits = (usize::BITS - 1 - cap.max(1).leading_zeros()) as usize;
    if ambiguous.len() > max_bits {
        let mut by_margin = ambiguous.clone();
        by_margin.sort_by(|&a, &b| {
            let (ma, mb) = ((scores[a] - 0.5).abs(), (scores[b] - 0.5).abs());
            mb.total_cmp(&ma).then(a.cmp(&b))
        });
        let resolved = &by_margin[..ambiguous.len() - max_bits];
        for &i in resolved {
            base[i] = scores[i] >= 0.5;
        }
        ambiguous.retain(|i| !resolved.contains(i));
    }
    (0..1usize << ambiguous.len())
        .map(|code| {
            let mut c = base.clone();
            for (bit, &i) in ambiguous.iter().enumerate() {
                c[i] = code >> bit & 1 == 1;
            }
            c
        })
        .collect()
}

/// Index of the candidate mask (over masked positions) under which the RC
/// gives `class` the highest probability; the earliest candidate wins ties.
pub fn select_candidate_index(
    model: &Model,
    out: &EncoderOutput,
    f: &Features,
    candidates: &[Vec<bool>],
    class: usize,
) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, c) in candidates.iter().enumerate() {
        let p = model.rc_distribution(out, c, f)[class];
        if p > best.1 {
            best = (k, p);
        }
    }
    best.0
}

/// Chooses among explanation candidates for a positive instance with gold
/// relation `gold`; the result is labeled as latent.
pub fn select_candidate(
    model: &Model,
    inst: &RelationInstance,
    candidates: &[ExplanationLabels],
    gold: &str,
) -> Result<ExplanationLabels> {
    if candidates.is_empty() {
        return Err(Error::Config("no explanation candidates".into()));
    }
    let class = model
        .class_index(gold)
        .filter(|_| gold != NO_RELATION)
        .ok_or_else(|| Error::Config(format!("relation {gold:?} is not a positive model class")))?;
    let f = model.features(inst)?;
    let out = model.encode(&f);
    let masks: Vec<Vec<bool>> = candidates.iter().map(|c| c.bits.clone()).collect();
    let k = select_candidate_index(model, &out, &f, &masks, class);
    Ok(candidates[k].clone().with_source(LabelSource::Latent))
}

/// Latent explanation for one instance: EC scores on context positions,
/// thresholded candidates, then the best candidate for `class`. Returns the
/// mask over masked positions and the number of candidates.
pub fn latent_explanation(model: &Model, f: &Features, class: usize, cfg: &TrainConfig) -> (Vec<bool>, usize) {
    let out = model.encode(f);
    let ec = model.ec_scores(&out, f);
    let positions: Vec<usize> = f.context_positions().collect();
    let scores: Vec<f64> = positions.iter().map(|&i| ec[i]).collect();
    let cands = generate_candidates(&scores, cfg.t_low, cfg.t_up, cfg.candidate_cap);
    let masks: Vec<Vec<bool>> = cands
        .iter()
        .map(|c| {
            let mut m = vec![false; f.len()];
            for (&p, &b) in positions.iter().zip(c) {
                m[p] = b;
            }
            m
        })
        .collect();
    let k = select_candidate_index(model, &out, f, &masks, class);
    (masks[k].clone(), masks.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: LossParts,
    pub steps: usize,
    pub dev_f1: Option<f64>,
    /// Mean candidate count over instances given latent explanations; only
    /// after burn-in.
    pub mean_candidates: Option<f64>,
    pub latent_instances: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    BurnIn,
    Ssl,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = self.to_jsonl()?;
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(text.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

/// Labels of `instances` under the model's inference rule.
pub fn predict_labels(model: &Model, instances: &[RelationInstance]) -> Result<BTreeMap<String, String>> {
    instances
        .iter()
        .map(|i| Ok((i.id.clone(), model.predict(i)?.label)))
        .collect()
}

fn gold_labels(instances: &[RelationInstance]) -> BTreeMap<String, String> {
    instances.iter().map(|i| (i.id.clone(), i.relation.clone())).collect()
}

struct Item<'a> {
    inst: &'a RelationInstance,
    f: Features,
    rule: Option<Vec<bool>>,
    class: Option<usize>,
}

/// Trains a model from scratch. `annotations` maps training instance ids to
/// rule-derived explanations and is typically the output of
/// [`crate::rules::annotate_explanations`].
pub fn train(
    corpus: &Corpus,
    annotations: &BTreeMap<String, ExplanationLabels>,
    cfg: &TrainConfig,
    ablation: Ablation,
) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    let mut model = Model::new(cfg.model.clone(), corpus.vocab.clone(), corpus.relations.clone(), ablation)?;
    model.nrc_threshold = cfg.nrc_threshold;
    if annotations.is_empty() {
        log::warn!("no rule annotations: burn-in trains the NRC only");
    }
    let items: Vec<Item> = corpus
        .train
        .iter()
        .map(|inst| {
            let f = model.features(inst)?;
            let rule = annotations.get(&inst.id).filter(|_| inst.is_positive()).map(|a| {
                let mut bits = a.bits.clone();
                bits.resize(f.len(), false);
                bits
            });
            let class = model.class_index(&inst.relation);
            Ok(Item { inst, f, rule, class })
        })
        .collect::<Result<_>>()?;
    let batch_size = cfg.model.batch_size;
    let steps_per_epoch = items.len().div_ceil(batch_size);
    let schedule = Schedule::new(steps_per_epoch * cfg.total_epochs, cfg.model.warmup_fraction);
    let mut opt = model.optimizer();
    let mut log = TrainLog::default();
    let mut step = 0;
    let seed = cfg.model.seed;
    for epoch in 0..cfg.total_epochs {
        let phase = if epoch < cfg.burn_in_epochs { Phase::BurnIn } else { Phase::Ssl };
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let mut loss = LossParts::default();
        let (mut cand_total, mut latent) = (0usize, 0usize);
        for chunk in order.chunks(batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &k in chunk {
                let item = &items[k];
                let (t, cands) = targets(&model, item, phase, cfg);
                if let Some(c) = cands {
                    cand_total += c;
                    latent += 1;
                }
                if t.nrc.is_some() || t.ec.is_some() || t.rc.is_some() {
                    batch.push((item.f.clone(), t));
                }
            }
            step += 1;
            if batch.is_empty() {
                continue;
            }
            let parts = model.train_step(&batch, &mut opt, schedule.factor(step), seed, step)?;
            let mut weighted = parts;
            weighted.scale(batch.len() as f64);
            loss.add(&weighted);
        }
        loss.scale(1.0 / items.len().max(1) as f64);
        let dev_f1 = if corpus.dev.is_empty() {
            None
        } else {
            let preds = predict_labels(&model, &corpus.dev)?;
            Some(rc_micro(&preds, &gold_labels(&corpus.dev))?.f1)
        };
        let entry = EpochLog {
            epoch: epoch + 1,
            phase,
            loss,
            steps: step,
            dev_f1,
            mean_candidates: (phase == Phase::Ssl && latent > 0).then(|| cand_total as f64 / latent as f64),
            latent_instances: latent,
        };
        log::info!(
            "epoch {} ({:?}) loss {:.4} (nrc {:.4} ec {:.4} rc {:.4}) dev F1 {} candidates {}",
            entry.epoch,
            entry.phase,
            entry.loss.total(),
            entry.loss.nrc,
            entry.loss.ec,
            entry.loss.rc,
            entry.dev_f1.map_or("-".into(), |f| format!("{f:.4}")),
            entry.mean_candidates.map_or("-".into(), |c| format!("{c:.1}")),
        );
        log.epochs.push(entry);
    }
    Ok((model, log))
}

/// Supervision for one instance in the given phase, plus the candidate count
/// when a latent explanation was chosen.
fn targets(model: &Model, item: &Item<'_>, phase: Phase, cfg: &TrainConfig) -> (Targets, Option<usize>) {
    let positive = item.inst.is_positive();
    let ablation = model.ablation;
    let mut t = Targets {
        nrc: (ablation != Ablation::Nrc).then_some(positive),
        ..Targets::default()
    };
    if !positive {
        if ablation == Ablation::Nrc {
            let class = model.class_index(NO_RELATION).expect("no_relation class");
            t.rc = Some((PoolMask::Predicted, class));
        }
        return (t, None);
    }
    let Some(class) = item.class else {
        return (t, None);
    };
    if ablation == Ablation::Ec {
        if item.rule.is_some() || phase == Phase::Ssl {
            t.rc = Some((PoolMask::AllContext, class));
        }
        return (t, None);
    }
    match (&item.rule, phase) {
        (Some(bits), _) => {
            t.ec = Some(bits.clone());
            t.rc = Some((PoolMask::Given(bits.clone()), class));
            (t, None)
        }
        (None, Phase::Ssl) => {
            let (mask, n) = latent_explanation(model, &item.f, class, cfg);
            t.ec = Some(mask.clone());
            t.rc = Some((PoolMask::Given(mask), class));
            (t, Some(n))
        }
        (None, Phase::BurnIn) => (t, None),
    }
}

/// Original token indices set in a mask over masked positions.
pub fn mask_tokens(inst: &RelationInstance, mask: &[bool]) -> Vec<usize> {
    (0..inst.len()).filter(|&i| mask.get(masked_position(i)).copied().unwrap_or(false)).collect()
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use proptest::prelude::*;

    use super::*;
    use crate::corpus::fixtures::{born_in, walkthrough};
    use crate::neural::ModelConfig;

    fn bits(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&b| b == 1).collect()
    }

    #[test]
    fn worked_example_gives_two_candidates() {
        let scores = [0.12, 0.14, 0.19, 0.86, 0.25, 0.15, 0.01];
        let c = generate_candidates(&scores, 0.2, 0.8, 256);
        assert_eq!(c, vec![bits(&[0, 0, 0, 1, 0, 0, 0]), bits(&[0, 0, 0, 1, 1, 0, 0])]);
    }

    #[test]
    fn confident_scores_give_one_candidate() {
        let c = generate_candidates(&[0.9, 0.95, 0.81], 0.2, 0.8, 256);
        assert_eq!(c, vec![vec![true; 3]]);
    }

    #[test]
    fn cap_pre_resolves_the_most_confident_ambiguous_tokens() {
        // 0.21 and 0.75 are furthest from 0.5 and get fixed to 0 and 1.
        let c = generate_candidates(&[0.21, 0.5, 0.75, 0.45], 0.2, 0.8, 5);
        assert_eq!(c.len(), 4);
        assert!(c.iter().all(|x| !x[0] && x[2]));
        let c = generate_candidates(&[0.4, 0.6], 0.2, 0.8, 1);
        assert_eq!(c.len(), 1);
    }

    /// Every 0/1 vector consistent with the thresholds.
    fn exhaustive(scores: &[f64], lo: f64, hi: f64) -> BTreeSet<Vec<bool>> {
        let n = scores.len();
        (0..1usize << n)
            .map(|code| (0..n).map(|i| code >> i & 1 == 1).collect::<Vec<bool>>())
            .filter(|v| {
                v.iter().zip(scores).all(|(&b, &s)| {
                    if s > hi {
                        b
                    } else if s < lo {
                        !b
                    } else {
                        true
                    }
                })
            })
            .collect()
    }

    proptest! {
        #[test]
        fn candidates_equal_exhaustive_enumeration(scores in proptest::collection::vec(0.0f64..1.0, 0..=12)) {
            let got = generate_candidates(&scores, 0.2, 0.8, 1 << 12);
            let set: BTreeSet<Vec<bool>> = got.iter().cloned().collect();
            prop_assert_eq!(set.len(), got.len());
            prop_assert_eq!(set, exhaustive(&scores, 0.2, 0.8));
        }

        #[test]
        fn capped_candidates_respect_forced_bits(scores in proptest::collection::vec(0.0f64..1.0, 0..=14), cap in 1usize..64) {
            let got = generate_candidates(&scores, 0.2, 0.8, cap);
            prop_assert!(got.len() <= cap);
            let all = exhaustive(&scores, 0.2, 0.8);
            for c in &got {
                prop_assert!(all.contains(c));
            }
        }
    }

    fn tiny_model() -> (Model, Corpus) {
        let corpus = Corpus::from_splits(vec![born_in(), walkthrough()], vec![], vec![]);
        let cfg = ModelConfig {
            d: 8,
            layers: 1,
            heads: 2,
            ff_mult: 2,
            max_seq_len: 16,
            seed: 3,
            ..ModelConfig::default()
        };
        let m = Model::new(cfg, corpus.vocab.clone(), corpus.relations.clone(), Ablation::None).unwrap();
        (m, corpus)
    }

    #[test]
    fn selection_prefers_higher_gold_probability_and_first_on_ties() {
        let (m, _) = tiny_model();
        let inst = born_in();
        let f = m.features(&inst).unwrap();
        let out = m.encode(&f);
        let class = m.class_index("per:city_of_birth").unwrap();
        let a = bits(&[0, 0, 1, 0, 0, 0, 0]);
        let b = bits(&[0, 0, 0, 1, 0, 0, 0]);
        let pa = m.rc_distribution(&out, &a, &f)[class];
        let pb = m.rc_distribution(&out, &b, &f)[class];
        let want = if pb > pa { 1 } else { 0 };
        assert_eq!(select_candidate_index(&m, &out, &f, &[a.clone(), b], class), want);
        assert_eq!(select_candidate_index(&m, &out, &f, &[a.clone(), a.clone()], class), 0);
        let single = ExplanationLabels { bits: a, source: LabelSource::Rule };
        let chosen = select_candidate(&m, &inst, std::slice::from_ref(&single), "per:city_of_birth").unwrap();
        assert_eq!(chosen.bits, single.bits);
        assert_eq!(chosen.source, LabelSource::Latent);
    }

    #[test]
    fn latent_choice_is_brute_force_argmax() {
        let (m, _) = tiny_model();
        let cfg = TrainConfig {
            t_low: 0.0001,
            t_up: 0.9999,
            ..TrainConfig::default()
        };
        for inst in [born_in(), walkthrough()] {
            let f = m.features(&inst).unwrap();
            let class = m.class_index(&inst.relation).unwrap();
            let (mask, n) = latent_explanation(&m, &f, class, &cfg);
            let out = m.encode(&f);
            let ctx: Vec<usize> = f.context_positions().collect();
            assert_eq!(n, 1 << ctx.len());
            let mut best = (f64::NEG_INFINITY, vec![]);
            for code in 0..1usize << ctx.len() {
                let mut cand = vec![false; f.len()];
                for (b, &p) in ctx.iter().enumerate() {
                    cand[p] = code >> b & 1 == 1;
                }
                let p = m.rc_distribution(&out, &cand, &f)[class];
                if p > best.0 {
                    best = (p, cand);
                }
            }
            assert_eq!(mask, best.1);
        }
    }

    #[test]
    fn config_parses_and_validates() {
        let cfg = TrainConfig::from_toml_str("burn_in_epochs = 2\ntotal_epochs = 3\n[model]\nd = 16\nheads = 2\n").unwrap();
        assert_eq!(cfg.model.d, 16);
        assert_eq!(cfg.t_up, 0.8);
        assert!(TrainConfig::from_toml_str("t_low = 0.9\n").is_err());
        assert!(TrainConfig::from_toml_str("burn_in_epochs = 5\ntotal_epochs = 3\n").is_err());
        assert!(TrainConfig::from_toml_str("unknown = 1\n").is_err());
    }

    #[test]
    fn empty_annotations_still_train() {
        let (_, corpus) = tiny_model();
        let cfg = TrainConfig {
            burn_in_epochs: 1,
            total_epochs: 2,
            model: ModelConfig {
                d: 8,
                layers: 1,
                heads: 2,
                max_seq_len: 16,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        };
        let (_, log) = train(&corpus, &BTreeMap::new(), &cfg, Ablation::None).unwrap();
        assert_eq!(log.epochs.len(), 2);
        assert_eq!(log.epochs[0].mean_candidates, None);
        assert_eq!(log.epochs[1].latent_instances, 2);
    }
}
