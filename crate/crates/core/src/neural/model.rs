use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{self, EncoderOutput};
use super::loss::LossParts;
use super::ops::{argmax, axpy, bce_logit, dot, log_softmax, sigmoid};
use super::optim::AdamW;
use super::params::{Layout, ModelConfig};
use crate::corpus::{mask_entities, masked_position, RelationInstance, TokenVocab};
use crate::error::{Error, Result};
use crate::NO_RELATION;

/// Which head to switch off.
///
/// Without the NRC the RC gains a `no_relation` class and also sees negative
/// instances. Without the EC the RC pools every non-entity token and no
/// rationale is produced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    #[default]
    None,
    Nrc,
    Ec,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "nrc" => Ok(Ablation::Nrc),
            "ec" => Ok(Ablation::Ec),
            other => Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
    }
}

/// Encoder input plus the position sets the heads need, all in masked
/// coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Features {
    pub ids: Vec<usize>,
    pub subj: Vec<usize>,
    pub obj: Vec<usize>,
    /// True for positions that may belong to a rationale.
    pub context: Vec<bool>,
}

impl Features {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn context_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.context.iter().enumerate().filter(|(_, c)| **c).map(|(i, _)| i)
    }
}

/// How the RC chooses the context positions it averages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PoolMask {
    Given(Vec<bool>),
    /// Thresholded EC output of the same forward pass.
    Predicted,
    AllContext,
}

/// Supervision for one instance; absent parts contribute no loss.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Targets {
    pub nrc: Option<bool>,
    pub ec: Option<Vec<bool>>,
    pub rc: Option<(PoolMask, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    /// NRC probability; absent when the NRC is ablated.
    pub nrc_score: Option<f64>,
    /// EC probability per original token, 0 on entity tokens.
    pub ec_scores: Vec<f64>,
    /// Original token indices the RC pooled as rationale.
    pub rationale: BTreeSet<usize>,
    /// Distribution over [`Model::classes`].
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: TokenVocab,
    pub relations: Vec<String>,
    pub ablation: Ablation,
    pub nrc_threshold: f64,
    pub(crate) layout: Layout,
    pub params: Vec<f64>,
}

fn mix(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ c.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Model {
    pub fn new(config: ModelConfig, vocab: TokenVocab, relations: Vec<String>, ablation: Ablation) -> Result<Self> {
        config.validate()?;
        if relations.is_empty() {
            return Err(Error::Config("the relation vocabulary is empty".into()));
        }
        let classes = relations.len() + usize::from(ablation == Ablation::Nrc);
        let layout = Layout::new(&config, vocab.len(), classes);
        let params = layout.init(config.seed);
        Ok(Model {
            config,
            vocab,
            relations,
            ablation,
            nrc_threshold: 0.5,
            layout,
            params,
        })
    }

    /// RC output classes: the relations, then `no_relation` when the NRC is
    /// ablated.
    pub fn classes(&self) -> Vec<String> {
        let mut c = self.relations.clone();
        if self.ablation == Ablation::Nrc {
            c.push(NO_RELATION.to_string());
        }
        c
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        if label == NO_RELATION {
            return (self.ablation == Ablation::Nrc).then_some(self.relations.len());
        }
        self.relations.iter().position(|r| r == label)
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn tensors(&self) -> &[super::params::TensorInfo] {
        &self.layout.tensors
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW::new(&self.layout, self.config.lr, self.config.weight_decay)
    }

    pub fn features(&self, inst: &RelationInstance) -> Result<Features> {
        let n = inst.len() + 1;
        if n > self.config.max_seq_len {
            return Err(Error::Truncation {
                len: n,
                max: self.config.max_seq_len,
            });
        }
        let seq = mask_entities(inst, &self.vocab);
        let mut context = vec![false; n];
        for i in 0..inst.len() {
            context[masked_position(i)] = !inst.in_entity(i);
        }
        Ok(Features {
            ids: seq.ids,
            subj: inst.subj.indices().map(masked_position).collect(),
            obj: inst.obj.indices().map(masked_position).collect(),
            context,
        })
    }

    /// Inference-mode encoding; deterministic.
    pub fn encode(&self, f: &Features) -> EncoderOutput {
        self.encode_ids(&f.ids)
    }

    pub fn encode_ids(&self, ids: &[usize]) -> EncoderOutput {
        encoder::forward(&self.config, &self.layout, &self.params, ids, None, false).0
    }

    pub fn nrc_logit(&self, out: &EncoderOutput) -> f64 {
        dot(out.row(0), self.layout.nrc_w.of(&self.params)) + self.layout.nrc_b.of(&self.params)[0]
    }

    pub fn nrc_score(&self, out: &EncoderOutput) -> f64 {
        sigmoid(self.nrc_logit(out))
    }

    /// EC logit for every masked position, `[CLS]` and entities included.
    pub fn ec_logits(&self, out: &EncoderOutput) -> Vec<f64> {
        let w = self.layout.ec_w.of(&self.params);
        let b = self.layout.ec_b.of(&self.params)[0];
        (0..out.n).map(|i| dot(out.row(i), w) + b).collect()
    }

    /// EC probabilities per masked position with `[CLS]` and entity positions
    /// clamped to 0.
    pub fn ec_scores(&self, out: &EncoderOutput, f: &Features) -> Vec<f64> {
        self.ec_logits(out)
            .into_iter()
            .zip(&f.context)
            .map(|(l, &c)| if c { sigmoid(l) } else { 0.0 })
            .collect()
    }

    pub fn predicted_mask(&self, out: &EncoderOutput, f: &Features) -> Vec<bool> {
        self.ec_scores(out, f).into_iter().map(|p| p > 0.5).collect()
    }

    fn resolve(&self, pm: &PoolMask, out: &EncoderOutput, f: &Features) -> Vec<bool> {
        let mask = match pm {
            PoolMask::Given(m) => m.clone(),
            PoolMask::Predicted => self.predicted_mask(out, f),
            PoolMask::AllContext => f.context.clone(),
        };
        mask.iter().zip(&f.context).map(|(a, b)| *a && *b).collect()
    }

    /// `[avg ctx | avg subj | avg obj]`; the context average is the zero
    /// vector when the mask selects nothing.
    pub fn pooled(&self, out: &EncoderOutput, mask: &[bool], f: &Features) -> Vec<f64> {
        let d = out.d;
        let mut feat = vec![0.0; 3 * d];
        let ctx: Vec<usize> = f.context_positions().filter(|&i| mask.get(i).copied().unwrap_or(false)).collect();
        for (k, set) in [&ctx, &f.subj, &f.obj].into_iter().enumerate() {
            if set.is_empty() {
                continue;
            }
            let dst = &mut feat[k * d..(k + 1) * d];
            for &i in set {
                axpy(1.0 / set.len() as f64, out.row(i), dst);
            }
        }
        feat
    }

    pub fn rc_logits(&self, out: &EncoderOutput, mask: &[bool], f: &Features) -> Vec<f64> {
        let feat = self.pooled(out, mask, f);
        let classes = self.layout.rc_b.len;
        let w = self.layout.rc_w.of(&self.params);
        let mut z = self.layout.rc_b.of(&self.params).to_vec();
        for (r, x) in feat.iter().enumerate() {
            axpy(*x, &w[r * classes..(r + 1) * classes], &mut z);
        }
        z
    }

    pub fn rc_distribution(&self, out: &EncoderOutput, mask: &[bool], f: &Features) -> Vec<f64> {
        log_softmax(&self.rc_logits(out, mask, f)).into_iter().map(f64::exp).collect()
    }

    /// Loss without gradients, in inference mode.
    pub fn loss(&self, f: &Features, t: &Targets) -> LossParts {
        let mut scratch = vec![0.0; self.layout.total];
        self.loss_and_grad(f, t, None, &mut scratch)
    }

    /// Forward pass, joint loss and its exact gradient added into `grads`.
    /// A generator enables dropout.
    pub fn loss_and_grad(
        &self,
        f: &Features,
        t: &Targets,
        rng: Option<&mut ChaCha8Rng>,
        grads: &mut [f64],
    ) -> LossParts {
        let (out, trace) = encoder::forward(&self.config, &self.layout, &self.params, &f.ids, rng, true);
        let trace = trace.expect("trace requested");
        let (d, n) = (out.d, out.n);
        let lay = &self.layout;
        let p = &self.params;
        let mut dh = vec![0.0; n * d];
        let mut parts = LossParts::default();

        if let (Some(target), false) = (t.nrc, self.ablation == Ablation::Nrc) {
            let logit = self.nrc_logit(&out);
            parts.nrc = bce_logit(logit, target);
            let g = sigmoid(logit) - f64::from(u8::from(target));
            axpy(g, lay.nrc_w.of(p), &mut dh[..d]);
            axpy(g, out.row(0), lay.nrc_w.of_mut(grads));
            lay.nrc_b.of_mut(grads)[0] += g;
        }

        if let (Some(target), false) = (&t.ec, self.ablation == Ablation::Ec) {
            let logits = self.ec_logits(&out);
            let pos: Vec<usize> = f.context_positions().collect();
            let m = pos.len().max(1) as f64;
            for &i in &pos {
                let ti = target.get(i).copied().unwrap_or(false);
                parts.ec += bce_logit(logits[i], ti) / m;
                let g = (sigmoid(logits[i]) - f64::from(u8::from(ti))) / m;
                axpy(g, lay.ec_w.of(p), &mut dh[i * d..(i + 1) * d]);
                axpy(g, out.row(i), lay.ec_w.of_mut(grads));
                lay.ec_b.of_mut(grads)[0] += g;
            }
        }

        if let Some((pm, class)) = &t.rc {
            let pm = if self.ablation == Ablation::Ec { &PoolMask::AllContext } else { pm };
            let mask = self.resolve(pm, &out, f);
            let feat = self.pooled(&out, &mask, f);
            let z = self.rc_logits(&out, &mask, f);
            let logp = log_softmax(&z);
            parts.rc = -logp[*class];
            let classes = z.len();
            let mut dz: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
            dz[*class] -= 1.0;
            let w = lay.rc_w.of(p);
            let gw = lay.rc_w.of_mut(grads);
            let mut dfeat = vec![0.0; 3 * d];
            for r in 0..3 * d {
                axpy(feat[r], &dz, &mut gw[r * classes..(r + 1) * classes]);
                dfeat[r] = dot(&w[r * classes..(r + 1) * classes], &dz);
            }
            axpy(1.0, &dz, lay.rc_b.of_mut(grads));
            let ctx: Vec<usize> = f.context_positions().filter(|&i| mask[i]).collect();
            for (k, set) in [&ctx, &f.subj, &f.obj].into_iter().enumerate() {
                for &i in set {
                    axpy(1.0 / set.len() as f64, &dfeat[k * d..(k + 1) * d], &mut dh[i * d..(i + 1) * d]);
                }
            }
        }

        encoder::backward(&self.config, lay, p, &trace, dh, grads);
        parts
    }

    /// One optimiser step on the mean loss of `batch`. Dropout for example
    /// `k` of step `step` is seeded from `(seed, step, k)`.
    pub fn train_step(
        &mut self,
        batch: &[(Features, Targets)],
        opt: &mut AdamW,
        lr_factor: f64,
        seed: u64,
        step: usize,
    ) -> Result<LossParts> {
        let mut grads = vec![0.0; self.layout.total];
        let mut total = LossParts::default();
        for (k, (f, t)) in batch.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, step as u64, k as u64));
            let noisy = self.drop_words(f, &mut rng);
            let parts = self.loss_and_grad(noisy.as_ref().unwrap_or(f), t, Some(&mut rng), &mut grads);
            total.add(&parts);
        }
        let scale = 1.0 / batch.len().max(1) as f64;
        total.scale(scale);
        grads.iter_mut().for_each(|g| *g *= scale);
        if !total.is_finite() {
            return Err(Error::NonFinite { what: "loss".into(), batch: step });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            let name = self
                .layout
                .tensors
                .iter()
                .find(|t| t.seg.range().contains(&i))
                .map_or("?", |t| t.name.as_str());
            return Err(Error::NonFinite {
                what: format!("gradient of {name}"),
                batch: step,
            });
        }
        opt.step(&mut self.params, &grads, lr_factor);
        Ok(total)
    }

    /// Copy of `f` with context tokens replaced by `[UNK]` at the configured
    /// rate, or `None` when the rate is zero.
    pub(crate) fn drop_words(&self, f: &Features, rng: &mut ChaCha8Rng) -> Option<Features> {
        let p = self.config.word_dropout;
        if p <= 0.0 {
            return None;
        }
        let mut out = f.clone();
        for i in f.context_positions() {
            if rng.random::<f64>() < p {
                out.ids[i] = TokenVocab::UNK_ID;
            }
        }
        Some(out)
    }

    /// The pooling mask the trained model uses at inference.
    pub fn inference_mask(&self, out: &EncoderOutput, f: &Features) -> Vec<bool> {
        match self.ablation {
            Ablation::Ec => f.context.clone(),
            _ => self.predicted_mask(out, f),
        }
    }

    pub fn predict(&self, inst: &RelationInstance) -> Result<Prediction> {
        let f = self.features(inst)?;
        let out = self.encode(&f);
        let mask = self.inference_mask(&out, &f);
        let probs = self.rc_distribution(&out, &mask, &f);
        let classes = self.classes();
        let nrc_score = (self.ablation != Ablation::Nrc).then(|| self.nrc_score(&out));
        let label = match nrc_score {
            Some(s) if s < self.nrc_threshold => NO_RELATION.to_string(),
            _ => classes[argmax(&probs)].clone(),
        };
        let ec = if self.ablation == Ablation::Ec {
            vec![0.0; out.n]
        } else {
            self.ec_scores(&out, &f)
        };
        let rationale = if self.ablation == Ablation::Ec {
            BTreeSet::new()
        } else {
            (0..inst.len()).filter(|&i| mask[masked_position(i)]).collect()
        };
        Ok(Prediction {
            label,
            nrc_score,
            ec_scores: ec[1..].to_vec(),
            rationale,
            probs,
        })
    }

    /// Saliency per original token: summed absolute gradient of the top
    /// RC class probability with respect to the token's input embedding.
    pub fn embedding_gradients(&self, inst: &RelationInstance) -> Result<Vec<f64>> {
        let f = self.features(inst)?;
        let (out, trace) = encoder::forward(&self.config, &self.layout, &self.params, &f.ids, None, true);
        let trace = trace.expect("trace requested");
        let mask = self.inference_mask(&out, &f);
        let probs = self.rc_distribution(&out, &mask, &f);
        let c = argmax(&probs);
        let d = out.d;
        let classes = probs.len();
        // d p_c / d z = p_c (e_c - p).
        let dz: Vec<f64> = (0..classes)
            .map(|k| probs[c] * (f64::from(u8::from(k == c)) - probs[k]))
            .collect();
        let w = self.layout.rc_w.of(&self.params);
        let dfeat: Vec<f64> = (0..3 * d).map(|r| dot(&w[r * classes..(r + 1) * classes], &dz)).collect();
        let mut dh = vec![0.0; out.n * d];
        let ctx: Vec<usize> = f.context_positions().filter(|&i| mask[i]).collect();
        for (k, set) in [&ctx, &f.subj, &f.obj].into_iter().enumerate() {
            for &i in set {
                axpy(1.0 / set.len() as f64, &dfeat[k * d..(k + 1) * d], &mut dh[i * d..(i + 1) * d]);
            }
        }
        let mut scratch = vec![0.0; self.layout.total];
        let dx = encoder::backward(&self.config, &self.layout, &self.params, &trace, dh, &mut scratch);
        Ok((0..inst.len())
            .map(|i| {
                let p = masked_position(i);
                dx[p * d..(p + 1) * d].iter().map(|v| v.abs()).sum()
            })
            .collect())
    }

    /// Last-layer attention from `[CLS]` to each original token, averaged
    /// over heads.
    pub fn cls_attention(&self, inst: &RelationInstance) -> Result<Vec<f64>> {
        let f = self.features(inst)?;
        let out = self.encode(&f);
        let row = out.mean_attention(self.config.layers - 1, 0);
        Ok(row[1..].to_vec())
    }
}
