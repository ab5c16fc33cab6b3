use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::fixtures::{born_in, walkthrough};
use crate::corpus::{Corpus, TokenVocab};
use crate::error::Error;

pub(crate) fn tiny(d: usize, layers: usize, heads: usize, ablation: Ablation) -> Model {
    let corpus = Corpus::from_splits(vec![born_in(), walkthrough()], vec![], vec![]);
    let mut relations = corpus.relations.clone();
    relations.push("per:spouse".into());
    let config = ModelConfig {
        d,
        layers,
        heads,
        ff_mult: 2,
        dropout: 0.0,
        max_seq_len: 12,
        ..ModelConfig::default()
    };
    Model::new(config, corpus.vocab, relations, ablation).unwrap()
}

pub(crate) fn randomise(m: &mut Model, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in m.layout.tensors.clone() {
        let base = if t.name.contains("_g") { 1.0 } else { 0.0 };
        for p in t.seg.of_mut(&mut m.params) {
            *p = base + scale * (rng.random::<f64>() * 2.0 - 1.0);
        }
    }
}

fn full_targets(m: &Model, f: &Features) -> Targets {
    let mut ec = vec![false; f.len()];
    ec[2] = true;
    ec[3] = true;
    let mut mask = vec![false; f.len()];
    mask[3] = true;
    mask[4] = true;
    Targets {
        nrc: Some(true),
        ec: Some(ec),
        rc: Some((PoolMask::Given(mask), m.class_index("per:city_of_birth").unwrap())),
    }
}

/// Largest per-tensor relative error `‖a − n‖ / max(‖a‖, ‖n‖, 1e-6)` between
/// the analytic gradient and central differences. The floor covers tensors
/// whose gradient vanishes identically, such as the key bias, which shifts
/// every score in a softmax row equally.
fn worst_gradient_error(m: &Model, f: &Features, t: &Targets) -> (String, f64) {
    let mut analytic = vec![0.0; m.num_params()];
    m.loss_and_grad(f, t, None, &mut analytic);
    let eps = 1e-4;
    let mut probe = m.clone();
    let mut worst = (String::new(), 0.0);
    for info in m.tensors() {
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for i in info.seg.range() {
            let keep = probe.params[i];
            probe.params[i] = keep + eps;
            let up = probe.loss(f, t).total();
            probe.params[i] = keep - eps;
            let down = probe.loss(f, t).total();
            probe.params[i] = keep;
            let num = (up - down) / (2.0 * eps);
            diff += (num - analytic[i]).powi(2);
            na += analytic[i].powi(2);
            nn += num.powi(2);
        }
        let rel = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-6);
        if rel > worst.1 {
            worst = (info.name.clone(), rel);
        }
    }
    worst
}

#[test]
fn gradients_match_finite_differences_per_head_and_joint() {
    let mut m = tiny(16, 2, 2, Ablation::None);
    randomise(&mut m, 7, 0.3);
    let f = m.features(&born_in()).unwrap();
    let full = full_targets(&m, &f);
    let cases = [
        ("joint", full.clone()),
        ("nrc", Targets { nrc: full.nrc, ..Targets::default() }),
        ("ec", Targets { ec: full.ec.clone(), ..Targets::default() }),
        ("rc", Targets { rc: full.rc.clone(), ..Targets::default() }),
    ];
    for (name, t) in cases {
        let (tensor, err) = worst_gradient_error(&m, &f, &t);
        assert!(err < 1e-4, "{name}: {tensor} relative error {err:e}");
    }
}

#[test]
fn empty_context_mask_gradient_is_exact() {
    let mut m = tiny(8, 1, 2, Ablation::None);
    randomise(&mut m, 3, 0.3);
    let f = m.features(&walkthrough()).unwrap();
    let t = Targets {
        rc: Some((PoolMask::Given(vec![false; f.len()]), 0)),
        ..Targets::default()
    };
    let (tensor, err) = worst_gradient_error(&m, &f, &t);
    assert!(err < 1e-4, "{tensor} {err:e}");
}

#[test]
fn identity_layers_return_embeddings() {
    let mut m = tiny(8, 2, 2, Ablation::None);
    randomise(&mut m, 1, 0.5);
    for l in m.layout.layers.clone() {
        for s in [l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.w1, l.b1, l.w2, l.b2] {
            s.of_mut(&mut m.params).fill(0.0);
        }
    }
    let f = m.features(&born_in()).unwrap();
    let out = m.encode(&f);
    let d = 8;
    for (i, &id) in f.ids.iter().take(3).enumerate() {
        for j in 0..d {
            let want = m.params[m.layout.tok_emb.off + id * d + j] + m.params[m.layout.pos_emb.off + i * d + j];
            assert_eq!(out.row(i)[j], want);
        }
    }
}

#[test]
fn encoding_is_deterministic_and_attention_normalised() {
    let mut m = tiny(16, 2, 4, Ablation::None);
    randomise(&mut m, 2, 0.4);
    let f = m.features(&walkthrough()).unwrap();
    let a = m.encode(&f);
    let b = m.encode(&f);
    assert_eq!(a, b);
    assert_eq!(a.n, f.len());
    for layer in &a.attention {
        for row in layer.chunks(a.n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    let cls = m.cls_attention(&walkthrough()).unwrap();
    assert_eq!(cls.len(), walkthrough().len());
}

#[test]
fn nrc_head_closed_forms() {
    let mut m = tiny(8, 1, 1, Ablation::None);
    let f = m.features(&born_in()).unwrap();
    m.layout.nrc_w.of_mut(&mut m.params).fill(0.0);
    assert_eq!(m.nrc_score(&m.encode(&f)), 0.5);
    let w = [0.5, -0.25, 1.0, 0.0, 0.75, -1.0, 0.125, 2.0];
    m.layout.nrc_w.of_mut(&mut m.params).copy_from_slice(&w);
    m.layout.nrc_b.of_mut(&mut m.params)[0] = 0.1;
    let out = m.encode(&f);
    let z: f64 = out.row(0).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.1;
    assert!((m.nrc_score(&out) - 1.0 / (1.0 + (-z).exp())).abs() < 1e-15);
    let mut prev = 0.0;
    for k in -5..=5 {
        m.layout.nrc_b.of_mut(&mut m.params)[0] = f64::from(k);
        let s = m.nrc_score(&out);
        assert!(s > prev);
        prev = s;
    }
}

#[test]
fn ec_scores_are_clamped_on_entities() {
    let mut m = tiny(8, 1, 1, Ablation::None);
    m.layout.ec_w.of_mut(&mut m.params).fill(0.0);
    let f = m.features(&born_in()).unwrap();
    let out = m.encode(&f);
    let scores = m.ec_scores(&out, &f);
    assert_eq!(scores.len(), 7);
    assert_eq!(scores, vec![0.0, 0.0, 0.5, 0.5, 0.5, 0.0, 0.5]);
    assert!(m.ec_logits(&out).iter().all(|&l| l == 0.0));
}

#[test]
fn rc_pooling_and_uniform_output() {
    let mut m = tiny(8, 1, 1, Ablation::None);
    let f = m.features(&born_in()).unwrap();
    let mut out = m.encode(&f);
    let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
    for i in f.context_positions().collect::<Vec<_>>() {
        out.row_mut(i).copy_from_slice(&v);
    }
    let feat = m.pooled(&out, &f.context, &f);
    assert_eq!(feat.len(), 24);
    assert_eq!(&feat[..8], &v);
    // A single selected position pools to itself.
    let mut one = vec![false; f.len()];
    one[3] = true;
    assert_eq!(&m.pooled(&out, &one, &f)[..8], out.row(3));
    assert!(m.pooled(&out, &vec![false; f.len()], &f)[..8].iter().all(|&x| x == 0.0));
    m.layout.rc_w.of_mut(&mut m.params).fill(0.0);
    let p = m.rc_distribution(&out, &f.context, &f);
    let k = m.classes().len() as f64;
    assert!(p.iter().all(|&x| (x - 1.0 / k).abs() < 1e-15));
}

#[test]
fn rc_ignores_unselected_context_rows() {
    let mut m = tiny(16, 2, 2, Ablation::None);
    randomise(&mut m, 5, 0.3);
    let f = m.features(&walkthrough()).unwrap();
    let out = m.encode(&f);
    let mut mask = vec![false; f.len()];
    mask[3] = true;
    let base = m.rc_distribution(&out, &mask, &f);
    for i in f.context_positions().filter(|&i| !mask[i]) {
        let mut moved = out.clone();
        moved.row_mut(i).iter_mut().for_each(|x| *x += 10.0);
        assert_eq!(m.rc_distribution(&moved, &mask, &f), base);
    }
}

#[test]
fn loss_matches_probability_form_and_decomposes() {
    let mut m = tiny(8, 1, 2, Ablation::None);
    randomise(&mut m, 9, 0.3);
    let f = m.features(&born_in()).unwrap();
    let t = full_targets(&m, &f);
    let got = m.loss(&f, &t);
    let out = m.encode(&f);
    let ec = m.ec_scores(&out, &f);
    let target = t.ec.clone().unwrap();
    let pairs: Vec<(f64, bool)> = f.context_positions().map(|i| (ec[i], target[i])).collect();
    let (PoolMask::Given(mask), class) = t.rc.clone().unwrap() else { unreachable!() };
    let p = m.rc_distribution(&out, &mask, &f);
    let want = joint_loss(Some((m.nrc_score(&out), true)), Some(&pairs), Some((&p, class)));
    assert!((got.nrc - want.nrc).abs() < 1e-12);
    assert!((got.ec - want.ec).abs() < 1e-12);
    assert!((got.rc - want.rc).abs() < 1e-12);
    assert!((got.total() - (got.nrc + got.ec + got.rc)).abs() < 1e-12);
}

fn batch(m: &Model) -> Vec<(Features, Targets)> {
    [born_in(), walkthrough()]
        .iter()
        .map(|i| {
            let f = m.features(i).unwrap();
            let t = full_targets(m, &f);
            (f, t)
        })
        .collect()
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let mut m = tiny(8, 1, 2, Ablation::None);
    m.config.lr = 0.0;
    let before = m.params.clone();
    let mut opt = m.optimizer();
    let b = batch(&m);
    m.train_step(&b, &mut opt, 1.0, 1, 0).unwrap();
    assert_eq!(m.params, before);
}

#[test]
fn training_trajectories_are_bitwise_reproducible() {
    let run = || {
        let mut m = tiny(8, 1, 2, Ablation::None);
        m.config.dropout = 0.2;
        let mut opt = m.optimizer();
        let b = batch(&m);
        for step in 0..5 {
            m.train_step(&b, &mut opt, 1.0, 42, step).unwrap();
        }
        m.params
    };
    assert_eq!(run(), run());
}

#[test]
fn a_few_steps_reduce_the_loss() {
    let mut m = tiny(16, 1, 2, Ablation::None);
    m.config.lr = 1e-2;
    let mut opt = m.optimizer();
    let b = batch(&m);
    let first = m.train_step(&b, &mut opt, 1.0, 0, 0).unwrap().total();
    let mut last = first;
    for step in 1..30 {
        last = m.train_step(&b, &mut opt, 1.0, 0, step).unwrap().total();
    }
    assert!(last < first * 0.5, "{first} -> {last}");
}

#[test]
fn non_finite_parameters_abort_with_batch() {
    let mut m = tiny(8, 1, 2, Ablation::None);
    m.params[m.layout.nrc_w.off] = f64::NAN;
    let mut opt = m.optimizer();
    let b = batch(&m);
    let err = m.train_step(&b, &mut opt, 1.0, 0, 17).unwrap_err();
    assert!(matches!(err, Error::NonFinite { batch: 17, .. }), "{err}");
}

#[test]
fn constant_model_has_zero_saliency() {
    let mut m = tiny(8, 1, 2, Ablation::None);
    m.params.fill(0.0);
    let s = m.embedding_gradients(&walkthrough()).unwrap();
    assert_eq!(s.len(), walkthrough().len());
    assert!(s.iter().all(|&x| x == 0.0));
}

#[test]
fn saliency_ranking_matches_perturbation() {
    let mut m = tiny(8, 1, 2, Ablation::Ec);
    randomise(&mut m, 11, 0.5);
    let inst = walkthrough();
    let sal = m.embedding_gradients(&inst).unwrap();
    let f = m.features(&inst).unwrap();
    let prob = |m: &Model| {
        let out = m.encode(&f);
        m.rc_distribution(&out, &f.context, &f)
    };
    let base = prob(&m);
    let top = (0..base.len()).fold(0, |b, k| if base[k] > base[b] { k } else { b });
    let eps = 1e-5;
    let mut fd = Vec::new();
    for i in 0..inst.len() {
        let mut total = 0.0;
        for j in 0..8 {
            let idx = m.layout.pos_emb.off + (i + 1) * 8 + j;
            let mut probe = m.clone();
            probe.params[idx] += eps;
            let up = prob(&probe)[top];
            probe.params[idx] -= 2.0 * eps;
            let down = prob(&probe)[top];
            total += ((up - down) / (2.0 * eps)).abs();
        }
        fd.push(total);
    }
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
        idx
    };
    assert_eq!(rank(&sal), rank(&fd));
    for (a, b) in sal.iter().zip(&fd) {
        assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()));
    }
}

#[test]
fn checkpoint_roundtrip_and_rejections() {
    let mut m = tiny(8, 2, 2, Ablation::Nrc);
    randomise(&mut m, 4, 0.2);
    m.nrc_threshold = 0.4;
    let bytes = m.to_bytes().unwrap();
    assert_eq!(&bytes[..4], b"RXF1");
    let back = Model::from_bytes(&bytes).unwrap();
    let mut rounded = m.clone();
    rounded.round_to_f32();
    assert_eq!(back, rounded);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let mut wrong_version = bytes.clone();
    wrong_version[4] = 9;
    assert!(matches!(Model::from_bytes(&wrong_version), Err(Error::Checkpoint(m)) if m.contains("version")));
    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    assert!(Model::from_bytes(&wrong_magic).is_err());
    assert!(Model::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut wrong_shape = bytes.clone();
    wrong_shape[12 + header_len] ^= 1;
    let err = Model::from_bytes(&wrong_shape).unwrap_err();
    assert!(err.to_string().contains("tok_emb"), "{err}");
}

#[test]
fn over_length_sequences_are_rejected() {
    let mut m = tiny(8, 1, 1, Ablation::None);
    m.config.max_seq_len = 5;
    assert!(matches!(m.features(&born_in()), Err(Error::Truncation { len: 7, max: 5 })));
}

#[test]
fn ablations_change_the_class_set() {
    let m = tiny(8, 1, 1, Ablation::Nrc);
    assert_eq!(m.classes().last().map(String::as_str), Some(crate::NO_RELATION));
    assert_eq!(m.class_index(crate::NO_RELATION), Some(m.relations.len()));
    let m = tiny(8, 1, 1, Ablation::Ec);
    let p = m.predict(&walkthrough()).unwrap();
    assert!(p.rationale.is_empty());
}

#[test]
fn word_dropout_only_touches_context_tokens() {
    let mut m = tiny(8, 1, 1, Ablation::None);
    let f = m.features(&walkthrough()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    m.config.word_dropout = 0.0;
    assert!(m.drop_words(&f, &mut rng).is_none());
    m.config.word_dropout = 0.999;
    let noisy = m.drop_words(&f, &mut rng).unwrap();
    for i in 0..f.len() {
        if f.context[i] {
            assert_eq!(noisy.ids[i], TokenVocab::UNK_ID);
        } else {
            assert_eq!(noisy.ids[i], f.ids[i]);
        }
    }
}
