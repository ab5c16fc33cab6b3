//! Pre-norm transformer encoder: learned positions, multi-head self-attention
//! and a GELU feed-forward block per layer, residual stream left unnormalised
//! at the output.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ops::{
    gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, linear, linear_backward, softmax_in_place,
    LnCache, View,
};
use super::params::{LayerSegs, Layout, ModelConfig};

/// Contextual vectors `h_0..h_n` (`h_0` is `[CLS]`) and every layer's
/// attention weights, `heads × n × n` per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub n: usize,
    pub d: usize,
    pub h: Vec<f64>,
    pub attention: Vec<Vec<f64>>,
}

impl EncoderOutput {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.h[i * self.d..(i + 1) * self.d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.h[i * self.d..(i + 1) * self.d]
    }

    /// Attention row of query `i` in `layer`, averaged over heads.
    pub fn mean_attention(&self, layer: usize, i: usize) -> Vec<f64> {
        let n = self.n;
        let a = &self.attention[layer];
        let heads = a.len() / (n * n);
        let mut out = vec![0.0; n];
        for h in 0..heads {
            let row = &a[h * n * n + i * n..h * n * n + (i + 1) * n];
            for (o, v) in out.iter_mut().zip(row) {
                *o += v / heads as f64;
            }
        }
        out
    }
}

struct LayerCache {
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    o: Vec<f64>,
    drop_attn: Option<Vec<f64>>,
    ln2: LnCache,
    c: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
    drop_ff: Option<Vec<f64>>,
}

/// Everything the backward pass needs from one forward pass.
pub(crate) struct Trace {
    ids: Vec<usize>,
    drop_emb: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
    attention: Vec<Vec<f64>>,
}

fn dropout_mask(rng: &mut Option<&mut ChaCha8Rng>, p: f64, len: usize) -> Option<Vec<f64>> {
    let rng = rng.as_deref_mut()?;
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some((0..len).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect())
}

fn apply(mask: &Option<Vec<f64>>, x: &mut [f64]) {
    if let Some(m) = mask {
        for (v, s) in x.iter_mut().zip(m) {
            *v *= s;
        }
    }
}

/// Runs the encoder. Passing a generator turns dropout on; `keep_trace`
/// retains the activations for [`backward`].
pub(crate) fn forward(
    cfg: &ModelConfig,
    layout: &Layout,
    p: &[f64],
    ids: &[usize],
    mut rng: Option<&mut ChaCha8Rng>,
    keep_trace: bool,
) -> (EncoderOutput, Option<Trace>) {
    let (n, d) = (ids.len(), cfg.d);
    let tok = layout.tok_emb.of(p);
    let pos = layout.pos_emb.of(p);
    let mut x = vec![0.0; n * d];
    for (i, &id) in ids.iter().enumerate() {
        for j in 0..d {
            x[i * d + j] = tok[id * d + j] + pos[i * d + j];
        }
    }
    let drop_emb = dropout_mask(&mut rng, cfg.dropout, n * d);
    apply(&drop_emb, &mut x);
    let mut caches = Vec::new();
    let mut attention = Vec::with_capacity(cfg.layers);
    for seg in &layout.layers {
        let (x_next, cache, probs) = layer_forward(cfg, seg, p, x, &mut rng);
        attention.push(probs);
        if keep_trace {
            caches.push(cache);
        }
        x = x_next;
    }
    let out = EncoderOutput {
        n,
        d,
        h: x,
        attention: attention.clone(),
    };
    let trace = keep_trace.then(|| Trace {
        ids: ids.to_vec(),
        drop_emb,
        layers: caches,
        attention,
    });
    (out, trace)
}

fn layer_forward(
    cfg: &ModelConfig,
    s: &LayerSegs,
    p: &[f64],
    x: Vec<f64>,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> (Vec<f64>, LayerCache, Vec<f64>) {
    let (d, f, heads) = (cfg.d, cfg.ff(), cfg.heads);
    let n = x.len() / d;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (a, ln1) = layer_norm(&x, s.ln1_g.of(p), s.ln1_b.of(p), d);
    let q = linear(&a, s.wq.of(p), s.bq.of(p), n, d, d);
    let k = linear(&a, s.wk.of(p), s.bk.of(p), n, d, d);
    let v = linear(&a, s.wv.of(p), s.bv.of(p), n, d, d);
    let mut probs = vec![0.0; heads * n * n];
    let mut o = vec![0.0; n * d];
    for h in 0..heads {
        let ph = &mut probs[h * n * n..(h + 1) * n * n];
        gemm(n, dh, n, scale, &q[h * dh..], View::rows(d), &k[h * dh..], View::t(d), 0.0, ph, View::rows(n));
        for row in ph.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        gemm(n, n, dh, 1.0, ph, View::rows(n), &v[h * dh..], View::rows(d), 0.0, &mut o[h * dh..], View::rows(d));
    }
    let mut attn = linear(&o, s.wo.of(p), s.bo.of(p), n, d, d);
    let drop_attn = dropout_mask(rng, cfg.dropout, n * d);
    apply(&drop_attn, &mut attn);
    let x1: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
    let (c, ln2) = layer_norm(&x1, s.ln2_g.of(p), s.ln2_b.of(p), d);
    let u = linear(&c, s.w1.of(p), s.b1.of(p), n, d, f);
    let g: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
    let mut ff = linear(&g, s.w2.of(p), s.b2.of(p), n, f, d);
    let drop_ff = dropout_mask(rng, cfg.dropout, n * d);
    apply(&drop_ff, &mut ff);
    let out: Vec<f64> = x1.iter().zip(&ff).map(|(a, b)| a + b).collect();
    let cache = LayerCache {
        ln1,
        a,
        q,
        k,
        v,
        o,
        drop_attn,
        ln2,
        c,
        u,
        g,
        drop_ff,
    };
    (out, cache, probs)
}

/// Back-propagates `dh` (gradient w.r.t. the encoder output) into `grads`
/// and returns the gradient w.r.t. the summed token and position embeddings.
pub(crate) fn backward(
    cfg: &ModelConfig,
    layout: &Layout,
    p: &[f64],
    trace: &Trace,
    dh: Vec<f64>,
    grads: &mut [f64],
) -> Vec<f64> {
    let d = cfg.d;
    let mut dx = dh;
    for (l, seg) in layout.layers.iter().enumerate().rev() {
        dx = layer_backward(cfg, seg, p, &trace.layers[l], &trace.attention[l], dx, grads);
    }
    apply(&trace.drop_emb, &mut dx);
    let dtok = layout.tok_emb;
    let dpos = layout.pos_emb;
    for (i, &id) in trace.ids.iter().enumerate() {
        let row = &dx[i * d..(i + 1) * d];
        for j in 0..d {
            grads[dtok.off + id * d + j] += row[j];
            grads[dpos.off + i * d + j] += row[j];
        }
    }
    dx
}

#[allow(clippy::too_many_arguments)]
fn layer_backward(
    cfg: &ModelConfig,
    s: &LayerSegs,
    p: &[f64],
    c: &LayerCache,
    probs: &[f64],
    dout: Vec<f64>,
    grads: &mut [f64],
) -> Vec<f64> {
    let (d, f, heads) = (cfg.d, cfg.ff(), cfg.heads);
    let n = dout.len() / d;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // Feed-forward branch.
    let mut dff = dout.clone();
    apply(&c.drop_ff, &mut dff);
    let (dw2, db2) = split2(grads, s.w2, s.b2);
    let dg = linear_backward(&c.g, s.w2.of(p), &dff, dw2, db2, n, f, d);
    let du: Vec<f64> = dg.iter().zip(&c.u).map(|(g, &u)| g * gelu_grad(u)).collect();
    let (dw1, db1) = split2(grads, s.w1, s.b1);
    let dc = linear_backward(&c.c, s.w1.of(p), &du, dw1, db1, n, d, f);
    let (dg2, db2n) = split2(grads, s.ln2_g, s.ln2_b);
    let dx1_ln = layer_norm_backward(&c.ln2, s.ln2_g.of(p), &dc, dg2, db2n, d);
    let dx1: Vec<f64> = dout.iter().zip(&dx1_ln).map(|(a, b)| a + b).collect();

    // Attention branch.
    let mut dattn = dx1.clone();
    apply(&c.drop_attn, &mut dattn);
    let (dwo, dbo) = split2(grads, s.wo, s.bo);
    let do_ = linear_backward(&c.o, s.wo.of(p), &dattn, dwo, dbo, n, d, d);
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    let mut dp = vec![0.0; n * n];
    for h in 0..heads {
        let ph = &probs[h * n * n..(h + 1) * n * n];
        gemm(n, dh, n, 1.0, &do_[h * dh..], View::rows(d), &c.v[h * dh..], View::t(d), 0.0, &mut dp, View::rows(n));
        gemm(n, n, dh, 1.0, ph, View::t(n), &do_[h * dh..], View::rows(d), 0.0, &mut dv[h * dh..], View::rows(d));
        for (prow, dprow) in ph.chunks_exact(n).zip(dp.chunks_exact_mut(n)) {
            let s: f64 = prow.iter().zip(dprow.iter()).map(|(a, b)| a * b).sum();
            for (g, &pv) in dprow.iter_mut().zip(prow) {
                *g = pv * (*g - s) * scale;
            }
        }
        gemm(n, n, dh, 1.0, &dp, View::rows(n), &c.k[h * dh..], View::rows(d), 0.0, &mut dq[h * dh..], View::rows(d));
        gemm(n, n, dh, 1.0, &dp, View::t(n), &c.q[h * dh..], View::rows(d), 0.0, &mut dk[h * dh..], View::rows(d));
    }
    let mut da = vec![0.0; n * d];
    for (w, b, dy) in [(s.wq, s.bq, &dq), (s.wk, s.bk, &dk), (s.wv, s.bv, &dv)] {
        let (dw, db) = split2(grads, w, b);
        let part = linear_backward(&c.a, w.of(p), dy, dw, db, n, d, d);
        for (x, y) in da.iter_mut().zip(&part) {
            *x += y;
        }
    }
    let (dg1, db1n) = split2(grads, s.ln1_g, s.ln1_b);
    let dx_ln = layer_norm_backward(&c.ln1, s.ln1_g.of(p), &da, dg1, db1n, d);
    dx1.iter().zip(&dx_ln).map(|(a, b)| a + b).collect()
}

/// Two disjoint mutable segments of the gradient buffer; `a` precedes `b`.
fn split2(grads: &mut [f64], a: super::params::Seg, b: super::params::Seg) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.off + a.len <= b.off);
    let (left, right) = grads.split_at_mut(b.off);
    (&mut left[a.range()], &mut right[..b.len])
}
