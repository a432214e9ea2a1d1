//! Pre-norm causal transformer over a flat `f64` parameter vector, with a
//! hand-written backward pass and an incremental decoder.
//!
//! The full-sequence forward pass and the decoder share the per-position
//! kernels below, so a token's logits are bit-identical whichever path
//! produced them.

use std::ops::Range;

use super::arch::{BlockLayout, Layout, PolicyArch};
use crate::tasks::TokenId;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn linear(x: &[f64], w: &[f64], b: Option<&[f64]>, y: &mut [f64]) {
    let n_out = y.len();
    match b {
        Some(b) => y.copy_from_slice(b),
        None => y.fill(0.0),
    }
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * n_out..(i + 1) * n_out];
        for (yj, &wij) in y.iter_mut().zip(row) {
            *yj += xi * wij;
        }
    }
}

/// Accumulates `dx += dy W^T`, `dW += x^T dy`, `db += dy`.
fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) {
    let n_out = dy.len();
    if let Some(db) = db {
        for (dbj, &g) in db.iter_mut().zip(dy) {
            *dbj += g;
        }
    }
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * n_out..(i + 1) * n_out];
        let drow = &mut dw[i * n_out..(i + 1) * n_out];
        let mut acc = 0.0;
        for j in 0..n_out {
            acc += row[j] * dy[j];
            drow[j] += xi * dy[j];
        }
        dx[i] += acc;
    }
}

/// Writes `xhat` and `y = gamma * xhat + beta`; returns `1 / sqrt(var + eps)`.
fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], xhat: &mut [f64], y: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * rstd;
        y[i] = gamma[i] * xhat[i] + beta[i];
    }
    rstd
}

fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: f64,
    gamma: &[f64],
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let n = dy.len() as f64;
    let mut mean_dxhat = 0.0;
    let mut mean_dxhat_xhat = 0.0;
    for i in 0..dy.len() {
        dgamma[i] += dy[i] * xhat[i];
        dbeta[i] += dy[i];
        let dxh = dy[i] * gamma[i];
        mean_dxhat += dxh;
        mean_dxhat_xhat += dxh * xhat[i];
    }
    mean_dxhat /= n;
    mean_dxhat_xhat /= n;
    for i in 0..dy.len() {
        let dxh = dy[i] * gamma[i];
        dx[i] += rstd * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat);
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Causal attention for the query at position `t` (the last cached row).
///
/// `keys`/`values` hold rows `0..=t` with stride `d`. Writes per-head
/// probabilities into `probs[h * stride + u]` and the context vector into `ctx`.
fn attend(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    t: usize,
    n_heads: usize,
    probs: &mut [f64],
    stride: usize,
    ctx: &mut [f64],
) {
    let d = q.len();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    ctx.fill(0.0);
    for h in 0..n_heads {
        let qh = &q[h * hd..(h + 1) * hd];
        let p = &mut probs[h * stride..h * stride + t + 1];
        let mut max = f64::NEG_INFINITY;
        for (u, pu) in p.iter_mut().enumerate() {
            let kh = &keys[u * d + h * hd..u * d + (h + 1) * hd];
            let s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
            *pu = s;
            max = max.max(s);
        }
        let mut z = 0.0;
        for pu in p.iter_mut() {
            *pu = (*pu - max).exp();
            z += *pu;
        }
        let ch = &mut ctx[h * hd..(h + 1) * hd];
        for (u, pu) in p.iter_mut().enumerate() {
            *pu /= z;
            let vh = &values[u * d + h * hd..u * d + (h + 1) * hd];
            for (c, &v) in ch.iter_mut().zip(vh) {
                *c += *pu * v;
            }
        }
    }
}

/// Log-softmax of one logits row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

struct View<'a> {
    p: &'a [f64],
}

impl<'a> View<'a> {
    fn get(&self, r: &Range<usize>) -> &'a [f64] {
        &self.p[r.clone()]
    }
}

/// Two disjoint mutable ranges of one buffer; `a` must precede `b`.
fn two_mut<'a>(
    buf: &'a mut [f64],
    a: &Range<usize>,
    b: &Range<usize>,
) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = buf.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

struct BlockTrace {
    ln1_xhat: Vec<f64>,
    ln1_rstd: Vec<f64>,
    h1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `[t][h][u]`, row stride `len`.
    probs: Vec<f64>,
    ctx: Vec<f64>,
    ln2_xhat: Vec<f64>,
    ln2_rstd: Vec<f64>,
    h2: Vec<f64>,
    f_pre: Vec<f64>,
    f_act: Vec<f64>,
}

/// Activations of one full-sequence forward pass.
pub struct Trace {
    tokens: Vec<TokenId>,
    blocks: Vec<BlockTrace>,
    lnf_xhat: Vec<f64>,
    lnf_rstd: Vec<f64>,
    hf: Vec<f64>,
    /// `[len * vocab]`.
    pub logits: Vec<f64>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn logits_at(&self, t: usize, vocab: usize) -> &[f64] {
        &self.logits[t * vocab..(t + 1) * vocab]
    }
}

fn block_position(
    w: &View,
    b: &BlockLayout,
    arch: &PolicyArch,
    x: &mut [f64],
    t: usize,
    keys: &mut [f64],
    values: &mut [f64],
    scratch: &mut PositionScratch,
) {
    let d = arch.d_model;
    let ps = scratch;
    ps.ln1_rstd = layer_norm(
        x,
        w.get(&b.ln1_g),
        w.get(&b.ln1_b),
        &mut ps.ln1_xhat,
        &mut ps.h1,
    );
    linear(&ps.h1, w.get(&b.wq), Some(w.get(&b.bq)), &mut ps.q);
    linear(&ps.h1, w.get(&b.wk), None, &mut keys[t * d..(t + 1) * d]);
    linear(
        &ps.h1,
        w.get(&b.wv),
        Some(w.get(&b.bv)),
        &mut values[t * d..(t + 1) * d],
    );
    attend(
        &ps.q,
        keys,
        values,
        t,
        arch.n_heads,
        &mut ps.probs,
        ps.probs_stride,
        &mut ps.ctx,
    );
    linear(&ps.ctx, w.get(&b.wo), Some(w.get(&b.bo)), &mut ps.tmp_d);
    for i in 0..d {
        x[i] += ps.tmp_d[i];
    }
    ps.ln2_rstd = layer_norm(
        x,
        w.get(&b.ln2_g),
        w.get(&b.ln2_b),
        &mut ps.ln2_xhat,
        &mut ps.h2,
    );
    linear(&ps.h2, w.get(&b.w1), Some(w.get(&b.b1)), &mut ps.f_pre);
    for (a, &f) in ps.f_act.iter_mut().zip(&ps.f_pre) {
        *a = gelu(f);
    }
    linear(&ps.f_act, w.get(&b.w2), Some(w.get(&b.b2)), &mut ps.tmp_d);
    for i in 0..d {
        x[i] += ps.tmp_d[i];
    }
}

struct PositionScratch {
    ln1_xhat: Vec<f64>,
    ln1_rstd: f64,
    h1: Vec<f64>,
    q: Vec<f64>,
    probs: Vec<f64>,
    probs_stride: usize,
    ctx: Vec<f64>,
    tmp_d: Vec<f64>,
    ln2_xhat: Vec<f64>,
    ln2_rstd: f64,
    h2: Vec<f64>,
    f_pre: Vec<f64>,
    f_act: Vec<f64>,
}

impl PositionScratch {
    fn new(arch: &PolicyArch, probs_stride: usize) -> Self {
        let d = arch.d_model;
        Self {
            ln1_xhat: vec![0.0; d],
            ln1_rstd: 0.0,
            h1: vec![0.0; d],
            q: vec![0.0; d],
            probs: vec![0.0; arch.n_heads * probs_stride],
            probs_stride,
            ctx: vec![0.0; d],
            tmp_d: vec![0.0; d],
            ln2_xhat: vec![0.0; d],
            ln2_rstd: 0.0,
            h2: vec![0.0; d],
            f_pre: vec![0.0; arch.d_ff],
            f_act: vec![0.0; arch.d_ff],
        }
    }
}

fn embed(w: &View, layout: &Layout, d: usize, token: TokenId, t: usize, x: &mut [f64]) {
    let tok = &w.get(&layout.tok_emb)[token as usize * d..(token as usize + 1) * d];
    let pos = &w.get(&layout.pos_emb)[t * d..(t + 1) * d];
    for i in 0..d {
        x[i] = tok[i] + pos[i];
    }
}

fn head(
    w: &View,
    layout: &Layout,
    x: &[f64],
    xhat: &mut [f64],
    hf: &mut [f64],
    logits: &mut [f64],
) -> f64 {
    let rstd = layer_norm(x, w.get(&layout.lnf_g), w.get(&layout.lnf_b), xhat, hf);
    linear(hf, w.get(&layout.w_out), Some(w.get(&layout.b_out)), logits);
    rstd
}

/// Runs the whole sequence, keeping every activation for [`backward`].
pub fn forward(arch: &PolicyArch, layout: &Layout, params: &[f64], tokens: &[TokenId]) -> Trace {
    let (d, ff, v, nh) = (arch.d_model, arch.d_ff, arch.vocab_size, arch.n_heads);
    let len = tokens.len();
    assert!(
        len <= arch.max_context,
        "sequence of {len} exceeds context {}",
        arch.max_context
    );
    let w = View { p: params };
    let mut xs = vec![0.0; len * d];
    for (t, &tok) in tokens.iter().enumerate() {
        embed(&w, layout, d, tok, t, &mut xs[t * d..(t + 1) * d]);
    }
    let mut blocks = Vec::with_capacity(layout.blocks.len());
    let mut scratch = PositionScratch::new(arch, len);
    for b in &layout.blocks {
        let mut bt = BlockTrace {
            ln1_xhat: vec![0.0; len * d],
            ln1_rstd: vec![0.0; len],
            h1: vec![0.0; len * d],
            q: vec![0.0; len * d],
            k: vec![0.0; len * d],
            v: vec![0.0; len * d],
            probs: vec![0.0; len * nh * len],
            ctx: vec![0.0; len * d],
            ln2_xhat: vec![0.0; len * d],
            ln2_rstd: vec![0.0; len],
            h2: vec![0.0; len * d],
            f_pre: vec![0.0; len * ff],
            f_act: vec![0.0; len * ff],
        };
        for t in 0..len {
            let x = &mut xs[t * d..(t + 1) * d];
            block_position(&w, b, arch, x, t, &mut bt.k, &mut bt.v, &mut scratch);
            let rd = t * d..(t + 1) * d;
            bt.ln1_xhat[rd.clone()].copy_from_slice(&scratch.ln1_xhat);
            bt.ln1_rstd[t] = scratch.ln1_rstd;
            bt.h1[rd.clone()].copy_from_slice(&scratch.h1);
            bt.q[rd.clone()].copy_from_slice(&scratch.q);
            bt.probs[t * nh * len..(t + 1) * nh * len].copy_from_slice(&scratch.probs);
            bt.ctx[rd.clone()].copy_from_slice(&scratch.ctx);
            bt.ln2_xhat[rd.clone()].copy_from_slice(&scratch.ln2_xhat);
            bt.ln2_rstd[t] = scratch.ln2_rstd;
            bt.h2[rd].copy_from_slice(&scratch.h2);
            bt.f_pre[t * ff..(t + 1) * ff].copy_from_slice(&scratch.f_pre);
            bt.f_act[t * ff..(t + 1) * ff].copy_from_slice(&scratch.f_act);
        }
        blocks.push(bt);
    }
    let mut lnf_xhat = vec![0.0; len * d];
    let mut lnf_rstd = vec![0.0; len];
    let mut hf = vec![0.0; len * d];
    let mut logits = vec![0.0; len * v];
    for t in 0..len {
        let rd = t * d..(t + 1) * d;
        lnf_rstd[t] = head(
            &w,
            layout,
            &xs[rd.clone()],
            &mut lnf_xhat[rd.clone()],
            &mut hf[rd],
            &mut logits[t * v..(t + 1) * v],
        );
    }
    Trace {
        tokens: tokens.to_vec(),
        blocks,
        lnf_xhat,
        lnf_rstd,
        hf,
        logits,
    }
}

/// Accumulates into `grad` the gradient of `sum(dlogits * logits)`.
pub fn backward(
    arch: &PolicyArch,
    layout: &Layout,
    params: &[f64],
    trace: &Trace,
    dlogits: &[f64],
    grad: &mut [f64],
) {
    let (d, ff, v, nh) = (arch.d_model, arch.d_ff, arch.vocab_size, arch.n_heads);
    let hd = d / nh;
    let scale = 1.0 / (hd as f64).sqrt();
    let len = trace.len();
    let w = View { p: params };
    assert_eq!(dlogits.len(), len * v);
    assert_eq!(grad.len(), layout.total);

    let mut dx = vec![0.0; len * d];
    {
        let mut dhf = vec![0.0; d];
        for t in 0..len {
            let rd = t * d..(t + 1) * d;
            let dl = &dlogits[t * v..(t + 1) * v];
            if dl.iter().all(|&g| g == 0.0) {
                continue;
            }
            dhf.fill(0.0);
            let (dw, db) = two_mut(grad, &layout.w_out, &layout.b_out);
            linear_backward(
                &trace.hf[rd.clone()],
                w.get(&layout.w_out),
                dl,
                &mut dhf,
                dw,
                Some(db),
            );
            let (dg, dbeta) = two_mut(grad, &layout.lnf_g, &layout.lnf_b);
            layer_norm_backward(
                &dhf,
                &trace.lnf_xhat[rd.clone()],
                trace.lnf_rstd[t],
                w.get(&layout.lnf_g),
                &mut dx[rd],
                dg,
                dbeta,
            );
        }
    }

    let mut dpre = vec![0.0; len * ff];
    let mut dh = vec![0.0; len * d];
    let mut dctx = vec![0.0; len * d];
    let mut dq = vec![0.0; len * d];
    let mut dk = vec![0.0; len * d];
    let mut dv = vec![0.0; len * d];
    let mut dp = vec![0.0; len];
    let mut dact = vec![0.0; ff];
    for (b, bt) in layout.blocks.iter().zip(&trace.blocks).rev() {
        // Feed-forward branch; dx is the gradient at the block output.
        dpre.fill(0.0);
        dh.fill(0.0);
        for t in 0..len {
            let rd = t * d..(t + 1) * d;
            let rf = t * ff..(t + 1) * ff;
            dact.fill(0.0);
            let (dw2, db2) = two_mut(grad, &b.w2, &b.b2);
            linear_backward(
                &bt.f_act[rf.clone()],
                w.get(&b.w2),
                &dx[rd.clone()],
                &mut dact,
                dw2,
                Some(db2),
            );
            for (i, da) in dact.iter().enumerate() {
                dpre[t * ff + i] = da * gelu_grad(bt.f_pre[t * ff + i]);
            }
            let (dw1, db1) = two_mut(grad, &b.w1, &b.b1);
            linear_backward(
                &bt.h2[rd.clone()],
                w.get(&b.w1),
                &dpre[rf],
                &mut dh[rd.clone()],
                dw1,
                Some(db1),
            );
            let (dg, dbeta) = two_mut(grad, &b.ln2_g, &b.ln2_b);
            layer_norm_backward(
                &dh[rd.clone()],
                &bt.ln2_xhat[rd.clone()],
                bt.ln2_rstd[t],
                w.get(&b.ln2_g),
                &mut dx[rd],
                dg,
                dbeta,
            );
        }
        // Attention branch; dx is now the gradient at the residual midpoint.
        dctx.fill(0.0);
        for t in 0..len {
            let rd = t * d..(t + 1) * d;
            let (dwo, dbo) = two_mut(grad, &b.wo, &b.bo);
            linear_backward(
                &bt.ctx[rd.clone()],
                w.get(&b.wo),
                &dx[rd.clone()],
                &mut dctx[rd],
                dwo,
                Some(dbo),
            );
        }
        dq.fill(0.0);
        dk.fill(0.0);
        dv.fill(0.0);
        for t in 0..len {
            for h in 0..nh {
                let hs = h * hd..(h + 1) * hd;
                let p = &bt.probs[(t * nh + h) * len..(t * nh + h) * len + t + 1];
                let dc = &dctx[t * d + hs.start..t * d + hs.end];
                let mut sum = 0.0;
                for u in 0..=t {
                    let vh = &bt.v[u * d + hs.start..u * d + hs.end];
                    dp[u] = dc.iter().zip(vh).map(|(a, b)| a * b).sum::<f64>();
                    sum += p[u] * dp[u];
                    for (dvi, &c) in dv[u * d + hs.start..u * d + hs.end].iter_mut().zip(dc) {
                        *dvi += p[u] * c;
                    }
                }
                for u in 0..=t {
                    let ds = p[u] * (dp[u] - sum) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for i in hs.clone() {
                        dq[t * d + i] += ds * bt.k[u * d + i];
                        dk[u * d + i] += ds * bt.q[t * d + i];
                    }
                }
            }
        }
        dh.fill(0.0);
        for t in 0..len {
            let rd = t * d..(t + 1) * d;
            let h1 = &bt.h1[rd.clone()];
            let (dwq, dbq) = two_mut(grad, &b.wq, &b.bq);
            linear_backward(
                h1,
                w.get(&b.wq),
                &dq[rd.clone()],
                &mut dh[rd.clone()],
                dwq,
                Some(dbq),
            );
            linear_backward(
                h1,
                w.get(&b.wk),
                &dk[rd.clone()],
                &mut dh[rd.clone()],
                &mut grad[b.wk.clone()],
                None,
            );
            let (dwv, dbv) = two_mut(grad, &b.wv, &b.bv);
            linear_backward(
                h1,
                w.get(&b.wv),
                &dv[rd.clone()],
                &mut dh[rd.clone()],
                dwv,
                Some(dbv),
            );
            let (dg, dbeta) = two_mut(grad, &b.ln1_g, &b.ln1_b);
            layer_norm_backward(
                &dh[rd.clone()],
                &bt.ln1_xhat[rd.clone()],
                bt.ln1_rstd[t],
                w.get(&b.ln1_g),
                &mut dx[rd],
                dg,
                dbeta,
            );
        }
    }

    for (t, &tok) in trace.tokens.iter().enumerate() {
        let src = &dx[t * d..(t + 1) * d];
        let te = layout.tok_emb.start + tok as usize * d;
        for i in 0..d {
            grad[te + i] += src[i];
        }
        let pe = layout.pos_emb.start + t * d;
        for i in 0..d {
            grad[pe + i] += src[i];
        }
    }
}

/// Incremental decoder with a per-block key/value cache.
pub struct Decoder<'a> {
    arch: &'a PolicyArch,
    layout: &'a Layout,
    params: &'a [f64],
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pos: usize,
    scratch: PositionScratch,
    x: Vec<f64>,
    xhat: Vec<f64>,
    hf: Vec<f64>,
    logits: Vec<f64>,
}

impl<'a> Decoder<'a> {
    pub fn new(arch: &'a PolicyArch, layout: &'a Layout, params: &'a [f64]) -> Self {
        let d = arch.d_model;
        let c = arch.max_context;
        Self {
            arch,
            layout,
            params,
            keys: vec![vec![0.0; c * d]; layout.blocks.len()],
            values: vec![vec![0.0; c * d]; layout.blocks.len()],
            pos: 0,
            // Probability rows are scratch here; only entries 0..=t are read.
            scratch: PositionScratch::new(arch, c),
            x: vec![0.0; d],
            xhat: vec![0.0; d],
            hf: vec![0.0; d],
            logits: vec![0.0; arch.vocab_size],
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Appends `token` and returns the logits for the next position.
    pub fn feed(&mut self, token: TokenId) -> &[f64] {
        assert!(
            self.pos < self.arch.max_context,
            "decoder context exhausted"
        );
        let w = View { p: self.params };
        let t = self.pos;
        embed(&w, self.layout, self.arch.d_model, token, t, &mut self.x);
        for (bi, b) in self.layout.blocks.iter().enumerate() {
            block_position(
                &w,
                b,
                self.arch,
                &mut self.x,
                t,
                &mut self.keys[bi],
                &mut self.values[bi],
                &mut self.scratch,
            );
        }
        head(
            &w,
            self.layout,
            &self.x,
            &mut self.xhat,
            &mut self.hf,
            &mut self.logits,
        );
        self.pos += 1;
        &self.logits
    }
}
