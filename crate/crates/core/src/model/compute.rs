//! `f64` forward and backward passes.
//!
//! Everything here works on a [`ParamsF64`] (one `Vec<f64>` per parameter in
//! layout order) so the same code serves fast training, inference on `f32`
//! models and finite-difference verification.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Batch, Component, Dataset, Layout, Metric, ModelConfig, TaskHead, TransformerModel};

pub type ParamsF64 = Vec<Vec<f64>>;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Loss and correct-prediction counts of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    /// Mean cross-entropy over examples (classification) or positions (LM).
    pub loss: f64,
    /// Correct argmax predictions.
    pub correct: usize,
    /// Number of predictions scored.
    pub count: usize,
}

// ---------------------------------------------------------------------------
// kernels

/// `y = x wᵀ` for `x: rows x n_in`, `w: n_out x n_in`.
fn linear(x: &[f64], rows: usize, n_in: usize, w: &[f64], n_out: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * n_out];
    for r in 0..rows {
        let xr = &x[r * n_in..(r + 1) * n_in];
        for (o, yo) in y[r * n_out..(r + 1) * n_out].iter_mut().enumerate() {
            *yo = dot(xr, &w[o * n_in..(o + 1) * n_in]);
        }
    }
    y
}

/// Accumulates `dw += dyᵀ x` and returns `dx = dy w`.
fn linear_backward(
    dy: &[f64],
    x: &[f64],
    rows: usize,
    n_in: usize,
    w: &[f64],
    n_out: usize,
    dw: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * n_in];
    for r in 0..rows {
        let xr = &x[r * n_in..(r + 1) * n_in];
        let dxr = &mut dx[r * n_in..(r + 1) * n_in];
        for o in 0..n_out {
            let g = dy[r * n_out + o];
            if g == 0.0 {
                continue;
            }
            axpy(g, &w[o * n_in..(o + 1) * n_in], dxr);
            axpy(g, xr, &mut dw[o * n_in..(o + 1) * n_in]);
        }
    }
    dx
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], rows: usize, d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = s;
        for j in 0..d {
            let h = (xr[j] - mean) * s;
            xhat[r * d + j] = h;
            y[r * d + j] = h * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &[f64],
    cache: &LnCache,
    rows: usize,
    d: usize,
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * d];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dot(&dxhat, xh) / d as f64;
        let s = cache.rstd[r];
        for j in 0..d {
            dx[r * d + j] = s * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

#[inline]
fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

#[inline]
fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

/// Numerically stable log-softmax of one row, written into `out`.
fn log_softmax(row: &[f64], out: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    for (o, &z) in out.iter_mut().zip(row) {
        *o = z - lse;
    }
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// per-sequence forward with cache

struct LayerCache {
    x_in: Vec<f64>,
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Attention probabilities, `heads x t x t`.
    probs: Vec<f64>,
    ctx: Vec<f64>,
    ln2: LnCache,
    c: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

struct SeqCache {
    layers: Vec<LayerCache>,
    lnf: LnCache,
    /// Final normalized hidden states, `t x d`.
    z: Vec<f64>,
    /// Layer outputs (post residual), kept only when capturing.
    outputs: Vec<Vec<f64>>,
}

struct Net<'a> {
    cfg: &'a ModelConfig,
    layout: Layout,
    p: &'a [Vec<f64>],
}

impl<'a> Net<'a> {
    fn new(cfg: &'a ModelConfig, p: &'a [Vec<f64>]) -> Result<Self> {
        let layout = cfg.layout();
        if p.len() != layout.len() {
            return Err(Error::dim(format!(
                "expected {} parameter vectors, got {}",
                layout.len(),
                p.len()
            )));
        }
        for (i, v) in p.iter().enumerate() {
            let n: usize = layout.shape(i).iter().product();
            if v.len() != n {
                return Err(Error::dim(format!(
                    "{}: expected {n} values, got {}",
                    layout.name(i),
                    v.len()
                )));
            }
        }
        Ok(Self { cfg, layout, p })
    }

    fn w(&self, layer: usize, c: Component) -> &[f64] {
        &self.p[self.layout.layer(layer, c)]
    }

    fn causal(&self) -> bool {
        matches!(self.cfg.task_head, TaskHead::LanguageModel)
    }

    fn forward_seq(&self, tokens: &[u32], capture: bool) -> SeqCache {
        let t = tokens.len();
        let d = self.cfg.d_model;
        let f = self.cfg.d_ff;
        let heads = self.cfg.n_heads;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let tok = &self.p[Layout::TOK];
        let pos = &self.p[Layout::POS];
        let mut x = vec![0.0; t * d];
        for (i, &id) in tokens.iter().enumerate() {
            let id = id as usize;
            for j in 0..d {
                x[i * d + j] = tok[id * d + j] + pos[i * d + j];
            }
        }

        let mut layers = Vec::with_capacity(self.cfg.n_layers);
        let mut outputs = Vec::new();
        for l in 0..self.cfg.n_layers {
            let (a, ln1) = layer_norm(
                &x,
                t,
                d,
                self.w(l, Component::Ln1G),
                self.w(l, Component::Ln1B),
            );
            let q = linear(&a, t, d, self.w(l, Component::AttnQ), d);
            let k = linear(&a, t, d, self.w(l, Component::AttnK), d);
            let v = linear(&a, t, d, self.w(l, Component::AttnV), d);

            let mut probs = vec![0.0; heads * t * t];
            let mut ctx = vec![0.0; t * d];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let row = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
                    let span = if self.causal() { i + 1 } else { t };
                    let qi = &q[i * d + off..i * d + off + dh];
                    let mut m = f64::NEG_INFINITY;
                    for s in 0..span {
                        let sc = dot(qi, &k[s * d + off..s * d + off + dh]) * scale;
                        row[s] = sc;
                        m = m.max(sc);
                    }
                    let mut z = 0.0;
                    for r in row[..span].iter_mut() {
                        *r = (*r - m).exp();
                        z += *r;
                    }
                    for r in row[..span].iter_mut() {
                        *r /= z;
                    }
                    let ci = &mut ctx[i * d + off..i * d + off + dh];
                    for s in 0..span {
                        axpy(row[s], &v[s * d + off..s * d + off + dh], ci);
                    }
                }
            }
            let attn = linear(&ctx, t, d, self.w(l, Component::AttnOut), d);
            let x_in = std::mem::take(&mut x);
            let mut h_mid: Vec<f64> = x_in.iter().zip(&attn).map(|(a, b)| a + b).collect();

            let (c, ln2) = layer_norm(
                &h_mid,
                t,
                d,
                self.w(l, Component::Ln2G),
                self.w(l, Component::Ln2B),
            );
            let u = linear(&c, t, d, self.w(l, Component::FfnIn), f);
            let g: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
            let ffn = linear(&g, t, f, self.w(l, Component::FfnOut), d);
            h_mid.iter_mut().zip(&ffn).for_each(|(a, b)| *a += b);
            x = h_mid;
            if capture {
                outputs.push(x.clone());
            }
            layers.push(LayerCache {
                x_in,
                ln1,
                a,
                q,
                k,
                v,
                probs,
                ctx,
                ln2,
                c,
                u,
                g,
            });
        }
        let (z, lnf) = layer_norm(
            &x,
            t,
            d,
            &self.p[self.layout.final_g()],
            &self.p[self.layout.final_b()],
        );
        SeqCache {
            layers,
            lnf,
            z,
            outputs,
        }
    }

    /// Logits from final normalized states `z` of one sequence.
    fn head(&self, z: &[f64], t: usize) -> Vec<f64> {
        let d = self.cfg.d_model;
        let n_out = self.cfg.n_outputs();
        let w = &self.p[self.layout.head_w()];
        let b = &self.p[self.layout.head_b()];
        match self.cfg.task_head {
            TaskHead::Classification { .. } => {
                let mut pooled = vec![0.0; d];
                for i in 0..t {
                    axpy(1.0 / t as f64, &z[i * d..(i + 1) * d], &mut pooled);
                }
                let mut logits = linear(&pooled, 1, d, w, n_out);
                logits.iter_mut().zip(b).for_each(|(l, bi)| *l += bi);
                logits
            }
            TaskHead::LanguageModel => {
                let mut logits = linear(z, t, d, w, n_out);
                for row in logits.chunks_mut(n_out) {
                    row.iter_mut().zip(b).for_each(|(l, bi)| *l += bi);
                }
                logits
            }
        }
    }

    /// Backward through one sequence given `dlogits` (already weighted).
    fn backward_seq(
        &self,
        tokens: &[u32],
        cache: &SeqCache,
        dlogits: &[f64],
        grads: &mut [Vec<f64>],
    ) {
        let t = tokens.len();
        let d = self.cfg.d_model;
        let f = self.cfg.d_ff;
        let heads = self.cfg.n_heads;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let n_out = self.cfg.n_outputs();
        let lay = self.layout;

        // head
        let w = &self.p[lay.head_w()];
        let mut dz = vec![0.0; t * d];
        match self.cfg.task_head {
            TaskHead::Classification { .. } => {
                let mut pooled = vec![0.0; d];
                for i in 0..t {
                    axpy(1.0 / t as f64, &cache.z[i * d..(i + 1) * d], &mut pooled);
                }
                let dpooled =
                    linear_backward(dlogits, &pooled, 1, d, w, n_out, &mut grads[lay.head_w()]);
                for (gb, dl) in grads[lay.head_b()].iter_mut().zip(dlogits) {
                    *gb += dl;
                }
                for i in 0..t {
                    axpy(1.0 / t as f64, &dpooled, &mut dz[i * d..(i + 1) * d]);
                }
            }
            TaskHead::LanguageModel => {
                dz = linear_backward(dlogits, &cache.z, t, d, w, n_out, &mut grads[lay.head_w()]);
                for row in dlogits.chunks(n_out) {
                    for (gb, dl) in grads[lay.head_b()].iter_mut().zip(row) {
                        *gb += dl;
                    }
                }
            }
        }

        let (gf, bf) = (lay.final_g(), lay.final_b());
        let (dgf, dbf) = two_mut(grads, gf, bf);
        let mut dx = layer_norm_backward(&dz, &cache.lnf, t, d, &self.p[gf], dgf, dbf);

        for l in (0..self.cfg.n_layers).rev() {
            let lc = &cache.layers[l];
            // feed-forward branch: x_out = h_mid + gelu(c Wiᵀ) Woᵀ
            let dg = linear_backward(
                &dx,
                &lc.g,
                t,
                f,
                self.w(l, Component::FfnOut),
                d,
                &mut grads[lay.layer(l, Component::FfnOut)],
            );
            let du: Vec<f64> = dg
                .iter()
                .zip(&lc.u)
                .map(|(g, &u)| g * gelu_grad(u))
                .collect();
            let dc = linear_backward(
                &du,
                &lc.c,
                t,
                d,
                self.w(l, Component::FfnIn),
                f,
                &mut grads[lay.layer(l, Component::FfnIn)],
            );
            let (ig, ib) = (lay.layer(l, Component::Ln2G), lay.layer(l, Component::Ln2B));
            let (dg2, db2) = two_mut(grads, ig, ib);
            let dh_ln = layer_norm_backward(&dc, &lc.ln2, t, d, &self.p[ig], dg2, db2);
            let dh_mid: Vec<f64> = dx.iter().zip(&dh_ln).map(|(a, b)| a + b).collect();

            // attention branch: h_mid = x_in + ctx Woutᵀ
            let dctx = linear_backward(
                &dh_mid,
                &lc.ctx,
                t,
                d,
                self.w(l, Component::AttnOut),
                d,
                &mut grads[lay.layer(l, Component::AttnOut)],
            );
            let mut dq = vec![0.0; t * d];
            let mut dk = vec![0.0; t * d];
            let mut dv = vec![0.0; t * d];
            let mut dp = vec![0.0; t];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let row = &lc.probs[(h * t + i) * t..(h * t + i + 1) * t];
                    let span = if self.causal() { i + 1 } else { t };
                    let dci = &dctx[i * d + off..i * d + off + dh];
                    for s in 0..span {
                        dp[s] = dot(dci, &lc.v[s * d + off..s * d + off + dh]);
                        axpy(row[s], dci, &mut dv[s * d + off..s * d + off + dh]);
                    }
                    let inner: f64 = (0..span).map(|s| row[s] * dp[s]).sum();
                    let qi = &lc.q[i * d + off..i * d + off + dh];
                    for s in 0..span {
                        let ds = row[s] * (dp[s] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        axpy(
                            ds,
                            &lc.k[s * d + off..s * d + off + dh],
                            &mut dq[i * d + off..i * d + off + dh],
                        );
                        axpy(ds, qi, &mut dk[s * d + off..s * d + off + dh]);
                    }
                }
            }
            let mut da = linear_backward(
                &dq,
                &lc.a,
                t,
                d,
                self.w(l, Component::AttnQ),
                d,
                &mut grads[lay.layer(l, Component::AttnQ)],
            );
            let dak = linear_backward(
                &dk,
                &lc.a,
                t,
                d,
                self.w(l, Component::AttnK),
                d,
                &mut grads[lay.layer(l, Component::AttnK)],
            );
            let dav = linear_backward(
                &dv,
                &lc.a,
                t,
                d,
                self.w(l, Component::AttnV),
                d,
                &mut grads[lay.layer(l, Component::AttnV)],
            );
            for ((a, b), c) in da.iter_mut().zip(&dak).zip(&dav) {
                *a += b + c;
            }
            let (ig, ib) = (lay.layer(l, Component::Ln1G), lay.layer(l, Component::Ln1B));
            let (dg1, db1) = two_mut(grads, ig, ib);
            let dx_ln = layer_norm_backward(&da, &lc.ln1, t, d, &self.p[ig], dg1, db1);
            dx = dh_mid.iter().zip(&dx_ln).map(|(a, b)| a + b).collect();
            debug_assert_eq!(lc.x_in.len(), dx.len());
        }

        for (i, &id) in tokens.iter().enumerate() {
            let row = &dx[i * d..(i + 1) * d];
            axpy(
                1.0,
                row,
                &mut grads[Layout::TOK][id as usize * d..(id as usize + 1) * d],
            );
            axpy(1.0, row, &mut grads[Layout::POS][i * d..(i + 1) * d]);
        }
    }
}

fn two_mut(v: &mut [Vec<f64>], i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
    assert!(i < j);
    let (lo, hi) = v.split_at_mut(j);
    (&mut lo[i], &mut hi[0])
}

fn check_batch(cfg: &ModelConfig, batch: &Batch) -> Result<()> {
    batch.validate_for(cfg)
}

// ---------------------------------------------------------------------------
// public entry points

/// Logits for a batch, plus each layer's output when `capture` is set.
pub fn forward_f64(
    cfg: &ModelConfig,
    params: &[Vec<f64>],
    batch: &Batch,
    capture: bool,
) -> Result<(Vec<f64>, Option<Vec<Vec<f64>>>)> {
    check_batch(cfg, batch)?;
    let net = Net::new(cfg, params)?;
    let t = batch.seq_len;
    let mut logits = Vec::new();
    let mut outs: Vec<Vec<f64>> = vec![Vec::new(); if capture { cfg.n_layers } else { 0 }];
    for seq in batch.sequences() {
        let cache = net.forward_seq(seq, capture);
        logits.extend(net.head(&cache.z, t));
        for (dst, src) in outs.iter_mut().zip(cache.outputs) {
            dst.extend(src);
        }
    }
    Ok((logits, capture.then_some(outs)))
}

/// Per-example cross-entropy terms and correct flags from logits.
fn score(cfg: &ModelConfig, logits: &[f64], batch: &Batch) -> (f64, usize, usize) {
    let n_out = cfg.n_outputs();
    let mut lp = vec![0.0; n_out];
    let mut total = 0.0;
    let mut correct = 0;
    let rows = logits.len() / n_out;
    for (r, row) in logits.chunks(n_out).enumerate() {
        log_softmax(row, &mut lp);
        let y = batch.targets[r] as usize;
        total -= lp[y];
        if argmax(row) == y {
            correct += 1;
        }
    }
    (total, correct, rows)
}

pub fn loss_f64(cfg: &ModelConfig, params: &[Vec<f64>], batch: &Batch) -> Result<f64> {
    let (logits, _) = forward_f64(cfg, params, batch, false)?;
    let (total, _, rows) = score(cfg, &logits, batch);
    Ok(total / rows as f64)
}

/// Mean cross-entropy and its gradient for every parameter.
pub fn loss_and_grad_f64(
    cfg: &ModelConfig,
    params: &[Vec<f64>],
    batch: &Batch,
) -> Result<(StepStats, ParamsF64)> {
    check_batch(cfg, batch)?;
    let net = Net::new(cfg, params)?;
    let mut grads: ParamsF64 = params.iter().map(|p| vec![0.0; p.len()]).collect();
    let n_out = cfg.n_outputs();
    let t = batch.seq_len;
    let rows_per_seq = if cfg.task_head.is_classification() {
        1
    } else {
        t
    };
    let total_rows = rows_per_seq * batch.batch_size;
    let weight = 1.0 / total_rows as f64;

    let mut stats = StepStats::default();
    let mut loss_sum = 0.0;
    let mut lp = vec![0.0; n_out];
    for (b, seq) in batch.sequences().enumerate() {
        let cache = net.forward_seq(seq, false);
        let logits = net.head(&cache.z, t);
        let mut dlogits = vec![0.0; logits.len()];
        for (r, row) in logits.chunks(n_out).enumerate() {
            let y = batch.targets[b * rows_per_seq + r] as usize;
            log_softmax(row, &mut lp);
            loss_sum -= lp[y];
            if argmax(row) == y {
                stats.correct += 1;
            }
            let dst = &mut dlogits[r * n_out..(r + 1) * n_out];
            for (j, dv) in dst.iter_mut().enumerate() {
                *dv = (lp[j].exp() - if j == y { 1.0 } else { 0.0 }) * weight;
            }
        }
        net.backward_seq(seq, &cache, &dlogits, &mut grads);
    }
    stats.loss = loss_sum * weight;
    stats.count = total_rows;
    Ok((stats, grads))
}

/// Mean cross-entropy of logits against a batch, computed in `f64` with a
/// stable log-sum-exp.
pub fn cross_entropy(logits: &Tensor, batch: &Batch, task: &TaskHead) -> Result<f64> {
    let [rows, cols] = logits.dims2()?;
    let expected_rows = match task {
        TaskHead::Classification { n_classes } => {
            if cols != *n_classes {
                return Err(Error::dim("logit width differs from class count"));
            }
            batch.batch_size
        }
        TaskHead::LanguageModel => batch.batch_size * batch.seq_len,
    };
    if rows != expected_rows || batch.targets.len() != rows {
        return Err(Error::dim(format!(
            "{rows} logit rows for {} targets",
            batch.targets.len()
        )));
    }
    let mut lp = vec![0.0; cols];
    let mut total = 0.0;
    for (r, row) in logits.data().chunks(cols).enumerate() {
        let row: Vec<f64> = row.iter().map(|&x| x as f64).collect();
        log_softmax(&row, &mut lp);
        let y = batch.targets[r] as usize;
        if y >= cols {
            return Err(Error::dim(format!("target {y} out of range")));
        }
        total -= lp[y];
    }
    Ok(total / rows as f64)
}

pub(super) fn forward(
    model: &TransformerModel,
    batch: &Batch,
    capture: bool,
) -> Result<super::ForwardOutput> {
    let cfg = model.config();
    let (logits, outs) = forward_f64(cfg, &model.params_f64(), batch, capture)?;
    let n_out = cfg.n_outputs();
    let to_f32 = |v: Vec<f64>| -> Vec<f32> { v.into_iter().map(|x| x as f32).collect() };
    let rows = logits.len() / n_out;
    let logits = Tensor::new(vec![rows, n_out], to_f32(logits))?;
    let layer_outputs = outs
        .map(|outs| {
            outs.into_iter()
                .map(|o| {
                    Tensor::new(
                        vec![batch.batch_size * batch.seq_len, cfg.d_model],
                        to_f32(o),
                    )
                })
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    Ok(super::ForwardOutput {
        logits,
        layer_outputs,
    })
}

pub(super) fn head_forward(
    model: &TransformerModel,
    hidden: &Tensor,
    batch_size: usize,
) -> Result<Tensor> {
    let cfg = model.config();
    let [rows, d] = hidden.dims2()?;
    if d != cfg.d_model || batch_size == 0 || rows % batch_size != 0 {
        return Err(Error::dim(format!(
            "hidden states {rows}x{d} incompatible with batch size {batch_size}"
        )));
    }
    let params = model.params_f64();
    let net = Net::new(cfg, &params)?;
    let t = rows / batch_size;
    let lay = cfg.layout();
    let h = hidden.to_f64();
    let mut logits = Vec::new();
    for seq in h.chunks(t * d) {
        let (z, _) = layer_norm(seq, t, d, &params[lay.final_g()], &params[lay.final_b()]);
        logits.extend(net.head(&z, t));
    }
    let n_out = cfg.n_outputs();
    Tensor::new(
        vec![logits.len() / n_out, n_out],
        logits.into_iter().map(|x| x as f32).collect(),
    )
}

/// Sum of per-example cross-entropies and correct counts over a dataset,
/// reduced in batch order.
pub(crate) fn dataset_totals(
    cfg: &ModelConfig,
    params: &[Vec<f64>],
    dataset: &Dataset,
) -> Result<(f64, usize, usize)> {
    let per_batch = dataset
        .batches
        .par_iter()
        .map(|b| {
            let (logits, _) = forward_f64(cfg, params, b, false)?;
            Ok(score(cfg, &logits, b))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_batch
        .into_iter()
        .fold((0.0, 0, 0), |(l, c, n), (bl, bc, bn)| {
            (l + bl, c + bc, n + bn)
        }))
}

/// Per-batch mean losses in batch order.
pub(crate) fn batch_losses(
    cfg: &ModelConfig,
    params: &[Vec<f64>],
    dataset: &Dataset,
) -> Result<Vec<f64>> {
    dataset
        .batches
        .par_iter()
        .map(|b| loss_f64(cfg, params, b))
        .collect()
}

pub(super) fn evaluate(model: &TransformerModel, dataset: &Dataset) -> Result<Metric> {
    let cfg = model.config();
    if dataset.task != cfg.task_head {
        return Err(Error::domain("dataset task does not match the model head"));
    }
    evaluate_params(cfg, &model.params_f64(), dataset)
}

pub(crate) fn evaluate_params(
    cfg: &ModelConfig,
    params: &[Vec<f64>],
    dataset: &Dataset,
) -> Result<Metric> {
    let (loss, correct, count) = dataset_totals(cfg, params, dataset)?;
    if count == 0 {
        return Err(Error::domain("evaluation on an empty dataset"));
    }
    Ok(match cfg.task_head {
        TaskHead::Classification { .. } => Metric::Accuracy(correct as f64 / count as f64),
        TaskHead::LanguageModel => Metric::Perplexity((loss / count as f64).exp()),
    })
}
