//! Small attention network with hand-written backpropagation.
//!
//! Each layer is: multi-head self-attention over grid positions, single-head
//! cross-attention onto the condition's memory (the condition row followed by
//! one row per component), and a ReLU feed-forward block, all residual. There
//! is no normalisation. Parameters live in one flat `f64` vector so that
//! optimisation, checkpointing and gradient checks treat them uniformly.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Condition, MASK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMapKind {
    /// `mean_h mean_keys sigmoid(Q K^T / sqrt(d_h))`.
    Sigmoid,
    /// Softmax attention received by each key, averaged over queries and heads.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub height: usize,
    pub width: usize,
    pub codebook_size: usize,
    /// Condition ids in embedding-row order; the null row comes last.
    pub conditions: Vec<i64>,
    pub components: Vec<String>,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub out_dim: usize,
    pub attention_map: AttentionMapKind,
    pub null_condition: bool,
}

impl NetConfig {
    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.positions() == 0 || self.codebook_size < 2 || self.out_dim == 0 || self.ffn == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        if self.conditions.is_empty() {
            return Err(Error::Config("network needs at least one condition".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerOffsets {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    cq: usize,
    ck: usize,
    cv: usize,
    co: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    tensors: Vec<(TensorInfo, usize)>,
    tok: usize,
    pos: usize,
    cond: usize,
    comp: usize,
    layers: Vec<LayerOffsets>,
    w_out: usize,
    b_out: usize,
    total: usize,
}

impl Layout {
    fn new(cfg: &NetConfig) -> Self {
        let d = cfg.d_model;
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let off = total;
            total += shape.iter().product::<usize>();
            tensors.push((TensorInfo { name, shape }, off));
            off
        };
        let tok = push("tok_emb".into(), vec![cfg.codebook_size + 1, d]);
        let pos = push("pos_emb".into(), vec![cfg.positions(), d]);
        let cond = push("cond_emb".into(), vec![cfg.conditions.len() + 1, d]);
        let comp = push("comp_emb".into(), vec![cfg.components.len(), d]);
        let mut layers = Vec::new();
        for l in 0..cfg.layers {
            let mut sq = |s: &str| push(format!("layer{l}.{s}"), vec![d, d]);
            let (wq, wk, wv, wo) = (sq("wq"), sq("wk"), sq("wv"), sq("wo"));
            let (cq, ck, cv, co) = (sq("cq"), sq("ck"), sq("cv"), sq("co"));
            let w1 = push(format!("layer{l}.w1"), vec![d, cfg.ffn]);
            let b1 = push(format!("layer{l}.b1"), vec![cfg.ffn]);
            let w2 = push(format!("layer{l}.w2"), vec![cfg.ffn, d]);
            let b2 = push(format!("layer{l}.b2"), vec![d]);
            layers.push(LayerOffsets { wq, wk, wv, wo, cq, ck, cv, co, w1, b1, w2, b2 });
        }
        let w_out = push("w_out".into(), vec![d, cfg.out_dim]);
        let b_out = push("b_out".into(), vec![cfg.out_dim]);
        Layout { tensors, tok, pos, cond, comp, layers, w_out, b_out, total }
    }
}

// Dense helpers on row-major slices.

/// `(n x k) . (k x m)`
fn mm(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T . b` with `a: n x k`, `b: n x m`.
fn mm_tn(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in out[p * m..(p + 1) * m].iter_mut().zip(&b[i * m..(i + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a . b^T` with `a: n x k`, `b: m x k`.
fn mm_nt(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = a[i * k..(i + 1) * k].iter().zip(&b[j * k..(j + 1) * k]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

fn softmax_rows(s: &mut [f64], cols: usize) {
    for row in s.chunks_mut(cols) {
        softmax_in_place(row);
    }
}

/// Backprop through row-wise softmax: `dS = P * (dP - rowsum(dP * P))`.
fn softmax_backward(p: &[f64], dp: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; p.len()];
    for ((o, pr), dr) in out.chunks_mut(cols).zip(p.chunks(cols)).zip(dp.chunks(cols)) {
        let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for ((o, &pv), &dv) in o.iter_mut().zip(pr).zip(dr) {
            *o = pv * (dv - dot);
        }
    }
    out
}

fn head_cols(x: &[f64], n: usize, d: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * dh);
    for i in 0..n {
        out.extend_from_slice(&x[i * d + h * dh..i * d + (h + 1) * dh]);
    }
    out
}

fn write_head_cols(dst: &mut [f64], src: &[f64], n: usize, d: usize, h: usize, dh: usize) {
    for i in 0..n {
        dst[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&src[i * dh..(i + 1) * dh]);
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-location self-attention map from per-head queries and keys (each
/// `N x d_h`, row-major): `sigmoid(Q K^T / sqrt(d_h))`, averaged over the key
/// axis and then over heads.
pub fn self_attention_map(queries: &[Vec<f64>], keys: &[Vec<f64>], head_dim: usize) -> Result<Vec<f64>> {
    if queries.is_empty() || queries.len() != keys.len() || head_dim == 0 {
        return Err(Error::Shape("need matching, non-empty per-head Q and K".into()));
    }
    let n = queries[0].len() / head_dim;
    if queries.iter().chain(keys).any(|m| m.len() != n * head_dim) || n == 0 {
        return Err(Error::Shape(format!("each head must be N x {head_dim}")));
    }
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut map = vec![0.0; n];
    for (q, k) in queries.iter().zip(keys) {
        let s = mm_nt(q, n, head_dim, k, n);
        for (i, row) in s.chunks(n).enumerate() {
            map[i] += row.iter().map(|&v| sigmoid(v * scale)).sum::<f64>() / n as f64;
        }
    }
    let heads = queries.len() as f64;
    Ok(map.into_iter().map(|v| (v / heads).clamp(0.0, 1.0)).collect())
}

#[derive(Debug, Clone)]
struct LayerCache {
    x_in: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    p: Vec<Vec<f64>>,
    o: Vec<f64>,
    x1: Vec<f64>,
    qc: Vec<f64>,
    kc: Vec<f64>,
    vc: Vec<f64>,
    pc: Vec<f64>,
    oc: Vec<f64>,
    x2: Vec<f64>,
    z: Vec<f64>,
    hd: Vec<f64>,
}

/// Activations of one forward pass, kept for backprop and map extraction.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    tokens: Vec<usize>,
    cond_row: usize,
    comp_rows: Vec<usize>,
    mem: Vec<f64>,
    layers: Vec<LayerCache>,
    x_out: Vec<f64>,
    /// `N x out_dim` head output.
    pub output: Vec<f64>,
}

impl ForwardCache {
    /// Position of `component` in the condition memory (after the condition row).
    pub fn memory_len(&self) -> usize {
        1 + self.comp_rows.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl Network {
    /// Random initialisation with a zeroed output head.
    pub fn new<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let d = config.d_model as f64;
        let mut params = vec![0.0; layout.total];
        for (info, off) in &layout.tensors {
            let len: usize = info.shape.iter().product();
            let name = info.name.as_str();
            let std = if name.ends_with("_emb") {
                0.5
            } else if name == "w_out" || name == "b_out" || name.ends_with(".b1") || name.ends_with(".b2") {
                0.0
            } else if name.ends_with(".w1") {
                (2.0 / d).sqrt()
            } else if name.ends_with(".w2") {
                0.5 / (config.ffn as f64).sqrt()
            } else {
                1.0 / d.sqrt()
            };
            if std > 0.0 {
                let normal = Normal::new(0.0, std).expect("valid std");
                for p in &mut params[*off..*off + len] {
                    *p = normal.sample(rng);
                }
            }
        }
        Ok(Self { config, layout, params })
    }

    pub fn from_parts(config: NetConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Shape(format!("expected {} parameters, got {}", layout.total, params.len())));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Config("non-finite parameter".into()));
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Rounds every parameter to `f32` precision so a checkpoint round-trip
    /// is exact.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            *p = f64::from(*p as f32);
        }
    }

    pub fn tensor_infos(&self) -> Vec<TensorInfo> {
        self.layout.tensors.iter().map(|(t, _)| t.clone()).collect()
    }

    /// Returns `(offset, len)` of a named tensor.
    pub fn tensor_range(&self, name: &str) -> Option<(usize, usize)> {
        self.layout.tensors.iter().find(|(t, _)| t.name == name).map(|(t, off)| (*off, t.shape.iter().product()))
    }

    /// Swaps two rows of the condition-embedding table.
    pub fn swap_condition_rows(&mut self, a: usize, b: usize) {
        let d = self.config.d_model;
        let off = self.layout.cond;
        for j in 0..d {
            self.params.swap(off + a * d + j, off + b * d + j);
        }
    }

    fn resolve(&self, c: Option<&Condition>) -> Result<(usize, Vec<usize>)> {
        match c {
            None => {
                if !self.config.null_condition {
                    return Err(Error::Config("network has no null condition".into()));
                }
                Ok((self.config.conditions.len(), Vec::new()))
            }
            Some(c) => {
                let row =
                    self.config.conditions.iter().position(|&id| id == c.id).ok_or(Error::UnknownCondition(c.id))?;
                let comps = c
                    .components
                    .iter()
                    .map(|label| {
                        self.config
                            .components
                            .iter()
                            .position(|x| x == label)
                            .ok_or_else(|| Error::InvalidComponent { condition: c.id, component: label.clone() })
                    })
                    .collect::<Result<_>>()?;
                Ok((row, comps))
            }
        }
    }

    pub fn forward(&self, cells: &[u32], c: Option<&Condition>) -> Result<ForwardCache> {
        let cfg = &self.config;
        let n = cfg.positions();
        if cells.len() != n {
            return Err(Error::Shape(format!("expected {n} cells, got {}", cells.len())));
        }
        let k = cfg.codebook_size;
        let tokens: Vec<usize> = cells
            .iter()
            .map(|&v| match v {
                MASK => Ok(k),
                v if (v as usize) < k => Ok(v as usize),
                v => Err(Error::Precondition(format!("token {v} outside codebook"))),
            })
            .collect::<Result<_>>()?;
        let (cond_row, comp_rows) = self.resolve(c)?;
        let lay = &self.layout;
        let d = cfg.d_model;
        let p = &self.params;

        let mut x = vec![0.0; n * d];
        for i in 0..n {
            let row = &mut x[i * d..(i + 1) * d];
            add_into(row, &p[lay.tok + tokens[i] * d..lay.tok + (tokens[i] + 1) * d]);
            add_into(row, &p[lay.pos + i * d..lay.pos + (i + 1) * d]);
            add_into(row, &p[lay.cond + cond_row * d..lay.cond + (cond_row + 1) * d]);
        }
        let mut mem = Vec::with_capacity((1 + comp_rows.len()) * d);
        mem.extend_from_slice(&p[lay.cond + cond_row * d..lay.cond + (cond_row + 1) * d]);
        for &r in &comp_rows {
            mem.extend_from_slice(&p[lay.comp + r * d..lay.comp + (r + 1) * d]);
        }
        let mlen = 1 + comp_rows.len();

        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let cscale = 1.0 / (d as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.layers);
        for lo in &lay.layers {
            let w = |off: usize, len: usize| &p[off..off + len];
            let q = mm(&x, n, d, w(lo.wq, d * d), d);
            let kk = mm(&x, n, d, w(lo.wk, d * d), d);
            let v = mm(&x, n, d, w(lo.wv, d * d), d);
            let mut o = vec![0.0; n * d];
            let mut probs = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let (qh, kh, vh) =
                    (head_cols(&q, n, d, h, dh), head_cols(&kk, n, d, h, dh), head_cols(&v, n, d, h, dh));
                let mut s = mm_nt(&qh, n, dh, &kh, n);
                s.iter_mut().for_each(|e| *e *= scale);
                softmax_rows(&mut s, n);
                let oh = mm(&s, n, n, &vh, dh);
                write_head_cols(&mut o, &oh, n, d, h, dh);
                probs.push(s);
            }
            let mut x1 = x.clone();
            add_into(&mut x1, &mm(&o, n, d, w(lo.wo, d * d), d));

            let qc = mm(&x1, n, d, w(lo.cq, d * d), d);
            let kc = mm(&mem, mlen, d, w(lo.ck, d * d), d);
            let vc = mm(&mem, mlen, d, w(lo.cv, d * d), d);
            let mut pc = mm_nt(&qc, n, d, &kc, mlen);
            pc.iter_mut().for_each(|e| *e *= cscale);
            softmax_rows(&mut pc, mlen);
            let oc = mm(&pc, n, mlen, &vc, d);
            let mut x2 = x1.clone();
            add_into(&mut x2, &mm(&oc, n, d, w(lo.co, d * d), d));

            let f = cfg.ffn;
            let mut z = mm(&x2, n, d, w(lo.w1, d * f), f);
            for row in z.chunks_mut(f) {
                add_into(row, w(lo.b1, f));
            }
            let hd: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
            let mut x3 = x2.clone();
            add_into(&mut x3, &mm(&hd, n, f, w(lo.w2, f * d), d));
            for row in x3.chunks_mut(d) {
                add_into(row, w(lo.b2, d));
            }
            layers.push(LayerCache { x_in: x, q, k: kk, v, p: probs, o, x1, qc, kc, vc, pc, oc, x2, z, hd });
            x = x3;
        }
        let od = cfg.out_dim;
        let mut output = mm(&x, n, d, &p[lay.w_out..lay.w_out + d * od], od);
        for row in output.chunks_mut(od) {
            add_into(row, &p[lay.b_out..lay.b_out + od]);
        }
        Ok(ForwardCache { tokens, cond_row, comp_rows, mem, layers, x_out: x, output })
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d output`.
    pub fn backward(&self, cache: &ForwardCache, d_output: &[f64], grads: &mut [f64]) {
        let cfg = &self.config;
        let lay = &self.layout;
        let (n, d, od, f) = (cfg.positions(), cfg.d_model, cfg.out_dim, cfg.ffn);
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let cscale = 1.0 / (d as f64).sqrt();
        let mlen = cache.memory_len();
        let p = &self.params;

        add_into(&mut grads[lay.w_out..lay.w_out + d * od], &mm_tn(&cache.x_out, n, d, d_output, od));
        for row in d_output.chunks(od) {
            add_into(&mut grads[lay.b_out..lay.b_out + od], row);
        }
        let mut dx = mm_nt(d_output, n, od, &p[lay.w_out..lay.w_out + d * od], d);
        let mut dmem = vec![0.0; mlen * d];

        for (lc, lo) in cache.layers.iter().zip(&lay.layers).rev() {
            let w = |off: usize, len: usize| &p[off..off + len];
            // Feed-forward.
            add_into(&mut grads[lo.w2..lo.w2 + f * d], &mm_tn(&lc.hd, n, f, &dx, d));
            for row in dx.chunks(d) {
                add_into(&mut grads[lo.b2..lo.b2 + d], row);
            }
            let mut dz = mm_nt(&dx, n, d, w(lo.w2, f * d), f);
            for (g, &z) in dz.iter_mut().zip(&lc.z) {
                if z <= 0.0 {
                    *g = 0.0;
                }
            }
            add_into(&mut grads[lo.w1..lo.w1 + d * f], &mm_tn(&lc.x2, n, d, &dz, f));
            for row in dz.chunks(f) {
                add_into(&mut grads[lo.b1..lo.b1 + f], row);
            }
            let mut dx2 = dx;
            add_into(&mut dx2, &mm_nt(&dz, n, f, w(lo.w1, d * f), d));

            // Cross-attention.
            add_into(&mut grads[lo.co..lo.co + d * d], &mm_tn(&lc.oc, n, d, &dx2, d));
            let doc = mm_nt(&dx2, n, d, w(lo.co, d * d), d);
            let dpc = mm_nt(&doc, n, d, &lc.vc, mlen);
            let dvc = mm_tn(&lc.pc, n, mlen, &doc, d);
            let mut dsc = softmax_backward(&lc.pc, &dpc, mlen);
            dsc.iter_mut().for_each(|e| *e *= cscale);
            let dqc = mm(&dsc, n, mlen, &lc.kc, d);
            let dkc = mm_tn(&dsc, n, mlen, &lc.qc, d);
            add_into(&mut grads[lo.cq..lo.cq + d * d], &mm_tn(&lc.x1, n, d, &dqc, d));
            add_into(&mut grads[lo.ck..lo.ck + d * d], &mm_tn(&cache.mem, mlen, d, &dkc, d));
            add_into(&mut grads[lo.cv..lo.cv + d * d], &mm_tn(&cache.mem, mlen, d, &dvc, d));
            add_into(&mut dmem, &mm_nt(&dkc, mlen, d, w(lo.ck, d * d), d));
            add_into(&mut dmem, &mm_nt(&dvc, mlen, d, w(lo.cv, d * d), d));
            let mut dx1 = dx2;
            add_into(&mut dx1, &mm_nt(&dqc, n, d, w(lo.cq, d * d), d));

            // Self-attention.
            add_into(&mut grads[lo.wo..lo.wo + d * d], &mm_tn(&lc.o, n, d, &dx1, d));
            let d_o = mm_nt(&dx1, n, d, w(lo.wo, d * d), d);
            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; n * d];
            let mut dv = vec![0.0; n * d];
            for h in 0..cfg.heads {
                let (qh, kh, vh) =
                    (head_cols(&lc.q, n, d, h, dh), head_cols(&lc.k, n, d, h, dh), head_cols(&lc.v, n, d, h, dh));
                let doh = head_cols(&d_o, n, d, h, dh);
                let ph = &lc.p[h];
                let dp = mm_nt(&doh, n, dh, &vh, n);
                let dvh = mm_tn(ph, n, n, &doh, dh);
                let mut ds = softmax_backward(ph, &dp, n);
                ds.iter_mut().for_each(|e| *e *= scale);
                let dqh = mm(&ds, n, n, &kh, dh);
                let dkh = mm_tn(&ds, n, n, &qh, dh);
                write_head_cols(&mut dq, &dqh, n, d, h, dh);
                write_head_cols(&mut dk, &dkh, n, d, h, dh);
                write_head_cols(&mut dv, &dvh, n, d, h, dh);
            }
            add_into(&mut grads[lo.wq..lo.wq + d * d], &mm_tn(&lc.x_in, n, d, &dq, d));
            add_into(&mut grads[lo.wk..lo.wk + d * d], &mm_tn(&lc.x_in, n, d, &dk, d));
            add_into(&mut grads[lo.wv..lo.wv + d * d], &mm_tn(&lc.x_in, n, d, &dv, d));
            let mut dxi = dx1;
            add_into(&mut dxi, &mm_nt(&dq, n, d, w(lo.wq, d * d), d));
            add_into(&mut dxi, &mm_nt(&dk, n, d, w(lo.wk, d * d), d));
            add_into(&mut dxi, &mm_nt(&dv, n, d, w(lo.wv, d * d), d));
            dx = dxi;
        }

        let cr = cache.cond_row;
        for i in 0..n {
            let g = &dx[i * d..(i + 1) * d];
            let t = cache.tokens[i];
            add_into(&mut grads[lay.tok + t * d..lay.tok + (t + 1) * d], g);
            add_into(&mut grads[lay.pos + i * d..lay.pos + (i + 1) * d], g);
            add_into(&mut grads[lay.cond + cr * d..lay.cond + (cr + 1) * d], g);
        }
        add_into(&mut grads[lay.cond + cr * d..lay.cond + (cr + 1) * d], &dmem[..d]);
        for (j, &r) in cache.comp_rows.iter().enumerate() {
            add_into(&mut grads[lay.comp + r * d..lay.comp + (r + 1) * d], &dmem[(j + 1) * d..(j + 2) * d]);
        }
    }

    /// Self-attention map of the last layer.
    pub fn attention_map(&self, cache: &ForwardCache) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let (n, d, dh) = (cfg.positions(), cfg.d_model, cfg.head_dim());
        let Some(last) = cache.layers.last() else {
            return Ok(vec![0.5; n]);
        };
        match cfg.attention_map {
            AttentionMapKind::Sigmoid => {
                let qs: Vec<Vec<f64>> = (0..cfg.heads).map(|h| head_cols(&last.q, n, d, h, dh)).collect();
                let ks: Vec<Vec<f64>> = (0..cfg.heads).map(|h| head_cols(&last.k, n, d, h, dh)).collect();
                self_attention_map(&qs, &ks, dh)
            }
            AttentionMapKind::Softmax => {
                let mut map = vec![0.0; n];
                for ph in &last.p {
                    for row in ph.chunks(n) {
                        for (m, v) in map.iter_mut().zip(row) {
                            *m += v;
                        }
                    }
                }
                let denom = (n * cfg.heads) as f64;
                Ok(map.into_iter().map(|v| (v / denom).clamp(0.0, 1.0)).collect())
            }
        }
    }

    /// Last-layer cross-attention weight of every position onto memory slot `slot`.
    pub fn cross_attention_slot(&self, cache: &ForwardCache, slot: usize) -> Vec<f64> {
        let n = self.config.positions();
        let mlen = cache.memory_len();
        match cache.layers.last() {
            Some(last) if slot < mlen => (0..n).map(|i| last.pc[i * mlen + slot]).collect(),
            _ => vec![0.0; n],
        }
    }

    /// Token-embedding rows for the real tokens (MASK row excluded).
    pub fn token_embeddings(&self) -> Vec<Vec<f64>> {
        let d = self.config.d_model;
        let off = self.layout.tok;
        (0..self.config.codebook_size).map(|t| self.params[off + t * d..off + (t + 1) * d].to_vec()).collect()
    }
}

/// Mean cross-entropy over `targets` at the positions flagged in `active`;
/// returns the loss and `d loss / d logits`.
pub fn masked_cross_entropy(logits: &[f64], k: usize, targets: &[u32], active: &[bool]) -> (f64, Vec<f64>) {
    let count = active.iter().filter(|&&a| a).count();
    let mut grad = vec![0.0; logits.len()];
    if count == 0 {
        return (0.0, grad);
    }
    let mut loss = 0.0;
    for (i, row) in logits.chunks(k).enumerate() {
        if !active[i] {
            continue;
        }
        let mut probs = row.to_vec();
        softmax_in_place(&mut probs);
        let t = targets[i] as usize;
        loss -= probs[t].max(1e-300).ln();
        for (j, g) in grad[i * k..(i + 1) * k].iter_mut().enumerate() {
            *g = (probs[j] - f64::from(u8::from(j == t))) / count as f64;
        }
    }
    (loss / count as f64, grad)
}

/// Mean binary cross-entropy of `sigmoid(logits)` against `labels`.
pub fn binary_cross_entropy(logits: &[f64], labels: &[f64]) -> (f64, Vec<f64>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            // log(1 + e^z) computed stably.
            let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
            loss += softplus - y * z;
            (sigmoid(z) - y) / n
        })
        .collect();
    (loss / n, grad)
}

/// Plain SGD with momentum and global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub clip: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(len: usize, lr: f64, momentum: f64, clip: f64) -> Self {
        Self { lr, momentum, clip, velocity: vec![0.0; len] }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        let factor = if self.clip > 0.0 && norm > self.clip { self.clip / norm } else { 1.0 };
        for ((p, v), g) in params.iter_mut().zip(self.velocity.iter_mut()).zip(grads) {
            *v = self.momentum * *v + g * factor;
            *p -= self.lr * *v;
        }
    }
}
