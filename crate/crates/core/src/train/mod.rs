//! Small-model trainer: mini-batch backprop through the decoder with Adam.
//!
//! Supports the RMSNorm + SiLU-gated configuration. Training produces an
//! FP32 [`Model`] that the runtime executes directly.

pub mod corpus;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::runtime::{
    ActivationKind, FeedForward, LayerWeights, Linear, Model, ModelConfig, ModelWeights, Norm,
    NormKind, NORM_EPS,
};
use crate::tensor::Matrix;

pub use corpus::synthetic_corpus;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub learning_rate: f32,
    pub warmup_steps: usize,
    pub grad_clip: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 8,
            seq_len: 32,
            learning_rate: 3e-3,
            warmup_steps: 20,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean cross-entropy of each step's batch, before the update.
    pub losses: Vec<f32>,
}

#[derive(Debug, Clone)]
struct LayerRanges {
    attn_norm: Range<usize>,
    wq: Range<usize>,
    wk: Range<usize>,
    wv: Range<usize>,
    wo: Range<usize>,
    ffn_norm: Range<usize>,
    w_gate: Range<usize>,
    w_up: Range<usize>,
    w_down: Range<usize>,
}

/// Placement of every parameter tensor in one flat vector.
#[derive(Debug, Clone)]
struct Layout {
    emb: Range<usize>,
    layers: Vec<LayerRanges>,
    final_norm: Range<usize>,
    lm_head: Range<usize>,
    total: usize,
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let (d, f, v) = (c.hidden_dim, c.ffn_dim, c.vocab_size);
        let emb = take(v * d);
        let layers = (0..c.n_layers)
            .map(|_| LayerRanges {
                attn_norm: take(d),
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                ffn_norm: take(d),
                w_gate: take(f * d),
                w_up: take(f * d),
                w_down: take(d * f),
            })
            .collect();
        let final_norm = take(d);
        let lm_head = take(v * d);
        Self {
            emb,
            layers,
            final_norm,
            lm_head,
            total: at,
        }
    }

    fn norms(&self) -> Vec<Range<usize>> {
        let mut out: Vec<_> = self
            .layers
            .iter()
            .flat_map(|l| [l.attn_norm.clone(), l.ffn_norm.clone()])
            .collect();
        out.push(self.final_norm.clone());
        out
    }
}

/// c (m x n) = op(a) (m x k) * op(b) (k x n), optionally added to c.
/// `ta`/`tb` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], ta: bool, b: &[f32], tb: bool, c: &mut [f32], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
    let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
    // SAFETY: bounds asserted above; strides address only those elements.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// y = x w^T with `w` stored `out x in`.
fn linear(x: &[f32], w: &[f32], rows: usize, inp: usize, out: usize) -> Vec<f32> {
    let mut y = vec![0.0; rows * out];
    gemm(rows, inp, out, x, false, w, true, &mut y, false);
    y
}

/// Backward of [`linear`]: accumulates into `dw` and `dx`.
#[allow(clippy::too_many_arguments)]
fn linear_back(dy: &[f32], x: &[f32], w: &[f32], rows: usize, inp: usize, out: usize, dw: &mut [f32], dx: &mut [f32]) {
    gemm(out, rows, inp, dy, true, x, false, dw, true);
    gemm(rows, out, inp, dy, false, w, false, dx, true);
}

fn rms_forward(x: &[f32], w: &[f32], d: usize) -> (Vec<f32>, Vec<f32>) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let ss: f32 = xr.iter().map(|v| v * v).sum();
        inv[r] = 1.0 / (ss / d as f32 + NORM_EPS).sqrt();
        for ((o, v), g) in y[r * d..(r + 1) * d].iter_mut().zip(xr).zip(w) {
            *o = v * inv[r] * g;
        }
    }
    (y, inv)
}

fn rms_backward(dy: &[f32], x: &[f32], inv: &[f32], w: &[f32], d: usize, dw: &mut [f32], dx: &mut [f32]) {
    for (r, &s) in inv.iter().enumerate() {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let mut dot = 0.0f32;
        for i in 0..d {
            dw[i] += dyr[i] * xr[i] * s;
            dot += dyr[i] * w[i] * xr[i];
        }
        let k = s * s * s * dot / d as f32;
        for i in 0..d {
            dx[r * d + i] += s * dyr[i] * w[i] - k * xr[i];
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// cos/sin per position and pair index, computed as the runtime does.
struct RopeTable {
    half: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RopeTable {
    fn new(positions: usize, head_dim: usize, theta: f32) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(positions * half);
        let mut sin = Vec::with_capacity(positions * half);
        for p in 0..positions {
            for i in 0..half {
                let freq = f64::from(theta).powf(-2.0 * i as f64 / head_dim as f64);
                let angle = p as f64 * freq;
                cos.push(angle.cos() as f32);
                sin.push(angle.sin() as f32);
            }
        }
        Self { half, cos, sin }
    }

    /// Rotates one row (`heads x head_dim`) at `pos`; `inverse` applies the
    /// transpose rotation.
    fn rotate(&self, row: &mut [f32], pos: usize, inverse: bool) {
        let cs = &self.cos[pos * self.half..(pos + 1) * self.half];
        let sn = &self.sin[pos * self.half..(pos + 1) * self.half];
        for head in row.chunks_exact_mut(self.half * 2) {
            for ((pair, &c), &s) in head.chunks_exact_mut(2).zip(cs).zip(sn) {
                let s = if inverse { -s } else { s };
                let (a, b) = (pair[0], pair[1]);
                pair[0] = a * c - b * s;
                pair[1] = a * s + b * c;
            }
        }
    }
}

struct LayerActs {
    x_in: Vec<f32>,
    inv1: Vec<f32>,
    h1: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    probs: Vec<f32>,
    ctx: Vec<f32>,
    x_mid: Vec<f32>,
    inv2: Vec<f32>,
    h2: Vec<f32>,
    g: Vec<f32>,
    u: Vec<f32>,
    a: Vec<f32>,
}

struct Acts {
    layers: Vec<LayerActs>,
    x_out: Vec<f32>,
    inv_f: Vec<f32>,
    hf: Vec<f32>,
    /// Softmax of the logits, `rows x vocab`.
    probs: Vec<f32>,
}

/// Differentiable forward/backward over a flat parameter vector.
struct Network {
    cfg: ModelConfig,
    layout: Layout,
    rope: RopeTable,
}

impl Network {
    fn new(cfg: ModelConfig, seq_len: usize) -> Result<Self> {
        cfg.validate()?;
        if cfg.norm_kind != NormKind::RmsNorm || cfg.activation_kind != ActivationKind::SiluGated {
            return Err(Error::InvalidConfig(
                "the trainer supports RMSNorm with a SiLU-gated feed-forward only".into(),
            ));
        }
        if seq_len < 2 || seq_len > cfg.max_seq_len {
            return Err(Error::InvalidConfig(format!(
                "training sequence length {seq_len} must lie in 2..={}",
                cfg.max_seq_len
            )));
        }
        Ok(Self {
            layout: Layout::new(&cfg),
            rope: RopeTable::new(seq_len, cfg.head_dim, cfg.rope_theta),
            cfg,
        })
    }

    fn init(&self, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = &self.layout;
        let mut p = vec![0.0f32; l.total];
        let mut fill = |p: &mut [f32], lim: f32| p.iter_mut().for_each(|v| *v = rng.gen_range(-lim..lim));
        let (d, f) = (self.cfg.hidden_dim, self.cfg.ffn_dim);
        let depth = (2.0 * self.cfg.n_layers as f32).sqrt();
        let u = |fan_in: usize| (3.0 / fan_in as f32).sqrt();
        fill(&mut p[l.emb.clone()], 1.0);
        for lr in &l.layers {
            fill(&mut p[lr.wq.clone()], u(d));
            fill(&mut p[lr.wk.clone()], u(d));
            fill(&mut p[lr.wv.clone()], u(d));
            fill(&mut p[lr.wo.clone()], u(d) / depth);
            fill(&mut p[lr.w_gate.clone()], u(d));
            fill(&mut p[lr.w_up.clone()], u(d));
            fill(&mut p[lr.w_down.clone()], u(f) / depth);
        }
        fill(&mut p[l.lm_head.clone()], u(d));
        for r in l.norms() {
            p[r].iter_mut().for_each(|v| *v = 1.0);
        }
        p
    }

    /// Forward over `batch` sequences of `seq` tokens laid out row after row.
    fn forward(&self, p: &[f32], tokens: &[u32], seq: usize) -> Acts {
        let c = &self.cfg;
        let (d, f, v, hd, heads) = (c.hidden_dim, c.ffn_dim, c.vocab_size, c.head_dim, c.n_heads);
        let n = tokens.len();
        let batch = n / seq;
        let scale = 1.0 / (hd as f32).sqrt();

        let emb = &p[self.layout.emb.clone()];
        let mut x = vec![0.0f32; n * d];
        for (r, &t) in tokens.iter().enumerate() {
            x[r * d..(r + 1) * d].copy_from_slice(&emb[t as usize * d..(t as usize + 1) * d]);
        }

        let mut layers = Vec::with_capacity(c.n_layers);
        for lr in &self.layout.layers {
            let (h1, inv1) = rms_forward(&x, &p[lr.attn_norm.clone()], d);
            let mut q = linear(&h1, &p[lr.wq.clone()], n, d, d);
            let mut k = linear(&h1, &p[lr.wk.clone()], n, d, d);
            let vv = linear(&h1, &p[lr.wv.clone()], n, d, d);
            for r in 0..n {
                self.rope.rotate(&mut q[r * d..(r + 1) * d], r % seq, false);
                self.rope.rotate(&mut k[r * d..(r + 1) * d], r % seq, false);
            }
            let mut probs = vec![0.0f32; batch * heads * seq * seq];
            let mut ctx = vec![0.0f32; n * d];
            for b in 0..batch {
                for h in 0..heads {
                    let pb = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                    for t in 0..seq {
                        let qt = &q[(b * seq + t) * d + h * hd..][..hd];
                        let row = &mut pb[t * seq..t * seq + t + 1];
                        for (s, out) in row.iter_mut().enumerate() {
                            let ks = &k[(b * seq + s) * d + h * hd..][..hd];
                            *out = qt.iter().zip(ks).map(|(a, b)| a * b).sum::<f32>() * scale;
                        }
                        crate::runtime::softmax_in_place(row);
                        let ct = &mut ctx[(b * seq + t) * d + h * hd..][..hd];
                        for (s, &pr) in row.iter().enumerate() {
                            let vs = &vv[(b * seq + s) * d + h * hd..][..hd];
                            for (o, val) in ct.iter_mut().zip(vs) {
                                *o += pr * val;
                            }
                        }
                    }
                }
            }
            let o = linear(&ctx, &p[lr.wo.clone()], n, d, d);
            let x_in = x.clone();
            for (a, b) in x.iter_mut().zip(&o) {
                *a += b;
            }
            let x_mid = x.clone();
            let (h2, inv2) = rms_forward(&x, &p[lr.ffn_norm.clone()], d);
            let g = linear(&h2, &p[lr.w_gate.clone()], n, d, f);
            let u = linear(&h2, &p[lr.w_up.clone()], n, d, f);
            let a: Vec<f32> = g.iter().zip(&u).map(|(&g, &u)| g * sigmoid(g) * u).collect();
            let y = linear(&a, &p[lr.w_down.clone()], n, f, d);
            for (xv, yv) in x.iter_mut().zip(&y) {
                *xv += yv;
            }
            layers.push(LayerActs {
                x_in,
                inv1,
                h1,
                q,
                k,
                v: vv,
                probs,
                ctx,
                x_mid,
                inv2,
                h2,
                g,
                u,
                a,
            });
        }
        let (hf, inv_f) = rms_forward(&x, &p[self.layout.final_norm.clone()], d);
        let mut probs = linear(&hf, &p[self.layout.lm_head.clone()], n, d, v);
        for row in probs.chunks_exact_mut(v) {
            crate::runtime::softmax_in_place(row);
        }
        Acts {
            layers,
            x_out: x,
            inv_f,
            hf,
            probs,
        }
    }

    /// Mean cross-entropy of predicting `targets[r]` at every row.
    fn loss(acts: &Acts, targets: &[u32], vocab: usize) -> f32 {
        let mut nll = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            nll -= f64::from(acts.probs[r * vocab + t as usize].max(1e-30)).ln();
        }
        (nll / targets.len() as f64) as f32
    }

    /// Gradient of the mean cross-entropy with respect to every parameter.
    fn backward(&self, p: &[f32], tokens: &[u32], targets: &[u32], seq: usize, acts: &Acts) -> Vec<f32> {
        let c = &self.cfg;
        let (d, f, v, hd, heads) = (c.hidden_dim, c.ffn_dim, c.vocab_size, c.head_dim, c.n_heads);
        let l = &self.layout;
        let n = tokens.len();
        let batch = n / seq;
        let scale = 1.0 / (hd as f32).sqrt();
        let mut grad = vec![0.0f32; l.total];

        let mut dlogits = acts.probs.clone();
        for (r, &t) in targets.iter().enumerate() {
            dlogits[r * v + t as usize] -= 1.0;
        }
        let inv_n = 1.0 / n as f32;
        dlogits.iter_mut().for_each(|g| *g *= inv_n);

        let mut dhf = vec![0.0f32; n * d];
        linear_back(&dlogits, &acts.hf, &p[l.lm_head.clone()], n, d, v, &mut grad[l.lm_head.clone()], &mut dhf);
        let mut dx = vec![0.0f32; n * d];
        rms_backward(&dhf, &acts.x_out, &acts.inv_f, &p[l.final_norm.clone()], d, &mut grad[l.final_norm.clone()], &mut dx);

        for (lr, la) in l.layers.iter().zip(&acts.layers).rev() {
            // Feed-forward block.
            let mut da = vec![0.0f32; n * f];
            linear_back(&dx, &la.a, &p[lr.w_down.clone()], n, f, d, &mut grad[lr.w_down.clone()], &mut da);
            let mut dg = vec![0.0f32; n * f];
            let mut du = vec![0.0f32; n * f];
            for i in 0..n * f {
                let g = la.g[i];
                let s = sigmoid(g);
                du[i] = da[i] * g * s;
                dg[i] = da[i] * la.u[i] * s * (1.0 + g * (1.0 - s));
            }
            let mut dh2 = vec![0.0f32; n * d];
            linear_back(&dg, &la.h2, &p[lr.w_gate.clone()], n, d, f, &mut grad[lr.w_gate.clone()], &mut dh2);
            linear_back(&du, &la.h2, &p[lr.w_up.clone()], n, d, f, &mut grad[lr.w_up.clone()], &mut dh2);
            rms_backward(&dh2, &la.x_mid, &la.inv2, &p[lr.ffn_norm.clone()], d, &mut grad[lr.ffn_norm.clone()], &mut dx);

            // Attention block.
            let mut dctx = vec![0.0f32; n * d];
            linear_back(&dx, &la.ctx, &p[lr.wo.clone()], n, d, d, &mut grad[lr.wo.clone()], &mut dctx);
            let mut dq = vec![0.0f32; n * d];
            let mut dk = vec![0.0f32; n * d];
            let mut dv = vec![0.0f32; n * d];
            let mut dp = vec![0.0f32; seq];
            for b in 0..batch {
                for h in 0..heads {
                    let pb = &la.probs[(b * heads + h) * seq * seq..][..seq * seq];
                    for t in 0..seq {
                        let row = &pb[t * seq..t * seq + t + 1];
                        let dct = &dctx[(b * seq + t) * d + h * hd..][..hd];
                        let mut weighted = 0.0f32;
                        for (s, &pr) in row.iter().enumerate() {
                            let off = (b * seq + s) * d + h * hd;
                            let vs = &la.v[off..off + hd];
                            dp[s] = dct.iter().zip(vs).map(|(a, b)| a * b).sum();
                            weighted += pr * dp[s];
                            for (o, g) in dv[off..off + hd].iter_mut().zip(dct) {
                                *o += pr * g;
                            }
                        }
                        let qoff = (b * seq + t) * d + h * hd;
                        for (s, &pr) in row.iter().enumerate() {
                            let ds = pr * (dp[s] - weighted) * scale;
                            let koff = (b * seq + s) * d + h * hd;
                            for i in 0..hd {
                                dq[qoff + i] += ds * la.k[koff + i];
                                dk[koff + i] += ds * la.q[qoff + i];
                            }
                        }
                    }
                }
            }
            for r in 0..n {
                self.rope.rotate(&mut dq[r * d..(r + 1) * d], r % seq, true);
                self.rope.rotate(&mut dk[r * d..(r + 1) * d], r % seq, true);
            }
            let mut dh1 = vec![0.0f32; n * d];
            linear_back(&dq, &la.h1, &p[lr.wq.clone()], n, d, d, &mut grad[lr.wq.clone()], &mut dh1);
            linear_back(&dk, &la.h1, &p[lr.wk.clone()], n, d, d, &mut grad[lr.wk.clone()], &mut dh1);
            linear_back(&dv, &la.h1, &p[lr.wv.clone()], n, d, d, &mut grad[lr.wv.clone()], &mut dh1);
            rms_backward(&dh1, &la.x_in, &la.inv1, &p[lr.attn_norm.clone()], d, &mut grad[lr.attn_norm.clone()], &mut dx);
        }

        let demb = &mut grad[l.emb.clone()];
        for (r, &t) in tokens.iter().enumerate() {
            for (g, x) in demb[t as usize * d..(t as usize + 1) * d].iter_mut().zip(&dx[r * d..(r + 1) * d]) {
                *g += x;
            }
        }
        grad
    }

    fn to_model(&self, p: &[f32]) -> Result<Model> {
        let c = &self.cfg;
        let (d, f, v) = (c.hidden_dim, c.ffn_dim, c.vocab_size);
        let l = &self.layout;
        let mat = |r: &Range<usize>, rows, cols| Matrix::from_vec(rows, cols, p[r.clone()].to_vec());
        let dense = |r: &Range<usize>, rows, cols| mat(r, rows, cols).map(Linear::Dense);
        let norm = |r: &Range<usize>| Norm {
            weight: p[r.clone()].to_vec(),
            bias: None,
        };
        let layers = l
            .layers
            .iter()
            .map(|lr| {
                Ok(LayerWeights {
                    attn_norm: norm(&lr.attn_norm),
                    wq: dense(&lr.wq, d, d)?,
                    wk: dense(&lr.wk, d, d)?,
                    wv: dense(&lr.wv, d, d)?,
                    wo: dense(&lr.wo, d, d)?,
                    ffn_norm: norm(&lr.ffn_norm),
                    ffn: FeedForward::SiluGated {
                        gate: dense(&lr.w_gate, f, d)?,
                        up: dense(&lr.w_up, f, d)?,
                        down: dense(&lr.w_down, d, f)?,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Model::new(
            *c,
            ModelWeights {
                tok_embeddings: mat(&l.emb, v, d)?,
                layers,
                final_norm: norm(&l.final_norm),
                lm_head: dense(&l.lm_head, v, d)?,
            },
        )
    }
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    const BETA1: f32 = 0.9;
    const BETA2: f32 = 0.99;
    const EPS: f32 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, p: &mut [f32], g: &[f32], lr: f32) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..p.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
            p[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Linear warmup, then cosine decay to a tenth of the peak.
fn learning_rate(tc: &TrainConfig, step: usize) -> f32 {
    if step < tc.warmup_steps {
        return tc.learning_rate * (step + 1) as f32 / tc.warmup_steps as f32;
    }
    let span = (tc.steps - tc.warmup_steps).max(1) as f32;
    let frac = (step - tc.warmup_steps) as f32 / span;
    let cos = 0.5 * (1.0 + (std::f32::consts::PI * frac).cos());
    tc.learning_rate * (0.1 + 0.9 * cos)
}

/// Trains a fresh model on random windows of `data`.
pub fn train(config: ModelConfig, data: &[u32], tc: &TrainConfig) -> Result<(Model, TrainReport)> {
    let net = Network::new(config, tc.seq_len)?;
    if tc.batch_size == 0 || tc.steps == 0 {
        return Err(Error::InvalidConfig("steps and batch_size must be positive".into()));
    }
    if !(tc.learning_rate > 0.0 && tc.grad_clip > 0.0) {
        return Err(Error::InvalidConfig("learning rate and grad clip must be positive".into()));
    }
    if data.len() <= tc.seq_len {
        return Err(Error::InvalidInput(format!(
            "training data has {} tokens, need more than {}",
            data.len(),
            tc.seq_len
        )));
    }
    if let Some(&t) = data.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::InvalidInput(format!("token {t} outside vocabulary")));
    }

    let mut params = net.init(tc.seed);
    let mut adam = Adam::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed);
    let mut tokens = Vec::with_capacity(tc.batch_size * tc.seq_len);
    let mut targets = Vec::with_capacity(tc.batch_size * tc.seq_len);
    let mut losses = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        tokens.clear();
        targets.clear();
        for _ in 0..tc.batch_size {
            let s = rng.gen_range(0..data.len() - tc.seq_len);
            tokens.extend_from_slice(&data[s..s + tc.seq_len]);
            targets.extend_from_slice(&data[s + 1..s + tc.seq_len + 1]);
        }
        let acts = net.forward(&params, &tokens, tc.seq_len);
        losses.push(Network::loss(&acts, &targets, config.vocab_size));
        let mut grad = net.backward(&params, &tokens, &targets, tc.seq_len, &acts);
        let norm = grad.iter().map(|g| g * g).sum::<f32>().sqrt();
        if norm > tc.grad_clip {
            let k = tc.grad_clip / norm;
            grad.iter_mut().for_each(|g| *g *= k);
        }
        adam.step(&mut params, &grad, learning_rate(tc, step));
    }
    Ok((net.to_model(&params)?, TrainReport { losses }))
}
