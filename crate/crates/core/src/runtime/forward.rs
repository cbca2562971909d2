//! Prefill and decode passes.
//!
//! Both run the same per-token arithmetic: a prefill over `n` tokens produces
//! the same cache contents and logits as `n` single-token decodes.

use crate::error::{Error, Result};
use crate::kvcache::KvStore;
use crate::runtime::model::{FeedForward, Model};
use crate::runtime::ops::{apply_norm, attention, gelu, rope_apply, silu};
use crate::tensor::Matrix;

fn check_cache<C: KvStore>(model: &Model, cache: &C) -> Result<()> {
    let cfg = &model.config;
    if cache.layers() != cfg.n_layers || cache.heads() != cfg.n_heads || cache.head_dim() != cfg.head_dim {
        return Err(Error::Shape(format!(
            "cache is {}x{}x{}, model needs {}x{}x{}",
            cache.layers(),
            cache.heads(),
            cache.head_dim(),
            cfg.n_layers,
            cfg.n_heads,
            cfg.head_dim
        )));
    }
    for l in 0..cache.layers() {
        if cache.layer_len(l)? != cache.len() {
            return Err(Error::InvalidInput(format!(
                "cache layer {l} holds a partial token step"
            )));
        }
    }
    Ok(())
}

fn norm_rows(model: &Model, norm: &crate::runtime::model::Norm, x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        apply_norm(model.config.norm_kind, norm, x.row(r), out.row_mut(r));
    }
    out
}

fn add_in_place(x: &mut Matrix, y: &Matrix) {
    for (a, b) in x.as_mut_slice().iter_mut().zip(y.as_slice()) {
        *a += b;
    }
}

/// Runs `tokens` through the model, appending to `cache`, and returns logits
/// for every position (`all_positions`) or only the last one.
pub fn forward_tokens<C: KvStore>(
    model: &Model,
    tokens: &[u32],
    cache: &mut C,
    all_positions: bool,
) -> Result<Matrix> {
    let cfg = &model.config;
    let w = &model.weights;
    let kc = &model.kernel;
    if tokens.is_empty() {
        return Err(Error::InvalidInput("no tokens to process".into()));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::InvalidInput(format!(
            "token {t} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    check_cache(model, cache)?;
    let start = cache.len();
    let capacity = cache.capacity().min(cfg.max_seq_len);
    if start + tokens.len() > capacity {
        return Err(Error::CapacityExceeded { capacity });
    }

    let n = tokens.len();
    let d = cfg.hidden_dim;
    let mut x = Matrix::zeros(n, d);
    for (t, &tok) in tokens.iter().enumerate() {
        x.row_mut(t).copy_from_slice(w.tok_embeddings.row(tok as usize));
    }

    let mut ctx = Matrix::zeros(n, d);
    for (l, layer) in w.layers.iter().enumerate() {
        let h = norm_rows(model, &layer.attn_norm, &x);
        let mut q = layer.wq.forward(&h, kc)?;
        let mut k = layer.wk.forward(&h, kc)?;
        let v = layer.wv.forward(&h, kc)?;
        for t in 0..n {
            rope_apply(q.row_mut(t), cfg.head_dim, start + t, cfg.rope_theta)?;
            rope_apply(k.row_mut(t), cfg.head_dim, start + t, cfg.rope_theta)?;
            cache.append(l, k.row(t), v.row(t))?;
        }
        let view = cache.view(l)?;
        for t in 0..n {
            attention(q.row(t), &view, start + t + 1, ctx.row_mut(t))?;
        }
        let o = layer.wo.forward(&ctx, kc)?;
        add_in_place(&mut x, &o);

        let h = norm_rows(model, &layer.ffn_norm, &x);
        let y = match &layer.ffn {
            FeedForward::Gelu { up, down } => {
                let mut u = up.forward(&h, kc)?;
                u.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
                down.forward(&u, kc)?
            }
            FeedForward::SiluGated { gate, up, down } => {
                let mut g = gate.forward(&h, kc)?;
                let u = up.forward(&h, kc)?;
                for (a, b) in g.as_mut_slice().iter_mut().zip(u.as_slice()) {
                    *a = silu(*a) * b;
                }
                down.forward(&g, kc)?
            }
        };
        add_in_place(&mut x, &y);
    }

    let last = if all_positions {
        x
    } else {
        Matrix::from_vec(1, d, x.row(n - 1).to_vec())?
    };
    let h = norm_rows(model, &w.final_norm, &last);
    w.lm_head.forward(&h, kc)
}

/// Processes a prompt on an empty cache; returns last-position logits.
pub fn forward_prefill<C: KvStore>(model: &Model, tokens: &[u32], cache: &mut C) -> Result<Vec<f32>> {
    if !cache.is_empty() {
        return Err(Error::InvalidInput("prefill expects an empty cache".into()));
    }
    Ok(forward_tokens(model, tokens, cache, false)?.into_vec())
}

/// Like [`forward_prefill`] but returns the logits of every position.
pub fn forward_prefill_all<C: KvStore>(model: &Model, tokens: &[u32], cache: &mut C) -> Result<Matrix> {
    if !cache.is_empty() {
        return Err(Error::InvalidInput("prefill expects an empty cache".into()));
    }
    forward_tokens(model, tokens, cache, true)
}

/// One decode step: appends exactly one position to every layer.
pub fn forward_decode<C: KvStore>(model: &Model, token: u32, cache: &mut C) -> Result<Vec<f32>> {
    if cache.is_empty() {
        return Err(Error::InvalidInput("decode needs a prefilled cache".into()));
    }
    Ok(forward_tokens(model, &[token], cache, false)?.into_vec())
}

/// Cache sized for `model`.
pub fn new_cache(model: &Model) -> Result<crate::kvcache::KvCache> {
    let c = &model.config;
    crate::kvcache::KvCache::new(c.n_layers, c.n_heads, c.head_dim, c.max_seq_len)
}
