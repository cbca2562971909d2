//! Elementwise and attention operators of the decoder.

use crate::error::{Error, Result};
use crate::kvcache::KvView;
use crate::runtime::config::{NormKind, NORM_EPS};
use crate::runtime::model::Norm;

/// Rotates consecutive pairs `(2i, 2i+1)` of every head by
/// `position / theta^(2i / head_dim)`. `x` holds `heads x head_dim` values.
pub fn rope_apply(x: &mut [f32], head_dim: usize, position: usize, theta: f32) -> Result<()> {
    if head_dim == 0 || !head_dim.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!(
            "rotary embedding needs an even head_dim, got {head_dim}"
        )));
    }
    if !x.len().is_multiple_of(head_dim) {
        return Err(Error::Shape(format!(
            "rope input length {} is not a multiple of head_dim {head_dim}",
            x.len()
        )));
    }
    let half = head_dim / 2;
    let mut table = Vec::with_capacity(half);
    for i in 0..half {
        let freq = f64::from(theta).powf(-2.0 * i as f64 / head_dim as f64);
        let angle = position as f64 * freq;
        table.push((angle.cos() as f32, angle.sin() as f32));
    }
    for head in x.chunks_exact_mut(head_dim) {
        for (pair, &(cos, sin)) in head.chunks_exact_mut(2).zip(&table) {
            let (a, b) = (pair[0], pair[1]);
            pair[0] = a * cos - b * sin;
            pair[1] = a * sin + b * cos;
        }
    }
    Ok(())
}

/// Numerically stable softmax in place.
pub fn softmax_in_place(x: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Scaled dot-product attention of one query token (`heads x head_dim`)
/// against the first `visible` cached positions. The caller supplies the
/// causal limit; during decode that is every cached position.
pub fn attention(q: &[f32], kv: &KvView<'_>, visible: usize, out: &mut [f32]) -> Result<()> {
    let stride = kv.heads * kv.head_dim;
    if q.len() != stride || out.len() != stride {
        return Err(Error::Shape(format!(
            "attention expects {stride} query/output values, got {} and {}",
            q.len(),
            out.len()
        )));
    }
    if visible == 0 || visible > kv.len {
        return Err(Error::Shape(format!(
            "attention over {visible} positions with {} cached",
            kv.len
        )));
    }
    let scale = 1.0 / (kv.head_dim as f32).sqrt();
    let mut scores = vec![0.0f32; visible];
    for h in 0..kv.heads {
        let qh = &q[h * kv.head_dim..(h + 1) * kv.head_dim];
        for (j, s) in scores.iter_mut().enumerate() {
            let mut dot = 0.0f32;
            for (a, b) in qh.iter().zip(kv.key(j, h)) {
                dot += a * b;
            }
            *s = dot * scale;
        }
        softmax_in_place(&mut scores);
        let oh = &mut out[h * kv.head_dim..(h + 1) * kv.head_dim];
        oh.iter_mut().for_each(|o| *o = 0.0);
        for (j, &p) in scores.iter().enumerate() {
            for (o, v) in oh.iter_mut().zip(kv.value(j, h)) {
                *o += p * v;
            }
        }
    }
    Ok(())
}

pub fn rms_norm(x: &[f32], weight: &[f32], out: &mut [f32]) {
    let mut ss = 0.0f32;
    for v in x {
        ss += v * v;
    }
    let inv = 1.0 / (ss / x.len() as f32 + NORM_EPS).sqrt();
    for ((o, v), w) in out.iter_mut().zip(x).zip(weight) {
        *o = v * inv * w;
    }
}

pub fn layer_norm(x: &[f32], weight: &[f32], bias: &[f32], out: &mut [f32]) {
    let n = x.len() as f32;
    let mut sum = 0.0f32;
    for v in x {
        sum += v;
    }
    let mean = sum / n;
    let mut var = 0.0f32;
    for v in x {
        var += (v - mean) * (v - mean);
    }
    let inv = 1.0 / (var / n + NORM_EPS).sqrt();
    for (((o, v), w), b) in out.iter_mut().zip(x).zip(weight).zip(bias) {
        *o = (v - mean) * inv * w + b;
    }
}

pub fn apply_norm(kind: NormKind, norm: &Norm, x: &[f32], out: &mut [f32]) {
    match (kind, &norm.bias) {
        (NormKind::LayerNorm, Some(bias)) => layer_norm(x, &norm.weight, bias, out),
        (NormKind::LayerNorm, None) => {
            let zeros = vec![0.0; x.len()];
            layer_norm(x, &norm.weight, &zeros, out)
        }
        (NormKind::RmsNorm, _) => rms_norm(x, &norm.weight, out),
    }
}

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}
