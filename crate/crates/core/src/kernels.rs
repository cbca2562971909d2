//! Linear-layer kernels over INT4 weights.
//!
//! Two compute paths share one tiling scheme:
//! - FP32 compute: each weight group is dequantized inside the reduction loop
//!   and multiplied in `f32`.
//! - INT8 compute: activations are quantized per group, each group is an exact
//!   `i32` dot product, rescaled and accumulated into `f32`.
//!
//! Every output element is reduced in a fixed order (ascending `k` within a
//! group, groups in ascending index) with a single running accumulator, so any
//! tiling and any thread count produce the same bits as the direct loops.

use crate::error::{shape_err, Error, Result};
use crate::quant::{
    dequant_code, quantize_activations, ComputePath, DynQuantActivation, QuantScheme, QuantizedTensor,
    SYMMETRIC_OFFSET,
};
use crate::tensor::Matrix;

/// Output of a linear layer: `batch x out_features`, FP32.
pub type LinearOutput = Matrix;

/// Tiling and threading for the blocked kernels.
///
/// `tile_rows` tiles the activation (batch) rows, `tile_cols` tiles the output
/// features, `reduction_block` tiles the input dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelConfig {
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub reduction_block: usize,
    pub threads: usize,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            tile_rows: 8,
            tile_cols: 64,
            reduction_block: 1024,
            threads: 1,
        }
    }
}

impl KernelConfig {
    pub fn with_threads(threads: usize) -> Self {
        Self {
            threads,
            ..Self::default()
        }
    }

    /// Checks the config against a weight with the given group size and
    /// input dimension. A reduction block at least as wide as the input is
    /// accepted for any group size.
    pub fn validate(&self, group_size: usize, cols: usize) -> Result<()> {
        if self.tile_rows == 0 || self.tile_cols == 0 || self.reduction_block == 0 || self.threads == 0
        {
            return Err(Error::InvalidConfig(format!("kernel config has a zero field: {self:?}")));
        }
        if self.reduction_block < cols && !self.reduction_block.is_multiple_of(group_size) {
            return Err(Error::InvalidConfig(format!(
                "reduction block {} is not a multiple of group size {group_size}",
                self.reduction_block
            )));
        }
        Ok(())
    }
}

/// Naive triple-loop `a x b` with `k` ascending. Used as the correctness oracle.
pub fn gemm_ref(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(shape_err(format!(
            "gemm_ref: {}x{} times {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut c = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0f32;
            for k in 0..a.cols() {
                acc += a.get(i, k) * b.get(k, j);
            }
            c.as_mut_slice()[i * b.cols() + j] = acc;
        }
    }
    Ok(c)
}

fn check_linear_shapes(x: &Matrix, w: &QuantizedTensor, bias: Option<&[f32]>) -> Result<()> {
    if x.cols() != w.cols() {
        return Err(shape_err(format!(
            "activation has {} features, weight expects {}",
            x.cols(),
            w.cols()
        )));
    }
    if let Some(b) = bias {
        if b.len() != w.rows() {
            return Err(shape_err(format!(
                "bias length {} != output features {}",
                b.len(),
                w.rows()
            )));
        }
    }
    Ok(())
}

fn add_bias(out: &mut Matrix, bias: Option<&[f32]>) {
    if let Some(bias) = bias {
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bias) {
                *o += b;
            }
        }
    }
}

/// `x * dequant(w)^T + bias`, dequantizing each group in the inner loop.
/// This is the direct (untiled) form of the FP32 compute path.
pub fn qlinear_fp32(x: &Matrix, w: &QuantizedTensor, bias: Option<&[f32]>) -> Result<LinearOutput> {
    check_linear_shapes(x, w, bias)?;
    let group = w.group_size();
    let mut out = Matrix::zeros(x.rows(), w.rows());
    for b in 0..x.rows() {
        let xr = x.row(b);
        for o in 0..w.rows() {
            let mut acc = 0.0f32;
            for (g, xg) in xr.chunks_exact(group).enumerate() {
                let (scale, offset) = w.group_params(o, g);
                for (xp, &byte) in xg.chunks_exact(2).zip(w.group_bytes(o, g)) {
                    acc += xp[0] * dequant_code(byte & 0x0f, scale, offset);
                    acc += xp[1] * dequant_code(byte >> 4, scale, offset);
                }
            }
            out.as_mut_slice()[b * w.rows() + o] = acc;
        }
    }
    add_bias(&mut out, bias);
    Ok(out)
}

/// Exact integer dot of one activation group with one packed weight group
/// (stored codes, before the offset correction).
#[inline]
pub(crate) fn dot_i8_u4(act: &[i8], packed: &[u8]) -> i32 {
    debug_assert_eq!(act.len(), packed.len() * 2);
    let mut sum = 0i32;
    for (a, &byte) in act.chunks_exact(2).zip(packed) {
        sum += i32::from(a[0]) * i32::from(byte & 0x0f) + i32::from(a[1]) * i32::from(byte >> 4);
    }
    sum
}

/// How the INT8 path computes a run of group dot products on this CPU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DotMode {
    Scalar,
    /// AVX2, with activations de-interleaved inside every 32-code chunk
    /// (even positions first, then odd) to line up with the nibble halves.
    #[cfg(target_arch = "x86_64")]
    Avx2,
}

impl DotMode {
    fn detect(group: usize) -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            if group.is_multiple_of(32) && std::is_x86_feature_detected!("avx2") {
                return Self::Avx2;
            }
        }
        let _ = group;
        Self::Scalar
    }

    /// Activation codes in the layout `group_dots` expects.
    fn prepare<'a>(self, codes: &'a [i8]) -> std::borrow::Cow<'a, [i8]> {
        match self {
            Self::Scalar => std::borrow::Cow::Borrowed(codes),
            #[cfg(target_arch = "x86_64")]
            Self::Avx2 => {
                let mut out = vec![0i8; codes.len()];
                for (src, dst) in codes.chunks_exact(32).zip(out.chunks_exact_mut(32)) {
                    for i in 0..16 {
                        dst[i] = src[2 * i];
                        dst[16 + i] = src[2 * i + 1];
                    }
                }
                std::borrow::Cow::Owned(out)
            }
        }
    }

    /// `dot_i8_u4` of every consecutive group in `act`/`packed`, written to
    /// `out`. `act` comes from `prepare`.
    fn group_dots(self, act: &[i8], packed: &[u8], group: usize, out: &mut [i32]) {
        debug_assert_eq!(act.len(), out.len() * group);
        match self {
            Self::Scalar => {
                for ((a, p), o) in act.chunks_exact(group).zip(packed.chunks_exact(group / 2)).zip(out) {
                    *o = dot_i8_u4(a, p);
                }
            }
            // SAFETY: only detected with AVX2 present and 32 | group.
            #[cfg(target_arch = "x86_64")]
            Self::Avx2 => unsafe { x86::group_dots_avx2(act, packed, group, out) },
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use std::arch::x86_64::*;

    /// Products of 32 de-interleaved activation codes with 16 packed bytes,
    /// as eight i32 partial sums.
    #[inline]
    #[target_feature(enable = "avx2")]
    unsafe fn chunk32(act: *const i8, packed: *const u8) -> __m256i {
        let both = _mm256_broadcastsi128_si256(_mm_loadu_si128(packed.cast()));
        // low nibbles (even positions) in the low lane, high nibbles in the high lane
        let split = _mm256_blend_epi32(both, _mm256_srli_epi16(both, 4), 0xf0);
        let w = _mm256_and_si256(split, _mm256_set1_epi8(0x0f));
        let av = _mm256_loadu_si256(act.cast());
        // 15 * 127 * 2 fits in i16: no saturation.
        let pairs = _mm256_maddubs_epi16(w, av);
        _mm256_madd_epi16(pairs, _mm256_set1_epi16(1))
    }

    /// Eight lanes whose total is the dot of one group.
    #[inline]
    #[target_feature(enable = "avx2")]
    unsafe fn group_lanes(act: *const i8, packed: *const u8, group: usize) -> __m256i {
        let end = act.wrapping_add(group);
        let mut acc = chunk32(act, packed);
        let (mut a, mut p) = (act.wrapping_add(32), packed.wrapping_add(16));
        while a < end {
            acc = _mm256_add_epi32(acc, chunk32(a, p));
            a = a.wrapping_add(32);
            p = p.wrapping_add(16);
        }
        acc
    }

    /// Lanes of the group at `a`/`p`, then moves both past it.
    #[inline]
    #[target_feature(enable = "avx2")]
    unsafe fn next_group(a: &mut *const i8, p: &mut *const u8, group: usize) -> __m256i {
        let v = group_lanes(*a, *p, group);
        *a = a.wrapping_add(group);
        *p = p.wrapping_add(group / 2);
        v
    }

    #[inline]
    #[target_feature(enable = "avx2")]
    unsafe fn hsum(v: __m256i) -> i32 {
        let s = _mm_add_epi32(_mm256_castsi256_si128(v), _mm256_extracti128_si256(v, 1));
        let s = _mm_add_epi32(s, _mm_shuffle_epi32(s, 0b01_00_11_10));
        let s = _mm_add_epi32(s, _mm_shuffle_epi32(s, 0b10_11_00_01));
        _mm_cvtsi128_si32(s)
    }

    /// `group` must be a multiple of 32.
    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn group_dots_avx2(act: &[i8], packed: &[u8], group: usize, out: &mut [i32]) {
        assert!(act.len() >= out.len() * group && packed.len() >= out.len() * group / 2);
        let (mut a, mut p) = (act.as_ptr(), packed.as_ptr());
        let mut blocks = out.chunks_exact_mut(8);
        for dst in &mut blocks {
            let t0 = _mm256_hadd_epi32(next_group(&mut a, &mut p, group), next_group(&mut a, &mut p, group));
            let t1 = _mm256_hadd_epi32(next_group(&mut a, &mut p, group), next_group(&mut a, &mut p, group));
            let t2 = _mm256_hadd_epi32(next_group(&mut a, &mut p, group), next_group(&mut a, &mut p, group));
            let t3 = _mm256_hadd_epi32(next_group(&mut a, &mut p, group), next_group(&mut a, &mut p, group));
            let u0 = _mm256_hadd_epi32(t0, t1);
            let u1 = _mm256_hadd_epi32(t2, t3);
            let r = _mm256_add_epi32(
                _mm256_permute2x128_si256(u0, u1, 0x20),
                _mm256_permute2x128_si256(u0, u1, 0x31),
            );
            _mm256_storeu_si256(dst.as_mut_ptr().cast(), r);
        }
        for o in blocks.into_remainder() {
            *o = hsum(next_group(&mut a, &mut p, group));
        }
    }
}

/// Integer group accumulation: `sum(a * stored) - offset * sum(a)`, which equals
/// `sum(a * (stored - offset))`.
#[inline]
fn group_dot(act: &[i8], code_sum: i32, packed: &[u8], offset: u8) -> i32 {
    dot_i8_u4(act, packed) - i32::from(offset) * code_sum
}

/// The per-group integer accumulations of the INT8 path, laid out as
/// `[batch][out_feature][group]`.
pub fn qlinear_int8_accumulators(x: &Matrix, w: &QuantizedTensor) -> Result<Vec<i32>> {
    check_linear_shapes(x, w, None)?;
    let xq = quantize_activations(x, w.group_size())?;
    let groups = w.groups_per_row();
    let mut out = Vec::with_capacity(x.rows() * w.rows() * groups);
    for b in 0..x.rows() {
        for o in 0..w.rows() {
            for g in 0..groups {
                let (_, offset) = w.group_params(o, g);
                let gi = xq.group_index(b, g);
                out.push(group_dot(
                    xq.group_codes(b, g),
                    xq.code_sums[gi],
                    w.group_bytes(o, g),
                    offset,
                ));
            }
        }
    }
    Ok(out)
}

/// INT8-compute path, direct form. Activations are quantized per weight group.
pub fn qlinear_int8(x: &Matrix, w: &QuantizedTensor, bias: Option<&[f32]>) -> Result<LinearOutput> {
    check_linear_shapes(x, w, bias)?;
    let xq = quantize_activations(x, w.group_size())?;
    let groups = w.groups_per_row();
    let mut out = Matrix::zeros(x.rows(), w.rows());
    for b in 0..x.rows() {
        for o in 0..w.rows() {
            let mut acc = 0.0f32;
            for g in 0..groups {
                let (w_scale, offset) = w.group_params(o, g);
                let gi = xq.group_index(b, g);
                let dot = group_dot(
                    xq.group_codes(b, g),
                    xq.code_sums[gi],
                    w.group_bytes(o, g),
                    offset,
                );
                acc += dot as f32 * (xq.scales[gi] * w_scale);
            }
            out.as_mut_slice()[b * w.rows() + o] = acc;
        }
    }
    add_bias(&mut out, bias);
    Ok(out)
}

/// Runs `tile_fn` over disjoint ranges of output features, possibly on several
/// threads, and assembles the `batch x out_features` result. `tile_fn` writes
/// a `batch x range.len()` row-major block.
fn parallel_over_outputs<F>(batch: usize, out_features: usize, cfg: &KernelConfig, tile_fn: F) -> Matrix
where
    F: Fn(std::ops::Range<usize>, &mut [f32]) + Sync,
{
    let mut out = Matrix::zeros(batch, out_features);
    let tiles: Vec<std::ops::Range<usize>> = (0..out_features)
        .step_by(cfg.tile_cols)
        .map(|s| s..(s + cfg.tile_cols).min(out_features))
        .collect();
    let scatter = |out: &mut Matrix, range: &std::ops::Range<usize>, block: &[f32]| {
        let w = range.len();
        for b in 0..batch {
            out.row_mut(b)[range.clone()].copy_from_slice(&block[b * w..(b + 1) * w]);
        }
    };
    let threads = cfg.threads.min(tiles.len()).max(1);
    if threads == 1 {
        let mut block = Vec::new();
        for range in &tiles {
            block.clear();
            block.resize(batch * range.len(), 0.0);
            tile_fn(range.clone(), &mut block);
            scatter(&mut out, range, &block);
        }
        return out;
    }
    let per_thread = tiles.len().div_ceil(threads);
    let results: Vec<Vec<(std::ops::Range<usize>, Vec<f32>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = tiles
            .chunks(per_thread)
            .map(|chunk| {
                let tile_fn = &tile_fn;
                s.spawn(move || {
                    chunk
                        .iter()
                        .map(|range| {
                            let mut block = vec![0.0; batch * range.len()];
                            tile_fn(range.clone(), &mut block);
                            (range.clone(), block)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("kernel worker panicked"))
            .collect()
    });
    for (range, block) in results.iter().flatten() {
        scatter(&mut out, range, block);
    }
    out
}

fn blocked_fp32(x: &Matrix, w: &QuantizedTensor, cfg: &KernelConfig) -> Matrix {
    let (batch, cols) = (x.rows(), x.cols());
    let group = w.group_size();
    let kb = cfg.reduction_block.min(cols);
    parallel_over_outputs(batch, w.rows(), cfg, |range, block| {
        let width = range.len();
        // dequantized weight tile: width x kb
        let mut wtile = vec![0.0f32; width * kb];
        for k0 in (0..cols).step_by(kb) {
            let k1 = (k0 + kb).min(cols);
            let klen = k1 - k0;
            for (t, o) in range.clone().enumerate() {
                let dst = &mut wtile[t * klen..(t + 1) * klen];
                for (gi, chunk) in dst.chunks_exact_mut(group).enumerate() {
                    let g = k0 / group + gi;
                    let (scale, offset) = w.group_params(o, g);
                    for (pair, &byte) in chunk.chunks_exact_mut(2).zip(w.group_bytes(o, g)) {
                        pair[0] = dequant_code(byte & 0x0f, scale, offset);
                        pair[1] = dequant_code(byte >> 4, scale, offset);
                    }
                }
            }
            for b0 in (0..batch).step_by(cfg.tile_rows) {
                for b in b0..(b0 + cfg.tile_rows).min(batch) {
                    let xs = &x.row(b)[k0..k1];
                    for t in 0..width {
                        let ws = &wtile[t * klen..(t + 1) * klen];
                        let mut acc = block[b * width + t];
                        for (xv, wv) in xs.iter().zip(ws) {
                            acc += xv * wv;
                        }
                        block[b * width + t] = acc;
                    }
                }
            }
        }
    })
}

/// Everything one output tile of the INT8 path reads.
struct Int8Job<'a> {
    mode: DotMode,
    codes: &'a [i8],
    xq: &'a DynQuantActivation,
    w: &'a QuantizedTensor,
    tile_rows: usize,
    groups_per_block: usize,
}

const INT8_ROWS: usize = 4;

#[inline(always)]
fn int8_tile(job: &Int8Job, range: std::ops::Range<usize>, block: &mut [f32]) {
    let (xq, w) = (job.xq, job.w);
    let (batch, cols) = (xq.rows, xq.cols);
    let group = w.group_size();
    let groups = w.groups_per_row();
    let stride = job.groups_per_block;
    let asym = w.scheme() == QuantScheme::Asymmetric;
    let (packed, w_scales, zero_points) = (w.packed(), w.scales(), w.zero_points());
    let width = range.len();
    let mut dots = vec![0i32; stride];
    // row r of the current output quad keeps its terms at r * stride
    let mut terms = vec![0.0f32; INT8_ROWS * stride];
    for g0 in (0..groups).step_by(stride) {
        let g1 = (g0 + stride).min(groups);
        let n = g1 - g0;
        for b0 in (0..batch).step_by(job.tile_rows) {
            for b in b0..(b0 + job.tile_rows).min(batch) {
                let a0 = xq.group_index(b, g0);
                let act = &job.codes[b * cols + g0 * group..b * cols + g1 * group];
                let a_scales = &xq.scales[a0..a0 + n];
                let a_sums = &xq.code_sums[a0..a0 + n];
                for t0 in (0..width).step_by(INT8_ROWS) {
                    let rows = (width - t0).min(INT8_ROWS);
                    for (r, t) in terms.chunks_exact_mut(stride).take(rows).enumerate() {
                        let o = range.start + t0 + r;
                        let w0 = o * groups + g0;
                        let bytes = &packed[(o * cols + g0 * group) / 2..(o * cols + g1 * group) / 2];
                        let d = &mut dots[..n];
                        job.mode.group_dots(act, bytes, group, d);
                        let ws = &w_scales[w0..w0 + n];
                        if asym {
                            let zp = &zero_points[w0..w0 + n];
                            rescale(&mut t[..n], d, zp.iter().copied(), a_sums, a_scales, ws);
                        } else {
                            let offsets = std::iter::repeat(SYMMETRIC_OFFSET);
                            rescale(&mut t[..n], d, offsets, a_sums, a_scales, ws);
                        }
                    }
                    let out = &mut block[b * width + t0..b * width + t0 + rows];
                    accumulate_rows(out, &terms, stride, n);
                }
            }
        }
    }
}

/// `t[i] = (d[i] - offset[i] * a_sum[i]) * (a_scale[i] * w_scale[i])`.
#[inline(always)]
fn rescale(
    t: &mut [f32],
    d: &[i32],
    offsets: impl Iterator<Item = u8>,
    a_sums: &[i32],
    a_scales: &[f32],
    w_scales: &[f32],
) {
    let params = d.iter().zip(a_sums).zip(a_scales.iter().zip(w_scales)).zip(offsets);
    for (slot, (((&dot, &a_sum), (&a_scale, &w_scale)), offset)) in t.iter_mut().zip(params) {
        let dot = dot.wrapping_sub(i32::from(offset).wrapping_mul(a_sum));
        *slot = dot as f32 * (a_scale * w_scale);
    }
}

/// Adds the first `n` terms of each row (stored `stride` apart) to `out`,
/// term by term in ascending order. Rows are interleaved so their adds overlap.
#[inline(always)]
fn accumulate_rows(out: &mut [f32], terms: &[f32], stride: usize, n: usize) {
    if let [o0, o1, o2, o3] = out {
        let (t0, rest) = terms.split_at(stride);
        let (t1, rest) = rest.split_at(stride);
        let (t2, t3) = rest.split_at(stride);
        let quads = t0[..n].iter().zip(&t1[..n]).zip(t2[..n].iter().zip(&t3[..n]));
        for ((a, b), (c, d)) in quads {
            *o0 += a;
            *o1 += b;
            *o2 += c;
            *o3 += d;
        }
    } else {
        for (acc, t) in out.iter_mut().zip(terms.chunks_exact(stride)) {
            for &v in &t[..n] {
                *acc += v;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn int8_tile_avx2(job: &Int8Job, range: std::ops::Range<usize>, block: &mut [f32]) {
    int8_tile(job, range, block)
}

fn blocked_int8(xq: &DynQuantActivation, w: &QuantizedTensor, cfg: &KernelConfig) -> Matrix {
    let group = w.group_size();
    let mode = DotMode::detect(group);
    let codes = mode.prepare(&xq.codes);
    let job = Int8Job {
        mode,
        codes: &codes,
        xq,
        w,
        tile_rows: cfg.tile_rows,
        groups_per_block: cfg.reduction_block.min(xq.cols).div_ceil(group),
    };
    parallel_over_outputs(xq.rows, w.rows(), cfg, |range, block| match mode {
        DotMode::Scalar => int8_tile(&job, range, block),
        // SAFETY: the AVX2 mode is only detected on CPUs that have it.
        #[cfg(target_arch = "x86_64")]
        DotMode::Avx2 => unsafe { int8_tile_avx2(&job, range, block) },
    })
}

/// Blocked, optionally threaded quantized linear layer. Dispatches on the
/// weight's compute path; output is bit-identical to the direct form of the
/// same path.
pub fn qlinear(
    x: &Matrix,
    w: &QuantizedTensor,
    bias: Option<&[f32]>,
    cfg: &KernelConfig,
) -> Result<LinearOutput> {
    check_linear_shapes(x, w, bias)?;
    cfg.validate(w.group_size(), w.cols())?;
    let mut out = match w.recipe().compute_path {
        ComputePath::Fp32Compute => blocked_fp32(x, w, cfg),
        ComputePath::Int8Compute => {
            let xq = quantize_activations(x, w.group_size())?;
            blocked_int8(&xq, w, cfg)
        }
    };
    add_bias(&mut out, bias);
    Ok(out)
}

const DENSE_LANES: usize = 8;

/// Dense FP32 linear layer `x * w^T + bias` for unquantized weights.
///
/// Each dot product keeps eight interleaved partial sums (lane `i` takes
/// `k % 8 == i`) combined in lane order at the end, so the result is fixed for
/// a given shape independent of tiling and threads.
pub fn linear_f32(
    x: &Matrix,
    w: &Matrix,
    bias: Option<&[f32]>,
    cfg: &KernelConfig,
) -> Result<LinearOutput> {
    if x.cols() != w.cols() {
        return Err(shape_err(format!(
            "activation has {} features, weight expects {}",
            x.cols(),
            w.cols()
        )));
    }
    if let Some(b) = bias {
        if b.len() != w.rows() {
            return Err(shape_err(format!(
                "bias length {} != output features {}",
                b.len(),
                w.rows()
            )));
        }
    }
    if cfg.tile_rows == 0 || cfg.tile_cols == 0 || cfg.threads == 0 {
        return Err(Error::InvalidConfig(format!("kernel config has a zero field: {cfg:?}")));
    }
    let batch = x.rows();
    let mut out = parallel_over_outputs(batch, w.rows(), cfg, |range, block| {
        let width = range.len();
        for b in 0..batch {
            let xr = x.row(b);
            for (t, o) in range.clone().enumerate() {
                block[b * width + t] = dot_lanes(xr, w.row(o));
            }
        }
    });
    add_bias(&mut out, bias);
    Ok(out)
}

#[inline]
fn dot_lanes(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; DENSE_LANES];
    let mut ac = a.chunks_exact(DENSE_LANES);
    let mut bc = b.chunks_exact(DENSE_LANES);
    for (x, y) in (&mut ac).zip(&mut bc) {
        for i in 0..DENSE_LANES {
            lanes[i] += x[i] * y[i];
        }
    }
    for (i, (x, y)) in ac.remainder().iter().zip(bc.remainder()).enumerate() {
        lanes[i] += x * y;
    }
    lanes.iter().fold(0.0, |s, v| s + v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{quantize_tensor, QuantGranularity, QuantRecipe, QuantScheme};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn recipe(scheme: QuantScheme, g: usize, path: ComputePath) -> QuantRecipe {
        QuantRecipe::new(scheme, QuantGranularity::Grouped(g), path).unwrap()
    }

    #[test]
    fn batched_group_dots_match_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for group in [32, 64, 96, 128, 1024] {
            for count in [1, 7, 8, 9, 17] {
                let mut act: Vec<i8> = (0..group * count).map(|_| rng.gen_range(-127..=127)).collect();
                let mut packed: Vec<u8> = (0..group * count / 2).map(|_| rng.gen()).collect();
                // extremes: every product at its largest magnitude
                act[..group].iter_mut().for_each(|a| *a = -127);
                packed[..group / 2].iter_mut().for_each(|p| *p = 0xff);
                let mut out = vec![0; count];
                let mode = DotMode::detect(group);
                mode.group_dots(&mode.prepare(&act), &packed, group, &mut out);
                for (g, &o) in out.iter().enumerate() {
                    let h = group / 2;
                    assert_eq!(o, dot_i8_u4(&act[g * group..][..group], &packed[g * h..][..h]));
                }
                assert_eq!(out[0], -127 * 15 * group as i32);
            }
        }
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lim: f32) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-lim..lim))
    }

    #[test]
    fn gemm_ref_identity_and_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 5, 5, 3.0);
        assert_eq!(gemm_ref(&Matrix::identity(5), &x).unwrap(), x);
        let a = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let b = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        assert_eq!(gemm_ref(&a, &b).unwrap().as_slice(), &[6.0]);
        assert!(matches!(gemm_ref(&a, &Matrix::zeros(2, 1)), Err(Error::Shape(_))));
    }

    #[test]
    fn gemm_ref_matches_f64_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 8, 8, 1.0);
        let b = random(&mut rng, 8, 8, 1.0);
        let c = gemm_ref(&a, &b).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let exact: f64 = (0..8).map(|k| f64::from(a.get(i, k)) * f64::from(b.get(k, j))).sum();
                let got = f64::from(c.get(i, j));
                assert!((got - exact).abs() <= 1e-5 * exact.abs().max(1.0));
            }
        }
    }

    /// Diagonal 0.1/0.2 weights, grid-exact under asymmetric g32.
    fn diag_weight() -> Matrix {
        let mut w = Matrix::zeros(2, 32);
        w.as_mut_slice()[0] = 0.1;
        w.as_mut_slice()[32 + 1] = 0.2;
        // pin each row's range so that both diagonal values are on the grid
        w.as_mut_slice()[31] = 1.5;
        w.as_mut_slice()[32 + 31] = 1.5;
        w
    }

    #[test]
    fn grid_exact_diag_weights() {
        let w = diag_weight();
        for path in [ComputePath::Fp32Compute, ComputePath::Int8Compute] {
            let qt = quantize_tensor(&w, recipe(QuantScheme::Asymmetric, 32, path)).unwrap();
            let mut xv = vec![0.0f32; 32];
            xv[0] = 1.0;
            xv[1] = 1.0;
            let x = Matrix::from_vec(1, 32, xv).unwrap();
            let fp = qlinear_fp32(&x, &qt, None).unwrap();
            assert!((fp.get(0, 0) - 0.1).abs() < 1e-6);
            assert!((fp.get(0, 1) - 0.2).abs() < 1e-6);
            // absmax 127/128 gives the power-of-two activation scale 2^-7,
            // so activation quantization is exact and both paths agree bit for bit
            let mut xv = vec![0.0f32; 32];
            xv[0] = 127.0 / 128.0;
            xv[1] = 127.0 / 128.0;
            let x = Matrix::from_vec(1, 32, xv).unwrap();
            assert_eq!(qlinear_int8(&x, &qt, None).unwrap(), qlinear_fp32(&x, &qt, None).unwrap());
        }
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(&mut rng, 16, 64, 1.0);
        let qt = quantize_tensor(&w, recipe(QuantScheme::Asymmetric, 32, ComputePath::Int8Compute)).unwrap();
        let bias: Vec<f32> = (0..16).map(|i| i as f32 * 0.5).collect();
        let x = Matrix::zeros(3, 64);
        for out in [
            qlinear_fp32(&x, &qt, Some(&bias)).unwrap(),
            qlinear_int8(&x, &qt, Some(&bias)).unwrap(),
            qlinear(&x, &qt, Some(&bias), &KernelConfig::default()).unwrap(),
        ] {
            for r in 0..3 {
                assert_eq!(out.row(r), bias.as_slice());
            }
        }
    }

    #[test]
    fn fp32_path_matches_dequant_gemm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 4, 256, 10.0);
        let w = random(&mut rng, 128, 256, 1.0);
        for scheme in [QuantScheme::Asymmetric, QuantScheme::Symmetric] {
            let qt = quantize_tensor(&w, recipe(scheme, 32, ComputePath::Fp32Compute)).unwrap();
            let oracle = gemm_ref(&x, &crate::quant::dequantize_tensor(&qt).unwrap().transpose()).unwrap();
            let got = qlinear_fp32(&x, &qt, None).unwrap();
            assert!(got.max_abs_diff(&oracle).unwrap() <= 1e-5);
        }
    }

    #[test]
    fn fp32_path_is_linear_in_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, 2, 128, 1.0);
        let w = random(&mut rng, 32, 128, 1.0);
        let qt = quantize_tensor(&w, recipe(QuantScheme::Asymmetric, 64, ComputePath::Fp32Compute)).unwrap();
        let alpha = 2.0f32; // exact scaling in binary floating point
        let xs = Matrix::from_fn(2, 128, |r, c| alpha * x.get(r, c));
        let base = qlinear_fp32(&x, &qt, None).unwrap();
        let scaled = qlinear_fp32(&xs, &qt, None).unwrap();
        for (a, b) in base.as_slice().iter().zip(scaled.as_slice()) {
            assert!((alpha * a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn int8_path_close_to_fp32_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 4, 256, 1.0);
        let w = random(&mut rng, 128, 256, 1.0);
        let qt = quantize_tensor(&w, recipe(QuantScheme::Asymmetric, 32, ComputePath::Int8Compute)).unwrap();
        let a = qlinear_fp32(&x, &qt, None).unwrap();
        let b = qlinear_int8(&x, &qt, None).unwrap();
        let num: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(p, q)| f64::from(p - q).powi(2)).sum();
        let den: f64 = a.as_slice().iter().map(|p| f64::from(*p).powi(2)).sum();
        assert!((num / den).sqrt() <= 2e-2);
    }

    #[test]
    fn full_tile_config_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, 3, 128, 1.0);
        let w = random(&mut rng, 40, 128, 1.0);
        for path in [ComputePath::Fp32Compute, ComputePath::Int8Compute] {
            let qt = quantize_tensor(&w, recipe(QuantScheme::Symmetric, 32, path)).unwrap();
            let cfg = KernelConfig { tile_rows: 3, tile_cols: 40, reduction_block: 128, threads: 1 };
            let direct = match path {
                ComputePath::Fp32Compute => qlinear_fp32(&x, &qt, None).unwrap(),
                ComputePath::Int8Compute => qlinear_int8(&x, &qt, None).unwrap(),
            };
            assert_eq!(qlinear(&x, &qt, None, &cfg).unwrap(), direct);
            let threaded = KernelConfig { tile_cols: 7, reduction_block: 64, threads: 4, ..cfg };
            assert_eq!(qlinear(&x, &qt, None, &threaded).unwrap(), direct);
        }
    }

    #[test]
    fn bad_configs_are_rejected() {
        let qt = quantize_tensor(&Matrix::zeros(4, 128), QuantRecipe::default()).unwrap();
        let x = Matrix::zeros(1, 128);
        let cfg = KernelConfig { reduction_block: 48, ..KernelConfig::default() };
        assert!(matches!(qlinear(&x, &qt, None, &cfg), Err(Error::InvalidConfig(_))));
        let cfg = KernelConfig { threads: 0, ..KernelConfig::default() };
        assert!(matches!(qlinear(&x, &qt, None, &cfg), Err(Error::InvalidConfig(_))));
        assert!(matches!(
            qlinear(&Matrix::zeros(1, 64), &qt, None, &KernelConfig::default()),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            qlinear_int8(&x, &qt, Some(&[0.0; 3])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn dense_linear_matches_f64_and_is_thread_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, 3, 77, 1.0);
        let w = random(&mut rng, 19, 77, 1.0);
        let out = linear_f32(&x, &w, None, &KernelConfig::default()).unwrap();
        for b in 0..3 {
            for o in 0..19 {
                let exact: f64 = (0..77).map(|k| f64::from(x.get(b, k)) * f64::from(w.get(o, k))).sum();
                assert!((f64::from(out.get(b, o)) - exact).abs() < 1e-5);
            }
        }
        let cfg = KernelConfig { tile_cols: 5, threads: 3, ..KernelConfig::default() };
        assert_eq!(linear_f32(&x, &w, None, &cfg).unwrap(), out);
    }
}
