//! Group-wise round-to-nearest INT4 weight quantization and dynamic INT8
//! activation quantization.
//!
//! Groups run along the input-channel dimension of each output row. Codes are
//! stored as unsigned nibbles in `[0, 15]`; symmetric groups use the fixed
//! offset 8, asymmetric groups carry their own zero-point. Rounding is
//! half-away-from-zero and is evaluated in `f64` so that the chosen code is
//! the nearest one on the stored (`f32`) scale.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Group sizes accepted by [`QuantGranularity::Grouped`].
pub const GROUP_SIZES: [usize; 6] = [32, 64, 128, 256, 512, 1024];

/// Storage offset of symmetric codes: stored = signed + 8.
pub const SYMMETRIC_OFFSET: u8 = 8;

const CODE_MAX: u8 = 15;
const ACT_MAX: f64 = 127.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuantScheme {
    Symmetric,
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuantGranularity {
    /// One group spanning the whole input dimension of a row.
    PerChannel,
    Grouped(usize),
}

impl QuantGranularity {
    pub fn grouped(group_size: usize) -> Result<Self> {
        if GROUP_SIZES.contains(&group_size) {
            Ok(Self::Grouped(group_size))
        } else {
            Err(Error::InvalidConfig(format!(
                "group size {group_size} not in {GROUP_SIZES:?}"
            )))
        }
    }

    /// Number of consecutive input channels sharing one scale, for a row of `cols`.
    pub fn effective_group_size(&self, cols: usize) -> usize {
        match *self {
            Self::PerChannel => cols,
            Self::Grouped(g) => g,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ComputePath {
    /// Dequantize weights on the fly, multiply in FP32.
    Fp32Compute,
    /// Quantize activations to INT8 per group, integer dot products.
    Int8Compute,
}

/// A complete RTN quantization configuration.
///
/// Canonical string form: `rtn-{asym|sym}-{g<N>|pc}-{int8|fp32}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantRecipe {
    pub scheme: QuantScheme,
    pub granularity: QuantGranularity,
    pub compute_path: ComputePath,
}

impl QuantRecipe {
    pub fn new(
        scheme: QuantScheme,
        granularity: QuantGranularity,
        compute_path: ComputePath,
    ) -> Result<Self> {
        if let QuantGranularity::Grouped(g) = granularity {
            QuantGranularity::grouped(g)?;
        }
        Ok(Self {
            scheme,
            granularity,
            compute_path,
        })
    }

    pub fn with_compute_path(self, compute_path: ComputePath) -> Self {
        Self {
            compute_path,
            ..self
        }
    }
}

impl Default for QuantRecipe {
    fn default() -> Self {
        Self {
            scheme: QuantScheme::Asymmetric,
            granularity: QuantGranularity::Grouped(32),
            compute_path: ComputePath::Int8Compute,
        }
    }
}

impl fmt::Display for QuantRecipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let scheme = match self.scheme {
            QuantScheme::Symmetric => "sym",
            QuantScheme::Asymmetric => "asym",
        };
        let path = match self.compute_path {
            ComputePath::Fp32Compute => "fp32",
            ComputePath::Int8Compute => "int8",
        };
        match self.granularity {
            QuantGranularity::PerChannel => write!(f, "rtn-{scheme}-pc-{path}"),
            QuantGranularity::Grouped(g) => write!(f, "rtn-{scheme}-g{g}-{path}"),
        }
    }
}

impl FromStr for QuantRecipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("bad recipe string {s:?}"));
        let parts: Vec<&str> = s.split('-').collect();
        let [algo, scheme, gran, path] = parts.as_slice() else {
            return Err(bad());
        };
        if *algo != "rtn" {
            return Err(bad());
        }
        let scheme = match *scheme {
            "sym" => QuantScheme::Symmetric,
            "asym" => QuantScheme::Asymmetric,
            _ => return Err(bad()),
        };
        let granularity = match *gran {
            "pc" => QuantGranularity::PerChannel,
            g => {
                let digits = g.strip_prefix('g').ok_or_else(bad)?;
                // reject "g032" and friends so the string form stays canonical
                if digits.starts_with('0') {
                    return Err(bad());
                }
                let size: usize = digits.parse().map_err(|_| bad())?;
                QuantGranularity::grouped(size)?
            }
        };
        let compute_path = match *path {
            "int8" => ComputePath::Int8Compute,
            "fp32" => ComputePath::Fp32Compute,
            _ => return Err(bad()),
        };
        Self::new(scheme, granularity, compute_path)
    }
}

impl Serialize for QuantRecipe {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for QuantRecipe {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One quantized group: scale, zero-point and stored (unsigned) codes.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupQuant {
    pub scale: f32,
    /// Always 0 for symmetric groups (the storage offset is implicit).
    pub zero_point: u8,
    pub codes: Vec<u8>,
}

/// Offset subtracted from a stored code before scaling.
#[inline]
pub fn code_offset(scheme: QuantScheme, zero_point: u8) -> u8 {
    match scheme {
        QuantScheme::Symmetric => SYMMETRIC_OFFSET,
        QuantScheme::Asymmetric => zero_point,
    }
}

/// Dequantized value of a stored code. Every FP32 consumer of INT4 weights
/// goes through this so that all paths agree bit for bit.
#[inline(always)]
pub fn dequant_code(code: u8, scale: f32, offset: u8) -> f32 {
    scale * (i32::from(code) - i32::from(offset)) as f32
}

/// `f64::round` without the libm call.
#[inline]
fn round_half_away(x: f64) -> f64 {
    let a = x.abs();
    if a.is_nan() || a >= 4.0e15 {
        return x;
    }
    let t = a as i64 as f64;
    let r = if a - t >= 0.5 { t + 1.0 } else { t };
    r.copysign(x)
}

fn check_finite(values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::InvalidInput(format!(
            "non-finite value {} at index {i}",
            values[i]
        ))),
        None => Ok(()),
    }
}

/// Quantizes `values` into `codes` (same length) and returns `(scale, zero_point)`.
pub(crate) fn quantize_group_into(
    values: &[f32],
    scheme: QuantScheme,
    codes: &mut [u8],
) -> Result<(f32, u8)> {
    debug_assert_eq!(values.len(), codes.len());
    if values.is_empty() {
        return Err(Error::InvalidInput("empty quantization group".into()));
    }
    check_finite(values)?;
    match scheme {
        QuantScheme::Asymmetric => {
            // the representable range always contains zero
            let (lo, hi) = values.iter().fold((0.0f64, 0.0f64), |(lo, hi), &v| {
                (lo.min(f64::from(v)), hi.max(f64::from(v)))
            });
            let mut scale = ((hi - lo) / f64::from(CODE_MAX)) as f32;
            if scale == 0.0 {
                scale = 1.0;
            }
            let s = f64::from(scale);
            let zp = round_half_away(-lo / s).clamp(0.0, f64::from(CODE_MAX));
            for (c, &v) in codes.iter_mut().zip(values) {
                let q = round_half_away(f64::from(v) / s) + zp;
                *c = q.clamp(0.0, f64::from(CODE_MAX)) as u8;
            }
            Ok((scale, zp as u8))
        }
        QuantScheme::Symmetric => {
            let absmax = values.iter().fold(0.0f64, |m, &v| m.max(f64::from(v).abs()));
            let mut scale = (absmax / 7.0) as f32;
            if scale == 0.0 {
                scale = 1.0;
            }
            let s = f64::from(scale);
            for (c, &v) in codes.iter_mut().zip(values) {
                let q = round_half_away(f64::from(v) / s).clamp(-8.0, 7.0);
                *c = (q as i32 + i32::from(SYMMETRIC_OFFSET)) as u8;
            }
            Ok((scale, 0))
        }
    }
}

/// Round-to-nearest quantization of one group.
pub fn quantize_group(values: &[f32], scheme: QuantScheme) -> Result<GroupQuant> {
    let mut codes = vec![0u8; values.len()];
    let (scale, zero_point) = quantize_group_into(values, scheme, &mut codes)?;
    Ok(GroupQuant {
        scale,
        zero_point,
        codes,
    })
}

pub fn dequantize_group(gq: &GroupQuant, scheme: QuantScheme) -> Vec<f32> {
    let offset = code_offset(scheme, gq.zero_point);
    gq.codes
        .iter()
        .map(|&c| dequant_code(c, gq.scale, offset))
        .collect()
}

/// Packs 4-bit codes two per byte; the even index goes in the low nibble.
pub fn pack_nibbles(codes: &[u8]) -> Result<Vec<u8>> {
    if !codes.len().is_multiple_of(2) {
        return Err(Error::Format(format!(
            "cannot pack odd number of codes ({})",
            codes.len()
        )));
    }
    if let Some(i) = codes.iter().position(|&c| c > CODE_MAX) {
        return Err(Error::Format(format!(
            "code {} at index {i} exceeds 4 bits",
            codes[i]
        )));
    }
    Ok(codes.chunks_exact(2).map(|p| p[0] | (p[1] << 4)).collect())
}

pub fn unpack_nibbles(bytes: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(bytes.len() * 2);
    unpack_nibbles_into(bytes, &mut out);
    out
}

pub(crate) fn unpack_nibbles_into(bytes: &[u8], out: &mut Vec<u8>) {
    out.clear();
    for &b in bytes {
        out.push(b & 0x0f);
        out.push(b >> 4);
    }
}

/// An INT4 weight matrix, output-row major, groups along the input dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    recipe: QuantRecipe,
    packed: Vec<u8>,
    scales: Vec<f32>,
    zero_points: Vec<u8>,
}

impl QuantizedTensor {
    /// Assembles a tensor from raw storage, validating every length.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        recipe: QuantRecipe,
        packed: Vec<u8>,
        scales: Vec<f32>,
        zero_points: Vec<u8>,
    ) -> Result<Self> {
        let qt = Self {
            rows,
            cols,
            recipe,
            packed,
            scales,
            zero_points,
        };
        qt.validate()?;
        Ok(qt)
    }

    pub fn validate(&self) -> Result<()> {
        let (rows, cols) = (self.rows, self.cols);
        let group = self.group_size();
        if rows == 0 || cols == 0 {
            return Err(Error::Format(format!("empty quantized tensor {rows}x{cols}")));
        }
        if cols % 2 != 0 || group == 0 || cols % group != 0 {
            return Err(Error::Format(format!(
                "cols {cols} incompatible with group size {group}"
            )));
        }
        let groups = rows * (cols / group);
        if self.packed.len() != rows * cols / 2 {
            return Err(Error::Format(format!(
                "packed length {} != {}",
                self.packed.len(),
                rows * cols / 2
            )));
        }
        if self.scales.len() != groups {
            return Err(Error::Format(format!(
                "scale count {} != {groups}",
                self.scales.len()
            )));
        }
        if let Some(s) = self.scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Format(format!("invalid scale {s}")));
        }
        let expected_zp = match self.recipe.scheme {
            QuantScheme::Asymmetric => groups,
            QuantScheme::Symmetric => 0,
        };
        if self.zero_points.len() != expected_zp {
            return Err(Error::Format(format!(
                "zero-point count {} != {expected_zp}",
                self.zero_points.len()
            )));
        }
        if let Some(z) = self.zero_points.iter().find(|&&z| z > CODE_MAX) {
            return Err(Error::Format(format!("zero-point {z} out of range")));
        }
        Ok(())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn recipe(&self) -> QuantRecipe {
        self.recipe
    }

    #[inline]
    pub fn scheme(&self) -> QuantScheme {
        self.recipe.scheme
    }

    #[inline]
    pub fn group_size(&self) -> usize {
        self.recipe.granularity.effective_group_size(self.cols)
    }

    #[inline]
    pub fn groups_per_row(&self) -> usize {
        self.cols / self.group_size()
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[u8] {
        &self.zero_points
    }

    /// Same weights under a different compute path; storage is untouched.
    pub fn set_compute_path(&mut self, path: ComputePath) {
        self.recipe.compute_path = path;
    }

    /// Packed bytes of group `g` in row `r`.
    #[inline]
    pub fn group_bytes(&self, r: usize, g: usize) -> &[u8] {
        let half = self.group_size() / 2;
        let start = r * self.cols / 2 + g * half;
        &self.packed[start..start + half]
    }

    /// Scale and code offset of group `g` in row `r`.
    #[inline]
    pub fn group_params(&self, r: usize, g: usize) -> (f32, u8) {
        let idx = r * self.groups_per_row() + g;
        let zp = match self.recipe.scheme {
            QuantScheme::Asymmetric => self.zero_points[idx],
            QuantScheme::Symmetric => SYMMETRIC_OFFSET,
        };
        (self.scales[idx], zp)
    }

    /// Serialized payload size: codes, then scales, then zero-points.
    pub fn storage_bytes(&self) -> usize {
        self.packed.len() + self.scales.len() * 4 + self.zero_points.len()
    }
}

/// Quantizes a `rows x cols` weight matrix (output channels x input channels).
pub fn quantize_tensor(weights: &Matrix, recipe: QuantRecipe) -> Result<QuantizedTensor> {
    let (rows, cols) = (weights.rows(), weights.cols());
    let group = recipe.granularity.effective_group_size(cols);
    if rows == 0 || cols == 0 || group == 0 || cols % group != 0 || cols % 2 != 0 {
        return Err(Error::Shape(format!(
            "tensor {rows}x{cols}: input dimension {cols} not divisible by group size {group}"
        )));
    }
    let groups_per_row = cols / group;
    let mut codes = vec![0u8; rows * cols];
    let mut scales = Vec::with_capacity(rows * groups_per_row);
    let mut zero_points = match recipe.scheme {
        QuantScheme::Asymmetric => Vec::with_capacity(rows * groups_per_row),
        QuantScheme::Symmetric => Vec::new(),
    };
    for (src, dst) in weights
        .as_slice()
        .chunks_exact(group)
        .zip(codes.chunks_exact_mut(group))
    {
        let (scale, zp) = quantize_group_into(src, recipe.scheme, dst)?;
        scales.push(scale);
        if recipe.scheme == QuantScheme::Asymmetric {
            zero_points.push(zp);
        }
    }
    let packed = pack_nibbles(&codes)?;
    QuantizedTensor::from_parts(rows, cols, recipe, packed, scales, zero_points)
}

pub fn dequantize_tensor(qt: &QuantizedTensor) -> Result<Matrix> {
    qt.validate()?;
    let mut out = Matrix::zeros(qt.rows(), qt.cols());
    let group = qt.group_size();
    for r in 0..qt.rows() {
        let row = out.row_mut(r);
        for (g, dst) in row.chunks_exact_mut(group).enumerate() {
            let (scale, offset) = qt.group_params(r, g);
            for (pair, &b) in dst.chunks_exact_mut(2).zip(qt.group_bytes(r, g)) {
                pair[0] = dequant_code(b & 0x0f, scale, offset);
                pair[1] = dequant_code(b >> 4, scale, offset);
            }
        }
    }
    Ok(out)
}

/// Per-group symmetric INT8 quantization of an activation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DynQuantActivation {
    pub rows: usize,
    pub cols: usize,
    pub group_size: usize,
    pub codes: Vec<i8>,
    /// One per group per row.
    pub scales: Vec<f32>,
    /// Sum of the codes of each group, used for the zero-point correction.
    pub code_sums: Vec<i32>,
}

impl DynQuantActivation {
    #[inline]
    pub fn groups_per_row(&self) -> usize {
        self.cols / self.group_size
    }

    #[inline]
    pub fn group_codes(&self, r: usize, g: usize) -> &[i8] {
        let start = r * self.cols + g * self.group_size;
        &self.codes[start..start + self.group_size]
    }

    #[inline]
    pub fn group_index(&self, r: usize, g: usize) -> usize {
        r * self.groups_per_row() + g
    }
}

pub(crate) fn quantize_activation_group(values: &[f32], codes: &mut [i8]) -> (f32, i32) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: AVX2 support was just checked.
            return unsafe { quantize_activation_group_avx2(values, codes) };
        }
    }
    activation_group(values, codes)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn quantize_activation_group_avx2(values: &[f32], codes: &mut [i8]) -> (f32, i32) {
    activation_group(values, codes)
}

#[inline(always)]
fn activation_group(values: &[f32], codes: &mut [i8]) -> (f32, i32) {
    let absmax = values.iter().fold(0.0f32, |m, &v| if v.abs() > m { v.abs() } else { m });
    let mut scale = (f64::from(absmax) / ACT_MAX) as f32;
    if scale == 0.0 {
        scale = 1.0;
    }
    let s = f64::from(scale);
    let mut sum = 0i32;
    for (c, &v) in codes.iter_mut().zip(values) {
        // clamping before rounding gives the same code and keeps the
        // truncation within i32
        let x = (f64::from(v) / s).clamp(-ACT_MAX, ACT_MAX);
        let a = x.abs();
        let t = a as i32;
        let r = if a - f64::from(t) >= 0.5 { t + 1 } else { t };
        let q = if x < 0.0 { -r } else { r };
        *c = q as i8;
        sum = sum.wrapping_add(q);
    }
    (scale, sum)
}

/// Dynamic activation quantization with groups aligned to the weight groups.
pub fn quantize_activations(x: &Matrix, group_size: usize) -> Result<DynQuantActivation> {
    let (rows, cols) = (x.rows(), x.cols());
    if group_size == 0 || cols % group_size != 0 {
        return Err(Error::Shape(format!(
            "activation row length {cols} not divisible by group size {group_size}"
        )));
    }
    check_finite(x.as_slice())?;
    let groups = rows * (cols / group_size);
    let mut codes = vec![0i8; rows * cols];
    let mut scales = Vec::with_capacity(groups);
    let mut code_sums = Vec::with_capacity(groups);
    for (src, dst) in x
        .as_slice()
        .chunks_exact(group_size)
        .zip(codes.chunks_exact_mut(group_size))
    {
        let (scale, sum) = quantize_activation_group(src, dst);
        scales.push(scale);
        code_sums.push(sum);
    }
    Ok(DynQuantActivation {
        rows,
        cols,
        group_size,
        codes,
        scales,
        code_sums,
    })
}
