//! Analytic weight-memory footprint, FP32 versus stored.

use std::fmt;

use crate::quant::QuantScheme;
use crate::runtime::Model;

use super::model_tensors;
use super::nqf::TensorData;

/// Bytes of an INT4 tensor: packed codes, one f32 scale per group, and one
/// zero-point byte per group when asymmetric.
pub fn int4_bytes(rows: u64, cols: u64, group_size: u64, scheme: QuantScheme) -> u64 {
    let groups = rows * (cols / group_size);
    let zero_points = match scheme {
        QuantScheme::Asymmetric => groups,
        QuantScheme::Symmetric => 0,
    };
    rows * cols / 2 + groups * 4 + zero_points
}

pub fn fp32_bytes(elements: u64) -> u64 {
    elements * 4
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorMemory {
    pub name: String,
    pub dims: Vec<usize>,
    pub fp32_bytes: u64,
    pub stored_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryReport {
    pub tensors: Vec<TensorMemory>,
    pub fp32_total: u64,
    pub stored_total: u64,
}

impl MemoryReport {
    /// FP32 bytes over stored bytes.
    pub fn ratio(&self) -> f64 {
        if self.stored_total == 0 {
            return 1.0;
        }
        self.fp32_total as f64 / self.stored_total as f64
    }

    pub fn from_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a TensorData)>) -> Self {
        let mut out = MemoryReport {
            tensors: Vec::new(),
            fp32_total: 0,
            stored_total: 0,
        };
        for (name, data) in tensors {
            let dims = data.dims();
            let elems: u64 = dims.iter().map(|&d| d as u64).product();
            let stored = match data {
                TensorData::F32 { .. } => fp32_bytes(elems),
                TensorData::Int4(q) => int4_bytes(
                    q.rows() as u64,
                    q.cols() as u64,
                    q.group_size() as u64,
                    q.scheme(),
                ),
            };
            out.fp32_total += fp32_bytes(elems);
            out.stored_total += stored;
            out.tensors.push(TensorMemory {
                name: name.to_owned(),
                dims,
                fp32_bytes: fp32_bytes(elems),
                stored_bytes: stored,
            });
        }
        out
    }
}

/// Per-tensor and total weight bytes of `model`.
pub fn memory_report(model: &Model) -> MemoryReport {
    let tensors = model_tensors(model);
    MemoryReport::from_tensors(tensors.iter().map(|t| (t.name.as_str(), &t.data)))
}

impl fmt::Display for MemoryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>14} {:>14} {:>8}", "tensor", "fp32 bytes", "stored bytes", "ratio")?;
        for t in &self.tensors {
            writeln!(
                f,
                "{:<28} {:>14} {:>14} {:>8.2}",
                t.name,
                t.fp32_bytes,
                t.stored_bytes,
                t.fp32_bytes as f64 / t.stored_bytes as f64
            )?;
        }
        write!(
            f,
            "{:<28} {:>14} {:>14} {:>8.2}",
            "total",
            self.fp32_total,
            self.stored_total,
            self.ratio()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_examples() {
        assert_eq!(fp32_bytes(4096 * 4096), 67_108_864);
        let g128 = int4_bytes(4096, 4096, 128, QuantScheme::Asymmetric);
        // independent recomputation: codes + scales + zero-points
        assert_eq!(g128, 8_388_608 + 4096 * 32 * 4 + 4096 * 32);
        assert_eq!(g128, 9_043_968);
        let r128 = 67_108_864.0 / g128 as f64;
        assert!((r128 - 7.42).abs() < 0.01);
        let g32 = int4_bytes(4096, 4096, 32, QuantScheme::Asymmetric);
        let r32 = 67_108_864.0 / g32 as f64;
        assert!((r32 - 6.1).abs() < 0.01);
        assert!(g32 > g128);
        assert_eq!(
            int4_bytes(4096, 4096, 128, QuantScheme::Symmetric),
            8_388_608 + 4096 * 32 * 4
        );
    }

    #[test]
    fn footprint_non_increasing_in_group_size() {
        for scheme in [QuantScheme::Asymmetric, QuantScheme::Symmetric] {
            let sizes: Vec<u64> = crate::quant::GROUP_SIZES
                .iter()
                .map(|&g| int4_bytes(64, 1024, g as u64, scheme))
                .collect();
            assert!(sizes.windows(2).all(|w| w[0] >= w[1]), "{sizes:?}");
        }
    }
}
