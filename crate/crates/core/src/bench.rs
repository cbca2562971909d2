//! Per-token latency measurement: fixed-length prompt, fixed number of
//! generated tokens, warmup iterations discarded.

use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::runtime::{generate_with_cache, new_cache, GenParams, Model, Sampling};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub in_tokens: usize,
    pub out_tokens: usize,
    pub warmup: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            in_tokens: 32,
            out_tokens: 32,
            warmup: 1,
            iters: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Prefill plus the first sampled token.
    First,
    Decode,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::First => "first",
            Phase::Decode => "decode",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencySample {
    pub iter: usize,
    pub token_index: usize,
    pub ms: f64,
    pub phase: Phase,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub count: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p90_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    pub fn from_ms(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        let p90 = v[((n as f64 * 0.9).ceil() as usize).clamp(1, n) - 1];
        Some(Self {
            count: n,
            mean_ms: v.iter().sum::<f64>() / n as f64,
            median_ms: median,
            p90_ms: p90,
            min_ms: v[0],
            max_ms: v[n - 1],
        })
    }
}

/// Samples of the measured (non-warmup) iterations, numbered from 0.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub config: BenchConfig,
    pub samples: Vec<LatencySample>,
}

impl BenchResult {
    pub fn stats(&self, phase: Phase) -> Option<LatencyStats> {
        let ms: Vec<f64> = self
            .samples
            .iter()
            .filter(|s| s.phase == phase)
            .map(|s| s.ms)
            .collect();
        LatencyStats::from_ms(&ms)
    }

    /// `iter,token_index,ms,phase` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,token_index,ms,phase\n");
        for s in &self.samples {
            out.push_str(&format!("{},{},{:.6},{}\n", s.iter, s.token_index, s.ms, s.phase.as_str()));
        }
        out
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Greedy generation of `out_tokens` after a random prompt of `in_tokens`,
/// repeated `warmup + iters` times on one pre-allocated cache.
pub fn bench(model: &Model, cfg: &BenchConfig) -> Result<BenchResult> {
    if cfg.in_tokens == 0 || cfg.out_tokens == 0 || cfg.iters == 0 {
        return Err(Error::InvalidConfig(
            "in_tokens, out_tokens and iters must be positive".into(),
        ));
    }
    // The last generated token is sampled but never fed back.
    let needed = cfg.in_tokens + cfg.out_tokens - 1;
    if needed > model.config.max_seq_len {
        return Err(Error::InvalidConfig(format!(
            "{} prompt + {} generated tokens exceed max_seq_len {}",
            cfg.in_tokens, cfg.out_tokens, model.config.max_seq_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prompt: Vec<u32> = (0..cfg.in_tokens)
        .map(|_| rng.gen_range(0..model.config.vocab_size as u32))
        .collect();
    let params = GenParams {
        max_new_tokens: cfg.out_tokens,
        sampling: Sampling::Greedy,
        seed: cfg.seed,
        temperature: 1.0,
    };
    let mut cache = new_cache(model)?;
    let mut samples = Vec::with_capacity(cfg.iters * cfg.out_tokens);
    for it in 0..cfg.warmup + cfg.iters {
        let g = generate_with_cache(model, &prompt, &params, &mut cache)?;
        if it < cfg.warmup {
            continue;
        }
        let iter = it - cfg.warmup;
        if let Some(first) = g.first_token_latency {
            samples.push(LatencySample {
                iter,
                token_index: 0,
                ms: ms(first),
                phase: Phase::First,
            });
        }
        for (i, d) in g.token_latencies.iter().enumerate() {
            samples.push(LatencySample {
                iter,
                token_index: i + 1,
                ms: ms(*d),
                phase: Phase::Decode,
            });
        }
    }
    Ok(BenchResult {
        config: *cfg,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::ModelConfig;

    #[test]
    fn sample_count_and_csv_shape() {
        let m = Model::random(ModelConfig::new(32, 1, 2, 8, 32, 16), 0).unwrap();
        let cfg = BenchConfig {
            in_tokens: 4,
            out_tokens: 5,
            warmup: 2,
            iters: 3,
            seed: 1,
        };
        let r = bench(&m, &cfg).unwrap();
        assert_eq!(r.samples.len(), 15);
        assert!(r.samples.iter().all(|s| s.iter < 3));
        assert_eq!(r.stats(Phase::First).unwrap().count, 3);
        assert_eq!(r.stats(Phase::Decode).unwrap().count, 12);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 16);
        assert_eq!(csv.lines().next().unwrap(), "iter,token_index,ms,phase");
    }

    #[test]
    fn too_long_for_context_rejected() {
        let m = Model::random(ModelConfig::new(32, 1, 2, 8, 32, 16), 0).unwrap();
        let cfg = BenchConfig {
            in_tokens: 10,
            out_tokens: 8,
            ..BenchConfig::default()
        };
        assert!(matches!(bench(&m, &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn stats_median_and_p90() {
        let s = LatencyStats::from_ms(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(s.median_ms, 2.5);
        assert_eq!(s.mean_ms, 2.5);
        assert_eq!(s.p90_ms, 4.0);
        assert!(LatencyStats::from_ms(&[]).is_none());
    }
}
