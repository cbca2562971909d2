use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kvcache::KvStore;
use crate::runtime::forward::{forward_decode, forward_prefill, new_cache};
use crate::runtime::model::Model;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Greedy,
    TopK(usize),
    TopP(f32),
}

impl std::str::FromStr for Sampling {
    type Err = Error;

    /// `greedy`, `topk:<k>` or `topp:<p>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("bad sampling spec {s:?}"));
        let sampling = match s.split_once(':') {
            None if s == "greedy" => Sampling::Greedy,
            Some(("topk", k)) => Sampling::TopK(k.parse().map_err(|_| bad())?),
            Some(("topp", p)) => Sampling::TopP(p.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        sampling.validate()?;
        Ok(sampling)
    }
}

impl std::fmt::Display for Sampling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Sampling::Greedy => write!(f, "greedy"),
            Sampling::TopK(k) => write!(f, "topk:{k}"),
            Sampling::TopP(p) => write!(f, "topp:{p}"),
        }
    }
}

impl Sampling {
    fn validate(&self) -> Result<()> {
        match *self {
            Sampling::TopK(0) => Err(Error::InvalidConfig("top-k needs k >= 1".into())),
            Sampling::TopP(p) if !(p > 0.0 && p <= 1.0) => {
                Err(Error::InvalidConfig(format!("top-p needs 0 < p <= 1, got {p}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenParams {
    pub max_new_tokens: usize,
    pub sampling: Sampling,
    pub seed: u64,
    pub temperature: f32,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            max_new_tokens: 32,
            sampling: Sampling::Greedy,
            seed: 0,
            temperature: 1.0,
        }
    }
}

/// Generated tokens plus wall-clock timings.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    /// Prefill plus the first sampled token.
    pub first_token_latency: Option<Duration>,
    /// One entry per token after the first.
    pub token_latencies: Vec<Duration>,
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Candidate ids ordered by descending logit, ties by ascending id.
fn ranked(logits: &[f32]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..logits.len()).collect();
    ids.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    ids
}

fn probabilities(logits: &[f32], ids: &[usize], temperature: f32) -> Vec<f64> {
    let t = f64::from(temperature);
    let max = f64::from(logits[ids[0]]);
    let mut p: Vec<f64> = ids
        .iter()
        .map(|&i| ((f64::from(logits[i]) - max) / t).exp())
        .collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

fn draw(ids: &[usize], probs: &[f64], rng: &mut ChaCha8Rng) -> u32 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (&id, &p) in ids.iter().zip(probs) {
        acc += p;
        if u < acc {
            return id as u32;
        }
    }
    ids[ids.len() - 1] as u32
}

pub fn sample(logits: &[f32], sampling: Sampling, temperature: f32, rng: &mut ChaCha8Rng) -> u32 {
    match sampling {
        Sampling::Greedy => argmax(logits),
        Sampling::TopK(k) => {
            let mut ids = ranked(logits);
            ids.truncate(k.min(ids.len()));
            if ids.len() == 1 {
                return ids[0] as u32;
            }
            let probs = probabilities(logits, &ids, temperature);
            draw(&ids, &probs, rng)
        }
        Sampling::TopP(p) => {
            let ids = ranked(logits);
            let probs = probabilities(logits, &ids, temperature);
            let mut keep = 0;
            let mut mass = 0.0;
            while keep < ids.len() {
                mass += probs[keep];
                keep += 1;
                if mass >= f64::from(p) {
                    break;
                }
            }
            let kept: Vec<f64> = probs[..keep].iter().map(|v| v / mass).collect();
            draw(&ids[..keep], &kept, rng)
        }
    }
}

/// Autoregressive generation on a fresh pre-allocated cache.
pub fn generate(model: &Model, prompt: &[u32], params: &GenParams) -> Result<Generation> {
    let mut cache = new_cache(model)?;
    generate_with_cache(model, prompt, params, &mut cache)
}

/// Generation into a caller-provided cache, which is cleared first.
pub fn generate_with_cache<C: KvStore>(
    model: &Model,
    prompt: &[u32],
    params: &GenParams,
    cache: &mut C,
) -> Result<Generation> {
    if prompt.is_empty() {
        return Err(Error::InvalidInput("prompt must not be empty".into()));
    }
    params.sampling.validate()?;
    if !(params.temperature.is_finite() && params.temperature > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {}",
            params.temperature
        )));
    }
    let mut out = Generation {
        tokens: Vec::with_capacity(params.max_new_tokens),
        first_token_latency: None,
        token_latencies: Vec::with_capacity(params.max_new_tokens.saturating_sub(1)),
    };
    if params.max_new_tokens == 0 {
        return Ok(out);
    }
    cache.clear();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let t0 = Instant::now();
    let logits = forward_prefill(model, prompt, cache)?;
    let mut next = sample(&logits, params.sampling, params.temperature, &mut rng);
    out.first_token_latency = Some(t0.elapsed());
    out.tokens.push(next);

    while out.tokens.len() < params.max_new_tokens {
        let t = Instant::now();
        let logits = forward_decode(model, next, cache)?;
        next = sample(&logits, params.sampling, params.temperature, &mut rng);
        out.token_latencies.push(t.elapsed());
        out.tokens.push(next);
    }
    Ok(out)
}
