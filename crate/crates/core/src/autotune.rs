//! Evaluation metrics and the recipe tuning loop: quantize with each recipe in
//! turn, compare against the FP32 baseline and stop at the first one within
//! the target relative loss.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcache::KvStore;
use crate::quant::{ComputePath, QuantGranularity, QuantRecipe, QuantScheme};
use crate::runtime::{argmax, forward_prefill_all, new_cache, Model, QuantizeOptions};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    NextTokenAccuracy,
    Perplexity,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" | "next_token_accuracy" => Ok(Metric::NextTokenAccuracy),
            "perplexity" | "ppl" => Ok(Metric::Perplexity),
            _ => Err(Error::InvalidInput(format!("unknown metric {s:?}"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::NextTokenAccuracy => "accuracy",
            Metric::Perplexity => "perplexity",
        })
    }
}

/// Teacher-forced logits over `tokens`, split into windows of at most
/// `max_seq_len` tokens. Consecutive windows share one token so every
/// next-token pair is scored exactly once. Calls `visit(logits, target)`
/// for each pair in order.
fn for_each_prediction(model: &Model, tokens: &[u32], mut visit: impl FnMut(&[f32], u32)) -> Result<()> {
    if tokens.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "evaluation needs at least 2 tokens, got {}",
            tokens.len()
        )));
    }
    let window = model.config.max_seq_len;
    if window < 2 {
        return Err(Error::InvalidConfig("max_seq_len must be at least 2 to evaluate".into()));
    }
    let mut cache = new_cache(model)?;
    let mut start = 0;
    while start + 1 < tokens.len() {
        let end = (start + window).min(tokens.len());
        let chunk = &tokens[start..end];
        cache.clear();
        let logits: Matrix = forward_prefill_all(model, chunk, &mut cache)?;
        for t in 0..chunk.len() - 1 {
            visit(logits.row(t), chunk[t + 1]);
        }
        start = end - 1;
    }
    Ok(())
}

/// Fraction of positions whose argmax equals the next token.
pub fn eval_next_token_accuracy(model: &Model, tokens: &[u32]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for_each_prediction(model, tokens, |logits, target| {
        total += 1;
        if argmax(logits) == target {
            hits += 1;
        }
    })?;
    Ok(hits as f64 / total as f64)
}

fn log_softmax_at(logits: &[f32], target: u32) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
    let z: f64 = logits.iter().map(|&v| (f64::from(v) - max).exp()).sum();
    f64::from(logits[target as usize]) - max - z.ln()
}

/// exp of the mean next-token negative log-likelihood (natural log).
pub fn eval_perplexity(model: &Model, tokens: &[u32]) -> Result<f64> {
    let mut nll = 0.0f64;
    let mut total = 0usize;
    for_each_prediction(model, tokens, |logits, target| {
        total += 1;
        nll -= log_softmax_at(logits, target);
    })?;
    Ok((nll / total as f64).exp())
}

pub fn evaluate(model: &Model, tokens: &[u32], metric: Metric) -> Result<f64> {
    match metric {
        Metric::NextTokenAccuracy => eval_next_token_accuracy(model, tokens),
        Metric::Perplexity => eval_perplexity(model, tokens),
    }
}

/// Positive when the candidate is worse than the baseline.
pub fn relative_loss(metric: Metric, baseline: f64, candidate: f64) -> f64 {
    match metric {
        Metric::NextTokenAccuracy => (baseline - candidate) / baseline,
        Metric::Perplexity => (candidate - baseline) / baseline,
    }
}

/// asym g32/g64/g128 with INT8 compute, sym g32, asym g32 with FP32 compute,
/// then the per-channel variants.
pub fn default_recipe_order() -> Vec<QuantRecipe> {
    use ComputePath::*;
    use QuantGranularity::*;
    use QuantScheme::*;
    [
        (Asymmetric, Grouped(32), Int8Compute),
        (Asymmetric, Grouped(64), Int8Compute),
        (Asymmetric, Grouped(128), Int8Compute),
        (Symmetric, Grouped(32), Int8Compute),
        (Asymmetric, Grouped(32), Fp32Compute),
        (Asymmetric, PerChannel, Int8Compute),
        (Symmetric, PerChannel, Int8Compute),
        (Asymmetric, PerChannel, Fp32Compute),
    ]
    .into_iter()
    .map(|(scheme, granularity, compute_path)| QuantRecipe {
        scheme,
        granularity,
        compute_path,
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneConfig {
    pub target_relative_loss: f64,
    pub recipe_order: Vec<QuantRecipe>,
    pub eval_tokens: Vec<u32>,
    pub metric: Metric,
    pub quantize_lm_head: bool,
}

impl TuneConfig {
    pub fn new(eval_tokens: Vec<u32>) -> Self {
        Self {
            target_relative_loss: 0.01,
            recipe_order: default_recipe_order(),
            eval_tokens,
            metric: Metric::NextTokenAccuracy,
            quantize_lm_head: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.recipe_order.is_empty() {
            return Err(Error::InvalidConfig("recipe order is empty".into()));
        }
        let t = self.target_relative_loss;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidConfig(format!(
                "target relative loss must lie in [0, 1], got {t}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recipe: QuantRecipe,
    pub metric: Metric,
    pub baseline_metric: f64,
    pub candidate_metric: f64,
    pub relative_loss: f64,
    pub passed: bool,
    /// Quantization plus evaluation time of this candidate.
    pub wall_ms: f64,
}

impl EvalReport {
    /// One JSON object per line; `wall_ms` is omitted when `timing` is false.
    pub fn to_json_line(&self, timing: bool) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        if !timing {
            if let serde_json::Value::Object(m) = &mut v {
                m.remove("wall_ms");
            }
        }
        serde_json::to_string(&v).expect("report serializes")
    }
}

/// The trail as line-delimited JSON, one record per candidate.
pub fn trail_to_jsonl(trail: &[EvalReport], timing: bool) -> String {
    let mut s = String::new();
    for r in trail {
        s.push_str(&r.to_json_line(timing));
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub model: Model,
    pub report: EvalReport,
    pub trail: Vec<EvalReport>,
}

impl TuneOutcome {
    /// True when no candidate met the target and `report` is the best effort.
    pub fn no_recipe_met(&self) -> bool {
        !self.report.passed
    }
}

pub fn tune(fp32_model: &Model, cfg: &TuneConfig) -> Result<TuneOutcome> {
    cfg.validate()?;
    let baseline = evaluate(fp32_model, &cfg.eval_tokens, cfg.metric)?;
    if !(baseline.is_finite() && baseline > 0.0) {
        return Err(Error::InvalidInput(format!(
            "baseline {} is {baseline}; relative loss is undefined",
            cfg.metric
        )));
    }
    let mut trail: Vec<EvalReport> = Vec::with_capacity(cfg.recipe_order.len());
    let mut best: Option<(usize, Model)> = None;
    for &recipe in &cfg.recipe_order {
        let t0 = Instant::now();
        let candidate = fp32_model.quantize(QuantizeOptions {
            recipe,
            quantize_lm_head: cfg.quantize_lm_head,
        })?;
        let metric = evaluate(&candidate, &cfg.eval_tokens, cfg.metric)?;
        let loss = relative_loss(cfg.metric, baseline, metric);
        let report = EvalReport {
            recipe,
            metric: cfg.metric,
            baseline_metric: baseline,
            candidate_metric: metric,
            relative_loss: loss,
            passed: loss <= cfg.target_relative_loss,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        let passed = report.passed;
        let better = match &best {
            None => true,
            Some((i, _)) => loss < trail[*i].relative_loss,
        };
        trail.push(report);
        if better {
            best = Some((trail.len() - 1, candidate));
        }
        if passed {
            break;
        }
    }
    let (i, model) = best.expect("at least one recipe evaluated");
    Ok(TuneOutcome {
        model,
        report: trail[i].clone(),
        trail,
    })
}
