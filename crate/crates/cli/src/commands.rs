use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use lowbit::autotune::{evaluate, trail_to_jsonl, tune, TuneConfig};
use lowbit::bench::{bench, BenchConfig, Phase};
use lowbit::kernels::KernelConfig;
use lowbit::modelio::{self, memory_report, parse_config, NqfFile, TensorData};
use lowbit::runtime::{generate, tokenizer, GenParams, Model, ModelConfig, QuantizeOptions};
use lowbit::train::{synthetic_corpus, train, TrainConfig};

use crate::{
    BenchArgs, Cli, Command, EvalArgs, InspectArgs, QuantizeArgs, RunArgs, Status, TrainArgs, TuneArgs,
};

pub(crate) fn dispatch(cli: &Cli) -> Result<Status> {
    let kernel = KernelConfig::with_threads(cli.threads);
    match &cli.command {
        Command::Quantize(a) => quantize(a, kernel),
        Command::Tune(a) => tune_cmd(a, kernel),
        Command::Run(a) => run(a, kernel),
        Command::Eval(a) => eval(a, kernel),
        Command::Bench(a) => bench_cmd(a, kernel),
        Command::Inspect(a) => inspect(a),
        Command::Train(a) => train_cmd(a),
    }
}

fn load(path: &Path, kernel: KernelConfig) -> Result<Model> {
    let mut m = modelio::load(path).with_context(|| format!("loading {}", path.display()))?;
    m.kernel = kernel;
    Ok(m)
}

fn save(model: &Model, path: &Path) -> Result<()> {
    modelio::save(model, path).with_context(|| format!("writing {}", path.display()))
}

fn read_tokens(path: &Path) -> Result<Vec<u32>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(tokenizer::encode_bytes(&bytes))
}

fn quantize(a: &QuantizeArgs, kernel: KernelConfig) -> Result<Status> {
    let model = load(&a.model, kernel)?;
    let q = model.quantize(QuantizeOptions {
        recipe: a.recipe,
        quantize_lm_head: !a.keep_lm_head,
    })?;
    save(&q, &a.out)?;
    println!("recipe: {}", a.recipe);
    println!("{}", memory_report(&q));
    Ok(Status::Ok)
}

fn tune_cmd(a: &TuneArgs, kernel: KernelConfig) -> Result<Status> {
    let model = load(&a.model, kernel)?;
    let mut cfg = TuneConfig::new(read_tokens(&a.eval_tokens)?);
    cfg.target_relative_loss = a.target;
    cfg.metric = a.metric;
    cfg.quantize_lm_head = !a.keep_lm_head;
    if !a.recipes.is_empty() {
        cfg.recipe_order = a.recipes.clone();
    }
    let out = tune(&model, &cfg)?;
    for r in &out.trail {
        println!(
            "candidate {:<20} {} {:.6} -> {:.6}  relative loss {:+.6}  {}",
            r.recipe.to_string(),
            r.metric,
            r.baseline_metric,
            r.candidate_metric,
            r.relative_loss,
            if r.passed { "pass" } else { "fail" }
        );
    }
    if let Some(p) = &a.trail_out {
        fs::write(p, trail_to_jsonl(&out.trail, true)).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.out {
        save(&out.model, p)?;
    }
    if out.no_recipe_met() {
        println!("no recipe met target {}; best effort: {}", a.target, out.report.recipe);
        Ok(Status::NoRecipeMet)
    } else {
        println!("selected: {}", out.report.recipe);
        Ok(Status::Ok)
    }
}

fn run(a: &RunArgs, kernel: KernelConfig) -> Result<Status> {
    let model = load(&a.model, kernel)?;
    let prompt = tokenizer::encode(&a.prompt);
    let params = GenParams {
        max_new_tokens: a.max_new,
        sampling: a.sampling,
        seed: a.seed,
        temperature: a.temperature,
    };
    let g = generate(&model, &prompt, &params)?;
    println!("{}{}", a.prompt, tokenizer::decode(&g.tokens));
    println!("generated {} tokens", g.tokens.len());
    if let Some(first) = g.first_token_latency {
        println!("latency first_token_ms {:.3}", first.as_secs_f64() * 1e3);
    }
    let ms: Vec<f64> = g.token_latencies.iter().map(|d| d.as_secs_f64() * 1e3).collect();
    if let Some(s) = lowbit::bench::LatencyStats::from_ms(&ms) {
        println!("latency per_token_ms mean {:.3} median {:.3}", s.mean_ms, s.median_ms);
    }
    Ok(Status::Ok)
}

fn eval(a: &EvalArgs, kernel: KernelConfig) -> Result<Status> {
    let model = load(&a.model, kernel)?;
    let tokens = read_tokens(&a.tokens)?;
    let v = evaluate(&model, &tokens, a.metric)?;
    println!("{} {v:.6}", a.metric);
    Ok(Status::Ok)
}

fn bench_cmd(a: &BenchArgs, kernel: KernelConfig) -> Result<Status> {
    let model = load(&a.model, kernel)?;
    let cfg = BenchConfig {
        in_tokens: a.in_tokens,
        out_tokens: a.out_tokens,
        warmup: a.warmup,
        iters: a.iters,
        seed: a.seed,
    };
    let r = bench(&model, &cfg)?;
    for phase in [Phase::First, Phase::Decode] {
        if let Some(s) = r.stats(phase) {
            println!(
                "{:<6} n={:<5} mean {:.3} ms  median {:.3} ms  p90 {:.3} ms  min {:.3} ms  max {:.3} ms",
                phase.as_str(),
                s.count,
                s.mean_ms,
                s.median_ms,
                s.p90_ms,
                s.min_ms,
                s.max_ms
            );
        }
    }
    if let Some(p) = &a.csv {
        fs::write(p, r.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(Status::Ok)
}

fn inspect(a: &InspectArgs) -> Result<Status> {
    let file = NqfFile::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    print!("{}", modelio::format_config(&file.config));
    for t in &file.tensors {
        let kind = match &t.data {
            TensorData::F32 { .. } => "fp32".to_string(),
            TensorData::Int4(q) => format!("int4 {}", q.recipe()),
        };
        println!("{:<28} {:<24} {:?}", t.name, kind, t.data.dims());
    }
    let report = lowbit::modelio::MemoryReport::from_tensors(file.tensors.iter().map(|t| (t.name.as_str(), &t.data)));
    println!("{report}");
    Ok(Status::Ok)
}

fn train_cmd(a: &TrainArgs) -> Result<Status> {
    let config = match &a.config {
        Some(p) => parse_config(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => ModelConfig::new(256, 2, 4, 32, 256, 64),
    };
    let corpus = match &a.data {
        Some(p) => read_tokens(p)?,
        None => synthetic_corpus(a.seed, a.corpus_len),
    };
    if a.holdout >= corpus.len() {
        anyhow::bail!(lowbit::Error::InvalidInput(format!(
            "holdout of {} tokens leaves nothing of a {}-token corpus",
            a.holdout,
            corpus.len()
        )));
    }
    let (train_part, held) = corpus.split_at(corpus.len() - a.holdout);
    let tc = TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        seq_len: a.seq_len,
        learning_rate: a.lr,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let (model, report) = train(config, train_part, &tc)?;
    let tail = &report.losses[report.losses.len().saturating_sub(20)..];
    println!(
        "loss {:.4} -> {:.4} (mean of last {})",
        report.losses[0],
        tail.iter().sum::<f32>() / tail.len() as f32,
        tail.len()
    );
    save(&model, &a.out)?;
    if let Some(p) = &a.holdout_out {
        let bytes: Vec<u8> = held.iter().map(|&t| t as u8).collect();
        fs::write(p, bytes).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(Status::Ok)
}
