use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lowbit::modelio;
use lowbit::quant::QuantRecipe;
use lowbit::runtime::{forward_prefill, new_cache, Model, ModelConfig};

fn lowbit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lowbit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    model: PathBuf,
    tokens: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let model = dir.path().join("fp32.nqf");
        let m = Model::random(ModelConfig::new(256, 1, 2, 16, 64, 64), 11).unwrap();
        modelio::save(&m, &model).unwrap();
        let tokens = dir.path().join("eval.bin");
        let text: Vec<u8> = b"the quick brown fox jumps over the lazy dog. ".repeat(4);
        std::fs::write(&tokens, text).unwrap();
        Self { dir, model, tokens }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn quantize_writes_a_reloadable_equivalent_model() {
    let f = Fixture::new();
    let out = f.path("q.nqf");
    let o = lowbit(&["quantize", "--model", s(&f.model), "--recipe", "rtn-asym-g32-int8", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("total"));

    let from_file = modelio::load(&out).unwrap();
    let in_memory = modelio::load(&f.model)
        .unwrap()
        .quantize("rtn-asym-g32-int8".parse::<QuantRecipe>().unwrap())
        .unwrap();
    let prompt = [5u32, 80, 200, 13];
    let a = forward_prefill(&from_file, &prompt, &mut new_cache(&from_file).unwrap()).unwrap();
    let b = forward_prefill(&in_memory, &prompt, &mut new_cache(&in_memory).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn usage_errors_exit_2() {
    let f = Fixture::new();
    let out = f.path("q.nqf");
    let o = lowbit(&["quantize", "--model", s(&f.model), "--recipe", "rtn-asym-g7-int8", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage") || String::from_utf8_lossy(&o.stderr).contains("--help"));
    assert_eq!(code(&lowbit(&["run", "--model", s(&f.model), "--prompt", "x", "--bogus"])), 2);
    assert_eq!(code(&lowbit(&["run", "--model", s(&f.path("missing.nqf")), "--prompt", "x"])), 2);
    assert_eq!(code(&lowbit(&["eval", "--model", s(&f.tokens), "--tokens", s(&f.tokens)])), 2);
}

#[test]
fn run_is_reproducible_and_prints_latency() {
    let f = Fixture::new();
    let args = ["run", "--model", s(&f.model), "--prompt", "hello", "--max-new", "12", "--sampling", "topk:5", "--seed", "9"];
    let strip = |o: &Output| -> String {
        stdout(o)
            .lines()
            .filter(|l| !l.starts_with("latency"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let a = lowbit(&args);
    let b = lowbit(&args);
    assert_eq!(code(&a), 0);
    assert_eq!(strip(&a), strip(&b));
    assert!(stdout(&a).contains("latency first_token_ms"));
    assert!(stdout(&a).contains("latency per_token_ms"));
    assert!(stdout(&a).contains("generated 12 tokens"));
}

#[test]
fn run_with_zero_new_tokens_echoes_prompt() {
    let f = Fixture::new();
    let o = lowbit(&["run", "--model", s(&f.model), "--prompt", "echo me", "--max-new", "0"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("echo me"));
    assert_eq!(lines.next(), Some("generated 0 tokens"));
}

#[test]
fn tune_exit_codes_and_trail() {
    let f = Fixture::new();
    let trail = f.path("trail.jsonl");
    let o = lowbit(&[
        "tune", "--model", s(&f.model), "--eval-tokens", s(&f.tokens), "--target", "1.0", "--metric", "perplexity",
        "--trail-out", s(&trail),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&trail).unwrap().lines().count(), 1);
    assert!(stdout(&o).contains("selected: rtn-asym-g32-int8"));

    let o = lowbit(&[
        "tune", "--model", s(&f.model), "--eval-tokens", s(&f.tokens), "--target", "0", "--metric", "perplexity",
        "--recipes", "rtn-asym-g32-int8,rtn-sym-g32-fp32", "--trail-out", s(&trail),
    ]);
    assert_eq!(code(&o), 3, "{}", stdout(&o));
    assert!(stdout(&o).contains("best effort: rtn-"));
    assert_eq!(std::fs::read_to_string(&trail).unwrap().lines().count(), 2);
}

#[test]
fn bench_csv_has_one_row_per_measured_token() {
    let f = Fixture::new();
    let csv = f.path("bench.csv");
    let o = lowbit(&[
        "bench", "--model", s(&f.model), "--in-tokens", "8", "--out-tokens", "6", "--warmup", "2", "--iters", "3",
        "--csv", s(&csv),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 3 * 6 + 1);
    assert_eq!(text.lines().next(), Some("iter,token_index,ms,phase"));
    assert!(text.lines().skip(1).all(|l| !l.starts_with('3') && !l.starts_with('4')));
    assert!(stdout(&o).contains("decode"));
}

#[test]
fn inspect_prints_config_and_footprint() {
    let f = Fixture::new();
    let o = lowbit(&["inspect", "--model", s(&f.model)]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("vocab_size = 256"));
    assert!(text.contains("lm_head"));
    assert!(text.contains("total"));
}

#[test]
fn every_command_prints_resolved_config() {
    let f = Fixture::new();
    let o = lowbit(&["--threads", "2", "inspect", "--model", s(&f.model)]);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("resolved: threads=2"));
}
