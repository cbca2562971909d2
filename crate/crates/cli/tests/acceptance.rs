//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line to stderr (visible without `--nocapture`).

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use lowbit::autotune::{self, default_recipe_order, eval_next_token_accuracy, EvalReport, Metric};
use lowbit::kernels::{gemm_ref, qlinear, qlinear_fp32, qlinear_int8, qlinear_int8_accumulators, KernelConfig};
use lowbit::kvcache::{KvCache, KvStore, NaiveKvCache};
use lowbit::modelio::{self, int4_bytes, NamedTensor, NqfFile, TensorData};
use lowbit::quant::{
    code_offset, dequantize_group, dequantize_tensor, quantize_activations, quantize_group, quantize_tensor,
    unpack_nibbles, ComputePath, QuantGranularity, QuantRecipe, QuantScheme, GROUP_SIZES,
};
use lowbit::runtime::{
    forward_decode, forward_prefill, ActivationKind, Model, ModelConfig, NormKind, QuantizeOptions,
};
use lowbit::train::{synthetic_corpus, train, TrainConfig, TrainReport};
use lowbit::{Error, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Per-thread allocation counter.

struct CountingAlloc;

thread_local! {
    static ALLOCS: Cell<usize> = const { Cell::new(0) };
    static ALLOC_BYTES: Cell<usize> = const { Cell::new(0) };
}

fn note_alloc(size: usize) {
    let _ = ALLOCS.try_with(|c| c.set(c.get() + 1));
    let _ = ALLOC_BYTES.try_with(|c| c.set(c.get() + size));
}

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        note_alloc(layout.size());
        System.alloc(layout)
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        note_alloc(layout.size());
        System.alloc_zeroed(layout)
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        note_alloc(new_size);
        System.realloc(ptr, layout, new_size)
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout)
    }
}

#[global_allocator]
static GLOBAL: CountingAlloc = CountingAlloc;

/// (allocation count, bytes requested) on this thread while running `f`.
fn count_allocs<T>(f: impl FnOnce() -> T) -> (T, usize, usize) {
    let (n0, b0) = (ALLOCS.with(Cell::get), ALLOC_BYTES.with(Cell::get));
    let out = f();
    let (n1, b1) = (ALLOCS.with(Cell::get), ALLOC_BYTES.with(Cell::get));
    (out, n1 - n0, b1 - b0)
}

// ---------------------------------------------------------------------------
// Shared helpers.

/// Criteria run one at a time so timings are not disturbed by each other.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "criterion {n}: {verdict}  {detail}");
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lim: f32) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-lim..lim))
}

fn recipe(scheme: QuantScheme, granularity: QuantGranularity, path: ComputePath) -> QuantRecipe {
    QuantRecipe::new(scheme, granularity, path).unwrap()
}

fn lowbit_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_lowbit"))
        .args(args)
        .output()
        .expect("lowbit binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

// ---------------------------------------------------------------------------
// 1. Group quantization error against the exhaustive nearest-code oracle.

fn random_group(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let mag = 10f32.powf(rng.gen_range(-4.0..4.0));
    match rng.gen_range(0..6) {
        0 => (0..n).map(|_| rng.gen_range(-mag..mag)).collect(),
        1 => {
            let lo = rng.gen_range(0.0..mag);
            (0..n).map(|_| lo + rng.gen_range(0.0..mag)).collect()
        }
        2 => {
            let hi = -rng.gen_range(0.0..mag);
            (0..n).map(|_| hi - rng.gen_range(0.0..mag)).collect()
        }
        3 => (0..n)
            .map(|_| (0..4).map(|_| rng.gen_range(-mag..mag)).sum::<f32>() / 2.0)
            .collect(),
        4 => {
            let mut v: Vec<f32> = (0..n).map(|_| rng.gen_range(-mag..mag) * 0.01).collect();
            let i = rng.gen_range(0..n);
            v[i] = if rng.gen() { mag } else { -mag };
            v
        }
        _ => (0..n)
            .map(|_| if rng.gen_bool(0.7) { 0.0 } else { rng.gen_range(-mag..mag) })
            .collect(),
    }
}

#[test]
fn criterion_1_group_quantization_round_trip() {
    let _g = serial();
    const GROUPS: usize = 10_000;
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_bound_excess = f64::NEG_INFINITY;
    let mut worst_oracle_gap = 0.0f64;
    let mut dequant_mismatches = 0usize;
    let mut checked = 0usize;
    for scheme in [QuantScheme::Asymmetric, QuantScheme::Symmetric] {
        for &g in &GROUP_SIZES {
            for _ in 0..GROUPS {
                let values = random_group(&mut rng, g);
                let q = quantize_group(&values, scheme).unwrap();
                let deq = dequantize_group(&q, scheme);
                let offset = i32::from(code_offset(scheme, q.zero_point));
                let s = f64::from(q.scale);
                let grid: Vec<f64> = (0..16).map(|c| s * f64::from(c - offset)).collect();
                for ((&v, &code), &d) in values.iter().zip(&q.codes).zip(&deq) {
                    let v = f64::from(v);
                    let exact = grid[code as usize];
                    let err = (exact - v).abs();
                    let oracle = grid.iter().map(|c| (c - v).abs()).fold(f64::INFINITY, f64::min);
                    worst_bound_excess = worst_bound_excess.max(err - (s / 2.0 + 1e-6));
                    worst_oracle_gap = worst_oracle_gap.max(err - oracle);
                    if d != exact as f32 {
                        dequant_mismatches += 1;
                    }
                }
                checked += 1;
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst_bound_excess <= 0.0 && worst_oracle_gap <= 1e-9 && dequant_mismatches == 0 && secs < 10.0;
    let detail = format!(
        "{checked} groups; max(err - (scale/2 + 1e-6)) = {worst_bound_excess:.3e}; \
         max gap to oracle = {worst_oracle_gap:.3e}; dequant mismatches = {dequant_mismatches}; {secs:.2} s"
    );
    report(1, pass, &detail);
    assert!(pass, "{detail}");
}

// ---------------------------------------------------------------------------
// 2. Fused FP32 kernel vs dequantize + reference GEMM; blocked/threaded
// variants vs the direct loops.

fn random_granularity(rng: &mut ChaCha8Rng) -> (QuantGranularity, usize) {
    if rng.gen_bool(0.15) {
        let cols = 2 * rng.gen_range(1..=256);
        (QuantGranularity::PerChannel, cols)
    } else {
        let g = [32, 64, 128, 256, 512][rng.gen_range(0..5)];
        let cols = g * rng.gen_range(1..=512 / g);
        (QuantGranularity::Grouped(g), cols)
    }
}

#[test]
fn criterion_2_kernel_oracle_equivalence() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f32;
    for _ in 0..200 {
        let batch = rng.gen_range(1..=8);
        let rows = rng.gen_range(1..=512);
        let (gran, cols) = random_granularity(&mut rng);
        let scheme = if rng.gen() { QuantScheme::Asymmetric } else { QuantScheme::Symmetric };
        let w = quantize_tensor(
            &random_matrix(&mut rng, rows, cols, 1.0),
            recipe(scheme, gran, ComputePath::Fp32Compute),
        )
        .unwrap();
        let x = random_matrix(&mut rng, batch, cols, 1.0);
        let fused = qlinear_fp32(&x, &w, None).unwrap();
        let reference = gemm_ref(&x, &dequantize_tensor(&w).unwrap().transpose()).unwrap();
        worst = worst.max(fused.max_abs_diff(&reference).unwrap_or(f32::INFINITY));
    }

    let mut configs = 0;
    let mut mismatches = 0;
    for _ in 0..20 {
        let batch = rng.gen_range(1..=8);
        let rows = rng.gen_range(1..=300);
        let (gran, cols) = random_granularity(&mut rng);
        let group = gran.effective_group_size(cols);
        let scheme = if rng.gen() { QuantScheme::Asymmetric } else { QuantScheme::Symmetric };
        let wm = random_matrix(&mut rng, rows, cols, 1.0);
        let x = random_matrix(&mut rng, batch, cols, 1.0);
        let reduction_block = if rng.gen_bool(0.3) { cols + rng.gen_range(0..64) } else { group * rng.gen_range(1..=cols / group) };
        let base = KernelConfig {
            tile_rows: rng.gen_range(1..=8),
            tile_cols: rng.gen_range(1..=96),
            reduction_block,
            threads: 1,
        };
        for path in [ComputePath::Fp32Compute, ComputePath::Int8Compute] {
            let w = quantize_tensor(&wm, recipe(scheme, gran, path)).unwrap();
            let direct = match path {
                ComputePath::Fp32Compute => qlinear_fp32(&x, &w, None).unwrap(),
                ComputePath::Int8Compute => qlinear_int8(&x, &w, None).unwrap(),
            };
            for threads in [1, 2, 4] {
                let cfg = KernelConfig { threads, ..base };
                let blocked = qlinear(&x, &w, None, &cfg).unwrap();
                configs += 1;
                let same = blocked
                    .as_slice()
                    .iter()
                    .zip(direct.as_slice())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                if !same {
                    mismatches += 1;
                }
            }
        }
    }
    let pass = worst <= 1e-5 && mismatches == 0;
    let detail = format!(
        "200 problems: max |fused - dequant+gemm| = {worst:.3e}; \
         {configs} blocked/threaded runs, {mismatches} not bit-identical"
    );
    report(2, pass, &detail);
    assert!(pass, "{detail}");
}

// ---------------------------------------------------------------------------
// 3. INT8 compute path vs FP32 compute path; integer accumulations vs an i64
// brute-force oracle.

fn rel_l2(a: &Matrix, b: &Matrix) -> f64 {
    let num: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| f64::from(x - y).powi(2)).sum();
    let den: f64 = b.as_slice().iter().map(|y| f64::from(*y).powi(2)).sum();
    (num / den).sqrt()
}

#[test]
fn criterion_3_compute_path_agreement() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_l2 = 0.0f64;
    let mut int_mismatches = 0usize;
    let mut act_code_mismatches = 0usize;
    let mut output_mismatches = 0usize;
    let mut cases = 0;
    let grans: Vec<QuantGranularity> = GROUP_SIZES
        .iter()
        .map(|&g| QuantGranularity::Grouped(g))
        .chain([QuantGranularity::PerChannel])
        .collect();
    for &gran in &grans {
        for scheme in [QuantScheme::Asymmetric, QuantScheme::Symmetric] {
            for _ in 0..4 {
                let group = match gran {
                    QuantGranularity::Grouped(g) => g,
                    QuantGranularity::PerChannel => 64,
                };
                let cols = group * rng.gen_range(1..=(2048 / group).clamp(1, 4));
                let rows = rng.gen_range(1..=96);
                let batch = rng.gen_range(1..=4);
                let wm = random_matrix(&mut rng, rows, cols, 1.0);
                let x = random_matrix(&mut rng, batch, cols, 1.0);
                let w8 = quantize_tensor(&wm, recipe(scheme, gran, ComputePath::Int8Compute)).unwrap();
                let y8 = qlinear_int8(&x, &w8, None).unwrap();
                let y32 = qlinear_fp32(&x, &w8, None).unwrap();
                worst_l2 = worst_l2.max(rel_l2(&y8, &y32));

                let g = w8.group_size();
                let groups = w8.groups_per_row();
                let xq = quantize_activations(&x, g).unwrap();
                // activation codes: round(x / (absmax / 127)), recomputed
                for b in 0..batch {
                    for gi in 0..groups {
                        let vals = &x.row(b)[gi * g..(gi + 1) * g];
                        let absmax = vals.iter().fold(0.0f64, |m, v| m.max(f64::from(*v).abs()));
                        let scale = f64::from(((absmax / 127.0) as f32).max(f32::MIN_POSITIVE));
                        for (k, &v) in vals.iter().enumerate() {
                            let want = (f64::from(v) / scale).round().clamp(-127.0, 127.0) as i8;
                            if xq.group_codes(b, gi)[k] != want {
                                act_code_mismatches += 1;
                            }
                        }
                    }
                }
                let accs = qlinear_int8_accumulators(&x, &w8).unwrap();
                let mut rebuilt = Matrix::zeros(batch, rows);
                for b in 0..batch {
                    for o in 0..rows {
                        let mut acc = 0.0f32;
                        for gi in 0..groups {
                            let (w_scale, offset) = w8.group_params(o, gi);
                            let codes = unpack_nibbles(w8.group_bytes(o, gi));
                            let act = xq.group_codes(b, gi);
                            let wide: i64 = act
                                .iter()
                                .zip(&codes)
                                .map(|(&a, &c)| i64::from(a) * (i64::from(c) - i64::from(offset)))
                                .sum();
                            let got = accs[(b * rows + o) * groups + gi];
                            if i64::from(got) != wide {
                                int_mismatches += 1;
                            }
                            acc += wide as f32 * (xq.scales[xq.group_index(b, gi)] * w_scale);
                        }
                        rebuilt.as_mut_slice()[b * rows + o] = acc;
                    }
                }
                if rebuilt.as_slice().iter().zip(y8.as_slice()).any(|(a, b)| a.to_bits() != b.to_bits()) {
                    output_mismatches += 1;
                }
                cases += 1;
            }
        }
    }
    let pass = worst_l2 <= 2e-2 && int_mismatches == 0 && act_code_mismatches == 0 && output_mismatches == 0;
    let detail = format!(
        "{cases} problems over all group sizes: max relative L2 = {worst_l2:.3e}; \
         integer mismatches = {int_mismatches}; activation-code mismatches = {act_code_mismatches}; \
         rescaled-output mismatches = {output_mismatches}"
    );
    report(3, pass, &detail);
    assert!(pass, "{detail}");
}

// ---------------------------------------------------------------------------
// 4. Incremental decode vs full prefill; pre-allocated vs reallocating cache;
// allocation-free appends.

fn random_toy(rng: &mut ChaCha8Rng) -> Model {
    let heads = rng.gen_range(1..=4);
    let head_dim = [2, 4, 8, 16][rng.gen_range(0..4)];
    let vocab = rng.gen_range(16..=128);
    let ffn = 2 * rng.gen_range(4..=48);
    let max_seq = rng.gen_range(4..=40);
    let mut cfg = ModelConfig::new(vocab, 2, heads, head_dim, ffn, max_seq);
    cfg.norm_kind = if rng.gen() { NormKind::RmsNorm } else { NormKind::LayerNorm };
    cfg.activation_kind = if rng.gen() { ActivationKind::SiluGated } else { ActivationKind::Gelu };
    let m = Model::random(cfg, rng.gen()).unwrap();
    if rng.gen() {
        let r = recipe(
            if rng.gen() { QuantScheme::Asymmetric } else { QuantScheme::Symmetric },
            QuantGranularity::PerChannel,
            if rng.gen() { ComputePath::Int8Compute } else { ComputePath::Fp32Compute },
        );
        m.quantize(r).unwrap()
    } else {
        m
    }
}

#[test]
fn criterion_4_kv_cache_theorem() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f32;
    let mut naive_mismatch = 0usize;
    for _ in 0..50 {
        let m = random_toy(&mut rng);
        let c = m.config;
        let n = rng.gen_range(1..=c.max_seq_len);
        let tokens: Vec<u32> = (0..n).map(|_| rng.gen_range(0..c.vocab_size as u32)).collect();

        let mut full = KvCache::new(c.n_layers, c.n_heads, c.head_dim, c.max_seq_len).unwrap();
        let batch = forward_prefill(&m, &tokens, &mut full).unwrap();

        let mut fast = KvCache::new(c.n_layers, c.n_heads, c.head_dim, c.max_seq_len).unwrap();
        let mut naive = NaiveKvCache::new(c.n_layers, c.n_heads, c.head_dim, c.max_seq_len).unwrap();
        let mut a = forward_prefill(&m, &tokens[..1], &mut fast).unwrap();
        let mut b = forward_prefill(&m, &tokens[..1], &mut naive).unwrap();
        for &t in &tokens[1..] {
            if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                naive_mismatch += 1;
            }
            a = forward_decode(&m, t, &mut fast).unwrap();
            b = forward_decode(&m, t, &mut naive).unwrap();
        }
        if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
            naive_mismatch += 1;
        }
        let diff = a.iter().zip(&batch).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        worst = worst.max(diff);
    }

    let (layers, heads, head_dim, cap) = (3, 4, 16, 64);
    let (cache, new_allocs, new_bytes) = count_allocs(|| KvCache::new(layers, heads, head_dim, cap).unwrap());
    let mut cache = cache;
    let formula = layers * 2 * cap * heads * head_dim * 4;
    let bookkeeping = layers * std::mem::size_of::<usize>();
    let k = vec![0.5f32; heads * head_dim];
    let v = vec![-0.5f32; heads * head_dim];
    let ((), append_allocs, _) = count_allocs(|| {
        for _ in 0..cap {
            for l in 0..layers {
                cache.append(l, &k, &v).unwrap();
            }
        }
    });
    let mut naive = NaiveKvCache::new(layers, heads, head_dim, cap).unwrap();
    let ((), naive_allocs, _) = count_allocs(|| {
        for _ in 0..8 {
            for l in 0..layers {
                naive.append(l, &k, &v).unwrap();
            }
        }
    });
    let overflow = matches!(cache.append(0, &k, &v), Err(Error::CapacityExceeded { .. }));

    let pass = worst <= 1e-5
        && naive_mismatch == 0
        && append_allocs == 0
        && naive_allocs > 0
        && cache.storage_bytes() == formula
        && new_bytes == formula + bookkeeping
        && new_allocs == 2
        && overflow;
    let detail = format!(
        "50 models: max |decode - prefill| = {worst:.3e}; naive-cache bit mismatches = {naive_mismatch}; \
         {} appends made {append_allocs} allocations (naive: {naive_allocs} for 24); \
         new() requested {new_bytes} B = {formula} B storage + {bookkeeping} B lengths",
        layers * cap
    );
    report(4, pass, &detail);
    assert!(pass, "{detail}");
}

// ---------------------------------------------------------------------------
// 5. Serialized footprint of a 4096 x 4096 tensor.

/// Payload size of the single tensor in `bytes`, read from the file layout:
/// its blob runs from the table's offset field to the CRC trailer.
fn measured_blob_bytes(bytes: &[u8]) -> (u64, u64) {
    let mut at = 44;
    let name_len = u16::from_le_bytes([bytes[at], bytes[at + 1]]) as usize;
    at += 2 + name_len + 1;
    let recipe_len = bytes[at] as usize;
    at += 1 + recipe_len;
    let ndims = bytes[at] as usize;
    at += 1 + 4 * ndims;
    let offset = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
    let size = u64::from_le_bytes(bytes[at + 8..at + 16].try_into().unwrap());
    ((bytes.len() - 4) as u64 - offset, size)
}

#[test]
fn criterion_5_memory_arithmetic() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 4096;
    let w = random_matrix(&mut rng, n, n, 1.0);
    let file = |data: TensorData| NqfFile {
        config: ModelConfig::new(8, 1, 1, 2, 2, 2),
        tensors: vec![NamedTensor { name: "w".into(), data }],
    };
    let fp32 = file(TensorData::F32 { dims: vec![n, n], data: w.as_slice().to_vec() }).to_bytes().unwrap();
    let (fp32_measured, fp32_declared) = measured_blob_bytes(&fp32);
    drop(fp32);

    let mut measured = Vec::new();
    let mut all_exact = fp32_measured == 4 * (n * n) as u64 && fp32_declared == fp32_measured;
    for g in [128usize, 32] {
        let r = recipe(QuantScheme::Asymmetric, QuantGranularity::Grouped(g), ComputePath::Int8Compute);
        let bytes = file(TensorData::Int4(quantize_tensor(&w, r).unwrap())).to_bytes().unwrap();
        let (m, declared) = measured_blob_bytes(&bytes);
        let groups = (n / g) as u64;
        let by_hand = (n * n / 2) as u64 + n as u64 * groups * 4 + n as u64 * groups;
        all_exact &= m == declared && m == by_hand && m == int4_bytes(n as u64, n as u64, g as u64, QuantScheme::Asymmetric);
        measured.push(m);
    }
    let (g128, g32) = (measured[0], measured[1]);
    let r128 = fp32_measured as f64 / g128 as f64;
    let r32 = fp32_measured as f64 / g32 as f64;
    let pass = all_exact && g128 == 9_043_968 && r128 >= 7.0 && r32 >= 6.0 && g128 < g32;
    let detail = format!(
        "fp32 {fp32_measured} B; asym g128 {g128} B (ratio {r128:.2}); asym g32 {g32} B (ratio {r32:.2}); \
         measured == formula: {all_exact}"
    );
    report(5, pass, &detail);
    assert!(pass, "{detail}");
}

// ---------------------------------------------------------------------------
// 6 and 7. Desk-trained model, accuracy loss and the tuning flow.

struct Trained {
    model: Model,
    heldout: Vec<u32>,
    report: TrainReport,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let corpus = synthetic_corpus(1, 70_000);
        let (train_part, heldout) = corpus.split_at(corpus.len() - 4096);
        let cfg = ModelConfig::new(256, 2, 4, 32, 256, 64);
        let tc = TrainConfig {
            steps: 400,
            batch_size: 8,
            seq_len: 64,
            learning_rate: 3e-3,
            warmup_steps: 20,
            seed: 0,
            ..TrainConfig::default()
        };
        let (model, report) = train(cfg, train_part, &tc).unwrap();
        Trained {
            model,
            heldout: heldout.to_vec(),
            report,
        }
    })
}

fn write_fixture(dir: &Path, t: &Trained) -> (std::path::PathBuf, std::path::PathBuf) {
    let model = dir.join("trained.nqf");
    let held = dir.join("heldout.bin");
    modelio::save(&t.model, &model).unwrap();
    std::fs::write(&held, t.heldout.iter().map(|&x| x as u8).collect::<Vec<u8>>()).unwrap();
    (model, held)
}

fn mean(v: &[f32]) -> f32 {
    v.iter().sum::<f32>() / v.len() as f32
}

#[test]
fn criterion_6_accuracy_within_one_percent() {
    let _g = serial();
    let t = trained();
    let losses = &t.report.losses;
    let last = mean(&losses[losses.len() - 50..]);
    let before = mean(&losses[losses.len() - 100..losses.len() - 50]);
    let converged = last < 0.6 && (before - last) / before < 0.1;

    let base = eval_next_token_accuracy(&t.model, &t.heldout).unwrap();
    let q = t.model.quantize(QuantizeOptions::from(QuantRecipe::default())).unwrap();
    let quant = eval_next_token_accuracy(&q, &t.heldout).unwrap();
    let loss = (base - quant) / base;

    let dir = tempfile::tempdir().unwrap();
    let (model, held) = write_fixture(dir.path(), t);
    let trail = dir.path().join("trail.jsonl");
    let out = lowbit_cli(&[
        "tune",
        "--model",
        path_str(&model),
        "--eval-tokens",
        path_str(&held),
        "--target",
        "0.01",
        "--trail-out",
        path_str(&trail),
    ]);
    let code = out.status.code();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let records: Vec<EvalReport> = std::fs::read_to_string(&trail)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let last_passed = records.last().is_some_and(|r| r.passed);
    let earlier_failed = records[..records.len() - 1].iter().all(|r| !r.passed);
    let selected = records.last().map(|r| r.recipe.to_string()).unwrap_or_default();
    let contract = match code {
        Some(0) => last_passed && earlier_failed && stdout.contains(&format!("selected: {selected}")),
        Some(3) => records.len() == default_recipe_order().len() && records.iter().all(|r| !r.passed),
        _ => false,
    };

    let pass = converged && loss <= 0.01 && contract && code == Some(0);
    let detail = format!(
        "train loss {:.3} -> {last:.3} (prev 50 steps {before:.3}); held-out accuracy fp32 {base:.4}, \
         int4 rtn-asym-g32-int8 {quant:.4}, relative loss {:.3}%; tune exit {:?} after {} candidate(s), selected {selected}",
        losses[0],
        loss * 100.0,
        code,
        records.len()
    );
    report(6, pass, &detail);
    assert!(pass, "{detail}\n{stdout}");
}

fn strip_timing(trail: &str) -> String {
    trail
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_ms");
            serde_json::to_string(&v).unwrap()
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn criterion_7_tuning_determinism() {
    let _g = serial();
    let t = trained();
    let metric = Metric::Perplexity;
    let base = autotune::evaluate(&t.model, &t.heldout, metric).unwrap();
    let mut scored: Vec<(f64, QuantRecipe)> = default_recipe_order()
        .into_iter()
        .take(5)
        .map(|r| {
            let q = t.model.quantize(QuantizeOptions::from(r)).unwrap();
            let ppl = autotune::evaluate(&q, &t.heldout, metric).unwrap();
            (autotune::relative_loss(metric, base, ppl), r)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (best, worst) = (scored[0], scored[scored.len() - 1]);
    // worst first (must fail), best second (must pass), the rest never run
    let order: Vec<QuantRecipe> = [worst.1, best.1]
        .into_iter()
        .chain(scored[1..scored.len() - 1].iter().map(|s| s.1))
        .collect();
    let target = (best.0 + worst.0) / 2.0;
    let recipes = order.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(",");

    let dir = tempfile::tempdir().unwrap();
    let (model, held) = write_fixture(dir.path(), t);
    let target_s = format!("{target}");
    let mut trails = Vec::new();
    let mut codes = Vec::new();
    for i in 0..2 {
        let trail = dir.path().join(format!("trail{i}.jsonl"));
        let out = lowbit_cli(&[
            "tune",
            "--model",
            path_str(&model),
            "--eval-tokens",
            path_str(&held),
            "--metric",
            "perplexity",
            "--target",
            &target_s,
            "--recipes",
            &recipes,
            "--trail-out",
            path_str(&trail),
        ]);
        codes.push(out.status.code());
        trails.push(std::fs::read_to_string(&trail).unwrap());
    }
    let identical = strip_timing(&trails[0]) == strip_timing(&trails[1]);
    let records: Vec<EvalReport> = trails[0].lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let stopped_early = records.len() == 2 && !records[0].passed && records[1].passed;

    // the selected report, recomputed from scratch
    let sel = &records[records.len() - 1];
    let again = autotune::evaluate(&t.model.quantize(QuantizeOptions::from(sel.recipe)).unwrap(), &t.heldout, metric).unwrap();
    let recomputed = again.to_bits() == sel.candidate_metric.to_bits()
        && base.to_bits() == sel.baseline_metric.to_bits()
        && autotune::relative_loss(metric, base, again).to_bits() == sel.relative_loss.to_bits()
        && sel.passed == (sel.relative_loss <= target);

    let pass = identical && stopped_early && recomputed && codes == [Some(0), Some(0)];
    let detail = format!(
        "two runs byte-identical without timing: {identical}; trail length {} of {} candidates \
         (first-pass-wins: {stopped_early}); selected {} re-evaluates exactly: {recomputed}",
        records.len(),
        order.len(),
        sel.recipe
    );
    report(7, pass, &detail);
    assert!(pass, "{detail}");
}

// ---------------------------------------------------------------------------
// 8. Loader robustness under truncation and corruption.

#[test]
fn criterion_8_format_robustness() {
    let _g = serial();
    let base = Model::random(ModelConfig::new(64, 2, 2, 16, 64, 32), 8).unwrap();
    let model = base
        .quantize(QuantizeOptions {
            recipe: QuantRecipe::default(),
            quantize_lm_head: false,
        })
        .unwrap();
    let bytes = modelio::to_bytes(&model).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut counts = std::collections::BTreeMap::<&str, usize>::new();
    let mut silent = 0;
    let mut crashes = 0;
    for i in 0..10_000 {
        let mut b = bytes.clone();
        match i % 4 {
            0 => b.truncate(rng.gen_range(0..bytes.len())),
            1 => {
                let at = rng.gen_range(0..b.len());
                b[at] ^= 1 << rng.gen_range(0..8);
            }
            2 => {
                // header and table region
                let at = rng.gen_range(0..b.len().min(2048));
                b[at] ^= 1 << rng.gen_range(0..8);
            }
            _ => {
                for _ in 0..rng.gen_range(1..=8) {
                    let at = rng.gen_range(0..b.len());
                    b[at] = b[at].wrapping_add(rng.gen_range(1..=255));
                }
                if rng.gen() {
                    b.truncate(rng.gen_range(0..b.len()));
                }
            }
        }
        match std::panic::catch_unwind(|| modelio::from_bytes(&b)) {
            Err(_) => crashes += 1,
            Ok(Ok(_)) => silent += 1,
            Ok(Err(e)) => {
                let kind = match e {
                    Error::BadMagic => "bad magic",
                    Error::TruncatedFile { .. } => "truncated",
                    Error::ChecksumMismatch { .. } => "checksum",
                    Error::Format(_) => "format",
                    _ => "other",
                };
                *counts.entry(kind).or_default() += 1;
            }
        }
    }
    let untyped = counts.get("other").copied().unwrap_or(0);
    let pass = silent == 0 && crashes == 0 && untyped == 0 && modelio::from_bytes(&bytes).is_ok();
    let detail = format!("10000 mutations: {counts:?}; crashes {crashes}; silently loaded {silent}");
    report(8, pass, &detail);
    assert!(pass, "{detail}");
}

// ---------------------------------------------------------------------------
// 9. Per-token latency, INT4 vs FP32.

fn decode_mean_ms(csv: &str, out_tokens: usize, iters: usize) -> Option<f64> {
    let mut lines = csv.lines();
    if lines.next()? != "iter,token_index,ms,phase" {
        return None;
    }
    let rows: Vec<(usize, usize, f64, String)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap(), f[3].to_string())
        })
        .collect();
    if rows.len() != out_tokens * iters {
        return None;
    }
    let decode: Vec<f64> = rows.iter().filter(|r| r.3 == "decode").map(|r| r.2).collect();
    if decode.len() != (out_tokens - 1) * iters || rows.iter().filter(|r| r.3 == "first").count() != iters {
        return None;
    }
    Some(decode.iter().sum::<f64>() / decode.len() as f64)
}

#[test]
fn criterion_9_latency_reporting() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let fp32 = Model::random(ModelConfig::new(256, 4, 16, 32, 1536, 64), 9).unwrap();
    let variants = [
        ("fp32", fp32.clone()),
        ("int4-g32", fp32.quantize(QuantRecipe::default()).unwrap()),
        (
            "int4-g128",
            fp32.quantize(recipe(QuantScheme::Asymmetric, QuantGranularity::Grouped(128), ComputePath::Int8Compute))
                .unwrap(),
        ),
    ];
    drop(fp32);
    let (iters, out_tokens, rounds) = (5, 32, 3);
    let mut paths = Vec::new();
    for (name, m) in &variants {
        let path = dir.path().join(format!("{name}.nqf"));
        modelio::save(m, &path).unwrap();
        paths.push(path);
    }
    drop(variants);
    // rounds alternate between the models so drift in machine load hits all of them
    let mut round_means: Vec<Vec<f64>> = vec![Vec::new(); paths.len()];
    let mut malformed = 0;
    for round in 0..rounds {
        for (k, path) in paths.iter().enumerate() {
            let csv = dir.path().join(format!("{k}-{round}.csv"));
            let out = lowbit_cli(&[
                "--threads",
                "1",
                "bench",
                "--model",
                path_str(path),
                "--in-tokens",
                "32",
                "--out-tokens",
                "32",
                "--warmup",
                "1",
                "--iters",
                &iters.to_string(),
                "--csv",
                path_str(&csv),
            ]);
            assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
            match decode_mean_ms(&std::fs::read_to_string(&csv).unwrap(), out_tokens, iters) {
                Some(m) => round_means[k].push(m),
                None => malformed += 1,
            }
        }
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let pass = malformed == 0 && {
        let (f, g32, g128) = (median(&mut round_means[0]), median(&mut round_means[1]), median(&mut round_means[2]));
        g32 < f && g128 <= g32
    };
    let show = |v: &[f64]| v.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>().join("/");
    let detail = format!(
        "32-in/32-out, {iters} iters x {rounds} rounds, 1 thread, mean decode ms per round: \
         fp32 {}, int4 g32 {}, int4 g128 {}; malformed CSVs {malformed}",
        show(&round_means[0]),
        show(&round_means[1]),
        show(&round_means[2])
    );
    report(9, pass, &detail);
    assert!(pass, "{detail}");
}
