//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line to stderr
//! (written straight to the handle so it shows up without `--nocapture`).

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use selectkit::diagnostics::{gain_sweep, recommend_gamma_range, SweepOptions, Threshold, DIAGONAL_FLOOR};
use selectkit::facility_location::{fl_greedy_lazy, greedy_lazy, greedy_naive, greedy_stochastic};
use selectkit::io::{self, Dtype, EmbeddingFile, ReadOptions, RunMetadata, SelectionParams};
use selectkit::kcenter::kcenter_greedy;
use selectkit::oracle;
use selectkit::synthetic::{clustered_pool, gaussian_pool, random_token_stats};
use selectkit::uncertainty::{score_all, select_topk_uncertain, ScoreOptions, UncertaintyKind};
use selectkit::{
    Budget, EmbeddingMatrix, Error, KernelOptions, KernelSpec, Mixture, SeedMode, SelectionResult, SimilarityEngine,
};

/// Keeps the timed criteria from sharing the machine with the scale run.
static MACHINE: Mutex<()> = Mutex::new(());

fn report(name: &str, outcome: &Result<String, String>) {
    let line = match outcome {
        Ok(detail) => format!("PASS  {name}: {detail}\n"),
        Err(why) => format!("FAIL  {name}: {why}\n"),
    };
    let mut err = std::io::stderr().lock();
    let _ = err.write_all(line.as_bytes());
    let _ = err.flush();
}

fn within(limit: Duration, elapsed: Duration) -> Result<(), String> {
    if elapsed < limit {
        Ok(())
    } else {
        Err(format!("took {elapsed:.2?}, limit {limit:?}"))
    }
}

/// Gaussian rows standardized to zero mean and unit variance per column.
fn unit_variance_pool(n: usize, d: usize, rng: &mut ChaCha8Rng) -> EmbeddingMatrix {
    let mut data: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    for c in 0..d {
        let mean = (0..n).map(|i| data[i * d + c]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (data[i * d + c] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for i in 0..n {
            data[i * d + c] = (data[i * d + c] - mean) / sd;
        }
    }
    EmbeddingMatrix::new(n, d, data).unwrap()
}

fn rows(emb: &EmbeddingMatrix) -> Vec<&[f64]> {
    (0..emb.n()).map(|i| emb.row(i)).collect()
}

const GAMMAS: [f64; 3] = [0.01, 0.1, 1.0];

fn instance_kernel(t: usize) -> KernelSpec {
    match t % 4 {
        3 => KernelSpec::ClippedCosine,
        g => KernelSpec::Rbf { gamma: GAMMAS[g] },
    }
}

/// Per-run checks shared by every facility-location run in the suite.
#[derive(Default)]
struct TraceAudit {
    runs: usize,
    monotone_checked: usize,
    failures: Vec<String>,
}

impl TraceAudit {
    fn check(&mut self, label: &str, r: &SelectionResult, monotone: bool) {
        self.runs += 1;
        if monotone {
            self.monotone_checked += 1;
            if let Some(t) = r.gains.windows(2).position(|w| w[1] > w[0] + 1e-9) {
                self.failures.push(format!(
                    "{label}: gain rose at step {}: {} -> {}",
                    t + 2,
                    r.gains[t],
                    r.gains[t + 1]
                ));
            }
        }
        let total: f64 = r.gains.iter().sum();
        let objective = *r.objective_trace.last().unwrap();
        if (total - objective).abs() > 1e-6 * objective.abs().max(f64::MIN_POSITIVE) {
            self.failures.push(format!("{label}: sum of gains {total} vs objective {objective}"));
        }
    }
}

fn topk_oracle() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut compared = 0;
    for t in 0..200 {
        let n = rng.random_range(1..=oracle::MAX_TOPK_POOL);
        let k = rng.random_range(1..=n);
        let stats = random_token_stats(n, 12, 50, 1000 + t);
        for kind in UncertaintyKind::ALL {
            let sel = select_topk_uncertain(&stats, kind, Budget::new(k, n).unwrap()).map_err(|e| e.to_string())?;
            let scores = score_all(&stats, kind, ScoreOptions::default()).map_err(|e| e.to_string())?;
            let (opt_set, opt) = oracle::exhaustive_topk(&scores, k).map_err(|e| e.to_string())?;
            let mut got = sel.indices.clone();
            got.sort_unstable();
            if got != opt_set {
                return Err(format!("instance {t} {kind} n={n} k={k}: top-k {got:?} vs oracle {opt_set:?} (min {opt})"));
            }
            compared += 1;
        }
    }
    within(Duration::from_secs(10), start.elapsed())?;
    Ok(format!("{compared} instance/measure pairs identical in {:.2?}", start.elapsed()))
}

fn fl_approximation(audit: &mut TraceAudit, mixture: bool) -> Result<String, String> {
    let start = Instant::now();
    let ratio = 1.0 - (-1.0f64).exp();
    let mut rng = ChaCha8Rng::seed_from_u64(if mixture { 303 } else { 202 });
    let mut worst = f64::INFINITY;
    for t in 0..200 {
        let n = rng.random_range(2..=12);
        let k = rng.random_range(1..=n.min(oracle::MAX_SUBSET_K - 1));
        let d = rng.random_range(2..=6);
        let emb = unit_variance_pool(n, d, &mut rng);
        let spec = instance_kernel(t);
        let kernel = oracle::naive_kernel_matrix(&rows(&emb), spec);
        let budget = Budget::new(k, n).unwrap();
        let engine = SimilarityEngine::new(&emb, spec).map_err(|e| e.to_string())?;
        let label = format!("instance {t} n={n} k={k} {spec}");
        let (greedy_value, opt) = if mixture {
            let stats = random_token_stats(n, 8, 30, 5000 + t as u64);
            let margins = score_all(&stats, UncertaintyKind::MinMargin, ScoreOptions::default()).unwrap();
            let weight = [0.1, 1.0, 10.0][t % 3];
            let m = Mixture::from_min_margin(&margins, weight).map_err(|e| e.to_string())?;
            let r = greedy_naive(&engine, budget, Some(&m)).map_err(|e| e.to_string())?;
            audit.check(&label, &r, true);
            let (_, opt) = oracle::exhaustive_mixture_opt(&kernel, m.shifted(), weight, k).map_err(|e| e.to_string())?;
            (oracle::mixture_value(&kernel, m.shifted(), weight, &r.indices), opt)
        } else {
            let r = greedy_naive(&engine, budget, None).map_err(|e| e.to_string())?;
            audit.check(&label, &r, true);
            let (_, opt) = oracle::exhaustive_fl_opt(&kernel, k).map_err(|e| e.to_string())?;
            (oracle::fl_value(&kernel, &r.indices), opt)
        };
        if greedy_value < ratio * opt {
            return Err(format!("{label}: greedy {greedy_value} < (1-1/e) * {opt}"));
        }
        worst = worst.min(greedy_value / opt);
    }
    within(Duration::from_secs(60), start.elapsed())?;
    Ok(format!("200 instances, 0 violations, worst greedy/OPT = {worst:.4} (bound {ratio:.4}), {:.2?}", start.elapsed()))
}

fn kcenter_two_approx() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    for t in 0..200 {
        let n = rng.random_range(2..=12);
        let k = rng.random_range(1..=n.min(4));
        let d = rng.random_range(1..=5);
        let emb = unit_variance_pool(n, d, &mut rng);
        let seed_mode = match t % 3 {
            0 => SeedMode::Medoid,
            1 => SeedMode::Index { index: t % n },
            _ => SeedMode::Random { seed: t as u64 },
        };
        let r = kcenter_greedy(&emb, Budget::new(k, n).unwrap(), seed_mode).map_err(|e| e.to_string())?;
        let pts = rows(&emb);
        let radius = oracle::covering_radius(&pts, &r.indices);
        let (_, opt) = oracle::exhaustive_kcenter_opt(&pts, k).map_err(|e| e.to_string())?;
        // rounding slack only; the bound itself is not relaxed
        if radius > 2.0 * opt * (1.0 + 1e-12) + 1e-12 {
            return Err(format!("instance {t} n={n} k={k}: radius {radius} > 2 * {opt}"));
        }
        if opt > 0.0 {
            worst = worst.max(radius / opt);
        }
    }
    Ok(format!("200 instances, 0 violations, worst radius/OPT = {worst:.4}"))
}

fn lazy_equals_naive(audit: &mut TraceAudit) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let gammas = [1e-3, 1e-2, 1e-1, 1.0];
    for t in 0..100 {
        let n = rng.random_range(10..=200);
        let k = rng.random_range(1..=n.min(50));
        let d = rng.random_range(2..=16);
        let emb = match t % 3 {
            0 => unit_variance_pool(n, d, &mut rng),
            1 => clustered_pool(n, d, rng.random_range(2..=6), 0.3, 2.0, t as u64),
            _ => {
                // exact duplicates make ties common
                let base = unit_variance_pool(n.div_ceil(3), d, &mut rng);
                let order: Vec<usize> = (0..n).map(|i| i % base.n()).collect();
                base.select_rows(&order).unwrap()
            }
        };
        let spec = if t % 5 == 4 { KernelSpec::ClippedCosine } else { KernelSpec::Rbf { gamma: gammas[t % 4] } };
        let budget = Budget::new(k, n).unwrap();
        let dense = SimilarityEngine::new(&emb, spec).map_err(|e| e.to_string())?;
        let streaming_opts = KernelOptions { block_size: 1 + t % 9, dense_threshold: 0, column_cache: t % 3 };
        let streaming = SimilarityEngine::with_options(&emb, spec, streaming_opts).map_err(|e| e.to_string())?;
        let naive = greedy_naive(&dense, budget, None).map_err(|e| e.to_string())?;
        let lazy = greedy_lazy(&dense, budget, None).map_err(|e| e.to_string())?;
        let lazy_streaming = greedy_lazy(&streaming, budget, None).map_err(|e| e.to_string())?;
        let label = format!("instance {t} n={n} k={k} {spec}");
        audit.check(&format!("{label} naive"), &naive, true);
        audit.check(&format!("{label} lazy"), &lazy, true);
        audit.check(&format!("{label} lazy/streaming"), &lazy_streaming, true);
        for (name, other) in [("lazy", &lazy), ("lazy/streaming", &lazy_streaming)] {
            if other.indices != naive.indices {
                return Err(format!("{label}: {name} {:?} vs naive {:?}", other.indices, naive.indices));
            }
        }
    }
    Ok("100 instances, 0 mismatches (dense and streaming kernels)".into())
}

fn stochastic_quality(audit: &mut TraceAudit) -> Result<String, String> {
    let (n, k, eps) = (64, 8, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let emb = unit_variance_pool(n, 6, &mut rng);
    let budget = Budget::new(k, n).unwrap();
    let mut parts = Vec::new();
    for spec in [KernelSpec::Rbf { gamma: 4.0 }, KernelSpec::ClippedCosine] {
        let engine = SimilarityEngine::new(&emb, spec).map_err(|e| e.to_string())?;
        let naive = greedy_naive(&engine, budget, None).map_err(|e| e.to_string())?;
        audit.check(&format!("stochastic reference {spec}"), &naive, true);
        let reference = *naive.objective_trace.last().unwrap();
        let mut total = 0.0;
        for seed in 0..50 {
            let r = greedy_stochastic(&engine, budget, eps, seed, None).map_err(|e| e.to_string())?;
            // sampled steps need not have non-increasing gains
            audit.check(&format!("stochastic {spec} seed {seed}"), &r, false);
            total += r.objective_trace.last().unwrap();
        }
        let mean = total / 50.0;
        if mean < 0.9 * reference {
            return Err(format!("{spec}: mean {mean} < 0.9 * naive {reference}"));
        }
        parts.push(format!("{spec}: mean/naive = {:.4}", mean / reference));
    }
    Ok(parts.join(", "))
}

/// Three unit-scale clusters in 8 dimensions.
fn gains_fixture() -> EmbeddingMatrix {
    clustered_pool(300, 8, 3, 1.0, 4.0, 2023)
}

const SWEEP: [f64; 5] = [3.0, 30.0, 300.0, 3000.0, 30000.0];
const MID_RANGE: [f64; 2] = [3.0, 30.0];

fn gains_figure(audit: &mut TraceAudit) -> Result<String, String> {
    let start = Instant::now();
    let emb = gains_fixture();
    let budget = Budget::new(100, emb.n()).unwrap();
    let opts = SweepOptions { threshold: Threshold::RelativeToFirst(1e-3), ..Default::default() };
    let curves = gain_sweep(&emb, &SWEEP, budget, opts).map_err(|e| e.to_string())?;
    let again = gain_sweep(&emb, &SWEEP, budget, opts).map_err(|e| e.to_string())?;
    if curves != again {
        return Err("sweep is not deterministic".into());
    }
    for c in &curves {
        let r = SelectionResult { indices: Vec::new(), objective_trace: c.objectives.clone(), gains: c.gains.clone() };
        audit.check(&format!("sweep gamma={}", c.gamma), &r, true);
    }
    let steps: Vec<Option<usize>> = curves.iter().map(|c| c.saturation_step).collect();
    let largest = curves.last().unwrap();
    match largest.saturation_step {
        Some(s) if s < 10 => {}
        other => return Err(format!("gamma={} saturates at {other:?}, expected before k=10", largest.gamma)),
    }
    for c in curves.iter().filter(|c| MID_RANGE.contains(&c.gamma)) {
        if let Some(s) = c.saturation_step {
            return Err(format!("mid-range gamma={} saturates at k={s}", c.gamma));
        }
    }
    let rec = recommend_gamma_range(&curves, budget, DIAGONAL_FLOOR).map_err(|e| e.to_string())?;
    if !rec.stable.contains(&30.0) {
        return Err(format!("gamma=30 not in the stable set {:?}", rec.stable));
    }
    // larger widths never saturate later
    let as_rank = |s: Option<usize>| s.unwrap_or(usize::MAX);
    if steps.windows(2).any(|w| as_rank(w[1]) > as_rank(w[0])) {
        return Err(format!("saturation steps not non-increasing in gamma: {steps:?}"));
    }
    within(Duration::from_secs(30), start.elapsed())?;
    let desc: Vec<String> = SWEEP
        .iter()
        .zip(&steps)
        .map(|(g, s)| format!("{g}:{}", s.map_or("none".to_string(), |s| s.to_string())))
        .collect();
    Ok(format!("saturation step per gamma [{}], stable {:?}, {:.2?}", desc.join(" "), rec.stable, start.elapsed()))
}

fn io_round_trip() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name);
    let mut checked = 0;

    // values exactly representable in f32 survive both dtypes
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let f32_exact: Vec<f64> = (0..37 * 5).map(|_| rng.random::<f32>() as f64 * 8.0 - 4.0).collect();
    for (dtype, matrix) in [
        (Dtype::F64, gaussian_pool(41, 7, 3)),
        (Dtype::F32, EmbeddingMatrix::new(37, 5, f32_exact).unwrap()),
    ] {
        let file = EmbeddingFile { matrix, dtype, provenance: "acceptance/θ-model".into() };
        io::write_embeddings(p("e.skem"), &file).map_err(|e| e.to_string())?;
        let back = io::read_embeddings(p("e.skem"), ReadOptions::default()).map_err(|e| e.to_string())?;
        if back != file {
            return Err(format!("{dtype:?} embeddings differ after round trip"));
        }
        checked += 1;
    }

    let stats = random_token_stats(25, 9, 40, 8);
    io::write_token_stats(p("s.jsonl"), &stats).map_err(|e| e.to_string())?;
    if io::read_token_stats(p("s.jsonl")).map_err(|e| e.to_string())? != stats {
        return Err("token stats differ after round trip".into());
    }
    checked += 1;

    let emb = gaussian_pool(30, 4, 9);
    let r = fl_greedy_lazy(&emb, KernelSpec::Rbf { gamma: 2.0 }, Budget::new(5, 30).unwrap(), None)
        .map_err(|e| e.to_string())?;
    let meta = RunMetadata {
        strategy: "fl".into(),
        pool_size: 30,
        params: SelectionParams { budget: 5, gamma: Some(2.0), ..Default::default() },
        inputs: Vec::new(),
    };
    io::write_selection(p("sel.json"), &r, &meta).map_err(|e| e.to_string())?;
    let back = io::read_selection(p("sel.json")).map_err(|e| e.to_string())?;
    if back.result() != r || back.params != meta.params {
        return Err("selection differs after round trip".into());
    }
    checked += 1;

    // eager validation
    let good = std::fs::read(p("e.skem")).unwrap();
    let mut expect = |name: &str, bytes: Vec<u8>, ok: fn(&Error) -> bool| -> Result<(), String> {
        std::fs::write(p(name), bytes).unwrap();
        match io::read_embeddings(p(name), ReadOptions::default()) {
            Err(e) if ok(&e) => {
                checked += 1;
                Ok(())
            }
            other => Err(format!("{name}: unexpected {other:?}")),
        }
    };
    let mut bad_magic = good.clone();
    bad_magic[0] ^= 0xff;
    expect("magic", bad_magic, |e| matches!(e, Error::MagicMismatch { .. }))?;
    let mut bad_version = good.clone();
    bad_version[4] = 9;
    expect("version", bad_version, |e| matches!(e, Error::UnsupportedVersion { .. }))?;
    expect("truncated", good[..good.len() - 3].to_vec(), |e| matches!(e, Error::TruncatedPayload { .. }))?;
    let mut trailing = good.clone();
    trailing.push(0);
    expect("trailing", trailing, |e| matches!(e, Error::InvariantViolation { .. }))?;
    let mut nan = good.clone();
    let last = nan.len() - 4;
    nan[last..].copy_from_slice(&f32::NAN.to_le_bytes());
    expect("nan", nan, |e| matches!(e, Error::InvariantViolation { .. }))?;

    let unnamed = EmbeddingFile { matrix: gaussian_pool(3, 2, 1), dtype: Dtype::F64, provenance: String::new() };
    io::write_embeddings(p("anon.skem"), &unnamed).map_err(|e| e.to_string())?;
    if io::read_embeddings(p("anon.skem"), ReadOptions::default()).is_ok() {
        return Err("empty provenance accepted without override".into());
    }
    io::read_embeddings(p("anon.skem"), ReadOptions { allow_empty_provenance: true }).map_err(|e| e.to_string())?;
    checked += 1;

    std::fs::write(p("bad.jsonl"), "{\"id\":0,\"steps\":[[0.5,0.4,0.5,0.4]]}\n").unwrap();
    if io::read_token_stats(p("bad.jsonl")).is_ok() {
        return Err("top2 > top1 accepted".into());
    }
    std::fs::write(p("gap.jsonl"), "{\"id\":1,\"steps\":[[0.5,0.7,0.2,0.7]]}\n").unwrap();
    if io::read_token_stats(p("gap.jsonl")).is_ok() {
        return Err("out-of-order id accepted".into());
    }
    checked += 2;

    let text = std::fs::read_to_string(p("sel.json")).unwrap();
    let dup = text.replacen(&format!("{},", r.indices[1]), &format!("{},", r.indices[0]), 1);
    std::fs::write(p("dup.json"), dup).unwrap();
    if io::read_selection(p("dup.json")).is_ok() {
        return Err("selection with a duplicate index accepted".into());
    }
    checked += 1;
    Ok(format!("{checked} round-trip and validation checks"))
}

#[test]
fn primary_criteria() {
    let _machine = MACHINE.lock().unwrap_or_else(|e| e.into_inner());
    let mut audit = TraceAudit::default();
    let mut results = vec![
        ("top-k uncertainty equals exhaustive oracle", topk_oracle()),
        ("facility location (1-1/e) approximation", fl_approximation(&mut audit, false)),
        ("mixture objective (1-1/e) approximation", fl_approximation(&mut audit, true)),
        ("k-center 2-approximation", kcenter_two_approx()),
        ("lazy greedy equals naive greedy", lazy_equals_naive(&mut audit)),
        ("stochastic greedy quality", stochastic_quality(&mut audit)),
        ("gain-curve saturation across kernel widths", gains_figure(&mut audit)),
        ("io round trip and validation", io_round_trip()),
    ];
    let telescoping = if audit.failures.is_empty() {
        Ok(format!(
            "{} runs: sums of gains match objectives, {} deterministic runs have non-increasing gains",
            audit.runs, audit.monotone_checked
        ))
    } else {
        Err(format!("{} of {} runs failed; first: {}", audit.failures.len(), audit.runs, audit.failures[0]))
    };
    results.insert(6, ("diminishing returns and telescoping gains", telescoping));
    for (name, outcome) in &results {
        report(name, outcome);
    }
    let failed: Vec<&str> = results.iter().filter(|(_, o)| o.is_err()).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

const SCALE_N: usize = 99_000;
const SCALE_D: usize = 512;
const SCALE_K: usize = 4_500;
const SCALE_GAMMA: f64 = 10.0;
/// Wall-clock limit for an 8-core machine.
const SCALE_LIMIT_8_CORES: Duration = Duration::from_secs(30 * 60);
const SCALE_MEMORY_LIMIT: u64 = 8 * 1024 * 1024 * 1024;

#[test]
fn scale_criterion() {
    let _machine = MACHINE.lock().unwrap_or_else(|e| e.into_inner());
    let outcome = scale_run();
    report("lazy greedy at scale (n=99000, d=512, k=4500)", &outcome);
    if let Err(why) = outcome {
        panic!("{why}");
    }
}

fn scale_run() -> Result<String, String> {
    let cores = std::thread::available_parallelism().map_or(1, |c| c.get());
    // fewer cores get proportionally more time; more than eight get none
    let limit = SCALE_LIMIT_8_CORES * 8 / cores.min(8) as u32;
    // tight clusters: within-cluster similarity near 1/e, across clusters near 0
    let emb = clustered_pool(SCALE_N, SCALE_D, 1000, 0.1, 1.0, 99);
    let start = Instant::now();
    let spec = KernelSpec::Rbf { gamma: SCALE_GAMMA };
    if SimilarityEngine::new(&emb, spec).map_err(|e| e.to_string())?.is_dense() {
        return Err("kernel would be materialized".into());
    }
    let r = fl_greedy_lazy(&emb, spec, Budget::new(SCALE_K, SCALE_N).unwrap(), None).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let peak = peak_rss_bytes().ok_or("peak memory unavailable")?;
    r.check(SCALE_N)?;
    let mut audit = TraceAudit::default();
    audit.check("scale", &r, true);
    if let Some(f) = audit.failures.first() {
        return Err(f.clone());
    }
    let detail = format!(
        "{elapsed:.1?} on {cores} core(s) (limit {limit:?}), peak RSS {:.2} GiB, first gain {:.4}, last gain {:.4}",
        peak as f64 / (1u64 << 30) as f64,
        r.gains[0],
        r.gains[SCALE_K - 1]
    );
    if elapsed > limit {
        return Err(format!("too slow: {detail}"));
    }
    if peak >= SCALE_MEMORY_LIMIT {
        return Err(format!("too much memory: {detail}"));
    }
    Ok(detail)
}
