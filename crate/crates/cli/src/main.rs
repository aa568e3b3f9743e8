//! `selectkit`: score, select and diagnose prompt pools from the command line.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use selectkit::diagnostics::{self, SweepOptions, Threshold, DIAGONAL_FLOOR};
use selectkit::io::{self, EmbeddingFile, InputDigest, ReadOptions, RunMetadata, SelectionParams};
use selectkit::select::KernelOptionsDef;
use selectkit::uncertainty::{self, ScoreOptions, UncertaintyKind};
use selectkit::{
    oracle, Budget, EmbeddingMatrix, Greedy, KernelOptions, KernelSpec, SeedMode, SelectionResult, SimilarityEngine,
    Strategy, TokenStatsSequence,
};

#[derive(Parser, Debug)]
#[command(name = "selectkit", version, about = "Uncertainty and diversity based prompt selection")]
struct Cli {
    /// Worker threads [env: SELECTKIT_THREADS; default: all cores].
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score every prompt in a token-statistics file.
    Score(ScoreArgs),
    /// Select a subset of the pool.
    Select(SelectArgs),
    /// Sweep RBF widths and report greedy gain curves.
    Gains(GainsArgs),
    /// Compare greedy selections against exhaustive search on a tiny pool.
    #[command(hide = true)]
    Oracle(OracleArgs),
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Token statistics (JSONL).
    #[arg(long)]
    stats: PathBuf,
    #[arg(long, value_parser = parse_measure)]
    measure: UncertaintyKind,
    /// Output CSV with columns id,score.
    #[arg(long)]
    out: PathBuf,
    /// Also print the ids of the N highest-scoring prompts.
    #[arg(long, value_name = "N")]
    top: Option<usize>,
    /// Least confidence as mean token log-probability instead of the sequence log-probability.
    #[arg(long)]
    normalize_confidence: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum StrategyName {
    Random,
    Uncertainty,
    Kcenter,
    Fl,
    FlMixture,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[arg(long, value_enum)]
    strategy: StrategyName,
    /// Embedding file (required by kcenter, fl, fl-mixture).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Token statistics (required by uncertainty, fl-mixture).
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Similarity kernel: `rbf:GAMMA` or `cosine`. A common starting width is rbf:0.002;
    /// widths only make sense relative to the embedding scale, see the `gains` command.
    #[arg(long, default_value = "cosine", value_parser = parse_kernel)]
    kernel: KernelSpec,
    #[arg(long, value_name = "K")]
    budget: usize,
    /// Greedy variant: naive, lazy or stochastic:EPS.
    #[arg(long, default_value = "lazy", value_parser = parse_greedy)]
    greedy: GreedyArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output selection file (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Uncertainty measure for the uncertainty strategy.
    #[arg(long, default_value = "min-margin", value_parser = parse_measure)]
    measure: UncertaintyKind,
    /// Weight of the uncertainty term for fl-mixture.
    #[arg(long, default_value_t = 1.0)]
    mixture_weight: f64,
    /// First k-center: medoid, index:I or random (uses --seed).
    #[arg(long, default_value = "medoid")]
    kcenter_seed: String,
    #[command(flatten)]
    kernel_opts: KernelFlags,
    #[command(flatten)]
    read: ReadFlags,
}

#[derive(Args, Debug)]
struct KernelFlags {
    /// Candidates evaluated per pass over the pool.
    #[arg(long, default_value_t = KernelOptions::default().block_size)]
    block_size: usize,
    /// Largest pool whose kernel is held in memory.
    #[arg(long, default_value_t = KernelOptions::default().dense_threshold)]
    dense_threshold: usize,
    /// Kernel columns kept in an LRU cache (0 disables).
    #[arg(long, default_value_t = 0)]
    column_cache: usize,
}

impl KernelFlags {
    fn options(&self) -> KernelOptions {
        KernelOptions {
            block_size: self.block_size,
            dense_threshold: self.dense_threshold,
            column_cache: self.column_cache,
        }
    }
}

#[derive(Args, Debug)]
struct ReadFlags {
    /// Accept embedding files without a provenance string.
    #[arg(long)]
    allow_empty_provenance: bool,
}

#[derive(Args, Debug)]
struct GainsArgs {
    #[arg(long)]
    embeddings: PathBuf,
    /// Comma-separated RBF widths.
    #[arg(long, allow_hyphen_values = true)]
    gammas: String,
    #[arg(long, value_name = "K")]
    budget: usize,
    /// Saturation threshold: an absolute gain T, or rel:F for F times the first gain.
    #[arg(long, default_value = "rel:0.001", value_parser = parse_threshold)]
    threshold: Threshold,
    /// Widths whose median off-diagonal similarity is below this are rejected as diagonal.
    #[arg(long, default_value_t = DIAGONAL_FLOOR)]
    diagonal_floor: f64,
    #[arg(long)]
    out_csv: PathBuf,
    #[arg(long)]
    out_json: PathBuf,
    #[command(flatten)]
    kernel_opts: KernelFlags,
    #[command(flatten)]
    read: ReadFlags,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum OracleProblem {
    Fl,
    Kcenter,
    Topk,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long, value_enum)]
    problem: OracleProblem,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long, default_value = "cosine", value_parser = parse_kernel)]
    kernel: KernelSpec,
    #[arg(long, default_value = "min-margin", value_parser = parse_measure)]
    measure: UncertaintyKind,
    #[arg(long)]
    budget: usize,
    #[command(flatten)]
    read: ReadFlags,
}

#[derive(Copy, Clone, Debug, PartialEq)]
enum GreedyArg {
    Naive,
    Lazy,
    Stochastic(f64),
}

impl GreedyArg {
    fn with_seed(self, seed: u64) -> Greedy {
        match self {
            GreedyArg::Naive => Greedy::Naive,
            GreedyArg::Lazy => Greedy::Lazy,
            GreedyArg::Stochastic(epsilon) => Greedy::Stochastic { epsilon, seed },
        }
    }

    fn name(self) -> &'static str {
        match self {
            GreedyArg::Naive => "naive",
            GreedyArg::Lazy => "lazy",
            GreedyArg::Stochastic(_) => "stochastic",
        }
    }
}

fn parse_greedy(s: &str) -> Result<GreedyArg, String> {
    match s {
        "naive" => Ok(GreedyArg::Naive),
        "lazy" => Ok(GreedyArg::Lazy),
        _ => {
            let eps = s
                .strip_prefix("stochastic:")
                .ok_or_else(|| format!("expected naive, lazy or stochastic:EPS, got {s:?}"))?;
            let eps: f64 = eps.parse().map_err(|_| format!("bad epsilon {eps:?}"))?;
            if !(eps > 0.0 && eps < 1.0) {
                return Err(format!("epsilon must be in (0, 1), got {eps}"));
            }
            Ok(GreedyArg::Stochastic(eps))
        }
    }
}

fn parse_kernel(s: &str) -> Result<KernelSpec, String> {
    KernelSpec::from_str(s).map_err(|e| e.to_string())
}

fn parse_measure(s: &str) -> Result<UncertaintyKind, String> {
    UncertaintyKind::from_str(s).map_err(|e| e.to_string())
}

fn parse_threshold(s: &str) -> Result<Threshold, String> {
    Threshold::from_str(s).map_err(|e| e.to_string())
}

fn parse_seed_mode(s: &str, seed: u64) -> Result<SeedMode, String> {
    match s {
        "medoid" => Ok(SeedMode::Medoid),
        "random" => Ok(SeedMode::Random { seed }),
        _ => s
            .strip_prefix("index:")
            .and_then(|i| i.parse().ok())
            .map(|index| SeedMode::Index { index })
            .ok_or_else(|| format!("expected medoid, index:I or random, got {s:?}")),
    }
}

fn parse_gammas(s: &str) -> Result<Vec<f64>, String> {
    let gammas = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("bad gamma {t:?}")))
        .collect::<Result<Vec<_>, _>>()?;
    if gammas.is_empty() {
        return Err("the gamma list is empty".into());
    }
    if let Some(g) = gammas.iter().find(|g| !(g.is_finite() && **g > 0.0)) {
        return Err(format!("gamma must be positive, got {g}"));
    }
    Ok(gammas)
}

fn usage_error(kind: ErrorKind, msg: impl std::fmt::Display) -> ! {
    Cli::command().error(kind, msg).exit()
}

fn load_embeddings(path: &Path, read: &ReadFlags) -> Result<(EmbeddingFile, InputDigest)> {
    let opts = ReadOptions { allow_empty_provenance: read.allow_empty_provenance };
    let file = io::read_embeddings(path, opts)?;
    let digest = InputDigest::of("embeddings", path, Some(file.provenance.clone()))?;
    Ok((file, digest))
}

fn load_stats(path: &Path) -> Result<(Vec<TokenStatsSequence>, InputDigest)> {
    let stats = io::read_token_stats(path)?;
    let digest = InputDigest::of("token_stats", path, None)?;
    Ok((stats, digest))
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let stats = io::read_token_stats(&args.stats)?;
    let opts = ScoreOptions { normalize_confidence: args.normalize_confidence };
    let scores = uncertainty::score_all(&stats, args.measure, opts)?;
    write_file(&args.out, |w| {
        writeln!(w, "id,score")?;
        for (i, s) in scores.iter().enumerate() {
            writeln!(w, "{i},{}", diagnostics::format_sig9(*s))?;
        }
        Ok(())
    })?;
    if let Some(n) = args.top {
        let stdout = std::io::stdout();
        let mut out = stdout.lock();
        for i in uncertainty::rank_descending(&scores).into_iter().take(n) {
            writeln!(out, "{i}")?;
        }
    }
    Ok(())
}

fn cmd_select(args: SelectArgs) -> Result<()> {
    let kernel_opts: KernelOptionsDef = args.kernel_opts.options().into();
    let greedy = args.greedy.with_seed(args.seed);
    let mut params = SelectionParams { budget: args.budget, ..Default::default() };
    let strategy = match args.strategy {
        StrategyName::Random => {
            params.seed = Some(args.seed);
            Strategy::Random { seed: args.seed }
        }
        StrategyName::Uncertainty => {
            params.measure = Some(args.measure.to_string());
            Strategy::Uncertainty { kind: args.measure, opts: ScoreOptions::default() }
        }
        StrategyName::Kcenter => {
            let seed_mode = parse_seed_mode(&args.kcenter_seed, args.seed)
                .unwrap_or_else(|e| usage_error(ErrorKind::InvalidValue, e));
            params.seed_mode = Some(args.kcenter_seed.clone());
            if matches!(seed_mode, SeedMode::Random { .. }) {
                params.seed = Some(args.seed);
            }
            Strategy::Kcenter { seed_mode }
        }
        StrategyName::Fl | StrategyName::FlMixture => {
            params.kernel = Some(args.kernel.to_string());
            if let KernelSpec::Rbf { gamma } = args.kernel {
                params.gamma = Some(gamma);
            }
            params.greedy = Some(args.greedy.name().to_string());
            if let GreedyArg::Stochastic(eps) = args.greedy {
                params.epsilon = Some(eps);
                params.seed = Some(args.seed);
            }
            if args.strategy == StrategyName::Fl {
                Strategy::Fl { kernel: args.kernel, greedy, kernel_opts }
            } else {
                params.measure = Some(UncertaintyKind::MinMargin.to_string());
                params.mixture_weight = Some(args.mixture_weight);
                Strategy::FlMixture { kernel: args.kernel, greedy, weight: args.mixture_weight, kernel_opts }
            }
        }
    };

    let needs = strategy.requirements();
    let name = strategy.name();
    if needs.embeddings && args.embeddings.is_none() {
        usage_error(ErrorKind::MissingRequiredArgument, format!("--strategy {name} requires --embeddings"));
    }
    if needs.token_stats && args.stats.is_none() {
        usage_error(ErrorKind::MissingRequiredArgument, format!("--strategy {name} requires --stats"));
    }
    if args.strategy == StrategyName::Random && args.embeddings.is_none() && args.stats.is_none() {
        usage_error(
            ErrorKind::MissingRequiredArgument,
            "--strategy random needs --embeddings or --stats to know the pool size",
        );
    }

    let mut inputs = Vec::new();
    let emb = match &args.embeddings {
        Some(p) => {
            let (file, digest) = load_embeddings(p, &args.read)?;
            inputs.push(digest);
            Some(file.matrix)
        }
        None => None,
    };
    let stats = match &args.stats {
        Some(p) => {
            let (stats, digest) = load_stats(p)?;
            inputs.push(digest);
            Some(stats)
        }
        None => None,
    };
    if let (Some(e), Some(s)) = (&emb, &stats) {
        if e.n() != s.len() {
            bail!(selectkit::Error::LengthMismatch { stats: s.len(), n: e.n() });
        }
    }
    let pool_size = emb.as_ref().map(EmbeddingMatrix::n).or(stats.as_ref().map(Vec::len)).unwrap_or(0);

    let result = selectkit::run_strategy(&strategy, emb.as_ref(), stats.as_deref(), args.budget)?;
    let meta = RunMetadata { strategy: name.to_string(), pool_size, params, inputs };
    io::write_selection(&args.out, &result, &meta)?;
    let written = io::read_selection(&args.out)?;
    if written.result() != result {
        bail!("{} does not read back as written", args.out.display());
    }
    Ok(())
}

fn cmd_gains(args: GainsArgs) -> Result<()> {
    let gammas = parse_gammas(&args.gammas).unwrap_or_else(|e| usage_error(ErrorKind::InvalidValue, e));
    let (file, _) = load_embeddings(&args.embeddings, &args.read)?;
    let emb = file.matrix;
    let budget = Budget::new(args.budget, emb.n())?;
    let opts = SweepOptions { threshold: args.threshold, kernel: args.kernel_opts.options(), ..Default::default() };
    let curves = diagnostics::gain_sweep(&emb, &gammas, budget, opts)?;
    let rec = diagnostics::recommend_gamma_range(&curves, budget, args.diagonal_floor)?;
    write_file(&args.out_csv, |w| diagnostics::write_gains_csv(&curves, w))?;
    let summary = diagnostics::summarize(&curves, &rec, budget);
    write_file(&args.out_json, |w| {
        serde_json::to_writer_pretty(&mut *w, &summary)?;
        writeln!(w)
    })?;
    Ok(())
}

fn cmd_oracle(args: OracleArgs) -> Result<()> {
    let report = match args.problem {
        OracleProblem::Fl | OracleProblem::Kcenter => {
            let path = args
                .embeddings
                .as_ref()
                .unwrap_or_else(|| usage_error(ErrorKind::MissingRequiredArgument, "oracle needs --embeddings"));
            let emb = load_embeddings(path, &args.read)?.0.matrix;
            let budget = Budget::new(args.budget, emb.n())?;
            let rows: Vec<&[f64]> = (0..emb.n()).map(|i| emb.row(i)).collect();
            if args.problem == OracleProblem::Fl {
                let kernel = oracle::naive_kernel_matrix(&rows, args.kernel);
                let (opt_set, opt) = oracle::exhaustive_fl_opt(&kernel, args.budget)?;
                let engine = SimilarityEngine::new(&emb, args.kernel)?;
                let greedy = selectkit::facility_location::greedy_naive(&engine, budget, None)?;
                comparison(&opt_set, opt, &greedy, oracle::fl_value(&kernel, &greedy.indices))
            } else {
                let (opt_set, opt) = oracle::exhaustive_kcenter_opt(&rows, args.budget)?;
                let greedy = selectkit::kcenter::kcenter_greedy(&emb, budget, SeedMode::Medoid)?;
                comparison(&opt_set, opt, &greedy, oracle::covering_radius(&rows, &greedy.indices))
            }
        }
        OracleProblem::Topk => {
            let path = args
                .stats
                .as_ref()
                .unwrap_or_else(|| usage_error(ErrorKind::MissingRequiredArgument, "oracle topk needs --stats"));
            let stats = io::read_token_stats(path)?;
            let scores = uncertainty::score_all(&stats, args.measure, ScoreOptions::default())?;
            let (opt_set, opt) = oracle::exhaustive_topk(&scores, args.budget)?;
            let greedy = uncertainty::select_topk_by_scores(&scores, Budget::new(args.budget, scores.len())?)?;
            let value = greedy.indices.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
            comparison(&opt_set, opt, &greedy, value)
        }
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn comparison(opt_set: &[usize], opt: f64, greedy: &SelectionResult, value: f64) -> serde_json::Value {
    serde_json::json!({
        "optimum": { "indices": opt_set, "value": opt },
        "greedy": { "indices": greedy.indices, "value": value },
    })
}

/// Writes `path` through a buffered file; the file is complete when this returns `Ok`.
fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    body(&mut w).with_context(|| format!("writing {}", path.display()))?;
    w.into_inner()
        .map_err(|e| anyhow!("flushing {}: {}", path.display(), e.error()))?
        .sync_all()
        .with_context(|| format!("syncing {}", path.display()))
}

/// `--threads`, else `SELECTKIT_THREADS`, else `None` for rayon's default.
fn thread_count(flag: Option<usize>) -> Option<usize> {
    let threads = flag.or_else(|| {
        let raw = std::env::var("SELECTKIT_THREADS").ok()?;
        let parsed = raw.trim().parse().unwrap_or_else(|_| {
            usage_error(ErrorKind::InvalidValue, format!("SELECTKIT_THREADS must be a positive integer, got {raw:?}"))
        });
        Some(parsed)
    })?;
    if threads == 0 {
        usage_error(ErrorKind::InvalidValue, "thread count must be at least 1");
    }
    Some(threads)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = thread_count(cli.threads) {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    }
    match cli.command {
        Command::Score(a) => cmd_score(a),
        Command::Select(a) => cmd_select(a),
        Command::Gains(a) => cmd_gains(a),
        Command::Oracle(a) => cmd_oracle(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
