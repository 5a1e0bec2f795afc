//! Command-line runner: `run` a suite, `gen` benchmark files, `eval` an
//! expression against a benchmark, `report` on an output directory.
//!
//! Exit codes: 0 success, 2 configuration error, 3 at least one job panicked.
//! Option precedence is CLI flags, then `--config` file, then defaults. All
//! randomness flows from `--seed`; two runs with identical configuration and
//! seed write byte-identical results (pass `--reproducible` to zero the one
//! nondeterministic column, wall-clock time).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use racing_sr::bench::{
    self, metrics, quartiles, results_csv_string, run_suite_with_progress, Algo, ExpressionReport,
    MetricsOutcome, QuartilePair, SuiteOptions, SuiteSummary,
};
use racing_sr::expr::ExpressionTree;
use racing_sr::fit::OptimizerId;
use racing_sr::oracle::{BenchmarkSpec, Oracle};
use racing_sr::racing::RacingConfig;
use racing_sr::{suites, Executor};

const EXIT_OK: i32 = 0;
const EXIT_CONFIG: i32 = 2;
const EXIT_JOB_PANIC: i32 = 3;

#[derive(Parser)]
#[command(
    name = "racing-sr",
    version,
    about = "Symbolic regression via racing control-variable experiment schedules"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an algorithm over a suite or a single benchmark.
    Run(RunArgs),
    /// Materialize a built-in suite to benchmark files.
    Gen(GenArgs),
    /// Score a closed expression on a benchmark's held-out data.
    Eval(EvalArgs),
    /// Recompute the quartile summary for an output directory.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Built-in suite name or a directory of .bench files.
    #[arg(long)]
    suite: Option<String>,
    /// A single benchmark file (or built-in benchmark name).
    #[arg(long)]
    bench: Option<String>,
    /// racing | cvgp | gp | cvgp-all
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Pool capacity N_p.
    #[arg(long)]
    pool: Option<usize>,
    /// GP generations per round.
    #[arg(long)]
    gens: Option<usize>,
    /// Control-variable trials K per fit.
    #[arg(long)]
    trials: Option<usize>,
    /// Batch size m.
    #[arg(long)]
    batch: Option<usize>,
    /// Freeze threshold on per-trial loss.
    #[arg(long)]
    eps: Option<f64>,
    /// Freeze threshold on across-trial constant variance.
    #[arg(long = "eps-var")]
    eps_var: Option<f64>,
    /// nelder-mead | bfgs | cg | basin-hopping
    #[arg(long)]
    opt: Option<String>,
    #[arg(long)]
    restarts: Option<usize>,
    /// Per-expression time limit in seconds.
    #[arg(long)]
    timeout: Option<f64>,
    /// Worker cap (1 = sequential).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory (falls back to $RACING_SR_OUT, then ./out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// TOML file with the same keys as the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Zero the wall_s column so outputs are byte-reproducible.
    #[arg(long)]
    reproducible: bool,
}

/// The `--config` file: same knobs as the command line, lower precedence.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    suite: Option<String>,
    bench: Option<String>,
    algo: Option<String>,
    seed: Option<u64>,
    pool: Option<usize>,
    gens: Option<usize>,
    trials: Option<usize>,
    batch: Option<usize>,
    eps: Option<f64>,
    eps_var: Option<f64>,
    opt: Option<String>,
    restarts: Option<usize>,
    timeout: Option<f64>,
    jobs: Option<usize>,
    out: Option<PathBuf>,
    reproducible: Option<bool>,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Built-in suite name.
    #[arg(long)]
    suite: String,
    /// Output directory (falls back to $RACING_SR_OUT, then ./out).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Expression in the benchmark grammar, without open constants.
    #[arg(long)]
    expr: String,
    /// Benchmark file (or built-in benchmark name).
    #[arg(long)]
    bench: String,
    #[arg(long)]
    seed: u64,
    /// Held-out rows to score on.
    #[arg(long, default_value_t = 256)]
    test_size: usize,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory containing results.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let code = match cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Gen(args) => cmd_gen(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Report(args) => cmd_report(args),
    };
    std::process::exit(code);
}

fn fail(message: impl std::fmt::Display) -> i32 {
    eprintln!("error: {message}");
    EXIT_CONFIG
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("RACING_SR_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Load one benchmark from a file path or a built-in name.
fn load_benchmark(name: &str) -> Result<BenchmarkSpec, String> {
    let path = Path::new(name);
    if path.is_file() {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        return BenchmarkSpec::parse_file(&text).map_err(|e| format!("{}: {e}", path.display()));
    }
    suites::benchmark(name).ok_or_else(|| format!("no benchmark file or built-in named `{name}`"))
}

/// Load a suite from a built-in name or a directory of .bench files.
fn load_suite(name: &str) -> Result<Vec<BenchmarkSpec>, String> {
    if let Some(suite) = suites::suite(name) {
        return Ok(suite);
    }
    let dir = Path::new(name);
    if dir.is_dir() {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| format!("{}: {e}", dir.display()))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "bench"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(format!("{}: no .bench files", dir.display()));
        }
        return paths
            .iter()
            .map(|p| {
                let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                BenchmarkSpec::parse_file(&text).map_err(|e| format!("{}: {e}", p.display()))
            })
            .collect();
    }
    Err(format!(
        "no built-in suite or directory named `{name}` (built-ins: {})",
        suites::suite_names().join(", ")
    ))
}

fn cmd_run(args: RunArgs) -> i32 {
    let file: FileConfig = match &args.config {
        Some(path) => {
            let text = match fs::read_to_string(path) {
                Ok(t) => t,
                Err(e) => return fail(format!("{}: {e}", path.display())),
            };
            match toml::from_str(&text) {
                Ok(cfg) => cfg,
                Err(e) => return fail(format!("{}: {e}", path.display())),
            }
        }
        None => FileConfig::default(),
    };

    // Precedence: flags, then config file, then defaults.
    let defaults = RacingConfig::default();
    let seed = match args.seed.or(file.seed) {
        Some(s) => s,
        None => return fail("--seed is required (no wall-clock default)"),
    };
    let cfg = RacingConfig {
        trials: args.trials.or(file.trials).unwrap_or(defaults.trials),
        pool_size: args.pool.or(file.pool).unwrap_or(defaults.pool_size),
        generations: args.gens.or(file.gens).unwrap_or(defaults.generations),
        batch_size: args.batch.or(file.batch).unwrap_or(defaults.batch_size),
        eps: args.eps.or(file.eps).unwrap_or(defaults.eps),
        eps_var: args.eps_var.or(file.eps_var).unwrap_or(defaults.eps_var),
        restarts: args.restarts.or(file.restarts).unwrap_or(defaults.restarts),
        seed,
        optimizer: {
            let token = args.opt.or(file.opt);
            match token.as_deref().map(str::parse::<OptimizerId>) {
                None => defaults.optimizer,
                Some(Ok(opt)) => opt,
                Some(Err(e)) => return fail(e),
            }
        },
        ..defaults
    };

    let algo = {
        let token = args.algo.or(file.algo).unwrap_or_else(|| "racing".into());
        match token.parse::<Algo>() {
            Ok(a) => a,
            Err(e) => return fail(e),
        }
    };

    let suite = match (args.suite.or(file.suite), args.bench.or(file.bench)) {
        (Some(_), Some(_)) => return fail("pass either --suite or --bench, not both"),
        (Some(name), None) => match load_suite(&name) {
            Ok(s) => s,
            Err(e) => return fail(e),
        },
        (None, Some(name)) => match load_benchmark(&name) {
            Ok(b) => vec![b],
            Err(e) => return fail(e),
        },
        (None, None) => return fail("one of --suite or --bench is required"),
    };

    let jobs = args.jobs.or(file.jobs);
    if let Some(jobs) = jobs {
        if jobs == 0 {
            return fail("--jobs must be at least 1");
        }
        Executor::configure_worker_cap(jobs);
    }
    let opts = SuiteOptions {
        algo,
        cfg,
        timeout: args
            .timeout
            .or(file.timeout)
            .map(Duration::from_secs_f64),
        executor: Executor::with_jobs(jobs.unwrap_or(0)),
        reproducible: args.reproducible || file.reproducible.unwrap_or(false),
    };

    let dir = out_dir(args.out.or(file.out));
    if let Err(e) = fs::create_dir_all(&dir) {
        return fail(format!("{}: {e}", dir.display()));
    }
    let csv_path = dir.join("results.csv");

    // Completed rows are appended as jobs finish, so an interrupted run
    // leaves everything already computed on disk; the file is rewritten in
    // deterministic order on success.
    let partial = match fs::File::create(&csv_path) {
        Ok(mut f) => {
            let _ = f.write_all(results_csv_string(&[]).as_bytes());
            Mutex::new(f)
        }
        Err(e) => return fail(format!("{}: {e}", csv_path.display())),
    };
    let flush_rows = |rows: &[ExpressionReport]| {
        let mut f = partial.lock().expect("csv writer lock");
        let body = results_csv_string(rows);
        let _ = f.write_all(body.lines().skip(1).collect::<Vec<_>>().join("\n").as_bytes());
        let _ = f.write_all(b"\n");
        let _ = f.flush();
    };

    let result = run_suite_with_progress(&suite, &opts, Some(&flush_rows));

    if let Err(e) = fs::write(&csv_path, results_csv_string(&result.rows)) {
        return fail(format!("{}: {e}", csv_path.display()));
    }
    if let Err(e) = fs::write(
        dir.join("summary.json"),
        bench::summaries_json_string(std::slice::from_ref(&result.summary)),
    ) {
        return fail(format!("summary.json: {e}"));
    }
    if let Err(e) = fs::write(dir.join("hof.txt"), &result.hof_text) {
        return fail(format!("hof.txt: {e}"));
    }

    print_summary(&result.summary);
    println!("wrote {}", dir.display());
    if result.panicked > 0 {
        eprintln!("{} job(s) panicked", result.panicked);
        return EXIT_JOB_PANIC;
    }
    EXIT_OK
}

fn print_summary(summary: &SuiteSummary) {
    println!(
        "algo={} seed={} expressions={} rows={} timed_out={}",
        summary.algo, summary.seed, summary.expressions, summary.rows, summary.timed_out
    );
    let line = |name: &str, q: &Option<QuartilePair>| match q {
        Some(q) => println!("  {name:<6} median {:>12.6e}   q75 {:>12.6e}", q.median, q.q75),
        None => println!("  {name:<6} (no completed rows)"),
    };
    line("nmse", &summary.nmse);
    line("mse", &summary.mse);
    line("rmse", &summary.rmse);
    line("nrmse", &summary.nrmse);
}

fn cmd_gen(args: GenArgs) -> i32 {
    let Some(suite) = suites::suite(&args.suite) else {
        return fail(format!(
            "unknown suite `{}` (built-ins: {})",
            args.suite,
            suites::suite_names().join(", ")
        ));
    };
    let dir = out_dir(args.out);
    if let Err(e) = fs::create_dir_all(&dir) {
        return fail(format!("{}: {e}", dir.display()));
    }
    for spec in &suite {
        let path = dir.join(format!("{}.bench", spec.name));
        if let Err(e) = fs::write(&path, spec.to_file_string()) {
            return fail(format!("{}: {e}", path.display()));
        }
    }
    println!("wrote {} benchmark files to {}", suite.len(), dir.display());
    EXIT_OK
}

fn cmd_eval(args: EvalArgs) -> i32 {
    let spec = match load_benchmark(&args.bench) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let tree = match ExpressionTree::parse(&args.expr, spec.n_vars) {
        Ok(t) => t,
        Err(e) => return fail(e),
    };
    if tree.count_open_constants() > 0 {
        return fail("expression has open constants `C`; substitute fitted values first");
    }
    if args.test_size < 2 {
        return fail("--test-size must be at least 2");
    }
    let mut oracle = Oracle::new(spec, args.seed);
    let batch = oracle.sample_test(args.test_size);
    let mut eval = racing_sr::expr::BatchEvaluator::new(&tree, &batch.columns, batch.len());
    let pred = eval.eval(&[]).to_vec();
    match metrics(&batch.outputs, &pred).expect("test batch is large enough") {
        MetricsOutcome::Full(m) => {
            println!("mse = {:e}", m.mse);
            println!("nmse = {:e}", m.nmse);
            println!("rmse = {:e}", m.rmse);
            println!("nrmse = {:e}", m.nrmse);
            println!("r2 = {:e}", m.r2);
        }
        MetricsOutcome::DegenerateVariance { mse, rmse } => {
            println!("mse = {mse:e}");
            println!("rmse = {rmse:e}");
            println!("nmse/nrmse undefined: target variance is zero");
        }
    }
    EXIT_OK
}

fn cmd_report(args: ReportArgs) -> i32 {
    let dir = out_dir(args.out);
    let csv_path = dir.join("results.csv");
    let text = match fs::read_to_string(&csv_path) {
        Ok(t) => t,
        Err(e) => return fail(format!("{}: {e}", csv_path.display())),
    };
    let rows = match parse_results_csv(&text) {
        Ok(r) => r,
        Err(e) => return fail(format!("{}: {e}", csv_path.display())),
    };
    if rows.is_empty() {
        return fail("results.csv has no rows");
    }

    let mut algos: Vec<String> = rows.iter().map(|r| r.algo.clone()).collect();
    algos.sort();
    algos.dedup();
    let mut summaries = Vec::new();
    for algo in algos {
        let group: Vec<&CsvRow> = rows.iter().filter(|r| r.algo == algo).collect();
        let mut benchmarks: Vec<&str> = group.iter().map(|r| r.benchmark.as_str()).collect();
        benchmarks.sort();
        benchmarks.dedup();
        let take = |f: fn(&CsvRow) -> Option<f64>| -> Option<QuartilePair> {
            let values: Vec<f64> = group
                .iter()
                .filter(|r| !r.timed_out)
                .filter_map(|r| f(r))
                .collect();
            if values.is_empty() {
                return None;
            }
            let (median, q75) = quartiles(&values);
            Some(QuartilePair { median, q75 })
        };
        let summary = SuiteSummary {
            algo: algo.clone(),
            seed: group[0].seed,
            expressions: benchmarks.len(),
            rows: group.len(),
            timed_out: group.iter().filter(|r| r.timed_out).count(),
            panicked: 0,
            nmse: take(|r| r.nmse),
            mse: take(|r| r.mse),
            rmse: take(|r| r.rmse),
            nrmse: take(|r| r.nrmse),
        };
        print_summary(&summary);
        summaries.push(summary);
    }
    if let Err(e) = fs::write(
        dir.join("summary.json"),
        bench::summaries_json_string(&summaries),
    ) {
        return fail(format!("summary.json: {e}"));
    }
    EXIT_OK
}

struct CsvRow {
    benchmark: String,
    algo: String,
    seed: u64,
    nmse: Option<f64>,
    mse: Option<f64>,
    rmse: Option<f64>,
    nrmse: Option<f64>,
    timed_out: bool,
}

fn parse_results_csv(text: &str) -> Result<Vec<CsvRow>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty file")?;
    if !header.starts_with("benchmark,algo,seed,") {
        return Err("unrecognized header".into());
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(format!("line {}: expected 11 fields", i + 2));
        }
        let opt = |s: &str| -> Option<f64> { s.parse().ok() };
        rows.push(CsvRow {
            benchmark: fields[0].to_string(),
            algo: fields[1].to_string(),
            seed: fields[2].parse().map_err(|e| format!("line {}: {e}", i + 2))?,
            nmse: opt(fields[3]),
            mse: opt(fields[4]),
            rmse: opt(fields[5]),
            nrmse: opt(fields[6]),
            timed_out: fields[10] == "true",
        });
    }
    Ok(rows)
}
