//! Goodness-of-fit metrics, quartile reporting, the suite runner, the
//! all-schedules baseline, and the result files.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::derive_seed;
use crate::exec::Executor;
use crate::fit::optimize;
use crate::gp::{GpCtx, HallOfFame, PoolEntry};
use crate::oracle::{BenchmarkSpec, Oracle, TrialBatch};
use crate::racing::{
    self, default_schedule, nmse_on_batch, RacingConfig, RunError, RunOutcome,
    Schedule, ScheduleError, ScoredEquation,
};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("metrics need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("all-schedules baseline supports at most {max} variables, got {got}")]
    TooManyVariables { max: usize, got: usize },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Run(#[from] RunError),
}

/// Population variance `1/n * sum((x - mean)^2)`.
pub fn population_variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// The four goodness-of-fit measures plus the coefficient of determination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub mse: f64,
    pub nmse: f64,
    pub rmse: f64,
    pub nrmse: f64,
    pub r2: f64,
}

/// Metrics with the degenerate zero-variance target tagged explicitly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetricsOutcome {
    Full(Metrics),
    /// `var(y) = 0`: the normalized metrics are undefined.
    DegenerateVariance { mse: f64, rmse: f64 },
}

impl MetricsOutcome {
    pub fn full(self) -> Option<Metrics> {
        match self {
            MetricsOutcome::Full(m) => Some(m),
            MetricsOutcome::DegenerateVariance { .. } => None,
        }
    }
}

/// MSE, NMSE = MSE / var(y), RMSE = sqrt(MSE), NRMSE = sqrt(NMSE) and
/// R^2 = 1 - NMSE. Non-finite predictions score as infinitely bad.
pub fn metrics(y: &[f64], y_hat: &[f64]) -> Result<MetricsOutcome, BenchError> {
    if y.len() != y_hat.len() {
        return Err(BenchError::LengthMismatch(y.len(), y_hat.len()));
    }
    if y.len() < 2 {
        return Err(BenchError::TooFewSamples(y.len()));
    }
    let n = y.len() as f64;
    let mut acc = 0.0;
    for (t, p) in y.iter().zip(y_hat) {
        let d = t - p;
        acc += d * d;
    }
    let mse = if acc.is_finite() { acc / n } else { f64::INFINITY };
    let var_y = population_variance(y);
    if var_y == 0.0 || !var_y.is_finite() {
        return Ok(MetricsOutcome::DegenerateVariance {
            mse,
            rmse: mse.sqrt(),
        });
    }
    let nmse = mse / var_y;
    Ok(MetricsOutcome::Full(Metrics {
        mse,
        nmse,
        rmse: mse.sqrt(),
        nrmse: nmse.sqrt(),
        r2: 1.0 - nmse,
    }))
}

/// Quantile by linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of empty sample");
    assert!((0.0..=1.0).contains(&q));
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < sorted.len() {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

/// Median and 75% quartile.
pub fn quartiles(values: &[f64]) -> (f64, f64) {
    (quantile(values, 0.5), quantile(values, 0.75))
}

/// Which search algorithm a suite runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algo {
    Racing,
    Cvgp,
    Gp,
    CvgpAll,
}

impl Algo {
    pub const ALL: [Algo; 4] = [Algo::Racing, Algo::Cvgp, Algo::Gp, Algo::CvgpAll];

    pub fn token(self) -> &'static str {
        match self {
            Algo::Racing => "racing",
            Algo::Cvgp => "cvgp",
            Algo::Gp => "gp",
            Algo::CvgpAll => "cvgp-all",
        }
    }
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Algo {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algo::ALL
            .into_iter()
            .find(|a| a.token() == s)
            .ok_or_else(|| format!("unknown algorithm `{s}` (expected racing|cvgp|gp|cvgp-all)"))
    }
}

/// Metric cells of one result row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RowMetrics {
    Full(Metrics),
    /// Zero-variance target: only the unnormalized metrics exist.
    Degenerate { mse: f64, rmse: f64 },
    /// Timed out: all cells empty.
    Missing,
}

impl RowMetrics {
    pub fn nmse(&self) -> Option<f64> {
        match self {
            RowMetrics::Full(m) => Some(m.nmse),
            _ => None,
        }
    }

    fn from_outcome(outcome: MetricsOutcome) -> RowMetrics {
        match outcome {
            MetricsOutcome::Full(m) => RowMetrics::Full(m),
            MetricsOutcome::DegenerateVariance { mse, rmse } => {
                RowMetrics::Degenerate { mse, rmse }
            }
        }
    }
}

/// One `results.csv` row.
#[derive(Debug, Clone)]
pub struct ExpressionReport {
    pub benchmark: String,
    pub algo: Algo,
    pub seed: u64,
    pub metrics: RowMetrics,
    pub wall_s: f64,
    pub oracle_rows: u64,
    pub timed_out: bool,
    /// Best discovered expression, constants substituted.
    pub best_expr: Option<String>,
    pub schedule: Option<String>,
}

/// Knobs for a suite run.
#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub algo: Algo,
    pub cfg: RacingConfig,
    /// Per-expression wall-clock limit.
    pub timeout: Option<Duration>,
    pub executor: Executor,
    /// Report wall_s as 0 so outputs are byte-reproducible.
    pub reproducible: bool,
}

impl SuiteOptions {
    pub fn new(algo: Algo, cfg: RacingConfig) -> SuiteOptions {
        SuiteOptions {
            algo,
            cfg,
            timeout: None,
            executor: Executor::default(),
            reproducible: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct QuartilePair {
    pub median: f64,
    pub q75: f64,
}

/// Suite-level aggregation; timed-out rows are excluded from quartiles and
/// reported as a count.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteSummary {
    pub algo: String,
    pub seed: u64,
    pub expressions: usize,
    pub rows: usize,
    pub timed_out: usize,
    pub panicked: usize,
    pub nmse: Option<QuartilePair>,
    pub mse: Option<QuartilePair>,
    pub rmse: Option<QuartilePair>,
    pub nrmse: Option<QuartilePair>,
}

#[derive(Debug)]
pub struct SuiteResult {
    pub rows: Vec<ExpressionReport>,
    pub summary: SuiteSummary,
    pub hof_text: String,
    pub panicked: usize,
}

/// Run one algorithm over every benchmark of a suite. Each benchmark is an
/// independent job with a seed derived from the configured seed and its
/// position; jobs run concurrently under the executor and a panicking job is
/// recorded rather than poisoning the suite.
pub fn run_suite(suite: &[BenchmarkSpec], opts: &SuiteOptions) -> SuiteResult {
    run_suite_with_progress(suite, opts, None)
}

/// As `run_suite`; `progress` (if given) sees each job's rows as soon as the
/// job completes, in completion order, so partial results can be flushed.
pub fn run_suite_with_progress(
    suite: &[BenchmarkSpec],
    opts: &SuiteOptions,
    progress: Option<&(dyn Fn(&[ExpressionReport]) + Sync)>,
) -> SuiteResult {
    let jobs: Vec<(usize, BenchmarkSpec)> = suite.iter().cloned().enumerate().collect();
    let outputs = opts.executor.map(jobs, |(idx, spec)| {
        let result = catch_unwind(AssertUnwindSafe(|| run_one(&spec, idx, opts)));
        let described = match result {
            Ok(Ok(output)) => Ok(describe_job(&spec.name, opts, &output)),
            Ok(Err(err)) => Err(format!("# benchmark={} failed: {err}\n", spec.name)),
            Err(_) => Err(format!("# benchmark={} panicked\n", spec.name)),
        };
        if let (Some(sink), Ok((rows, _))) = (progress, &described) {
            sink(rows);
        }
        (idx, described)
    });

    let mut rows = Vec::new();
    let mut hof_text = String::new();
    let mut panicked = 0;
    for (_, described) in outputs {
        match described {
            Ok((mut job_rows, section)) => {
                rows.append(&mut job_rows);
                hof_text.push_str(&section);
            }
            Err(note) => {
                panicked += 1;
                hof_text.push_str(&note);
            }
        }
    }
    let summary = summarize(suite.len(), opts, &rows, panicked);
    SuiteResult {
        rows,
        summary,
        hof_text,
        panicked,
    }
}

enum JobOutput {
    Single(RunOutcome),
    All(AllSchedulesOutcome),
}

fn run_one(spec: &BenchmarkSpec, idx: usize, opts: &SuiteOptions) -> Result<JobOutput, BenchError> {
    let mut cfg = opts.cfg.clone();
    cfg.seed = derive_seed(opts.cfg.seed, idx as u64);
    let deadline = opts.timeout.map(|t| Instant::now() + t);
    Ok(match opts.algo {
        Algo::Racing => JobOutput::Single(racing::racing_run(spec, &cfg, opts.executor, deadline)?),
        Algo::Cvgp => {
            let schedule = default_schedule(spec.n_vars);
            JobOutput::Single(racing::cvgp_run(spec, &cfg, &schedule, opts.executor, deadline)?)
        }
        Algo::Gp => JobOutput::Single(racing::gp_baseline_run(spec, &cfg, opts.executor, deadline)?),
        Algo::CvgpAll => JobOutput::All(cvgp_all_schedules(spec, &cfg, opts.executor, deadline)?),
    })
}

/// Full test metrics of one scored equation on the run's held-out batch.
fn score_equation(eq: &ScoredEquation, batch: &TrialBatch) -> MetricsOutcome {
    let tree = eq.concrete_tree();
    let mut eval = crate::expr::BatchEvaluator::new(&tree, &batch.columns, batch.len());
    let pred = eval.eval(&[]).to_vec();
    metrics(&batch.outputs, &pred).expect("test batch has >= 2 rows")
}

fn describe_job(
    name: &str,
    opts: &SuiteOptions,
    output: &JobOutput,
) -> (Vec<ExpressionReport>, String) {
    let wall = |w: f64| if opts.reproducible { 0.0 } else { w };
    let mut section = String::new();
    let mut rows = Vec::new();
    match output {
        JobOutput::Single(out) => {
            let oracle_rows = out.report.train_rows + out.report.test_rows;
            let _ = writeln!(
                section,
                "# benchmark={name} algo={} seed={} timed_out={}",
                opts.algo, opts.cfg.seed, out.report.timed_out
            );
            let row_metrics = match (out.report.timed_out, out.best()) {
                (false, Some(best)) => RowMetrics::from_outcome(score_equation(best, &out.test_batch)),
                _ => RowMetrics::Missing,
            };
            for (rank, eq) in out.equations.iter().enumerate() {
                let _ = writeln!(
                    section,
                    "rank={} test_nmse={:e} schedule={} expr={}",
                    rank + 1,
                    eq.test_nmse,
                    eq.schedule,
                    eq.concrete_tree().to_canonical()
                );
            }
            rows.push(ExpressionReport {
                benchmark: name.to_string(),
                algo: opts.algo,
                seed: opts.cfg.seed,
                metrics: row_metrics,
                wall_s: wall(out.report.wall_s),
                oracle_rows,
                timed_out: out.report.timed_out,
                best_expr: out.best().map(|b| b.concrete_tree().to_canonical()),
                schedule: out.best().map(|b| b.schedule.to_string()),
            });
        }
        JobOutput::All(out) => {
            let _ = writeln!(
                section,
                "# benchmark={name} algo=cvgp-all seed={} schedules={} timed_out={}",
                opts.cfg.seed,
                out.reports.len(),
                out.timed_out
            );
            for report in &out.reports {
                let label = format!(
                    "{name}#free:{}",
                    report
                        .schedule
                        .freed_order()
                        .iter()
                        .map(|v| v.to_string())
                        .collect::<Vec<_>>()
                        .join(">")
                );
                let row_metrics = report
                    .metrics
                    .map(RowMetrics::from_outcome)
                    .unwrap_or(RowMetrics::Missing);
                if let Some(best) = &report.best {
                    let _ = writeln!(
                        section,
                        "schedule={} test_nmse={:e} expr={}",
                        report.schedule,
                        best.test_nmse,
                        best.concrete_tree().to_canonical()
                    );
                }
                rows.push(ExpressionReport {
                    benchmark: label,
                    algo: Algo::CvgpAll,
                    seed: opts.cfg.seed,
                    metrics: row_metrics,
                    wall_s: wall(out.wall_s),
                    oracle_rows: out.train_rows + out.test_rows,
                    timed_out: false,
                    best_expr: report.best.as_ref().map(|b| b.concrete_tree().to_canonical()),
                    schedule: Some(report.schedule.to_string()),
                });
            }
            if out.timed_out {
                // Schedules that never completed are summarized in one
                // timed-out row so the quartiles can footnote them.
                rows.push(ExpressionReport {
                    benchmark: format!("{name}#incomplete"),
                    algo: Algo::CvgpAll,
                    seed: opts.cfg.seed,
                    metrics: RowMetrics::Missing,
                    wall_s: wall(out.wall_s),
                    oracle_rows: out.train_rows + out.test_rows,
                    timed_out: true,
                    best_expr: None,
                    schedule: None,
                });
            }
        }
    }
    (rows, section)
}

fn summarize(
    expressions: usize,
    opts: &SuiteOptions,
    rows: &[ExpressionReport],
    panicked: usize,
) -> SuiteSummary {
    let full: Vec<&Metrics> = rows
        .iter()
        .filter(|r| !r.timed_out)
        .filter_map(|r| match &r.metrics {
            RowMetrics::Full(m) => Some(m),
            _ => None,
        })
        .collect();
    let quart = |take: fn(&Metrics) -> f64| -> Option<QuartilePair> {
        if full.is_empty() {
            return None;
        }
        let values: Vec<f64> = full.iter().map(|m| take(m)).collect();
        let (median, q75) = quartiles(&values);
        Some(QuartilePair { median, q75 })
    };
    SuiteSummary {
        algo: opts.algo.to_string(),
        seed: opts.cfg.seed,
        expressions,
        rows: rows.len(),
        timed_out: rows.iter().filter(|r| r.timed_out).count(),
        panicked,
        nmse: quart(|m| m.nmse),
        mse: quart(|m| m.mse),
        rmse: quart(|m| m.rmse),
        nrmse: quart(|m| m.nrmse),
    }
}

/// `results.csv` serialization (deterministic given the rows).
pub fn results_csv_string(rows: &[ExpressionReport]) -> String {
    let mut s = String::from(
        "benchmark,algo,seed,nmse,mse,rmse,nrmse,r2,wall_s,oracle_rows,timed_out\n",
    );
    for row in rows {
        let (nmse, mse, rmse, nrmse, r2) = match row.metrics {
            RowMetrics::Full(m) => (
                format!("{:e}", m.nmse),
                format!("{:e}", m.mse),
                format!("{:e}", m.rmse),
                format!("{:e}", m.nrmse),
                format!("{:e}", m.r2),
            ),
            RowMetrics::Degenerate { mse, rmse } => (
                String::new(),
                format!("{mse:e}"),
                format!("{rmse:e}"),
                String::new(),
                String::new(),
            ),
            RowMetrics::Missing => Default::default(),
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{:.3},{},{}",
            row.benchmark,
            row.algo,
            row.seed,
            nmse,
            mse,
            rmse,
            nrmse,
            r2,
            row.wall_s,
            row.oracle_rows,
            row.timed_out
        );
    }
    s
}

pub fn summaries_json_string(summaries: &[SuiteSummary]) -> String {
    serde_json::to_string_pretty(summaries).expect("summary serializes") + "\n"
}

/// A complete experiment schedule's outcome in the all-schedules baseline.
#[derive(Debug, Clone)]
pub struct ScheduleReport {
    pub schedule: Schedule,
    pub best: Option<ScoredEquation>,
    pub metrics: Option<MetricsOutcome>,
}

/// Outcome of exhausting all n! schedules over a shared-prefix tree.
#[derive(Debug)]
pub struct AllSchedulesOutcome {
    pub reports: Vec<ScheduleReport>,
    pub test_batch: TrialBatch,
    pub wall_s: f64,
    pub train_rows: u64,
    pub test_rows: u64,
    pub fit_calls: u64,
    /// GP generations spent in experiment rounds (prefix sharing makes this
    /// strictly less than n! complete runs would need).
    pub round_generations: u64,
    pub init_generations: u64,
    pub timed_out: bool,
}

/// Hard cap: the schedule count is n!.
const MAX_ALL_SCHEDULE_VARS: usize = 5;
/// Default budget for branch snapshots before falling back to replaying the
/// shared prefix from scratch.
const DEFAULT_SNAPSHOT_BUDGET: usize = 256 << 20;

const SALT_ORACLE: u64 = 0x6f7261636c65; // "oracle"
const SALT_RNG: u64 = 0x726e67; // "rng"
const SALT_TEST: u64 = 0x74657374; // "test"
const SALT_INIT_ORACLE: u64 = 0x696e69746f; // "inito"
const SALT_INIT_RNG: u64 = 0x696e697472; // "initr"

/// Run the fixed-schedule algorithm for every one of the n! complete
/// schedules, sharing pool state at common prefixes. Every tree node of the
/// schedule tree draws its data and randomness from seeds derived from the
/// path, so a branch replayed from scratch reproduces the shared-prefix
/// state exactly.
pub fn cvgp_all_schedules(
    spec: &BenchmarkSpec,
    cfg: &RacingConfig,
    exec: Executor,
    deadline: Option<Instant>,
) -> Result<AllSchedulesOutcome, BenchError> {
    cvgp_all_schedules_with_budget(spec, cfg, exec, deadline, DEFAULT_SNAPSHOT_BUDGET)
}

/// As `cvgp_all_schedules`, with an explicit snapshot budget in bytes.
pub fn cvgp_all_schedules_with_budget(
    spec: &BenchmarkSpec,
    cfg: &RacingConfig,
    exec: Executor,
    deadline: Option<Instant>,
    snapshot_budget: usize,
) -> Result<AllSchedulesOutcome, BenchError> {
    cfg.validate()?;
    let n = spec.n_vars;
    if n > MAX_ALL_SCHEDULE_VARS {
        return Err(BenchError::TooManyVariables {
            max: MAX_ALL_SCHEDULE_VARS,
            got: n,
        });
    }
    let started = Instant::now();
    let mut test_oracle = Oracle::new(spec.clone(), derive_seed(cfg.seed, SALT_TEST));
    let test_batch = test_oracle.sample_test(cfg.test_size);

    let mut ctx = AllCtx {
        spec,
        cfg,
        exec,
        deadline,
        snapshot_budget,
        test_batch: &test_batch,
        reports: Vec::new(),
        train_rows: 0,
        test_rows: test_oracle.test_rows(),
        fit_calls: 0,
        round_generations: 0,
        init_generations: 0,
        timed_out: false,
    };

    for first in 0..n {
        if ctx.timed_out {
            break;
        }
        let state = ctx.init_branch(first);
        ctx.visit(&[first], state);
    }

    Ok(AllSchedulesOutcome {
        reports: ctx.reports,
        wall_s: started.elapsed().as_secs_f64(),
        train_rows: ctx.train_rows,
        test_rows: ctx.test_rows,
        fit_calls: ctx.fit_calls,
        round_generations: ctx.round_generations,
        init_generations: ctx.init_generations,
        timed_out: ctx.timed_out,
        test_batch,
    })
}

#[derive(Clone)]
struct BranchState {
    pool: Vec<PoolEntry>,
    hof: HallOfFame,
    next_id: u64,
}

impl BranchState {
    /// Rough heap footprint, for the snapshot budget.
    fn estimated_bytes(&self) -> usize {
        let tree_bytes = |t: &crate::expr::ExpressionTree| t.node_count() * 72 + 64;
        let pool: usize = self
            .pool
            .iter()
            .map(|e| tree_bytes(&e.tree) + 256)
            .sum();
        let hof: usize = self
            .hof
            .entries()
            .iter()
            .map(|e| tree_bytes(&e.tree) + 128)
            .sum();
        pool + hof
    }
}

struct AllCtx<'a> {
    spec: &'a BenchmarkSpec,
    cfg: &'a RacingConfig,
    exec: Executor,
    deadline: Option<Instant>,
    snapshot_budget: usize,
    test_batch: &'a TrialBatch,
    reports: Vec<ScheduleReport>,
    train_rows: u64,
    test_rows: u64,
    fit_calls: u64,
    round_generations: u64,
    init_generations: u64,
    timed_out: bool,
}

impl AllCtx<'_> {
    fn path_seed(&self, path: &[usize], salt: u64) -> u64 {
        let mut s = derive_seed(self.cfg.seed, salt);
        for &v in path {
            s = derive_seed(s, v as u64 + 1);
        }
        s
    }

    fn control_after(&self, path: &[usize]) -> BTreeSet<usize> {
        (0..self.spec.n_vars).filter(|v| !path.contains(v)).collect()
    }

    /// Build the initial pool for schedules that free `first` in round one.
    fn init_branch(&mut self, first: usize) -> BranchState {
        let path = [first];
        let mut oracle = Oracle::new(self.spec.clone(), self.path_seed(&path, SALT_INIT_ORACLE));
        let mut rng = ChaCha8Rng::seed_from_u64(self.path_seed(&path, SALT_INIT_RNG));
        let mut fit_calls = 0;
        let mut next_id = 0;
        let control = self.control_after(&path);
        let free: BTreeSet<usize> = [first].into_iter().collect();
        let mut ctx = GpCtx {
            oracle: &mut oracle,
            cfg: self.cfg,
            exec: self.exec,
            rng: &mut rng,
            deadline: self.deadline,
            fit_calls: &mut fit_calls,
            next_id: &mut next_id,
        };
        let (pool, completed) =
            racing::seed_and_evolve_group(&free, control, self.cfg.pool_size, &mut ctx);
        if !completed {
            self.timed_out = true;
        }
        self.train_rows += oracle.train_rows();
        self.fit_calls += fit_calls;
        self.init_generations += self.cfg.init_generations as u64;
        BranchState {
            pool,
            hof: HallOfFame::new(self.cfg.hof_capacity),
            next_id,
        }
    }

    /// Run the round the node at `path` stands for, then recurse or emit.
    fn visit(&mut self, path: &[usize], mut state: BranchState) {
        if self.timed_out {
            return;
        }
        let mut oracle = Oracle::new(self.spec.clone(), self.path_seed(path, SALT_ORACLE));
        let mut rng = ChaCha8Rng::seed_from_u64(self.path_seed(path, SALT_RNG));
        let mut fit_calls = 0;
        let round = path.len() - 1;
        {
            let mut ctx = GpCtx {
                oracle: &mut oracle,
                cfg: self.cfg,
                exec: self.exec,
                rng: &mut rng,
                deadline: self.deadline,
                fit_calls: &mut fit_calls,
                next_id: &mut state.next_id,
            };
            if racing::race_round(
                &mut state.pool,
                &mut state.hof,
                self.cfg.generations,
                round,
                &mut ctx,
            )
            .is_none()
            {
                self.timed_out = true;
            }
        }
        self.fit_calls += fit_calls;
        self.round_generations += self.cfg.generations as u64;
        if self.timed_out {
            self.train_rows += oracle.train_rows();
            return;
        }

        if path.len() == self.spec.n_vars {
            self.emit_leaf(path, state, &mut oracle, &mut rng);
            self.train_rows += oracle.train_rows();
            return;
        }
        self.train_rows += oracle.train_rows();

        // Advance every entry to the child's control set and recurse.
        let choices: Vec<usize> = self.control_after(path).into_iter().collect();
        let can_snapshot = state.estimated_bytes() <= self.snapshot_budget;
        for (i, &v) in choices.iter().enumerate() {
            if self.timed_out {
                return;
            }
            let mut child_path = path.to_vec();
            child_path.push(v);
            let child_state = if i + 1 == choices.len() && can_snapshot {
                std::mem::replace(
                    &mut state,
                    BranchState {
                        pool: Vec::new(),
                        hof: HallOfFame::new(0),
                        next_id: 0,
                    },
                )
            } else if can_snapshot {
                state.clone()
            } else {
                // Over budget: replay the shared prefix from scratch. The
                // per-path seeds make the replay bit-identical to the state
                // we would have cloned.
                match self.replay(path) {
                    Some(s) => s,
                    None => return,
                }
            };
            let mut child_state = child_state;
            advance_to(&mut child_state.pool, &self.control_after(&child_path));
            self.visit(&child_path, child_state);
        }
    }

    /// Recompute the post-round state at `path` by running the prefix again.
    fn replay(&mut self, path: &[usize]) -> Option<BranchState> {
        let mut state = self.init_branch(path[0]);
        for k in 1..=path.len() {
            if self.timed_out {
                return None;
            }
            let prefix = &path[..k];
            let mut oracle = Oracle::new(self.spec.clone(), self.path_seed(prefix, SALT_ORACLE));
            let mut rng = ChaCha8Rng::seed_from_u64(self.path_seed(prefix, SALT_RNG));
            let mut fit_calls = 0;
            let mut ctx = GpCtx {
                oracle: &mut oracle,
                cfg: self.cfg,
                exec: self.exec,
                rng: &mut rng,
                deadline: self.deadline,
                fit_calls: &mut fit_calls,
                next_id: &mut state.next_id,
            };
            let done = racing::race_round(
                &mut state.pool,
                &mut state.hof,
                self.cfg.generations,
                k - 1,
                &mut ctx,
            )
            .is_some();
            drop(ctx);
            self.train_rows += oracle.train_rows();
            self.fit_calls += fit_calls;
            self.round_generations += self.cfg.generations as u64;
            if !done {
                self.timed_out = true;
                return None;
            }
            if k < path.len() {
                advance_to(&mut state.pool, &self.control_after(&path[..k + 1]));
            }
        }
        Some(state)
    }

    /// Score one complete schedule: refit the branch's candidates on fresh
    /// uncontrolled data and evaluate them on the shared held-out batch.
    fn emit_leaf(
        &mut self,
        path: &[usize],
        state: BranchState,
        oracle: &mut Oracle,
        rng: &mut ChaCha8Rng,
    ) {
        let schedule = schedule_from_freed(path, self.spec.n_vars);
        let mut candidates: Vec<(crate::expr::ExpressionTree, f64, Schedule)> = Vec::new();
        let mut seen = BTreeSet::new();
        for e in state.hof.entries() {
            if seen.insert(e.tree.to_canonical()) {
                candidates.push((e.tree.clone(), e.fitness, e.schedule.clone()));
            }
        }
        for e in &state.pool {
            if e.result.is_some() && seen.insert(e.tree.to_canonical()) {
                candidates.push((e.tree.clone(), e.scalar_fitness(), e.schedule.clone()));
            }
        }

        let mut jobs = Vec::new();
        for cand in candidates {
            let batch = oracle
                .sample(&BTreeSet::new(), 1, self.cfg.batch_size)
                .pop()
                .expect("k = 1 batch");
            jobs.push((cand, batch, rng.gen::<u64>()));
        }
        let optimizer = self.cfg.optimizer;
        let restarts = self.cfg.restarts;
        let test_batch = self.test_batch;
        let scored = self.exec.map(jobs, |((tree, fitness, sched), batch, seed)| {
            let mut fit_rng = ChaCha8Rng::seed_from_u64(seed);
            let result = optimize(&tree, &[batch], optimizer, restarts, &mut fit_rng);
            let constants = result.constants.into_iter().next().unwrap_or_default();
            let test_nmse = nmse_on_batch(&tree, &constants, test_batch);
            ScoredEquation {
                tree,
                constants,
                train_fitness: fitness,
                test_nmse,
                schedule: sched,
            }
        });
        let best = scored
            .into_iter()
            .min_by(|a, b| a.test_nmse.total_cmp(&b.test_nmse));
        let metrics_outcome = best.as_ref().map(|b| score_equation(b, self.test_batch));
        self.reports.push(ScheduleReport {
            schedule,
            best,
            metrics: metrics_outcome,
        });
    }
}

fn advance_to(pool: &mut [PoolEntry], control: &BTreeSet<usize>) {
    for entry in pool {
        entry.control_set = control.clone();
        entry
            .schedule
            .append(control.clone())
            .expect("freeing one variable keeps the chain valid");
        entry.result = None;
    }
}

fn schedule_from_freed(freed: &[usize], n_vars: usize) -> Schedule {
    let rounds: Vec<BTreeSet<usize>> = (1..=freed.len())
        .map(|k| {
            (0..n_vars)
                .filter(|v| !freed[..k].contains(v))
                .collect()
        })
        .collect();
    Schedule::new(rounds).expect("freed order forms a valid chain")
}

#[cfg(test)]
mod metric_tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction_is_all_zero() {
        let y = vec![1.0, 2.0, 5.0, -3.0];
        let m = metrics(&y, &y).unwrap().full().unwrap();
        assert_eq!(m.mse, 0.0);
        assert_eq!(m.nmse, 0.0);
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.nrmse, 0.0);
        assert_eq!(m.r2, 1.0);
    }

    #[test]
    fn predicting_the_mean_gives_unit_nmse() {
        let y = vec![1.0, 2.0, 3.0, 6.0];
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let y_hat = vec![mean; y.len()];
        let m = metrics(&y, &y_hat).unwrap().full().unwrap();
        assert!((m.nmse - 1.0).abs() < 1e-12);
        assert!(m.r2.abs() < 1e-12);
    }

    #[test]
    fn hand_computed_case() {
        let y = vec![1.0, 2.0, 3.0];
        let y_hat = vec![2.0, 3.0, 4.0];
        let m = metrics(&y, &y_hat).unwrap().full().unwrap();
        assert!((m.mse - 1.0).abs() < 1e-12);
        assert!((m.nmse - 1.5).abs() < 1e-12);
        assert!((m.rmse - 1.0).abs() < 1e-12);
        assert!((m.nrmse - 1.5f64.sqrt()).abs() < 1e-12);
        assert!((m.r2 + 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_target_is_tagged() {
        let y = vec![2.0, 2.0, 2.0];
        match metrics(&y, &[2.0, 2.5, 2.0]).unwrap() {
            MetricsOutcome::DegenerateVariance { mse, .. } => assert!(mse > 0.0),
            other => panic!("expected degenerate, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_predictions_score_worst() {
        let y = vec![1.0, 2.0, 3.0];
        let m = metrics(&y, &[1.0, f64::NAN, 3.0]).unwrap().full().unwrap();
        assert_eq!(m.mse, f64::INFINITY);
        assert_eq!(m.r2, f64::NEG_INFINITY);
    }

    #[test]
    fn length_checks() {
        assert!(metrics(&[1.0], &[1.0, 2.0]).is_err());
        assert!(metrics(&[1.0], &[1.0]).is_err());
    }

    /// Reference quantile: scan for the interpolated order statistic without
    /// reusing the implementation's arithmetic.
    fn quantile_reference(values: &[f64], q: f64) -> f64 {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        if n == 1 {
            return sorted[0];
        }
        let rank = q * (n as f64 - 1.0);
        let below = sorted[rank.floor() as usize];
        let above = sorted[rank.ceil() as usize];
        below * (1.0 - rank.fract()) + above * rank.fract()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn metric_identities(
            pairs in prop::collection::vec((-100.0..100.0f64, -100.0..100.0f64), 2..64)
        ) {
            let y: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let y_hat: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            if let MetricsOutcome::Full(m) = metrics(&y, &y_hat).unwrap() {
                let var = population_variance(&y);
                prop_assert!((m.nmse * var - m.mse).abs() <= 1e-12 * m.mse.max(1.0));
                prop_assert!((m.rmse * m.rmse - m.mse).abs() <= 1e-12 * m.mse.max(1.0));
                prop_assert!((m.nrmse * m.nrmse - m.nmse).abs() <= 1e-12 * m.nmse.max(1.0));
                prop_assert!((m.r2 - (1.0 - m.nmse)).abs() <= 1e-12 * m.nmse.max(1.0));
            }
        }

        #[test]
        fn quantiles_match_reference(
            values in prop::collection::vec(-1000.0..1000.0f64, 1..40),
            q in 0.0..1.0f64
        ) {
            let got = quantile(&values, q);
            let want = quantile_reference(&values, q);
            prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
        }
    }
}
