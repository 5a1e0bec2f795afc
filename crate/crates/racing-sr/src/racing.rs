//! Racing over experiment schedules, plus the fixed-schedule and plain-GP
//! baselines that share the same round engine.
//!
//! A run proceeds in `n` rounds. Entries start as single-variable expressions
//! fitted under "everything else controlled"; each round refits every entry
//! on fresh batches from its own control set, evolves the pool, keeps the
//! global top `N_p` (this is where entries riding weak schedules get starved
//! out), freezes well-fitted structure, then releases one more variable per
//! entry. The baselines differ only in how schedules advance: the fixed
//! variant walks one given schedule, the plain-GP variant runs a single
//! uncontrolled round with the whole generation budget.

use std::collections::BTreeSet;
use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::derive_seed;
use crate::exec::Executor;
use crate::expr::{self, ExpressionTree};
use crate::fit::{optimize, OptimizerId};
use crate::gp::{self, GpCtx, HallOfFame, PoolEntry};
use crate::oracle::{BenchmarkSpec, Oracle, TrialBatch};

/// Depth of the randomly seeded single-variable expressions.
const INIT_TREE_DEPTH: usize = 3;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("round {0} must control exactly one variable fewer than the round before")]
    BadDecrement(usize),
    #[error("round {0} is not a subset of the previous round")]
    NotSubset(usize),
    #[error("a schedule needs at least one round")]
    Empty,
    #[error("schedule does not cover all {0} rounds ending at the empty set")]
    Incomplete(usize),
}

/// An ordered list of control-variable sets, one per round. Each appended
/// round drops exactly one variable from the previous round; a complete
/// schedule ends with nothing controlled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    rounds: Vec<BTreeSet<usize>>,
}

impl Schedule {
    pub fn new(rounds: Vec<BTreeSet<usize>>) -> Result<Schedule, ScheduleError> {
        if rounds.is_empty() {
            return Err(ScheduleError::Empty);
        }
        let mut schedule = Schedule {
            rounds: vec![rounds[0].clone()],
        };
        for next in &rounds[1..] {
            schedule.append(next.clone())?;
        }
        Ok(schedule)
    }

    pub fn initial(control: BTreeSet<usize>) -> Schedule {
        Schedule {
            rounds: vec![control],
        }
    }

    pub fn append(&mut self, next: BTreeSet<usize>) -> Result<(), ScheduleError> {
        let prev = self.rounds.last().expect("schedules are never empty");
        let idx = self.rounds.len();
        if next.len() + 1 != prev.len() {
            return Err(ScheduleError::BadDecrement(idx));
        }
        if !next.is_subset(prev) {
            return Err(ScheduleError::NotSubset(idx));
        }
        self.rounds.push(next);
        Ok(())
    }

    pub fn rounds(&self) -> &[BTreeSet<usize>] {
        &self.rounds
    }

    pub fn last(&self) -> &BTreeSet<usize> {
        self.rounds.last().expect("schedules are never empty")
    }

    /// A complete schedule for `n` variables has `n` rounds and frees the
    /// last variable in the final round.
    pub fn is_complete(&self, n_vars: usize) -> bool {
        self.rounds.len() == n_vars
            && self.rounds[0].len() + 1 == n_vars
            && self.last().is_empty()
    }

    /// The variables in freeing order (difference between rounds), for a
    /// complete or partial schedule.
    pub fn freed_order(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let n = self.rounds[0].len() + 1;
        let all: BTreeSet<usize> = (0..n).collect();
        let mut prev = &all;
        for round in &self.rounds {
            if let Some(&v) = prev.difference(round).next() {
                out.push(v);
            }
            prev = round;
        }
        out
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .rounds
            .iter()
            .map(|set| {
                let vars: Vec<String> = set.iter().map(|v| format!("x{v}")).collect();
                format!("{{{}}}", vars.join(","))
            })
            .collect();
        write!(f, "({})", parts.join(" -> "))
    }
}

/// The default fixed schedule: free x0 first, then x1, and so on.
pub fn default_schedule(n_vars: usize) -> Schedule {
    let rounds: Vec<BTreeSet<usize>> = (1..=n_vars).map(|i| (i..n_vars).collect()).collect();
    Schedule::new(rounds).expect("the default chain is valid")
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("invalid config: {0}")]
    Config(String),
}

/// All knobs for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RacingConfig {
    /// Control-variable trials per fit (K).
    pub trials: usize,
    /// Pool capacity (N_p).
    pub pool_size: usize,
    /// GP generations per round.
    pub generations: usize,
    /// Rows per batch (m).
    pub batch_size: usize,
    /// Freeze threshold on the per-trial loss.
    pub eps: f64,
    /// Freeze threshold on the across-trial constant variance.
    pub eps_var: f64,
    pub hof_capacity: usize,
    pub p_mutate: f64,
    pub p_mate: f64,
    pub optimizer: OptimizerId,
    /// Random initializations per constant fit.
    pub restarts: usize,
    pub seed: u64,
    /// GP generations inside pool initialization.
    pub init_generations: usize,
    /// Bloat cap; edits beyond this are retried once then skipped.
    pub max_tree_nodes: usize,
    /// Held-out rows used to score the final hall of fame.
    pub test_size: usize,
}

impl Default for RacingConfig {
    fn default() -> Self {
        RacingConfig {
            trials: 5,
            pool_size: 25,
            generations: 100,
            batch_size: 256,
            eps: 1e-3,
            eps_var: 1e-3,
            hof_capacity: 25,
            p_mutate: 0.5,
            p_mate: 0.5,
            optimizer: OptimizerId::Bfgs,
            restarts: 5,
            seed: 0,
            init_generations: 20,
            max_tree_nodes: 60,
            test_size: 256,
        }
    }
}

impl RacingConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        if self.trials < 2 {
            return Err(RunError::Config(
                "at least 2 trials are required (constant variance needs them)".into(),
            ));
        }
        if self.pool_size == 0 || self.batch_size == 0 || self.test_size < 2 {
            return Err(RunError::Config("pool, batch and test sizes must be positive".into()));
        }
        if !(self.eps > 0.0) || !(self.eps_var > 0.0) {
            return Err(RunError::Config("freeze thresholds must be positive".into()));
        }
        for (name, p) in [("p_mutate", self.p_mutate), ("p_mate", self.p_mate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(RunError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    /// Bookkeeping estimate of genetic operations per round.
    pub fn genetic_ops_per_round(&self) -> u64 {
        (self.generations * self.pool_size) as u64
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// What happened to one constant slot during a freeze.
#[derive(Debug, Clone, PartialEq)]
pub struct FreezeOutcome {
    pub passed_fit_test: bool,
    /// (slot index before renumbering, frozen value) for standalone
    /// constants; summary constants stay editable and are not listed.
    pub frozen_constants: Vec<(usize, f64)>,
}

/// Freeze well-fitted structure. If every trial loss is within `eps`, all
/// operator and variable nodes become non-editable; each open constant whose
/// across-trial variance is within `eps_var` is frozen at its trial mean,
/// the rest stay editable as summary constants for later rounds.
pub fn freeze_equation(entry: &mut PoolEntry, cfg: &RacingConfig) -> FreezeOutcome {
    let nothing = FreezeOutcome {
        passed_fit_test: false,
        frozen_constants: Vec::new(),
    };
    let Some(result) = &entry.result else {
        return nothing;
    };
    if result.fitness.is_empty() || result.losses().any(|l| !(l <= cfg.eps)) {
        return nothing;
    }

    let slots = entry.tree.count_open_constants();
    let k = result.constants.len() as f64;
    let mut frozen: Vec<(usize, f64)> = Vec::new();
    for j in 0..slots {
        let mean = result.constants.iter().map(|row| row[j]).sum::<f64>() / k;
        // Across-trial variance as a plain sum of squared deviations.
        let var: f64 = result
            .constants
            .iter()
            .map(|row| (row[j] - mean) * (row[j] - mean))
            .sum();
        if var <= cfg.eps_var {
            frozen.push((j, mean));
        }
    }

    entry.tree.for_each_mut(&mut |node| match node.kind {
        expr::NodeKind::Binary(_) | expr::NodeKind::Unary(_) | expr::NodeKind::Variable(_) => {
            node.editable = false;
        }
        expr::NodeKind::OpenConst { slot } => {
            if let Some((_, value)) = frozen.iter().find(|(j, _)| *j == slot) {
                node.kind = expr::NodeKind::Literal(*value);
                node.editable = false;
            }
        }
        expr::NodeKind::Literal(_) => {}
    });
    entry.tree.renumber_slots();
    if !frozen.is_empty() {
        // Slot layout changed; the constant matrix no longer lines up.
        entry.result = None;
    }
    FreezeOutcome {
        passed_fit_test: true,
        frozen_constants: frozen,
    }
}

/// Release one uniformly drawn controlled variable per entry and extend its
/// schedule. Entries already at the empty control set pass through.
pub fn extend_schedules<R: Rng + ?Sized>(pool: &mut [PoolEntry], rng: &mut R) {
    for entry in pool {
        if entry.control_set.is_empty() {
            continue;
        }
        let vars: Vec<usize> = entry.control_set.iter().copied().collect();
        let freed = vars[rng.gen_range(0..vars.len())];
        entry.control_set.remove(&freed);
        entry
            .schedule
            .append(entry.control_set.clone())
            .expect("dropping one variable keeps the chain valid");
        entry.result = None;
    }
}

/// Survivor histogram and best fitness after one round's selection.
#[derive(Debug, Clone)]
pub struct RoundStats {
    pub round: usize,
    /// Surviving entries per control set, descending by count.
    pub survivors: Vec<(BTreeSet<usize>, usize)>,
    pub best_train_fitness: f64,
}

/// A training hall-of-fame line kept for diagnosis.
#[derive(Debug, Clone)]
pub struct TrainHofLine {
    pub expr: String,
    pub fitness: f64,
    pub schedule: Schedule,
}

/// Accounting for one run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub wall_s: f64,
    /// Rows drawn from the training stream (fits and refits).
    pub train_rows: u64,
    /// Rows drawn from the held-out stream.
    pub test_rows: u64,
    /// Constant fits over fresh K-batch samples.
    pub fit_calls: u64,
    /// Single-batch refits of hall-of-fame entries before test scoring.
    pub hof_refits: u64,
    /// Bookkeeping: rounds x generations x pool size.
    pub genetic_ops: u64,
    pub rounds: Vec<RoundStats>,
    pub train_hof: Vec<TrainHofLine>,
    pub timed_out: bool,
}

/// A hall-of-fame equation after final scoring on held-out data.
#[derive(Debug, Clone)]
pub struct ScoredEquation {
    pub tree: ExpressionTree,
    /// Constants fitted on one fresh uncontrolled training batch.
    pub constants: Vec<f64>,
    pub train_fitness: f64,
    pub test_nmse: f64,
    pub schedule: Schedule,
}

impl ScoredEquation {
    /// The expression with fitted constants substituted in.
    pub fn concrete_tree(&self) -> ExpressionTree {
        self.tree
            .substitute_open_constants(&self.constants)
            .expect("constants come from this tree's fit")
    }
}

/// Result of a full run: scored equations (best test NMSE first), the shared
/// held-out batch they were scored on, and the accounting report.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub equations: Vec<ScoredEquation>,
    pub test_batch: TrialBatch,
    pub report: RunReport,
}

impl RunOutcome {
    pub fn best(&self) -> Option<&ScoredEquation> {
        self.equations.first()
    }
}

enum Mode {
    Racing,
    Fixed(Schedule),
    SingleRound,
}

/// Initialization only: one briefly-evolved group per variable, everything
/// else controlled. The run entry points do this internally; exposed for
/// inspection and tests.
pub fn build_gp_pool(
    spec: &BenchmarkSpec,
    cfg: &RacingConfig,
    exec: Executor,
) -> Result<Vec<PoolEntry>, RunError> {
    cfg.validate()?;
    let mut engine = Engine::new(spec.clone(), cfg, exec, None);
    Ok(engine.build_racing_pool())
}

/// Seed `count` random trees over `free` (everything in `control` pinned),
/// fit them, and evolve the group for the configured init generations with a
/// throwaway archive. Returns false in the flag when the deadline expired.
pub(crate) fn seed_and_evolve_group(
    free: &BTreeSet<usize>,
    control: BTreeSet<usize>,
    count: usize,
    ctx: &mut GpCtx,
) -> (Vec<PoolEntry>, bool) {
    let n_vars = ctx.oracle.spec().n_vars;
    let op_set = ctx.oracle.spec().op_set.clone();
    let mut group = Vec::with_capacity(count);
    for _ in 0..count {
        let tree = expr::random_tree(free, &op_set, INIT_TREE_DEPTH, n_vars, ctx.rng);
        group.push(PoolEntry {
            id: ctx.fresh_id(),
            tree,
            result: None,
            schedule: Schedule::initial(control.clone()),
            control_set: control.clone(),
        });
    }
    let indices: Vec<usize> = (0..group.len()).collect();
    gp::refit_entries(&mut group, &indices, ctx);
    let mut scratch_hof = HallOfFame::new(ctx.cfg.hof_capacity);
    let completed = gp::gp_run(&mut group, &mut scratch_hof, ctx.cfg.init_generations, ctx);
    (group, completed)
}

/// One experiment round: fresh control-variable trials for every entry, the
/// GP generations, the racing TopK selection, then structure freezing.
/// Returns the post-selection stats, or None if the deadline expired.
pub(crate) fn race_round(
    pool: &mut Vec<PoolEntry>,
    hof: &mut HallOfFame,
    generations: usize,
    round: usize,
    ctx: &mut GpCtx,
) -> Option<RoundStats> {
    let indices: Vec<usize> = (0..pool.len()).collect();
    gp::refit_entries(pool, &indices, ctx);
    if !gp::gp_run(pool, hof, generations, ctx) {
        return None;
    }
    // Racing selection: entries riding weak schedules are evicted here.
    *pool = gp::select_topk(std::mem::take(pool), ctx.cfg.pool_size);
    let stats = round_stats(round, pool);
    for entry in pool.iter_mut() {
        freeze_equation(entry, ctx.cfg);
    }
    Some(stats)
}

/// Racing over schedules (the main algorithm).
pub fn racing_run(
    spec: &BenchmarkSpec,
    cfg: &RacingConfig,
    exec: Executor,
    deadline: Option<Instant>,
) -> Result<RunOutcome, RunError> {
    cfg.validate()?;
    Ok(Engine::new(spec.clone(), cfg, exec, deadline).run(Mode::Racing))
}

/// Control-variable GP along one fixed, complete schedule.
pub fn cvgp_run(
    spec: &BenchmarkSpec,
    cfg: &RacingConfig,
    schedule: &Schedule,
    exec: Executor,
    deadline: Option<Instant>,
) -> Result<RunOutcome, RunError> {
    cfg.validate()?;
    if !schedule.is_complete(spec.n_vars) {
        return Err(ScheduleError::Incomplete(spec.n_vars).into());
    }
    Ok(Engine::new(spec.clone(), cfg, exec, deadline).run(Mode::Fixed(schedule.clone())))
}

/// Plain GP: one uncontrolled round with the whole generation budget
/// (`n x generations`).
pub fn gp_baseline_run(
    spec: &BenchmarkSpec,
    cfg: &RacingConfig,
    exec: Executor,
    deadline: Option<Instant>,
) -> Result<RunOutcome, RunError> {
    cfg.validate()?;
    Ok(Engine::new(spec.clone(), cfg, exec, deadline).run(Mode::SingleRound))
}

struct Engine<'a> {
    cfg: &'a RacingConfig,
    exec: Executor,
    deadline: Option<Instant>,
    oracle: Oracle,
    rng: ChaCha8Rng,
    fit_calls: u64,
    hof_refits: u64,
    next_id: u64,
    timed_out: bool,
}

impl<'a> Engine<'a> {
    fn new(
        spec: BenchmarkSpec,
        cfg: &'a RacingConfig,
        exec: Executor,
        deadline: Option<Instant>,
    ) -> Engine<'a> {
        let oracle = Oracle::new(spec, cfg.seed);
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x656e67));
        Engine {
            cfg,
            exec,
            deadline,
            oracle,
            rng,
            fit_calls: 0,
            hof_refits: 0,
            next_id: 0,
            timed_out: false,
        }
    }

    fn expired(&self) -> bool {
        self.deadline.is_some_and(|d| Instant::now() >= d)
    }

    fn ctx<'b>(&'b mut self) -> GpCtx<'b> {
        GpCtx {
            oracle: &mut self.oracle,
            cfg: self.cfg,
            exec: self.exec,
            rng: &mut self.rng,
            deadline: self.deadline,
            fit_calls: &mut self.fit_calls,
            next_id: &mut self.next_id,
        }
    }

    /// Seed one control-set group with random single-free-variable trees,
    /// fit them, and evolve the group briefly.
    fn build_group(
        &mut self,
        free: &BTreeSet<usize>,
        control: BTreeSet<usize>,
        count: usize,
    ) -> Vec<PoolEntry> {
        let mut ctx = self.ctx();
        let (group, completed) = seed_and_evolve_group(free, control, count, &mut ctx);
        if !completed {
            self.timed_out = true;
        }
        group
    }

    /// Lines 3-7: one group per variable, everything else controlled.
    fn build_racing_pool(&mut self) -> Vec<PoolEntry> {
        let n = self.oracle.spec().n_vars;
        let per_group = self.cfg.pool_size.div_ceil(n);
        let mut pool = Vec::new();
        for i in 0..n {
            if self.timed_out || self.expired() {
                self.timed_out = true;
                break;
            }
            let control: BTreeSet<usize> = (0..n).filter(|&v| v != i).collect();
            let free: BTreeSet<usize> = [i].into_iter().collect();
            pool.extend(self.build_group(&free, control, per_group));
        }
        pool
    }

    fn run(mut self, mode: Mode) -> RunOutcome {
        let started = Instant::now();
        let n = self.oracle.spec().n_vars;
        let mut hof = HallOfFame::new(self.cfg.hof_capacity);

        let mut pool = match &mode {
            Mode::Racing => self.build_racing_pool(),
            Mode::Fixed(schedule) => {
                let control = schedule.rounds()[0].clone();
                let free: BTreeSet<usize> = (0..n).filter(|v| !control.contains(v)).collect();
                self.build_group(&free, control, self.cfg.pool_size)
            }
            Mode::SingleRound => {
                let free: BTreeSet<usize> = (0..n).collect();
                self.build_group(&free, BTreeSet::new(), self.cfg.pool_size)
            }
        };

        let (n_rounds, gens_per_round) = match &mode {
            Mode::SingleRound => (1, n * self.cfg.generations),
            _ => (n, self.cfg.generations),
        };

        let mut rounds = Vec::with_capacity(n_rounds);
        for round in 0..n_rounds {
            if self.timed_out || self.expired() {
                self.timed_out = true;
                break;
            }
            let mut ctx = self.ctx();
            match race_round(&mut pool, &mut hof, gens_per_round, round, &mut ctx) {
                Some(stats) => rounds.push(stats),
                None => {
                    self.timed_out = true;
                    break;
                }
            }

            match &mode {
                Mode::Racing => extend_schedules(&mut pool, &mut self.rng),
                Mode::Fixed(schedule) => {
                    if round + 1 < schedule.rounds().len() {
                        let next = schedule.rounds()[round + 1].clone();
                        for entry in pool.iter_mut() {
                            entry.control_set = next.clone();
                            entry
                                .schedule
                                .append(next.clone())
                                .expect("fixed schedule is a valid chain");
                            entry.result = None;
                        }
                    }
                }
                Mode::SingleRound => {}
            }
        }

        self.finalize(started, hof, pool, rounds)
    }

    fn finalize(
        mut self,
        started: Instant,
        hof: HallOfFame,
        pool: Vec<PoolEntry>,
        rounds: Vec<RoundStats>,
    ) -> RunOutcome {
        let test_batch = self.oracle.sample_test(self.cfg.test_size);
        let train_hof: Vec<TrainHofLine> = hof
            .entries()
            .iter()
            .map(|e| TrainHofLine {
                expr: e.tree.to_canonical(),
                fitness: e.fitness,
                schedule: e.schedule.clone(),
            })
            .collect();

        let mut equations = Vec::new();
        if !self.timed_out {
            // Candidates: the archive plus the final-round survivors. Archive
            // fitness is measured under each entry's own control regime, so
            // early-round entries carry inflated scores and would otherwise
            // crowd the final round's uncontrolled solutions out entirely.
            let mut candidates: Vec<gp::HofEntry> = hof.entries().to_vec();
            let mut seen: std::collections::BTreeSet<String> = candidates
                .iter()
                .map(|e| e.tree.to_canonical())
                .collect();
            for entry in &pool {
                if entry.result.is_none() {
                    continue;
                }
                if seen.insert(entry.tree.to_canonical()) {
                    candidates.push(gp::HofEntry {
                        tree: entry.tree.clone(),
                        fitness: entry.scalar_fitness(),
                        schedule: entry.schedule.clone(),
                        control_set: entry.control_set.clone(),
                        stamp: u64::MAX,
                    });
                }
            }

            // Refit each candidate on one fresh uncontrolled batch, then
            // score it on the shared held-out batch.
            let mut jobs = Vec::new();
            for entry in candidates {
                let batch = self
                    .oracle
                    .sample(&BTreeSet::new(), 1, self.cfg.batch_size)
                    .pop()
                    .expect("k = 1 batch");
                jobs.push((entry, batch, self.rng.gen::<u64>()));
                self.hof_refits += 1;
            }
            let optimizer = self.cfg.optimizer;
            let restarts = self.cfg.restarts;
            let fitted = self.exec.map(jobs, |(entry, batch, seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let result = optimize(&entry.tree, &[batch], optimizer, restarts, &mut rng);
                (entry, result.constants.into_iter().next().unwrap_or_default())
            });
            for (entry, constants) in fitted {
                let test_nmse = nmse_on_batch(&entry.tree, &constants, &test_batch);
                equations.push(ScoredEquation {
                    tree: entry.tree.clone(),
                    constants,
                    train_fitness: entry.fitness,
                    test_nmse,
                    schedule: entry.schedule.clone(),
                });
            }
            equations.sort_by(|a, b| a.test_nmse.total_cmp(&b.test_nmse));
            equations.truncate(self.cfg.hof_capacity);
        }

        let report = RunReport {
            wall_s: started.elapsed().as_secs_f64(),
            train_rows: self.oracle.train_rows(),
            test_rows: self.oracle.test_rows(),
            fit_calls: self.fit_calls,
            hof_refits: self.hof_refits,
            genetic_ops: rounds.len() as u64 * self.cfg.genetic_ops_per_round(),
            rounds,
            train_hof,
            timed_out: self.timed_out,
        };
        RunOutcome {
            equations,
            test_batch,
            report,
        }
    }
}

fn round_stats(round: usize, pool: &[PoolEntry]) -> RoundStats {
    let mut counts: std::collections::BTreeMap<BTreeSet<usize>, usize> =
        std::collections::BTreeMap::new();
    for entry in pool {
        *counts.entry(entry.control_set.clone()).or_default() += 1;
    }
    let mut survivors: Vec<(BTreeSet<usize>, usize)> = counts.into_iter().collect();
    survivors.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let best = pool
        .iter()
        .map(PoolEntry::scalar_fitness)
        .fold(f64::NEG_INFINITY, f64::max);
    RoundStats {
        round,
        survivors,
        best_train_fitness: best,
    }
}

/// Test NMSE of a tree with fixed constants on a batch; non-finite
/// predictions and degenerate targets score as infinitely bad.
pub fn nmse_on_batch(tree: &ExpressionTree, constants: &[f64], batch: &TrialBatch) -> f64 {
    let mut eval = crate::expr::BatchEvaluator::new(tree, &batch.columns, batch.len());
    let mse = eval.mse(constants, &batch.outputs);
    let var = batch.output_variance();
    if var > 0.0 {
        mse / var
    } else if mse == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}
