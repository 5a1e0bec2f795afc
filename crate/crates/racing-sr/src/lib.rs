//! Symbolic regression by genetic programming over control-variable experiments.
//!
//! The search runs a sequence of experiment rounds. In each round some input
//! variables are held fixed ("controlled") so the ground truth collapses to a
//! reduced form over the free variables, which is far easier to recover. A
//! schedule decides the order in which variables are released; instead of
//! committing to one schedule a priori, the racing engine grows many schedules
//! at once and lets ordinary fitness selection starve the unpromising ones.
//!
//! Crate layout:
//!
//! * [`expr`] — expression trees: parsing, evaluation, structural queries.
//! * [`oracle`] — benchmark definitions and the controlled-data oracle.
//! * [`fit`] — constant fitting (Nelder-Mead, BFGS, CG, basin hopping).
//! * [`gp`] — the genetic-programming subroutine over schedule-tagged pools.
//! * [`racing`] — the racing engine plus fixed-schedule and plain-GP baselines.
//! * [`bench`] — metrics, suite runner, all-schedules baseline, result files.
//! * [`suites`] — built-in benchmark suites.
//! * [`exec`] — data-parallel map with a sequential fallback.

pub mod bench;
pub mod exec;
pub mod expr;
pub mod fit;
pub mod gp;
pub mod oracle;
pub mod racing;
pub mod suites;

pub use exec::Executor;
pub use expr::{ExpressionTree, OperatorSet};
pub use oracle::{BenchmarkSpec, Oracle, TrialBatch};
pub use racing::{RacingConfig, RunOutcome, Schedule};

/// Stable 64-bit mix used wherever the engine derives child seeds.
///
/// This is the `splitmix64` finalizer; it must never change, or seeded runs
/// stop being reproducible across versions.
pub(crate) fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent seed from a base seed and a tag.
pub(crate) fn derive_seed(base: u64, tag: u64) -> u64 {
    mix_seed(base ^ mix_seed(tag))
}
