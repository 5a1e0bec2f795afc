//! The genetic-programming subroutine over schedule-tagged pools.
//!
//! Every pool entry carries the (partial) experiment schedule that produced
//! it and the control set of its current round. Mutation inserts material
//! referencing only the entry's free variables; mating is restricted to
//! parents with identical control sets. Frozen nodes are never edited or
//! deleted: a frozen subtree can only move wholesale during a crossover.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::exec::Executor;
use crate::expr::{self, ExpressionTree, Node, NodeKind, OperatorSet};
use crate::fit::{optimize, TrialResult};
use crate::oracle::{Oracle, TrialBatch};
use crate::racing::{RacingConfig, Schedule};

/// Depth of the full tree used when a leaf is rewritten.
const LEAF_REPLACE_DEPTH: usize = 3;
/// Depth of the filler material created by an insertion.
const INSERT_DEPTH: usize = 2;

/// One candidate expression with its trial results and schedule tag.
#[derive(Debug, Clone)]
pub struct PoolEntry {
    /// Creation order; ties in selection fall back to older entries.
    pub id: u64,
    pub tree: ExpressionTree,
    /// Fresh trial results for the current tree; `None` after any edit.
    pub result: Option<TrialResult>,
    pub schedule: Schedule,
    pub control_set: BTreeSet<usize>,
}

impl PoolEntry {
    pub fn scalar_fitness(&self) -> f64 {
        self.result
            .as_ref()
            .map(TrialResult::scalar_fitness)
            .unwrap_or(f64::NEG_INFINITY)
    }

    pub fn free_set(&self, n_vars: usize) -> BTreeSet<usize> {
        (0..n_vars)
            .filter(|v| !self.control_set.contains(v))
            .collect()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MateError {
    #[error("mating requires identical control sets")]
    ControlSetMismatch,
}

fn contains_frozen(node: &Node) -> bool {
    !node.editable || node.children.iter().any(contains_frozen)
}

fn editable_paths(tree: &ExpressionTree) -> Vec<Vec<usize>> {
    tree.paths()
        .into_iter()
        .filter(|p| tree.node_at(p).is_some_and(|n| n.editable))
        .collect()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum MutationKind {
    ReplaceLeaf,
    SameArity,
    Insert,
    Delete,
}

/// Apply one of the four edit kinds, chosen uniformly among the applicable
/// ones. Frozen nodes are never modified or deleted; a fully frozen tree
/// comes back unchanged. Edits that would exceed `max_nodes` are retried
/// once, then skipped.
pub fn mutate<R: Rng + ?Sized>(
    tree: &ExpressionTree,
    op_set: &OperatorSet,
    free_vars: &BTreeSet<usize>,
    max_nodes: usize,
    rng: &mut R,
) -> ExpressionTree {
    if free_vars.is_empty() {
        return tree.clone();
    }
    let vars: Vec<usize> = free_vars.iter().copied().collect();
    let n_vars = tree.n_vars();

    let mut leaf_paths = Vec::new();
    let mut arity_paths = Vec::new();
    let mut insert_paths = Vec::new();
    let mut delete_options = Vec::new();
    for path in tree.paths() {
        let node = tree.node_at(&path).expect("path from the same tree");
        if !node.editable {
            continue;
        }
        insert_paths.push(path.clone());
        if node.is_leaf() {
            leaf_paths.push(path.clone());
            arity_paths.push(path.clone());
        } else {
            match node.kind {
                NodeKind::Binary(_) if op_set.binary.len() >= 2 => arity_paths.push(path.clone()),
                NodeKind::Unary(_) if op_set.unary.len() >= 2 => arity_paths.push(path.clone()),
                _ => {}
            }
            match node.children.len() {
                1 => delete_options.push((path.clone(), 0)),
                2 => {
                    if !contains_frozen(&node.children[1]) {
                        delete_options.push((path.clone(), 0));
                    }
                    if !contains_frozen(&node.children[0]) {
                        delete_options.push((path.clone(), 1));
                    }
                }
                _ => {}
            }
        }
    }

    let mut kinds = Vec::with_capacity(4);
    if !leaf_paths.is_empty() {
        kinds.push(MutationKind::ReplaceLeaf);
    }
    if !arity_paths.is_empty() {
        kinds.push(MutationKind::SameArity);
    }
    if !insert_paths.is_empty() {
        kinds.push(MutationKind::Insert);
    }
    if !delete_options.is_empty() {
        kinds.push(MutationKind::Delete);
    }
    if kinds.is_empty() {
        return tree.clone();
    }
    let kind = kinds[rng.gen_range(0..kinds.len())];

    for _attempt in 0..2 {
        let mut out = tree.clone();
        match kind {
            MutationKind::ReplaceLeaf => {
                let path = &leaf_paths[rng.gen_range(0..leaf_paths.len())];
                let repl = expr::random_tree(free_vars, op_set, LEAF_REPLACE_DEPTH, n_vars, rng);
                out.replace_at(path, repl.root().clone());
            }
            MutationKind::SameArity => {
                let path = &arity_paths[rng.gen_range(0..arity_paths.len())];
                let node = out.node_at_mut(path).expect("path valid");
                match node.kind.clone() {
                    NodeKind::Binary(op) => {
                        let alts: Vec<_> =
                            op_set.binary.iter().copied().filter(|o| *o != op).collect();
                        node.kind = NodeKind::Binary(alts[rng.gen_range(0..alts.len())]);
                    }
                    NodeKind::Unary(op) => {
                        let alts: Vec<_> =
                            op_set.unary.iter().copied().filter(|o| *o != op).collect();
                        node.kind = NodeKind::Unary(alts[rng.gen_range(0..alts.len())]);
                    }
                    _ => {
                        // Leaf: swap to a different leaf over the free set.
                        let mut leaf = expr::random_leaf(&vars, rng);
                        for _ in 0..8 {
                            if leaf.kind != node.kind {
                                break;
                            }
                            leaf = expr::random_leaf(&vars, rng);
                        }
                        node.kind = leaf.kind;
                    }
                }
                out.renumber_slots();
            }
            MutationKind::Insert => {
                let path = &insert_paths[rng.gen_range(0..insert_paths.len())];
                let old = out.node_at(path).expect("path valid").clone();
                let pick = rng.gen_range(0..op_set.len());
                let inserted = if pick < op_set.binary.len() {
                    let op = op_set.binary[pick];
                    let filler =
                        expr::random_tree(free_vars, op_set, INSERT_DEPTH, n_vars, rng);
                    if rng.gen_bool(0.5) {
                        Node::binary(op, old, filler.root().clone())
                    } else {
                        Node::binary(op, filler.root().clone(), old)
                    }
                } else {
                    Node::unary(op_set.unary[pick - op_set.binary.len()], old)
                };
                out.replace_at(path, inserted);
            }
            MutationKind::Delete => {
                let (path, keep) = &delete_options[rng.gen_range(0..delete_options.len())];
                let child = out.node_at(path).expect("path valid").children[*keep].clone();
                out.replace_at(path, child);
            }
        }
        if out.node_count() <= max_nodes {
            return out;
        }
    }
    tree.clone()
}

/// Exchange one editable subtree between two entries with the same control
/// set. Offspring inherit their host's identity, schedule and control set;
/// results are invalidated. The parent pair is ordered internally by a
/// deterministic key, so `mate(a, b)` and `mate(b, a)` produce the same
/// unordered offspring under the same seed.
pub fn mate<R: Rng + ?Sized>(
    a: &PoolEntry,
    b: &PoolEntry,
    max_nodes: usize,
    rng: &mut R,
) -> Result<(PoolEntry, PoolEntry), MateError> {
    if a.control_set != b.control_set {
        return Err(MateError::ControlSetMismatch);
    }
    let (ta, tb) = crossover(&a.tree, &b.tree, max_nodes, rng);
    let child = |host: &PoolEntry, tree: ExpressionTree| PoolEntry {
        id: host.id,
        tree,
        result: None,
        schedule: host.schedule.clone(),
        control_set: host.control_set.clone(),
    };
    Ok((child(a, ta), child(b, tb)))
}

fn crossover<R: Rng + ?Sized>(
    a: &ExpressionTree,
    b: &ExpressionTree,
    max_nodes: usize,
    rng: &mut R,
) -> (ExpressionTree, ExpressionTree) {
    let swapped = a.masked_key() > b.masked_key();
    let (first, second) = if swapped { (b, a) } else { (a, b) };
    let pf = editable_paths(first);
    let ps = editable_paths(second);
    if pf.is_empty() || ps.is_empty() {
        return (a.clone(), b.clone());
    }
    for _attempt in 0..2 {
        let i = rng.gen_range(0..pf.len());
        let j = rng.gen_range(0..ps.len());
        let sub_f = first.node_at(&pf[i]).expect("path valid").clone();
        let sub_s = second.node_at(&ps[j]).expect("path valid").clone();
        let mut nf = first.clone();
        nf.replace_at(&pf[i], sub_s);
        let mut ns = second.clone();
        ns.replace_at(&ps[j], sub_f);
        if nf.node_count() <= max_nodes && ns.node_count() <= max_nodes {
            return if swapped { (ns, nf) } else { (nf, ns) };
        }
    }
    (a.clone(), b.clone())
}

/// Keep the `k` entries with the largest mean fitness; ties prefer smaller
/// trees, then earlier insertion.
pub fn select_topk(mut entries: Vec<PoolEntry>, k: usize) -> Vec<PoolEntry> {
    entries.sort_by(compare_entries);
    entries.truncate(k);
    entries
}

fn compare_entries(a: &PoolEntry, b: &PoolEntry) -> std::cmp::Ordering {
    b.scalar_fitness()
        .total_cmp(&a.scalar_fitness())
        .then_with(|| a.tree.node_count().cmp(&b.tree.node_count()))
        .then_with(|| a.id.cmp(&b.id))
}

/// Survivor selection for the generation loop: like `select_topk`, but a
/// canonical form may repeat only once the distinct forms run out, which
/// keeps a pool from collapsing into copies of one expression.
fn select_survivors(mut entries: Vec<PoolEntry>, k: usize) -> Vec<PoolEntry> {
    entries.sort_by(compare_entries);
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut unique = Vec::new();
    let mut rest = Vec::new();
    for entry in entries {
        let key = entry.tree.to_canonical();
        match seen.get(&key) {
            None => {
                seen.insert(key, 1);
                unique.push(entry);
            }
            Some(_) => rest.push(entry),
        }
    }
    if unique.len() < k {
        unique.extend(rest.into_iter().take(k - unique.len()));
        unique.sort_by(compare_entries);
    }
    unique.truncate(k);
    unique
}

/// Archive entry: the expression at the time it entered, with its mean
/// training fitness and schedule tag.
#[derive(Debug, Clone)]
pub struct HofEntry {
    pub tree: ExpressionTree,
    pub fitness: f64,
    pub schedule: Schedule,
    pub control_set: BTreeSet<usize>,
    pub(crate) stamp: u64,
}

/// Capped best-so-far archive, deduplicated by canonical serialization.
#[derive(Debug, Clone)]
pub struct HallOfFame {
    capacity: usize,
    entries: Vec<HofEntry>,
    next_stamp: u64,
}

impl HallOfFame {
    pub fn new(capacity: usize) -> HallOfFame {
        HallOfFame {
            capacity,
            entries: Vec::new(),
            next_stamp: 0,
        }
    }

    pub fn entries(&self) -> &[HofEntry] {
        &self.entries
    }

    pub fn best_fitness(&self) -> Option<f64> {
        self.entries.first().map(|e| e.fitness)
    }

    /// Merge the pool in: TopK(pool + hof) under canonical-form dedup.
    pub fn update(&mut self, pool: &[PoolEntry]) {
        let mut by_key: BTreeMap<String, HofEntry> = self
            .entries
            .drain(..)
            .map(|e| (e.tree.to_canonical(), e))
            .collect();
        for entry in pool {
            let Some(result) = &entry.result else { continue };
            let fitness = result.scalar_fitness();
            let key = entry.tree.to_canonical();
            let stamp = self.next_stamp;
            match by_key.get_mut(&key) {
                Some(existing) => {
                    if fitness > existing.fitness {
                        existing.fitness = fitness;
                        existing.tree = entry.tree.clone();
                        existing.schedule = entry.schedule.clone();
                        existing.control_set = entry.control_set.clone();
                    }
                }
                None => {
                    self.next_stamp += 1;
                    by_key.insert(
                        key,
                        HofEntry {
                            tree: entry.tree.clone(),
                            fitness,
                            schedule: entry.schedule.clone(),
                            control_set: entry.control_set.clone(),
                            stamp,
                        },
                    );
                }
            }
        }
        let mut merged: Vec<HofEntry> = by_key.into_values().collect();
        merged.sort_by(|a, b| {
            b.fitness
                .total_cmp(&a.fitness)
                .then_with(|| a.tree.node_count().cmp(&b.tree.node_count()))
                .then_with(|| a.stamp.cmp(&b.stamp))
        });
        merged.truncate(self.capacity);
        self.entries = merged;
    }
}

/// Shared context for a GP run: the data source, configuration, executor and
/// the coordinator RNG every stochastic choice flows from.
pub struct GpCtx<'a> {
    pub oracle: &'a mut Oracle,
    pub cfg: &'a RacingConfig,
    pub exec: Executor,
    pub rng: &'a mut ChaCha8Rng,
    pub deadline: Option<Instant>,
    pub fit_calls: &'a mut u64,
    /// Id source for offspring entries.
    pub next_id: &'a mut u64,
}


impl GpCtx<'_> {
    fn expired(&self) -> bool {
        self.deadline.is_some_and(|d| Instant::now() >= d)
    }

    pub(crate) fn fresh_id(&mut self) -> u64 {
        let id = *self.next_id;
        *self.next_id += 1;
        id
    }
}

struct FitJob {
    idx: usize,
    tree: ExpressionTree,
    batches: Vec<TrialBatch>,
    seed: u64,
}

fn run_fit_jobs(pool: &mut [PoolEntry], jobs: Vec<FitJob>, ctx: &mut GpCtx) {
    *ctx.fit_calls += jobs.len() as u64;
    let optimizer = ctx.cfg.optimizer;
    let restarts = ctx.cfg.restarts;
    let results = ctx.exec.map(jobs, |job| {
        let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
        let result = optimize(&job.tree, &job.batches, optimizer, restarts, &mut rng);
        (job.idx, result)
    });
    for (idx, result) in results {
        pool[idx].result = Some(result);
    }
}

/// Fit every listed entry on fresh batches from its own control set.
pub(crate) fn refit_entries(pool: &mut [PoolEntry], indices: &[usize], ctx: &mut GpCtx) {
    let mut jobs = Vec::with_capacity(indices.len());
    for &idx in indices {
        let batches = ctx
            .oracle
            .sample(&pool[idx].control_set, ctx.cfg.trials, ctx.cfg.batch_size);
        jobs.push(FitJob {
            idx,
            tree: pool[idx].tree.clone(),
            batches,
            seed: ctx.rng.gen(),
        });
    }
    run_fit_jobs(pool, jobs, ctx);
}

/// Run `generations` of mutation, control-set-restricted mating,
/// hall-of-fame updates and survivor selection.
///
/// Variation is elitist: offspring are fitted copies and compete with their
/// parents, then the pool is truncated back to its incoming size by fitness
/// (the selection step that carries the highest-fitness expressions into the
/// next generation). Every offspring is fitted on fresh batches from its own
/// control set before ranking. Returns false if the deadline expired.
pub fn gp_run(
    pool: &mut Vec<PoolEntry>,
    hof: &mut HallOfFame,
    generations: usize,
    ctx: &mut GpCtx,
) -> bool {
    let n_vars = ctx.oracle.spec().n_vars;
    let op_set = ctx.oracle.spec().op_set.clone();
    let capacity = pool.len();
    for _gen in 0..generations {
        if ctx.expired() {
            return false;
        }

        // Mutation offspring.
        let mut offspring = Vec::new();
        let mut jobs = Vec::new();
        for parent in pool.iter() {
            if !ctx.rng.gen_bool(ctx.cfg.p_mutate) {
                continue;
            }
            let free = parent.free_set(n_vars);
            let tree = mutate(&parent.tree, &op_set, &free, ctx.cfg.max_tree_nodes, ctx.rng);
            if tree == parent.tree {
                // Nothing was applicable (or the edit was skipped at the
                // size cap); a literal copy of the parent adds nothing.
                continue;
            }
            let child = PoolEntry {
                id: ctx.fresh_id(),
                tree,
                result: None,
                schedule: parent.schedule.clone(),
                control_set: parent.control_set.clone(),
            };
            let batches =
                ctx.oracle
                    .sample(&child.control_set, ctx.cfg.trials, ctx.cfg.batch_size);
            jobs.push(FitJob {
                idx: offspring.len(),
                tree: child.tree.clone(),
                batches,
                seed: ctx.rng.gen(),
            });
            offspring.push(child);
        }
        run_fit_jobs(&mut offspring, jobs, ctx);

        if ctx.expired() {
            return false;
        }

        // Mating offspring: group parents by control set, shuffle, pair
        // adjacent entries.
        let mut groups: BTreeMap<BTreeSet<usize>, Vec<usize>> = BTreeMap::new();
        for (idx, entry) in pool.iter().enumerate() {
            groups.entry(entry.control_set.clone()).or_default().push(idx);
        }
        let mut jobs = Vec::new();
        for (_, mut idxs) in groups {
            idxs.shuffle(ctx.rng);
            for pair in idxs.chunks_exact(2) {
                if !ctx.rng.gen_bool(ctx.cfg.p_mate) {
                    continue;
                }
                let (ca, cb) = mate(
                    &pool[pair[0]],
                    &pool[pair[1]],
                    ctx.cfg.max_tree_nodes,
                    ctx.rng,
                )
                .expect("same group implies same control set");
                if ca.tree == pool[pair[0]].tree && cb.tree == pool[pair[1]].tree {
                    continue;
                }
                for mut child in [ca, cb] {
                    child.id = ctx.fresh_id();
                    let batches = ctx.oracle.sample(
                        &child.control_set,
                        ctx.cfg.trials,
                        ctx.cfg.batch_size,
                    );
                    jobs.push(FitJob {
                        idx: offspring.len(),
                        tree: child.tree.clone(),
                        batches,
                        seed: ctx.rng.gen(),
                    });
                    offspring.push(child);
                }
            }
        }
        run_fit_jobs(&mut offspring, jobs, ctx);

        pool.append(&mut offspring);
        hof.update(pool);
        *pool = select_survivors(std::mem::take(pool), capacity);
    }
    true
}

#[cfg(test)]
mod tests;
