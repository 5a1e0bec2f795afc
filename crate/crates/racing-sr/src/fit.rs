//! Fitting open constants of an expression to controlled data batches.
//!
//! Each batch is fitted independently (the freeze test needs per-trial
//! constant values). The loss is the batch NMSE, minimized over the open
//! constants by one of three local derivative-free/finite-difference methods
//! or by basin hopping on top of BFGS. Gradients are central finite
//! differences; trees are never differentiated.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::expr::{BatchEvaluator, ExpressionTree};
use crate::oracle::TrialBatch;

/// Iteration cap per local solve.
const MAX_ITERS: usize = 500;
/// Stop when one iteration improves the objective by less than this.
const DECREASE_TOL: f64 = 1e-8;
/// Gradient-norm stopping threshold.
const GRAD_TOL: f64 = 1e-10;
/// A batch loss this small is treated as an exact fit; remaining restarts
/// are skipped.
const PERFECT_LOSS: f64 = 1e-13;
/// Basin-hopping defaults used when fitting expressions.
const DEFAULT_HOPS: usize = 5;
const DEFAULT_STEP_SCALE: f64 = 1.0;
/// Attempts to find a finite starting point per restart.
const X0_ATTEMPTS: usize = 20;

/// Optimizer selected on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerId {
    NelderMead,
    Bfgs,
    Cg,
    BasinHopping,
}

impl OptimizerId {
    pub const ALL: [OptimizerId; 4] = [
        OptimizerId::NelderMead,
        OptimizerId::Bfgs,
        OptimizerId::Cg,
        OptimizerId::BasinHopping,
    ];

    pub fn token(self) -> &'static str {
        match self {
            OptimizerId::NelderMead => "nelder-mead",
            OptimizerId::Bfgs => "bfgs",
            OptimizerId::Cg => "cg",
            OptimizerId::BasinHopping => "basin-hopping",
        }
    }
}

impl fmt::Display for OptimizerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for OptimizerId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OptimizerId::ALL
            .into_iter()
            .find(|o| o.token() == s)
            .ok_or_else(|| format!("unknown optimizer `{s}` (expected nelder-mead|bfgs|cg|basin-hopping)"))
    }
}

/// The purely local methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalMethod {
    NelderMead,
    BfgsFd,
    CgFd,
}

/// Per-expression fit over K trials: one fitness value and one row of
/// best-fit constants per batch. Fitness is the negative batch NMSE; batches
/// where no finite fit exists get `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub fitness: Vec<f64>,
    pub constants: Vec<Vec<f64>>,
}

impl TrialResult {
    /// Ranking fitness: mean over the K trials.
    pub fn scalar_fitness(&self) -> f64 {
        if self.fitness.is_empty() {
            return f64::NEG_INFINITY;
        }
        self.fitness.iter().sum::<f64>() / self.fitness.len() as f64
    }

    /// Losses (NMSE per trial), the negation of the fitness vector.
    pub fn losses(&self) -> impl Iterator<Item = f64> + '_ {
        self.fitness.iter().map(|f| -f)
    }
}

/// Diagnostic counters for the fitting hot path, collected only while the
/// `RACING_SR_FIT_STATS` environment flag is set.
pub mod stats {
    use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

    pub static ENABLED: AtomicBool = AtomicBool::new(false);
    pub static CALLS: AtomicU64 = AtomicU64::new(0);
    pub static NANOS: AtomicU64 = AtomicU64::new(0);
    pub static LINEAR_CALLS: AtomicU64 = AtomicU64::new(0);
    pub static NODES: AtomicU64 = AtomicU64::new(0);
    pub static CONSTS: AtomicU64 = AtomicU64::new(0);
    pub static SLOW_CALLS: AtomicU64 = AtomicU64::new(0);
    pub static SLOW_NANOS: AtomicU64 = AtomicU64::new(0);

    pub fn init_from_env() {
        ENABLED.store(
            std::env::var("RACING_SR_FIT_STATS").is_ok(),
            Ordering::Relaxed,
        );
    }

    pub fn report() -> String {
        let calls = CALLS.load(Ordering::Relaxed).max(1);
        format!(
            "calls {} (linear {}) avg {:.2}ms avg_nodes {:.1} avg_L {:.1} slow(>20ms) {} taking {:.1}s",
            CALLS.load(Ordering::Relaxed),
            LINEAR_CALLS.load(Ordering::Relaxed),
            NANOS.load(Ordering::Relaxed) as f64 / calls as f64 / 1e6,
            NODES.load(Ordering::Relaxed) as f64 / calls as f64,
            CONSTS.load(Ordering::Relaxed) as f64 / calls as f64,
            SLOW_CALLS.load(Ordering::Relaxed),
            SLOW_NANOS.load(Ordering::Relaxed) as f64 / 1e9,
        )
    }
}

/// Fit the open constants of `tree` to each batch independently, keeping the
/// best of `restarts` random initializations per batch.
pub fn optimize<R: Rng + ?Sized>(
    tree: &ExpressionTree,
    batches: &[TrialBatch],
    method: OptimizerId,
    restarts: usize,
    rng: &mut R,
) -> TrialResult {
    let n_consts = tree.count_open_constants();
    let restarts = restarts.max(1);
    let mut fitness = Vec::with_capacity(batches.len());
    let mut constants = Vec::with_capacity(batches.len());

    use std::sync::atomic::Ordering::Relaxed;
    let profiling = stats::ENABLED.load(Relaxed);
    let started = profiling.then(std::time::Instant::now);

    let linear = n_consts > 0 && tree.is_linear_in_constants();

    for batch in batches {
        let var_y = batch.output_variance();
        let mut eval = BatchEvaluator::new(tree, &batch.columns, batch.len());
        let y = &batch.outputs;

        if n_consts == 0 {
            let mse = eval.mse(&[], y);
            let l = to_nmse(mse, var_y);
            fitness.push(if l.is_finite() { -l } else { f64::NEG_INFINITY });
            constants.push(Vec::new());
            continue;
        }

        // Affine trees are a convex least-squares problem with one global
        // minimum; solve it exactly instead of iterating from restarts.
        if linear {
            if let Some((x, l)) = linear_fit(&mut eval, y, var_y, n_consts) {
                fitness.push(-l);
                constants.push(x);
                continue;
            }
        }

        let mut loss = move |c: &[f64]| -> f64 { to_nmse(eval.mse(c, y), var_y) };
        let mut best: Option<(Vec<f64>, f64)> = None;
        for _ in 0..restarts {
            let x0 = match finite_start(&mut loss, n_consts, rng) {
                Some(x0) => x0,
                None => continue,
            };
            let (x, f) = match method {
                OptimizerId::NelderMead => local_optimize(&mut loss, &x0, LocalMethod::NelderMead),
                OptimizerId::Bfgs => local_optimize(&mut loss, &x0, LocalMethod::BfgsFd),
                OptimizerId::Cg => local_optimize(&mut loss, &x0, LocalMethod::CgFd),
                OptimizerId::BasinHopping => {
                    basin_hopping(&mut loss, &x0, DEFAULT_HOPS, DEFAULT_STEP_SCALE, rng)
                }
            };
            if best.as_ref().map_or(true, |(_, bf)| f < *bf) {
                best = Some((x, f));
            }
            if best.as_ref().is_some_and(|(_, bf)| *bf <= PERFECT_LOSS) {
                break;
            }
        }
        match best {
            Some((x, f)) if f.is_finite() => {
                fitness.push(-f);
                constants.push(x);
            }
            _ => {
                fitness.push(f64::NEG_INFINITY);
                constants.push(vec![0.0; n_consts]);
            }
        }
    }

    if let Some(started) = started {
        let nanos = started.elapsed().as_nanos() as u64;
        stats::CALLS.fetch_add(1, Relaxed);
        stats::NANOS.fetch_add(nanos, Relaxed);
        stats::NODES.fetch_add(tree.node_count() as u64, Relaxed);
        stats::CONSTS.fetch_add(n_consts as u64, Relaxed);
        if linear {
            stats::LINEAR_CALLS.fetch_add(1, Relaxed);
        }
        if nanos > 20_000_000 {
            stats::SLOW_CALLS.fetch_add(1, Relaxed);
            stats::SLOW_NANOS.fetch_add(nanos, Relaxed);
        }
    }

    TrialResult { fitness, constants }
}

fn to_nmse(mse: f64, var_y: f64) -> f64 {
    if var_y > 0.0 {
        mse / var_y
    } else if mse == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Exact solve of the affine case: evaluating at the unit constant vectors
/// extracts the basis `phi(c) = g0 + sum_j c_j (g_j - g0)`, and the batch
/// NMSE is then an ordinary ridge-stabilized least-squares problem.
fn linear_fit(
    eval: &mut BatchEvaluator,
    y: &[f64],
    var_y: f64,
    n_consts: usize,
) -> Option<(Vec<f64>, f64)> {
    let m = eval.rows();
    let zeros = vec![0.0; n_consts];
    let g0 = eval.eval(&zeros).to_vec();
    if g0.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n_consts);
    let mut unit = zeros;
    for j in 0..n_consts {
        unit[j] = 1.0;
        let gj = eval.eval(&unit);
        if gj.iter().any(|v| !v.is_finite()) {
            return None;
        }
        basis.push(gj.iter().zip(&g0).map(|(a, b)| a - b).collect());
        unit[j] = 0.0;
    }

    // Normal equations with a tiny ridge for collinear bases.
    let l = n_consts;
    let mut ata = vec![0.0; l * l];
    let mut atb = vec![0.0; l];
    for i in 0..l {
        for j in i..l {
            let v = dot(&basis[i], &basis[j]);
            ata[i * l + j] = v;
            ata[j * l + i] = v;
        }
        atb[i] = (0..m).map(|r| basis[i][r] * (y[r] - g0[r])).sum();
    }
    let scale = (0..l).map(|i| ata[i * l + i]).fold(0.0, f64::max);
    let ridge = 1e-12 * scale.max(1e-300);
    for i in 0..l {
        ata[i * l + i] += ridge;
    }
    let x = cholesky_solve(&mut ata, &atb)?;
    if x.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let lsq = to_nmse(eval.mse(&x, y), var_y);
    if !lsq.is_finite() {
        return None;
    }
    Some((x, lsq))
}

/// In-place Cholesky factorization and solve; None if not positive definite.
fn cholesky_solve(a: &mut [f64], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                a[i * n + i] = sum.sqrt();
            } else {
                a[i * n + j] = sum / a[j * n + j];
            }
        }
    }
    // Forward then backward substitution on the lower factor.
    let mut x = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            x[i] -= a[i * n + k] * x[k];
        }
        x[i] /= a[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            x[i] -= a[k * n + i] * x[k];
        }
        x[i] /= a[i * n + i];
    }
    Some(x)
}

fn finite_start<R: Rng + ?Sized>(
    loss: &mut impl FnMut(&[f64]) -> f64,
    n: usize,
    rng: &mut R,
) -> Option<Vec<f64>> {
    for _ in 0..X0_ATTEMPTS {
        let x0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if loss(&x0).is_finite() {
            return Some(x0);
        }
    }
    None
}

/// Minimize `f` from `x0` with the chosen local method. Returns the best
/// point seen; never worse than `f(x0)`.
pub fn local_optimize<F>(f: &mut F, x0: &[f64], method: LocalMethod) -> (Vec<f64>, f64)
where
    F: FnMut(&[f64]) -> f64,
{
    match method {
        LocalMethod::NelderMead => nelder_mead(f, x0),
        LocalMethod::BfgsFd => bfgs(f, x0),
        LocalMethod::CgFd => cg(f, x0),
    }
}

/// Global-ish search: repeated local BFGS solves from Gaussian perturbations
/// of the best point so far. `hops` counts local solves including the first
/// (so `hops = 1` is exactly `local_optimize`). Best-so-far is monotone.
pub fn basin_hopping<F, R>(
    f: &mut F,
    x0: &[f64],
    hops: usize,
    step_scale: f64,
    rng: &mut R,
) -> (Vec<f64>, f64)
where
    F: FnMut(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    assert!(hops >= 1);
    let (mut best_x, mut best_f) = local_optimize(f, x0, LocalMethod::BfgsFd);
    for _ in 1..hops {
        let cand: Vec<f64> = best_x
            .iter()
            .map(|&x| x + step_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if !f(&cand).is_finite() {
            continue;
        }
        let (x, fv) = local_optimize(f, &cand, LocalMethod::BfgsFd);
        if fv < best_f {
            best_x = x;
            best_f = fv;
        }
    }
    (best_x, best_f)
}

/// Central finite-difference gradient with per-coordinate steps scaled to
/// the iterate; falls back to a one-sided difference next to domain edges.
pub fn central_gradient<F>(f: &mut F, x: &[f64], fx: f64, grad: &mut [f64])
where
    F: FnMut(&[f64]) -> f64,
{
    const H0: f64 = 6.0554544523933395e-6; // cbrt(f64::EPSILON)
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let h = H0 * x[i].abs().max(1.0);
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = if fp.is_finite() && fm.is_finite() {
            (fp - fm) / (2.0 * h)
        } else if fp.is_finite() {
            (fp - fx) / h
        } else if fm.is_finite() {
            (fx - fm) / h
        } else {
            0.0
        };
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Backtracking Armijo line search. Returns the accepted point, or None if
/// no finite decrease was found along the direction.
fn armijo<F>(
    f: &mut F,
    x: &[f64],
    fx: f64,
    dir: &[f64],
    slope: f64,
) -> Option<(Vec<f64>, f64)>
where
    F: FnMut(&[f64]) -> f64,
{
    const C1: f64 = 1e-4;
    let mut t = 1.0;
    let mut cand = vec![0.0; x.len()];
    for _ in 0..40 {
        for i in 0..x.len() {
            cand[i] = x[i] + t * dir[i];
        }
        let fc = f(&cand);
        if fc.is_finite() && fc <= fx + C1 * t * slope {
            return Some((cand, fc));
        }
        t *= 0.5;
    }
    None
}

fn bfgs<F>(f: &mut F, x0: &[f64]) -> (Vec<f64>, f64)
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    if !fx.is_finite() {
        return (x, fx);
    }
    let mut grad = vec![0.0; n];
    central_gradient(f, &x, fx, &mut grad);
    // Inverse Hessian estimate, dense row-major.
    let mut h_inv = identity(n);
    let mut dir = vec![0.0; n];
    let mut first_update = true;

    for _ in 0..MAX_ITERS {
        if norm(&grad) < GRAD_TOL {
            break;
        }
        mat_vec_neg(&h_inv, &grad, &mut dir);
        let mut slope = dot(&dir, &grad);
        if slope >= 0.0 {
            // Fall back to steepest descent when the estimate degenerates.
            h_inv = identity(n);
            for i in 0..n {
                dir[i] = -grad[i];
            }
            slope = dot(&dir, &grad);
            if slope >= 0.0 {
                break;
            }
        }
        let Some((x_new, f_new)) = armijo(f, &x, fx, &dir, slope) else {
            break;
        };
        if fx - f_new < DECREASE_TOL {
            x = x_new;
            fx = f_new;
            break;
        }
        let mut g_new = vec![0.0; n];
        central_gradient(f, &x_new, f_new, &mut g_new);
        let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
        let yv: Vec<f64> = (0..n).map(|i| g_new[i] - grad[i]).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 {
            if first_update {
                // Scale the initial estimate to the problem's curvature.
                let yy = dot(&yv, &yv);
                if yy > 0.0 {
                    let gamma = sy / yy;
                    for i in 0..n {
                        h_inv[i * n + i] = gamma;
                    }
                }
                first_update = false;
            }
            bfgs_update(&mut h_inv, &s, &yv, sy);
        }
        x = x_new;
        fx = f_new;
        grad = g_new;
    }
    (x, fx)
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn mat_vec_neg(m: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    for i in 0..n {
        out[i] = -dot(&m[i * n..(i + 1) * n], v);
    }
}

/// Sherman-Morrison style inverse BFGS update:
/// H <- (I - s y^T / sy) H (I - y s^T / sy) + s s^T / sy.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let mut hy = vec![0.0; n];
    for i in 0..n {
        hy[i] = dot(&h[i * n..(i + 1) * n], y);
    }
    let yhy = dot(y, &hy);
    let rho = 1.0 / sy;
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (s[i] * hy[j] + hy[i] * s[j])
                + rho * rho * s[i] * s[j] * (sy + yhy);
        }
    }
}

fn cg<F>(f: &mut F, x0: &[f64]) -> (Vec<f64>, f64)
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    if !fx.is_finite() {
        return (x, fx);
    }
    let mut grad = vec![0.0; n];
    central_gradient(f, &x, fx, &mut grad);
    let mut dir: Vec<f64> = grad.iter().map(|g| -g).collect();

    for _ in 0..MAX_ITERS {
        let gg = dot(&grad, &grad);
        if gg.sqrt() < GRAD_TOL {
            break;
        }
        let mut slope = dot(&dir, &grad);
        if slope >= 0.0 {
            for i in 0..n {
                dir[i] = -grad[i];
            }
            slope = dot(&dir, &grad);
            if slope >= 0.0 {
                break;
            }
        }
        let Some((x_new, f_new)) = armijo(f, &x, fx, &dir, slope) else {
            break;
        };
        if fx - f_new < DECREASE_TOL {
            x = x_new;
            fx = f_new;
            break;
        }
        let mut g_new = vec![0.0; n];
        central_gradient(f, &x_new, f_new, &mut g_new);
        // Polak-Ribiere+ with automatic reset via the max(0, .) clamp.
        let beta = (dot(&g_new, &g_new) - dot(&g_new, &grad)).max(0.0) / gg;
        for i in 0..n {
            dir[i] = -g_new[i] + beta * dir[i];
        }
        x = x_new;
        fx = f_new;
        grad = g_new;
    }
    (x, fx)
}

fn nelder_mead<F>(f: &mut F, x0: &[f64]) -> (Vec<f64>, f64)
where
    F: FnMut(&[f64]) -> f64,
{
    const ALPHA: f64 = 1.0; // reflection
    const GAMMA: f64 = 2.0; // expansion
    const BETA: f64 = 0.5; // contraction
    const SIGMA: f64 = 0.5; // shrink

    let n = x0.len();
    let eval = |f: &mut F, x: &[f64]| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += 0.1 * x0[i].abs().max(1.0);
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| eval(f, v)).collect();

    for _ in 0..MAX_ITERS {
        // Stable sort keeps the original vertex first among ties, so a flat
        // objective returns x0 unchanged.
        let mut order: Vec<usize> = (0..simplex.len()).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        // Converged only when both the value spread and the simplex itself
        // are small; two vertices straddling a minimum can agree on f while
        // the simplex is still wide.
        if values[n] - values[0] <= DECREASE_TOL {
            let diameter = simplex[1..]
                .iter()
                .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max);
            let scale = 1.0 + simplex[0].iter().map(|x| x.abs()).fold(0.0, f64::max);
            if diameter <= 1e-7 * scale || values[n] == values[0] {
                break;
            }
        }

        let mut centroid = vec![0.0; n];
        for v in &simplex[..n] {
            for i in 0..n {
                centroid[i] += v[i] / n as f64;
            }
        }
        let worst = simplex[n].clone();
        let reflect: Vec<f64> = (0..n)
            .map(|i| centroid[i] + ALPHA * (centroid[i] - worst[i]))
            .collect();
        let fr = eval(f, &reflect);

        if fr < values[0] {
            let expand: Vec<f64> = (0..n)
                .map(|i| centroid[i] + GAMMA * (reflect[i] - centroid[i]))
                .collect();
            let fe = eval(f, &expand);
            if fe < fr {
                simplex[n] = expand;
                values[n] = fe;
            } else {
                simplex[n] = reflect;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = reflect;
            values[n] = fr;
        } else {
            let contract: Vec<f64> = (0..n)
                .map(|i| centroid[i] + BETA * (worst[i] - centroid[i]))
                .collect();
            let fc = eval(f, &contract);
            if fc < values[n] {
                simplex[n] = contract;
                values[n] = fc;
            } else {
                // Shrink every vertex toward the best one.
                let best = simplex[0].clone();
                for v in simplex.iter_mut().skip(1) {
                    for i in 0..n {
                        v[i] = best[i] + SIGMA * (v[i] - best[i]);
                    }
                }
                for k in 1..=n {
                    values[k] = eval(f, &simplex[k]);
                }
            }
        }
    }

    let mut best = 0;
    for k in 1..values.len() {
        if values[k] < values[best] {
            best = k;
        }
    }
    (simplex[best].clone(), values[best])
}
