//! Benchmark definitions and the data oracle.
//!
//! The oracle answers controlled-sampling queries against a ground-truth
//! expression: within one batch every controlled variable is pinned to a
//! single value while free variables are drawn i.i.d. uniform over their
//! declared ranges. Training and test data come from two independent seed
//! streams of the same generator, so held-out data never overlaps training
//! draws. Queries advance the stream, so the engine issues them from a single
//! coordinator and fans only pure evaluation work out.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::expr::{CompiledExpr, ExprError, ExpressionTree, OperatorSet};

/// A ground-truth regression benchmark.
#[derive(Debug, Clone)]
pub struct BenchmarkSpec {
    pub name: String,
    pub n_vars: usize,
    pub truth: ExpressionTree,
    pub op_set: OperatorSet,
    /// Closed sampling interval per variable.
    pub ranges: Vec<(f64, f64)>,
    pub noise_std: f64,
}

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("benchmark `{name}`: {message}")]
    Invalid { name: String, message: String },
    #[error(transparent)]
    Expr(#[from] ExprError),
}

impl BenchmarkSpec {
    pub fn new(
        name: impl Into<String>,
        n_vars: usize,
        truth: ExpressionTree,
        op_set: OperatorSet,
        ranges: Vec<(f64, f64)>,
        noise_std: f64,
    ) -> Result<Self, SpecError> {
        let name = name.into();
        let spec = BenchmarkSpec {
            name,
            n_vars,
            truth,
            op_set,
            ranges,
            noise_std,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<(), SpecError> {
        let fail = |message: String| SpecError::Invalid {
            name: self.name.clone(),
            message,
        };
        if self.n_vars == 0 {
            return Err(fail("n_vars must be at least 1".into()));
        }
        if self.truth.n_vars() != self.n_vars {
            return Err(fail("truth n_vars disagrees with spec".into()));
        }
        if self.truth.count_open_constants() != 0 {
            return Err(fail("ground truth must not contain open constants".into()));
        }
        if self.ranges.len() != self.n_vars {
            return Err(fail(format!(
                "expected {} ranges, got {}",
                self.n_vars,
                self.ranges.len()
            )));
        }
        for (i, (lo, hi)) in self.ranges.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(fail(format!("range_{i} must be a non-degenerate interval")));
            }
        }
        if !(self.noise_std >= 0.0) {
            return Err(fail("noise_std must be >= 0".into()));
        }
        Ok(())
    }

    /// Parse the flat `key = value` benchmark file format.
    pub fn parse_file(text: &str) -> Result<Self, SpecError> {
        let mut name = None;
        let mut n_vars = None;
        let mut expression = None;
        let mut op_set = None;
        let mut noise_std = 0.0;
        let mut ranges: BTreeMap<usize, (f64, f64)> = BTreeMap::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fail = |message: String| SpecError::Format {
                line: lineno + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| fail("expected `key = value`".into()))?;
            let key = key.trim();
            let value = value.trim();
            match key {
                "name" => name = Some(value.to_string()),
                "n_vars" => {
                    n_vars = Some(value.parse::<usize>().map_err(|e| fail(e.to_string()))?)
                }
                "expression" => expression = Some(value.to_string()),
                "op_set" => op_set = Some(OperatorSet::parse(value)?),
                "noise_std" => {
                    noise_std = value.parse::<f64>().map_err(|e| fail(e.to_string()))?
                }
                _ if key.starts_with("range_") => {
                    let idx: usize = key[6..].parse().map_err(|_| {
                        fail(format!("bad range key `{key}`"))
                    })?;
                    let (lo, hi) = value
                        .split_once(',')
                        .ok_or_else(|| fail("range needs `lo,hi`".into()))?;
                    let lo = lo.trim().parse::<f64>().map_err(|e| fail(e.to_string()))?;
                    let hi = hi.trim().parse::<f64>().map_err(|e| fail(e.to_string()))?;
                    ranges.insert(idx, (lo, hi));
                }
                _ => return Err(fail(format!("unknown key `{key}`"))),
            }
        }

        let missing = |what: &str| SpecError::Format {
            line: 0,
            message: format!("missing key `{what}`"),
        };
        let name = name.ok_or_else(|| missing("name"))?;
        let n_vars = n_vars.ok_or_else(|| missing("n_vars"))?;
        let expression = expression.ok_or_else(|| missing("expression"))?;
        let op_set = op_set.ok_or_else(|| missing("op_set"))?;
        let truth = ExpressionTree::parse(&expression, n_vars)?;
        let range_vec: Vec<(f64, f64)> = (0..n_vars)
            .map(|i| ranges.get(&i).copied().ok_or_else(|| missing(&format!("range_{i}"))))
            .collect::<Result<_, _>>()?;
        BenchmarkSpec::new(name, n_vars, truth, op_set, range_vec, noise_std)
    }

    /// Serialize to the benchmark file format (the inverse of `parse_file`).
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "n_vars = {}", self.n_vars);
        let _ = writeln!(s, "expression = {}", self.truth.to_canonical());
        let _ = writeln!(s, "op_set = {}", self.op_set);
        for (i, (lo, hi)) in self.ranges.iter().enumerate() {
            let _ = writeln!(s, "range_{i} = {lo},{hi}");
        }
        let _ = writeln!(s, "noise_std = {}", self.noise_std);
        s
    }
}

/// One controlled data batch.
#[derive(Debug, Clone)]
pub struct TrialBatch {
    /// Column-major inputs: `columns[v][row]`, one column per variable.
    pub columns: Vec<Vec<f64>>,
    pub outputs: Vec<f64>,
    pub control_set: BTreeSet<usize>,
    /// The pinned value for every controlled variable.
    pub control_values: BTreeMap<usize, f64>,
}

impl TrialBatch {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[i]).collect()
    }

    /// Population variance of the outputs.
    pub fn output_variance(&self) -> f64 {
        crate::bench::population_variance(&self.outputs)
    }
}

/// Deterministic data source for one benchmark.
pub struct Oracle {
    spec: BenchmarkSpec,
    truth: CompiledExpr,
    train_rng: ChaCha8Rng,
    test_rng: ChaCha8Rng,
    train_rows: u64,
    test_rows: u64,
}

/// How many redraw passes the oracle makes before giving up on rows whose
/// ground-truth value is not finite (log/div pathologies in the truth).
const RESAMPLE_PASSES: usize = 100;

impl Oracle {
    pub fn new(spec: BenchmarkSpec, seed: u64) -> Oracle {
        let mut train_rng = ChaCha8Rng::seed_from_u64(seed);
        train_rng.set_stream(0);
        let mut test_rng = ChaCha8Rng::seed_from_u64(seed);
        test_rng.set_stream(1);
        let truth = CompiledExpr::compile(&spec.truth);
        Oracle {
            spec,
            truth,
            train_rng,
            test_rng,
            train_rows: 0,
            test_rows: 0,
        }
    }

    pub fn spec(&self) -> &BenchmarkSpec {
        &self.spec
    }

    /// Rows handed out for training queries so far.
    pub fn train_rows(&self) -> u64 {
        self.train_rows
    }

    /// Rows handed out from the held-out stream so far.
    pub fn test_rows(&self) -> u64 {
        self.test_rows
    }

    /// Draw `k` batches of `m` rows with the given variables controlled.
    /// Each batch pins its controlled variables to one fresh value.
    pub fn sample(&mut self, control_set: &BTreeSet<usize>, k: usize, m: usize) -> Vec<TrialBatch> {
        assert!(k >= 1 && m >= 1);
        assert!(
            control_set.iter().all(|&v| v < self.spec.n_vars),
            "control set references unknown variable"
        );
        self.train_rows += (k * m) as u64;
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            let batch = sample_batch(
                &self.spec,
                &self.truth,
                control_set,
                m,
                &mut self.train_rng,
            );
            out.push(batch);
        }
        out
    }

    /// One uncontrolled batch from the independent held-out stream.
    pub fn sample_test(&mut self, m: usize) -> TrialBatch {
        self.test_rows += m as u64;
        sample_batch(
            &self.spec,
            &self.truth,
            &BTreeSet::new(),
            m,
            &mut self.test_rng,
        )
    }
}

fn sample_batch(
    spec: &BenchmarkSpec,
    truth: &CompiledExpr,
    control_set: &BTreeSet<usize>,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> TrialBatch {
    let n = spec.n_vars;
    let mut control_values = BTreeMap::new();
    for &v in control_set {
        let (lo, hi) = spec.ranges[v];
        control_values.insert(v, rng.gen_range(lo..hi));
    }
    let mut columns = vec![vec![0.0; m]; n];
    for v in 0..n {
        if let Some(&val) = control_values.get(&v) {
            columns[v].fill(val);
        } else {
            let (lo, hi) = spec.ranges[v];
            for cell in columns[v].iter_mut() {
                *cell = rng.gen_range(lo..hi);
            }
        }
    }

    let mut outputs = vec![0.0; m];
    truth.eval_columns(&columns, &[], &mut outputs);

    // Redraw free coordinates of rows where the truth itself is undefined.
    for _ in 0..RESAMPLE_PASSES {
        let bad: Vec<usize> = (0..m).filter(|&i| !outputs[i].is_finite()).collect();
        if bad.is_empty() {
            break;
        }
        for &i in &bad {
            for v in 0..n {
                if !control_values.contains_key(&v) {
                    let (lo, hi) = spec.ranges[v];
                    columns[v][i] = rng.gen_range(lo..hi);
                }
            }
        }
        truth.eval_columns(&columns, &[], &mut outputs);
    }

    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).expect("validated noise_std");
        for y in outputs.iter_mut() {
            *y += normal.sample(rng);
        }
    }

    TrialBatch {
        columns,
        outputs,
        control_set: control_set.clone(),
        control_values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(expr: &str, n: usize, noise: f64) -> BenchmarkSpec {
        BenchmarkSpec::new(
            "t",
            n,
            ExpressionTree::parse(expr, n).unwrap(),
            OperatorSet::parse("+,-,*,sin,cos").unwrap(),
            vec![(-5.0, 5.0); n],
            noise,
        )
        .unwrap()
    }

    #[test]
    fn noiseless_outputs_match_truth_exactly() {
        let mut oracle = Oracle::new(spec("x0+x1", 2, 0.0), 3);
        let batches = oracle.sample(&BTreeSet::new(), 3, 64);
        for b in &batches {
            for i in 0..b.len() {
                assert_eq!(b.outputs[i], b.columns[0][i] + b.columns[1][i]);
            }
        }
    }

    #[test]
    fn same_seed_same_query_sequence_is_identical() {
        let control: BTreeSet<usize> = [1].into_iter().collect();
        let mut a = Oracle::new(spec("x0*x1", 2, 0.3), 17);
        let mut b = Oracle::new(spec("x0*x1", 2, 0.3), 17);
        let ba = a.sample(&control, 2, 32);
        let bb = b.sample(&control, 2, 32);
        for (x, y) in ba.iter().zip(&bb) {
            assert_eq!(x.columns, y.columns);
            assert_eq!(x.outputs, y.outputs);
        }
    }

    #[test]
    fn noise_level_matches_generator() {
        let mut oracle = Oracle::new(spec("x0+x1", 2, 0.1), 11);
        let batch = oracle.sample(&BTreeSet::new(), 1, 10000).pop().unwrap();
        let resid: Vec<f64> = (0..batch.len())
            .map(|i| batch.outputs[i] - (batch.columns[0][i] + batch.columns[1][i]))
            .collect();
        let std = crate::bench::population_variance(&resid).sqrt();
        assert!((0.05..=0.2).contains(&std), "sample std {std}");
    }

    #[test]
    fn controlled_columns_are_constant_and_fresh_per_trial() {
        let control: BTreeSet<usize> = [0, 2].into_iter().collect();
        let mut oracle = Oracle::new(spec("x0+x1*x2", 3, 0.0), 5);
        let batches = oracle.sample(&control, 5, 40);
        assert_eq!(batches.len(), 5);
        let mut seen = Vec::new();
        for b in &batches {
            for &v in &control {
                let col = &b.columns[v];
                assert!(col.iter().all(|&x| x == col[0]), "column not constant");
                assert_eq!(b.control_values[&v], col[0]);
            }
            seen.push((b.control_values[&0], b.control_values[&2]));
        }
        seen.dedup();
        assert_eq!(seen.len(), 5, "controlled values must differ across trials");
    }

    #[test]
    fn fully_controlled_batch_is_degenerate() {
        let control: BTreeSet<usize> = [0, 1].into_iter().collect();
        let mut oracle = Oracle::new(spec("x0+x1", 2, 0.0), 5);
        let b = &oracle.sample(&control, 1, 16)[0];
        assert!(b.outputs.iter().all(|&y| y == b.outputs[0]));
    }

    #[test]
    fn free_samples_stay_in_declared_ranges() {
        let mut s = spec("x0+x1", 2, 0.0);
        s.ranges = vec![(0.5, 1.5), (-2.0, -1.0)];
        let mut oracle = Oracle::new(s, 23);
        for b in oracle.sample(&BTreeSet::new(), 4, 100) {
            assert!(b.columns[0].iter().all(|&x| (0.5..1.5).contains(&x)));
            assert!(b.columns[1].iter().all(|&x| (-2.0..-1.0).contains(&x)));
        }
    }

    #[test]
    fn test_stream_is_independent_and_fresh() {
        let mut oracle = Oracle::new(spec("x0+x1", 2, 0.0), 5);
        let t1 = oracle.sample_test(256);
        let t2 = oracle.sample_test(256);
        assert_eq!(t1.len(), 256);
        assert!(t1.control_set.is_empty());
        assert_ne!(t1.columns[0], t2.columns[0], "test calls must use fresh draws");

        // Same seed, train first vs test first: test data must not depend on
        // training queries.
        let mut a = Oracle::new(spec("x0+x1", 2, 0.0), 42);
        let _ = a.sample(&BTreeSet::new(), 3, 50);
        let ta = a.sample_test(64);
        let mut b = Oracle::new(spec("x0+x1", 2, 0.0), 42);
        let tb = b.sample_test(64);
        assert_eq!(ta.columns, tb.columns);
    }

    #[test]
    fn row_accounting_counts_every_sample() {
        let mut oracle = Oracle::new(spec("x0+x1", 2, 0.0), 5);
        let _ = oracle.sample(&BTreeSet::new(), 3, 50);
        let _ = oracle.sample_test(64);
        assert_eq!(oracle.train_rows(), 150);
        assert_eq!(oracle.test_rows(), 64);
    }

    #[test]
    fn undefined_truth_rows_are_redrawn() {
        let s = BenchmarkSpec::new(
            "logx",
            1,
            ExpressionTree::parse("log(x0)", 1).unwrap(),
            OperatorSet::parse("+,-,*,log").unwrap(),
            vec![(-1.0, 1.0)],
            0.0,
        )
        .unwrap();
        let mut oracle = Oracle::new(s, 7);
        let b = &oracle.sample(&BTreeSet::new(), 1, 200)[0];
        assert!(b.outputs.iter().all(|y| y.is_finite()));
        assert!(b.columns[0].iter().all(|&x| x > 0.0));
    }

    #[test]
    fn file_format_roundtrip() {
        let s = spec("0.5*x0 + sin(x1)", 2, 0.0);
        let text = s.to_file_string();
        let back = BenchmarkSpec::parse_file(&text).unwrap();
        assert_eq!(back.name, s.name);
        assert_eq!(back.n_vars, 2);
        assert!(back.truth.same_structure(&s.truth));
        assert_eq!(back.op_set, s.op_set);
        assert_eq!(back.ranges, s.ranges);
        assert_eq!(back.to_file_string(), text);
    }

    #[test]
    fn file_format_reports_bad_lines() {
        let err = BenchmarkSpec::parse_file("name = x\nbogus line\n").unwrap_err();
        assert!(matches!(err, SpecError::Format { line: 2, .. }));
        let err = BenchmarkSpec::parse_file("name = x\nn_vars = 1\n").unwrap_err();
        assert!(matches!(err, SpecError::Format { .. }));
    }

    #[test]
    fn truth_with_open_constants_is_rejected() {
        let err = BenchmarkSpec::new(
            "bad",
            1,
            ExpressionTree::parse("C*x0", 1).unwrap(),
            OperatorSet::parse("+,*").unwrap(),
            vec![(0.0, 1.0)],
            0.0,
        );
        assert!(err.is_err());
    }
}
