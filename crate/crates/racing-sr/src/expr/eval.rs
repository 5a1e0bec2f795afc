//! Batch evaluation of expression trees.
//!
//! Trees are compiled once to a postfix instruction stream and evaluated
//! column-wise over a whole batch, so the per-node dispatch cost is paid once
//! per batch instead of once per row. [`BatchEvaluator`] additionally hoists
//! maximal subtrees that contain no open constants: those are evaluated a
//! single time when the evaluator is bound to a batch, which makes the
//! repeated objective evaluations inside a constant fit cheap.

use super::{BinaryOp, ExpressionTree, Node, NodeKind, UnaryOp};

#[derive(Debug, Clone)]
enum Instr {
    Var(u32),
    Slot(u32),
    Lit(f64),
    Bin(BinaryOp),
    Un(UnaryOp),
    /// Push a precomputed column (constant-free subtree hoisted per batch).
    Cached(u32),
}

/// A tree lowered to postfix instructions.
#[derive(Debug, Clone)]
pub struct CompiledExpr {
    instrs: Vec<Instr>,
    max_stack: usize,
}

impl CompiledExpr {
    pub fn compile(tree: &ExpressionTree) -> CompiledExpr {
        let mut instrs = Vec::with_capacity(tree.node_count());
        lower(tree.root(), &mut instrs);
        let max_stack = stack_need(&instrs);
        CompiledExpr { instrs, max_stack }
    }

    /// Evaluate over column-major inputs into `out` (length = rows).
    pub fn eval_columns(&self, columns: &[Vec<f64>], consts: &[f64], out: &mut [f64]) {
        let m = out.len();
        let mut stack: Vec<Vec<f64>> = (0..self.max_stack).map(|_| vec![0.0; m]).collect();
        run(&self.instrs, columns, consts, &[], &mut stack, m);
        out.copy_from_slice(&stack[0][..m]);
    }
}

fn lower(node: &Node, out: &mut Vec<Instr>) {
    for c in &node.children {
        lower(c, out);
    }
    out.push(match &node.kind {
        NodeKind::Binary(op) => Instr::Bin(*op),
        NodeKind::Unary(op) => Instr::Un(*op),
        NodeKind::Variable(i) => Instr::Var(*i as u32),
        NodeKind::OpenConst { slot } => Instr::Slot(*slot as u32),
        NodeKind::Literal(v) => Instr::Lit(*v),
    });
}

fn stack_need(instrs: &[Instr]) -> usize {
    let mut depth = 0usize;
    let mut max = 0usize;
    for instr in instrs {
        match instr {
            Instr::Bin(_) => depth -= 1,
            Instr::Un(_) => {}
            _ => depth += 1,
        }
        max = max.max(depth);
    }
    max
}

/// Interpreter core shared by the one-shot and batch-bound paths.
fn run(
    instrs: &[Instr],
    columns: &[Vec<f64>],
    consts: &[f64],
    cache: &[Vec<f64>],
    stack: &mut [Vec<f64>],
    m: usize,
) {
    let mut top = 0usize;
    for instr in instrs {
        match instr {
            Instr::Var(i) => {
                stack[top][..m].copy_from_slice(&columns[*i as usize][..m]);
                top += 1;
            }
            Instr::Cached(i) => {
                stack[top][..m].copy_from_slice(&cache[*i as usize][..m]);
                top += 1;
            }
            Instr::Slot(i) => {
                stack[top][..m].fill(consts[*i as usize]);
                top += 1;
            }
            Instr::Lit(v) => {
                stack[top][..m].fill(*v);
                top += 1;
            }
            Instr::Un(op) => {
                let buf = &mut stack[top - 1];
                match op {
                    UnaryOp::Sin => buf[..m].iter_mut().for_each(|v| *v = v.sin()),
                    UnaryOp::Cos => buf[..m].iter_mut().for_each(|v| *v = v.cos()),
                    UnaryOp::Log => buf[..m].iter_mut().for_each(|v| *v = v.ln()),
                    UnaryOp::Exp => buf[..m].iter_mut().for_each(|v| *v = v.exp()),
                    UnaryOp::Sqrt => buf[..m].iter_mut().for_each(|v| *v = v.sqrt()),
                }
            }
            Instr::Bin(op) => {
                let (lo, hi) = stack.split_at_mut(top - 1);
                let a = &mut lo[top - 2];
                let b = &hi[0];
                match op {
                    BinaryOp::Add => a[..m].iter_mut().zip(&b[..m]).for_each(|(x, y)| *x += y),
                    BinaryOp::Sub => a[..m].iter_mut().zip(&b[..m]).for_each(|(x, y)| *x -= y),
                    BinaryOp::Mul => a[..m].iter_mut().zip(&b[..m]).for_each(|(x, y)| *x *= y),
                    BinaryOp::Div => a[..m].iter_mut().zip(&b[..m]).for_each(|(x, y)| *x /= y),
                }
                top -= 1;
            }
        }
    }
    debug_assert_eq!(top, 1);
}

/// An expression bound to one batch for repeated evaluation while fitting
/// constants. Subtrees without open constants are precomputed.
pub struct BatchEvaluator<'a> {
    instrs: Vec<Instr>,
    cache: Vec<Vec<f64>>,
    columns: &'a [Vec<f64>],
    stack: Vec<Vec<f64>>,
    m: usize,
    pub evals: u64,
}

impl<'a> BatchEvaluator<'a> {
    pub fn new(tree: &ExpressionTree, columns: &'a [Vec<f64>], m: usize) -> BatchEvaluator<'a> {
        let mut instrs = Vec::new();
        let mut cache: Vec<Vec<f64>> = Vec::new();
        hoist(tree.root(), columns, m, &mut instrs, &mut cache);
        let max_stack = stack_need(&instrs);
        BatchEvaluator {
            instrs,
            cache,
            columns,
            stack: (0..max_stack).map(|_| vec![0.0; m]).collect(),
            m,
            evals: 0,
        }
    }

    pub fn rows(&self) -> usize {
        self.m
    }

    /// Evaluate with the given open-constant values; returns the result
    /// column (valid until the next call).
    pub fn eval(&mut self, consts: &[f64]) -> &[f64] {
        self.evals += 1;
        run(
            &self.instrs,
            self.columns,
            consts,
            &self.cache,
            &mut self.stack,
            self.m,
        );
        &self.stack[0][..self.m]
    }

    /// Mean squared error against `y`; infinity if any prediction is
    /// non-finite (worst case rather than NaN poisoning).
    pub fn mse(&mut self, consts: &[f64], y: &[f64]) -> f64 {
        let m = self.m;
        let pred = self.eval(consts);
        let mut acc = 0.0;
        for (p, t) in pred.iter().zip(&y[..m]) {
            let d = p - t;
            acc += d * d;
        }
        if acc.is_finite() {
            acc / m as f64
        } else {
            f64::INFINITY
        }
    }
}

/// Returns whether `node` depends on an open constant; emits instructions,
/// replacing maximal constant-free subtrees (of size >= 2) by cache loads.
fn hoist(
    node: &Node,
    columns: &[Vec<f64>],
    m: usize,
    out: &mut Vec<Instr>,
    cache: &mut Vec<Vec<f64>>,
) -> bool {
    if !subtree_has_open_const(node) {
        match node.kind {
            NodeKind::Variable(i) => out.push(Instr::Var(i as u32)),
            NodeKind::Literal(v) => out.push(Instr::Lit(v)),
            _ => {
                let mut instrs = Vec::new();
                lower(node, &mut instrs);
                let mut stack: Vec<Vec<f64>> =
                    (0..stack_need(&instrs)).map(|_| vec![0.0; m]).collect();
                run(&instrs, columns, &[], &[], &mut stack, m);
                let col = std::mem::take(&mut stack[0]);
                out.push(Instr::Cached(cache.len() as u32));
                cache.push(col);
            }
        }
        return false;
    }
    for c in &node.children {
        hoist(c, columns, m, out, cache);
    }
    out.push(match &node.kind {
        NodeKind::Binary(op) => Instr::Bin(*op),
        NodeKind::Unary(op) => Instr::Un(*op),
        NodeKind::OpenConst { slot } => Instr::Slot(*slot as u32),
        _ => unreachable!("leaf without open constant handled above"),
    });
    true
}

fn subtree_has_open_const(node: &Node) -> bool {
    matches!(node.kind, NodeKind::OpenConst { .. })
        || node.children.iter().any(subtree_has_open_const)
}
