//! Expression trees: representation, parsing, serialization, evaluation and
//! the structural queries the rest of the engine is built on.
//!
//! A tree is a plain recursive [`Node`] structure. Every node carries an
//! `editable` flag; genetic operators must leave non-editable ("frozen")
//! nodes untouched. Constants come in two kinds: open slots (`C` in the
//! grammar, fitted to data) and frozen literals (parsed numbers or constants
//! frozen at their fitted mean). Open slots are numbered `0..L-1` in
//! depth-first order and renumbered after every structural edit.

mod eval;
mod parse;

pub use eval::{BatchEvaluator, CompiledExpr};

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use thiserror::Error;

/// Binary operator vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    pub const ALL: [BinaryOp; 4] = [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div];

    pub fn token(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
        }
    }

    #[inline]
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

/// Unary operator vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UnaryOp {
    Sin,
    Cos,
    Log,
    Exp,
    Sqrt,
}

impl UnaryOp {
    pub const ALL: [UnaryOp; 5] = [
        UnaryOp::Sin,
        UnaryOp::Cos,
        UnaryOp::Log,
        UnaryOp::Exp,
        UnaryOp::Sqrt,
    ];

    pub fn token(self) -> &'static str {
        match self {
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Log => "log",
            UnaryOp::Exp => "exp",
            UnaryOp::Sqrt => "sqrt",
        }
    }

    /// `log` and `sqrt` of negative arguments yield NaN (no complex values).
    #[inline]
    pub fn apply(self, a: f64) -> f64 {
        match self {
            UnaryOp::Sin => a.sin(),
            UnaryOp::Cos => a.cos(),
            UnaryOp::Log => a.ln(),
            UnaryOp::Exp => a.exp(),
            UnaryOp::Sqrt => a.sqrt(),
        }
    }
}

/// The operator vocabulary a benchmark allows the search to use.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperatorSet {
    pub binary: Vec<BinaryOp>,
    pub unary: Vec<UnaryOp>,
}

impl OperatorSet {
    pub fn new(binary: Vec<BinaryOp>, unary: Vec<UnaryOp>) -> Result<Self, ExprError> {
        if binary.is_empty() {
            return Err(ExprError::InvalidOperatorSet(
                "at least one binary operator is required".into(),
            ));
        }
        Ok(OperatorSet { binary, unary })
    }

    /// Parse a comma-separated token list like `+,-,*,sin,cos`.
    pub fn parse(text: &str) -> Result<Self, ExprError> {
        let mut binary = Vec::new();
        let mut unary = Vec::new();
        for tok in text.split(',') {
            let tok = tok.trim();
            if tok.is_empty() {
                continue;
            }
            if let Some(op) = BinaryOp::ALL.iter().find(|op| op.token() == tok) {
                if !binary.contains(op) {
                    binary.push(*op);
                }
            } else if let Some(op) = UnaryOp::ALL.iter().find(|op| op.token() == tok) {
                if !unary.contains(op) {
                    unary.push(*op);
                }
            } else {
                return Err(ExprError::InvalidOperatorSet(format!(
                    "unknown operator token `{tok}`"
                )));
            }
        }
        OperatorSet::new(binary, unary)
    }

    pub fn len(&self) -> usize {
        self.binary.len() + self.unary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for OperatorSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut toks: Vec<&str> = self.binary.iter().map(|op| op.token()).collect();
        toks.extend(self.unary.iter().map(|op| op.token()));
        write!(f, "{}", toks.join(","))
    }
}

/// What a single tree node is.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Binary(BinaryOp),
    Unary(UnaryOp),
    Variable(usize),
    /// Fittable constant slot; slots are numbered depth-first within a tree.
    OpenConst { slot: usize },
    /// Frozen constant value; always non-editable.
    Literal(f64),
}

impl NodeKind {
    pub fn arity(&self) -> usize {
        match self {
            NodeKind::Binary(_) => 2,
            NodeKind::Unary(_) => 1,
            _ => 0,
        }
    }
}

/// A node of an expression tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub kind: NodeKind,
    pub editable: bool,
    pub children: Vec<Node>,
}

impl Node {
    pub fn leaf(kind: NodeKind, editable: bool) -> Node {
        Node {
            kind,
            editable,
            children: Vec::new(),
        }
    }

    pub fn unary(op: UnaryOp, child: Node) -> Node {
        Node {
            kind: NodeKind::Unary(op),
            editable: true,
            children: vec![child],
        }
    }

    pub fn binary(op: BinaryOp, left: Node, right: Node) -> Node {
        Node {
            kind: NodeKind::Binary(op),
            editable: true,
            children: vec![left, right],
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    fn count(&self) -> usize {
        1 + self.children.iter().map(Node::count).sum::<usize>()
    }

    fn depth(&self) -> usize {
        1 + self.children.iter().map(Node::depth).max().unwrap_or(0)
    }
}

/// Errors from parsing, construction and evaluation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("syntax error at byte {pos}: {message}")]
    Syntax { pos: usize, message: String },
    #[error("variable x{index} out of range at byte {pos} (n_vars = {n_vars})")]
    VariableOutOfRange {
        index: usize,
        n_vars: usize,
        pos: usize,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid operator set: {0}")]
    InvalidOperatorSet(String),
    #[error("invalid tree: {0}")]
    InvalidTree(String),
}

/// A binary expression tree over `n_vars` input variables.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionTree {
    root: Node,
    n_vars: usize,
}

impl ExpressionTree {
    /// Build a tree from a root node, validating arities and variable
    /// indices, and renumbering open-constant slots depth-first.
    pub fn new(root: Node, n_vars: usize) -> Result<Self, ExprError> {
        validate_node(&root, n_vars)?;
        let mut tree = ExpressionTree { root, n_vars };
        tree.renumber_slots();
        Ok(tree)
    }

    /// Parse the infix grammar: `+ - * /`, functions `sin cos log exp sqrt`,
    /// variables `x0..`, open constant `C`, decimal literals, parentheses.
    pub fn parse(text: &str, n_vars: usize) -> Result<Self, ExprError> {
        parse::parse(text, n_vars)
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn node_count(&self) -> usize {
        self.root.count()
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    /// Number of open (fittable) constant slots.
    pub fn count_open_constants(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |node| {
            if matches!(node.kind, NodeKind::OpenConst { .. }) {
                n += 1;
            }
        });
        n
    }

    /// Indices of variables referenced anywhere in the tree.
    pub fn free_variables(&self) -> BTreeSet<usize> {
        let mut vars = BTreeSet::new();
        self.for_each(&mut |node| {
            if let NodeKind::Variable(i) = node.kind {
                vars.insert(i);
            }
        });
        vars
    }

    /// Elementwise evaluation over row-major inputs. Rows whose result is not
    /// finite come back as NaN; evaluation itself never fails on domain
    /// violations, only on shape mismatches.
    pub fn evaluate(&self, rows: &[Vec<f64>], constants: &[f64]) -> Result<Vec<f64>, ExprError> {
        let slots = self.count_open_constants();
        if constants.len() != slots {
            return Err(ExprError::DimensionMismatch {
                expected: slots,
                got: constants.len(),
            });
        }
        for row in rows {
            if row.len() != self.n_vars {
                return Err(ExprError::DimensionMismatch {
                    expected: self.n_vars,
                    got: row.len(),
                });
            }
        }
        let mut columns = vec![vec![0.0; rows.len()]; self.n_vars];
        for (i, row) in rows.iter().enumerate() {
            for (v, col) in columns.iter_mut().enumerate() {
                col[i] = row[v];
            }
        }
        let compiled = CompiledExpr::compile(self);
        let mut out = vec![0.0; rows.len()];
        compiled.eval_columns(&columns, constants, &mut out);
        for v in out.iter_mut() {
            if !v.is_finite() {
                *v = f64::NAN;
            }
        }
        Ok(out)
    }

    /// Canonical serialization: infix with full parenthesization.
    pub fn to_canonical(&self) -> String {
        let mut s = String::new();
        write_infix(&self.root, &mut s);
        s
    }

    /// Prefix serialization, one token stream, for diff-stable logs.
    pub fn to_prefix(&self) -> String {
        let mut s = String::new();
        write_prefix(&self.root, &mut s);
        s
    }

    /// Structural equality: kinds and shape, ignoring editability masks.
    pub fn same_structure(&self, other: &ExpressionTree) -> bool {
        self.n_vars == other.n_vars && same_structure_node(&self.root, &other.root)
    }

    /// Replace every open constant with a frozen literal from `values`.
    pub fn substitute_open_constants(&self, values: &[f64]) -> Result<ExpressionTree, ExprError> {
        let slots = self.count_open_constants();
        if values.len() != slots {
            return Err(ExprError::DimensionMismatch {
                expected: slots,
                got: values.len(),
            });
        }
        let mut tree = self.clone();
        tree.for_each_mut(&mut |node| {
            if let NodeKind::OpenConst { slot } = node.kind {
                node.kind = NodeKind::Literal(values[slot]);
                node.editable = false;
            }
        });
        tree.renumber_slots();
        Ok(tree)
    }

    /// All node paths in depth-first order. A path is the list of child
    /// indices from the root; the root itself is the empty path.
    pub fn paths(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::with_capacity(self.node_count());
        collect_paths(&self.root, &mut Vec::new(), &mut out);
        out
    }

    pub fn node_at(&self, path: &[usize]) -> Option<&Node> {
        let mut node = &self.root;
        for &i in path {
            node = node.children.get(i)?;
        }
        Some(node)
    }

    pub(crate) fn node_at_mut(&mut self, path: &[usize]) -> Option<&mut Node> {
        let mut node = &mut self.root;
        for &i in path {
            node = node.children.get_mut(i)?;
        }
        Some(node)
    }

    /// Replace the subtree at `path` and renumber constant slots.
    pub(crate) fn replace_at(&mut self, path: &[usize], subtree: Node) {
        if let Some(node) = self.node_at_mut(path) {
            *node = subtree;
        }
        self.renumber_slots();
    }

    pub fn for_each(&self, f: &mut impl FnMut(&Node)) {
        fn walk(node: &Node, f: &mut impl FnMut(&Node)) {
            f(node);
            for c in &node.children {
                walk(c, f);
            }
        }
        walk(&self.root, f);
    }

    pub(crate) fn for_each_mut(&mut self, f: &mut impl FnMut(&mut Node)) {
        fn walk(node: &mut Node, f: &mut impl FnMut(&mut Node)) {
            f(node);
            for c in &mut node.children {
                walk(c, f);
            }
        }
        walk(&mut self.root, f);
    }

    /// Renumber open-constant slots 0..L-1 in depth-first order.
    pub(crate) fn renumber_slots(&mut self) {
        let mut next = 0;
        self.for_each_mut(&mut |node| {
            if let NodeKind::OpenConst { slot } = &mut node.kind {
                *slot = next;
                next += 1;
            }
        });
    }

    /// Whether the tree is affine in its open constants, i.e. evaluation has
    /// the form `g0(x) + sum_j c_j * g_j(x)`. Fitting such a tree is a convex
    /// least-squares problem.
    pub fn is_linear_in_constants(&self) -> bool {
        fn walk(node: &Node) -> (bool, bool) {
            // -> (contains open constants, affine in them)
            match &node.kind {
                NodeKind::OpenConst { .. } => (true, true),
                NodeKind::Variable(_) | NodeKind::Literal(_) => (false, true),
                NodeKind::Unary(_) => {
                    let (has, _) = walk(&node.children[0]);
                    (has, !has)
                }
                NodeKind::Binary(op) => {
                    let (ha, la) = walk(&node.children[0]);
                    let (hb, lb) = walk(&node.children[1]);
                    match op {
                        BinaryOp::Add | BinaryOp::Sub => (ha || hb, la && lb),
                        BinaryOp::Mul => {
                            if ha && hb {
                                (true, false)
                            } else {
                                (ha || hb, la && lb)
                            }
                        }
                        BinaryOp::Div => {
                            if hb {
                                (true, false)
                            } else {
                                (ha, la)
                            }
                        }
                    }
                }
            }
        }
        walk(&self.root).1
    }

    /// Frozen (non-editable) nodes as a sorted multiset of stable signatures.
    /// Genetic edits must keep each lineage's multiset intact.
    pub fn frozen_signature(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(&mut |node| {
            if !node.editable {
                out.push(match &node.kind {
                    NodeKind::Binary(op) => format!("bin:{}", op.token()),
                    NodeKind::Unary(op) => format!("un:{}", op.token()),
                    NodeKind::Variable(i) => format!("var:{i}"),
                    NodeKind::OpenConst { .. } => "openconst".to_string(),
                    NodeKind::Literal(v) => format!("lit:{v}"),
                });
            }
        });
        out.sort();
        out
    }

    /// Serialization that also encodes editability; used to order mating
    /// parents deterministically.
    pub(crate) fn masked_key(&self) -> String {
        let mut s = String::new();
        fn walk(node: &Node, s: &mut String) {
            s.push(if node.editable { 'e' } else { 'f' });
            match &node.kind {
                NodeKind::Binary(op) => s.push_str(op.token()),
                NodeKind::Unary(op) => s.push_str(op.token()),
                NodeKind::Variable(i) => {
                    s.push('x');
                    s.push_str(&i.to_string());
                }
                NodeKind::OpenConst { .. } => s.push('C'),
                NodeKind::Literal(v) => s.push_str(&format!("{v}")),
            }
            s.push('(');
            for c in &node.children {
                walk(c, s);
            }
            s.push(')');
        }
        walk(&self.root, &mut s);
        s
    }
}

impl fmt::Display for ExpressionTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_canonical())
    }
}

fn validate_node(node: &Node, n_vars: usize) -> Result<(), ExprError> {
    let want = node.kind.arity();
    if node.children.len() != want {
        return Err(ExprError::InvalidTree(format!(
            "node {:?} has {} children, expected {want}",
            node.kind,
            node.children.len()
        )));
    }
    match node.kind {
        NodeKind::Variable(i) if i >= n_vars => {
            return Err(ExprError::VariableOutOfRange {
                index: i,
                n_vars,
                pos: 0,
            });
        }
        NodeKind::Literal(v) if node.editable => {
            return Err(ExprError::InvalidTree(format!(
                "literal {v} must be non-editable"
            )));
        }
        _ => {}
    }
    for c in &node.children {
        validate_node(c, n_vars)?;
    }
    Ok(())
}

fn same_structure_node(a: &Node, b: &Node) -> bool {
    a.kind == b.kind
        && a.children.len() == b.children.len()
        && a.children
            .iter()
            .zip(&b.children)
            .all(|(x, y)| same_structure_node(x, y))
}

fn collect_paths(node: &Node, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    out.push(prefix.clone());
    for (i, c) in node.children.iter().enumerate() {
        prefix.push(i);
        collect_paths(c, prefix, out);
        prefix.pop();
    }
}

fn write_infix(node: &Node, s: &mut String) {
    match &node.kind {
        NodeKind::Binary(op) => {
            s.push('(');
            write_infix(&node.children[0], s);
            s.push(' ');
            s.push_str(op.token());
            s.push(' ');
            write_infix(&node.children[1], s);
            s.push(')');
        }
        NodeKind::Unary(op) => {
            s.push_str(op.token());
            s.push('(');
            write_infix(&node.children[0], s);
            s.push(')');
        }
        NodeKind::Variable(i) => {
            s.push('x');
            s.push_str(&i.to_string());
        }
        NodeKind::OpenConst { .. } => s.push('C'),
        NodeKind::Literal(v) => s.push_str(&format!("{v}")),
    }
}

fn write_prefix(node: &Node, s: &mut String) {
    if !s.is_empty() && !s.ends_with('(') {
        s.push(' ');
    }
    match &node.kind {
        NodeKind::Binary(op) => {
            s.push('(');
            s.push_str(op.token());
            for c in &node.children {
                write_prefix(c, s);
            }
            s.push(')');
        }
        NodeKind::Unary(op) => {
            s.push('(');
            s.push_str(op.token());
            for c in &node.children {
                write_prefix(c, s);
            }
            s.push(')');
        }
        NodeKind::Variable(i) => {
            s.push('x');
            s.push_str(&i.to_string());
        }
        NodeKind::OpenConst { .. } => s.push('C'),
        NodeKind::Literal(v) => s.push_str(&format!("{v}")),
    }
}

/// Draw a random tree whose leaves use only `free_vars` and open constants.
///
/// Grow-style: every branch stops at `max_depth`, and may stop earlier with a
/// fixed leaf probability. All nodes are editable.
pub fn random_tree<R: Rng + ?Sized>(
    free_vars: &BTreeSet<usize>,
    op_set: &OperatorSet,
    max_depth: usize,
    n_vars: usize,
    rng: &mut R,
) -> ExpressionTree {
    assert!(!free_vars.is_empty(), "random_tree needs free variables");
    assert!(max_depth >= 1);
    let vars: Vec<usize> = free_vars.iter().copied().collect();
    let root = grow(&vars, op_set, 1, max_depth, rng);
    ExpressionTree::new(root, n_vars).expect("generated tree is valid by construction")
}

const LEAF_PROB: f64 = 0.25;

fn grow<R: Rng + ?Sized>(
    vars: &[usize],
    ops: &OperatorSet,
    depth: usize,
    max_depth: usize,
    rng: &mut R,
) -> Node {
    if depth >= max_depth || rng.gen_bool(LEAF_PROB) {
        return random_leaf(vars, rng);
    }
    let pick = rng.gen_range(0..ops.len());
    if pick < ops.binary.len() {
        let op = ops.binary[pick];
        let left = grow(vars, ops, depth + 1, max_depth, rng);
        let right = grow(vars, ops, depth + 1, max_depth, rng);
        Node::binary(op, left, right)
    } else {
        let op = ops.unary[pick - ops.binary.len()];
        Node::unary(op, grow(vars, ops, depth + 1, max_depth, rng))
    }
}

pub(crate) fn random_leaf<R: Rng + ?Sized>(vars: &[usize], rng: &mut R) -> Node {
    let pick = rng.gen_range(0..=vars.len());
    if pick == vars.len() {
        Node::leaf(NodeKind::OpenConst { slot: 0 }, true)
    } else {
        Node::leaf(NodeKind::Variable(vars[pick]), true)
    }
}

#[cfg(test)]
mod tests;
