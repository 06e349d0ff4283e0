//! Token libraries, preorder expression trees and the constraint masker.
//!
//! Expressions are stored as preorder token sequences (parent before
//! children). A [`PrefixState`] tracks a partial sequence with a stack of
//! open nodes, which gives O(1) access to the parent and sibling of the
//! next slot during autoregressive sampling.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenKind {
    BinaryOperator,
    UnaryOperator,
    Variable,
    ConstantToken,
}

/// Evaluation semantics of a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Var(usize),
    Const,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub kind: TokenKind,
    pub symbol: String,
    pub arity: usize,
    /// Symbol of the token this one undoes (`exp` <-> `log`).
    pub inverse_of: Option<String>,
    pub trig: bool,
    pub op: Op,
}

impl Token {
    /// Builds a token from its display symbol.
    ///
    /// Recognised symbols: `+ - * /`, `sin cos tan exp log`, `x_<i>`, and
    /// `c` / `const` for the constant token.
    pub fn from_symbol(symbol: &str) -> Result<Token> {
        use TokenKind::*;
        let (kind, op, inverse, trig) = match symbol {
            "+" => (BinaryOperator, Op::Add, None, false),
            "-" => (BinaryOperator, Op::Sub, None, false),
            "*" => (BinaryOperator, Op::Mul, None, false),
            "/" => (BinaryOperator, Op::Div, None, false),
            "sin" => (UnaryOperator, Op::Sin, None, true),
            "cos" => (UnaryOperator, Op::Cos, None, true),
            "tan" => (UnaryOperator, Op::Tan, None, true),
            "exp" => (UnaryOperator, Op::Exp, Some("log"), false),
            "log" => (UnaryOperator, Op::Log, Some("exp"), false),
            "c" | "const" => (ConstantToken, Op::Const, None, false),
            s => match s.strip_prefix("x_").and_then(|i| i.parse::<usize>().ok()) {
                Some(i) => (Variable, Op::Var(i), None, false),
                None => return Err(Error::UnknownSymbol(s.to_string())),
            },
        };
        let arity = match kind {
            BinaryOperator => 2,
            UnaryOperator => 1,
            Variable | ConstantToken => 0,
        };
        let symbol = if kind == ConstantToken { "c" } else { symbol };
        Ok(Token {
            kind,
            symbol: symbol.to_string(),
            arity,
            inverse_of: inverse.map(str::to_string),
            trig,
            op,
        })
    }

    pub fn is_constant(&self) -> bool {
        self.kind == TokenKind::ConstantToken
    }
}

/// Ordered token set. Positions define the one-hot encoding order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLibrary {
    tokens: Vec<Token>,
    index: HashMap<String, usize>,
}

impl TokenLibrary {
    pub fn new(tokens: Vec<Token>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.symbol.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate token symbol {:?}", t.symbol)));
            }
        }
        if !tokens.iter().any(|t| t.arity == 0) {
            return Err(Error::Config("library has no arity-0 token".into()));
        }
        Ok(TokenLibrary { tokens, index })
    }

    pub fn from_symbols<S: AsRef<str>>(symbols: &[S]) -> Result<Self> {
        let tokens = symbols
            .iter()
            .map(|s| Token::from_symbol(s.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> &Token {
        &self.tokens[id]
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        let key = if symbol == "const" { "c" } else { symbol };
        self.index.get(key).copied()
    }

    pub fn symbols(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.symbol.clone()).collect()
    }

    pub fn has_constant(&self) -> bool {
        self.tokens.iter().any(Token::is_constant)
    }

    /// Number of input variables referenced by the library.
    pub fn n_variables(&self) -> usize {
        self.tokens
            .iter()
            .filter_map(|t| match t.op {
                Op::Var(i) => Some(i + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    fn min_leaf_arity_exists(&self) -> bool {
        self.tokens.iter().any(|t| t.arity == 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstantPosition {
    #[default]
    Off,
    /// A constant child of a binary operator may only be its first child.
    FirstChildOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ConstraintSet {
    pub max_tokens: usize,
    pub forbid_inverse_child: bool,
    pub forbid_nested_trig: bool,
    pub forbid_all_constant_children: bool,
    pub constant_child_position: ConstantPosition,
}

impl ConstraintSet {
    /// Only the size bound; all structural rules switched off.
    pub fn size_only(max_tokens: usize) -> Self {
        ConstraintSet {
            max_tokens,
            forbid_inverse_child: false,
            forbid_nested_trig: false,
            forbid_all_constant_children: false,
            constant_child_position: ConstantPosition::Off,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(Error::Config("max-tokens must be at least 1".into()));
        }
        Ok(())
    }
}

/// A tree skeleton: a complete preorder token sequence with constant values
/// left unspecified.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Skeleton(pub Vec<usize>);

impl Skeleton {
    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn n_constants(&self, lib: &TokenLibrary) -> usize {
        self.0.iter().filter(|&&t| lib.token(t).is_constant()).count()
    }

    pub fn with_constants(&self, constants: Vec<f64>) -> Expression {
        Expression { tokens: self.0.clone(), constants }
    }

    pub fn symbols(&self, lib: &TokenLibrary) -> Vec<String> {
        self.0.iter().map(|&t| lib.token(t).symbol.clone()).collect()
    }
}

/// A complete expression: preorder tokens plus one value per constant token,
/// in sampling order.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    pub tokens: Vec<usize>,
    pub constants: Vec<f64>,
}

/// JSON form of an expression: symbols instead of library positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionRecord {
    pub tokens: Vec<String>,
    pub constants: Vec<f64>,
}

impl Expression {
    pub fn new(lib: &TokenLibrary, tokens: Vec<usize>, constants: Vec<f64>) -> Result<Self> {
        if completion_deficit(lib, &tokens) != Some(0) {
            return Err(Error::IncompleteExpression);
        }
        let k = tokens.iter().filter(|&&t| lib.token(t).is_constant()).count();
        if k != constants.len() {
            return Err(Error::ConstantCount { expected: k, got: constants.len() });
        }
        Ok(Expression { tokens, constants })
    }

    pub fn from_symbols<S: AsRef<str>>(
        lib: &TokenLibrary,
        symbols: &[S],
        constants: Vec<f64>,
    ) -> Result<Self> {
        let tokens = symbols
            .iter()
            .map(|s| {
                lib.index_of(s.as_ref())
                    .ok_or_else(|| Error::UnknownSymbol(s.as_ref().to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(lib, tokens, constants)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn skeleton(&self) -> Skeleton {
        Skeleton(self.tokens.clone())
    }

    pub fn to_record(&self, lib: &TokenLibrary) -> ExpressionRecord {
        ExpressionRecord {
            tokens: self.tokens.iter().map(|&t| lib.token(t).symbol.clone()).collect(),
            constants: self.constants.clone(),
        }
    }

    pub fn from_record(lib: &TokenLibrary, rec: &ExpressionRecord) -> Result<Self> {
        Self::from_symbols(lib, &rec.tokens, rec.constants.clone())
    }

    /// Evaluates the expression at every column of `x`.
    ///
    /// Fails with [`Error::Evaluation`] if any point yields a non-finite value.
    pub fn evaluate(&self, lib: &TokenLibrary, x: &Inputs) -> Result<Vec<f64>> {
        let out: Vec<f64> = (0..x.n_points()).map(|j| self.eval_point(lib, x, j)).collect();
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(Error::Evaluation)
        }
    }

    fn eval_point(&self, lib: &TokenLibrary, x: &Inputs, j: usize) -> f64 {
        // Preorder evaluated right to left with a value stack.
        let mut stack: Vec<f64> = Vec::with_capacity(self.tokens.len());
        let mut const_idx = self.constants.len();
        for &t in self.tokens.iter().rev() {
            let v = match lib.token(t).op {
                Op::Var(i) => x.get(i, j),
                Op::Const => {
                    const_idx -= 1;
                    self.constants[const_idx]
                }
                op => {
                    let a = stack.pop().expect("complete expression");
                    match op {
                        Op::Sin => a.sin(),
                        Op::Cos => a.cos(),
                        Op::Tan => a.tan(),
                        Op::Exp => a.exp(),
                        Op::Log => a.ln(),
                        _ => {
                            let b = stack.pop().expect("complete expression");
                            match op {
                                Op::Add => a + b,
                                Op::Sub => a - b,
                                Op::Mul => a * b,
                                Op::Div => a / b,
                                _ => unreachable!(),
                            }
                        }
                    }
                }
            };
            stack.push(v);
        }
        stack.pop().unwrap_or(f64::NAN)
    }

    /// Infix rendering with commutative arguments ordered canonically.
    pub fn display(&self, lib: &TokenLibrary) -> String {
        canonical_display(lib, &self.tokens)
    }
}

/// Input matrix stored row-major: `n` variables by `m` points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inputs {
    n_vars: usize,
    values: Vec<f64>,
}

impl Inputs {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Config("ragged input rows".into()));
        }
        Ok(Inputs { n_vars: rows.len(), values: rows.concat() })
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn n_points(&self) -> usize {
        if self.n_vars == 0 {
            0
        } else {
            self.values.len() / self.n_vars
        }
    }

    pub fn get(&self, var: usize, point: usize) -> f64 {
        self.values[var * self.n_points() + point]
    }

    pub fn row(&self, var: usize) -> &[f64] {
        let m = self.n_points();
        &self.values[var * m..(var + 1) * m]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Inputs,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Inputs, y: Vec<f64>) -> Result<Self> {
        if x.n_points() != y.len() {
            return Err(Error::Config(format!(
                "dataset has {} input points but {} targets",
                x.n_points(),
                y.len()
            )));
        }
        Ok(Dataset { x, y })
    }

    /// One variable sampled on a grid, targets from `f`.
    pub fn univariate(xs: &[f64], f: impl Fn(f64) -> f64) -> Self {
        let y = xs.iter().map(|&v| f(v)).collect();
        Dataset { x: Inputs { n_vars: 1, values: xs.to_vec() }, y }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Number of unfilled child slots after `prefix`, or `None` if the prefix
/// already closed before its last token.
pub fn completion_deficit(lib: &TokenLibrary, prefix: &[usize]) -> Option<usize> {
    let mut deficit: usize = 1;
    for &t in prefix {
        if deficit == 0 {
            return None;
        }
        deficit = deficit - 1 + lib.token(t).arity;
    }
    Some(deficit)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OpenNode {
    token: usize,
    arity: usize,
    started: usize,
    first_child: Option<(usize, f64)>,
    all_children_const: bool,
}

/// Context of the next slot to be filled.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SlotContext {
    pub previous: Option<(usize, f64)>,
    pub parent: Option<usize>,
    pub sibling: Option<(usize, f64)>,
}

/// A partial preorder sequence and its open-node stack.
///
/// Every node on the stack is an ancestor of the pending slot; the top is
/// its parent.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixState {
    tokens: Vec<usize>,
    stack: Vec<OpenNode>,
    deficit: usize,
    previous: Option<(usize, f64)>,
    trig_ancestors: usize,
}

impl Default for PrefixState {
    fn default() -> Self {
        Self::new()
    }
}

impl PrefixState {
    pub fn new() -> Self {
        PrefixState {
            tokens: Vec::new(),
            stack: Vec::new(),
            deficit: 1,
            previous: None,
            trig_ancestors: 0,
        }
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn deficit(&self) -> usize {
        self.deficit
    }

    pub fn is_complete(&self) -> bool {
        self.deficit == 0
    }

    pub fn context(&self) -> SlotContext {
        let top = self.stack.last();
        SlotContext {
            previous: self.previous,
            parent: top.map(|n| n.token),
            sibling: top.and_then(|n| if n.started > 0 { n.first_child } else { None }),
        }
    }

    /// Appends a token; `value` is the constant value when `token` is the
    /// constant token (ignored otherwise).
    pub fn push(&mut self, lib: &TokenLibrary, token: usize, value: f64) {
        assert!(self.deficit > 0, "push onto a complete expression");
        let tok = lib.token(token);
        let value = if tok.is_constant() { value } else { 0.0 };
        if let Some(top) = self.stack.last_mut() {
            if top.started == 0 {
                top.first_child = Some((token, value));
            }
            top.started += 1;
            top.all_children_const &= tok.is_constant();
        }
        self.tokens.push(token);
        self.previous = Some((token, value));
        self.deficit = self.deficit - 1 + tok.arity;
        if tok.arity > 0 {
            if tok.trig {
                self.trig_ancestors += 1;
            }
            self.stack.push(OpenNode {
                token,
                arity: tok.arity,
                started: 0,
                first_child: None,
                all_children_const: true,
            });
        } else {
            while let Some(top) = self.stack.last() {
                if top.started < top.arity {
                    break;
                }
                if lib.token(top.token).trig {
                    self.trig_ancestors -= 1;
                }
                self.stack.pop();
            }
        }
    }

    /// Whether `token` may fill the pending slot.
    pub fn allows(&self, lib: &TokenLibrary, cs: &ConstraintSet, token: usize) -> bool {
        if self.deficit == 0 {
            return false;
        }
        let tok = lib.token(token);
        // Budget: every open slot after placement needs at least one leaf.
        let after = self.deficit - 1 + tok.arity;
        if self.tokens.len() + 1 + after > cs.max_tokens {
            return false;
        }
        let Some(parent) = self.stack.last() else {
            return true;
        };
        let ptok = lib.token(parent.token);
        if cs.forbid_inverse_child
            && (tok.inverse_of.as_deref() == Some(ptok.symbol.as_str())
                || ptok.inverse_of.as_deref() == Some(tok.symbol.as_str()))
        {
            return false;
        }
        if cs.forbid_nested_trig && tok.trig && self.trig_ancestors > 0 {
            return false;
        }
        if tok.is_constant() {
            let last_slot = parent.started + 1 == parent.arity;
            if cs.forbid_all_constant_children && last_slot && parent.all_children_const {
                return false;
            }
            if cs.constant_child_position == ConstantPosition::FirstChildOnly
                && parent.arity == 2
                && parent.started > 0
            {
                return false;
            }
        }
        true
    }

    /// Boolean mask over the library for the pending slot.
    pub fn allowed_tokens(&self, lib: &TokenLibrary, cs: &ConstraintSet) -> Result<Vec<bool>> {
        let mask: Vec<bool> = (0..lib.len()).map(|t| self.allows(lib, cs, t)).collect();
        if mask.iter().any(|&m| m) {
            Ok(mask)
        } else {
            Err(Error::EmptyMask { prefix_len: self.tokens.len() })
        }
    }
}

/// Mask for the slot after `prefix` (a valid, incomplete partial sequence).
pub fn allowed_tokens(lib: &TokenLibrary, cs: &ConstraintSet, prefix: &[usize]) -> Result<Vec<bool>> {
    let mut state = PrefixState::new();
    for &t in prefix {
        state.push(lib, t, 0.0);
    }
    state.allowed_tokens(lib, cs)
}

/// All complete trees of at most `max_tokens` tokens.
///
/// With `cs = None` only the size bound applies. The output order is the
/// depth-first order over library positions.
pub fn enumerate_trees(
    lib: &TokenLibrary,
    max_tokens: usize,
    cs: Option<&ConstraintSet>,
) -> Vec<Skeleton> {
    let rules = match cs {
        Some(c) => ConstraintSet { max_tokens, ..*c },
        None => ConstraintSet::size_only(max_tokens),
    };
    let mut out = Vec::new();
    if max_tokens == 0 || !lib.min_leaf_arity_exists() {
        return out;
    }
    let mut state = PrefixState::new();
    enumerate_rec(lib, &rules, &mut state, &mut out);
    out
}

fn enumerate_rec(
    lib: &TokenLibrary,
    cs: &ConstraintSet,
    state: &mut PrefixState,
    out: &mut Vec<Skeleton>,
) {
    for t in 0..lib.len() {
        if !state.allows(lib, cs, t) {
            continue;
        }
        let saved = state.clone();
        state.push(lib, t, 0.0);
        if state.is_complete() {
            out.push(Skeleton(state.tokens.clone()));
        } else {
            enumerate_rec(lib, cs, state, out);
        }
        *state = saved;
    }
}

/// Number of trees with at most `max_tokens` tokens ignoring all structural
/// rules, by dynamic programming over node counts.
pub fn count_trees(lib: &TokenLibrary, max_tokens: usize) -> u128 {
    let leaves = lib.tokens().iter().filter(|t| t.arity == 0).count() as u128;
    let unary = lib.tokens().iter().filter(|t| t.arity == 1).count() as u128;
    let binary = lib.tokens().iter().filter(|t| t.arity == 2).count() as u128;
    let mut exact = vec![0u128; max_tokens + 1];
    for n in 1..=max_tokens {
        let mut total = if n == 1 { leaves } else { unary * exact[n - 1] };
        if n >= 3 {
            for left in 1..n - 1 {
                total += binary * exact[left] * exact[n - 1 - left];
            }
        }
        exact[n] = total;
    }
    exact.iter().sum()
}

#[derive(Debug, Clone)]
enum DisplayNode {
    Leaf { text: String, rank: u8 },
    Unary { name: String, child: Box<DisplayNode> },
    Binary { op: String, commutative: bool, left: Box<DisplayNode>, right: Box<DisplayNode> },
}

impl DisplayNode {
    // Variables sort before constants, constants before compound terms.
    fn rank(&self) -> u8 {
        match self {
            DisplayNode::Leaf { rank, .. } => *rank,
            _ => 2,
        }
    }

    fn canonicalize(self) -> DisplayNode {
        match self {
            DisplayNode::Binary { op, commutative, left, right } => {
                let mut l = left.canonicalize();
                let mut r = right.canonicalize();
                if commutative && (l.rank(), l.to_string()) > (r.rank(), r.to_string()) {
                    std::mem::swap(&mut l, &mut r);
                }
                DisplayNode::Binary { op, commutative, left: Box::new(l), right: Box::new(r) }
            }
            DisplayNode::Unary { name, child } => {
                DisplayNode::Unary { name, child: Box::new(child.canonicalize()) }
            }
            leaf => leaf,
        }
    }
}

impl fmt::Display for DisplayNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DisplayNode::Leaf { text, .. } => write!(f, "{text}"),
            DisplayNode::Unary { name, child } => write!(f, "{name}({child})"),
            DisplayNode::Binary { op, left, right, .. } => {
                let wrap = |n: &DisplayNode| match n {
                    DisplayNode::Binary { .. } => format!("({n})"),
                    _ => n.to_string(),
                };
                write!(f, "{} {} {}", wrap(left), op, wrap(right))
            }
        }
    }
}

fn build_display(lib: &TokenLibrary, tokens: &[usize], pos: &mut usize) -> DisplayNode {
    let tok = lib.token(tokens[*pos]);
    *pos += 1;
    match tok.arity {
        0 => DisplayNode::Leaf {
            text: tok.symbol.clone(),
            rank: if tok.is_constant() { 1 } else { 0 },
        },
        1 => DisplayNode::Unary {
            name: tok.symbol.clone(),
            child: Box::new(build_display(lib, tokens, pos)),
        },
        _ => {
            let left = build_display(lib, tokens, pos);
            let right = build_display(lib, tokens, pos);
            DisplayNode::Binary {
                op: tok.symbol.clone(),
                commutative: matches!(tok.op, Op::Add | Op::Mul),
                left: Box::new(left),
                right: Box::new(right),
            }
        }
    }
}

/// Canonical infix string of a complete preorder sequence, e.g. `x_0 * c`.
pub fn canonical_display(lib: &TokenLibrary, tokens: &[usize]) -> String {
    let mut pos = 0;
    build_display(lib, tokens, &mut pos).canonicalize().to_string()
}
