//! Closed-form scalar expressions of chart coordinates with exact
//! forward-mode derivatives up to third order.
//!
//! Grammar (whitespace insignificant, no implicit multiplication):
//!
//! ```text
//! expr   := term (('+'|'-') term)*
//! term   := factor (('*'|'/') factor)*
//! factor := '-' factor | power
//! power  := atom ('^' integer)?
//! atom   := number | ident '(' expr ')' | var | '(' expr ')'
//! var    := 'x' digit+
//! ```
//!
//! Functions: `sin`, `cos`, `exp`, `log`, `sqrt`, `abs`. Exponents are
//! integers only; fractional powers go through `sqrt` or `exp`/`log`, which
//! keeps the differentiation rules total.

mod jet;

pub use jet::{Jet, MAX_DIM};

use std::fmt;
use thiserror::Error;

/// Public alias for the jet type returned by [`Expression::eval_jet`].
pub type JetValue = Jet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Abs,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
        }
    }

    fn from_name(s: &str) -> Option<Func> {
        Some(match s {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone)]
enum Node {
    Num(f64),
    /// Zero-based coordinate index; `x1` parses to `Var(0)`.
    Var(usize),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Neg(Box<Node>),
    Pow(Box<Node>, i32),
    Func(Func, Box<Node>),
}

/// Parse error with a 1-based byte offset into the source.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("{message} at offset {offset}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("domain error: {what} in `{subexpr}`")]
    Domain { what: String, subexpr: String },
    #[error("non-finite result in `{subexpr}`")]
    NonFinite { subexpr: String },
    #[error("point dimension {got}, expression needs {want}")]
    DimensionMismatch { got: usize, want: usize },
}

/// Immutable expression tree over chart coordinates `x1..xn`.
#[derive(Debug, Clone)]
pub struct Expression {
    root: Node,
    dim: usize,
}

impl Expression {
    /// Parse `source` for a chart of dimension `dim`.
    pub fn parse(source: &str, dim: usize) -> Result<Expression, ParseError> {
        let mut p = Parser {
            src: source.as_bytes(),
            pos: 0,
            dim,
        };
        let root = p.expr()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(p.err("unexpected trailing input"));
        }
        Ok(Expression { root, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Whether this is the literal constant zero.
    pub fn is_literal_zero(&self) -> bool {
        matches!(self.root, Node::Num(v) if v == 0.0)
    }

    /// Evaluate value and derivatives up to `order` (0..=3) at `x`.
    pub fn eval_jet(&self, x: &[f64], order: usize) -> Result<JetValue, EvalError> {
        assert!(order <= 3, "jet order is capped at 3");
        if x.len() != self.dim {
            return Err(EvalError::DimensionMismatch {
                got: x.len(),
                want: self.dim,
            });
        }
        let j = eval_node(&self.root, x, self.dim, order)?;
        if !j.is_finite() {
            return Err(EvalError::NonFinite {
                subexpr: self.to_string(),
            });
        }
        Ok(j)
    }

    /// Plain value at `x`.
    pub fn eval(&self, x: &[f64]) -> Result<f64, EvalError> {
        Ok(self.eval_jet(x, 0)?.value)
    }

    // Programmatic constructors, used by the model catalogue and tests.

    pub fn lit(v: f64, dim: usize) -> Expression {
        Expression {
            root: Node::Num(v),
            dim,
        }
    }

    pub fn zero(dim: usize) -> Expression {
        Expression::lit(0.0, dim)
    }

    /// Coordinate `x{i+1}` (zero-based index).
    pub fn var(i: usize, dim: usize) -> Expression {
        assert!(i < dim);
        Expression {
            root: Node::Var(i),
            dim,
        }
    }

    pub fn add(self, o: Expression) -> Expression {
        self.join(o, Node::Add)
    }

    pub fn sub(self, o: Expression) -> Expression {
        self.join(o, Node::Sub)
    }

    pub fn mul(self, o: Expression) -> Expression {
        self.join(o, Node::Mul)
    }

    pub fn div(self, o: Expression) -> Expression {
        self.join(o, Node::Div)
    }

    pub fn neg(self) -> Expression {
        Expression {
            root: Node::Neg(Box::new(self.root)),
            dim: self.dim,
        }
    }

    pub fn powi(self, k: i32) -> Expression {
        Expression {
            root: Node::Pow(Box::new(self.root), k),
            dim: self.dim,
        }
    }

    pub fn func(self, f: Func) -> Expression {
        Expression {
            root: Node::Func(f, Box::new(self.root)),
            dim: self.dim,
        }
    }

    /// Sum of a sequence, or literal zero when empty.
    pub fn sum(dim: usize, terms: impl IntoIterator<Item = Expression>) -> Expression {
        let mut it = terms.into_iter();
        match it.next() {
            None => Expression::zero(dim),
            Some(first) => it.fold(first, |acc, t| acc.add(t)),
        }
    }

    /// Scale by a constant, folding the trivial cases.
    pub fn scale(self, c: f64) -> Expression {
        if c == 1.0 {
            self
        } else if c == 0.0 {
            Expression::zero(self.dim)
        } else {
            Expression::lit(c, self.dim).mul(self)
        }
    }

    fn join(self, o: Expression, f: impl Fn(Box<Node>, Box<Node>) -> Node) -> Expression {
        assert_eq!(self.dim, o.dim, "operand dimension mismatch");
        Expression {
            root: f(Box::new(self.root), Box::new(o.root)),
            dim: self.dim,
        }
    }
}

fn eval_node(n: &Node, x: &[f64], dim: usize, order: usize) -> Result<Jet, EvalError> {
    let domain_err = |what: &str| EvalError::Domain {
        what: what.to_string(),
        subexpr: print_node(n, 0),
    };
    Ok(match n {
        Node::Num(v) => Jet::constant(*v, dim, order),
        Node::Var(i) => Jet::variable(x[*i], *i, dim, order),
        Node::Add(a, b) => eval_node(a, x, dim, order)?.add(&eval_node(b, x, dim, order)?),
        Node::Sub(a, b) => eval_node(a, x, dim, order)?.sub(&eval_node(b, x, dim, order)?),
        Node::Mul(a, b) => eval_node(a, x, dim, order)?.mul(&eval_node(b, x, dim, order)?),
        Node::Div(a, b) => {
            let den = eval_node(b, x, dim, order)?;
            if den.value == 0.0 {
                return Err(domain_err("division by zero"));
            }
            eval_node(a, x, dim, order)?.mul(&den.recip())
        }
        Node::Neg(a) => eval_node(a, x, dim, order)?.neg(),
        Node::Pow(a, k) => {
            let base = eval_node(a, x, dim, order)?;
            if *k < 0 && base.value == 0.0 {
                return Err(domain_err("zero raised to a negative power"));
            }
            base.powi(*k)
        }
        Node::Func(f, a) => {
            let u = eval_node(a, x, dim, order)?;
            match f {
                Func::Sin => u.sin(),
                Func::Cos => u.cos(),
                Func::Exp => u.exp(),
                Func::Log => {
                    if u.value <= 0.0 {
                        return Err(domain_err("log of a non-positive value"));
                    }
                    u.ln()
                }
                Func::Sqrt => {
                    if u.value < 0.0 || (u.value == 0.0 && order >= 1) {
                        return Err(domain_err("sqrt outside its differentiable domain"));
                    }
                    u.sqrt()
                }
                Func::Abs => {
                    if u.value == 0.0 && order >= 1 {
                        return Err(domain_err("abs is not differentiable at zero"));
                    }
                    u.abs()
                }
            }
        }
    })
}

// Printing. Binary operators are left-associative, so the right operand is
// parenthesized at equal precedence; `^` takes a bare atom as its base.
fn print_node(n: &Node, min_prec: u8) -> String {
    let (s, prec) = match n {
        Node::Num(v) => {
            let s = format_literal(*v);
            let p = if s.starts_with('-') { 3 } else { 5 };
            (s, p)
        }
        Node::Var(i) => (format!("x{}", i + 1), 5),
        Node::Add(a, b) => (
            format!("{} + {}", print_node(a, 1), print_node(b, 2)),
            1,
        ),
        Node::Sub(a, b) => (
            format!("{} - {}", print_node(a, 1), print_node(b, 2)),
            1,
        ),
        Node::Mul(a, b) => (
            format!("{}*{}", print_node(a, 2), print_node(b, 3)),
            2,
        ),
        Node::Div(a, b) => (
            format!("{}/{}", print_node(a, 2), print_node(b, 3)),
            2,
        ),
        Node::Neg(a) => (format!("-{}", print_node(a, 3)), 3),
        Node::Pow(a, k) => (format!("{}^{}", print_node(a, 5), k), 4),
        Node::Func(f, a) => (format!("{}({})", f.name(), print_node(a, 0)), 5),
    };
    if prec < min_prec {
        format!("({s})")
    } else {
        s
    }
}

fn format_literal(v: f64) -> String {
    // Shortest representation that round-trips binary64.
    let s = format!("{v}");
    if s.contains('e') && !s.contains('.') {
        // "1e-3" is valid in the grammar; keep as is.
        s
    } else {
        s
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&print_node(&self.root, 0))
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    dim: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, message: &str) -> ParseError {
        ParseError {
            offset: self.pos + 1,
            message: message.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(b'-') => {
                    self.pos += 1;
                    lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    lhs = Node::Mul(Box::new(lhs), Box::new(self.factor()?));
                }
                Some(b'/') => {
                    self.pos += 1;
                    lhs = Node::Div(Box::new(lhs), Box::new(self.factor()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Node, ParseError> {
        if self.eat(b'-') {
            Ok(Node::Neg(Box::new(self.factor()?)))
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Node, ParseError> {
        let base = self.atom()?;
        if self.eat(b'^') {
            let k = self.integer()?;
            Ok(Node::Pow(Box::new(base), k))
        } else {
            Ok(base)
        }
    }

    fn integer(&mut self) -> Result<i32, ParseError> {
        self.skip_ws();
        let neg = self.eat(b'-');
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected integer exponent"));
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        let k: i32 = text
            .parse()
            .map_err(|_| self.err("exponent out of range"))?;
        Ok(if neg { -k } else { k })
    }

    fn atom(&mut self) -> Result<Node, ParseError> {
        match self.peek() {
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.err("unbalanced parenthesis"));
                }
                Ok(inner)
            }
            Some(c) if c.is_ascii_alphabetic() => self.ident(),
            Some(_) => Err(self.err("expected a number, variable, function, or '('")),
            None => Err(self.err("unexpected end of input")),
        }
    }

    fn number(&mut self) -> Result<Node, ParseError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos < self.src.len() && self.src[self.pos] == b'.' {
            self.pos += 1;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
        }
        // Optional exponent part of the literal.
        if self.pos < self.src.len() && (self.src[self.pos] | 0x20) == b'e' {
            let mark = self.pos;
            self.pos += 1;
            if self.pos < self.src.len() && (self.src[self.pos] == b'+' || self.src[self.pos] == b'-')
            {
                self.pos += 1;
            }
            let digits = self.pos;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if self.pos == digits {
                self.pos = mark;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        let v: f64 = text.parse().map_err(|_| ParseError {
            offset: start + 1,
            message: format!("invalid number literal `{text}`"),
        })?;
        Ok(Node::Num(v))
    }

    fn ident(&mut self) -> Result<Node, ParseError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        if let Some(rest) = name.strip_prefix('x') {
            if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
                let idx: usize = rest.parse().map_err(|_| ParseError {
                    offset: start + 1,
                    message: format!("variable index out of range in `{name}`"),
                })?;
                if idx == 0 || idx > self.dim {
                    return Err(ParseError {
                        offset: start + 1,
                        message: format!(
                            "variable `{name}` out of range for dimension {}",
                            self.dim
                        ),
                    });
                }
                return Ok(Node::Var(idx - 1));
            }
        }
        if let Some(f) = Func::from_name(name) {
            if !self.eat(b'(') {
                return Err(self.err("expected '(' after function name"));
            }
            let arg = self.expr()?;
            if !self.eat(b')') {
                return Err(self.err("unbalanced parenthesis"));
            }
            return Ok(Node::Func(f, Box::new(arg)));
        }
        Err(ParseError {
            offset: start + 1,
            message: format!("unknown identifier `{name}`"),
        })
    }
}
