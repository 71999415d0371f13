//! Closed-form coefficient expressions.
//!
//! A small arithmetic language over named real variables: constants, the four
//! operations, unary `exp`, `abs`, `sqrt`, negation, and the binary functions
//! `min`, `max`, `pow` (also written `a ^ b`). Expressions are parsed by a
//! recursive-descent parser, printed fully parenthesised, and either walked
//! directly with a name map or compiled into a flat stack program over slot
//! indices for the hot loops.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Neg,
    Exp,
    Abs,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
    Pow,
}

/// Expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(String),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn constant(c: f64) -> Self {
        Expr::Const(c)
    }

    pub fn var(name: impl Into<String>) -> Self {
        Expr::Var(name.into())
    }

    pub fn unary(op: UnaryOp, a: Expr) -> Self {
        Expr::Unary(op, Box::new(a))
    }

    pub fn binary(op: BinaryOp, a: Expr, b: Expr) -> Self {
        Expr::Binary(op, Box::new(a), Box::new(b))
    }

    pub fn zero() -> Self {
        Expr::Const(0.0)
    }

    /// True when the expression is literally the constant zero.
    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 0.0)
    }

    /// Names of all variables referenced.
    pub fn variables(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(name) => {
                out.insert(name.clone());
            }
            Expr::Unary(_, a) => a.collect_vars(out),
            Expr::Binary(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }

    /// Evaluates with a name → value map.
    pub fn eval(&self, bindings: &HashMap<String, f64>) -> Result<f64> {
        let value = self.eval_with(&|name| bindings.get(name).copied())?;
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFinite)
        }
    }

    fn eval_with(&self, lookup: &dyn Fn(&str) -> Option<f64>) -> Result<f64> {
        match self {
            Expr::Const(c) => Ok(*c),
            Expr::Var(name) => lookup(name).ok_or_else(|| Error::MissingBinding(name.clone())),
            Expr::Unary(op, a) => apply_unary(*op, a.eval_with(lookup)?),
            Expr::Binary(op, a, b) => apply_binary(*op, a.eval_with(lookup)?, b.eval_with(lookup)?),
        }
    }

    /// Polynomial degree in the variables selected by `is_target`, or `None`
    /// when the expression is not polynomial in them (for instance `exp(y)`
    /// or a target variable in a denominator).
    pub fn degree_in(&self, is_target: &dyn Fn(&str) -> bool) -> Option<u32> {
        match self {
            Expr::Const(_) => Some(0),
            Expr::Var(name) => Some(u32::from(is_target(name))),
            Expr::Unary(UnaryOp::Neg, a) => a.degree_in(is_target),
            Expr::Unary(_, a) => match a.degree_in(is_target)? {
                0 => Some(0),
                _ => None,
            },
            Expr::Binary(op, a, b) => {
                let da = a.degree_in(is_target)?;
                let db = b.degree_in(is_target)?;
                match op {
                    BinaryOp::Add | BinaryOp::Sub => Some(da.max(db)),
                    BinaryOp::Mul => Some(da + db),
                    BinaryOp::Div => (db == 0).then_some(da),
                    BinaryOp::Min | BinaryOp::Max => (da == 0 && db == 0).then_some(0),
                    BinaryOp::Pow => match (da, b.as_ref()) {
                        (0, _) if db == 0 => Some(0),
                        (_, Expr::Const(k)) if *k >= 0.0 && k.fract() == 0.0 && *k <= 16.0 => Some(da * (*k as u32)),
                        _ => None,
                    },
                }
            }
        }
    }

    /// Compiles into a stack program; `slot_of` maps variable names to slots.
    pub fn compile(&self, slot_of: &dyn Fn(&str) -> Option<usize>) -> Result<Program> {
        let mut ops = Vec::new();
        let mut depth = 0usize;
        let mut max_depth = 0usize;
        self.emit(slot_of, &mut ops, &mut depth, &mut max_depth)?;
        Ok(Program { ops, max_depth })
    }

    fn emit(
        &self,
        slot_of: &dyn Fn(&str) -> Option<usize>,
        ops: &mut Vec<Op>,
        depth: &mut usize,
        max_depth: &mut usize,
    ) -> Result<()> {
        match self {
            Expr::Const(c) => {
                ops.push(Op::Const(*c));
                *depth += 1;
            }
            Expr::Var(name) => {
                let slot = slot_of(name).ok_or_else(|| Error::MissingBinding(name.clone()))?;
                ops.push(Op::Var(slot));
                *depth += 1;
            }
            Expr::Unary(op, a) => {
                a.emit(slot_of, ops, depth, max_depth)?;
                ops.push(Op::Unary(*op));
            }
            Expr::Binary(op, a, b) => {
                a.emit(slot_of, ops, depth, max_depth)?;
                b.emit(slot_of, ops, depth, max_depth)?;
                ops.push(Op::Binary(*op));
                *depth -= 1;
            }
        }
        *max_depth = (*max_depth).max(*depth);
        Ok(())
    }
}

fn apply_unary(op: UnaryOp, a: f64) -> Result<f64> {
    let r = match op {
        UnaryOp::Neg => -a,
        UnaryOp::Exp => a.exp(),
        UnaryOp::Abs => a.abs(),
        UnaryOp::Sqrt => {
            if a < 0.0 {
                return Err(Error::SqrtOfNegative(a));
            }
            a.sqrt()
        }
    };
    if r.is_nan() {
        Err(Error::NonFinite)
    } else {
        Ok(r)
    }
}

fn apply_binary(op: BinaryOp, a: f64, b: f64) -> Result<f64> {
    let r = match op {
        BinaryOp::Add => a + b,
        BinaryOp::Sub => a - b,
        BinaryOp::Mul => a * b,
        BinaryOp::Div => {
            if b == 0.0 {
                return Err(Error::DivisionByZero);
            }
            a / b
        }
        BinaryOp::Min => {
            if a <= b {
                a
            } else {
                b
            }
        }
        BinaryOp::Max => {
            if a >= b {
                a
            } else {
                b
            }
        }
        BinaryOp::Pow => a.powf(b),
    };
    if r.is_nan() {
        Err(Error::NonFinite)
    } else {
        Ok(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Const(f64),
    Var(usize),
    Unary(UnaryOp),
    Binary(BinaryOp),
}

const INLINE_STACK: usize = 32;

/// Compiled expression evaluated against a slot vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    ops: Vec<Op>,
    max_depth: usize,
}

impl Program {
    pub fn eval(&self, slots: &[f64]) -> Result<f64> {
        if let [Op::Const(c)] = self.ops.as_slice() {
            return Ok(*c);
        }
        if self.max_depth <= INLINE_STACK {
            let mut stack = [0.0f64; INLINE_STACK];
            self.run(slots, &mut stack)
        } else {
            let mut stack = vec![0.0f64; self.max_depth];
            self.run(slots, &mut stack)
        }
    }

    fn run(&self, slots: &[f64], stack: &mut [f64]) -> Result<f64> {
        let mut top = 0usize;
        for op in &self.ops {
            match *op {
                Op::Const(c) => {
                    stack[top] = c;
                    top += 1;
                }
                Op::Var(s) => {
                    stack[top] = slots[s];
                    top += 1;
                }
                Op::Unary(u) => stack[top - 1] = apply_unary(u, stack[top - 1])?,
                Op::Binary(b) => {
                    top -= 1;
                    stack[top - 1] = apply_binary(b, stack[top - 1], stack[top])?;
                }
            }
        }
        let value = stack[0];
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFinite)
        }
    }

    /// True when the program is a single constant.
    pub fn as_constant(&self) -> Option<f64> {
        match self.ops.as_slice() {
            [Op::Const(c)] => Some(*c),
            _ => None,
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) if *c < 0.0 => write!(f, "(-{:?})", -c),
            Expr::Const(c) => write!(f, "{c:?}"),
            Expr::Var(name) => f.write_str(name),
            Expr::Unary(UnaryOp::Neg, a) => write!(f, "(-{a})"),
            Expr::Unary(op, a) => {
                let name = match op {
                    UnaryOp::Exp => "exp",
                    UnaryOp::Abs => "abs",
                    UnaryOp::Sqrt => "sqrt",
                    UnaryOp::Neg => unreachable!(),
                };
                write!(f, "{name}({a})")
            }
            Expr::Binary(op, a, b) => match op {
                BinaryOp::Add => write!(f, "({a} + {b})"),
                BinaryOp::Sub => write!(f, "({a} - {b})"),
                BinaryOp::Mul => write!(f, "({a} * {b})"),
                BinaryOp::Div => write!(f, "({a} / {b})"),
                BinaryOp::Min => write!(f, "min({a}, {b})"),
                BinaryOp::Max => write!(f, "max({a}, {b})"),
                BinaryOp::Pow => write!(f, "pow({a}, {b})"),
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
    End,
}

fn tokenize(text: &str) -> Result<Vec<(Token, usize)>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\r' | b'\n' => {
                i += 1;
                continue;
            }
            b'+' => out.push((Token::Plus, start)),
            b'-' => out.push((Token::Minus, start)),
            b'*' => out.push((Token::Star, start)),
            b'/' => out.push((Token::Slash, start)),
            b'^' => out.push((Token::Caret, start)),
            b'(' => out.push((Token::LParen, start)),
            b')' => out.push((Token::RParen, start)),
            b',' => out.push((Token::Comma, start)),
            b'0'..=b'9' | b'.' => {
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        while j < bytes.len() && bytes[j].is_ascii_digit() {
                            j += 1;
                        }
                        i = j;
                    }
                }
                let literal = &text[start..i];
                let value: f64 = literal.parse().map_err(|_| Error::Syntax {
                    offset: start,
                    message: format!("malformed number `{literal}`"),
                })?;
                out.push((Token::Num(value), start));
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((Token::Ident(text[start..i].to_string()), start));
                continue;
            }
            _ => {
                let ch = text[start..].chars().next().unwrap_or('?');
                return Err(Error::Syntax {
                    offset: start,
                    message: format!("unexpected character `{ch}`"),
                });
            }
        }
        i += 1;
    }
    out.push((Token::End, text.len()));
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<(Token, usize)>,
    pos: usize,
    allowed: &'a dyn Fn(&str) -> bool,
}

impl Parser<'_> {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos].0
    }

    fn offset(&self) -> usize {
        self.tokens[self.pos].1
    }

    fn bump(&mut self) -> Token {
        let t = self.tokens[self.pos].0.clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T> {
        let message = match self.peek() {
            Token::End => format!("{} (at end of input)", message.into()),
            _ => message.into(),
        };
        Err(Error::Syntax {
            offset: self.offset(),
            message,
        })
    }

    fn expect(&mut self, want: Token, what: &str) -> Result<()> {
        if *self.peek() == want {
            self.bump();
            Ok(())
        } else {
            self.error(format!("expected {what}"))
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Token::Plus => BinaryOp::Add,
                Token::Minus => BinaryOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Expr::binary(op, lhs, rhs);
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.factor()?;
        loop {
            let op = match self.peek() {
                Token::Star => BinaryOp::Mul,
                Token::Slash => BinaryOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.factor()?;
            lhs = Expr::binary(op, lhs, rhs);
        }
    }

    fn factor(&mut self) -> Result<Expr> {
        if *self.peek() == Token::Minus {
            self.bump();
            let inner = self.factor()?;
            return Ok(Expr::unary(UnaryOp::Neg, inner));
        }
        let base = self.atom()?;
        if *self.peek() == Token::Caret {
            self.bump();
            let exponent = self.factor()?;
            return Ok(Expr::binary(BinaryOp::Pow, base, exponent));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        let offset = self.offset();
        match self.peek().clone() {
            Token::Num(v) => {
                self.bump();
                Ok(Expr::Const(v))
            }
            Token::LParen => {
                self.bump();
                let inner = self.expr()?;
                self.expect(Token::RParen, "`)`")?;
                Ok(inner)
            }
            Token::Ident(name) => {
                self.bump();
                if *self.peek() == Token::LParen {
                    self.call(&name, offset)
                } else if (self.allowed)(&name) {
                    Ok(Expr::Var(name))
                } else {
                    Err(Error::UnknownIdentifier { name, offset })
                }
            }
            _ => self.error("expected a number, variable, function call or `(`"),
        }
    }

    fn call(&mut self, name: &str, offset: usize) -> Result<Expr> {
        self.expect(Token::LParen, "`(`")?;
        let unary = match name {
            "exp" => Some(UnaryOp::Exp),
            "abs" => Some(UnaryOp::Abs),
            "sqrt" => Some(UnaryOp::Sqrt),
            _ => None,
        };
        if let Some(op) = unary {
            let a = self.expr()?;
            self.expect(Token::RParen, "`)`")?;
            return Ok(Expr::unary(op, a));
        }
        let op = match name {
            "min" => BinaryOp::Min,
            "max" => BinaryOp::Max,
            "pow" => BinaryOp::Pow,
            _ => {
                return Err(Error::UnknownIdentifier {
                    name: name.to_string(),
                    offset,
                })
            }
        };
        let a = self.expr()?;
        self.expect(Token::Comma, "`,`")?;
        let b = self.expr()?;
        self.expect(Token::RParen, "`)`")?;
        Ok(Expr::binary(op, a, b))
    }
}

/// Parses `text`, accepting only identifiers listed in `allowed_vars`.
pub fn parse_expression<S: AsRef<str>>(text: &str, allowed_vars: &[S]) -> Result<Expr> {
    let allowed = |name: &str| allowed_vars.iter().any(|v| v.as_ref() == name);
    parse_with(text, &allowed)
}

pub(crate) fn parse_with(text: &str, allowed: &dyn Fn(&str) -> bool) -> Result<Expr> {
    let mut parser = Parser {
        tokens: tokenize(text)?,
        pos: 0,
        allowed,
    };
    let expr = parser.expr()?;
    if *parser.peek() != Token::End {
        return parser.error("unexpected trailing input");
    }
    Ok(expr)
}

/// Evaluates `e` under `bindings`.
pub fn eval_expression(e: &Expr, bindings: &HashMap<String, f64>) -> Result<f64> {
    e.eval(bindings)
}
