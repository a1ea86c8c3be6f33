//! Scalar expressions: the integrals of motion, Casimirs and Hamiltonians.
//!
//! Grammar (whitespace is insignificant):
//!
//! ```text
//! expr     := term (('+' | '-') term)*
//! term     := unary (('*' | '/') unary)*
//! unary    := '-' unary | power
//! power    := primary ('^' exponent)*
//! exponent := '-'? primary            (must fold to a constant)
//! primary  := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Functions: `sin cos tan exp log sqrt atan2`.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ParseError {
    #[error("syntax error at character {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown function `{name}` at character {offset}")]
    UnknownFunction { name: String, offset: usize },
    #[error("unknown operator `{op}` at character {offset}")]
    UnknownOperator { op: char, offset: usize },
}

#[derive(Debug, Clone, Copy, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("domain error: {0}")]
    Domain(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
    Atan2,
}

impl Func {
    pub fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "atan2" => Func::Atan2,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Atan2 => "atan2",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Atan2 => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => " + ",
            BinOp::Sub => " - ",
            BinOp::Mul => "*",
            BinOp::Div => "/",
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
        }
    }
}

/// Expression tree. Exponents are always constants.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(String),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, f64),
    Call(Func, Vec<Expr>),
}

impl Expr {
    pub fn var(name: impl Into<String>) -> Expr {
        Expr::Var(name.into())
    }

    pub fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            _ => None,
        }
    }

    fn is_const(&self, v: f64) -> bool {
        matches!(self, Expr::Const(c) if *c == v)
    }

    // Smart constructors: constant folding and 0/1 identities only.

    pub fn add(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => Expr::Const(x + y),
            (Some(x), _) if x == 0.0 => b,
            (_, Some(y)) if y == 0.0 => a,
            _ => Expr::Binary(BinOp::Add, Box::new(a), Box::new(b)),
        }
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => Expr::Const(x - y),
            (Some(x), _) if x == 0.0 => Expr::neg(b),
            (_, Some(y)) if y == 0.0 => a,
            _ => Expr::Binary(BinOp::Sub, Box::new(a), Box::new(b)),
        }
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        if a.is_const(0.0) || b.is_const(0.0) {
            return Expr::Const(0.0);
        }
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => Expr::Const(x * y),
            (Some(x), _) if x == 1.0 => b,
            (_, Some(y)) if y == 1.0 => a,
            (Some(x), _) if x == -1.0 => Expr::neg(b),
            (_, Some(y)) if y == -1.0 => Expr::neg(a),
            _ => Expr::Binary(BinOp::Mul, Box::new(a), Box::new(b)),
        }
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        if a.is_const(0.0) {
            return Expr::Const(0.0);
        }
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) if y != 0.0 => Expr::Const(x / y),
            (_, Some(y)) if y == 1.0 => a,
            _ => Expr::Binary(BinOp::Div, Box::new(a), Box::new(b)),
        }
    }

    pub fn neg(a: Expr) -> Expr {
        match a {
            Expr::Const(c) => Expr::Const(-c),
            Expr::Neg(inner) => *inner,
            other => Expr::Neg(Box::new(other)),
        }
    }

    pub fn pow(a: Expr, exponent: f64) -> Expr {
        if exponent == 0.0 {
            return Expr::Const(1.0);
        }
        if exponent == 1.0 {
            return a;
        }
        if let Some(c) = a.as_const() {
            if let Ok(v) = eval_pow(c, exponent) {
                return Expr::Const(v);
            }
        }
        Expr::Pow(Box::new(a), exponent)
    }

    pub fn call(f: Func, args: Vec<Expr>) -> Expr {
        debug_assert_eq!(args.len(), f.arity());
        if args.iter().all(|a| a.as_const().is_some()) {
            let vals: Vec<f64> = args.iter().filter_map(Expr::as_const).collect();
            if let Ok(v) = eval_func(f, &vals) {
                return Expr::Const(v);
            }
        }
        Expr::Call(f, args)
    }

    /// Sum of a list of terms; empty list gives zero.
    pub fn sum(terms: impl IntoIterator<Item = Expr>) -> Expr {
        terms.into_iter().fold(Expr::Const(0.0), Expr::add)
    }

    pub fn free_vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(v) => {
                out.insert(v.clone());
            }
            Expr::Neg(a) | Expr::Pow(a, _) => a.collect_vars(out),
            Expr::Binary(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.collect_vars(out)),
        }
    }

    /// Replaces variables by expressions; unmapped variables are kept.
    pub fn substitute(&self, map: &HashMap<String, Expr>) -> Expr {
        match self {
            Expr::Const(c) => Expr::Const(*c),
            Expr::Var(v) => map.get(v).cloned().unwrap_or_else(|| self.clone()),
            Expr::Neg(a) => Expr::Neg(Box::new(a.substitute(map))),
            Expr::Binary(op, a, b) => {
                Expr::Binary(*op, Box::new(a.substitute(map)), Box::new(b.substitute(map)))
            }
            Expr::Pow(a, c) => Expr::Pow(Box::new(a.substitute(map)), *c),
            Expr::Call(f, args) => Expr::Call(*f, args.iter().map(|a| a.substitute(map)).collect()),
        }
    }

    /// Exact symbolic derivative with respect to `var`.
    pub fn differentiate(&self, var: &str) -> Expr {
        match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var(v) => Expr::Const(if v == var { 1.0 } else { 0.0 }),
            Expr::Neg(a) => Expr::neg(a.differentiate(var)),
            Expr::Binary(op, a, b) => {
                let (da, db) = (a.differentiate(var), b.differentiate(var));
                let (a, b) = (a.as_ref().clone(), b.as_ref().clone());
                match op {
                    BinOp::Add => Expr::add(da, db),
                    BinOp::Sub => Expr::sub(da, db),
                    BinOp::Mul => Expr::add(Expr::mul(da, b), Expr::mul(a, db)),
                    BinOp::Div => Expr::sub(
                        Expr::div(da, b.clone()),
                        Expr::div(Expr::mul(a, db), Expr::pow(b, 2.0)),
                    ),
                }
            }
            Expr::Pow(a, c) => {
                let da = a.differentiate(var);
                Expr::mul(
                    Expr::mul(Expr::Const(*c), Expr::pow(a.as_ref().clone(), c - 1.0)),
                    da,
                )
            }
            Expr::Call(f, args) => {
                let a = args[0].clone();
                let da = args[0].differentiate(var);
                match f {
                    Func::Sin => Expr::mul(Expr::call(Func::Cos, vec![a]), da),
                    Func::Cos => Expr::mul(Expr::neg(Expr::call(Func::Sin, vec![a])), da),
                    Func::Tan => Expr::div(da, Expr::pow(Expr::call(Func::Cos, vec![a]), 2.0)),
                    Func::Exp => Expr::mul(Expr::call(Func::Exp, vec![a]), da),
                    Func::Log => Expr::div(da, a),
                    Func::Sqrt => Expr::div(
                        da,
                        Expr::mul(Expr::Const(2.0), Expr::call(Func::Sqrt, vec![a])),
                    ),
                    Func::Atan2 => {
                        // atan2(y, x)
                        let (y, x) = (a, args[1].clone());
                        let dx = args[1].differentiate(var);
                        Expr::div(
                            Expr::sub(Expr::mul(x.clone(), da), Expr::mul(y.clone(), dx)),
                            Expr::add(Expr::pow(x, 2.0), Expr::pow(y, 2.0)),
                        )
                    }
                }
            }
        }
    }

    /// Resolves variable names against `vars` (slot order) for fast evaluation.
    pub fn compile<S: AsRef<str>>(&self, vars: &[S]) -> Result<CompiledExpr> {
        let node = compile_node(self, vars)?;
        Ok(CompiledExpr { node })
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Binary(op, ..) => op.precedence(),
            Expr::Neg(_) => 3,
            Expr::Pow(..) => 4,
            Expr::Const(_) | Expr::Var(_) | Expr::Call(..) => 5,
        }
    }
}

impl std::str::FromStr for Expr {
    type Err = ParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s)
    }
}

fn fmt_const(c: f64, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    if c.is_sign_negative() {
        write!(f, "(-{})", -c)
    } else {
        write!(f, "{c}")
    }
}

fn fmt_wrapped(e: &Expr, parens: bool, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    if parens {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => fmt_const(*c, f),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Neg(a) => {
                f.write_str("-")?;
                // a bare literal after '-' would re-parse as a negative constant
                let parens = a.precedence() < 3 || matches!(a.as_ref(), Expr::Const(_));
                fmt_wrapped(a, parens, f)
            }
            Expr::Binary(op, a, b) => {
                let p = op.precedence();
                fmt_wrapped(a, a.precedence() < p, f)?;
                f.write_str(op.symbol())?;
                fmt_wrapped(b, b.precedence() <= p, f)
            }
            Expr::Pow(a, c) => {
                fmt_wrapped(a, a.precedence() < 4, f)?;
                write!(f, "^{c}")
            }
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Parser

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
}

struct Lexed {
    tok: Tok,
    offset: usize, // 1-based character offset
}

fn lex(text: &str) -> Result<Vec<Lexed>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let offset = i + 1;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let s: String = chars[start..i].iter().collect();
            let v: f64 = s.parse().map_err(|_| ParseError::Syntax {
                offset,
                message: format!("malformed number `{s}`"),
            })?;
            out.push(Lexed { tok: Tok::Num(v), offset });
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let s: String = chars[start..i].iter().collect();
            out.push(Lexed { tok: Tok::Ident(s), offset });
            continue;
        }
        let tok = match c {
            '+' | '-' | '*' | '/' | '^' => Tok::Op(c),
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            ',' => Tok::Comma,
            _ => return Err(ParseError::UnknownOperator { op: c, offset }),
        };
        out.push(Lexed { tok, offset });
        i += 1;
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Lexed>,
    pos: usize,
    end_offset: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|l| &l.tok)
    }

    fn peek_at(&self, k: usize) -> Option<&Tok> {
        self.toks.get(self.pos + k).map(|l| &l.tok)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map(|l| l.offset).unwrap_or(self.end_offset)
    }

    fn err(&self, message: impl Into<String>) -> ParseError {
        ParseError::Syntax { offset: self.offset(), message: message.into() }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), ParseError> {
        if self.peek() == Some(&tok) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected {what}")))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(c @ ('+' | '-'))) = self.peek() {
            let op = if *c == '+' { BinOp::Add } else { BinOp::Sub };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Op(c @ ('*' | '/'))) = self.peek() {
            let op = if *c == '*' { BinOp::Mul } else { BinOp::Div };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if let Some(Tok::Op('-')) = self.peek() {
            self.pos += 1;
            // `-3` is a literal unless it is the base of a power
            if let Some(Tok::Num(v)) = self.peek() {
                let v = *v;
                if self.peek_at(1) != Some(&Tok::Op('^')) {
                    self.pos += 1;
                    return Ok(Expr::Const(-v));
                }
            }
            let inner = self.unary()?;
            return Ok(Expr::Neg(Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let mut base = self.primary()?;
        while let Some(Tok::Op('^')) = self.peek() {
            self.pos += 1;
            let at = self.offset();
            let negate = if let Some(Tok::Op('-')) = self.peek() {
                self.pos += 1;
                true
            } else {
                false
            };
            let e = self.primary()?;
            let c = fold_constant(&e).ok_or(ParseError::Syntax {
                offset: at,
                message: "exponent must be a constant".into(),
            })?;
            base = Expr::Pow(Box::new(base), if negate { -c } else { c });
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let offset = self.offset();
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Const(v))
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if self.peek() == Some(&Tok::LParen) {
                    let f = Func::from_name(&name)
                        .ok_or(ParseError::UnknownFunction { name: name.clone(), offset })?;
                    self.pos += 1;
                    let mut args = vec![self.expr()?];
                    while self.peek() == Some(&Tok::Comma) {
                        self.pos += 1;
                        args.push(self.expr()?);
                    }
                    self.expect(Tok::RParen, "`)`")?;
                    if args.len() != f.arity() {
                        return Err(ParseError::Syntax {
                            offset,
                            message: format!(
                                "`{}` takes {} argument(s), got {}",
                                f.name(),
                                f.arity(),
                                args.len()
                            ),
                        });
                    }
                    Ok(Expr::Call(f, args))
                } else {
                    Ok(Expr::Var(name))
                }
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            Some(Tok::RParen) => Err(self.err("unexpected `)`")),
            Some(Tok::Comma) => Err(self.err("unexpected `,`")),
            Some(Tok::Op(c)) => Err(self.err(format!("unexpected operator `{c}`"))),
            None => Err(self.err("unexpected end of input")),
        }
    }
}

fn fold_constant(e: &Expr) -> Option<f64> {
    if !e.free_vars().is_empty() {
        return None;
    }
    e.compile::<&str>(&[]).ok()?.eval(&[]).ok()
}

/// Parses an expression under standard precedence.
pub fn parse(text: &str) -> Result<Expr, ParseError> {
    let toks = lex(text)?;
    if toks.is_empty() {
        return Err(ParseError::Syntax { offset: 1, message: "empty expression".into() });
    }
    let mut p = Parser { toks, pos: 0, end_offset: text.chars().count() + 1 };
    let e = p.expr()?;
    if p.pos != p.toks.len() {
        return Err(p.err("unexpected trailing input"));
    }
    Ok(e)
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone)]
enum Node {
    Const(f64),
    Var(usize),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    PowI(Box<Node>, i32),
    PowF(Box<Node>, f64),
    Call1(Func, Box<Node>),
    Atan2(Box<Node>, Box<Node>),
}

/// An expression with variables resolved to slot indices.
#[derive(Debug, Clone)]
pub struct CompiledExpr {
    node: Node,
}

fn compile_node<S: AsRef<str>>(e: &Expr, vars: &[S]) -> Result<Node> {
    Ok(match e {
        Expr::Const(c) => Node::Const(*c),
        Expr::Var(v) => Node::Var(
            vars.iter()
                .position(|s| s.as_ref() == v)
                .ok_or_else(|| Error::UnboundVariable(v.clone()))?,
        ),
        Expr::Neg(a) => Node::Neg(Box::new(compile_node(a, vars)?)),
        Expr::Binary(op, a, b) => Node::Bin(
            *op,
            Box::new(compile_node(a, vars)?),
            Box::new(compile_node(b, vars)?),
        ),
        Expr::Pow(a, c) => {
            let a = Box::new(compile_node(a, vars)?);
            if c.fract() == 0.0 && c.abs() <= i32::MAX as f64 {
                Node::PowI(a, *c as i32)
            } else {
                Node::PowF(a, *c)
            }
        }
        Expr::Call(Func::Atan2, args) => Node::Atan2(
            Box::new(compile_node(&args[0], vars)?),
            Box::new(compile_node(&args[1], vars)?),
        ),
        Expr::Call(f, args) => Node::Call1(*f, Box::new(compile_node(&args[0], vars)?)),
    })
}

fn eval_pow(base: f64, exponent: f64) -> Result<f64, EvalError> {
    let v = if exponent.fract() == 0.0 && exponent.abs() <= i32::MAX as f64 {
        if base == 0.0 && exponent < 0.0 {
            return Err(EvalError::Domain("zero raised to a negative power"));
        }
        base.powi(exponent as i32)
    } else {
        if base <= 0.0 {
            return Err(EvalError::Domain("non-integer power of a nonpositive base"));
        }
        base.powf(exponent)
    };
    finite(v)
}

fn eval_func(f: Func, args: &[f64]) -> Result<f64, EvalError> {
    let a = args[0];
    let v = match f {
        Func::Sin => a.sin(),
        Func::Cos => a.cos(),
        Func::Tan => a.tan(),
        Func::Exp => a.exp(),
        Func::Log => {
            if a <= 0.0 {
                return Err(EvalError::Domain("log of a nonpositive number"));
            }
            a.ln()
        }
        Func::Sqrt => {
            if a < 0.0 {
                return Err(EvalError::Domain("sqrt of a negative number"));
            }
            a.sqrt()
        }
        Func::Atan2 => a.atan2(args[1]),
    };
    finite(v)
}

#[inline]
fn finite(v: f64) -> Result<f64, EvalError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EvalError::Domain("non-finite result"))
    }
}

impl Node {
    fn eval(&self, x: &[f64]) -> Result<f64, EvalError> {
        match self {
            Node::Const(c) => Ok(*c),
            Node::Var(i) => Ok(x[*i]),
            Node::Neg(a) => Ok(-a.eval(x)?),
            Node::Bin(op, a, b) => {
                let (a, b) = (a.eval(x)?, b.eval(x)?);
                match op {
                    BinOp::Add => finite(a + b),
                    BinOp::Sub => finite(a - b),
                    BinOp::Mul => finite(a * b),
                    BinOp::Div => {
                        if b == 0.0 {
                            Err(EvalError::Domain("division by zero"))
                        } else {
                            finite(a / b)
                        }
                    }
                }
            }
            Node::PowI(a, k) => {
                let a = a.eval(x)?;
                match *k {
                    2 => finite(a * a),
                    k if k < 0 && a == 0.0 => Err(EvalError::Domain("zero raised to a negative power")),
                    k => finite(a.powi(k)),
                }
            }
            Node::PowF(a, c) => eval_pow(a.eval(x)?, *c),
            Node::Call1(f, a) => eval_func(*f, &[a.eval(x)?]),
            Node::Atan2(y, xx) => eval_func(Func::Atan2, &[y.eval(x)?, xx.eval(x)?]),
        }
    }
}

impl CompiledExpr {
    /// Evaluates with `x[i]` bound to the i-th compile-time variable.
    #[inline]
    pub fn eval(&self, x: &[f64]) -> Result<f64, EvalError> {
        self.node.eval(x)
    }
}

/// Ordered `(identifier, value)` pairs with unique identifiers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bindings {
    pairs: Vec<(String, f64)>,
}

impl Bindings {
    pub fn new<I, S>(pairs: I) -> Result<Bindings>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let mut b = Bindings::default();
        for (name, value) in pairs {
            b.insert(name, value)?;
        }
        Ok(b)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: f64) -> Result<()> {
        let name = name.into();
        if self.pairs.iter().any(|(n, _)| *n == name) {
            return Err(Error::Invalid(format!("duplicate binding `{name}`")));
        }
        self.pairs.push((name, value));
        Ok(())
    }

    pub fn names(&self) -> Vec<&str> {
        self.pairs.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.pairs.iter().map(|(_, v)| *v).collect()
    }
}

/// Evaluates `e` under `b`. Unbound variables and domain violations are errors.
pub fn eval(e: &Expr, b: &Bindings) -> Result<f64> {
    let compiled = e.compile(&b.names())?;
    Ok(compiled.eval(&b.values())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> Expr {
        parse(s).unwrap()
    }

    fn ev(s: &str, pairs: &[(&str, f64)]) -> Result<f64> {
        eval(&p(s), &Bindings::new(pairs.iter().map(|(n, v)| (*n, *v))).unwrap())
    }

    #[test]
    fn parses_single_variable() {
        assert_eq!(p("q1"), Expr::var("q1"));
        assert_eq!(p("  q1 "), Expr::var("q1"));
    }

    #[test]
    fn parses_harmonic_energy() {
        let e = p("(p1^2 + q1^2)/2");
        let expected = Expr::Binary(
            BinOp::Div,
            Box::new(Expr::Binary(
                BinOp::Add,
                Box::new(Expr::Pow(Box::new(Expr::var("p1")), 2.0)),
                Box::new(Expr::Pow(Box::new(Expr::var("q1")), 2.0)),
            )),
            Box::new(Expr::Const(2.0)),
        );
        assert_eq!(e, expected);
    }

    #[test]
    fn parses_angular_momentum() {
        let e = p("q1*p2 - q2*p1");
        match e {
            Expr::Binary(BinOp::Sub, a, b) => {
                assert!(matches!(*a, Expr::Binary(BinOp::Mul, ..)));
                assert!(matches!(*b, Expr::Binary(BinOp::Mul, ..)));
            }
            other => panic!("unexpected tree {other:?}"),
        }
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("2 - 3 - 4", &[]).unwrap(), -5.0);
        assert_eq!(ev("8 / 4 / 2", &[]).unwrap(), 1.0);
        assert_eq!(ev("-2^2", &[]).unwrap(), -4.0);
        assert_eq!(ev("2^3^2", &[]).unwrap(), 64.0);
        assert_eq!(ev("2 + 3 * 4", &[]).unwrap(), 14.0);
        assert_eq!(ev("x^-1", &[("x", 4.0)]).unwrap(), 0.25);
        assert_eq!(ev("x^(1/2)", &[("x", 4.0)]).unwrap(), 2.0);
        assert_eq!(ev("atan2(1, 1)", &[]).unwrap(), std::f64::consts::FRAC_PI_4);
    }

    #[test]
    fn parse_errors_carry_offsets() {
        match parse("q1 + * p1") {
            Err(ParseError::Syntax { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("{other:?}"),
        }
        match parse("q1 + foo(p1)") {
            Err(ParseError::UnknownFunction { name, offset }) => {
                assert_eq!(name, "foo");
                assert_eq!(offset, 6);
            }
            other => panic!("{other:?}"),
        }
        match parse("q1 % p1") {
            Err(ParseError::UnknownOperator { op: '%', offset: 4 }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse("(q1 + p1"), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse("q1^p1"), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse(""), Err(ParseError::Syntax { offset: 1, .. })));
        assert!(matches!(parse("atan2(q1)"), Err(ParseError::Syntax { .. })));
    }

    #[test]
    fn evaluates_catalog_examples() {
        assert_eq!(ev("(p1^2+q1^2)/2", &[("q1", 1.0), ("p1", 0.0)]).unwrap(), 0.5);
        let l = ev("q1*p2 - q2*p1", &[("q1", 1.0), ("q2", 0.0), ("p1", 0.0), ("p2", 1.0)]);
        assert_eq!(l.unwrap(), 1.0);
    }

    #[test]
    fn domain_errors_are_reported() {
        assert!(matches!(ev("log(q1)", &[("q1", -1.0)]), Err(Error::Eval(EvalError::Domain(_)))));
        assert!(matches!(ev("1/q1", &[("q1", 0.0)]), Err(Error::Eval(_))));
        assert!(matches!(ev("q1^-2", &[("q1", 0.0)]), Err(Error::Eval(_))));
        assert!(matches!(ev("q1^0.5", &[("q1", -1.0)]), Err(Error::Eval(_))));
        assert!(matches!(ev("sqrt(q1)", &[("q1", -1.0)]), Err(Error::Eval(_))));
        assert!(matches!(ev("exp(q1)", &[("q1", 1000.0)]), Err(Error::Eval(_))));
        assert_eq!(ev("(-2)^3", &[]).unwrap(), -8.0);
    }

    #[test]
    fn unbound_and_duplicate_bindings() {
        assert!(matches!(ev("q1 + p1", &[("q1", 1.0)]), Err(Error::UnboundVariable(v)) if v == "p1"));
        assert!(Bindings::new([("q1", 1.0), ("q1", 2.0)]).is_err());
    }

    #[test]
    fn polynomial_and_product_rules() {
        let vars = ["q1", "q2", "p1", "p2"];
        let d = p("(p1^2+q1^2)/2").differentiate("q1").compile(&vars).unwrap();
        let d2 = p("q1*p2 - q2*p1").differentiate("p1").compile(&vars).unwrap();
        for z in [[0.3, -1.2, 0.7, 2.0], [1.5, 0.25, -0.5, -1.0]] {
            assert!((d.eval(&z).unwrap() - z[0]).abs() < 1e-15);
            assert!((d2.eval(&z).unwrap() + z[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn simplification_is_limited_to_identities() {
        assert_eq!(p("q1").differentiate("q1"), Expr::Const(1.0));
        assert_eq!(p("q1*p1").differentiate("q1"), Expr::var("p1"));
        assert_eq!(p("3*q1 + 2").differentiate("p1"), Expr::Const(0.0));
    }

    #[test]
    fn display_is_readable() {
        assert_eq!(p("(p1^2 + q1^2)/2").to_string(), "(p1^2 + q1^2)/2");
        assert_eq!(p("q1*p2 - q2*p1").to_string(), "q1*p2 - q2*p1");
        assert_eq!(p("-(2)").to_string(), "-(2)");
        assert_eq!(p("a - (b - c)").to_string(), "a - (b - c)");
    }
}
