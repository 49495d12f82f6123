//! A small language of smooth expressions.
//!
//! Profiles, interpolation functions and vector fields are written as text
//! (`"bump((r-0.5)/0.25)"`, `"1 - smoothstep((x1^2-0.25)/0.39)"`) and parsed
//! into an [`Expr`]. The grammar only admits smooth primitives, every node has
//! a symbolic derivative, and hot loops evaluate a compiled stack program
//! ([`Program`]) instead of walking the tree.
//!
//! ```text
//! expr   := term (('+'|'-') term)*
//! term   := factor (('*'|'/') factor)*
//! factor := '-' factor | base ('^' integer)?
//! base   := number | ident | ident '(' args ')' | '(' expr ')'
//! ```
//!
//! Identifiers: `r`, `theta`, `phi`, `t`, `s`, `x1` .. `x16`, and the
//! constant `pi`. Functions: `sin`, `cos`, `exp`, `bump`, `smoothstep`,
//! `smin(a, b[, k])`, `smax(a, b[, k])`.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Values of `1 - u^2` (for `bump`) or of `u`, `1 - u` (for `smoothstep`)
/// below this cutoff evaluate to the limiting value; `exp(-700)` is below
/// `1e-304`.
const FLAT_CUTOFF: f64 = 1.0 / 700.0;

/// Default sharpness for `smin` / `smax` when no third argument is given.
const DEFAULT_SHARPNESS: f64 = 0.1;

pub const MAX_X: u8 = 16;
pub const ENV_SLOTS: usize = 5 + MAX_X as usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    R,
    Theta,
    Phi,
    T,
    S,
    /// `x1`, `x2`, ... (1-based).
    X(u8),
}

impl Var {
    pub fn slot(self) -> usize {
        match self {
            Var::R => 0,
            Var::Theta => 1,
            Var::Phi => 2,
            Var::T => 3,
            Var::S => 4,
            Var::X(i) => 4 + i as usize,
        }
    }

    fn parse(name: &str) -> Option<Var> {
        match name {
            "r" => Some(Var::R),
            "theta" => Some(Var::Theta),
            "phi" => Some(Var::Phi),
            "t" => Some(Var::T),
            "s" => Some(Var::S),
            _ => {
                let idx: u8 = name.strip_prefix('x')?.parse().ok()?;
                (1..=MAX_X).contains(&idx).then_some(Var::X(idx))
            }
        }
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::R => write!(f, "r"),
            Var::Theta => write!(f, "theta"),
            Var::Phi => write!(f, "phi"),
            Var::T => write!(f, "t"),
            Var::S => write!(f, "s"),
            Var::X(i) => write!(f, "x{i}"),
        }
    }
}

/// Variable bindings for evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Env {
    vals: [f64; ENV_SLOTS],
}

impl Default for Env {
    fn default() -> Self {
        Env {
            vals: [0.0; ENV_SLOTS],
        }
    }
}

impl Env {
    pub fn new() -> Self {
        Self::default()
    }

    /// Binds `x1..xn` to the given coordinates.
    pub fn from_x(xs: &[f64]) -> Self {
        let mut env = Env::default();
        env.set_x(xs);
        env
    }

    pub fn set(&mut self, var: Var, value: f64) -> &mut Self {
        self.vals[var.slot()] = value;
        self
    }

    pub fn with(mut self, var: Var, value: f64) -> Self {
        self.vals[var.slot()] = value;
        self
    }

    pub fn set_x(&mut self, xs: &[f64]) -> &mut Self {
        assert!(xs.len() <= MAX_X as usize, "too many coordinates");
        self.vals[5..5 + xs.len()].copy_from_slice(xs);
        self
    }

    pub fn get(&self, var: Var) -> f64 {
        self.vals[var.slot()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Bump,
    Smoothstep,
    Smin,
    Smax,
}

impl Func {
    fn parse(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "bump" => Func::Bump,
            "smoothstep" => Func::Smoothstep,
            "smin" => Func::Smin,
            "smax" => Func::Smax,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Bump => "bump",
            Func::Smoothstep => "smoothstep",
            Func::Smin => "smin",
            Func::Smax => "smax",
        }
    }
}

const NONSMOOTH: &[&str] = &[
    "abs", "sqrt", "min", "max", "floor", "ceil", "round", "sign", "step", "heaviside", "mod",
    "frac", "if", "ln", "log",
];

/// `bump(u) = exp(-1/(1-u^2))` for `|u| < 1`, else 0.
pub fn bump(u: f64) -> f64 {
    let w = 1.0 - u * u;
    if w > FLAT_CUTOFF {
        (-1.0 / w).exp()
    } else {
        0.0
    }
}

/// Smooth monotone step: 0 for `u <= 0`, 1 for `u >= 1`, built from the
/// same `exp(-1/v)` germ as [`bump`].
pub fn smoothstep(u: f64) -> f64 {
    if u <= 0.0 {
        0.0
    } else if u >= 1.0 {
        1.0
    } else {
        let a = (-1.0 / u).exp();
        let b = (-1.0 / (1.0 - u)).exp();
        a / (a + b)
    }
}

fn smin(a: f64, b: f64, k: f64) -> f64 {
    let m = a.min(b);
    m - k * (-(a - b).abs() / k).exp().ln_1p()
}

fn smin_weight(a: f64, b: f64, k: f64) -> f64 {
    // weight of `a` in d smin = w a' + (1-w) b'
    1.0 / (1.0 + ((a - b) / k).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Powi(Box<Expr>, i32),
    Call(Func, Vec<Expr>),
    /// Weight `w(a, b, k)` of the first argument in the derivative of smin.
    SminWeight(Box<Expr>, Box<Expr>, f64),
    /// `body` where `1 - u^2 > cutoff`, else 0. Derivatives of `bump`.
    BumpGuard(Box<Expr>, Box<Expr>),
    /// `body` where `cutoff < u < 1 - cutoff`, else 0. Derivatives of `smoothstep`.
    UnitGuard(Box<Expr>, Box<Expr>),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("syntax error at line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("unknown identifier `{name}` at line {line}, column {col}")]
    UnknownIdent { name: String, line: usize, col: usize },
    #[error("`{name}` at line {line}, column {col} is not smooth and is not part of the grammar")]
    NonSmooth { name: String, line: usize, col: usize },
    #[error("denominator vanishes at sampled point {at:?}")]
    VanishingDenominator { at: Vec<(String, f64)> },
}

impl Expr {
    pub fn parse(text: &str) -> Result<Expr, ExprError> {
        Parser::new(text)?.parse_all()
    }

    pub fn constant(c: f64) -> Expr {
        Expr::Const(c)
    }

    pub fn var(v: Var) -> Expr {
        Expr::Var(v)
    }

    pub fn eval(&self, env: &Env) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(v) => env.get(*v),
            Expr::Neg(a) => -a.eval(env),
            Expr::Add(a, b) => a.eval(env) + b.eval(env),
            Expr::Sub(a, b) => a.eval(env) - b.eval(env),
            Expr::Mul(a, b) => a.eval(env) * b.eval(env),
            Expr::Div(a, b) => a.eval(env) / b.eval(env),
            Expr::Powi(a, n) => a.eval(env).powi(*n),
            Expr::Call(f, args) => {
                let x = args[0].eval(env);
                match f {
                    Func::Sin => x.sin(),
                    Func::Cos => x.cos(),
                    Func::Exp => x.exp(),
                    Func::Bump => bump(x),
                    Func::Smoothstep => smoothstep(x),
                    Func::Smin | Func::Smax => {
                        let y = args[1].eval(env);
                        let k = sharpness(args);
                        if *f == Func::Smin {
                            smin(x, y, k)
                        } else {
                            -smin(-x, -y, k)
                        }
                    }
                }
            }
            Expr::SminWeight(a, b, k) => smin_weight(a.eval(env), b.eval(env), *k),
            Expr::BumpGuard(u, body) => {
                let u = u.eval(env);
                if 1.0 - u * u > FLAT_CUTOFF {
                    body.eval(env)
                } else {
                    0.0
                }
            }
            Expr::UnitGuard(u, body) => {
                let u = u.eval(env);
                if u > FLAT_CUTOFF && u < 1.0 - FLAT_CUTOFF {
                    body.eval(env)
                } else {
                    0.0
                }
            }
        }
    }

    /// Symbolic partial derivative with light constant folding.
    pub fn derivative(&self, var: Var) -> Expr {
        use Expr::*;
        match self {
            Const(_) => Const(0.0),
            Var(v) => Const(if *v == var { 1.0 } else { 0.0 }),
            Neg(a) => neg(a.derivative(var)),
            Add(a, b) => add(a.derivative(var), b.derivative(var)),
            Sub(a, b) => sub(a.derivative(var), b.derivative(var)),
            Mul(a, b) => add(
                mul(a.derivative(var), (**b).clone()),
                mul((**a).clone(), b.derivative(var)),
            ),
            Div(a, b) => {
                let num = sub(
                    mul(a.derivative(var), (**b).clone()),
                    mul((**a).clone(), b.derivative(var)),
                );
                div(num, powi((**b).clone(), 2))
            }
            Powi(a, n) => {
                let inner = if *n == 1 {
                    Const(1.0)
                } else {
                    mul(Const(*n as f64), powi((**a).clone(), n - 1))
                };
                mul(inner, a.derivative(var))
            }
            Call(f, args) => {
                let u = &args[0];
                let du = u.derivative(var);
                match f {
                    Func::Sin => mul(Call(Func::Cos, vec![u.clone()]), du),
                    Func::Cos => mul(neg(Call(Func::Sin, vec![u.clone()])), du),
                    Func::Exp => mul(self.clone(), du),
                    Func::Bump => {
                        // bump' = bump * (-2u) / (1-u^2)^2
                        let w = sub(Const(1.0), powi(u.clone(), 2));
                        let body = div(mul(self.clone(), mul(Const(-2.0), u.clone())), powi(w, 2));
                        mul(BumpGuard(Box::new(u.clone()), Box::new(body)), du)
                    }
                    Func::Smoothstep => {
                        // s' = s (1-s) (1/u^2 + 1/(1-u)^2)
                        let s = self.clone();
                        let body = mul(
                            mul(s.clone(), sub(Const(1.0), s)),
                            add(
                                powi(u.clone(), -2),
                                powi(sub(Const(1.0), u.clone()), -2),
                            ),
                        );
                        mul(UnitGuard(Box::new(u.clone()), Box::new(body)), du)
                    }
                    Func::Smin | Func::Smax => {
                        let k = sharpness(args);
                        let (a, b) = (args[0].clone(), args[1].clone());
                        let (da, db) = (a.derivative(var), b.derivative(var));
                        let w = if *f == Func::Smin {
                            SminWeight(Box::new(a), Box::new(b), k)
                        } else {
                            SminWeight(Box::new(neg(a)), Box::new(neg(b)), k)
                        };
                        add(mul(w.clone(), da), mul(sub(Const(1.0), w), db))
                    }
                }
            }
            SminWeight(a, b, k) => {
                // w = 1/(1+e), e = exp((a-b)/k); w' = -w(1-w)(a'-b')/k
                let w = self.clone();
                let d = sub(a.derivative(var), b.derivative(var));
                mul(
                    neg(mul(w.clone(), sub(Const(1.0), w))),
                    div(d, Const(*k)),
                )
            }
            BumpGuard(u, body) => guard(true, (**u).clone(), body.derivative(var)),
            UnitGuard(u, body) => guard(false, (**u).clone(), body.derivative(var)),
        }
    }

    /// True if the expression mentions `var`.
    pub fn depends_on(&self, var: Var) -> bool {
        let mut found = false;
        self.visit(&mut |e| {
            if let Expr::Var(v) = e {
                found |= *v == var;
            }
        });
        found
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.visit(&mut |e| {
            if let Expr::Var(v) = e {
                if !out.contains(v) {
                    out.push(*v);
                }
            }
        });
        out.sort();
        out
    }

    fn visit(&self, f: &mut impl FnMut(&Expr)) {
        f(self);
        match self {
            Expr::Const(_) | Expr::Var(_) => {}
            Expr::Neg(a) | Expr::Powi(a, _) => a.visit(f),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::SminWeight(a, b, _)
            | Expr::BumpGuard(a, b)
            | Expr::UnitGuard(a, b) => {
                a.visit(f);
                b.visit(f);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.visit(f)),
        }
    }

    /// Samples every denominator at the given points and fails if one comes
    /// within `tol` of zero.
    pub fn check_denominators<I>(&self, samples: I, tol: f64) -> Result<(), ExprError>
    where
        I: IntoIterator<Item = Env>,
    {
        let mut dens = Vec::new();
        self.visit(&mut |e| {
            if let Expr::Div(_, b) = e {
                dens.push((**b).clone());
            }
        });
        if dens.is_empty() {
            return Ok(());
        }
        let vars = self.vars();
        for env in samples {
            for d in &dens {
                if d.eval(&env).abs() <= tol {
                    return Err(ExprError::VanishingDenominator {
                        at: vars.iter().map(|v| (v.to_string(), env.get(*v))).collect(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn compile(&self) -> Program {
        let mut prog = Program::default();
        prog.emit(self);
        prog.depth = prog.required_depth();
        prog
    }
}

fn sharpness(args: &[Expr]) -> f64 {
    match args.get(2) {
        Some(Expr::Const(k)) => *k,
        Some(_) => unreachable!("sharpness is validated to be constant at parse time"),
        None => DEFAULT_SHARPNESS,
    }
}

fn is_const(e: &Expr, c: f64) -> bool {
    matches!(e, Expr::Const(x) if *x == c)
}

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Const(c) => Expr::Const(-c),
        Expr::Neg(inner) => *inner,
        a => Expr::Neg(Box::new(a)),
    }
}

fn add(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x + y),
        _ if is_const(&a, 0.0) => b,
        _ if is_const(&b, 0.0) => a,
        _ => Expr::Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x - y),
        _ if is_const(&b, 0.0) => a,
        _ if is_const(&a, 0.0) => neg(b),
        _ => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x * y),
        _ if is_const(&a, 0.0) || is_const(&b, 0.0) => Expr::Const(0.0),
        _ if is_const(&a, 1.0) => b,
        _ if is_const(&b, 1.0) => a,
        _ => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        _ if is_const(&a, 0.0) => Expr::Const(0.0),
        _ if is_const(&b, 1.0) => a,
        _ => Expr::Div(Box::new(a), Box::new(b)),
    }
}

fn powi(a: Expr, n: i32) -> Expr {
    match (&a, n) {
        (_, 0) => Expr::Const(1.0),
        (_, 1) => a,
        (Expr::Const(c), n) => Expr::Const(c.powi(n)),
        _ => Expr::Powi(Box::new(a), n),
    }
}

fn guard(bump_kind: bool, u: Expr, body: Expr) -> Expr {
    if is_const(&body, 0.0) {
        return Expr::Const(0.0);
    }
    if bump_kind {
        Expr::BumpGuard(Box::new(u), Box::new(body))
    } else {
        Expr::UnitGuard(Box::new(u), Box::new(body))
    }
}

impl std::ops::Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        add(self, rhs)
    }
}

impl std::ops::Sub for Expr {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        sub(self, rhs)
    }
}

impl std::ops::Mul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        mul(self, rhs)
    }
}

impl std::ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        neg(self)
    }
}

fn fmt_num(c: f64, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    if c < 0.0 {
        write!(f, "(-{:?})", -c)
    } else {
        write!(f, "{c:?}")
    }
}

impl fmt::Display for Expr {
    /// Fully parenthesized; user-level nodes re-parse to an equal tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => fmt_num(*c, f),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Powi(a, n) => write!(f, "({a}^{n})"),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
            Expr::SminWeight(a, b, k) => write!(f, "$sminw({a}, {b}, {k:?})"),
            Expr::BumpGuard(u, b) => write!(f, "$bumpguard({u}, {b})"),
            Expr::UnitGuard(u, b) => write!(f, "$unitguard({u}, {b})"),
        }
    }
}

impl Serialize for Expr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Expr::parse(&text).map_err(serde::de::Error::custom)
    }
}

impl std::str::FromStr for Expr {
    type Err = ExprError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Expr::parse(s)
    }
}

// ---------------------------------------------------------------------------
// parser

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    End,
}

#[derive(Clone, Debug)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn tokenize(text: &str) -> Result<Vec<Token>, ExprError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        let (start_line, start_col) = (line, col);
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
            let lit: String = chars[start..i].iter().collect();
            let value = lit.parse::<f64>().map_err(|_| ExprError::Syntax {
                line: start_line,
                col: start_col,
                msg: format!("malformed number `{lit}`"),
            })?;
            col += i - start;
            out.push(Token {
                tok: Tok::Num(value),
                line: start_line,
                col: start_col,
            });
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            col += i - start;
            out.push(Token {
                tok: Tok::Ident(chars[start..i].iter().collect()),
                line: start_line,
                col: start_col,
            });
        } else if "+-*/^(),".contains(c) {
            i += 1;
            col += 1;
            out.push(Token {
                tok: Tok::Op(c),
                line: start_line,
                col: start_col,
            });
        } else {
            return Err(ExprError::Syntax {
                line,
                col,
                msg: format!("unexpected character `{c}`"),
            });
        }
    }
    out.push(Token {
        tok: Tok::End,
        line,
        col,
    });
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn new(text: &str) -> Result<Self, ExprError> {
        Ok(Parser {
            toks: tokenize(text)?,
            pos: 0,
        })
    }

    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn next(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn err<T>(&self, tok: &Token, msg: impl Into<String>) -> Result<T, ExprError> {
        Err(ExprError::Syntax {
            line: tok.line,
            col: tok.col,
            msg: msg.into(),
        })
    }

    fn expect(&mut self, c: char) -> Result<(), ExprError> {
        let t = self.next();
        if t.tok == Tok::Op(c) {
            Ok(())
        } else {
            self.err(&t, format!("expected `{c}`"))
        }
    }

    fn parse_all(mut self) -> Result<Expr, ExprError> {
        let e = self.expr()?;
        let t = self.peek().clone();
        if t.tok != Tok::End {
            return self.err(&t, "unexpected trailing input");
        }
        Ok(e)
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek().tok {
                Tok::Op('+') => {
                    self.next();
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Tok::Op('-') => {
                    self.next();
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek().tok {
                Tok::Op('*') => {
                    self.next();
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.factor()?));
                }
                Tok::Op('/') => {
                    self.next();
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.factor()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Expr, ExprError> {
        if self.peek().tok == Tok::Op('-') {
            self.next();
            return Ok(Expr::Neg(Box::new(self.factor()?)));
        }
        let base = self.base()?;
        if self.peek().tok == Tok::Op('^') {
            self.next();
            let mut sign = 1;
            if self.peek().tok == Tok::Op('-') {
                self.next();
                sign = -1;
            }
            let t = self.next();
            match t.tok {
                Tok::Num(v) if v.fract() == 0.0 && v.abs() < 1e6 => {
                    return Ok(Expr::Powi(Box::new(base), sign * v as i32));
                }
                _ => return self.err(&t, "exponent must be an integer literal"),
            }
        }
        Ok(base)
    }

    fn base(&mut self) -> Result<Expr, ExprError> {
        let t = self.next();
        match &t.tok {
            Tok::Num(v) => Ok(Expr::Const(*v)),
            Tok::Op('(') => {
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Tok::Ident(name) => {
                if self.peek().tok == Tok::Op('(') {
                    self.next();
                    let mut args = vec![self.expr()?];
                    while self.peek().tok == Tok::Op(',') {
                        self.next();
                        args.push(self.expr()?);
                    }
                    self.expect(')')?;
                    self.call(&t, name, args)
                } else if name == "pi" {
                    Ok(Expr::Const(std::f64::consts::PI))
                } else if let Some(v) = Var::parse(name) {
                    Ok(Expr::Var(v))
                } else if NONSMOOTH.contains(&name.as_str()) {
                    Err(ExprError::NonSmooth {
                        name: name.clone(),
                        line: t.line,
                        col: t.col,
                    })
                } else {
                    Err(ExprError::UnknownIdent {
                        name: name.clone(),
                        line: t.line,
                        col: t.col,
                    })
                }
            }
            Tok::End => self.err(&t, "unexpected end of input"),
            Tok::Op(c) => self.err(&t, format!("unexpected `{c}`")),
        }
    }

    fn call(&self, t: &Token, name: &str, mut args: Vec<Expr>) -> Result<Expr, ExprError> {
        let Some(func) = Func::parse(name) else {
            if NONSMOOTH.contains(&name) {
                return Err(ExprError::NonSmooth {
                    name: name.to_string(),
                    line: t.line,
                    col: t.col,
                });
            }
            return Err(ExprError::UnknownIdent {
                name: name.to_string(),
                line: t.line,
                col: t.col,
            });
        };
        let arity_ok = match func {
            Func::Smin | Func::Smax => args.len() == 2 || args.len() == 3,
            _ => args.len() == 1,
        };
        if !arity_ok {
            return self.err(t, format!("wrong number of arguments to `{name}`"));
        }
        if args.len() == 3 {
            let k = Program::fold_const(&args[2]);
            match k {
                Some(k) if k > 0.0 => args[2] = Expr::Const(k),
                _ => return self.err(t, "sharpness must be a positive constant"),
            }
        }
        Ok(Expr::Call(func, args))
    }
}

// ---------------------------------------------------------------------------
// compiled stack program

#[derive(Clone, Copy, Debug)]
enum Op {
    Const(f64),
    Load(usize),
    Neg,
    Add,
    Sub,
    Mul,
    Div,
    Powi(i32),
    Sin,
    Cos,
    Exp,
    Bump,
    Smoothstep,
    Smin(f64),
    Smax(f64),
    SminWeight(f64),
    /// Pops `u`; if the guard fails pushes 0 and jumps by the offset.
    BumpGuard(usize),
    UnitGuard(usize),
}

/// Flattened postfix form of an [`Expr`].
#[derive(Clone, Debug, Default)]
pub struct Program {
    ops: Vec<Op>,
    depth: usize,
}

const STACK: usize = 64;

impl Program {
    fn fold_const(e: &Expr) -> Option<f64> {
        if e.vars().is_empty() {
            Some(e.eval(&Env::default()))
        } else {
            None
        }
    }

    fn emit(&mut self, e: &Expr) {
        match e {
            Expr::Const(c) => self.ops.push(Op::Const(*c)),
            Expr::Var(v) => self.ops.push(Op::Load(v.slot())),
            Expr::Neg(a) => {
                self.emit(a);
                self.ops.push(Op::Neg);
            }
            Expr::Add(a, b) => self.binary(a, b, Op::Add),
            Expr::Sub(a, b) => self.binary(a, b, Op::Sub),
            Expr::Mul(a, b) => self.binary(a, b, Op::Mul),
            Expr::Div(a, b) => self.binary(a, b, Op::Div),
            Expr::Powi(a, n) => {
                self.emit(a);
                self.ops.push(Op::Powi(*n));
            }
            Expr::Call(f, args) => match f {
                Func::Smin | Func::Smax => {
                    let k = sharpness(args);
                    let op = if *f == Func::Smin { Op::Smin(k) } else { Op::Smax(k) };
                    self.binary(&args[0], &args[1], op);
                }
                _ => {
                    self.emit(&args[0]);
                    self.ops.push(match f {
                        Func::Sin => Op::Sin,
                        Func::Cos => Op::Cos,
                        Func::Exp => Op::Exp,
                        Func::Bump => Op::Bump,
                        Func::Smoothstep => Op::Smoothstep,
                        Func::Smin | Func::Smax => unreachable!(),
                    });
                }
            },
            Expr::SminWeight(a, b, k) => self.binary(a, b, Op::SminWeight(*k)),
            Expr::BumpGuard(u, body) | Expr::UnitGuard(u, body) => {
                self.emit(u);
                let at = self.ops.len();
                self.ops.push(Op::BumpGuard(0));
                let start = self.ops.len();
                self.emit(body);
                let skip = self.ops.len() - start;
                self.ops[at] = if matches!(e, Expr::BumpGuard(..)) {
                    Op::BumpGuard(skip)
                } else {
                    Op::UnitGuard(skip)
                };
            }
        }
    }

    fn binary(&mut self, a: &Expr, b: &Expr, op: Op) {
        self.emit(a);
        self.emit(b);
        self.ops.push(op);
    }

    fn required_depth(&self) -> usize {
        let mut d: isize = 0;
        let mut max = 0;
        for op in &self.ops {
            d += match op {
                Op::Const(_) | Op::Load(_) => 1,
                Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Smin(_) | Op::Smax(_) => -1,
                Op::SminWeight(_) => -1,
                // guard pops u; body pushes one value
                Op::BumpGuard(_) | Op::UnitGuard(_) => -1,
                _ => 0,
            };
            max = max.max(d);
        }
        max.max(0) as usize + 1
    }

    pub fn eval(&self, env: &Env) -> f64 {
        if self.depth <= STACK {
            let mut stack = [0.0f64; STACK];
            self.run(env, &mut stack)
        } else {
            let mut stack = vec![0.0f64; self.depth];
            self.run(env, &mut stack)
        }
    }

    fn run(&self, env: &Env, stack: &mut [f64]) -> f64 {
        let mut sp = 0usize;
        let mut pc = 0usize;
        let ops = &self.ops;
        while pc < ops.len() {
            match ops[pc] {
                Op::Const(c) => {
                    stack[sp] = c;
                    sp += 1;
                }
                Op::Load(slot) => {
                    stack[sp] = env.vals[slot];
                    sp += 1;
                }
                Op::Neg => stack[sp - 1] = -stack[sp - 1],
                Op::Add => {
                    sp -= 1;
                    stack[sp - 1] += stack[sp];
                }
                Op::Sub => {
                    sp -= 1;
                    stack[sp - 1] -= stack[sp];
                }
                Op::Mul => {
                    sp -= 1;
                    stack[sp - 1] *= stack[sp];
                }
                Op::Div => {
                    sp -= 1;
                    stack[sp - 1] /= stack[sp];
                }
                Op::Powi(n) => stack[sp - 1] = stack[sp - 1].powi(n),
                Op::Sin => stack[sp - 1] = stack[sp - 1].sin(),
                Op::Cos => stack[sp - 1] = stack[sp - 1].cos(),
                Op::Exp => stack[sp - 1] = stack[sp - 1].exp(),
                Op::Bump => stack[sp - 1] = bump(stack[sp - 1]),
                Op::Smoothstep => stack[sp - 1] = smoothstep(stack[sp - 1]),
                Op::Smin(k) => {
                    sp -= 1;
                    stack[sp - 1] = smin(stack[sp - 1], stack[sp], k);
                }
                Op::Smax(k) => {
                    sp -= 1;
                    stack[sp - 1] = -smin(-stack[sp - 1], -stack[sp], k);
                }
                Op::SminWeight(k) => {
                    sp -= 1;
                    stack[sp - 1] = smin_weight(stack[sp - 1], stack[sp], k);
                }
                Op::BumpGuard(skip) => {
                    let u = stack[sp - 1];
                    sp -= 1;
                    if 1.0 - u * u <= FLAT_CUTOFF {
                        stack[sp] = 0.0;
                        sp += 1;
                        pc += skip;
                    }
                }
                Op::UnitGuard(skip) => {
                    let u = stack[sp - 1];
                    sp -= 1;
                    if !(u > FLAT_CUTOFF && u < 1.0 - FLAT_CUTOFF) {
                        stack[sp] = 0.0;
                        sp += 1;
                        pc += skip;
                    }
                }
            }
            pc += 1;
        }
        stack[0]
    }
}

/// An expression together with its compiled form and (lazily built) partial
/// derivatives in the listed variables.
#[derive(Clone, Debug)]
pub struct SmoothFn {
    expr: Expr,
    prog: Program,
    partials: Vec<(Var, Expr, Program)>,
}

impl SmoothFn {
    pub fn new(expr: Expr, vars: &[Var]) -> Self {
        let prog = expr.compile();
        let partials = vars
            .iter()
            .map(|&v| {
                let d = expr.derivative(v);
                let p = d.compile();
                (v, d, p)
            })
            .collect();
        SmoothFn {
            expr,
            prog,
            partials,
        }
    }

    pub fn parse(text: &str, vars: &[Var]) -> Result<Self, ExprError> {
        Ok(Self::new(Expr::parse(text)?, vars))
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    #[inline]
    pub fn eval(&self, env: &Env) -> f64 {
        self.prog.eval(env)
    }

    /// Partial derivative in `var`; panics if `var` was not requested.
    #[inline]
    pub fn partial(&self, var: Var, env: &Env) -> f64 {
        self.partials
            .iter()
            .find(|(v, _, _)| *v == var)
            .map(|(_, _, p)| p.eval(env))
            .unwrap_or_else(|| panic!("partial in {var} not prepared"))
    }

    pub fn partial_expr(&self, var: Var) -> Option<&Expr> {
        self.partials
            .iter()
            .find(|(v, _, _)| *v == var)
            .map(|(_, e, _)| e)
    }
}

impl PartialEq for SmoothFn {
    fn eq(&self, other: &Self) -> bool {
        self.expr == other.expr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(e: &str, env: Env) -> f64 {
        Expr::parse(e).unwrap().eval(&env)
    }

    #[test]
    fn precedence_and_unary_minus() {
        let env = Env::new().with(Var::X(1), 2.0);
        assert_eq!(at("1 + 2 * 3", env), 7.0);
        assert_eq!(at("-x1^2", env), -4.0);
        assert_eq!(at("(1 + x1)^2 / 3", env), 3.0);
        assert_eq!(at("2^-1", env), 0.5);
        assert!((at("pi", env) - std::f64::consts::PI).abs() < 1e-15);
    }

    #[test]
    fn bump_is_supported_in_open_interval() {
        let e = Expr::parse("bump((r-0.5)/0.25)").unwrap();
        for i in 0..=100 {
            let r = i as f64 / 100.0;
            let v = e.eval(&Env::new().with(Var::R, r));
            if r <= 0.25 || r >= 0.75 {
                assert_eq!(v, 0.0, "r = {r}");
            } else {
                assert!(v > 0.0, "r = {r}");
            }
        }
    }

    #[test]
    fn abs_is_rejected_as_nonsmooth() {
        match Expr::parse("abs(x1)") {
            Err(ExprError::NonSmooth { name, line, col }) => {
                assert_eq!((name.as_str(), line, col), ("abs", 1, 1));
            }
            other => panic!("expected non-smooth error, got {other:?}"),
        }
        assert!(matches!(
            Expr::parse("1 + sqrt(x1)"),
            Err(ExprError::NonSmooth { .. })
        ));
    }

    #[test]
    fn errors_carry_positions() {
        match Expr::parse("1 +\n  foo") {
            Err(ExprError::UnknownIdent { name, line, col }) => {
                assert_eq!((name.as_str(), line, col), ("foo", 2, 3));
            }
            other => panic!("{other:?}"),
        }
        match Expr::parse("(1 + 2") {
            Err(ExprError::Syntax { line, col, .. }) => assert_eq!((line, col), (1, 7)),
            other => panic!("{other:?}"),
        }
        assert!(matches!(Expr::parse("x1^0.5"), Err(ExprError::Syntax { .. })));
        assert!(matches!(Expr::parse("x17"), Err(ExprError::UnknownIdent { .. })));
    }

    #[test]
    fn derivative_of_sin_squared_matches_closed_form() {
        let e = Expr::parse("sin(t)^2").unwrap();
        let d = e.derivative(Var::T);
        let closed = Expr::parse("2*sin(t)*cos(t)").unwrap();
        for i in 0..100 {
            let t = -3.0 + 0.061 * i as f64;
            let env = Env::new().with(Var::T, t);
            assert!((d.eval(&env) - closed.eval(&env)).abs() < 1e-12);
        }
    }

    #[test]
    fn derivatives_match_central_differences() {
        // oracle: 4th-order central differences
        let cases = [
            "sin(t)^2",
            "bump((t-0.3)/0.6)",
            "smoothstep((t+0.2)/0.7)",
            "exp(-t^2) / (2 + cos(3*t))",
            "smin(t, 0.2 - t, 0.05)",
            "smax(sin(t), t^3, 0.2)",
        ];
        let h = 1e-3;
        for text in cases {
            let f = Expr::parse(text).unwrap();
            let d = f.derivative(Var::T);
            for i in 0..100 {
                let t = -0.9 + 0.0177 * i as f64;
                let ev = |t: f64| f.eval(&Env::new().with(Var::T, t));
                let fd = (-ev(t + 2.0 * h) + 8.0 * ev(t + h) - 8.0 * ev(t - h) + ev(t - 2.0 * h))
                    / (12.0 * h);
                let an = d.eval(&Env::new().with(Var::T, t));
                assert!((an - fd).abs() < 1e-6 * (1.0 + an.abs()), "{text} at {t}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn compiled_program_agrees_with_tree() {
        let texts = [
            "bump((r-0.5)/0.25) * smoothstep(x1) - smin(x2, r, 0.3)",
            "1 - smoothstep((x1^2-0.25)/0.39)",
        ];
        for text in texts {
            let e = Expr::parse(text).unwrap();
            let d = e.derivative(Var::X(1)).derivative(Var::R);
            let (pe, pd) = (e.compile(), d.compile());
            for i in 0..200 {
                let env = Env::from_x(&[-1.0 + 0.01 * i as f64, 0.3 - 0.004 * i as f64])
                    .with(Var::R, 0.005 * i as f64);
                assert_eq!(pe.eval(&env).to_bits(), e.eval(&env).to_bits());
                assert_eq!(pd.eval(&env).to_bits(), d.eval(&env).to_bits());
            }
        }
    }

    #[test]
    fn display_round_trips() {
        let e = Expr::parse("-(x1 - 2.5e-3)^3 * smax(r, -theta, 0.2) / exp(phi)").unwrap();
        let again = Expr::parse(&e.to_string()).unwrap();
        assert_eq!(e, again);
    }

    #[test]
    fn vanishing_denominator_is_detected() {
        let e = Expr::parse("1 / (x1 - 0.5)").unwrap();
        let grid = (0..=10).map(|i| Env::from_x(&[i as f64 / 10.0]));
        assert!(matches!(
            e.check_denominators(grid, 1e-12),
            Err(ExprError::VanishingDenominator { .. })
        ));
        let e = Expr::parse("1 / (2 + x1)").unwrap();
        let grid = (0..=10).map(|i| Env::from_x(&[i as f64 / 10.0]));
        assert!(e.check_denominators(grid, 1e-12).is_ok());
    }

    #[test]
    fn smoothstep_is_flat_outside_unit_interval() {
        assert_eq!(smoothstep(-0.5), 0.0);
        assert_eq!(smoothstep(1.0 - 1e-17), 1.0);
        assert_eq!(smoothstep(1.5), 1.0);
        assert!((smoothstep(0.5) - 0.5).abs() < 1e-15);
        let d = Expr::parse("smoothstep(t)").unwrap().derivative(Var::T);
        assert_eq!(d.eval(&Env::new().with(Var::T, 1e-5)), 0.0);
        assert_eq!(d.eval(&Env::new().with(Var::T, 1.2)), 0.0);
    }
}
