//! A small arithmetic grammar for closed-form symbols.
//!
//! Expressions range over `t`, `x1..xD`, `xi1..xiD` and named parameters,
//! with the functions `sin`, `cos`, `exp`, `log`, `sqrt`, `abs`, `tanh`,
//! `pow(a, b)` and the angle-bracket weight `w(a, b, ...) = sqrt(1 + a^2 + b^2 + ...)`.
//! `x` and `xi` are accepted as aliases for `x1` and `xi1`, and `pi` is a
//! constant. Derivatives are taken symbolically, so every symbol declared
//! through this grammar has closed-form derivatives of any order.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Independent variable of a phase-space expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    T,
    /// Position component, zero based.
    X(usize),
    /// Frequency component, zero based.
    Xi(usize),
    /// Named parameter, index into the binding table.
    Param(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Abs,
    Tanh,
    Sign,
    Weight,
}

impl Func {
    fn lookup(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" | "ln" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "tanh" => Func::Tanh,
            "sign" => Func::Sign,
            "w" => Func::Weight,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Tanh => "tanh",
            Func::Sign => "sign",
            Func::Weight => "w",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

// Smart constructors fold constants so derivative trees stay small and
// identically-zero results are recognisable.
fn num(v: f64) -> Expr {
    Expr::Num(v)
}

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Num(v) => num(-v),
        Expr::Neg(inner) => *inner,
        other => Expr::Neg(Box::new(other)),
    }
}

fn add(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Num(x), Expr::Num(y)) => num(x + y),
        (Expr::Num(z), e) | (e, Expr::Num(z)) if z == 0.0 => e,
        (a, Expr::Neg(b)) => sub(a, *b),
        (a, b) => Expr::Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Num(x), Expr::Num(y)) => num(x - y),
        (e, Expr::Num(z)) if z == 0.0 => e,
        (Expr::Num(z), e) if z == 0.0 => neg(e),
        (a, b) => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Num(x), Expr::Num(y)) => num(x * y),
        (Expr::Num(z), _) | (_, Expr::Num(z)) if z == 0.0 => num(0.0),
        (Expr::Num(o), e) | (e, Expr::Num(o)) if o == 1.0 => e,
        (Expr::Num(m), e) | (e, Expr::Num(m)) if m == -1.0 => neg(e),
        (a, b) => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Num(x), Expr::Num(y)) if y != 0.0 => num(x / y),
        (Expr::Num(z), _) if z == 0.0 => num(0.0),
        (e, Expr::Num(o)) if o == 1.0 => e,
        (a, b) => Expr::Div(Box::new(a), Box::new(b)),
    }
}

fn pow(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Num(x), Expr::Num(y)) => num(x.powf(y)),
        (_, Expr::Num(z)) if z == 0.0 => num(1.0),
        (e, Expr::Num(o)) if o == 1.0 => e,
        (a, b) => Expr::Pow(Box::new(a), Box::new(b)),
    }
}

fn call(f: Func, args: Vec<Expr>) -> Expr {
    if args.iter().all(|a| matches!(a, Expr::Num(_))) {
        let vals: Vec<f64> = args
            .iter()
            .map(|a| match a {
                Expr::Num(v) => *v,
                _ => unreachable!(),
            })
            .collect();
        return num(apply_func(f, &vals));
    }
    Expr::Call(f, args)
}

fn apply_func(f: Func, args: &[f64]) -> f64 {
    let a = args[0];
    match f {
        Func::Sin => a.sin(),
        Func::Cos => a.cos(),
        Func::Exp => a.exp(),
        Func::Log => a.ln(),
        Func::Sqrt => a.sqrt(),
        Func::Abs => a.abs(),
        Func::Tanh => a.tanh(),
        Func::Sign => {
            if a > 0.0 {
                1.0
            } else if a < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Func::Weight => (1.0 + args.iter().map(|v| v * v).sum::<f64>()).sqrt(),
    }
}

impl Expr {
    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Num(v) if *v == 0.0)
    }

    pub fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Num(v) => Some(*v),
            _ => None,
        }
    }

    pub fn eval(&self, env: &Env<'_>) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Var(v) => env.get(*v),
            Expr::Neg(a) => -a.eval(env),
            Expr::Add(a, b) => a.eval(env) + b.eval(env),
            Expr::Sub(a, b) => a.eval(env) - b.eval(env),
            Expr::Mul(a, b) => a.eval(env) * b.eval(env),
            Expr::Div(a, b) => a.eval(env) / b.eval(env),
            Expr::Pow(a, b) => {
                let base = a.eval(env);
                match **b {
                    Expr::Num(e) if e.fract() == 0.0 && e.abs() < 64.0 => base.powi(e as i32),
                    _ => base.powf(b.eval(env)),
                }
            }
            Expr::Call(f, args) => {
                if args.len() == 1 {
                    apply_func(*f, &[args[0].eval(env)])
                } else {
                    let vals: Vec<f64> = args.iter().map(|a| a.eval(env)).collect();
                    apply_func(*f, &vals)
                }
            }
        }
    }

    /// Symbolic partial derivative.
    pub fn diff(&self, var: Var) -> Expr {
        match self {
            Expr::Num(_) => num(0.0),
            Expr::Var(v) => num(if *v == var { 1.0 } else { 0.0 }),
            Expr::Neg(a) => neg(a.diff(var)),
            Expr::Add(a, b) => add(a.diff(var), b.diff(var)),
            Expr::Sub(a, b) => sub(a.diff(var), b.diff(var)),
            Expr::Mul(a, b) => add(
                mul(a.diff(var), (**b).clone()),
                mul((**a).clone(), b.diff(var)),
            ),
            Expr::Div(a, b) => {
                let da = a.diff(var);
                let db = b.diff(var);
                if db.is_zero() {
                    div(da, (**b).clone())
                } else {
                    div(
                        sub(mul(da, (**b).clone()), mul((**a).clone(), db)),
                        pow((**b).clone(), num(2.0)),
                    )
                }
            }
            Expr::Pow(a, b) => {
                let da = a.diff(var);
                let db = b.diff(var);
                if db.is_zero() {
                    // d(a^c) = c a^(c-1) a'
                    let c = (**b).clone();
                    let exponent = sub(c.clone(), num(1.0));
                    mul(mul(c, pow((**a).clone(), exponent)), da)
                } else {
                    // d(a^b) = a^b (b' ln a + b a'/a)
                    let term = add(
                        mul(db, call(Func::Log, vec![(**a).clone()])),
                        div(mul((**b).clone(), da), (**a).clone()),
                    );
                    mul(self.clone(), term)
                }
            }
            Expr::Call(f, args) => {
                if *f == Func::Weight {
                    // w' = sum a_i a_i' / w
                    let mut acc = num(0.0);
                    for a in args {
                        acc = add(acc, mul(a.clone(), a.diff(var)));
                    }
                    return div(acc, self.clone());
                }
                let a = args[0].clone();
                let da = args[0].diff(var);
                if da.is_zero() {
                    return num(0.0);
                }
                let outer = match f {
                    Func::Sin => call(Func::Cos, vec![a]),
                    Func::Cos => neg(call(Func::Sin, vec![a])),
                    Func::Exp => self.clone(),
                    Func::Log => div(num(1.0), a),
                    Func::Sqrt => div(num(0.5), self.clone()),
                    Func::Abs => call(Func::Sign, vec![a]),
                    Func::Tanh => sub(num(1.0), pow(self.clone(), num(2.0))),
                    Func::Sign => num(0.0),
                    Func::Weight => unreachable!(),
                };
                mul(outer, da)
            }
        }
    }

    /// True when the expression mentions `var`.
    pub fn depends_on(&self, var: Var) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Var(v) => *v == var,
            Expr::Neg(a) => a.depends_on(var),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) | Expr::Pow(a, b) => {
                a.depends_on(var) || b.depends_on(var)
            }
            Expr::Call(_, args) => args.iter().any(|a| a.depends_on(var)),
        }
    }

    /// Largest position/frequency index referenced, as (max x, max xi).
    pub fn max_axes(&self) -> (Option<usize>, Option<usize>) {
        fn merge(a: Option<usize>, b: Option<usize>) -> Option<usize> {
            match (a, b) {
                (Some(x), Some(y)) => Some(x.max(y)),
                (x, None) => x,
                (None, y) => y,
            }
        }
        match self {
            Expr::Num(_) => (None, None),
            Expr::Var(Var::X(j)) => (Some(*j), None),
            Expr::Var(Var::Xi(j)) => (None, Some(*j)),
            Expr::Var(_) => (None, None),
            Expr::Neg(a) => a.max_axes(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) | Expr::Pow(a, b) => {
                let (ax, axi) = a.max_axes();
                let (bx, bxi) = b.max_axes();
                (merge(ax, bx), merge(axi, bxi))
            }
            Expr::Call(_, args) => args.iter().fold((None, None), |acc, e| {
                let (x, xi) = e.max_axes();
                (merge(acc.0, x), merge(acc.1, xi))
            }),
        }
    }

    /// Rename parameter indices through `map` (old index -> new index).
    fn remap_params(&self, map: &[usize]) -> Expr {
        match self {
            Expr::Var(Var::Param(i)) => Expr::Var(Var::Param(map[*i])),
            Expr::Num(_) | Expr::Var(_) => self.clone(),
            Expr::Neg(a) => Expr::Neg(Box::new(a.remap_params(map))),
            Expr::Add(a, b) => Expr::Add(Box::new(a.remap_params(map)), Box::new(b.remap_params(map))),
            Expr::Sub(a, b) => Expr::Sub(Box::new(a.remap_params(map)), Box::new(b.remap_params(map))),
            Expr::Mul(a, b) => Expr::Mul(Box::new(a.remap_params(map)), Box::new(b.remap_params(map))),
            Expr::Div(a, b) => Expr::Div(Box::new(a.remap_params(map)), Box::new(b.remap_params(map))),
            Expr::Pow(a, b) => Expr::Pow(Box::new(a.remap_params(map)), Box::new(b.remap_params(map))),
            Expr::Call(f, args) => Expr::Call(*f, args.iter().map(|a| a.remap_params(map)).collect()),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Var(Var::T) => write!(f, "t"),
            Expr::Var(Var::X(j)) => write!(f, "x{}", j + 1),
            Expr::Var(Var::Xi(j)) => write!(f, "xi{}", j + 1),
            Expr::Var(Var::Param(i)) => write!(f, "p#{i}"),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, b) => write!(f, "({a} ^ {b})"),
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
        }
    }
}

/// Evaluation environment for one phase-space point.
pub struct Env<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub xi: &'a [f64],
    pub params: &'a [f64],
}

impl Env<'_> {
    #[inline]
    fn get(&self, v: Var) -> f64 {
        match v {
            Var::T => self.t,
            Var::X(j) => self.x.get(j).copied().unwrap_or(0.0),
            Var::Xi(j) => self.xi.get(j).copied().unwrap_or(0.0),
            Var::Param(i) => self.params[i],
        }
    }
}

// ---------------------------------------------------------------------------
// parser

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

fn tokenize(src: &str) -> Result<Vec<(usize, Tok)>> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < bytes.len() && ((bytes[i] as char).is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let save = i;
                i += 1;
                if i < bytes.len() && (bytes[i] == b'+' || bytes[i] == b'-') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                    while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                        i += 1;
                    }
                } else {
                    i = save;
                }
            }
            let text = &src[start..i];
            let v: f64 = text
                .parse()
                .map_err(|_| Error::Parse(format!("bad number '{text}' at column {}", start + 1)))?;
            out.push((start, Tok::Num(v)));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((start, Tok::Ident(src[start..i].to_string())));
        } else if "+-*/^(),".contains(c) {
            out.push((i, Tok::Op(c)));
            i += 1;
        } else {
            return Err(Error::Parse(format!("unexpected character '{c}' at column {}", i + 1)));
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    dim: usize,
    params: &'a mut Vec<String>,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn column(&self) -> usize {
        self.toks.get(self.pos).map(|(c, _)| c + 1).unwrap_or(0)
    }

    fn eat(&mut self, op: char) -> bool {
        if self.peek() == Some(&Tok::Op(op)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, op: char) -> Result<()> {
        if self.eat(op) {
            Ok(())
        } else {
            Err(Error::Parse(format!("expected '{op}' at column {}", self.column())))
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            if self.eat('+') {
                lhs = add(lhs, self.term()?);
            } else if self.eat('-') {
                lhs = sub(lhs, self.term()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat('*') {
                lhs = mul(lhs, self.unary()?);
            } else if self.eat('/') {
                lhs = div(lhs, self.unary()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat('-') {
            Ok(neg(self.unary()?))
        } else if self.eat('+') {
            self.unary()
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.eat('^') {
            // right associative, binds tighter than unary minus on the left
            let exponent = self.unary()?;
            Ok(pow(base, exponent))
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<Expr> {
        let col = self.column();
        match self.toks.get(self.pos).cloned() {
            Some((_, Tok::Num(v))) => {
                self.pos += 1;
                Ok(num(v))
            }
            Some((_, Tok::Op('('))) => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Some((_, Tok::Ident(name))) => {
                self.pos += 1;
                if self.peek() == Some(&Tok::Op('(')) {
                    self.pos += 1;
                    let mut args = vec![self.expr()?];
                    while self.eat(',') {
                        args.push(self.expr()?);
                    }
                    self.expect(')')?;
                    if name == "pow" {
                        if args.len() != 2 {
                            return Err(Error::Parse(format!("pow takes two arguments (column {col})")));
                        }
                        let b = args.pop().unwrap();
                        let a = args.pop().unwrap();
                        return Ok(pow(a, b));
                    }
                    let f = Func::lookup(&name)
                        .ok_or_else(|| Error::Parse(format!("unknown function '{name}' at column {col}")))?;
                    if f != Func::Weight && args.len() != 1 {
                        return Err(Error::Parse(format!("{name} takes one argument (column {col})")));
                    }
                    return Ok(call(f, args));
                }
                self.variable(&name, col)
            }
            Some((_, Tok::Op(c))) => Err(Error::Parse(format!("unexpected '{c}' at column {col}"))),
            None => Err(Error::Parse("unexpected end of expression".into())),
        }
    }

    fn variable(&mut self, name: &str, col: usize) -> Result<Expr> {
        if name == "t" {
            return Ok(Expr::Var(Var::T));
        }
        if name == "pi" {
            return Ok(num(std::f64::consts::PI));
        }
        if name == "x" {
            return Ok(Expr::Var(Var::X(0)));
        }
        if name == "xi" {
            return Ok(Expr::Var(Var::Xi(0)));
        }
        let axis = |prefix: &str| -> Option<usize> {
            name.strip_prefix(prefix)
                .filter(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
                .and_then(|rest| rest.parse::<usize>().ok())
        };
        if let Some(j) = axis("xi") {
            return self.axis_var(j, col, name).map(|j| Expr::Var(Var::Xi(j)));
        }
        if let Some(j) = axis("x") {
            return self.axis_var(j, col, name).map(|j| Expr::Var(Var::X(j)));
        }
        let idx = match self.params.iter().position(|p| p == name) {
            Some(i) => i,
            None => {
                self.params.push(name.to_string());
                self.params.len() - 1
            }
        };
        Ok(Expr::Var(Var::Param(idx)))
    }

    fn axis_var(&self, j: usize, col: usize, name: &str) -> Result<usize> {
        if j == 0 || j > self.dim {
            Err(Error::Parse(format!(
                "variable '{name}' at column {col} is outside dimension {}",
                self.dim
            )))
        } else {
            Ok(j - 1)
        }
    }
}

/// Parse an expression over `dim` spatial axes. Unknown identifiers become
/// parameters; their names are returned in order of first appearance.
pub fn parse(src: &str, dim: usize) -> Result<(Expr, Vec<String>)> {
    let toks = tokenize(src)?;
    if toks.is_empty() {
        return Err(Error::Parse("empty expression".into()));
    }
    let mut params = Vec::new();
    let mut p = Parser { toks, pos: 0, dim, params: &mut params };
    let e = p.expr()?;
    if p.pos != p.toks.len() {
        return Err(Error::Parse(format!("trailing input at column {}", p.column())));
    }
    Ok((e, params))
}

/// Expression with its parameters bound to values.
#[derive(Debug, Clone)]
pub struct BoundExpr {
    expr: Arc<Expr>,
    names: Arc<[String]>,
    values: Arc<[f64]>,
}

impl BoundExpr {
    /// Parse and bind every parameter from `bindings`; an unbound parameter is an error.
    pub fn compile(src: &str, dim: usize, bindings: &BTreeMap<String, f64>) -> Result<BoundExpr> {
        let (expr, names) = parse(src, dim)?;
        let mut values = Vec::with_capacity(names.len());
        for n in &names {
            match bindings.get(n) {
                Some(v) => values.push(*v),
                None => return Err(Error::UnboundParameter(n.clone())),
            }
        }
        Ok(BoundExpr {
            expr: Arc::new(expr),
            names: names.into(),
            values: values.into(),
        })
    }

    pub fn from_expr(expr: Expr) -> BoundExpr {
        BoundExpr { expr: Arc::new(expr), names: Arc::from(Vec::new()), values: Arc::from(Vec::new()) }
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    #[inline]
    pub fn eval(&self, t: f64, x: &[f64], xi: &[f64]) -> f64 {
        self.expr.eval(&Env { t, x, xi, params: &self.values })
    }

    pub fn diff(&self, var: Var) -> BoundExpr {
        BoundExpr {
            expr: Arc::new(self.expr.diff(var)),
            names: self.names.clone(),
            values: self.values.clone(),
        }
    }

    /// Derivative with respect to a named parameter; zero if absent.
    pub fn diff_param(&self, name: &str) -> BoundExpr {
        match self.param(name) {
            Some(i) => self.diff(Var::Param(i)),
            None => BoundExpr { expr: Arc::new(num(0.0)), ..self.clone() },
        }
    }

    /// Rebind a parameter value; unknown names are ignored.
    pub fn with_param(&self, name: &str, value: f64) -> BoundExpr {
        let mut values = self.values.to_vec();
        if let Some(i) = self.param(name) {
            values[i] = value;
        }
        BoundExpr { expr: self.expr.clone(), names: self.names.clone(), values: values.into() }
    }

    pub fn is_zero(&self) -> bool {
        self.expr.is_zero()
    }

    pub fn depends_on(&self, var: Var) -> bool {
        self.expr.depends_on(var)
    }

    /// Combine two bound expressions with `op`, merging parameter tables.
    pub fn combine(&self, other: &BoundExpr, op: impl FnOnce(Expr, Expr) -> Expr) -> BoundExpr {
        let mut names = self.names.to_vec();
        let mut values = self.values.to_vec();
        let mut map = Vec::with_capacity(other.names.len());
        for (n, v) in other.names.iter().zip(other.values.iter()) {
            match names.iter().position(|m| m == n) {
                Some(i) => map.push(i),
                None => {
                    names.push(n.clone());
                    values.push(*v);
                    map.push(names.len() - 1);
                }
            }
        }
        let rhs = other.expr.remap_params(&map);
        BoundExpr {
            expr: Arc::new(op((*self.expr).clone(), rhs)),
            names: names.into(),
            values: values.into(),
        }
    }
}

/// Public wrappers over the folding constructors, for building derived symbols.
pub mod build {
    use super::*;

    pub fn constant(v: f64) -> Expr {
        num(v)
    }
    pub fn var(v: Var) -> Expr {
        Expr::Var(v)
    }
    pub fn plus(a: Expr, b: Expr) -> Expr {
        add(a, b)
    }
    pub fn minus(a: Expr, b: Expr) -> Expr {
        sub(a, b)
    }
    pub fn times(a: Expr, b: Expr) -> Expr {
        mul(a, b)
    }
    pub fn over(a: Expr, b: Expr) -> Expr {
        div(a, b)
    }
    pub fn power(a: Expr, b: Expr) -> Expr {
        pow(a, b)
    }
    pub fn weight(args: Vec<Expr>) -> Expr {
        call(Func::Weight, args)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(src: &str, x: f64) -> f64 {
        let (e, names) = parse(src, 1).unwrap();
        assert!(names.is_empty(), "{names:?}");
        e.eval(&Env { t: 0.5, x: &[x], xi: &[2.0], params: &[] })
    }

    #[test]
    fn precedence_and_unary_minus() {
        assert_eq!(ev("1 + 2 * 3", 0.0), 7.0);
        assert_eq!(ev("-x^2", 3.0), -9.0);
        assert_eq!(ev("2^3^2", 0.0), 512.0);
        assert_eq!(ev("(1+x)/2", 3.0), 2.0);
        assert_eq!(ev("xi1 * t", 0.0), 1.0);
        assert!((ev("w(x)", 2.0) - 5f64.sqrt()).abs() < 1e-15);
        assert!((ev("pow(x, 0.5)", 4.0) - 2.0).abs() < 1e-15);
        assert!((ev("1e-3 * 2E2", 0.0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(parse("1 +", 1).is_err());
        assert!(parse("sin(1, 2)", 1).is_err());
        assert!(parse("foo(1)", 1).is_err());
        assert!(parse("x2", 1).is_err());
        assert!(parse("1 $ 2", 1).is_err());
        assert!(parse("(1 + 2", 1).is_err());
    }

    #[test]
    fn unbound_parameter_is_named() {
        let err = BoundExpr::compile("rho * x^2", 1, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, Error::UnboundParameter(ref n) if n == "rho"));
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let cases = [
            "sin(x) * exp(-x^2/2)",
            "w(x)^4",
            "x^3 / (1 + x^2)",
            "sqrt(2 + cos(x))",
            "pow(w(x), 1.5) - tanh(x)",
            "log(1 + x^2) * x",
            "abs(x - 0.1) * x",
        ];
        for src in cases {
            let (e, _) = parse(src, 1).unwrap();
            let d = e.diff(Var::X(0));
            for &x in &[-1.3, 0.4, 2.2] {
                let h = 1e-5;
                let f = |y: f64| e.eval(&Env { t: 0.0, x: &[y], xi: &[], params: &[] });
                let fd = (f(x + h) - f(x - h)) / (2.0 * h);
                let exact = d.eval(&Env { t: 0.0, x: &[x], xi: &[], params: &[] });
                assert!((fd - exact).abs() < 1e-7 * (1.0 + exact.abs()), "{src} at {x}: {fd} vs {exact}");
            }
        }
    }

    #[test]
    fn constant_derivatives_fold_to_zero() {
        let (e, _) = parse("xi1^2/2 + 3", 1).unwrap();
        assert!(e.diff(Var::X(0)).is_zero());
        assert!(e.diff(Var::T).is_zero());
        let (e, _) = parse("x^2", 1).unwrap();
        assert!(e.diff(Var::X(0)).diff(Var::X(0)).diff(Var::X(0)).is_zero());
    }

    #[test]
    fn parameters_bind_and_differentiate() {
        let mut b = BTreeMap::new();
        b.insert("rho".to_string(), 1.5);
        let e = BoundExpr::compile("rho^2 * x^2 / 2", 1, &b).unwrap();
        assert!((e.eval(0.0, &[2.0], &[]) - 4.5).abs() < 1e-14);
        let d = e.diff_param("rho");
        assert!((d.eval(0.0, &[2.0], &[]) - 6.0).abs() < 1e-14);
        let e2 = e.with_param("rho", 1.0);
        assert!((e2.eval(0.0, &[2.0], &[]) - 2.0).abs() < 1e-14);
        assert!(e.diff_param("other").is_zero());
    }

    #[test]
    fn combine_merges_parameter_tables() {
        let mut b = BTreeMap::new();
        b.insert("a".to_string(), 2.0);
        b.insert("c".to_string(), 5.0);
        let p = BoundExpr::compile("a * x", 1, &b).unwrap();
        let q = BoundExpr::compile("c + a", 1, &b).unwrap();
        let s = p.combine(&q, build::plus);
        assert!((s.eval(0.0, &[1.0], &[]) - 9.0).abs() < 1e-14);
        assert_eq!(s.param_names().len(), 2);
    }
}
