//! Closed-form scalar expressions over chart coordinates `x1..xd` and fiber
//! coordinates `v1..vd`.
//!
//! Grammar (recursive descent, usual precedence, `^` right-associative):
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := '-' unary | power
//! power := atom ('^' unary)?
//! atom  := number | 'pi' | xN | vN | func '(' expr ')' | '(' expr ')'
//! func  := sin | cos | exp | sqrt | ln
//! ```

use std::fmt;
use std::ops;

use crate::error::{Error, Result};
use crate::jet::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Sqrt,
    Ln,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Sqrt => "sqrt",
            Func::Ln => "ln",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    /// Chart coordinate, zero-based.
    X(usize),
    /// Fiber coordinate, zero-based.
    V(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr> {
        let tokens = tokenize(src)?;
        let mut p = Parser { tokens, pos: 0, len: src.len() };
        let e = p.expr()?;
        if let Some((at, tok)) = p.tokens.get(p.pos) {
            return Err(Error::Parse { position: *at, message: format!("unexpected token {tok:?}") });
        }
        Ok(e)
    }

    pub fn c(v: f64) -> Expr {
        Expr::Const(v)
    }

    pub fn x(i: usize) -> Expr {
        Expr::X(i)
    }

    pub fn v(i: usize) -> Expr {
        Expr::V(i)
    }

    pub fn powi(self, p: i32) -> Expr {
        match (self, p) {
            (_, 0) => Expr::Const(1.0),
            (e, 1) => e,
            (Expr::Const(a), p) => Expr::Const(a.powi(p)),
            (e, p) => Expr::Pow(Box::new(e), Box::new(Expr::Const(p as f64))),
        }
    }

    pub fn call(self, f: Func) -> Expr {
        Expr::Call(f, Box::new(self))
    }

    pub fn sin(self) -> Expr {
        self.call(Func::Sin)
    }

    pub fn cos(self) -> Expr {
        self.call(Func::Cos)
    }

    pub fn exp(self) -> Expr {
        self.call(Func::Exp)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 0.0)
    }

    fn is_one(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 1.0)
    }

    /// Largest chart-coordinate index used, plus one.
    pub fn x_arity(&self) -> usize {
        self.fold_vars(&|e| if let Expr::X(i) = e { i + 1 } else { 0 })
    }

    /// Largest fiber-coordinate index used, plus one.
    pub fn v_arity(&self) -> usize {
        self.fold_vars(&|e| if let Expr::V(i) = e { i + 1 } else { 0 })
    }

    fn fold_vars(&self, leaf: &dyn Fn(&Expr) -> usize) -> usize {
        match self {
            Expr::Const(_) | Expr::X(_) | Expr::V(_) => leaf(self),
            Expr::Neg(a) | Expr::Call(_, a) => a.fold_vars(leaf),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) | Expr::Pow(a, b) => {
                a.fold_vars(leaf).max(b.fold_vars(leaf))
            }
        }
    }

    /// Checks that every variable index fits a chart of dimension `dim`.
    pub fn check_dim(&self, dim: usize) -> Result<()> {
        let need = self.x_arity().max(self.v_arity());
        if need > dim {
            return Err(Error::Input(format!("expression `{self}` uses coordinate {need} in a {dim}-dimensional chart")));
        }
        Ok(())
    }

    /// Evaluates with arbitrary scalar type; `x` must be nonempty (constants are
    /// lifted from `x[0]`).
    pub fn eval<T: Real>(&self, x: &[T], v: &[T]) -> T {
        match self {
            Expr::Const(c) => x[0].lift(*c),
            Expr::X(i) => x[*i].clone(),
            Expr::V(i) => v[*i].clone(),
            Expr::Neg(a) => -a.eval(x, v),
            Expr::Add(a, b) => a.eval(x, v) + b.eval(x, v),
            Expr::Sub(a, b) => a.eval(x, v) - b.eval(x, v),
            Expr::Mul(a, b) => a.eval(x, v) * b.eval(x, v),
            Expr::Div(a, b) => a.eval(x, v) / b.eval(x, v),
            Expr::Pow(a, b) => {
                let base = a.eval(x, v);
                match **b {
                    Expr::Const(p) if p.fract() == 0.0 && p.abs() < 1e6 => base.powi(p as i32),
                    Expr::Const(p) => base.powf(p),
                    _ => (b.eval(x, v) * base.ln()).exp(),
                }
            }
            Expr::Call(f, a) => {
                let a = a.eval(x, v);
                match f {
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Exp => a.exp(),
                    Func::Sqrt => a.sqrt(),
                    Func::Ln => a.ln(),
                }
            }
        }
    }

    pub fn eval_f64(&self, x: &[f64], v: &[f64]) -> f64 {
        self.eval(x, v)
    }

    /// Symbolic derivative with respect to chart coordinate `i`.
    pub fn diff_x(&self, i: usize) -> Expr {
        self.diff(&|e| matches!(e, Expr::X(j) if *j == i))
    }

    /// Symbolic derivative with respect to fiber coordinate `i`.
    pub fn diff_v(&self, i: usize) -> Expr {
        self.diff(&|e| matches!(e, Expr::V(j) if *j == i))
    }

    fn diff(&self, is_var: &dyn Fn(&Expr) -> bool) -> Expr {
        match self {
            Expr::Const(_) => Expr::c(0.0),
            Expr::X(_) | Expr::V(_) => Expr::c(if is_var(self) { 1.0 } else { 0.0 }),
            Expr::Neg(a) => -a.diff(is_var),
            Expr::Add(a, b) => a.diff(is_var) + b.diff(is_var),
            Expr::Sub(a, b) => a.diff(is_var) - b.diff(is_var),
            Expr::Mul(a, b) => a.diff(is_var) * (**b).clone() + (**a).clone() * b.diff(is_var),
            Expr::Div(a, b) => {
                (a.diff(is_var) * (**b).clone() - (**a).clone() * b.diff(is_var)) / (**b).clone().powi(2)
            }
            Expr::Pow(a, b) => match **b {
                Expr::Const(p) => Expr::c(p) * (**a).clone().pow_const(p - 1.0) * a.diff(is_var),
                _ => {
                    // d(a^b) = a^b (b' ln a + b a'/a)
                    let ln_a = (**a).clone().call(Func::Ln);
                    self.clone() * (b.diff(is_var) * ln_a + (**b).clone() * a.diff(is_var) / (**a).clone())
                }
            },
            Expr::Call(f, a) => {
                let inner = a.diff(is_var);
                let a = (**a).clone();
                let outer = match f {
                    Func::Sin => a.cos(),
                    Func::Cos => -a.sin(),
                    Func::Exp => a.exp(),
                    Func::Sqrt => Expr::c(0.5) / a.call(Func::Sqrt),
                    Func::Ln => Expr::c(1.0) / a,
                };
                outer * inner
            }
        }
    }

    fn pow_const(self, p: f64) -> Expr {
        if p.fract() == 0.0 {
            self.powi(p as i32)
        } else {
            Expr::Pow(Box::new(self), Box::new(Expr::Const(p)))
        }
    }
}

impl ops::Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        match (self, rhs) {
            (a, b) if b.is_zero() => a,
            (a, b) if a.is_zero() => b,
            (Expr::Const(a), Expr::Const(b)) => Expr::Const(a + b),
            (a, b) => Expr::Add(Box::new(a), Box::new(b)),
        }
    }
}

impl ops::Sub for Expr {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        match (self, rhs) {
            (a, b) if b.is_zero() => a,
            (a, b) if a.is_zero() => -b,
            (Expr::Const(a), Expr::Const(b)) => Expr::Const(a - b),
            (a, b) => Expr::Sub(Box::new(a), Box::new(b)),
        }
    }
}

impl ops::Mul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        match (self, rhs) {
            (a, b) if a.is_zero() || b.is_zero() => Expr::Const(0.0),
            (a, b) if a.is_one() => b,
            (a, b) if b.is_one() => a,
            (Expr::Const(a), Expr::Const(b)) => Expr::Const(a * b),
            (a, b) => Expr::Mul(Box::new(a), Box::new(b)),
        }
    }
}

impl ops::Div for Expr {
    type Output = Expr;
    fn div(self, rhs: Expr) -> Expr {
        match (self, rhs) {
            (a, _) if a.is_zero() => Expr::Const(0.0),
            (a, b) if b.is_one() => a,
            (Expr::Const(a), Expr::Const(b)) => Expr::Const(a / b),
            (a, b) => Expr::Div(Box::new(a), Box::new(b)),
        }
    }
}

impl ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        match self {
            Expr::Const(a) => Expr::Const(-a),
            Expr::Neg(a) => *a,
            a => Expr::Neg(Box::new(a)),
        }
    }
}

impl From<f64> for Expr {
    fn from(v: f64) -> Expr {
        Expr::Const(v)
    }
}

impl std::str::FromStr for Expr {
    type Err = Error;
    fn from_str(s: &str) -> Result<Expr> {
        Expr::parse(s)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) if *c < 0.0 => write!(f, "({c:?})"),
            Expr::Const(c) => write!(f, "{c:?}"),
            Expr::X(i) => write!(f, "x{}", i + 1),
            Expr::V(i) => write!(f, "v{}", i + 1),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, b) => write!(f, "({a} ^ {b})"),
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Op(char),
}

fn tokenize(src: &str) -> Result<Vec<(usize, Token)>> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let ch = bytes[i] as char;
        if ch.is_ascii_whitespace() {
            i += 1;
        } else if ch.is_ascii_digit() || ch == '.' {
            let start = i;
            while i < bytes.len() && ((bytes[i] as char).is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text = &src[start..i];
            let v: f64 = text
                .parse()
                .map_err(|_| Error::Parse { position: start, message: format!("bad number `{text}`") })?;
            out.push((start, Token::Num(v)));
        } else if ch.is_ascii_alphabetic() || ch == '_' {
            let start = i;
            while i < bytes.len() && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((start, Token::Ident(src[start..i].to_string())));
        } else if "+-*/^()".contains(ch) {
            out.push((i, Token::Op(ch)));
            i += 1;
        } else {
            return Err(Error::Parse { position: i, message: format!("unexpected character `{ch}`") });
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(usize, Token)>,
    pos: usize,
    len: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn here(&self) -> usize {
        self.tokens.get(self.pos).map(|(p, _)| *p).unwrap_or(self.len)
    }

    fn eat(&mut self, op: char) -> bool {
        if self.peek() == Some(&Token::Op(op)) {
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
            Err(Error::Parse { position: self.here(), message: format!("expected `{op}`") })
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            if self.eat('+') {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat('-') {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat('*') {
                lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat('/') {
                lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat('-') {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if self.eat('+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.eat('^') {
            let exp = self.unary()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        let at = self.here();
        let tok = self.tokens.get(self.pos).map(|(_, t)| t.clone());
        match tok {
            Some(Token::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Const(v))
            }
            Some(Token::Op('(')) => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Some(Token::Ident(name)) => {
                self.pos += 1;
                let func = match name.as_str() {
                    "sin" => Some(Func::Sin),
                    "cos" => Some(Func::Cos),
                    "exp" => Some(Func::Exp),
                    "sqrt" => Some(Func::Sqrt),
                    "ln" | "log" => Some(Func::Ln),
                    _ => None,
                };
                if let Some(f) = func {
                    self.expect('(')?;
                    let arg = self.expr()?;
                    self.expect(')')?;
                    return Ok(Expr::Call(f, Box::new(arg)));
                }
                if name == "pi" {
                    return Ok(Expr::Const(std::f64::consts::PI));
                }
                let (kind, digits) = name.split_at(1);
                match (kind, digits.parse::<usize>()) {
                    ("x", Ok(n)) if n >= 1 => Ok(Expr::X(n - 1)),
                    ("v", Ok(n)) if n >= 1 => Ok(Expr::V(n - 1)),
                    _ => Err(Error::Parse { position: at, message: format!("unknown identifier `{name}`") }),
                }
            }
            Some(tok) => Err(Error::Parse { position: at, message: format!("unexpected token {tok:?}") }),
            None => Err(Error::Parse { position: at, message: "unexpected end of input".into() }),
        }
    }
}
