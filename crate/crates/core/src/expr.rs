//! Symbolic scalar fields over the disk coordinates `(x, y)`.
//!
//! Fields are small expression trees with complex constants. Derivatives are
//! taken symbolically, so every derivative is as exact as the evaluation of
//! the original expression.

use std::fmt;
use std::ops;
use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Coordinate with respect to which an expression is differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    X,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
        }
    }
}

#[derive(Debug)]
enum Node {
    Const(C64),
    X,
    Y,
    Add(Expr, Expr),
    Mul(Expr, Expr),
    Div(Expr, Expr),
    Neg(Expr),
    Powi(Expr, i32),
    Powf(Expr, f64),
    Apply(Func, Expr),
}

/// Immutable, cheaply clonable expression tree.
#[derive(Clone)]
pub struct Expr(Arc<Node>);

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({self})")
    }
}

impl Expr {
    fn new(node: Node) -> Self {
        Expr(Arc::new(node))
    }

    pub fn constant(c: C64) -> Self {
        Expr::new(Node::Const(c))
    }

    pub fn real(v: f64) -> Self {
        Expr::constant(C64::new(v, 0.0))
    }

    pub fn zero() -> Self {
        Expr::real(0.0)
    }

    pub fn one() -> Self {
        Expr::real(1.0)
    }

    /// The imaginary unit.
    pub fn i() -> Self {
        Expr::constant(C64::new(0.0, 1.0))
    }

    pub fn x() -> Self {
        Expr::new(Node::X)
    }

    pub fn y() -> Self {
        Expr::new(Node::Y)
    }

    /// `1 - x^2 - y^2`, the defining function of the unit disk.
    pub fn disk_defining() -> Self {
        Expr::one() - Expr::x().powi(2) - Expr::y().powi(2)
    }

    pub fn as_const(&self) -> Option<C64> {
        match &*self.0 {
            Node::Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const().is_some_and(|c| c == C64::new(0.0, 0.0))
    }

    fn is_one(&self) -> bool {
        self.as_const().is_some_and(|c| c == C64::new(1.0, 0.0))
    }

    pub fn powi(&self, n: i32) -> Expr {
        if n == 0 {
            return Expr::one();
        }
        if n == 1 {
            return self.clone();
        }
        if let Some(c) = self.as_const() {
            return Expr::constant(c.powi(n));
        }
        Expr::new(Node::Powi(self.clone(), n))
    }

    pub fn powf(&self, p: f64) -> Expr {
        if p.fract() == 0.0 && p.abs() < i32::MAX as f64 {
            return self.powi(p as i32);
        }
        if let Some(c) = self.as_const() {
            return Expr::constant(c.powf(p));
        }
        Expr::new(Node::Powf(self.clone(), p))
    }

    pub fn apply(f: Func, arg: Expr) -> Expr {
        if let Some(c) = arg.as_const() {
            let v = match f {
                Func::Sin => c.sin(),
                Func::Cos => c.cos(),
                Func::Exp => c.exp(),
                Func::Log => c.ln(),
                Func::Sqrt => c.sqrt(),
            };
            return Expr::constant(v);
        }
        Expr::new(Node::Apply(f, arg))
    }

    pub fn sin(&self) -> Expr {
        Expr::apply(Func::Sin, self.clone())
    }

    pub fn cos(&self) -> Expr {
        Expr::apply(Func::Cos, self.clone())
    }

    pub fn exp(&self) -> Expr {
        Expr::apply(Func::Exp, self.clone())
    }

    pub fn ln(&self) -> Expr {
        Expr::apply(Func::Log, self.clone())
    }

    pub fn sqrt(&self) -> Expr {
        Expr::apply(Func::Sqrt, self.clone())
    }

    /// Symbolic partial derivative.
    pub fn diff(&self, var: Var) -> Expr {
        match &*self.0 {
            Node::Const(_) => Expr::zero(),
            Node::X => {
                if var == Var::X {
                    Expr::one()
                } else {
                    Expr::zero()
                }
            }
            Node::Y => {
                if var == Var::Y {
                    Expr::one()
                } else {
                    Expr::zero()
                }
            }
            Node::Add(a, b) => a.diff(var) + b.diff(var),
            Node::Mul(a, b) => a.diff(var) * b + a * b.diff(var),
            Node::Div(a, b) => (a.diff(var) * b - a * b.diff(var)) / b.powi(2),
            Node::Neg(a) => -a.diff(var),
            Node::Powi(a, n) => Expr::real(*n as f64) * a.powi(n - 1) * a.diff(var),
            Node::Powf(a, p) => Expr::real(*p) * a.powf(p - 1.0) * a.diff(var),
            Node::Apply(f, a) => {
                let da = a.diff(var);
                if da.is_zero() {
                    return Expr::zero();
                }
                let outer = match f {
                    Func::Sin => a.cos(),
                    Func::Cos => -a.sin(),
                    Func::Exp => self.clone(),
                    Func::Log => return da / a,
                    Func::Sqrt => return da / (Expr::real(2.0) * self),
                };
                outer * da
            }
        }
    }

    pub fn dx(&self) -> Expr {
        self.diff(Var::X)
    }

    pub fn dy(&self) -> Expr {
        self.diff(Var::Y)
    }

    /// Complex conjugate, assuming real `x`, `y` and principal branches.
    pub fn conj(&self) -> Expr {
        match &*self.0 {
            Node::Const(c) => Expr::constant(c.conj()),
            Node::X | Node::Y => self.clone(),
            Node::Add(a, b) => a.conj() + b.conj(),
            Node::Mul(a, b) => a.conj() * b.conj(),
            Node::Div(a, b) => a.conj() / b.conj(),
            Node::Neg(a) => -a.conj(),
            Node::Powi(a, n) => a.conj().powi(*n),
            Node::Powf(a, p) => a.conj().powf(*p),
            Node::Apply(f, a) => Expr::apply(*f, a.conj()),
        }
    }

    /// True when no constant in the tree carries an imaginary part.
    pub fn is_real(&self) -> bool {
        match &*self.0 {
            Node::Const(c) => c.im == 0.0,
            Node::X | Node::Y => true,
            Node::Add(a, b) | Node::Mul(a, b) | Node::Div(a, b) => a.is_real() && b.is_real(),
            Node::Neg(a) | Node::Powi(a, _) | Node::Powf(a, _) | Node::Apply(_, a) => a.is_real(),
        }
    }

    pub fn eval(&self, x: f64, y: f64) -> C64 {
        match &*self.0 {
            Node::Const(c) => *c,
            Node::X => C64::new(x, 0.0),
            Node::Y => C64::new(y, 0.0),
            Node::Add(a, b) => a.eval(x, y) + b.eval(x, y),
            Node::Mul(a, b) => a.eval(x, y) * b.eval(x, y),
            Node::Div(a, b) => a.eval(x, y) / b.eval(x, y),
            Node::Neg(a) => -a.eval(x, y),
            Node::Powi(a, n) => a.eval(x, y).powi(*n),
            Node::Powf(a, p) => a.eval(x, y).powf(*p),
            Node::Apply(f, a) => {
                let v = a.eval(x, y);
                match f {
                    Func::Sin => v.sin(),
                    Func::Cos => v.cos(),
                    Func::Exp => v.exp(),
                    Func::Log => v.ln(),
                    Func::Sqrt => v.sqrt(),
                }
            }
        }
    }

    /// Real evaluation; imaginary parts of constants are ignored.
    pub fn eval_real(&self, x: f64, y: f64) -> f64 {
        match &*self.0 {
            Node::Const(c) => c.re,
            Node::X => x,
            Node::Y => y,
            Node::Add(a, b) => a.eval_real(x, y) + b.eval_real(x, y),
            Node::Mul(a, b) => a.eval_real(x, y) * b.eval_real(x, y),
            Node::Div(a, b) => a.eval_real(x, y) / b.eval_real(x, y),
            Node::Neg(a) => -a.eval_real(x, y),
            Node::Powi(a, n) => a.eval_real(x, y).powi(*n),
            Node::Powf(a, p) => a.eval_real(x, y).powf(*p),
            Node::Apply(f, a) => {
                let v = a.eval_real(x, y);
                match f {
                    Func::Sin => v.sin(),
                    Func::Cos => v.cos(),
                    Func::Exp => v.exp(),
                    Func::Log => v.ln(),
                    Func::Sqrt => v.sqrt(),
                }
            }
        }
    }

    /// Number of nodes in the tree (shared subtrees counted each time).
    pub fn size(&self) -> usize {
        match &*self.0 {
            Node::Const(_) | Node::X | Node::Y => 1,
            Node::Add(a, b) | Node::Mul(a, b) | Node::Div(a, b) => 1 + a.size() + b.size(),
            Node::Neg(a) | Node::Powi(a, _) | Node::Powf(a, _) | Node::Apply(_, a) => 1 + a.size(),
        }
    }

    pub fn parse(src: &str) -> Result<Expr> {
        Parser::new(src).parse_all()
    }
}

fn fmt_const(c: C64, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    if c.im == 0.0 {
        if c.re < 0.0 {
            write!(f, "({:?})", c.re)
        } else {
            write!(f, "{:?}", c.re)
        }
    } else if c.re == 0.0 {
        write!(f, "({:?}*i)", c.im)
    } else {
        write!(f, "({:?}+{:?}*i)", c.re, c.im)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &*self.0 {
            Node::Const(c) => fmt_const(*c, f),
            Node::X => write!(f, "x"),
            Node::Y => write!(f, "y"),
            Node::Add(a, b) => write!(f, "({a}+{b})"),
            Node::Mul(a, b) => write!(f, "({a}*{b})"),
            Node::Div(a, b) => write!(f, "({a}/{b})"),
            Node::Neg(a) => write!(f, "(-{a})"),
            Node::Powi(a, n) => write!(f, "({a}^({n}))"),
            Node::Powf(a, p) => write!(f, "({a}^({p:?}))"),
            Node::Apply(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

fn add(a: &Expr, b: &Expr) -> Expr {
    match (a.as_const(), b.as_const()) {
        (Some(x), Some(y)) => Expr::constant(x + y),
        _ if a.is_zero() => b.clone(),
        _ if b.is_zero() => a.clone(),
        _ => Expr::new(Node::Add(a.clone(), b.clone())),
    }
}

fn mul(a: &Expr, b: &Expr) -> Expr {
    match (a.as_const(), b.as_const()) {
        (Some(x), Some(y)) => Expr::constant(x * y),
        _ if a.is_zero() || b.is_zero() => Expr::zero(),
        _ if a.is_one() => b.clone(),
        _ if b.is_one() => a.clone(),
        _ => Expr::new(Node::Mul(a.clone(), b.clone())),
    }
}

fn div(a: &Expr, b: &Expr) -> Expr {
    match (a.as_const(), b.as_const()) {
        (Some(x), Some(y)) => Expr::constant(x / y),
        _ if a.is_zero() => Expr::zero(),
        _ if b.is_one() => a.clone(),
        _ => Expr::new(Node::Div(a.clone(), b.clone())),
    }
}

fn neg(a: &Expr) -> Expr {
    match &*a.0 {
        Node::Const(c) => Expr::constant(-*c),
        Node::Neg(inner) => inner.clone(),
        _ => Expr::new(Node::Neg(a.clone())),
    }
}

macro_rules! binop {
    ($tr:ident, $m:ident, $f:ident) => {
        impl ops::$tr<Expr> for Expr {
            type Output = Expr;
            fn $m(self, rhs: Expr) -> Expr {
                $f(&self, &rhs)
            }
        }
        impl ops::$tr<&Expr> for Expr {
            type Output = Expr;
            fn $m(self, rhs: &Expr) -> Expr {
                $f(&self, rhs)
            }
        }
        impl ops::$tr<Expr> for &Expr {
            type Output = Expr;
            fn $m(self, rhs: Expr) -> Expr {
                $f(self, &rhs)
            }
        }
        impl ops::$tr<&Expr> for &Expr {
            type Output = Expr;
            fn $m(self, rhs: &Expr) -> Expr {
                $f(self, rhs)
            }
        }
    };
}

fn sub(a: &Expr, b: &Expr) -> Expr {
    add(a, &neg(b))
}

binop!(Add, add, add);
binop!(Sub, sub, sub);
binop!(Mul, mul, mul);
binop!(Div, div, div);

impl ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        neg(&self)
    }
}

impl ops::Neg for &Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        neg(self)
    }
}

impl From<f64> for Expr {
    fn from(v: f64) -> Self {
        Expr::real(v)
    }
}

impl From<C64> for Expr {
    fn from(c: C64) -> Self {
        Expr::constant(c)
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    End,
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    tok: Tok,
    tok_start: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Parser {
            src,
            pos: 0,
            tok: Tok::End,
            tok_start: 0,
        }
    }

    fn err<T>(&self, at: usize, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            column: at + 1,
            message: message.into(),
        })
    }

    fn advance(&mut self) -> Result<()> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        self.tok_start = self.pos;
        if self.pos >= bytes.len() {
            self.tok = Tok::End;
            return Ok(());
        }
        let c = bytes[self.pos];
        if c.is_ascii_digit() || c == b'.' {
            let start = self.pos;
            while self.pos < bytes.len() && (bytes[self.pos].is_ascii_digit() || bytes[self.pos] == b'.') {
                self.pos += 1;
            }
            if self.pos < bytes.len() && (bytes[self.pos] == b'e' || bytes[self.pos] == b'E') {
                let save = self.pos;
                self.pos += 1;
                if self.pos < bytes.len() && (bytes[self.pos] == b'+' || bytes[self.pos] == b'-') {
                    self.pos += 1;
                }
                if self.pos < bytes.len() && bytes[self.pos].is_ascii_digit() {
                    while self.pos < bytes.len() && bytes[self.pos].is_ascii_digit() {
                        self.pos += 1;
                    }
                } else {
                    // `2e` followed by something that is not an exponent
                    self.pos = save;
                }
            }
            let text = &self.src[start..self.pos];
            match text.parse::<f64>() {
                Ok(v) => self.tok = Tok::Num(v),
                Err(_) => return self.err(start, format!("malformed number `{text}`")),
            }
        } else if c.is_ascii_alphabetic() || c == b'_' {
            let start = self.pos;
            while self.pos < bytes.len() && (bytes[self.pos].is_ascii_alphanumeric() || bytes[self.pos] == b'_') {
                self.pos += 1;
            }
            self.tok = Tok::Ident(self.src[start..self.pos].to_string());
        } else if b"+-*/^()".contains(&c) {
            self.pos += 1;
            if c == b'*' && self.pos < bytes.len() && bytes[self.pos] == b'*' {
                self.pos += 1;
                self.tok = Tok::Op('^');
            } else {
                self.tok = Tok::Op(c as char);
            }
        } else {
            let ch = self.src[self.pos..].chars().next().unwrap_or('?');
            return self.err(self.pos, format!("unexpected character `{ch}`"));
        }
        Ok(())
    }

    fn parse_all(mut self) -> Result<Expr> {
        self.advance()?;
        if self.tok == Tok::End {
            return self.err(0, "empty expression");
        }
        let e = self.expr()?;
        if self.tok != Tok::End {
            return self.err(self.tok_start, "unexpected trailing input");
        }
        Ok(e)
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            match self.tok {
                Tok::Op('+') => {
                    self.advance()?;
                    lhs = lhs + self.term()?;
                }
                Tok::Op('-') => {
                    self.advance()?;
                    lhs = lhs - self.term()?;
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            match self.tok {
                Tok::Op('*') => {
                    self.advance()?;
                    lhs = lhs * self.unary()?;
                }
                Tok::Op('/') => {
                    self.advance()?;
                    lhs = lhs / self.unary()?;
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        match self.tok {
            Tok::Op('-') => {
                self.advance()?;
                Ok(-self.unary()?)
            }
            Tok::Op('+') => {
                self.advance()?;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.tok == Tok::Op('^') {
            let at = self.tok_start;
            self.advance()?;
            let exponent = self.unary()?;
            return match exponent.as_const() {
                Some(c) if c.im == 0.0 => Ok(base.powf(c.re)),
                Some(_) => self.err(at, "complex exponents are not supported"),
                None => Ok((exponent * base.ln()).exp()),
            };
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        let at = self.tok_start;
        match self.tok.clone() {
            Tok::Num(v) => {
                self.advance()?;
                Ok(Expr::real(v))
            }
            Tok::Op('(') => {
                self.advance()?;
                let e = self.expr()?;
                if self.tok != Tok::Op(')') {
                    return self.err(self.tok_start, "expected `)`");
                }
                self.advance()?;
                Ok(e)
            }
            Tok::Ident(name) => {
                self.advance()?;
                match name.as_str() {
                    "x" => Ok(Expr::x()),
                    "y" => Ok(Expr::y()),
                    "i" => Ok(Expr::i()),
                    "pi" => Ok(Expr::real(std::f64::consts::PI)),
                    "sin" | "cos" | "tan" | "exp" | "log" | "ln" | "sqrt" => {
                        if self.tok != Tok::Op('(') {
                            return self.err(self.tok_start, format!("expected `(` after `{name}`"));
                        }
                        self.advance()?;
                        let arg = self.expr()?;
                        if self.tok != Tok::Op(')') {
                            return self.err(self.tok_start, "expected `)`");
                        }
                        self.advance()?;
                        Ok(match name.as_str() {
                            "sin" => arg.sin(),
                            "cos" => arg.cos(),
                            "tan" => arg.sin() / arg.cos(),
                            "exp" => arg.exp(),
                            "log" | "ln" => arg.ln(),
                            _ => arg.sqrt(),
                        })
                    }
                    _ => self.err(at, format!("unknown identifier `{name}`")),
                }
            }
            Tok::End => self.err(at, "unexpected end of expression"),
            Tok::Op(c) => self.err(at, format!("unexpected `{c}`")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(e: &Expr, var: Var, x: f64, y: f64) -> C64 {
        let h = 1e-5;
        let (p, m) = match var {
            Var::X => (e.eval(x + h, y), e.eval(x - h, y)),
            Var::Y => (e.eval(x, y + h), e.eval(x, y - h)),
        };
        (p - m) / (2.0 * h)
    }

    #[test]
    fn parses_and_evaluates() {
        let e = Expr::parse("3 + 2*x^2 - y/4").unwrap();
        assert!((e.eval_real(0.5, 2.0) - 3.0).abs() < 1e-15);
        let e = Expr::parse("exp(i*pi)").unwrap();
        assert!((e.eval(0.0, 0.0) - C64::new(-1.0, 0.0)).norm() < 1e-15);
        let e = Expr::parse("-x^2").unwrap();
        assert_eq!(e.eval_real(3.0, 0.0), -9.0);
        let e = Expr::parse("2**3 + 1e-1").unwrap();
        assert!((e.eval_real(0.0, 0.0) - 8.1).abs() < 1e-15);
    }

    #[test]
    fn parse_errors_report_column() {
        match Expr::parse("1 + * x") {
            Err(Error::Parse { column, .. }) => assert_eq!(column, 5),
            other => panic!("unexpected {other:?}"),
        }
        assert!(Expr::parse("sin x").is_err());
        assert!(Expr::parse("(x + 1").is_err());
        assert!(Expr::parse("foo(x)").is_err());
        assert!(Expr::parse("").is_err());
        assert!(Expr::parse("x $ y").is_err());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let srcs = [
            "log(2/(1+x^2+y^2))",
            "sin(x*y) + cos(2*x) * exp(-y)",
            "sqrt(2 + x) * (1 - x^2 - y^2)^2",
            "x^2.5 + y",
            "i*x*exp(i*(1-x^2-y^2)^2)",
        ];
        for s in srcs {
            let e = Expr::parse(s).unwrap();
            for &(x, y) in &[(0.3, -0.2), (0.1, 0.7), (0.5, 0.5)] {
                for var in [Var::X, Var::Y] {
                    let exact = e.diff(var).eval(x, y);
                    assert!((exact - fd(&e, var, x, y)).norm() < 1e-8, "{s} {var:?}");
                }
            }
        }
    }

    #[test]
    fn display_round_trips() {
        let e = Expr::parse("-(3*x - 2.5)^2 / (1 + y) + i*sin(x) - 0.25").unwrap();
        let again = Expr::parse(&e.to_string()).unwrap();
        for &(x, y) in &[(0.3, -0.2), (0.9, 0.1)] {
            assert!((e.eval(x, y) - again.eval(x, y)).norm() < 1e-14);
        }
    }

    #[test]
    fn conj_and_reality() {
        let e = Expr::parse("x + i*y*exp(i*x)").unwrap();
        assert!(!e.is_real());
        let c = e.conj();
        assert!((c.eval(0.4, 0.2) - e.eval(0.4, 0.2).conj()).norm() < 1e-15);
        assert!(Expr::parse("exp(-x)*cos(y)").unwrap().is_real());
    }

    #[test]
    fn simplification_folds_constants() {
        let e = Expr::x() * Expr::zero() + Expr::real(2.0) * Expr::real(3.0);
        assert_eq!(e.as_const(), Some(C64::new(6.0, 0.0)));
        assert!(Expr::real(5.0).dx().is_zero());
    }
}
