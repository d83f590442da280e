//! Symbolic expressions over numbered variables.
//!
//! Expressions are immutable DAGs with shared subtrees. Constructors fold
//! constants and drop trivial identities so that symbolic derivatives stay
//! small. Evaluation goes through [`Tape`], which deduplicates common
//! subexpressions and supports plain, truncated-series and incremental
//! Taylor-coefficient evaluation.

mod parse;
mod tape;

pub use parse::{parse_expr, ParseError, VarTable};
pub use tape::{DomainError, Tape, TapeScalar, TaylorWork};

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

/// A node of the expression graph.
#[derive(Debug)]
pub enum Node {
    Const(f64),
    Var(usize),
    Neg(Expr),
    Add(Expr, Expr),
    Sub(Expr, Expr),
    Mul(Expr, Expr),
    Div(Expr, Expr),
    /// Power with a constant exponent.
    Pow(Expr, f64),
    Exp(Expr),
    Ln(Expr),
    Sin(Expr),
    Cos(Expr),
    Sqrt(Expr),
    /// `exp(-1/x) * x^(-m)` for `x > 0`, exactly zero otherwise.
    Psi(i32, Expr),
}

/// Shared handle to an expression node.
#[derive(Clone, Debug)]
pub struct Expr(Arc<Node>);

impl Expr {
    pub fn node(&self) -> &Node {
        &self.0
    }

    pub(crate) fn ptr(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    fn wrap(n: Node) -> Expr {
        Expr(Arc::new(n))
    }

    pub fn constant(c: f64) -> Expr {
        Expr::wrap(Node::Const(c))
    }

    pub fn var(i: usize) -> Expr {
        Expr::wrap(Node::Var(i))
    }

    pub fn zero() -> Expr {
        Expr::constant(0.0)
    }

    pub fn one() -> Expr {
        Expr::constant(1.0)
    }

    pub fn as_const(&self) -> Option<f64> {
        match self.node() {
            Node::Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn is_const(&self, v: f64) -> bool {
        self.as_const() == Some(v)
    }

    pub fn neg(&self) -> Expr {
        match self.node() {
            Node::Const(c) => Expr::constant(-c),
            Node::Neg(a) => a.clone(),
            _ => Expr::wrap(Node::Neg(self.clone())),
        }
    }

    pub fn add(&self, o: &Expr) -> Expr {
        match (self.as_const(), o.as_const()) {
            (Some(a), Some(b)) => Expr::constant(a + b),
            (Some(a), _) if a == 0.0 => o.clone(),
            (_, Some(b)) if b == 0.0 => self.clone(),
            _ => match o.node() {
                Node::Neg(b) => self.sub(b),
                _ => Expr::wrap(Node::Add(self.clone(), o.clone())),
            },
        }
    }

    pub fn sub(&self, o: &Expr) -> Expr {
        match (self.as_const(), o.as_const()) {
            (Some(a), Some(b)) => Expr::constant(a - b),
            (Some(a), _) if a == 0.0 => o.neg(),
            (_, Some(b)) if b == 0.0 => self.clone(),
            _ => {
                if self.ptr() == o.ptr() {
                    return Expr::zero();
                }
                match o.node() {
                    Node::Neg(b) => self.add(b),
                    _ => Expr::wrap(Node::Sub(self.clone(), o.clone())),
                }
            }
        }
    }

    pub fn mul(&self, o: &Expr) -> Expr {
        match (self.as_const(), o.as_const()) {
            (Some(a), Some(b)) => Expr::constant(a * b),
            (Some(a), _) if a == 0.0 => Expr::zero(),
            (_, Some(b)) if b == 0.0 => Expr::zero(),
            (Some(a), _) if a == 1.0 => o.clone(),
            (_, Some(b)) if b == 1.0 => self.clone(),
            (Some(a), _) if a == -1.0 => o.neg(),
            (_, Some(b)) if b == -1.0 => self.neg(),
            (None, Some(_)) => o.mul(self),
            (Some(a), None) => match o.node() {
                Node::Mul(x, y) if x.as_const().is_some() => {
                    Expr::constant(a * x.as_const().unwrap()).mul(y)
                }
                Node::Neg(x) => Expr::constant(-a).mul(x),
                _ => Expr::wrap(Node::Mul(self.clone(), o.clone())),
            },
            _ => match (self.node(), o.node()) {
                (Node::Neg(x), Node::Neg(y)) => x.mul(y),
                (Node::Neg(x), _) => x.mul(o).neg(),
                (_, Node::Neg(y)) => self.mul(y).neg(),
                _ => Expr::wrap(Node::Mul(self.clone(), o.clone())),
            },
        }
    }

    pub fn div(&self, o: &Expr) -> Expr {
        match (self.as_const(), o.as_const()) {
            (Some(a), Some(b)) if b != 0.0 => Expr::constant(a / b),
            (Some(a), _) if a == 0.0 => Expr::zero(),
            (_, Some(b)) if b == 1.0 => self.clone(),
            (_, Some(b)) if b == -1.0 => self.neg(),
            (_, Some(b)) if b != 0.0 && (1.0 / b).is_finite() && (1.0 / b) * b == 1.0 => {
                self.mul(&Expr::constant(1.0 / b))
            }
            _ => Expr::wrap(Node::Div(self.clone(), o.clone())),
        }
    }

    pub fn powf(&self, e: f64) -> Expr {
        if e == 0.0 {
            return Expr::one();
        }
        if e == 1.0 {
            return self.clone();
        }
        match self.node() {
            Node::Const(c) if e.fract() == 0.0 || *c > 0.0 => Expr::constant(c.powf(e)),
            _ => Expr::wrap(Node::Pow(self.clone(), e)),
        }
    }

    /// General power `self^o`; non-constant exponents become `exp(o ln self)`.
    pub fn pow(&self, o: &Expr) -> Expr {
        match o.as_const() {
            Some(e) => self.powf(e),
            None => o.mul(&self.ln()).exp(),
        }
    }

    pub fn exp(&self) -> Expr {
        match self.as_const() {
            Some(c) => Expr::constant(c.exp()),
            None => Expr::wrap(Node::Exp(self.clone())),
        }
    }

    pub fn ln(&self) -> Expr {
        match self.as_const() {
            Some(c) if c > 0.0 => Expr::constant(c.ln()),
            _ => Expr::wrap(Node::Ln(self.clone())),
        }
    }

    pub fn sin(&self) -> Expr {
        match self.as_const() {
            Some(c) => Expr::constant(c.sin()),
            None => Expr::wrap(Node::Sin(self.clone())),
        }
    }

    pub fn cos(&self) -> Expr {
        match self.as_const() {
            Some(c) => Expr::constant(c.cos()),
            None => Expr::wrap(Node::Cos(self.clone())),
        }
    }

    pub fn sqrt(&self) -> Expr {
        match self.as_const() {
            Some(c) if c >= 0.0 => Expr::constant(c.sqrt()),
            _ => Expr::wrap(Node::Sqrt(self.clone())),
        }
    }

    pub fn psi(&self, m: i32) -> Expr {
        match self.as_const() {
            Some(c) => Expr::constant(psi_f64(m, c)),
            None => Expr::wrap(Node::Psi(m, self.clone())),
        }
    }

    pub fn square(&self) -> Expr {
        self.mul(self)
    }

    pub fn scale(&self, c: f64) -> Expr {
        Expr::constant(c).mul(self)
    }

    pub fn sum<'a, I: IntoIterator<Item = &'a Expr>>(items: I) -> Expr {
        items.into_iter().fold(Expr::zero(), |acc, e| acc.add(e))
    }

    /// Partial derivative with respect to variable `v`.
    pub fn diff(&self, v: usize) -> Expr {
        let mut memo = HashMap::new();
        self.diff_memo(v, &mut memo)
    }

    /// Derivatives with respect to each of `vars`, sharing work between them.
    pub fn gradient(&self, vars: &[usize]) -> Vec<Expr> {
        vars.iter().map(|&v| self.diff(v)).collect()
    }

    fn diff_memo(&self, v: usize, memo: &mut HashMap<usize, Expr>) -> Expr {
        if let Some(d) = memo.get(&self.ptr()) {
            return d.clone();
        }
        let d = match self.node() {
            Node::Const(_) => Expr::zero(),
            Node::Var(i) => {
                if *i == v {
                    Expr::one()
                } else {
                    Expr::zero()
                }
            }
            Node::Neg(a) => a.diff_memo(v, memo).neg(),
            Node::Add(a, b) => a.diff_memo(v, memo).add(&b.diff_memo(v, memo)),
            Node::Sub(a, b) => a.diff_memo(v, memo).sub(&b.diff_memo(v, memo)),
            Node::Mul(a, b) => {
                let da = a.diff_memo(v, memo);
                let db = b.diff_memo(v, memo);
                da.mul(b).add(&a.mul(&db))
            }
            Node::Div(a, b) => {
                let da = a.diff_memo(v, memo);
                let db = b.diff_memo(v, memo);
                if db.is_const(0.0) {
                    da.div(b)
                } else {
                    da.div(b).sub(&self.mul(&db).div(b))
                }
            }
            Node::Pow(a, e) => {
                let da = a.diff_memo(v, memo);
                if da.is_const(0.0) {
                    Expr::zero()
                } else {
                    Expr::constant(*e).mul(&a.powf(e - 1.0)).mul(&da)
                }
            }
            Node::Exp(a) => self.mul(&a.diff_memo(v, memo)),
            Node::Ln(a) => a.diff_memo(v, memo).div(a),
            Node::Sin(a) => a.cos().mul(&a.diff_memo(v, memo)),
            Node::Cos(a) => a.sin().neg().mul(&a.diff_memo(v, memo)),
            Node::Sqrt(a) => {
                let da = a.diff_memo(v, memo);
                if da.is_const(0.0) {
                    Expr::zero()
                } else {
                    da.div(&self.scale(2.0))
                }
            }
            Node::Psi(m, a) => {
                let da = a.diff_memo(v, memo);
                if da.is_const(0.0) {
                    Expr::zero()
                } else {
                    // d/dx psi_m = psi_{m+2} - m psi_{m+1}
                    let mut d = a.psi(m + 2);
                    if *m != 0 {
                        d = d.sub(&a.psi(m + 1).scale(*m as f64));
                    }
                    d.mul(&da)
                }
            }
        };
        memo.insert(self.ptr(), d.clone());
        d
    }

    /// Replaces every `Var(i)` by `vals[i]`.
    pub fn substitute(&self, vals: &[Expr]) -> Expr {
        let mut memo = HashMap::new();
        self.subst_memo(vals, &mut memo)
    }

    fn subst_memo(&self, vals: &[Expr], memo: &mut HashMap<usize, Expr>) -> Expr {
        if let Some(d) = memo.get(&self.ptr()) {
            return d.clone();
        }
        let mut s = |e: &Expr| e.subst_memo(vals, memo);
        let r = match self.node() {
            Node::Const(_) => self.clone(),
            Node::Var(i) => vals[*i].clone(),
            Node::Neg(a) => s(a).neg(),
            Node::Add(a, b) => {
                let x = s(a);
                x.add(&s(b))
            }
            Node::Sub(a, b) => {
                let x = s(a);
                x.sub(&s(b))
            }
            Node::Mul(a, b) => {
                let x = s(a);
                x.mul(&s(b))
            }
            Node::Div(a, b) => {
                let x = s(a);
                x.div(&s(b))
            }
            Node::Pow(a, e) => s(a).powf(*e),
            Node::Exp(a) => s(a).exp(),
            Node::Ln(a) => s(a).ln(),
            Node::Sin(a) => s(a).sin(),
            Node::Cos(a) => s(a).cos(),
            Node::Sqrt(a) => s(a).sqrt(),
            Node::Psi(m, a) => s(a).psi(*m),
        };
        memo.insert(self.ptr(), r.clone());
        r
    }

    /// One past the largest variable index used, or 0.
    pub fn var_bound(&self) -> usize {
        let mut seen = HashMap::new();
        self.var_bound_memo(&mut seen)
    }

    fn var_bound_memo(&self, seen: &mut HashMap<usize, usize>) -> usize {
        if let Some(v) = seen.get(&self.ptr()) {
            return *v;
        }
        let r = match self.node() {
            Node::Const(_) => 0,
            Node::Var(i) => i + 1,
            Node::Neg(a)
            | Node::Pow(a, _)
            | Node::Exp(a)
            | Node::Ln(a)
            | Node::Sin(a)
            | Node::Cos(a)
            | Node::Sqrt(a)
            | Node::Psi(_, a) => a.var_bound_memo(seen),
            Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
                a.var_bound_memo(seen).max(b.var_bound_memo(seen))
            }
        };
        seen.insert(self.ptr(), r);
        r
    }

    /// Evaluates with plain floats; domain violations yield an error.
    pub fn eval(&self, x: &[f64]) -> Result<f64, DomainError> {
        let tape = Tape::compile(std::slice::from_ref(self), x.len());
        let mut out = [0.0];
        tape.eval(x, &mut out)?;
        Ok(out[0])
    }

    /// Renders the expression using the given variable names.
    pub fn display<'a>(&'a self, names: &'a [String]) -> ExprDisplay<'a> {
        ExprDisplay { e: self, names }
    }
}

/// `exp(-1/x) x^(-m)` for `x > 0`, zero otherwise.
pub fn psi_f64(m: i32, x: f64) -> f64 {
    if x > 0.0 {
        (-1.0 / x).exp() * x.powi(-m)
    } else {
        0.0
    }
}

/// Smooth step: 0 for `x <= 0`, 1 for `x >= 1`.
pub fn smooth_step(x: &Expr) -> Expr {
    let a = x.psi(0);
    let b = Expr::one().sub(x).psi(0);
    a.div(&a.add(&b))
}

pub fn smooth_step_f64(x: f64) -> f64 {
    let a = psi_f64(0, x);
    let b = psi_f64(0, 1.0 - x);
    a / (a + b)
}

/// Plateau in a squared radius: 1 for `s <= inner^2`, 0 for `s >= outer^2`.
pub fn plateau_sq(s: &Expr, inner: f64, outer: f64) -> Expr {
    let o2 = outer * outer;
    let i2 = inner * inner;
    smooth_step(&Expr::constant(o2).sub(s).scale(1.0 / (o2 - i2)))
}

/// Compact bump `exp(1 - 1/(1-s))` for `s < 1`, zero otherwise; equals 1 at `s = 0`.
pub fn bump_sq(s: &Expr) -> Expr {
    Expr::one().sub(s).psi(0).scale(std::f64::consts::E)
}

pub struct ExprDisplay<'a> {
    e: &'a Expr,
    names: &'a [String],
}

fn prec(n: &Node) -> u8 {
    match n {
        Node::Add(..) | Node::Sub(..) => 1,
        Node::Mul(..) | Node::Div(..) => 2,
        Node::Neg(_) => 3,
        Node::Pow(..) => 4,
        Node::Const(c) if *c < 0.0 => 3,
        _ => 5,
    }
}

impl ExprDisplay<'_> {
    fn write(&self, e: &Expr, f: &mut fmt::Formatter<'_>, min: u8) -> fmt::Result {
        let p = prec(e.node());
        let paren = p < min;
        if paren {
            write!(f, "(")?;
        }
        match e.node() {
            Node::Const(c) => write!(f, "{:?}", c)?,
            Node::Var(i) => match self.names.get(*i) {
                Some(n) => write!(f, "{}", n)?,
                None => write!(f, "x{}", i)?,
            },
            Node::Neg(a) => {
                write!(f, "-")?;
                self.write(a, f, 4)?;
            }
            Node::Add(a, b) => {
                self.write(a, f, 1)?;
                write!(f, " + ")?;
                self.write(b, f, 2)?;
            }
            Node::Sub(a, b) => {
                self.write(a, f, 1)?;
                write!(f, " - ")?;
                self.write(b, f, 2)?;
            }
            Node::Mul(a, b) => {
                self.write(a, f, 2)?;
                write!(f, "*")?;
                self.write(b, f, 3)?;
            }
            Node::Div(a, b) => {
                self.write(a, f, 2)?;
                write!(f, "/")?;
                self.write(b, f, 3)?;
            }
            Node::Pow(a, x) => {
                self.write(a, f, 5)?;
                if *x < 0.0 {
                    write!(f, "^({:?})", x)?;
                } else {
                    write!(f, "^{:?}", x)?;
                }
            }
            Node::Exp(a) => self.call("exp", a, f)?,
            Node::Ln(a) => self.call("ln", a, f)?,
            Node::Sin(a) => self.call("sin", a, f)?,
            Node::Cos(a) => self.call("cos", a, f)?,
            Node::Sqrt(a) => self.call("sqrt", a, f)?,
            Node::Psi(m, a) => {
                write!(f, "psi(")?;
                self.write(a, f, 0)?;
                if *m != 0 {
                    write!(f, ", {}", m)?;
                }
                write!(f, ")")?;
            }
        }
        if paren {
            write!(f, ")")?;
        }
        Ok(())
    }

    fn call(&self, name: &str, a: &Expr, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", name)?;
        self.write(a, f, 0)?;
        write!(f, ")")
    }
}

impl fmt::Display for ExprDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.write(self.e, f, 0)
    }
}
