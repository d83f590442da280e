use super::{Expr, Node};
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

/// A domain violation met during evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainError {
    pub op: &'static str,
    pub arg: f64,
    pub subexpr: String,
}

impl fmt::Display for DomainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} of {:e} in `{}`", self.op, self.arg, self.subexpr)
    }
}

impl std::error::Error for DomainError {}

#[derive(Clone, Copy, Debug)]
enum Op {
    Const(f64),
    Var(u32),
    Neg(u32),
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    /// Unchecked reciprocal used inside guarded branches.
    Recip(u32),
    Exp(u32),
    Ln(u32),
    Sin(u32, u32),
    Cos(u32, u32),
    Sqrt(u32),
    PowF(u32, f64),
    SelPos(u32, u32),
}

/// Scalar types the tape can evaluate over.
pub trait TapeScalar: Clone {
    fn constant_like(c: f64, like: &Self) -> Self;
    fn value0(&self) -> f64;
    fn add(&self, o: &Self) -> Self;
    fn sub(&self, o: &Self) -> Self;
    fn mul(&self, o: &Self) -> Self;
    fn div(&self, o: &Self) -> Self;
    fn neg(&self) -> Self;
    fn recip(&self) -> Self;
    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn sqrt(&self) -> Self;
    fn powf(&self, e: f64) -> Self;
    fn zero_like(like: &Self) -> Self {
        Self::constant_like(0.0, like)
    }
}

impl TapeScalar for f64 {
    fn constant_like(c: f64, _: &Self) -> Self {
        c
    }
    fn value0(&self) -> f64 {
        *self
    }
    fn add(&self, o: &Self) -> Self {
        self + o
    }
    fn sub(&self, o: &Self) -> Self {
        self - o
    }
    fn mul(&self, o: &Self) -> Self {
        self * o
    }
    fn div(&self, o: &Self) -> Self {
        self / o
    }
    fn neg(&self) -> Self {
        -self
    }
    fn recip(&self) -> Self {
        1.0 / self
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn ln(&self) -> Self {
        f64::ln(*self)
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    fn powf(&self, e: f64) -> Self {
        f64::powf(*self, e)
    }
}

/// Compiled, deduplicated evaluation program for a list of expressions.
#[derive(Clone)]
pub struct Tape {
    ops: Vec<Op>,
    outputs: Vec<u32>,
    nvars: usize,
    sources: HashMap<u32, Expr>,
    names: Option<Arc<Vec<String>>>,
}

struct Compiler {
    ops: Vec<Op>,
    by_ptr: HashMap<usize, u32>,
    by_key: HashMap<(u8, u32, u32, u64), u32>,
    sources: HashMap<u32, Expr>,
}

impl Compiler {
    fn push(&mut self, key: (u8, u32, u32, u64), op: Op) -> u32 {
        if let Some(&i) = self.by_key.get(&key) {
            return i;
        }
        let i = self.ops.len() as u32;
        self.ops.push(op);
        self.by_key.insert(key, i);
        i
    }

    fn constant(&mut self, c: f64) -> u32 {
        self.push((0, 0, 0, c.to_bits()), Op::Const(c))
    }

    fn bin(&mut self, tag: u8, a: u32, b: u32) -> u32 {
        let (x, y) = if (tag == 3 || tag == 5) && b < a {
            (b, a)
        } else {
            (a, b)
        };
        let op = match tag {
            3 => Op::Add(x, y),
            4 => Op::Sub(x, y),
            5 => Op::Mul(x, y),
            6 => Op::Div(x, y),
            15 => Op::SelPos(x, y),
            _ => unreachable!(),
        };
        self.push((tag, x, y, 0), op)
    }

    fn un(&mut self, tag: u8, a: u32) -> u32 {
        let op = match tag {
            2 => Op::Neg(a),
            7 => Op::Recip(a),
            8 => Op::Exp(a),
            9 => Op::Ln(a),
            12 => Op::Sqrt(a),
            _ => unreachable!(),
        };
        self.push((tag, a, 0, 0), op)
    }

    fn sincos(&mut self, a: u32) -> (u32, u32) {
        if let (Some(&s), Some(&c)) = (
            self.by_key.get(&(10, a, 0, 0)),
            self.by_key.get(&(11, a, 0, 0)),
        ) {
            return (s, c);
        }
        let s = self.ops.len() as u32;
        let c = s + 1;
        self.ops.push(Op::Sin(a, c));
        self.ops.push(Op::Cos(a, s));
        self.by_key.insert((10, a, 0, 0), s);
        self.by_key.insert((11, a, 0, 0), c);
        (s, c)
    }

    fn ipow(&mut self, a: u32, e: u32) -> u32 {
        match e {
            0 => self.constant(1.0),
            1 => a,
            _ => {
                let h = self.ipow(a, e / 2);
                let sq = self.bin(5, h, h);
                if e % 2 == 1 {
                    self.bin(5, sq, a)
                } else {
                    sq
                }
            }
        }
    }

    fn node(&mut self, e: &Expr) -> u32 {
        if let Some(&i) = self.by_ptr.get(&e.ptr()) {
            return i;
        }
        let i = match e.node() {
            Node::Const(c) => self.constant(*c),
            Node::Var(v) => self.push((1, *v as u32, 0, 0), Op::Var(*v as u32)),
            Node::Neg(a) => {
                let a = self.node(a);
                self.un(2, a)
            }
            Node::Add(a, b) => {
                let (a, b) = (self.node(a), self.node(b));
                self.bin(3, a, b)
            }
            Node::Sub(a, b) => {
                let (a, b) = (self.node(a), self.node(b));
                self.bin(4, a, b)
            }
            Node::Mul(a, b) => {
                let (a, b) = (self.node(a), self.node(b));
                self.bin(5, a, b)
            }
            Node::Div(a, b) => {
                let (a, b) = (self.node(a), self.node(b));
                let i = self.bin(6, a, b);
                self.sources.entry(i).or_insert_with(|| e.clone());
                i
            }
            Node::Pow(a, x) => {
                let a = self.node(a);
                if x.fract() == 0.0 && x.abs() <= 64.0 {
                    let p = self.ipow(a, x.abs() as u32);
                    if *x < 0.0 {
                        let one = self.constant(1.0);
                        let i = self.bin(6, one, p);
                        self.sources.entry(i).or_insert_with(|| e.clone());
                        i
                    } else {
                        p
                    }
                } else {
                    let i = self.push((13, a, 0, x.to_bits()), Op::PowF(a, *x));
                    self.sources.entry(i).or_insert_with(|| e.clone());
                    i
                }
            }
            Node::Exp(a) => {
                let a = self.node(a);
                self.un(8, a)
            }
            Node::Ln(a) => {
                let a = self.node(a);
                let i = self.un(9, a);
                self.sources.entry(i).or_insert_with(|| e.clone());
                i
            }
            Node::Sqrt(a) => {
                let a = self.node(a);
                let i = self.un(12, a);
                self.sources.entry(i).or_insert_with(|| e.clone());
                i
            }
            Node::Sin(a) => {
                let a = self.node(a);
                self.sincos(a).0
            }
            Node::Cos(a) => {
                let a = self.node(a);
                self.sincos(a).1
            }
            Node::Psi(m, a) => {
                let a = self.node(a);
                let r = self.un(7, a);
                let nr = self.un(2, r);
                let ex = self.un(8, nr);
                let val = match m.cmp(&0) {
                    std::cmp::Ordering::Equal => ex,
                    std::cmp::Ordering::Greater => {
                        let rp = self.ipow(r, *m as u32);
                        self.bin(5, ex, rp)
                    }
                    std::cmp::Ordering::Less => {
                        let ap = self.ipow(a, (-m) as u32);
                        self.bin(5, ex, ap)
                    }
                };
                self.bin(15, a, val)
            }
        };
        self.by_ptr.insert(e.ptr(), i);
        i
    }
}

impl Tape {
    pub fn compile(exprs: &[Expr], nvars: usize) -> Tape {
        let mut c = Compiler {
            ops: Vec::new(),
            by_ptr: HashMap::new(),
            by_key: HashMap::new(),
            sources: HashMap::new(),
        };
        let outputs = exprs.iter().map(|e| c.node(e)).collect();
        for op in &c.ops {
            if let Op::Var(v) = op {
                assert!(
                    (*v as usize) < nvars,
                    "variable index {v} out of range for {nvars} inputs"
                );
            }
        }
        Tape {
            ops: c.ops,
            outputs,
            nvars,
            sources: c.sources,
            names: None,
        }
    }

    /// Names used when rendering subexpressions in domain errors.
    pub fn with_names(mut self, names: Vec<String>) -> Tape {
        self.names = Some(Arc::new(names));
        self
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn num_outputs(&self) -> usize {
        self.outputs.len()
    }

    pub fn num_vars(&self) -> usize {
        self.nvars
    }

    fn domain(&self, i: usize, op: &'static str, arg: f64) -> DomainError {
        let subexpr = match self.sources.get(&(i as u32)) {
            Some(e) => match &self.names {
                Some(n) => e.display(n).to_string(),
                None => e.display(&[]).to_string(),
            },
            None => String::from("<internal>"),
        };
        DomainError { op, arg, subexpr }
    }

    fn check(&self, i: usize, a0: f64, op: &Op) -> Result<(), DomainError> {
        match op {
            Op::Ln(_) if !(a0 > 0.0) => Err(self.domain(i, "logarithm", a0)),
            Op::Sqrt(_) if !(a0 > 0.0) => Err(self.domain(i, "square root", a0)),
            Op::PowF(_, _) if !(a0 > 0.0) => Err(self.domain(i, "fractional power", a0)),
            Op::Div(_, _) if a0 == 0.0 => Err(self.domain(i, "division by", a0)),
            _ => Ok(()),
        }
    }

    /// Evaluates all outputs over any [`TapeScalar`].
    pub fn eval_generic<T: TapeScalar>(&self, x: &[T], out: &mut [T]) -> Result<(), DomainError> {
        assert!(x.len() >= self.nvars || self.nvars == 0);
        let like = match x.first() {
            Some(v) => v.clone(),
            None => T::constant_like(0.0, &out[0]),
        };
        let mut v: Vec<T> = Vec::with_capacity(self.ops.len());
        for (i, op) in self.ops.iter().enumerate() {
            let r = match *op {
                Op::Const(c) => T::constant_like(c, &like),
                Op::Var(k) => x[k as usize].clone(),
                Op::Neg(a) => v[a as usize].neg(),
                Op::Add(a, b) => v[a as usize].add(&v[b as usize]),
                Op::Sub(a, b) => v[a as usize].sub(&v[b as usize]),
                Op::Mul(a, b) => v[a as usize].mul(&v[b as usize]),
                Op::Div(a, b) => {
                    self.check(i, v[b as usize].value0(), op)?;
                    v[a as usize].div(&v[b as usize])
                }
                Op::Recip(a) => v[a as usize].recip(),
                Op::Exp(a) => v[a as usize].exp(),
                Op::Ln(a) => {
                    self.check(i, v[a as usize].value0(), op)?;
                    v[a as usize].ln()
                }
                Op::Sin(a, _) => v[a as usize].sin(),
                Op::Cos(a, _) => v[a as usize].cos(),
                Op::Sqrt(a) => {
                    self.check(i, v[a as usize].value0(), op)?;
                    v[a as usize].sqrt()
                }
                Op::PowF(a, e) => {
                    self.check(i, v[a as usize].value0(), op)?;
                    v[a as usize].powf(e)
                }
                Op::SelPos(c, val) => {
                    if v[c as usize].value0() > 0.0 {
                        v[val as usize].clone()
                    } else {
                        T::zero_like(&like)
                    }
                }
            };
            v.push(r);
        }
        for (o, &k) in out.iter_mut().zip(&self.outputs) {
            *o = v[k as usize].clone();
        }
        Ok(())
    }

    /// Plain floating-point evaluation.
    pub fn eval(&self, x: &[f64], out: &mut [f64]) -> Result<(), DomainError> {
        self.eval_generic(x, out)
    }

    pub fn eval_vec(&self, x: &[f64]) -> Result<Vec<f64>, DomainError> {
        let mut out = vec![0.0; self.outputs.len()];
        self.eval(x, &mut out)?;
        Ok(out)
    }
}

/// Reusable buffers for order-by-order Taylor coefficient propagation.
///
/// Coefficient `k` of every node may be computed once coefficients
/// `0..k` of all nodes and `0..=k` of all inputs are known, which is what
/// Taylor ODE integrators need.
pub struct TaylorWork<'t> {
    tape: &'t Tape,
    cap: usize,
    buf: Vec<f64>,
    inp: Vec<f64>,
}

impl<'t> TaylorWork<'t> {
    pub fn new(tape: &'t Tape, order: usize) -> Self {
        let cap = order + 1;
        TaylorWork {
            tape,
            cap,
            buf: vec![0.0; tape.ops.len() * cap],
            inp: vec![0.0; tape.nvars * cap],
        }
    }

    pub fn order(&self) -> usize {
        self.cap - 1
    }

    #[inline]
    pub fn set_input(&mut self, var: usize, k: usize, v: f64) {
        self.inp[var * self.cap + k] = v;
    }

    #[inline]
    pub fn input(&self, var: usize, k: usize) -> f64 {
        self.inp[var * self.cap + k]
    }

    #[inline]
    pub fn output(&self, o: usize, k: usize) -> f64 {
        self.buf[self.tape.outputs[o] as usize * self.cap + k]
    }

    /// Coefficients `0..=order` of output `o`.
    pub fn output_series(&self, o: usize) -> &[f64] {
        let s = self.tape.outputs[o] as usize * self.cap;
        &self.buf[s..s + self.cap]
    }

    /// Computes coefficient `k` of every node.
    pub fn compute(&mut self, k: usize) -> Result<(), DomainError> {
        let cap = self.cap;
        let kf = k as f64;
        for (i, op) in self.tape.ops.iter().enumerate() {
            let b = &self.buf;
            let at = |n: u32, j: usize| b[n as usize * cap + j];
            let r = match *op {
                Op::Const(c) => {
                    if k == 0 {
                        c
                    } else {
                        0.0
                    }
                }
                Op::Var(v) => self.inp[v as usize * cap + k],
                Op::Neg(a) => -at(a, k),
                Op::Add(x, y) => at(x, k) + at(y, k),
                Op::Sub(x, y) => at(x, k) - at(y, k),
                Op::Mul(x, y) => {
                    let mut s = 0.0;
                    for j in 0..=k {
                        s += at(x, j) * at(y, k - j);
                    }
                    s
                }
                Op::Div(x, y) => {
                    let y0 = at(y, 0);
                    if k == 0 {
                        self.tape.check(i, y0, op)?;
                        at(x, 0) / y0
                    } else {
                        let mut s = at(x, k);
                        for j in 1..=k {
                            s -= at(y, j) * at(i as u32, k - j);
                        }
                        s / y0
                    }
                }
                Op::Recip(y) => {
                    let y0 = at(y, 0);
                    if k == 0 {
                        1.0 / y0
                    } else {
                        let mut s = 0.0;
                        for j in 1..=k {
                            s -= at(y, j) * at(i as u32, k - j);
                        }
                        s / y0
                    }
                }
                Op::Exp(a) => {
                    if k == 0 {
                        at(a, 0).exp()
                    } else {
                        let mut s = 0.0;
                        for j in 1..=k {
                            s += j as f64 * at(a, j) * at(i as u32, k - j);
                        }
                        s / kf
                    }
                }
                Op::Ln(a) => {
                    let a0 = at(a, 0);
                    if k == 0 {
                        self.tape.check(i, a0, op)?;
                        a0.ln()
                    } else {
                        let mut s = 0.0;
                        for j in 1..k {
                            s += j as f64 * at(i as u32, j) * at(a, k - j);
                        }
                        (at(a, k) - s / kf) / a0
                    }
                }
                Op::Sin(a, c) => {
                    if k == 0 {
                        at(a, 0).sin()
                    } else {
                        let mut s = 0.0;
                        for j in 1..=k {
                            s += j as f64 * at(a, j) * at(c, k - j);
                        }
                        s / kf
                    }
                }
                Op::Cos(a, sn) => {
                    if k == 0 {
                        at(a, 0).cos()
                    } else {
                        let mut s = 0.0;
                        for j in 1..=k {
                            s += j as f64 * at(a, j) * at(sn, k - j);
                        }
                        -s / kf
                    }
                }
                Op::Sqrt(a) => {
                    if k == 0 {
                        let a0 = at(a, 0);
                        self.tape.check(i, a0, op)?;
                        a0.sqrt()
                    } else {
                        let me = i as u32;
                        let mut s = at(a, k);
                        for j in 1..k {
                            s -= at(me, j) * at(me, k - j);
                        }
                        s / (2.0 * at(me, 0))
                    }
                }
                Op::PowF(a, e) => {
                    let a0 = at(a, 0);
                    if k == 0 {
                        self.tape.check(i, a0, op)?;
                        a0.powf(e)
                    } else {
                        let mut s = 0.0;
                        for j in 1..=k {
                            s += (e * j as f64 - (k - j) as f64) * at(a, j) * at(i as u32, k - j);
                        }
                        s / (kf * a0)
                    }
                }
                Op::SelPos(c, v) => {
                    if at(c, 0) > 0.0 {
                        at(v, k)
                    } else {
                        0.0
                    }
                }
            };
            self.buf[i * cap + k] = r;
        }
        Ok(())
    }

    /// Sets all input series and computes every coefficient.
    pub fn eval_series(&mut self, inputs: &[&[f64]]) -> Result<(), DomainError> {
        for (v, s) in inputs.iter().enumerate() {
            for k in 0..self.cap {
                self.set_input(v, k, s.get(k).copied().unwrap_or(0.0));
            }
        }
        for k in 0..self.cap {
            self.compute(k)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::VarTable;
    use super::*;

    fn parse(s: &str) -> Expr {
        super::super::parse_expr(s, &VarTable::new(vec!["x".into(), "y".into()])).unwrap()
    }

    /// Taylor coefficients of f(x0 + t) against finite-difference derivatives.
    fn check_series(src: &str, x0: f64) {
        let e = parse(src);
        let tape = Tape::compile(&[e.clone()], 2);
        let mut w = TaylorWork::new(&tape, 4);
        w.eval_series(&[&[x0, 1.0], &[0.3]]).unwrap();
        let mut d = e.clone();
        let mut fact = 1.0;
        for k in 0..=4 {
            let exact = d.eval(&[x0, 0.3]).unwrap() / fact;
            let got = w.output(0, k);
            assert!(
                (exact - got).abs() < 1e-10 * (1.0 + exact.abs()),
                "{src} k={k}: {exact} vs {got}"
            );
            d = d.diff(0);
            fact *= (k + 1) as f64;
        }
    }

    #[test]
    fn recurrences_match_symbolic_derivatives() {
        check_series("x*y + x^3", 0.7);
        check_series("1/(1+x^2)", 0.4);
        check_series("exp(sin(x))*cos(2*x)", 0.3);
        check_series("ln(1+x^2) + sqrt(x+2)", -0.5);
        check_series("(x+3)^1.5 - (x+3)^(-0.5)", 0.2);
        check_series("psi(x) + psi(x, 3)", 0.6);
        check_series("step(x)", 0.35);
    }

    #[test]
    fn psi_branch_is_exact_zero() {
        let e = parse("psi(x, 2)*y");
        let tape = Tape::compile(&[e], 2);
        let mut w = TaylorWork::new(&tape, 3);
        w.eval_series(&[&[-0.2, 1.0], &[5.0]]).unwrap();
        for k in 0..=3 {
            assert_eq!(w.output(0, k), 0.0);
        }
    }

    #[test]
    fn domain_errors_name_subexpression() {
        let names = vec!["x".to_string(), "y".to_string()];
        let e = parse("y + ln(x - 1)");
        let tape = Tape::compile(&[e], 2).with_names(names);
        let err = tape.eval_vec(&[0.5, 0.0]).unwrap_err();
        assert_eq!(err.op, "logarithm");
        assert!(err.subexpr.contains("ln(x - 1"), "{}", err.subexpr);
        let e = parse("1/(x-x*1)");
        assert!(e.eval(&[1.0, 0.0]).is_err() || e.eval(&[1.0, 0.0]).unwrap().is_finite());
    }

    #[test]
    fn common_subexpressions_are_shared() {
        let a = parse("sin(x*y) + cos(x*y) + (x*y)^2");
        let b = parse("y*x");
        let tape = Tape::compile(&[a, b], 2);
        // x, y, x*y, sin, cos, add, square, add
        assert!(tape.len() <= 8, "{}", tape.len());
    }
}
