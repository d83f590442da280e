//! Multivariate truncated power series.
//!
//! Used to obtain all partial derivatives of an expression up to a fixed
//! order at a point, independently of symbolic differentiation.

use crate::expr::{Expr, Tape, TapeScalar, TaylorWork};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// Monomial ordering and product table for `nvars` variables up to `order`.
#[derive(Debug)]
pub struct Layout {
    pub nvars: usize,
    pub order: usize,
    pub monos: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, usize>,
    pairs: Vec<(u32, u32, u32)>,
    degree: Vec<usize>,
}

fn monomials(nvars: usize, order: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    for d in 0..=order {
        let mut cur = vec![0u8; nvars];
        fill(&mut out, &mut cur, 0, d);
    }
    out
}

fn fill(out: &mut Vec<Vec<u8>>, cur: &mut Vec<u8>, at: usize, left: usize) {
    if at + 1 == cur.len() {
        cur[at] = left as u8;
        out.push(cur.clone());
        return;
    }
    if cur.is_empty() {
        if left == 0 {
            out.push(Vec::new());
        }
        return;
    }
    for v in (0..=left).rev() {
        cur[at] = v as u8;
        fill(out, cur, at + 1, left - v);
    }
    cur[at] = 0;
}

impl Layout {
    fn build(nvars: usize, order: usize) -> Layout {
        let monos = monomials(nvars, order);
        let index: HashMap<Vec<u8>, usize> = monos
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, m)| (m, i))
            .collect();
        let degree: Vec<usize> = monos
            .iter()
            .map(|m| m.iter().map(|&v| v as usize).sum())
            .collect();
        let mut pairs = Vec::new();
        for (i, a) in monos.iter().enumerate() {
            for (j, b) in monos.iter().enumerate() {
                if degree[i] + degree[j] > order {
                    continue;
                }
                let s: Vec<u8> = a.iter().zip(b).map(|(x, y)| x + y).collect();
                pairs.push((i as u32, j as u32, index[&s] as u32));
            }
        }
        Layout {
            nvars,
            order,
            monos,
            index,
            pairs,
            degree,
        }
    }

    pub fn get(nvars: usize, order: usize) -> Arc<Layout> {
        static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<Layout>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut g = cache.lock().unwrap_or_else(|e| e.into_inner());
        g.entry((nvars, order))
            .or_insert_with(|| Arc::new(Layout::build(nvars, order)))
            .clone()
    }

    pub fn len(&self) -> usize {
        self.monos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.monos.is_empty()
    }

    pub fn index_of(&self, alpha: &[u8]) -> Option<usize> {
        self.index.get(alpha).copied()
    }
}

/// A truncated multivariate series `sum c_alpha dx^alpha`.
#[derive(Clone, Debug)]
pub struct Mtps {
    pub layout: Arc<Layout>,
    pub c: Vec<f64>,
}

impl Mtps {
    pub fn constant(layout: &Arc<Layout>, v: f64) -> Mtps {
        let mut c = vec![0.0; layout.len()];
        c[0] = v;
        Mtps {
            layout: layout.clone(),
            c,
        }
    }

    /// The series of coordinate `i` at base value `v`.
    pub fn variable(layout: &Arc<Layout>, i: usize, v: f64) -> Mtps {
        let mut s = Mtps::constant(layout, v);
        if layout.order > 0 {
            let mut a = vec![0u8; layout.nvars];
            a[i] = 1;
            s.c[layout.index_of(&a).unwrap()] = 1.0;
        }
        s
    }

    /// Partial derivative `d^alpha f` at the base point.
    pub fn derivative(&self, alpha: &[u8]) -> f64 {
        match self.layout.index_of(alpha) {
            Some(i) => {
                self.c[i]
                    * alpha
                        .iter()
                        .map(|&a| crate::series::factorial(a as usize))
                        .product::<f64>()
            }
            None => 0.0,
        }
    }

    fn map_pow(&self, coeffs: &[f64]) -> Mtps {
        // f(a0 + u) = sum coeffs[j] u^j with u the non-constant part.
        let mut u = self.clone();
        u.c[0] = 0.0;
        let mut acc = Mtps::constant(&self.layout, 0.0);
        for cj in coeffs.iter().rev() {
            acc = acc.mul(&u);
            acc.c[0] += cj;
        }
        acc
    }

    fn unary(&self, f: fn(&Expr) -> Expr) -> Mtps {
        let x = Expr::var(0);
        let tape = Tape::compile(&[f(&x)], 1);
        let mut w = TaylorWork::new(&tape, self.layout.order);
        let mut one = vec![0.0; self.layout.order + 1];
        one[0] = self.c[0];
        if self.layout.order > 0 {
            one[1] = 1.0;
        }
        match w.eval_series(&[&one]) {
            Ok(()) => self.map_pow(w.output_series(0)),
            Err(_) => Mtps {
                layout: self.layout.clone(),
                c: vec![f64::NAN; self.c.len()],
            },
        }
    }
}

impl TapeScalar for Mtps {
    fn constant_like(c: f64, like: &Self) -> Self {
        Mtps::constant(&like.layout, c)
    }
    fn value0(&self) -> f64 {
        self.c[0]
    }
    fn add(&self, o: &Self) -> Self {
        Mtps {
            layout: self.layout.clone(),
            c: self.c.iter().zip(&o.c).map(|(a, b)| a + b).collect(),
        }
    }
    fn sub(&self, o: &Self) -> Self {
        Mtps {
            layout: self.layout.clone(),
            c: self.c.iter().zip(&o.c).map(|(a, b)| a - b).collect(),
        }
    }
    fn mul(&self, o: &Self) -> Self {
        let mut c = vec![0.0; self.c.len()];
        for &(i, j, k) in &self.layout.pairs {
            c[k as usize] += self.c[i as usize] * o.c[j as usize];
        }
        Mtps {
            layout: self.layout.clone(),
            c,
        }
    }
    fn div(&self, o: &Self) -> Self {
        self.mul(&o.recip())
    }
    fn neg(&self) -> Self {
        Mtps {
            layout: self.layout.clone(),
            c: self.c.iter().map(|a| -a).collect(),
        }
    }
    fn recip(&self) -> Self {
        let a0 = self.c[0];
        let coeffs: Vec<f64> = (0..=self.layout.order)
            .map(|j| (-1f64).powi(j as i32) / a0.powi(j as i32 + 1))
            .collect();
        self.map_pow(&coeffs)
    }
    fn exp(&self) -> Self {
        self.unary(|x| x.exp())
    }
    fn ln(&self) -> Self {
        self.unary(|x| x.ln())
    }
    fn sin(&self) -> Self {
        self.unary(|x| x.sin())
    }
    fn cos(&self) -> Self {
        self.unary(|x| x.cos())
    }
    fn sqrt(&self) -> Self {
        self.unary(|x| x.sqrt())
    }
    fn powf(&self, e: f64) -> Self {
        let a0 = self.c[0];
        let mut coeffs = Vec::with_capacity(self.layout.order + 1);
        let mut binom = 1.0;
        for j in 0..=self.layout.order {
            coeffs.push(binom * a0.powf(e - j as f64));
            binom *= (e - j as f64) / (j as f64 + 1.0);
        }
        self.map_pow(&coeffs)
    }
}

/// All partial derivatives of `tape`'s first output at `x` up to `order`.
pub fn derivatives(tape: &Tape, x: &[f64], order: usize) -> Result<Mtps, crate::expr::DomainError> {
    let layout = Layout::get(x.len(), order);
    let vars: Vec<Mtps> = x
        .iter()
        .enumerate()
        .map(|(i, v)| Mtps::variable(&layout, i, *v))
        .collect();
    let mut out = vec![Mtps::constant(&layout, 0.0); tape.num_outputs()];
    tape.eval_generic(&vars, &mut out)?;
    Ok(out.swap_remove(0))
}

impl Layout {
    pub fn degree(&self, i: usize) -> usize {
        self.degree[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_expr, VarTable};

    #[test]
    fn mixed_partials_match_symbolic() {
        let t = VarTable::new(vec!["x".into(), "y".into()]);
        let e = parse_expr("exp(x*y)*sin(x) + sqrt(2 + y^2)/(1 + x^2) + (3+x)^0.7", &t).unwrap();
        let tape = Tape::compile(&[e.clone()], 2);
        let p = [0.3, -0.8];
        let d = derivatives(&tape, &p, 4).unwrap();
        for alpha in [[0u8, 0], [1, 0], [0, 1], [2, 1], [1, 3], [4, 0], [2, 2]] {
            let mut s = e.clone();
            for _ in 0..alpha[0] {
                s = s.diff(0);
            }
            for _ in 0..alpha[1] {
                s = s.diff(1);
            }
            let exact = s.eval(&p).unwrap();
            let got = d.derivative(&alpha);
            assert!(
                (exact - got).abs() < 1e-10 * (1.0 + exact.abs()),
                "{alpha:?}: {exact} vs {got}"
            );
        }
    }

    #[test]
    fn layout_counts() {
        // C(n + k, k) monomials.
        assert_eq!(Layout::get(4, 3).len(), 35);
        assert_eq!(Layout::get(6, 2).len(), 28);
    }
}
