//! Phase space, expression Hamiltonians and the Hamiltonian vector field.
//!
//! Phase coordinates are ordered `z = (q1..qn, p1..pn)` throughout. The
//! symplectic form is `sum dp_i ^ dq_i`, so `X_H = (dH/dp, -dH/dq)`.

use crate::expr::{parse_expr, DomainError, Expr, ParseError, Tape, VarTable};
use crate::mtps::{self, Mtps};
use crate::tol::Tolerances;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl PhasePoint {
    pub fn new(q: Vec<f64>, p: Vec<f64>) -> Self {
        assert_eq!(q.len(), p.len());
        PhasePoint { q, p }
    }

    pub fn from_z(z: &[f64]) -> Self {
        let n = z.len() / 2;
        PhasePoint {
            q: z[..n].to_vec(),
            p: z[n..].to_vec(),
        }
    }

    pub fn z(&self) -> Vec<f64> {
        let mut z = self.q.clone();
        z.extend_from_slice(&self.p);
        z
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(&self.p).all(|v| v.is_finite())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HamError {
    #[error("domain error: {0}")]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("invalid Hamiltonian: {0}")]
    Invalid(String),
    #[error("derivative order {0} exceeds the configured maximum {1}")]
    OrderTooHigh(usize, usize),
}

/// Why a point could not be certified on the energy level.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Rejection {
    #[error("point is off the level set (|H| = {0:e} beyond capture radius)")]
    OffLevel(f64),
    #[error("vertical tangency: |dpi X_H| = {0:e}")]
    VerticalTangency(f64),
    #[error("projection onto the level set did not converge (|H| = {0:e})")]
    NoProjection(f64),
    #[error("domain error: {0}")]
    Domain(#[from] DomainError),
}

struct Inner {
    name: String,
    n: usize,
    periods: Vec<Option<f64>>,
    expr: Expr,
    value: Tape,
    grad: Tape,
    field: Tape,
}

/// An immutable Hamiltonian given by an expression in phase coordinates.
#[derive(Clone)]
pub struct HamiltonianExpr(Arc<Inner>);

impl std::fmt::Debug for HamiltonianExpr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "HamiltonianExpr({}: {})", self.0.name, self.source())
    }
}

impl HamiltonianExpr {
    pub fn new(expr: Expr, n: usize, name: impl Into<String>) -> Result<Self, HamError> {
        if n < 2 {
            return Err(HamError::Invalid(format!(
                "base dimension must be at least 2, got {n}"
            )));
        }
        if expr.var_bound() > 2 * n {
            return Err(HamError::Invalid(
                "expression uses variables beyond the phase space".into(),
            ));
        }
        let names = VarTable::phase(n).names().to_vec();
        let grads: Vec<Expr> = (0..2 * n).map(|i| expr.diff(i)).collect();
        let mut gl = vec![expr.clone()];
        gl.extend(grads.iter().cloned());
        let mut fl: Vec<Expr> = grads[n..].to_vec();
        fl.extend(grads[..n].iter().map(|g| g.neg()));
        let value = Tape::compile(&[expr.clone()], 2 * n).with_names(names.clone());
        let grad = Tape::compile(&gl, 2 * n).with_names(names.clone());
        let field = Tape::compile(&fl, 2 * n).with_names(names);
        Ok(HamiltonianExpr(Arc::new(Inner {
            name: name.into(),
            n,
            periods: vec![None; n],
            expr,
            value,
            grad,
            field,
        })))
    }

    pub fn parse(src: &str, n: usize, name: impl Into<String>) -> Result<Self, HamError> {
        let e = parse_expr(src, &VarTable::phase(n))?;
        HamiltonianExpr::new(e, n, name)
    }

    /// Marks base axes as periodic with the given periods.
    pub fn with_periods(self, periods: Vec<Option<f64>>) -> Self {
        assert_eq!(periods.len(), self.0.n);
        let inner = &self.0;
        HamiltonianExpr(Arc::new(Inner {
            name: inner.name.clone(),
            n: inner.n,
            periods,
            expr: inner.expr.clone(),
            value: inner.value.clone(),
            grad: inner.grad.clone(),
            field: inner.field.clone(),
        }))
    }

    pub fn n(&self) -> usize {
        self.0.n
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn expr(&self) -> &Expr {
        &self.0.expr
    }

    pub fn periods(&self) -> &[Option<f64>] {
        &self.0.periods
    }

    /// Expression in the config syntax.
    pub fn source(&self) -> String {
        self.0
            .expr
            .display(VarTable::phase(self.0.n).names())
            .to_string()
    }

    /// Tape with outputs `X_H = (dH/dp, -dH/dq)`.
    pub fn field_tape(&self) -> &Tape {
        &self.0.field
    }

    /// Tape with outputs `(H, dH/dq, dH/dp)`.
    pub fn grad_tape(&self) -> &Tape {
        &self.0.grad
    }

    pub fn value_tape(&self) -> &Tape {
        &self.0.value
    }

    pub fn value(&self, z: &[f64]) -> Result<f64, DomainError> {
        let mut o = [0.0];
        self.0.value.eval(z, &mut o)?;
        Ok(o[0])
    }

    /// Value and gradient at `z`.
    pub fn gradient(&self, z: &[f64]) -> Result<(f64, Vec<f64>), DomainError> {
        let mut v = self.0.grad.eval_vec(z)?;
        let h = v.remove(0);
        Ok((h, v))
    }

    pub fn field(&self, z: &[f64]) -> Result<Vec<f64>, DomainError> {
        self.0.field.eval_vec(z)
    }

    /// `g * H` for a positive factor `g` given over phase coordinates.
    pub fn scaled_by(&self, g: &Expr, name: impl Into<String>) -> Result<Self, HamError> {
        Ok(HamiltonianExpr::new(g.mul(&self.0.expr), self.0.n, name)?
            .with_periods(self.0.periods.clone()))
    }

    /// Wraps periodic base coordinates into `[0, period)`.
    pub fn wrap(&self, z: &mut [f64]) {
        for (i, per) in self.0.periods.iter().enumerate() {
            if let Some(l) = per {
                z[i] = z[i].rem_euclid(*l);
            }
        }
    }

    /// Shortest signed difference `a - b` of base coordinate `i`.
    pub fn q_diff(&self, i: usize, a: f64, b: f64) -> f64 {
        let d = a - b;
        match self.0.periods[i] {
            Some(l) => d - l * (d / l).round(),
            None => d,
        }
    }

    /// Fiber Hessian `d^2 H / dp_i dp_j`.
    pub fn fiber_hessian(&self, z: &[f64]) -> Result<nalgebra::DMatrix<f64>, DomainError> {
        let d = mtps::derivatives(&self.0.value, z, 2)?;
        let n = self.0.n;
        let mut h = nalgebra::DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut a = vec![0u8; 2 * n];
                a[n + i] += 1;
                a[n + j] += 1;
                h[(i, j)] = d.derivative(&a);
            }
        }
        Ok(h)
    }
}

/// Value and all partial derivatives up to some order at a point.
#[derive(Clone, Debug)]
pub struct HamDerivatives {
    series: Mtps,
}

impl HamDerivatives {
    pub fn value(&self) -> f64 {
        self.series.c[0]
    }

    pub fn order(&self) -> usize {
        self.series.layout.order
    }

    /// `d^alpha H` for a multi-index over `(q1..qn, p1..pn)`.
    pub fn derivative(&self, alpha: &[u8]) -> f64 {
        self.series.derivative(alpha)
    }

    /// Derivative along the listed variables, e.g. `[n, n]` is `d^2/dp1^2`.
    pub fn partial(&self, vars: &[usize]) -> f64 {
        let mut a = vec![0u8; self.series.layout.nvars];
        for &v in vars {
            a[v] += 1;
        }
        self.derivative(&a)
    }
}

/// Value and all mixed partials of `H` at `x` up to `order`.
pub fn eval_ham(
    h: &HamiltonianExpr,
    x: &PhasePoint,
    order: usize,
    tol: &Tolerances,
) -> Result<HamDerivatives, HamError> {
    if order > tol.k_max_derivs {
        return Err(HamError::OrderTooHigh(order, tol.k_max_derivs));
    }
    let series = mtps::derivatives(h.value_tape(), &x.z(), order)?;
    Ok(HamDerivatives { series })
}

/// `X_H(x)` split into base and fiber parts.
pub fn ham_vector_field(
    h: &HamiltonianExpr,
    x: &PhasePoint,
) -> Result<(Vec<f64>, Vec<f64>), DomainError> {
    let f = h.field(&x.z())?;
    let n = h.n();
    Ok((f[..n].to_vec(), f[n..].to_vec()))
}

/// A phase point certified to lie on `H = 0` with a submersive projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelPoint {
    pub point: PhasePoint,
    pub energy_residual: f64,
    pub xh: Vec<f64>,
    pub base_velocity: Vec<f64>,
}

impl LevelPoint {
    pub fn z(&self) -> Vec<f64> {
        self.point.z()
    }

    pub fn speed(&self) -> f64 {
        norm(&self.base_velocity)
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Newton projection of `z` onto `H = 0` along the gradient.
///
/// Returns the final `|H|`.
pub fn project_to_level(
    h: &HamiltonianExpr,
    z: &mut [f64],
    target: f64,
    max_iter: usize,
) -> Result<f64, DomainError> {
    let mut last = f64::INFINITY;
    for _ in 0..max_iter {
        let (v, g) = h.gradient(z)?;
        if v.abs() <= target {
            return Ok(v.abs());
        }
        if v.abs() >= last {
            return Ok(v.abs());
        }
        last = v.abs();
        let gg = dot(&g, &g);
        if gg == 0.0 {
            return Ok(v.abs());
        }
        for (zi, gi) in z.iter_mut().zip(&g) {
            *zi -= v * gi / gg;
        }
    }
    Ok(h.value(z)?.abs())
}

/// Builds a [`LevelPoint`] at `z`, assumed to be on the level already.
pub fn level_point_at(
    h: &HamiltonianExpr,
    z: &[f64],
    tol: &Tolerances,
) -> Result<LevelPoint, Rejection> {
    let n = h.n();
    let e = h.value(z)?.abs();
    let xh = h.field(z)?;
    let base_velocity = xh[..n].to_vec();
    let s = norm(&base_velocity);
    if s <= tol.submersion_tol {
        return Err(Rejection::VerticalTangency(s));
    }
    Ok(LevelPoint {
        point: PhasePoint::from_z(z),
        energy_residual: e,
        xh,
        base_velocity,
    })
}

/// Projects `x` onto `Σ = H^{-1}(0)` and certifies submersivity there.
pub fn certify_level_point(
    h: &HamiltonianExpr,
    x: &PhasePoint,
    tol: &Tolerances,
) -> Result<LevelPoint, Rejection> {
    let mut z = x.z();
    let h0 = h.value(&z)?;
    if !(h0.abs() <= tol.capture_radius) {
        return Err(Rejection::OffLevel(h0.abs()));
    }
    let r = project_to_level(h, &mut z, tol.level_tol * 1e-3, 12)?;
    if r > tol.level_tol {
        return Err(Rejection::NoProjection(r));
    }
    h.wrap(&mut z);
    level_point_at(h, &z, tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat() -> HamiltonianExpr {
        HamiltonianExpr::parse("(p1^2 + p2^2)/2 - 1/2", 2, "flat").unwrap()
    }

    #[test]
    fn flat_metric_derivatives() {
        let h = flat();
        let x = PhasePoint::new(vec![0.0, 0.0], vec![1.0, 0.0]);
        let d = eval_ham(&h, &x, 2, &Tolerances::default()).unwrap();
        assert_eq!(d.value(), 0.0);
        assert_eq!(d.partial(&[2]), 1.0);
        assert_eq!(d.partial(&[2, 2]), 1.0);
        assert_eq!(d.partial(&[0]), 0.0);
        assert_eq!(d.partial(&[0, 1]), 0.0);
    }

    #[test]
    fn sine_coupling_derivatives() {
        let h = HamiltonianExpr::parse("sin(q1)*p1", 2, "s").unwrap();
        let x = PhasePoint::new(vec![0.0, 0.0], vec![2.0, 0.0]);
        let d = eval_ham(&h, &x, 1, &Tolerances::default()).unwrap();
        assert_eq!(d.value(), 0.0);
        assert_eq!(d.partial(&[0]), 2.0);
        assert_eq!(d.partial(&[2]), 0.0);
    }

    #[test]
    fn order_limit_enforced() {
        let x = PhasePoint::new(vec![0.0, 0.0], vec![1.0, 0.0]);
        assert!(matches!(
            eval_ham(&flat(), &x, 9, &Tolerances::default()),
            Err(HamError::OrderTooHigh(9, 8))
        ));
    }

    #[test]
    fn radial_norm_field() {
        let h = HamiltonianExpr::parse("sqrt(p1^2 + p2^2) - 1", 2, "norm").unwrap();
        let (qd, pd) =
            ham_vector_field(&h, &PhasePoint::new(vec![0.3, 0.1], vec![0.0, 1.0])).unwrap();
        assert_eq!(qd, vec![0.0, 1.0]);
        assert_eq!(pd, vec![0.0, 0.0]);
    }

    #[test]
    fn certification_projects_and_rejects() {
        let tol = Tolerances::default();
        let lp = certify_level_point(
            &flat(),
            &PhasePoint::new(vec![0.0, 0.0], vec![1.001, 0.0]),
            &tol,
        )
        .unwrap();
        assert!((lp.point.p[0] - 1.0).abs() < 1e-10 && lp.energy_residual <= 1e-10);
        let far = PhasePoint::new(vec![0.0, 0.0], vec![2.0, 0.0]);
        assert!(matches!(
            certify_level_point(&flat(), &far, &tol),
            Err(Rejection::OffLevel(_))
        ));
        let hq = HamiltonianExpr::parse("q1", 2, "q").unwrap();
        let x = PhasePoint::new(vec![0.0, 0.0], vec![0.0, 1.0]);
        assert!(matches!(
            certify_level_point(&hq, &x, &tol),
            Err(Rejection::VerticalTangency(_))
        ));
    }

    #[test]
    fn domain_error_names_subexpression() {
        let h = HamiltonianExpr::parse("p1^2 + ln(q1) - 1", 2, "log").unwrap();
        let err = h.value(&[-1.0, 0.0, 1.0, 0.0]).unwrap_err();
        assert!(err.subexpr.contains("ln(q1)"), "{}", err.subexpr);
    }

    #[test]
    fn periodic_wrap_touches_only_q() {
        let h = flat().with_periods(vec![Some(1.0), None]);
        let mut z = vec![2.25, 3.0, 5.5, -7.0];
        h.wrap(&mut z);
        assert_eq!(z, vec![0.25, 3.0, 5.5, -7.0]);
        assert!((h.q_diff(0, 0.95, 0.05) + 0.1).abs() < 1e-12);
    }
}
