//! Jets of base-projected orbits in divided (graph) coordinates and
//! tangency-order classification.

use crate::expr::{DomainError, Expr, TaylorWork};
use crate::flow::{integrate, Orbit, SegmentIndex, Window};
use crate::tol::Tolerances;
use crate::hamsys::{norm, HamiltonianExpr, LevelPoint};
use crate::series;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SubjetError {
    #[error("domain error: {0}")]
    Domain(#[from] DomainError),
    #[error("axis margin violated on axis {axis}: ratio {ratio:.3}")]
    AxisMargin { axis: usize, ratio: f64 },
    #[error("curve has zero velocity at the marked point")]
    ZeroVelocity,
    #[error("jets cannot be aligned on a common axis")]
    ChartMismatch,
}

/// Taylor coefficients of `t -> z(t)` along the flow of `H`.
#[derive(Clone, Debug)]
pub struct OrbitSeries {
    /// `coeffs[i][j]`: coefficient `j` of phase coordinate `i`.
    pub coeffs: Vec<Vec<f64>>,
}

impl OrbitSeries {
    pub fn q(&self, n: usize) -> &[Vec<f64>] {
        &self.coeffs[..n]
    }
}

/// Taylor coefficients of the orbit through `x0` up to `order`.
pub fn orbit_taylor(
    h: &HamiltonianExpr,
    x0: &LevelPoint,
    order: usize,
) -> Result<OrbitSeries, DomainError> {
    let mut w = TaylorWork::new(h.field_tape(), order);
    Ok(OrbitSeries {
        coeffs: series_into(&mut w, &x0.z(), order)?,
    })
}

fn series_into(
    w: &mut TaylorWork<'_>,
    z: &[f64],
    order: usize,
) -> Result<Vec<Vec<f64>>, DomainError> {
    let m = z.len();
    let mut c = vec![vec![0.0; order + 1]; m];
    for i in 0..m {
        w.set_input(i, 0, z[i]);
        c[i][0] = z[i];
    }
    for j in 0..order {
        w.compute(j)?;
        for i in 0..m {
            let v = w.output(i, j) / (j + 1) as f64;
            w.set_input(i, j + 1, v);
            c[i][j + 1] = v;
        }
    }
    Ok(c)
}

/// The k-jet of a curve as a graph over one coordinate axis.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveJet {
    pub axis: usize,
    pub base: f64,
    /// `y[r]` is the `r`-th derivative of the graph map at `base`, `r = 0..=k`.
    pub y: Vec<Vec<f64>>,
    pub k: usize,
    pub orientation: i8,
}

/// JSON form: `axis` is 1-based, `coeffs` lists `y^(0)..y^(k)`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct JetRecord {
    pub axis: usize,
    pub base: f64,
    pub k: usize,
    pub orientation: i8,
    pub coeffs: Vec<Vec<f64>>,
}

/// Index of the largest-magnitude component, lowest index on ties.
pub fn dominant_axis(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    best
}

impl CurveJet {
    /// Ambient dimension of the curve.
    pub fn dim(&self) -> usize {
        self.y[0].len() + 1
    }

    pub fn base_value(&self) -> &[f64] {
        &self.y[0]
    }

    /// Number of jet coordinates, `1 + (m-1)(k+1)`.
    pub fn coordinate_count(&self) -> usize {
        1 + (self.dim() - 1) * (self.k + 1)
    }

    /// Marked point in ambient coordinates.
    pub fn point(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.dim());
        let mut it = self.y[0].iter();
        for i in 0..self.dim() {
            if i == self.axis {
                p.push(self.base);
            } else {
                p.push(*it.next().unwrap());
            }
        }
        p
    }

    /// Graph jet of a parametrized curve given by coordinate series `c[i]`.
    pub fn from_curve_series(
        c: &[Vec<f64>],
        axis: Option<usize>,
        k: usize,
        margin: f64,
    ) -> Result<CurveJet, SubjetError> {
        let m = c.len();
        let vel: Vec<f64> = c.iter().map(|s| s.get(1).copied().unwrap_or(0.0)).collect();
        let speed = norm(&vel);
        if speed == 0.0 || !speed.is_finite() {
            return Err(SubjetError::ZeroVelocity);
        }
        let axis = axis.unwrap_or_else(|| dominant_axis(&vel));
        let ratio = vel[axis].abs() / speed;
        if ratio < margin {
            return Err(SubjetError::AxisMargin { axis, ratio });
        }
        let mut xs: Vec<f64> = c[axis].iter().take(k + 1).copied().collect();
        xs.resize(k + 1, 0.0);
        xs[0] = 0.0;
        let t = series::revert(&xs, k + 1).ok_or(SubjetError::ZeroVelocity)?;
        let mut y = vec![vec![0.0; m - 1]; k + 1];
        let mut col = 0;
        for (i, ci) in c.iter().enumerate() {
            if i == axis {
                continue;
            }
            let mut f: Vec<f64> = ci.iter().take(k + 1).copied().collect();
            f.resize(k + 1, 0.0);
            let comp = series::compose(&f, &t, k + 1);
            for (r, v) in series::coeffs_to_derivs(&comp).into_iter().enumerate() {
                y[r][col] = v;
            }
            col += 1;
        }
        let orientation = if vel[axis] >= 0.0 { 1 } else { -1 };
        Ok(CurveJet {
            axis,
            base: c[axis][0],
            y,
            k,
            orientation,
        })
    }

    /// Parametrized series of the graph curve `s -> (base + s, y(base + s))`.
    pub fn curve_series(&self) -> Vec<Vec<f64>> {
        let m = self.dim();
        let mut out = Vec::with_capacity(m);
        let mut col = 0;
        for i in 0..m {
            let mut s = vec![0.0; self.k + 1];
            if i == self.axis {
                s[0] = self.base;
                if self.k >= 1 {
                    s[1] = 1.0;
                }
            } else {
                for r in 0..=self.k {
                    s[r] = self.y[r][col] / series::factorial(r);
                }
                col += 1;
            }
            out.push(s);
        }
        out
    }

    /// Re-expresses the jet as a graph over `new_axis`.
    pub fn reaxis(&self, new_axis: usize, margin: f64) -> Result<CurveJet, SubjetError> {
        if new_axis == self.axis {
            return Ok(self.clone());
        }
        let mut j =
            CurveJet::from_curve_series(&self.curve_series(), Some(new_axis), self.k, margin)?;
        j.orientation *= self.orientation;
        Ok(j)
    }

    /// Value of the graph map at abscissa `x` from the Taylor polynomial.
    pub fn graph_poly(&self, x: f64) -> Vec<f64> {
        let s = x - self.base;
        (0..self.dim() - 1)
            .map(|c| {
                (0..=self.k)
                    .rev()
                    .fold(0.0, |acc, r| acc * s + self.y[r][c] / series::factorial(r))
            })
            .collect()
    }

    pub fn record(&self) -> JetRecord {
        JetRecord {
            axis: self.axis + 1,
            base: self.base,
            k: self.k,
            orientation: self.orientation,
            coeffs: self.y.clone(),
        }
    }

    pub fn from_record(r: &JetRecord) -> CurveJet {
        CurveJet {
            axis: r.axis - 1,
            base: r.base,
            y: r.coeffs.clone(),
            k: r.k,
            orientation: r.orientation,
        }
    }
}

/// Reusable workspace for repeated jet evaluation of one Hamiltonian.
pub struct JetEngine<'h> {
    h: &'h HamiltonianExpr,
    work: TaylorWork<'h>,
    k: usize,
    margin: f64,
}

impl<'h> JetEngine<'h> {
    pub fn new(h: &'h HamiltonianExpr, k: usize, margin: f64) -> Self {
        JetEngine {
            h,
            work: TaylorWork::new(h.field_tape(), k.max(1)),
            k,
            margin,
        }
    }

    /// Orbit coefficients at `z` to the engine order.
    pub fn series(&mut self, z: &[f64]) -> Result<Vec<Vec<f64>>, DomainError> {
        series_into(&mut self.work, z, self.k.max(1))
    }

    /// Projected jet at phase point `z`; `axis = None` picks the dominant one.
    pub fn jet(&mut self, z: &[f64], axis: Option<usize>) -> Result<CurveJet, SubjetError> {
        let n = self.h.n();
        let c = self.series(z)?;
        CurveJet::from_curve_series(&c[..n], axis, self.k, self.margin)
    }
}

/// The k-jet of the base projection of the orbit through `x0`.
pub fn project_jet(
    h: &HamiltonianExpr,
    x0: &LevelPoint,
    k: usize,
    margin: f64,
) -> Result<CurveJet, SubjetError> {
    JetEngine::new(h, k, margin).jet(&x0.z(), None)
}

/// Same as [`project_jet`] on a prescribed axis.
pub fn project_jet_on_axis(
    h: &HamiltonianExpr,
    x0: &LevelPoint,
    k: usize,
    axis: usize,
    margin: f64,
) -> Result<CurveJet, SubjetError> {
    JetEngine::new(h, k, margin).jet(&x0.z(), Some(axis))
}

/// Outcome of comparing two jets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tangency {
    /// The marked base points differ.
    Disjoint,
    /// First disagreeing order `r` (0 = distinct values at the same abscissa).
    Order(usize),
    /// Agreement up to `k_max`.
    Full,
}

impl Tangency {
    /// Integer code: -1, r, or `None` for full agreement.
    pub fn code(&self) -> Option<i64> {
        match self {
            Tangency::Disjoint => Some(-1),
            Tangency::Order(r) => Some(*r as i64),
            Tangency::Full => None,
        }
    }
}

/// Aligns `j2` onto the axis of `j1`.
pub fn align(
    j1: &CurveJet,
    j2: &CurveJet,
    margin: f64,
) -> Result<(CurveJet, CurveJet), SubjetError> {
    if j1.axis == j2.axis {
        return Ok((j1.clone(), j2.clone()));
    }
    if let Ok(b) = j2.reaxis(j1.axis, margin) {
        return Ok((j1.clone(), b));
    }
    if let Ok(a) = j1.reaxis(j2.axis, margin) {
        return Ok((a, j2.clone()));
    }
    Err(SubjetError::ChartMismatch)
}

fn scale(a: &[f64], b: &[f64]) -> f64 {
    a.iter().chain(b).fold(1.0f64, |m, v| m.max(v.abs()))
}

/// Tangency order between two jets after chart alignment.
pub fn tangency_order(
    j1: &CurveJet,
    j2: &CurveJet,
    k_max: usize,
    jet_tol: f64,
    margin: f64,
) -> Result<Tangency, SubjetError> {
    let (a, b) = align(j1, j2, margin)?;
    if (a.base - b.base).abs() > jet_tol * a.base.abs().max(b.base.abs()).max(1.0) {
        return Ok(Tangency::Disjoint);
    }
    let kk = k_max.min(a.k).min(b.k);
    for r in 0..=kk {
        let s = scale(&a.y[r], &b.y[r]);
        if a.y[r]
            .iter()
            .zip(&b.y[r])
            .any(|(u, v)| (u - v).abs() > jet_tol * s)
        {
            return Ok(Tangency::Order(r));
        }
    }
    Ok(Tangency::Full)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsolationRadius {
    pub epsilon: f64,
    pub small_warning: bool,
}

/// Radius around the common base point within which two graphs of
/// tangency order `r` cannot meet again.
///
/// `remainder_bound` bounds `|y1^(r+1) - y2^(r+1)|` over `window`.
pub fn isolation_radius(
    j1: &CurveJet,
    j2: &CurveJet,
    r: usize,
    remainder_bound: f64,
    window: f64,
) -> Result<IsolationRadius, SubjetError> {
    if j1.axis != j2.axis || r > j1.k.min(j2.k) {
        return Err(SubjetError::ChartMismatch);
    }
    let gap = norm(
        &j1.y[r]
            .iter()
            .zip(&j2.y[r])
            .map(|(a, b)| a - b)
            .collect::<Vec<_>>(),
    );
    let mut eps = if remainder_bound > 0.0 {
        (r as f64 + 1.0) * gap / remainder_bound
    } else {
        f64::INFINITY
    };
    eps = eps.min(window);
    Ok(IsolationRadius {
        epsilon: eps,
        small_warning: eps < 1e-6,
    })
}

/// A monotone piece of a projected orbit viewed as a graph over one axis.
pub struct OrbitGraph<'o> {
    orbit: &'o Orbit,
    axis: usize,
    t_lo: f64,
    t_hi: f64,
}

impl<'o> OrbitGraph<'o> {
    /// Restricts to the maximal window around `t_center` where `q_axis` is strictly monotone,
    /// detected on a grid of `grid` points per unit time.
    pub fn new(orbit: &'o Orbit, axis: usize, t_center: f64, grid: usize) -> OrbitGraph<'o> {
        let (w0, w1) = (
            orbit.window.0.min(orbit.window.1),
            orbit.window.0.max(orbit.window.1),
        );
        let dt = 1.0 / grid as f64;
        let x = |t: f64| orbit.base_at(t).unwrap()[axis];
        let sign0 = (x((t_center + dt * 0.5).min(w1)) - x((t_center - dt * 0.5).max(w0))).signum();
        let mut hi = t_center;
        while hi + dt <= w1 && (x(hi + dt) - x(hi)).signum() == sign0 {
            hi += dt;
        }
        let mut lo = t_center;
        while lo - dt >= w0 && (x(lo) - x(lo - dt)).signum() == sign0 {
            lo -= dt;
        }
        OrbitGraph {
            orbit,
            axis,
            t_lo: lo,
            t_hi: hi,
        }
    }

    pub fn x_range(&self) -> (f64, f64) {
        let a = self.orbit.base_at(self.t_lo).unwrap()[self.axis];
        let b = self.orbit.base_at(self.t_hi).unwrap()[self.axis];
        (a.min(b), a.max(b))
    }

    /// Non-axis base coordinates at abscissa `x`, by bisection on time.
    pub fn graph_at(&self, x: f64) -> Option<Vec<f64>> {
        let f = |t: f64| self.orbit.base_at(t).unwrap()[self.axis] - x;
        let (mut a, mut b) = (self.t_lo, self.t_hi);
        let (fa, fb) = (f(a), f(b));
        if fa * fb > 0.0 {
            return None;
        }
        let inc = fb > fa;
        for _ in 0..80 {
            let m = 0.5 * (a + b);
            if (f(m) < 0.0) == inc {
                a = m;
            } else {
                b = m;
            }
        }
        let q = self.orbit.base_at(0.5 * (a + b))?;
        Some(
            q.iter()
                .enumerate()
                .filter(|(i, _)| *i != self.axis)
                .map(|(_, v)| *v)
                .collect(),
        )
    }
}

/// Sampled `(x, |y^(order)|)` along a graph piece, over 2000 evenly spaced times.
fn derivative_profile(h: &HamiltonianExpr, g: &OrbitGraph, order: usize) -> Vec<(f64, f64)> {
    let mut engine = JetEngine::new(h, order, 0.0);
    let samples = 2000;
    (0..=samples)
        .filter_map(|i| {
            let t = g.t_lo + (g.t_hi - g.t_lo) * i as f64 / samples as f64;
            let z = g.orbit.eval(t)?;
            let j = engine.jet(&z, Some(g.axis)).ok()?;
            Some((z[g.axis], norm(&j.y[order])))
        })
        .collect()
}

fn profile_bound(profile: &[(f64, f64)], center: f64, half_width: f64) -> f64 {
    2.0 * profile
        .iter()
        .filter(|(x, _)| (x - center).abs() <= half_width)
        .fold(0.0f64, |m, (_, v)| m.max(*v))
}

/// Sampled bound on `|y^(order)|` of a graph piece for abscissas within `half_width` of
/// `center` (inflated by a safety factor of 2).
pub fn graph_derivative_bound(
    h: &HamiltonianExpr,
    graph: &OrbitGraph,
    center: f64,
    half_width: f64,
    order: usize,
) -> f64 {
    profile_bound(&derivative_profile(h, graph, order), center, half_width)
}

/// A point where two projected orbits meet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    pub t1: f64,
    pub t2: f64,
    pub q: Vec<f64>,
    /// Base distance left after refinement.
    pub distance: f64,
    /// Graph axis of both jets, 1-based as in jet records; `None` when no coordinate axis
    /// carries both tangents and the jets were taken in a rotated frame.
    pub axis: Option<usize>,
    /// Tangency code of the aligned jets: `r`, or `None` when they agree to `k_max`.
    pub order: Option<i64>,
    pub isolation: Option<IsolationRadius>,
    pub check: Option<IsolationCheck>,
}

/// Outcome of densely sampling both graphs inside the isolation radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsolationCheck {
    pub samples: usize,
    /// Half-width actually sampled (the radius clipped to both graph windows).
    pub half_width: f64,
    /// Smallest projection of the graph difference on its leading Taylor term, relative to that term.
    pub min_ratio: f64,
    pub isolated: bool,
}

fn base_gap(ha: &HamiltonianExpr, za: &[f64], zb: &[f64]) -> Vec<f64> {
    (0..ha.n()).map(|i| ha.q_diff(i, za[i], zb[i])).collect()
}

/// Minimizes `|q_a(t1) - q_b(t2)|` by damped Gauss-Newton from `(t1, t2)`.
fn refine_pair(
    ha: &HamiltonianExpr,
    a: &Orbit,
    hb: &HamiltonianExpr,
    b: &Orbit,
    mut t1: f64,
    mut t2: f64,
) -> Option<(f64, f64, f64)> {
    let n = ha.n();
    let clamp = |o: &Orbit, t: f64| t.clamp(o.window.0.min(o.window.1), o.window.0.max(o.window.1));
    let mut lambda = 1e-12;
    let eval = |t1: f64, t2: f64| -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let (za, zb) = (a.eval(t1)?, b.eval(t2)?);
        let r = base_gap(ha, &za, &zb);
        let va = ha.field(&za).ok()?[..n].to_vec();
        let vb = hb.field(&zb).ok()?[..n].to_vec();
        Some((r, va, vb))
    };
    let (mut r, mut va, mut vb) = eval(t1, t2)?;
    let mut f = norm(&r);
    for _ in 0..100 {
        if f < 1e-14 {
            break;
        }
        // Normal equations for J = [va, -vb].
        let (aa, ab, bb) = (dot(&va, &va), -dot(&va, &vb), dot(&vb, &vb));
        let (ga, gb) = (dot(&va, &r), -dot(&vb, &r));
        let mut improved = false;
        for _ in 0..30 {
            let (m11, m22) = (aa * (1.0 + lambda), bb * (1.0 + lambda));
            let det = m11 * m22 - ab * ab;
            if det.abs() < 1e-300 {
                lambda *= 10.0;
                continue;
            }
            let d1 = -(m22 * ga - ab * gb) / det;
            let d2 = -(m11 * gb - ab * ga) / det;
            let (n1, n2) = (clamp(a, t1 + d1), clamp(b, t2 + d2));
            if let Some((rn, van, vbn)) = eval(n1, n2) {
                let fnew = norm(&rn);
                if fnew < f {
                    (t1, t2, r, va, vb, f) = (n1, n2, rn, van, vbn, fnew);
                    lambda = (lambda * 0.1).max(1e-15);
                    improved = true;
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Some((t1, t2, f))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Intersections of the base projections of `a` (an orbit of `ha`) and `b` (of `hb`).
///
/// Candidates come from segment proximity at arclength step `ds`; each is refined in
/// `(t1, t2)` and accepted below `accept` base distance. Jets of order `tol.k_max` classify
/// the contact and, for finite order, give an isolation radius that is then checked with
/// `samples` graph evaluations.
pub fn find_intersections(
    ha: &HamiltonianExpr,
    a: &Orbit,
    hb: &HamiltonianExpr,
    b: &Orbit,
    ds: f64,
    accept: f64,
    samples: usize,
    tol: &Tolerances,
) -> Vec<Intersection> {
    let n = ha.n();
    let index = SegmentIndex::new(std::slice::from_ref(b), ds, &vec![0.0; n], f64::INFINITY, 2.0 * ds);
    let speed_a = a.samples.iter().map(|s| s.1.speed()).fold(f64::INFINITY, f64::min).max(1e-12);
    let speed_b = b.samples.iter().map(|s| s.1.speed()).fold(f64::INFINITY, f64::min).max(1e-12);
    let (dt1, dt2) = (4.0 * ds / speed_a, 4.0 * ds / speed_b);
    let mut found: Vec<Intersection> = Vec::new();
    let mut tried: Vec<(f64, f64)> = Vec::new();
    for t in a.times_by_arclength(ds) {
        let x = a.base_at(t).unwrap();
        for (_, _, tb) in index.near(&x, 2.0 * ds) {
            if tried.iter().any(|(u, v)| (u - t).abs() < dt1 && (v - tb).abs() < dt2) {
                continue;
            }
            tried.push((t, tb));
            let Some((t1, t2, d)) = refine_pair(ha, a, hb, b, t, tb) else { continue };
            if d > accept || found.iter().any(|f| (f.t1 - t1).abs() < dt1 && (f.t2 - t2).abs() < dt2) {
                continue;
            }
            found.push(classify_intersection(ha, a, hb, b, t1, t2, d, samples, tol));
        }
    }
    found.sort_by(|x, y| x.t1.total_cmp(&y.t1));
    found
}

/// Axis carrying both unit tangents best, with the smaller of their components along it.
fn common_axis(u: &[f64], v: &[f64]) -> (usize, f64) {
    (0..u.len())
        .map(|i| (i, u[i].abs().min(v[i].abs())))
        .fold((0, -1.0), |best, c| if c.1 > best.1 { c } else { best })
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    v.iter().map(|x| x / n).collect()
}

/// `H(R q, R p)` for an orthogonal `R` given by its columns.
fn rotate_hamiltonian(h: &HamiltonianExpr, cols: &[Vec<f64>]) -> Option<HamiltonianExpr> {
    let n = h.n();
    let mut vals = Vec::with_capacity(2 * n);
    for off in [0, n] {
        for j in 0..n {
            let terms: Vec<Expr> = (0..n).map(|k| Expr::var(off + k).scale(cols[k][j])).collect();
            vals.push(Expr::sum(&terms));
        }
    }
    HamiltonianExpr::new(h.expr().substitute(&vals), n, format!("{} (rotated)", h.name())).ok()
}

fn rotate_orbit(h: &HamiltonianExpr, o: &Orbit, cols: &[Vec<f64>], tol: &Tolerances) -> Option<Orbit> {
    let n = h.n();
    let z = o.eval(o.window.0)?;
    let mut w = vec![0.0; 2 * n];
    for (k, c) in cols.iter().enumerate() {
        w[k] = dot(c, &z[..n]);
        w[n + k] = dot(c, &z[n..]);
    }
    let x0 = crate::hamsys::level_point_at(h, &w, tol).ok()?;
    integrate(h, &x0, Window::time(o.window.0, o.window.1), tol).ok()
}

/// Contact order, isolation radius and its dense-sampling check at a refined intersection.
///
/// Both jets are taken over the coordinate axis that carries both tangents best. When no
/// axis carries both, the base is rotated so that the first axis bisects the tangents and
/// the classification runs in that frame, reported with `axis: None`.
#[allow(clippy::too_many_arguments)]
pub fn classify_intersection(
    ha: &HamiltonianExpr,
    a: &Orbit,
    hb: &HamiltonianExpr,
    b: &Orbit,
    t1: f64,
    t2: f64,
    distance: f64,
    samples: usize,
    tol: &Tolerances,
) -> Intersection {
    let n = ha.n();
    let q = a.base_at(t1).unwrap();
    let mut out = Intersection { t1, t2, q, distance, axis: None, order: None, isolation: None, check: None };
    let (Some(za), Some(zb)) = (a.eval(t1), b.eval(t2)) else { return out };
    let (Ok(fa), Ok(fb)) = (ha.field(&za), hb.field(&zb)) else { return out };
    let (u, v) = (unit(&fa[..n]), unit(&fb[..n]));
    let (axis, carry) = common_axis(&u, &v);
    if carry >= tol.axis_margin {
        out.axis = Some(axis + 1);
        classify_on_axis(ha, a, hb, b, t1, t2, axis, samples, tol, &mut out);
        return out;
    }
    let periodic = ha.periods().iter().chain(hb.periods()).any(|p| p.is_some());
    if periodic {
        return out;
    }
    let s = if dot(&u, &v) < 0.0 { -1.0 } else { 1.0 };
    let e = unit(&u.iter().zip(&v).map(|(x, y)| x + s * y).collect::<Vec<_>>());
    let comp = crate::flow::complement_basis(&e);
    let mut cols = vec![e];
    cols.extend((0..n - 1).map(|j| (0..n).map(|i| comp[(i, j)]).collect()));
    let rotated = (|| {
        let ra = rotate_hamiltonian(ha, &cols)?;
        let rb = rotate_hamiltonian(hb, &cols)?;
        let oa = rotate_orbit(&ra, a, &cols, tol)?;
        let ob = rotate_orbit(&rb, b, &cols, tol)?;
        Some((ra, rb, oa, ob))
    })();
    if let Some((ra, rb, oa, ob)) = rotated {
        classify_on_axis(&ra, &oa, &rb, &ob, t1, t2, 0, samples, tol, &mut out);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn classify_on_axis(
    ha: &HamiltonianExpr,
    a: &Orbit,
    hb: &HamiltonianExpr,
    b: &Orbit,
    t1: f64,
    t2: f64,
    axis: usize,
    samples: usize,
    tol: &Tolerances,
    out: &mut Intersection,
) {
    let k = tol.k_max;
    let (Some(za), Some(zb)) = (a.eval(t1), b.eval(t2)) else { return };
    let j1 = JetEngine::new(ha, k, tol.axis_margin).jet(&za, Some(axis));
    let j2 = JetEngine::new(hb, k, tol.axis_margin).jet(&zb, Some(axis));
    let (Ok(j1), Ok(mut j2)) = (j1, j2) else { return };
    // Refinement leaves a residual far above jet_tol's effect on y^(0); compare from order 1.
    j2.base = j1.base;
    j2.y[0] = j1.y[0].clone();
    let Ok(t) = tangency_order(&j1, &j2, k, tol.jet_tol, tol.axis_margin) else { return };
    out.order = t.code();
    let Tangency::Order(r) = t else { return };
    if r == 0 || r >= k {
        return;
    }
    let ga = OrbitGraph::new(a, axis, t1, 1000);
    let gb = OrbitGraph::new(b, axis, t2, 1000);
    let pa = derivative_profile(ha, &ga, r + 1);
    let pb = derivative_profile(hb, &gb, r + 1);
    // Each window w gives a valid radius min(w, (r+1)|gap|/M(w)); keep the largest.
    let mut best: Option<IsolationRadius> = None;
    let mut w = 0.5;
    for _ in 0..30 {
        let m = profile_bound(&pa, j1.base, w) + profile_bound(&pb, j1.base, w);
        if let Ok(iso) = isolation_radius(&j1, &j2, r, m, w) {
            if best.map_or(true, |b| iso.epsilon > b.epsilon) {
                best = Some(iso);
            }
        }
        w *= 0.5;
    }
    let Some(iso) = best else { return };
    out.isolation = Some(iso);
    out.check = Some(check_isolation(a, b, &j1, &j2, r, t1, t2, iso.epsilon, samples));
}

/// Samples `samples` abscissas in the punctured radius and requires the graph difference to
/// keep the sign of its leading term `(y1^(r) - y2^(r)) x^r / r!`.
#[allow(clippy::too_many_arguments)]
pub fn check_isolation(
    a: &Orbit,
    b: &Orbit,
    j1: &CurveJet,
    j2: &CurveJet,
    r: usize,
    t1: f64,
    t2: f64,
    epsilon: f64,
    samples: usize,
) -> IsolationCheck {
    let ga = OrbitGraph::new(a, j1.axis, t1, 1000);
    let gb = OrbitGraph::new(b, j1.axis, t2, 1000);
    let (la, ha) = ga.x_range();
    let (lb, hb) = gb.x_range();
    let x0 = j1.base;
    let w = epsilon.min(x0 - la).min(ha - x0).min(x0 - lb).min(hb - x0).max(0.0);
    let g: Vec<f64> = j1.y[r].iter().zip(&j2.y[r]).map(|(u, v)| u - v).collect();
    let g2 = dot(&g, &g);
    let fact = series::factorial(r);
    let half = samples / 2;
    let mut min_ratio = f64::INFINITY;
    let mut count = 0;
    for i in 0..half {
        for sgn in [-1.0, 1.0] {
            let dx = sgn * w * (i as f64 + 0.5) / half as f64;
            let (Some(ya), Some(yb)) = (ga.graph_at(x0 + dx), gb.graph_at(x0 + dx)) else { continue };
            let d: Vec<f64> = ya.iter().zip(&yb).map(|(u, v)| u - v).collect();
            let lead = dx.powi(r as i32) / fact;
            min_ratio = min_ratio.min(dot(&d, &g) / (g2 * lead));
            count += 1;
        }
    }
    IsolationCheck {
        samples: count,
        half_width: w,
        min_ratio,
        isolated: count > 0 && min_ratio > 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamsys::{certify_level_point, PhasePoint};
    use crate::library;
    use proptest::prelude::*;

    fn lp(h: &HamiltonianExpr, q: &[f64], p: &[f64]) -> LevelPoint {
        certify_level_point(
            h,
            &PhasePoint::new(q.to_vec(), p.to_vec()),
            &Tolerances::default(),
        )
        .unwrap()
    }

    fn graph(y: Vec<Vec<f64>>) -> CurveJet {
        let k = y.len() - 1;
        CurveJet {
            axis: 0,
            base: 0.0,
            y,
            k,
            orientation: 1,
        }
    }

    #[test]
    fn flat_series_and_jets() {
        let h = library::flat(2);
        let s = orbit_taylor(&h, &lp(&h, &[0.0, 0.0], &[1.0, 0.0]), 3).unwrap();
        assert_eq!(s.coeffs[0], vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(s.coeffs[2], vec![1.0, 0.0, 0.0, 0.0]);
        let th = 0.3f64;
        let j = project_jet(&h, &lp(&h, &[0.0, 0.0], &[th.cos(), th.sin()]), 4, 0.2).unwrap();
        assert_eq!(j.axis, 0);
        assert!((j.y[1][0] - th.tan()).abs() < 1e-14);
        for r in 2..=4 {
            assert!(j.y[r][0].abs() < 1e-14);
        }
        assert_eq!(j.coordinate_count(), 1 + 5);
    }

    #[test]
    fn pendulum_second_coefficient() {
        // q1'' = sin(q1), so the t^2 coefficient is sin(q1(0))/2.
        let h = library::pendulum(2, 2.0);
        let q1 = 0.7f64;
        let x = lp(&h, &[q1, 0.0], &[(2.0 * (2.0 - q1.cos())).sqrt(), 0.0]);
        let s = orbit_taylor(&h, &x, 8).unwrap();
        assert!((s.coeffs[0][2] - q1.sin() / 2.0).abs() < 1e-13);
        let s6 = orbit_taylor(&h, &x, 6).unwrap();
        for i in 0..4 {
            for j in 0..=6 {
                assert!((s.coeffs[i][j] - s6.coeffs[i][j]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn tangency_examples() {
        let h = library::flat(2);
        let a = project_jet(&h, &lp(&h, &[0.0, 0.0], &[1.0, 0.0]), 3, 0.2).unwrap();
        let b = project_jet(
            &h,
            &lp(&h, &[0.0, 0.0], &[0.3f64.cos(), 0.3f64.sin()]),
            3,
            0.2,
        )
        .unwrap();
        assert_eq!(
            tangency_order(&a, &b, 6, 1e-9, 0.2).unwrap(),
            Tangency::Order(1)
        );
        assert_eq!(
            tangency_order(&a, &a, 6, 1e-9, 0.2).unwrap(),
            Tangency::Full
        );
        let zero = graph(vec![vec![0.0]; 5]);
        let cubic = graph(vec![vec![0.0], vec![0.0], vec![0.0], vec![6.0], vec![0.0]]);
        assert_eq!(
            tangency_order(&zero, &cubic, 6, 1e-9, 0.2).unwrap(),
            Tangency::Order(3)
        );
        let mut moved = zero.clone();
        moved.base = 0.5;
        assert_eq!(
            tangency_order(&zero, &moved, 6, 1e-9, 0.2).unwrap().code(),
            Some(-1)
        );
    }

    #[test]
    fn reaxis_of_a_circle() {
        // Unit circle through (0,-1)... graph y = -sqrt(1 - x^2) near x = 0.6.
        let x0 = 0.6f64;
        let k = 4;
        let f = |x: f64| -(1.0 - x * x).sqrt();
        let d1 = x0 / (1.0 - x0 * x0).sqrt();
        let d2 = 1.0 / (1.0 - x0 * x0).powf(1.5);
        let jet = CurveJet {
            axis: 0,
            base: x0,
            y: vec![
                vec![f(x0)],
                vec![d1],
                vec![d2],
                vec![3.0 * x0 / (1.0 - x0 * x0).powf(2.5)],
                vec![3.0 * (1.0 + 4.0 * x0 * x0) / (1.0 - x0 * x0).powf(3.5)],
            ],
            k,
            orientation: 1,
        };
        let other = jet.reaxis(1, 0.2).unwrap();
        // As a graph over q2: x = sqrt(1 - y^2) near y = -0.8.
        let y0 = f(x0);
        assert!((other.base - y0).abs() < 1e-15);
        assert!((other.y[0][0] - x0).abs() < 1e-15);
        assert!((other.y[1][0] - (-y0 / x0)).abs() < 1e-12);
        assert!((other.y[2][0] - (-1.0 / x0.powi(3))).abs() < 1e-11);
        let back = other.reaxis(0, 0.2).unwrap();
        for r in 0..=k {
            assert!((back.y[r][0] - jet.y[r][0]).abs() < 1e-9 * (1.0 + jet.y[r][0].abs()));
        }
    }

    #[test]
    fn isolation_radius_linear_vs_quadratic() {
        let a = graph(vec![vec![0.0], vec![0.0], vec![0.0]]);
        let b = graph(vec![vec![0.0], vec![1.0], vec![1.0]]);
        let iso = isolation_radius(&a, &b, 1, 1.0, 10.0).unwrap();
        assert!(iso.epsilon > 0.0);
        // y2(x) = x + x^2/2 vanishes only at 0 and -2.
        let n = 10_000;
        for i in 0..n {
            let x = -iso.epsilon + 2.0 * iso.epsilon * (i as f64 + 0.5) / n as f64;
            assert!((x + 0.5 * x * x).abs() > 0.0);
        }
    }

    proptest! {
        #[test]
        fn tangency_is_symmetric(c1 in proptest::collection::vec(-1.0f64..1.0, 8), c2 in proptest::collection::vec(-1.0f64..1.0, 8), share in 0usize..4) {
            let mk = |c: &[f64]| CurveJet { axis: 0, base: 0.1, y: (0..4).map(|r| vec![c[2 * r], c[2 * r + 1]]).collect(), k: 3, orientation: 1 };
            let mut c2 = c2.clone();
            c2[..2 * share].copy_from_slice(&c1[..2 * share]);
            let (a, b) = (mk(&c1), mk(&c2));
            prop_assert_eq!(tangency_order(&a, &b, 6, 1e-9, 0.2).unwrap(), tangency_order(&b, &a, 6, 1e-9, 0.2).unwrap());
        }

        #[test]
        fn inversion_composes_to_identity(c in proptest::collection::vec(-0.5f64..0.5, 5), lead in 0.5f64..2.0) {
            let mut x = vec![0.0, lead];
            x.extend_from_slice(&c);
            let t = series::revert(&x, 7).unwrap();
            let id = series::compose(&x, &t, 7);
            for (k, v) in id.iter().enumerate() {
                let e = if k == 1 { 1.0 } else { 0.0 };
                prop_assert!((v - e).abs() < 1e-12);
            }
        }
    }

    fn orbit(h: &HamiltonianExpr, q: &[f64], p: &[f64], t0: f64, t1: f64) -> Orbit {
        integrate(h, &lp(h, q, p), Window::time(t0, t1), &Tolerances::default()).unwrap()
    }

    #[test]
    fn crossing_lines_meet_once_transversally() {
        let h = library::flat(2);
        let th = 0.3f64;
        let a = orbit(&h, &[-1.0, 0.0], &[1.0, 0.0], 0.0, 2.0);
        let b = orbit(&h, &[-th.cos(), -th.sin()], &[th.cos(), th.sin()], 0.0, 2.0);
        let tol = Tolerances::default();
        let hits = find_intersections(&h, &a, &h, &b, 0.01, 1e-9, 10_000, &tol);
        assert_eq!(hits.len(), 1);
        let x = &hits[0];
        assert!((x.t1 - 1.0).abs() < 1e-9 && (x.t2 - 1.0).abs() < 1e-9);
        assert_eq!(x.order, Some(1));
        // Straight lines have no remainder, so the radius is the whole window.
        assert_eq!(x.isolation.unwrap().epsilon, 0.5);
        let c = x.check.as_ref().unwrap();
        assert!(c.isolated && c.samples == 10_000);
        assert!((c.min_ratio - 1.0).abs() < 1e-6);
    }

    #[test]
    fn tangent_circles_touch_to_second_order() {
        let h = library::magnetic(1.0);
        let a = orbit(&h, &[0.0, 0.0], &[1.0, 0.0], -1.0, 1.0);
        let b = orbit(&h, &[0.0, 0.0], &[-1.0, 0.0], -1.0, 1.0);
        let tol = Tolerances::default();
        let hits = find_intersections(&h, &a, &h, &b, 0.01, 1e-9, 10_000, &tol);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].order, Some(2));
        let eps = hits[0].isolation.unwrap().epsilon;
        assert!(eps > 0.1, "{eps}");
        assert!(hits[0].check.as_ref().unwrap().isolated);
    }

    #[test]
    fn parallel_lines_never_meet() {
        let h = library::flat(2);
        let a = orbit(&h, &[-1.0, 0.0], &[1.0, 0.0], 0.0, 2.0);
        let b = orbit(&h, &[-1.0, 0.1], &[1.0, 0.0], 0.0, 2.0);
        assert!(find_intersections(&h, &a, &h, &b, 0.01, 1e-9, 100, &Tolerances::default()).is_empty());
    }

    #[test]
    fn perpendicular_lines_in_space_use_a_rotated_frame() {
        let h = library::flat(3);
        let a = orbit(&h, &[-1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], 0.0, 2.0);
        let b = orbit(&h, &[0.0, -1.0, 0.0], &[0.0, 1.0, 0.0], 0.0, 2.0);
        let hits = find_intersections(&h, &a, &h, &b, 0.01, 1e-9, 1000, &Tolerances::default());
        assert_eq!(hits.len(), 1);
        let x = &hits[0];
        assert_eq!((x.axis, x.order), (None, Some(1)));
        assert!(x.isolation.unwrap().epsilon > 0.1);
        assert!(x.check.as_ref().unwrap().isolated);
    }
}
