//! Adaptive Taylor integration of `X_H` on the energy level, dense output,
//! and chord shooting between fibers.

use crate::expr::{DomainError, TaylorWork};
use crate::hamsys::{
    dot, level_point_at, norm, project_to_level, HamiltonianExpr, LevelPoint, PhasePoint, Rejection,
};
use crate::tol::Tolerances;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("step size underflow at t = {t} (h = {h:e})")]
    BlowUp { t: f64, h: f64 },
    #[error("vertical tangency at t = {t}: |dpi X_H| = {norm:e}")]
    VerticalTangency { t: f64, norm: f64 },
    #[error("energy drift {residual:e} exceeds tolerance at t = {t}")]
    Drift { t: f64, residual: f64 },
    #[error("domain error: {0}")]
    Domain(#[from] DomainError),
    #[error("start point rejected: {0}")]
    Rejected(#[from] Rejection),
    #[error("shooting did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("singular shooting Jacobian (condition {cond:e}); conjugate point suspected")]
    ConjugatePointSuspected { cond: f64 },
    #[error("invalid window: {0}")]
    InvalidWindow(String),
}

/// Integration window: a time interval, or a base arclength bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Window {
    Time {
        t0: f64,
        t1: f64,
    },
    Arclength {
        length: f64,
        backward: bool,
        t_max: f64,
    },
}

impl Window {
    pub fn time(t0: f64, t1: f64) -> Self {
        Window::Time { t0, t1 }
    }

    pub fn arclength(length: f64) -> Self {
        Window::Arclength {
            length,
            backward: false,
            t_max: 1e6,
        }
    }
}

/// Taylor polynomial of one accepted step, anchored at its start time.
#[derive(Clone, Debug)]
pub struct TaylorStep {
    pub t0: f64,
    pub h: f64,
    /// `coeffs[j][i]` is the `j`-th coefficient of phase coordinate `i`.
    pub coeffs: Vec<Vec<f64>>,
}

impl TaylorStep {
    pub fn eval(&self, s: f64) -> Vec<f64> {
        let m = self.coeffs[0].len();
        let mut z = vec![0.0; m];
        for c in self.coeffs.iter().rev() {
            for i in 0..m {
                z[i] = z[i] * s + c[i];
            }
        }
        z
    }

    /// Time derivative of the step polynomial.
    pub fn velocity(&self, s: f64) -> Vec<f64> {
        let m = self.coeffs[0].len();
        let mut v = vec![0.0; m];
        for (j, c) in self.coeffs.iter().enumerate().skip(1).rev() {
            for i in 0..m {
                v[i] = v[i] * s + j as f64 * c[i];
            }
        }
        v
    }

    /// Largest mismatch between the polynomial's velocity and the field at interior checkpoints and the end.
    fn defect(&self, h: &HamiltonianExpr, s: f64) -> Result<f64, DomainError> {
        let mut worst: f64 = 0.0;
        for f in [0.29, 0.53, 0.78, 1.0] {
            let v = self.velocity(f * s);
            let x = h.field(&self.eval(f * s))?;
            worst = worst.max(
                v.iter()
                    .zip(&x)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max),
            );
        }
        Ok(worst)
    }

    fn base_speed(&self, s: f64, n: usize) -> f64 {
        let mut v = vec![0.0; n];
        for (j, c) in self.coeffs.iter().enumerate().skip(1).rev() {
            for i in 0..n {
                v[i] = v[i] * s + j as f64 * c[i];
            }
        }
        norm(&v)
    }

    /// Base arclength over `[0, s]` by 8-point Gauss-Legendre on 2 panels.
    fn arclength(&self, s: f64, n: usize) -> f64 {
        const X: [f64; 4] = [
            0.183_434_642_495_649_8,
            0.525_532_409_916_329,
            0.796_666_477_413_626_7,
            0.960_289_856_497_536_3,
        ];
        const W: [f64; 4] = [
            0.362_683_783_378_362,
            0.313_706_645_877_887_3,
            0.222_381_034_453_374_5,
            0.101_228_536_290_376_3,
        ];
        let mut total = 0.0;
        for panel in 0..2 {
            let a = s * panel as f64 / 2.0;
            let half = s / 4.0;
            let mid = a + half;
            for (x, w) in X.iter().zip(&W) {
                total +=
                    w * (self.base_speed(mid - half * x, n) + self.base_speed(mid + half * x, n));
            }
        }
        total * (s / 4.0).abs()
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct FlowStats {
    pub steps: usize,
    pub max_energy_residual: f64,
    pub max_pre_projection_drift: f64,
    pub arclength: f64,
}

/// A computed orbit segment on the level set.
#[derive(Clone, Debug)]
pub struct Orbit {
    pub window: (f64, f64),
    pub samples: Vec<(f64, LevelPoint)>,
    pub steps: Vec<TaylorStep>,
    pub stats: FlowStats,
    periods: Vec<Option<f64>>,
}

impl Orbit {
    pub fn n(&self) -> usize {
        self.periods.len()
    }

    pub fn t_start(&self) -> f64 {
        self.window.0
    }

    pub fn t_end(&self) -> f64 {
        self.window.1
    }

    fn dir(&self) -> f64 {
        if self.window.1 >= self.window.0 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn contains(&self, t: f64) -> bool {
        let d = self.dir();
        d * (t - self.window.0) >= -1e-14 && d * (self.window.1 - t) >= -1e-14
    }

    /// Dense-output phase point at time `t` (must lie in the window).
    pub fn eval(&self, t: f64) -> Option<Vec<f64>> {
        if !self.contains(t) || self.steps.is_empty() {
            return if self.steps.is_empty() && t == self.window.0 {
                Some(self.samples[0].1.z())
            } else {
                None
            };
        }
        let d = self.dir();
        let idx = self
            .steps
            .partition_point(|s| d * (s.t0 - t) <= 0.0)
            .saturating_sub(1);
        let st = &self.steps[idx];
        let mut z = st.eval(t - st.t0);
        for (i, per) in self.periods.iter().enumerate() {
            if let Some(l) = per {
                z[i] = z[i].rem_euclid(*l);
            }
        }
        Some(z)
    }

    pub fn base_at(&self, t: f64) -> Option<Vec<f64>> {
        self.eval(t).map(|mut z| {
            z.truncate(self.n());
            z
        })
    }

    pub fn last(&self) -> &LevelPoint {
        &self.samples.last().unwrap().1
    }

    /// Writes `t, q1..qn, p1..pn, energy_residual`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.n();
        let mut head = vec!["t".to_string()];
        head.extend((1..=n).map(|i| format!("q{i}")));
        head.extend((1..=n).map(|i| format!("p{i}")));
        head.push("energy_residual".into());
        writeln!(w, "{}", head.join(","))?;
        for (t, lp) in &self.samples {
            let mut row = vec![format!("{t:?}")];
            row.extend(
                lp.point
                    .q
                    .iter()
                    .chain(&lp.point.p)
                    .map(|v| format!("{v:?}")),
            );
            row.push(format!("{:?}", lp.energy_residual));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Times sampled so that consecutive base points are at most `ds` apart (approximately).
    pub fn times_by_arclength(&self, ds: f64) -> Vec<f64> {
        let n = self.n();
        let mut out = vec![self.window.0];
        for st in &self.steps {
            let len = st.arclength(st.h, n);
            let m = (len / ds).ceil().max(1.0) as usize;
            for j in 1..=m {
                out.push(st.t0 + st.h * j as f64 / m as f64);
            }
        }
        out
    }
}

fn taylor_coeffs(
    work: &mut TaylorWork<'_>,
    z: &[f64],
    order: usize,
) -> Result<Vec<Vec<f64>>, DomainError> {
    let m = z.len();
    let mut c = vec![vec![0.0; m]; order + 1];
    for i in 0..m {
        work.set_input(i, 0, z[i]);
        c[0][i] = z[i];
    }
    for j in 0..order {
        work.compute(j)?;
        for i in 0..m {
            let v = work.output(i, j) / (j + 1) as f64;
            work.set_input(i, j + 1, v);
            c[j + 1][i] = v;
        }
    }
    Ok(c)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

/// Integrates the flow of `H` from a certified point over `window`.
const DEFECT_TOL: f64 = 1e-12;

pub fn integrate(
    h: &HamiltonianExpr,
    x0: &LevelPoint,
    window: Window,
    tol: &Tolerances,
) -> Result<Orbit, FlowError> {
    let n = h.n();
    let order = tol.taylor_order.max(2);
    let (t0, t_goal, len_goal, dir) = match window {
        Window::Time { t0, t1 } => {
            if !(t0.is_finite() && t1.is_finite()) {
                return Err(FlowError::InvalidWindow("non-finite bounds".into()));
            }
            (t0, t1, f64::INFINITY, if t1 >= t0 { 1.0 } else { -1.0 })
        }
        Window::Arclength {
            length,
            backward,
            t_max,
        } => {
            if !(length > 0.0 && t_max > 0.0) {
                return Err(FlowError::InvalidWindow(
                    "arclength and time bound must be positive".into(),
                ));
            }
            let d = if backward { -1.0 } else { 1.0 };
            (0.0, d * t_max, length, d)
        }
    };
    let span = (t_goal - t0).abs();
    let mut work = TaylorWork::new(h.field_tape(), order);
    let mut z = x0.z();
    let mut t = t0;
    let mut samples = vec![(t0, x0.clone())];
    let mut steps = Vec::new();
    let mut stats = FlowStats {
        max_energy_residual: x0.energy_residual,
        ..Default::default()
    };
    let mut arc = 0.0;
    while dir * (t_goal - t) > 0.0 && arc < len_goal {
        let c = taylor_coeffs(&mut work, &z, order)?;
        let scale = inf_norm(&z).max(1.0);
        let eps = tol.step_tol * scale;
        let mut hs = f64::INFINITY;
        for j in [order - 1, order] {
            let cn = inf_norm(&c[j]);
            if cn > 0.0 {
                hs = hs.min((eps / cn).powf(1.0 / j as f64));
            }
        }
        let mut step = (0.9 * hs).min(tol.max_step).min((t_goal - t).abs());
        if step < 1e-13 * span.max(1.0) && (t_goal - t).abs() > step {
            return Err(FlowError::BlowUp { t, h: step });
        }
        let mut st = TaylorStep {
            t0: t,
            h: dir * step,
            coeffs: c,
        };
        // The coefficient estimate is blind to a flat function turning on ahead of the step.
        while st.defect(h, st.h)? * step > DEFECT_TOL * scale {
            step *= 0.5;
            st.h = dir * step;
            if step < 1e-13 * span.max(1.0) {
                return Err(FlowError::BlowUp { t, h: step });
            }
        }
        let mut last = false;
        if len_goal.is_finite() {
            let l = st.arclength(st.h, n);
            if arc + l >= len_goal {
                let (mut lo, mut hi) = (0.0, step);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if arc + st.arclength(dir * mid, n) < len_goal {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                step = hi;
                st.h = dir * step;
                last = true;
            }
            arc += st.arclength(st.h, n);
        }
        let mut zn = st.eval(st.h);
        let pre = h.value(&zn)?.abs();
        stats.max_pre_projection_drift = stats.max_pre_projection_drift.max(pre);
        project_to_level(h, &mut zn, tol.level_tol * 1e-3, 5)?;
        h.wrap(&mut zn);
        let tn = if !last && (t_goal - (t + st.h)) * dir <= 0.0 {
            t_goal
        } else {
            t + st.h
        };
        let lp = match level_point_at(h, &zn, tol) {
            Ok(lp) => lp,
            Err(Rejection::VerticalTangency(v)) => {
                return Err(FlowError::VerticalTangency { t: tn, norm: v })
            }
            Err(e) => return Err(e.into()),
        };
        if lp.energy_residual > tol.drift_tol {
            return Err(FlowError::Drift {
                t: tn,
                residual: lp.energy_residual,
            });
        }
        stats.max_energy_residual = stats.max_energy_residual.max(lp.energy_residual);
        st.h = tn - t;
        steps.push(st);
        samples.push((tn, lp));
        z = zn;
        t = tn;
        if last {
            break;
        }
    }
    stats.steps = steps.len();
    stats.arclength = arc;
    Ok(Orbit {
        window: (t0, t),
        samples,
        steps,
        stats,
        periods: h.periods().to_vec(),
    })
}

/// Base points of an orbit within `radius` of `center`, sampled at arclength step `ds`.
pub fn base_polyline(o: &Orbit, ds: f64, center: &[f64], radius: f64) -> Vec<Vec<f64>> {
    let mut pts: Vec<Vec<f64>> = o
        .times_by_arclength(ds)
        .into_iter()
        .filter_map(|t| o.base_at(t))
        .collect();
    pts.retain(|p| dist(p, center) <= radius);
    pts
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    norm(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>())
}

/// Distance from `x` to the segment `[a, b]` and the segment parameter of the foot point.
pub fn point_segment_distance(x: &[f64], a: &[f64], b: &[f64]) -> (f64, f64) {
    let ab: Vec<f64> = a.iter().zip(b).map(|(u, v)| v - u).collect();
    let ax: Vec<f64> = a.iter().zip(x).map(|(u, v)| v - u).collect();
    let l2 = dot(&ab, &ab);
    let s = if l2 > 0.0 {
        (dot(&ax, &ab) / l2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = norm(&ax.iter().zip(&ab).map(|(u, v)| u - s * v).collect::<Vec<_>>());
    (d, s)
}

/// A chord of a sampled base curve with the orbit times of its ends.
#[derive(Clone, Debug)]
pub struct Segment {
    pub orbit: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub ta: f64,
    pub tb: f64,
}

/// Base segments of orbits bucketed on a uniform grid for capped distance queries.
pub struct SegmentIndex {
    cell: f64,
    segs: Vec<Segment>,
    grid: HashMap<Vec<i64>, Vec<usize>>,
}

impl SegmentIndex {
    /// Segments of each orbit sampled at step `ds` with an endpoint within `radius` of `center`.
    /// Queries are exact up to a cap no larger than `cell`.
    pub fn new(orbits: &[Orbit], ds: f64, center: &[f64], radius: f64, cell: f64) -> SegmentIndex {
        let mut idx = SegmentIndex {
            cell,
            segs: Vec::new(),
            grid: HashMap::new(),
        };
        for (k, o) in orbits.iter().enumerate() {
            let pts: Vec<(f64, Vec<f64>)> = o
                .times_by_arclength(ds)
                .into_iter()
                .filter_map(|t| o.base_at(t).map(|q| (t, q)))
                .collect();
            for w in pts.windows(2) {
                if dist(&w[0].1, center).min(dist(&w[1].1, center)) <= radius {
                    idx.insert(Segment {
                        orbit: k,
                        a: w[0].1.clone(),
                        b: w[1].1.clone(),
                        ta: w[0].0,
                        tb: w[1].0,
                    });
                }
            }
            if pts.len() == 1 && dist(&pts[0].1, center) <= radius {
                let (t, q) = pts[0].clone();
                idx.insert(Segment {
                    orbit: k,
                    a: q.clone(),
                    b: q,
                    ta: t,
                    tb: t,
                });
            }
        }
        idx
    }

    fn key(&self, x: &[f64]) -> Vec<i64> {
        x.iter().map(|v| (v / self.cell).floor() as i64).collect()
    }

    fn insert(&mut self, s: Segment) {
        let (ka, kb) = (self.key(&s.a), self.key(&s.b));
        let id = self.segs.len();
        let lo: Vec<i64> = ka.iter().zip(&kb).map(|(x, y)| *x.min(y)).collect();
        let hi: Vec<i64> = ka.iter().zip(&kb).map(|(x, y)| *x.max(y)).collect();
        for key in lattice_box(&lo, &hi) {
            self.grid.entry(key).or_default().push(id);
        }
        self.segs.push(s);
    }

    pub fn is_empty(&self) -> bool {
        self.segs.is_empty()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segs
    }

    /// Segments closer than `cap` to `x`, with distance and foot time.
    pub fn near(&self, x: &[f64], cap: f64) -> Vec<(usize, f64, f64)> {
        debug_assert!(cap <= self.cell);
        let k = self.key(x);
        let lo: Vec<i64> = k.iter().map(|v| v - 1).collect();
        let hi: Vec<i64> = k.iter().map(|v| v + 1).collect();
        let mut out: Vec<(usize, f64, f64)> = Vec::new();
        for key in lattice_box(&lo, &hi) {
            if let Some(ids) = self.grid.get(&key) {
                for &i in ids {
                    let s = &self.segs[i];
                    let (d, u) = point_segment_distance(x, &s.a, &s.b);
                    if d < cap {
                        out.push((i, d, s.ta + u * (s.tb - s.ta)));
                    }
                }
            }
        }
        out.sort_by_key(|o| o.0);
        out.dedup_by_key(|o| o.0);
        out
    }

    /// Distance from `x` to the nearest indexed segment, or `cap` if none is closer.
    pub fn distance(&self, x: &[f64], cap: f64) -> f64 {
        self.near(x, cap).iter().fold(cap, |m, s| m.min(s.1))
    }
}

/// All integer points of the box `[lo, hi]`.
fn lattice_box(lo: &[i64], hi: &[i64]) -> Vec<Vec<i64>> {
    let mut out = vec![Vec::new()];
    for (a, b) in lo.iter().zip(hi) {
        out = out
            .into_iter()
            .flat_map(|p| {
                (*a..=*b).map(move |v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    out
}

/// Symmetric Hausdorff distance between two orbits' dense outputs in phase space.
pub fn hausdorff_distance(a: &Orbit, b: &Orbit, samples: usize) -> f64 {
    let pts = |o: &Orbit| -> Vec<Vec<f64>> {
        (0..=samples)
            .map(|i| {
                o.eval(o.window.0 + (o.window.1 - o.window.0) * i as f64 / samples as f64)
                    .unwrap()
            })
            .collect()
    };
    let (pa, pb) = (pts(a), pts(b));
    fn seg_dist(x: &[f64], u: &[f64], v: &[f64]) -> f64 {
        let d: Vec<f64> = v.iter().zip(u).map(|(a, b)| a - b).collect();
        let w: Vec<f64> = x.iter().zip(u).map(|(a, b)| a - b).collect();
        let dd = dot(&d, &d);
        let s = if dd > 0.0 {
            (dot(&w, &d) / dd).clamp(0.0, 1.0)
        } else {
            0.0
        };
        norm(&w.iter().zip(&d).map(|(a, b)| a - s * b).collect::<Vec<_>>())
    }
    let one_side = |p: &[Vec<f64>], poly: &[Vec<f64>]| -> f64 {
        p.iter()
            .map(|x| {
                poly.windows(2)
                    .map(|s| seg_dist(x, &s[0], &s[1]))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    one_side(&pa, &pb).max(one_side(&pb, &pa))
}

/// A solution of the fiber-to-fiber boundary problem.
#[derive(Clone, Debug)]
pub struct Chord {
    pub orbit: Orbit,
    pub q_a: Vec<f64>,
    pub q_b: Vec<f64>,
    pub duration: f64,
    pub residual: f64,
    pub iterations: usize,
}

/// Orthonormal basis of the orthogonal complement of `g` (columns).
pub fn complement_basis(g: &[f64]) -> DMatrix<f64> {
    let m = g.len();
    let gn = norm(g);
    let u: Vec<f64> = g.iter().map(|v| v / gn).collect();
    // Householder reflection sending u to +-e_k with k the largest component.
    let k = (0..m)
        .max_by(|&a, &b| u[a].abs().partial_cmp(&u[b].abs()).unwrap())
        .unwrap();
    let s = if u[k] >= 0.0 { 1.0 } else { -1.0 };
    let mut v = u.clone();
    v[k] += s;
    let vv = dot(&v, &v);
    let mut out = DMatrix::zeros(m, m - 1);
    let mut col = 0;
    for j in 0..m {
        if j == k {
            continue;
        }
        for i in 0..m {
            let e = if i == j { 1.0 } else { 0.0 };
            out[(i, col)] = e - 2.0 * v[i] * v[j] / vv;
        }
        col += 1;
    }
    out
}

/// Moves `p` within the fiber over `q` onto `H = 0` along `d_p H`.
pub fn project_in_fiber(
    h: &HamiltonianExpr,
    q: &[f64],
    p: &mut [f64],
    target: f64,
) -> Result<f64, DomainError> {
    let n = q.len();
    let mut z: Vec<f64> = q.iter().chain(p.iter()).copied().collect();
    let mut last = f64::INFINITY;
    for _ in 0..30 {
        let (v, g) = h.gradient(&z)?;
        if v.abs() <= target || v.abs() >= last {
            break;
        }
        last = v.abs();
        let gp = &g[n..];
        let gg = dot(gp, gp);
        if gg == 0.0 {
            break;
        }
        for i in 0..n {
            z[n + i] -= v * gp[i] / gg;
        }
    }
    p.copy_from_slice(&z[n..]);
    Ok(h.value(&z)?.abs())
}

/// Newton shooting for an orbit from the fiber over `q_a` to the fiber over `q_b`.
pub fn shoot_chord(
    h: &HamiltonianExpr,
    q_a: &[f64],
    q_b: &[f64],
    p_guess: &[f64],
    t_guess: f64,
    tol: &Tolerances,
) -> Result<Chord, FlowError> {
    let n = h.n();
    let mut p0 = p_guess.to_vec();
    project_in_fiber(h, q_a, &mut p0, tol.level_tol * 1e-3)?;
    let z0: Vec<f64> = q_a.iter().chain(&p0).copied().collect();
    let (_, g) = h.gradient(&z0)?;
    let basis = complement_basis(&g[n..]);
    let start = |u: &[f64]| -> Result<LevelPoint, FlowError> {
        let mut p = p0.clone();
        for i in 0..n {
            for (j, uj) in u.iter().enumerate() {
                p[i] += basis[(i, j)] * uj;
            }
        }
        project_in_fiber(h, q_a, &mut p, tol.level_tol * 1e-3)?;
        Ok(crate::hamsys::certify_level_point(
            h,
            &PhasePoint::new(q_a.to_vec(), p),
            tol,
        )?)
    };
    let resid = |o: &Orbit| -> Vec<f64> {
        let e = o.last();
        (0..n).map(|i| h.q_diff(i, e.point.q[i], q_b[i])).collect()
    };
    let mut u = vec![0.0; n - 1];
    let mut t_end = t_guess;
    let mut orbit = integrate(h, &start(&u)?, Window::time(0.0, t_end), tol)?;
    let mut f = resid(&orbit);
    let mut fnorm = norm(&f);
    for it in 0..tol.max_iter {
        if fnorm <= tol.chord_tol {
            return Ok(Chord {
                orbit,
                q_a: q_a.to_vec(),
                q_b: q_b.to_vec(),
                duration: t_end,
                residual: fnorm,
                iterations: it,
            });
        }
        let mut jac = DMatrix::zeros(n, n);
        let eps = 1e-6;
        for j in 0..n - 1 {
            let mut up = u.clone();
            up[j] += eps;
            let mut um = u.clone();
            um[j] -= eps;
            let fp = resid(&integrate(h, &start(&up)?, Window::time(0.0, t_end), tol)?);
            let fm = resid(&integrate(h, &start(&um)?, Window::time(0.0, t_end), tol)?);
            for i in 0..n {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * eps);
            }
        }
        for i in 0..n {
            jac[(i, n - 1)] = orbit.last().base_velocity[i];
        }
        let sv = jac.clone().svd(false, false).singular_values;
        let smax = sv.max();
        let smin = sv.min();
        if smin <= 1e-10 * smax {
            return Err(FlowError::ConjugatePointSuspected {
                cond: smax / smin.max(f64::MIN_POSITIVE),
            });
        }
        let delta = jac.lu().solve(&DVector::from_column_slice(&f)).ok_or(
            FlowError::ConjugatePointSuspected {
                cond: f64::INFINITY,
            },
        )?;
        let mut lam = 1.0;
        loop {
            let un: Vec<f64> = (0..n - 1).map(|j| u[j] - lam * delta[j]).collect();
            let tn = t_end - lam * delta[n - 1];
            let trial = start(&un).and_then(|s| integrate(h, &s, Window::time(0.0, tn), tol));
            if let Ok(o) = trial {
                let fr = resid(&o);
                let nr = norm(&fr);
                if nr < fnorm || lam < 1e-3 {
                    u = un;
                    t_end = tn;
                    orbit = o;
                    f = fr;
                    fnorm = nr;
                    break;
                }
            }
            lam *= 0.5;
            if lam < 1e-4 {
                return Err(FlowError::NotConverged {
                    iterations: it + 1,
                    residual: fnorm,
                });
            }
        }
    }
    if fnorm <= tol.chord_tol {
        return Ok(Chord {
            orbit,
            q_a: q_a.to_vec(),
            q_b: q_b.to_vec(),
            duration: t_end,
            residual: fnorm,
            iterations: tol.max_iter,
        });
    }
    Err(FlowError::NotConverged {
        iterations: tol.max_iter,
        residual: fnorm,
    })
}
