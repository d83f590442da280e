//! Order-one homopodes inside a single fiber of a planar Hamiltonian, drawn on
//! the torus of fiber angles.

use crate::hamsys::{norm, HamiltonianExpr, LevelPoint};
use crate::homopode::{
    classify_flavor, fiber_point_along_ray, homopodal_residual, inflection_order,
    restricted_fiber_hessian, Flavor,
};
use crate::tol::Tolerances;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::f64::consts::{PI, TAU};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeartError {
    #[error("fiber scans need a planar base (n = 2), got n = {0}")]
    Dimension(usize),
    #[error("ray at angle {0} does not meet the fiber")]
    RayMiss(f64),
    #[error("domain error at angle {0}")]
    Domain(f64),
}

/// Star-shaped fiber over a fixed base point, parametrized by ray angle.
pub struct Fiber<'h> {
    h: &'h HamiltonianExpr,
    q: Vec<f64>,
    center: Vec<f64>,
    tol: Tolerances,
}

impl<'h> Fiber<'h> {
    pub fn new(
        h: &'h HamiltonianExpr,
        q: &[f64],
        center: &[f64],
        tol: &Tolerances,
    ) -> Result<Self, HeartError> {
        if h.n() != 2 {
            return Err(HeartError::Dimension(h.n()));
        }
        Ok(Fiber {
            h,
            q: q.to_vec(),
            center: center.to_vec(),
            tol: tol.clone(),
        })
    }

    pub fn point(&self, phi: f64) -> Result<LevelPoint, HeartError> {
        fiber_point_along_ray(
            self.h,
            &self.q,
            &self.center,
            &[phi.cos(), phi.sin()],
            &self.tol,
        )
        .ok_or(HeartError::RayMiss(phi))
    }

    pub fn velocity(&self, phi: f64) -> Result<Vec<f64>, HeartError> {
        Ok(self.point(phi)?.base_velocity)
    }

    /// Signed curvature proxy: the fiber Hessian on the unit fiber tangent.
    pub fn bending(&self, phi: f64) -> Result<f64, HeartError> {
        let x = self.point(phi)?;
        let a = self
            .h
            .fiber_hessian(&x.z())
            .map_err(|_| HeartError::Domain(phi))?;
        let v = &x.base_velocity;
        let s = norm(v);
        let t = [-v[1] / s, v[0] / s];
        Ok(t[0] * (a[(0, 0)] * t[0] + a[(0, 1)] * t[1])
            + t[1] * (a[(1, 0)] * t[0] + a[(1, 1)] * t[1]))
    }
}

fn cross(a: &[f64], b: &[f64]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn wrap_pi(x: f64) -> f64 {
    (x + PI).rem_euclid(TAU) - PI
}

fn bisect<F: FnMut(f64) -> Result<f64, HeartError>>(
    mut f: F,
    mut a: f64,
    mut b: f64,
    mut fa: f64,
) -> Result<f64, HeartError> {
    for _ in 0..60 {
        let m = 0.5 * (a + b);
        let fm = f(m)?;
        if fm == 0.0 {
            return Ok(m);
        }
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
        if b - a < 1e-14 {
            break;
        }
    }
    Ok(0.5 * (a + b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusPoint {
    pub phi1: f64,
    pub phi2: f64,
    pub flavor: Flavor,
    pub component: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub flavor: Flavor,
    pub size: usize,
    /// Lattice class of the loop in the torus, normalized so the first nonzero entry is positive.
    pub winding: [i64; 2],
    pub contractible: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeartScan {
    pub grid: usize,
    pub points: Vec<TorusPoint>,
    pub components: Vec<Component>,
    pub inflections: Vec<f64>,
    pub inflection_orders: Vec<usize>,
    /// Grid angles with nonzero inflection order (besides the located inflections).
    pub stray_inflections: usize,
    /// Fiber angles whose tangent is parallel to an inflection tangent.
    pub parallels: Vec<f64>,
    pub max_residual: f64,
    pub min_speed: f64,
}

impl HeartScan {
    /// Columns: `phi1, phi2, flavor, component`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "phi1,phi2,flavor,component")?;
        for p in &self.points {
            writeln!(
                w,
                "{:.12},{:.12},{},{}",
                p.phi1,
                p.phi2,
                format!("{:?}", p.flavor).to_lowercase(),
                p.component
            )?;
        }
        Ok(())
    }

    pub fn count(&self, flavor: Flavor) -> usize {
        self.components
            .iter()
            .filter(|c| c.flavor == flavor)
            .count()
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, i: usize) -> usize {
        let mut r = i;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut j = i;
        while self.0[j] != r {
            let next = self.0[j];
            self.0[j] = r;
            j = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

fn torus_delta(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    (wrap_pi(b.0 - a.0), wrap_pi(b.1 - a.1))
}

/// Scans `H^1` restricted to one fiber: pairs of fiber angles with parallel base velocities.
pub fn heart_fiber_scan(
    h: &HamiltonianExpr,
    q: &[f64],
    center: &[f64],
    grid: usize,
    tol: &Tolerances,
) -> Result<HeartScan, HeartError> {
    let fiber = Fiber::new(h, q, center, tol)?;
    let d = TAU / grid as f64;
    let phis: Vec<f64> = (0..grid).map(|i| i as f64 * d).collect();
    let half: Vec<f64> = (0..grid).map(|j| (j as f64 + 0.5) * d).collect();
    let vel_half = half
        .iter()
        .map(|p| fiber.velocity(*p))
        .collect::<Result<Vec<_>, _>>()?;
    let band = 1.5 * d;

    let mut raw: Vec<(f64, f64, Flavor)> = Vec::new();
    let mut max_residual: f64 = 0.0;
    for &phi1 in &phis {
        let x1 = fiber.point(phi1)?;
        let v1 = x1.base_velocity.clone();
        let vals: Vec<f64> = vel_half.iter().map(|v| cross(&v1, v)).collect();
        for j in 0..grid {
            let (a, b) = (half[j], half[j] + d);
            let jn = (j + 1) % grid;
            if vals[j].signum() == vals[jn].signum() {
                continue;
            }
            let mid = 0.5 * (a + b);
            if wrap_pi(mid - phi1).abs() < band {
                continue;
            }
            let phi2 =
                bisect(|t| Ok(cross(&v1, &fiber.velocity(t)?)), a, b, vals[j])?.rem_euclid(TAU);
            let x2 = fiber.point(phi2)?;
            let r = homopodal_residual(h, &x1, &x2, 1, tol)
                .map(|r| norm(&r))
                .unwrap_or(f64::INFINITY);
            let Ok(fl) = classify_flavor(&x1.base_velocity, &x2.base_velocity, 1) else {
                continue;
            };
            max_residual = max_residual.max(r);
            raw.push((phi1, phi2, fl));
            raw.push((phi2, phi1, fl));
        }
    }

    // Inflection points: sign changes of the bending along the fiber.
    let bend = phis
        .iter()
        .map(|p| fiber.bending(*p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut inflections = Vec::new();
    for i in 0..grid {
        let inext = (i + 1) % grid;
        if bend[i].signum() != bend[inext].signum() {
            inflections
                .push(bisect(|t| fiber.bending(t), phis[i], phis[i] + d, bend[i])?.rem_euclid(TAU));
        }
    }
    let inflection_orders = inflections
        .iter()
        .map(|p| inflection_order(h, &fiber.point(*p)?, tol).map_err(|_| HeartError::Domain(*p)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut stray_inflections = 0;
    let mut min_speed = f64::INFINITY;
    for &p in &phis {
        let x = fiber.point(p)?;
        min_speed = min_speed.min(norm(&x.base_velocity));
        if inflections.iter().any(|t| wrap_pi(t - p).abs() < d) {
            continue;
        }
        let (s, scale) = restricted_fiber_hessian(h, &x.z()).map_err(|_| HeartError::Domain(p))?;
        if s.iter().any(|v| *v <= tol.rank_tol * scale) {
            stray_inflections += 1;
        }
    }
    let mut parallels = Vec::new();
    for &t in &inflections {
        let vt = fiber.velocity(t)?;
        let vals: Vec<f64> = vel_half.iter().map(|v| cross(&vt, v)).collect();
        for j in 0..grid {
            let jn = (j + 1) % grid;
            if vals[j].signum() != vals[jn].signum() && wrap_pi(half[j] + 0.5 * d - t).abs() > band
            {
                parallels.push(
                    bisect(
                        |s| Ok(cross(&vt, &fiber.velocity(s)?)),
                        half[j],
                        half[j] + d,
                        vals[j],
                    )?
                    .rem_euclid(TAU),
                );
            }
        }
    }
    parallels.sort_by(|a, b| a.partial_cmp(b).unwrap());

    // Iso arcs meet the diagonal at the inflections; those diagonal points join them.
    let mut nodes: Vec<(f64, f64, Flavor)> = raw;
    nodes.extend(inflections.iter().map(|t| (*t, *t, Flavor::Iso)));
    let link = 2.5 * d;
    let m = nodes.len();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut uf = UnionFind((0..m).collect());
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|a, b| nodes[*a].0.partial_cmp(&nodes[*b].0).unwrap());
    for (ii, &a) in order.iter().enumerate() {
        // Sorted by phi1; compare within the link window, cyclically.
        for step in 1..m {
            let b = order[(ii + step) % m];
            let dp = wrap_pi(nodes[b].0 - nodes[a].0);
            if dp.abs() > link {
                break;
            }
            let (dx, dy) = torus_delta((nodes[a].0, nodes[a].1), (nodes[b].0, nodes[b].1));
            if dx.abs().max(dy.abs()) <= link && nodes[a].2 == nodes[b].2 {
                adj[a].push(b);
                adj[b].push(a);
                uf.union(a, b);
            }
        }
    }

    let mut roots: Vec<usize> = (0..m).map(|i| uf.find(i)).collect();
    let mut label_of = std::collections::BTreeMap::new();
    for r in roots.iter_mut() {
        let next = label_of.len();
        *r = *label_of.entry(*r).or_insert(next);
    }
    let mut components: Vec<Component> = (0..label_of.len())
        .map(|_| Component {
            flavor: Flavor::Undefined,
            size: 0,
            winding: [0, 0],
            contractible: true,
        })
        .collect();
    let mut lift: Vec<Option<(f64, f64)>> = vec![None; m];
    for s in 0..m {
        let c = roots[s];
        components[c].size += 1;
        components[c].flavor = nodes[s].2;
        if lift[s].is_some() {
            continue;
        }
        lift[s] = Some((nodes[s].0, nodes[s].1));
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            let lu = lift[u].unwrap();
            for &v in &adj[u] {
                let (dx, dy) = torus_delta((nodes[u].0, nodes[u].1), (nodes[v].0, nodes[v].1));
                let cand = (lu.0 + dx, lu.1 + dy);
                match lift[v] {
                    None => {
                        lift[v] = Some(cand);
                        queue.push_back(v);
                    }
                    Some(lv) => {
                        let w = [
                            ((cand.0 - lv.0) / TAU).round() as i64,
                            ((cand.1 - lv.1) / TAU).round() as i64,
                        ];
                        if w != [0, 0] && components[c].contractible {
                            let sign = if w[0] != 0 {
                                w[0].signum()
                            } else {
                                w[1].signum()
                            };
                            components[c].winding = [w[0] * sign, w[1] * sign];
                            components[c].contractible = false;
                        }
                    }
                }
            }
        }
    }
    let points = nodes
        .iter()
        .zip(&roots)
        .map(|(n, c)| TorusPoint {
            phi1: n.0,
            phi2: n.1,
            flavor: n.2,
            component: *c,
        })
        .collect();
    Ok(HeartScan {
        grid,
        points,
        components,
        inflections,
        inflection_orders,
        stray_inflections,
        parallels,
        max_residual,
        min_speed,
    })
}
