//! Homopodal pairs: points of the energy level whose projected orbit germs
//! share base point and k-jet.

mod scan;

pub use scan::{
    dedup_pairs, fiber_point_along_ray, scan_homopodal, RdSequence, ScanReport, SeedStrategy,
};

use crate::expr::DomainError;
use crate::flow::complement_basis;
use crate::hamsys::{
    dot, level_point_at, norm, project_to_level, HamiltonianExpr, LevelPoint, Rejection,
};
use crate::subjets::{JetEngine, SubjetError};
use crate::tol::Tolerances;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HomopodeError {
    #[error(transparent)]
    Subjet(#[from] SubjetError),
    #[error("domain error: {0}")]
    Domain(#[from] DomainError),
    #[error("points too close to the diagonal (phase distance {0:e})")]
    Diagonal(f64),
    #[error("iterates collapsed onto the diagonal (phase distance {0:e})")]
    Collapse(f64),
    #[error("no convergence after {iterations} iterations (residual history {history:?})")]
    NotConverged {
        iterations: usize,
        history: Vec<f64>,
    },
    #[error("base velocities are not parallel (alignment residual {0:e})")]
    AlignmentFailure(f64),
    #[error("level certification failed: {0}")]
    Rejected(#[from] Rejection),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    Iso,
    Anti,
    Undefined,
}

/// Numerical rank of the residual Jacobian and the implied local dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimEstimate {
    pub dim: i64,
    pub rank: usize,
    pub ambiguous: bool,
    pub singular_values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomopodalPair {
    pub x1: LevelPoint,
    pub x2: LevelPoint,
    pub k: usize,
    pub axis: usize,
    pub flavor: Flavor,
    pub residual_norm: f64,
    pub est_dim: Option<DimEstimate>,
}

/// Expected dimension `(3-k)(n-1)+1` of the homopodal set.
pub fn formula_dimension(n: usize, k: usize) -> i64 {
    (3 - k as i64) * (n as i64 - 1) + 1
}

/// Residual length `kn + n - k`.
pub fn residual_len(n: usize, k: usize) -> usize {
    k * n + n - k
}

/// Axis maximizing the smaller of the two relative velocity components (symmetric in the pair).
pub fn common_axis(v1: &[f64], v2: &[f64]) -> (usize, f64) {
    let (n1, n2) = (norm(v1), norm(v2));
    let mut best = (0, -1.0);
    for i in 0..v1.len() {
        let m = (v1[i].abs() / n1).min(v2[i].abs() / n2);
        if m > best.1 {
            best = (i, m);
        }
    }
    best
}

/// Phase distance with periodic base axes wrapped.
pub fn phase_distance(h: &HamiltonianExpr, z1: &[f64], z2: &[f64]) -> f64 {
    let n = h.n();
    let mut s = 0.0;
    for i in 0..2 * n {
        let d = if i < n {
            h.q_diff(i, z1[i], z2[i])
        } else {
            z1[i] - z2[i]
        };
        s += d * d;
    }
    s.sqrt()
}

/// Sign of `s` in `v1 = s v2`, with the least-squares alignment check.
pub fn classify_flavor(v1: &[f64], v2: &[f64], k: usize) -> Result<Flavor, HomopodeError> {
    if k == 0 {
        return Ok(Flavor::Undefined);
    }
    let s = dot(v1, v2) / dot(v2, v2);
    let r: Vec<f64> = v1.iter().zip(v2).map(|(a, b)| a - s * b).collect();
    let rel = norm(&r) / norm(v1);
    if !(rel <= 1e-6) {
        return Err(HomopodeError::AlignmentFailure(rel));
    }
    Ok(if s > 0.0 { Flavor::Iso } else { Flavor::Anti })
}

/// Workspace for residual evaluation and Gauss-Newton solves at fixed `k`.
pub struct Solver<'h> {
    h: &'h HamiltonianExpr,
    k: usize,
    tol: Tolerances,
    engine: JetEngine<'h>,
    /// Abort when the residual stops contracting.
    pub stagnation_abort: bool,
}

impl<'h> Solver<'h> {
    pub fn new(h: &'h HamiltonianExpr, k: usize, tol: &Tolerances) -> Self {
        Solver {
            h,
            k,
            tol: tol.clone(),
            engine: JetEngine::new(h, k, 0.0),
            stagnation_abort: true,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Jet coordinates `(q, y^(1), .., y^(k))` on the given axis.
    fn jet_coords(&mut self, z: &[f64], axis: usize) -> Result<Vec<f64>, SubjetError> {
        let n = self.h.n();
        let j = self.engine.jet(z, Some(axis))?;
        let mut out = z[..n].to_vec();
        for r in 1..=self.k {
            out.extend_from_slice(&j.y[r]);
        }
        Ok(out)
    }

    fn diff(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let n = self.h.n();
        a.iter()
            .zip(b)
            .enumerate()
            .map(|(i, (x, y))| {
                if i < n {
                    self.h.q_diff(i, *x, *y)
                } else {
                    x - y
                }
            })
            .collect()
    }

    fn axis_for(
        &self,
        z1: &[f64],
        z2: &[f64],
    ) -> Result<(usize, Vec<f64>, Vec<f64>), HomopodeError> {
        let n = self.h.n();
        let v1 = self.h.field(z1)?[..n].to_vec();
        let v2 = self.h.field(z2)?[..n].to_vec();
        let (axis, m) = common_axis(&v1, &v2);
        if m < self.tol.axis_margin {
            return Err(SubjetError::ChartMismatch.into());
        }
        Ok((axis, v1, v2))
    }

    /// Residual on a fixed axis.
    pub fn residual_on_axis(
        &mut self,
        z1: &[f64],
        z2: &[f64],
        axis: usize,
    ) -> Result<Vec<f64>, HomopodeError> {
        let a = self.jet_coords(z1, axis)?;
        let b = self.jet_coords(z2, axis)?;
        Ok(self.diff(&a, &b))
    }

    /// Residual with the common axis chosen from the pair.
    pub fn residual(&mut self, z1: &[f64], z2: &[f64]) -> Result<Vec<f64>, HomopodeError> {
        let d = phase_distance(self.h, z1, z2);
        if d < self.tol.diag_margin {
            return Err(HomopodeError::Diagonal(d));
        }
        let (axis, _, _) = self.axis_for(z1, z2)?;
        self.residual_on_axis(z1, z2, axis)
    }

    fn tangent_basis(&self, z: &[f64]) -> Result<DMatrix<f64>, DomainError> {
        let (_, g) = self.h.gradient(z)?;
        Ok(complement_basis(&g))
    }

    fn moved(&self, z: &[f64], basis: &DMatrix<f64>, u: &[f64]) -> Result<Vec<f64>, DomainError> {
        let mut w = z.to_vec();
        for (i, wi) in w.iter_mut().enumerate() {
            for (c, uc) in u.iter().enumerate() {
                *wi += basis[(i, c)] * uc;
            }
        }
        project_to_level(self.h, &mut w, self.tol.level_tol * 1e-3, 8)?;
        self.h.wrap(&mut w);
        Ok(w)
    }

    /// Finite-difference Jacobian over on-level local coordinates of both points.
    pub fn jacobian(
        &mut self,
        z1: &[f64],
        z2: &[f64],
        axis: usize,
        step: f64,
        central: bool,
    ) -> Result<DMatrix<f64>, HomopodeError> {
        let n = self.h.n();
        let d = 2 * n - 1;
        let m = residual_len(n, self.k);
        let mut jac = DMatrix::zeros(m, 2 * d);
        for (side, z) in [z1, z2].into_iter().enumerate() {
            let basis = self.tangent_basis(z)?;
            let base = if central {
                None
            } else {
                Some(self.jet_coords(z, axis)?)
            };
            let sign = if side == 0 { 1.0 } else { -1.0 };
            for c in 0..d {
                let mut u = vec![0.0; d];
                u[c] = step;
                let plus = self.jet_coords(&self.moved(z, &basis, &u)?, axis)?;
                let (minus, denom) = match &base {
                    Some(b) => (b.clone(), step),
                    None => {
                        u[c] = -step;
                        (
                            self.jet_coords(&self.moved(z, &basis, &u)?, axis)?,
                            2.0 * step,
                        )
                    }
                };
                let dcol = self.diff(&plus, &minus);
                for r in 0..m {
                    jac[(r, side * d + c)] = sign * dcol[r] / denom;
                }
            }
        }
        Ok(jac)
    }

    /// Damped Gauss-Newton from a seed pair.
    pub fn solve(
        &mut self,
        x1: &LevelPoint,
        x2: &LevelPoint,
    ) -> Result<HomopodalPair, HomopodeError> {
        let n = self.h.n();
        let d = 2 * n - 1;
        let mut z1 = x1.z();
        let mut z2 = x2.z();
        let dist = phase_distance(self.h, &z1, &z2);
        if dist < self.tol.diag_margin {
            return Err(HomopodeError::Diagonal(dist));
        }
        let (axis, _, _) = self.axis_for(&z1, &z2)?;
        let mut f = self.residual_on_axis(&z1, &z2, axis)?;
        let mut fnorm = norm(&f);
        let mut history = vec![fnorm];
        let mut slow = 0;
        for _ in 0..self.tol.max_iter {
            if fnorm <= self.tol.solve_tol {
                break;
            }
            let jac = self.jacobian(&z1, &z2, axis, 1e-7, false)?;
            let svd = jac.svd(true, true);
            let smax = svd.singular_values.max();
            let delta = svd
                .solve(&DVector::from_column_slice(&f), 1e-10 * smax)
                .map_err(|_| HomopodeError::NotConverged {
                    iterations: history.len(),
                    history: history.clone(),
                })?;
            let mut step: Vec<f64> = delta.iter().map(|v| -v).collect();
            let sn = norm(&step);
            if sn > 0.5 {
                step.iter_mut().for_each(|v| *v *= 0.5 / sn);
            }
            let b1 = self.tangent_basis(&z1)?;
            let b2 = self.tangent_basis(&z2)?;
            let mut lam = 1.0;
            let mut accepted = false;
            while lam >= 1.0 / 64.0 {
                let u1: Vec<f64> = step[..d].iter().map(|v| v * lam).collect();
                let u2: Vec<f64> = step[d..].iter().map(|v| v * lam).collect();
                let n1 = self.moved(&z1, &b1, &u1)?;
                let n2 = self.moved(&z2, &b2, &u2)?;
                let pd = phase_distance(self.h, &n1, &n2);
                if pd < self.tol.diag_margin {
                    return Err(HomopodeError::Collapse(pd));
                }
                if let Ok(fr) = self.residual_on_axis(&n1, &n2, axis) {
                    let nr = norm(&fr);
                    if nr < fnorm {
                        if nr > 0.7 * fnorm {
                            slow += 1;
                        } else {
                            slow = 0;
                        }
                        z1 = n1;
                        z2 = n2;
                        f = fr;
                        fnorm = nr;
                        accepted = true;
                        break;
                    }
                }
                lam *= 0.5;
            }
            history.push(fnorm);
            if !accepted || (self.stagnation_abort && slow >= 3 && fnorm > 1e-6) {
                return Err(HomopodeError::NotConverged {
                    iterations: history.len() - 1,
                    history,
                });
            }
        }
        if !(fnorm <= self.tol.solve_tol) {
            return Err(HomopodeError::NotConverged {
                iterations: history.len() - 1,
                history,
            });
        }
        let l1 = level_point_at(self.h, &z1, &self.tol)?;
        let l2 = level_point_at(self.h, &z2, &self.tol)?;
        let flavor = classify_flavor(&l1.base_velocity, &l2.base_velocity, self.k)?;
        Ok(HomopodalPair {
            x1: l1,
            x2: l2,
            k: self.k,
            axis,
            flavor,
            residual_norm: fnorm,
            est_dim: None,
        })
    }

    /// Numerical rank of the central-difference Jacobian at a pair.
    pub fn local_dimension(&mut self, pair: &HomopodalPair) -> Result<DimEstimate, HomopodeError> {
        let n = self.h.n();
        let jac = self.jacobian(
            &pair.x1.z(),
            &pair.x2.z(),
            pair.axis,
            self.tol.fd_step,
            true,
        )?;
        let sv = jac.svd(false, false).singular_values;
        let mut s: Vec<f64> = sv.iter().copied().collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let smax = s.first().copied().unwrap_or(0.0);
        let thr = self.tol.rank_tol * smax;
        let rank = s.iter().filter(|v| **v > thr).count();
        let f = self.tol.ambiguity_factor;
        let ambiguous = s.iter().any(|v| *v > thr / f && *v < thr * f);
        Ok(DimEstimate {
            dim: 2 * (2 * n as i64 - 1) - rank as i64,
            rank,
            ambiguous,
            singular_values: s,
        })
    }

    /// Relative disagreement between `J(h/2)` and the Richardson extrapolation of `J(h)`, `J(h/2)`.
    pub fn richardson_error(
        &mut self,
        z1: &[f64],
        z2: &[f64],
        axis: usize,
        h: f64,
    ) -> Result<f64, HomopodeError> {
        let j1 = self.jacobian(z1, z2, axis, h, true)?;
        let j2 = self.jacobian(z1, z2, axis, h / 2.0, true)?;
        let r = (&j2 * 4.0 - &j1) / 3.0;
        Ok((&j2 - &r).norm() / r.norm())
    }
}

/// Residual of the pair `(x1, x2)` at order `k`.
pub fn homopodal_residual(
    h: &HamiltonianExpr,
    x1: &LevelPoint,
    x2: &LevelPoint,
    k: usize,
    tol: &Tolerances,
) -> Result<Vec<f64>, HomopodeError> {
    Solver::new(h, k, tol).residual(&x1.z(), &x2.z())
}

/// Solves for a homopodal pair from a seed and estimates its local dimension.
pub fn solve_homopodal(
    h: &HamiltonianExpr,
    x1: &LevelPoint,
    x2: &LevelPoint,
    k: usize,
    tol: &Tolerances,
) -> Result<HomopodalPair, HomopodeError> {
    let mut s = Solver::new(h, k, tol);
    let mut pair = s.solve(x1, x2)?;
    pair.est_dim = Some(s.local_dimension(&pair)?);
    Ok(pair)
}

/// Local dimension estimate of the homopodal set at a converged pair.
pub fn estimate_local_dimension(
    h: &HamiltonianExpr,
    pair: &HomopodalPair,
    tol: &Tolerances,
) -> Result<DimEstimate, HomopodeError> {
    Solver::new(h, pair.k, tol).local_dimension(pair)
}

/// Smallest singular values of the fiber Hessian restricted to `ker d_vH`, ascending,
/// scaled so that the threshold comparison is dimensionless.
pub fn restricted_fiber_hessian(
    h: &HamiltonianExpr,
    z: &[f64],
) -> Result<(Vec<f64>, f64), DomainError> {
    let n = h.n();
    let a = h.fiber_hessian(z)?;
    let (_, g) = h.gradient(z)?;
    let gv = &g[n..];
    let k = complement_basis(gv);
    let m = k.transpose() * &a * &k;
    let mut s: Vec<f64> = m
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    s.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let scale = a.svd(false, false).singular_values.max().max(norm(gv));
    Ok((s, scale))
}

/// Dimension of `ker d_v^2 H` inside the fiber tangent `ker d_vH`.
pub fn inflection_order(
    h: &HamiltonianExpr,
    x: &LevelPoint,
    tol: &Tolerances,
) -> Result<usize, DomainError> {
    let (s, scale) = restricted_fiber_hessian(h, &x.z())?;
    Ok(s.iter().filter(|v| **v <= tol.rank_tol * scale).count())
}

/// Certifies an explicit phase point as a level point without moving it.
pub fn level_point(
    h: &HamiltonianExpr,
    z: &[f64],
    tol: &Tolerances,
) -> Result<LevelPoint, Rejection> {
    level_point_at(h, z, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamsys::{certify_level_point, PhasePoint};
    use crate::library;

    fn lp(h: &HamiltonianExpr, q: &[f64], p: &[f64]) -> LevelPoint {
        certify_level_point(
            h,
            &PhasePoint::new(q.to_vec(), p.to_vec()),
            &Tolerances::default(),
        )
        .unwrap()
    }

    fn ray(h: &HamiltonianExpr, q: &[f64], w: &[f64]) -> LevelPoint {
        let nw = norm(w);
        let w: Vec<f64> = w.iter().map(|v| v / nw).collect();
        fiber_point_along_ray(h, q, &[0.0, 0.0], &w, &Tolerances::default()).unwrap()
    }

    #[test]
    fn flat_residuals() {
        let h = library::flat(2);
        let tol = Tolerances::default();
        let a = lp(&h, &[0.0, 0.0], &[1.0, 0.0]);
        let b = lp(&h, &[0.0, 0.0], &[-1.0, 0.0]);
        let r = homopodal_residual(&h, &a, &b, 1, &tol).unwrap();
        assert_eq!(r.len(), residual_len(2, 1));
        assert!(norm(&r) == 0.0);
        let c = lp(&h, &[0.0, 0.0], &[0.6, 0.8]);
        let r = homopodal_residual(&h, &a, &c, 1, &tol).unwrap();
        assert!(norm(&r) > 0.1);
        assert!(matches!(
            homopodal_residual(&h, &a, &a, 1, &tol),
            Err(HomopodeError::Diagonal(_))
        ));
    }

    #[test]
    fn residual_symmetric_under_swap() {
        let h = library::random_metric(2, 3);
        let tol = Tolerances::default();
        let a = ray(&h, &[0.1, 0.2], &[0.9, 0.3]);
        let b = ray(&h, &[0.15, 0.1], &[-0.5, 0.7]);
        let r1 = homopodal_residual(&h, &a, &b, 3, &tol).unwrap();
        let r2 = homopodal_residual(&h, &b, &a, 3, &tol).unwrap();
        assert!((norm(&r1) - norm(&r2)).abs() < 1e-14);
    }

    #[test]
    fn flat_antipode_solve() {
        let h = library::flat(2);
        let tol = Tolerances::default();
        let a = lp(&h, &[0.0, 0.0], &[1.0, 0.0]);
        let pn = norm(&[-0.99, 0.1]);
        let b = lp(&h, &[0.01, 0.0], &[-0.99 / pn, 0.1 / pn]);
        let pair = solve_homopodal(&h, &a, &b, 1, &tol).unwrap();
        assert_eq!(pair.flavor, Flavor::Anti);
        for i in 0..2 {
            assert!((pair.x1.point.q[i] - pair.x2.point.q[i]).abs() < 1e-9);
            assert!((pair.x1.point.p[i] + pair.x2.point.p[i]).abs() < 1e-8);
        }
        let d = pair.est_dim.unwrap();
        assert_eq!(d.dim, 3);
        assert!(!d.ambiguous);
    }

    #[test]
    fn flat_metric_is_degenerate_at_order_two() {
        let h = library::flat(2);
        let tol = Tolerances::default();
        let th = 0.4f64;
        let a = lp(&h, &[0.2, -0.1], &[th.cos(), th.sin()]);
        let b = lp(&h, &[0.2, -0.1], &[-th.cos(), -th.sin()]);
        let mut s = Solver::new(&h, 2, &tol);
        let pair = s.solve(&a, &b).unwrap();
        assert_eq!(s.local_dimension(&pair).unwrap().dim, 3);
    }

    #[test]
    fn flavors() {
        assert_eq!(
            classify_flavor(&[1.0, 0.0], &[-2.0, 0.0], 1).unwrap(),
            Flavor::Anti
        );
        assert_eq!(
            classify_flavor(&[1.0, 1.0], &[2.0, 2.0], 2).unwrap(),
            Flavor::Iso
        );
        assert!(classify_flavor(&[1.0, 0.0], &[0.0, 1.0], 1).is_err());
        assert_eq!(
            classify_flavor(&[1.0, 0.0], &[0.0, 1.0], 0).unwrap(),
            Flavor::Undefined
        );
    }

    #[test]
    fn seed_without_nearby_solution_does_not_converge() {
        // Unit-radius magnetic circles: reversed orbits curve the other way, so no
        // off-diagonal pair shares a 2-jet.
        let h = library::magnetic(1.0);
        let tol = Tolerances::default();
        let a = lp(&h, &[0.0, 0.0], &[1.0, 0.0]);
        let b = lp(&h, &[0.02, 0.0], &[-0.99, 0.1411]);
        match solve_homopodal(&h, &a, &b, 2, &tol) {
            Err(HomopodeError::NotConverged { history, .. }) => {
                assert!(history.windows(2).all(|w| w[1] <= w[0]));
                assert!(*history.last().unwrap() > 1e-3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inflection_order_round_and_quartic() {
        let tol = Tolerances::default();
        let h = library::flat(2);
        assert_eq!(
            inflection_order(&h, &lp(&h, &[0.0, 0.0], &[0.6, 0.8]), &tol).unwrap(),
            0
        );
        // Fiber p2 = p1^4 + 1 has a flat point (zero curvature) at p1 = 0.
        let hq = HamiltonianExpr::parse("p2 - p1^4 - 1", 2, "quartic").unwrap();
        let x = level_point(&hq, &[0.0, 0.0, 0.0, 1.0], &tol).unwrap();
        assert_eq!(inflection_order(&hq, &x, &tol).unwrap(), 1);
        let y = level_point(&hq, &[0.0, 0.0, 0.5, 1.0625], &tol).unwrap();
        assert_eq!(inflection_order(&hq, &y, &tol).unwrap(), 0);
    }

    #[test]
    fn jacobian_richardson_consistency() {
        let h = library::random_metric(2, 11);
        let tol = Tolerances::default();
        let a = ray(&h, &[0.1, 0.2], &[0.9, 0.3]);
        let b = ray(&h, &[0.15, 0.1], &[-0.5, 0.7]);
        let mut s = Solver::new(&h, 2, &tol);
        let err = s.richardson_error(&a.z(), &b.z(), 0, 1e-3).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
