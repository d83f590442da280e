use crate::expr::{plateau_sq, smooth_step_f64, DomainError, Expr, Tape};
use crate::flow::{base_polyline, complement_basis, integrate, FlowError, Orbit, SegmentIndex, Window};
use crate::hamsys::{dot, level_point_at, norm, HamiltonianExpr, Rejection};
use crate::mtps;
use crate::subjets::{isolation_radius, project_jet, tangency_order, Tangency};
use crate::tol::Tolerances;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerturbError {
    #[error("displacing a curve off another needs a base of dimension at least 3 (n = {0})")]
    Dimension(usize),
    #[error("intersection is not isolated: the projected jets agree to every computed order")]
    NotIsolated,
    #[error("target orbit does not pass through the intersection point (distance {0:e})")]
    MissesPoint(f64),
    #[error("no collision-free radius found for any sampled angle")]
    NoCollisionFreeRadius,
    #[error("blend window or tube overflows the valid region: {0}")]
    SupportOverflow(String),
    #[error("displacement Jacobian nearly singular (det {0:e})")]
    NearSingular(f64),
    #[error("every candidate radius failed verification: {0:?}")]
    AllRadiiFailed(Vec<(f64, String)>),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("domain error: {0}")]
    Domain(#[from] DomainError),
    #[error("level certification failed: {0}")]
    Rejected(#[from] Rejection),
}

/// Geometry of the tube and blend windows; lengths are in base units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanOptions {
    /// Largest candidate displacement.
    pub r0: f64,
    /// Along-curve window: full displacement for `|tau| <= eps_inner`, none beyond `eps_outer`.
    pub eps_inner: f64,
    pub eps_outer: f64,
    /// Transverse tube: identity beyond `rho_outer` from the tube axis.
    pub rho_inner: f64,
    pub rho_outer: f64,
    /// Base step for the coarse angle scan.
    pub coarse_step: f64,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions {
            r0: 0.05,
            eps_inner: 0.25,
            eps_outer: 0.5,
            rho_inner: 0.1,
            rho_outer: 0.3,
            coarse_step: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleScore {
    pub theta: f64,
    /// Candidate radii whose displaced curve comes within `clearance_min` of a bystander.
    pub blocked: usize,
    /// Smallest bystander distance divided by the radius, over candidate radii.
    pub clearance: f64,
}

/// Tube, angle and radius sequence for displacing the target orbit at `q_star`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolutionPlan {
    pub n: usize,
    pub q_star: Vec<f64>,
    pub t_star: f64,
    pub tangent: Vec<f64>,
    pub normals: [Vec<f64>; 2],
    pub theta: f64,
    pub nu: Vec<f64>,
    pub radii: Vec<f64>,
    pub angle_scores: Vec<AngleScore>,
    pub p_ref: Vec<f64>,
    pub momentum_inner: f64,
    pub momentum_outer: f64,
    /// Tangency order of each bystander passing through `q_star` (`None` when it stays away).
    pub tangency: Vec<Option<i64>>,
    pub isolation: Option<f64>,
    pub opts: PlanOptions,
}

/// Time on `o` whose base point is closest to `q`, and that distance.
pub fn closest_time(o: &Orbit, q: &[f64]) -> (f64, f64) {
    let n = o.n();
    let d = |t: f64| -> f64 {
        let b = o.base_at(t).unwrap();
        (0..n).map(|i| (b[i] - q[i]).powi(2)).sum::<f64>()
    };
    let (t0, t1) = o.window;
    let m = 4000;
    let mut best = (t0, f64::INFINITY);
    for i in 0..=m {
        let t = t0 + (t1 - t0) * i as f64 / m as f64;
        let v = d(t);
        if v < best.1 {
            best = (t, v);
        }
    }
    let h = (t1 - t0).abs() / m as f64;
    let (lo, hi) = (t0.min(t1), t0.max(t1));
    let (mut a, mut b) = ((best.0 - h).max(lo), (best.0 + h).min(hi));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..100 {
        let c = b - g * (b - a);
        let e = a + g * (b - a);
        if d(c) < d(e) {
            b = e;
        } else {
            a = c;
        }
    }
    let t = 0.5 * (a + b);
    (t, d(t).sqrt())
}

fn plateau_f64(s: f64, inner: f64, outer: f64) -> f64 {
    let (i2, o2) = (inner * inner, outer * outer);
    smooth_step_f64((o2 - s) / (o2 - i2))
}

impl ResolutionPlan {
    fn tau(&self, x: &[f64]) -> f64 {
        (0..self.n)
            .map(|i| (x[i] - self.q_star[i]) * self.tangent[i])
            .sum()
    }

    /// `beta(tau)`: 1 on the inner window, 0 beyond the outer one.
    fn beta(&self, tau: f64) -> f64 {
        plateau_f64(tau * tau, self.opts.eps_inner, self.opts.eps_outer)
    }

    /// Displaced curve `delta_r = c + r beta(tau(c)) nu` along the target's base curve.
    pub fn delta(&self, c: &[f64], r: f64, nu: &[f64]) -> Vec<f64> {
        let b = self.beta(self.tau(c));
        c.iter().zip(nu).map(|(x, v)| x + r * b * v).collect()
    }
}

/// Builds the tube around the target at `q_star`, scores `angle_samples` displacement angles
/// against the bystanders and extracts the collision-free radii `r0 2^-k`.
pub fn plan_resolution(
    h: &HamiltonianExpr,
    target: &Orbit,
    bystanders: &[Orbit],
    q_star: &[f64],
    opts: &PlanOptions,
    tol: &Tolerances,
) -> Result<ResolutionPlan, PerturbError> {
    let n = h.n();
    if n < 3 {
        return Err(PerturbError::Dimension(n));
    }
    if !(opts.eps_inner < opts.eps_outer
        && opts.rho_inner < opts.rho_outer
        && 2.0 * opts.r0 <= opts.rho_inner)
    {
        return Err(PerturbError::SupportOverflow(
            "need eps_inner < eps_outer, rho_inner < rho_outer, 2 r0 <= rho_inner".into(),
        ));
    }
    let (t_star, dist) = closest_time(target, q_star);
    if dist > 1e-6 {
        return Err(PerturbError::MissesPoint(dist));
    }
    let z_star = target.eval(t_star).unwrap();
    let x_star = level_point_at(h, &z_star, tol)?;
    let v = &x_star.base_velocity;
    let tangent: Vec<f64> = v.iter().map(|x| x / norm(v)).collect();
    let basis = complement_basis(&tangent);
    let normals = [
        basis.column(0).iter().copied().collect::<Vec<f64>>(),
        basis.column(1).iter().copied().collect::<Vec<f64>>(),
    ];
    let p_ref = x_star.point.p.clone();

    // Order of contact with each bystander through q_star.
    let mut tangency = Vec::new();
    let mut isolation: Option<f64> = None;
    for b in bystanders {
        let (tb, db) = closest_time(b, q_star);
        if db > 1e-6 {
            tangency.push(None);
            continue;
        }
        let xb = level_point_at(h, &b.eval(tb).unwrap(), tol)?;
        let vb = &xb.base_velocity;
        let cosang = dot(&tangent, vb) / norm(vb);
        if (1.0 - cosang.abs()) > 1e-8 {
            tangency.push(Some(1));
            continue;
        }
        let j1 = project_jet(h, &x_star, tol.k_max, tol.axis_margin)
            .map_err(|_| PerturbError::NotIsolated)?;
        let j2 = project_jet(h, &xb, tol.k_max, tol.axis_margin)
            .map_err(|_| PerturbError::NotIsolated)?;
        match tangency_order(&j1, &j2, tol.k_max, tol.jet_tol, tol.axis_margin)
            .map_err(|_| PerturbError::NotIsolated)?
        {
            Tangency::Full => return Err(PerturbError::NotIsolated),
            t => {
                tangency.push(t.code());
                if let (Tangency::Order(r), true) = (t, j1.axis == j2.axis) {
                    if let Ok(iso) = isolation_radius(&j1, &j2, r, 1.0, opts.eps_outer) {
                        isolation =
                            Some(isolation.map_or(iso.epsilon, |e: f64| e.min(iso.epsilon)));
                    }
                }
            }
        }
    }

    let reach = opts.eps_outer + 2.0 * opts.rho_outer;
    let mut plan = ResolutionPlan {
        n,
        q_star: q_star.to_vec(),
        t_star,
        tangent,
        normals,
        theta: 0.0,
        nu: Vec::new(),
        radii: Vec::new(),
        angle_scores: Vec::new(),
        p_ref,
        momentum_inner: 0.0,
        momentum_outer: 0.0,
        tangency,
        isolation,
        opts: opts.clone(),
    };

    // Bystander phase points near the tube fix the momentum cutoff.
    let mut p_gap = f64::INFINITY;
    for b in bystanders {
        for t in b.times_by_arclength(opts.coarse_step) {
            let z = b.eval(t).unwrap();
            let dq = norm(
                &z[..n]
                    .iter()
                    .zip(q_star)
                    .map(|(a, c)| a - c)
                    .collect::<Vec<_>>(),
            );
            if dq <= reach {
                p_gap = p_gap.min(norm(
                    &z[n..]
                        .iter()
                        .zip(&plan.p_ref)
                        .map(|(a, c)| a - c)
                        .collect::<Vec<_>>(),
                ));
            }
        }
    }
    if p_gap < 1e-3 {
        return Err(PerturbError::SupportOverflow(format!(
            "a bystander shares the target momentum near the tube (gap {p_gap:e})"
        )));
    }
    let p_gap = p_gap.min(1.0);
    plan.momentum_inner = 0.25 * p_gap;
    plan.momentum_outer = 0.5 * p_gap;

    let target_line = base_polyline(target, opts.coarse_step, q_star, opts.eps_outer * 1.2);
    // Clearance scores saturate at `cap`; only near misses matter.
    let cap = 2.0 * opts.r0;
    let coarse = SegmentIndex::new(bystanders, opts.coarse_step, q_star, reach, cap);
    let candidates: Vec<f64> = (0..=tol.max_radius_halvings)
        .map(|k| opts.r0 * 0.5f64.powi(k as i32))
        .filter(|r| *r >= tol.clearance_min)
        .collect();
    let mut best: Option<(usize, f64, f64)> = None;
    for a in 0..tol.angle_samples {
        let theta = TAU * a as f64 / tol.angle_samples as f64;
        let nu: Vec<f64> = (0..n)
            .map(|i| theta.cos() * plan.normals[0][i] + theta.sin() * plan.normals[1][i])
            .collect();
        let mut blocked = 0;
        let mut clearance = f64::INFINITY;
        for &r in &candidates {
            let mut dmin = f64::INFINITY;
            for c in &target_line {
                if plan.beta(plan.tau(c)) == 0.0 {
                    continue;
                }
                dmin = dmin.min(coarse.distance(&plan.delta(c, r, &nu), cap));
            }
            if dmin < tol.clearance_min {
                blocked += 1;
            }
            clearance = clearance.min(dmin / r);
        }
        plan.angle_scores.push(AngleScore {
            theta,
            blocked,
            clearance,
        });
        let better = match best {
            None => true,
            Some((bb, bc, _)) => blocked < bb || (blocked == bb && clearance > bc + 1e-12),
        };
        if better {
            best = Some((blocked, clearance, theta));
        }
    }
    let (_, _, theta) = best.unwrap();
    plan.theta = theta;
    plan.nu = (0..n)
        .map(|i| theta.cos() * plan.normals[0][i] + theta.sin() * plan.normals[1][i])
        .collect();

    // Radii verified against the bystanders at the fine sweep step.
    let fine = tol.clearance_min / 4.0;
    let fine_target = base_polyline(target, fine, q_star, opts.eps_outer * 1.2);
    let fine_index = SegmentIndex::new(bystanders, fine, q_star, reach, 2.0 * tol.clearance_min);
    for &r in &candidates {
        let ok = fine_target
            .iter()
            .filter(|c| plan.beta(plan.tau(c)) > 0.0)
            .all(|c| {
                let d = plan.delta(c, r, &plan.nu);
                fine_index.distance(&d, tol.clearance_min) >= tol.clearance_min
            });
        if ok {
            plan.radii.push(r);
        }
    }
    if plan.radii.is_empty() {
        return Err(PerturbError::NoCollisionFreeRadius);
    }
    Ok(plan)
}

/// `Phi_r` through its explicit inverse `G(x) = x - r beta(tau) chi(d_perp^2) nu`.
#[derive(Clone, Debug)]
pub struct Displacement {
    pub plan: ResolutionPlan,
    pub r: f64,
    /// Components of `G` over base variables.
    pub inverse: Vec<Expr>,
    /// Scalar bump `beta chi` whose multiple displaces along `nu`.
    bump: Expr,
}

fn tau_expr(plan: &ResolutionPlan) -> Expr {
    Expr::sum(
        &(0..plan.n)
            .map(|i| {
                Expr::var(i)
                    .sub(&Expr::constant(plan.q_star[i]))
                    .scale(plan.tangent[i])
            })
            .collect::<Vec<_>>(),
    )
}

fn perp_sq_expr(plan: &ResolutionPlan) -> Expr {
    let tau = tau_expr(plan);
    let r2 = Expr::sum(
        &(0..plan.n)
            .map(|i| Expr::var(i).sub(&Expr::constant(plan.q_star[i])).square())
            .collect::<Vec<_>>(),
    );
    r2.sub(&tau.square())
}

/// The displacement for radius `r` (`r = 0` gives the identity).
pub fn build_displacement(plan: &ResolutionPlan, r: f64) -> Result<Displacement, PerturbError> {
    let o = &plan.opts;
    if r > 0.5 * o.rho_inner {
        return Err(PerturbError::SupportOverflow(format!(
            "radius {r} exceeds half the inner tube radius {}",
            o.rho_inner
        )));
    }
    let tau = tau_expr(plan);
    let bump = plateau_sq(&tau.square(), o.eps_inner, o.eps_outer).mul(&plateau_sq(
        &perp_sq_expr(plan),
        o.rho_inner,
        o.rho_outer,
    ));
    let inverse = (0..plan.n)
        .map(|i| Expr::var(i).sub(&bump.scale(r * plan.nu[i])))
        .collect();
    let d = Displacement {
        plan: plan.clone(),
        r,
        inverse,
        bump,
    };
    // det DG = 1 - r d_nu(bump); sample its minimum across the tube.
    let grad: Vec<Expr> = (0..plan.n).map(|i| d.bump.diff(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = f64::INFINITY;
    for _ in 0..400 {
        let t = rng.gen_range(-o.eps_outer..o.eps_outer);
        let s = rng.gen_range(0.0..o.rho_outer);
        let a = rng.gen_range(0.0..TAU);
        let x: Vec<f64> = (0..plan.n)
            .map(|i| {
                plan.q_star[i]
                    + t * plan.tangent[i]
                    + s * (a.cos() * plan.normals[0][i] + a.sin() * plan.normals[1][i])
            })
            .collect();
        let dn: f64 = grad
            .iter()
            .zip(&plan.nu)
            .map(|(g, v)| g.eval(&x).unwrap() * v)
            .sum();
        worst = worst.min(1.0 - r * dn);
    }
    if worst < 0.1 {
        return Err(PerturbError::NearSingular(worst));
    }
    Ok(d)
}

impl Displacement {
    /// `G = Phi_r^{-1}` at a base point.
    pub fn apply_inverse(&self, x: &[f64]) -> Vec<f64> {
        let b = self.bump.eval(x).unwrap();
        x.iter()
            .zip(&self.plan.nu)
            .map(|(a, v)| a - self.r * b * v)
            .collect()
    }

    /// `Phi_r(y)`: since `tau` is constant along `nu`, solve `s = r bump(y + s nu)` by fixed point.
    pub fn apply(&self, y: &[f64]) -> Vec<f64> {
        let mut s = 0.0;
        for _ in 0..200 {
            let x: Vec<f64> = y
                .iter()
                .zip(&self.plan.nu)
                .map(|(a, v)| a + s * v)
                .collect();
            let ns = self.r * self.bump.eval(&x).unwrap();
            if (ns - s).abs() <= 1e-16 * (1.0 + s.abs()) {
                s = ns;
                break;
            }
            s = ns;
        }
        y.iter()
            .zip(&self.plan.nu)
            .map(|(a, v)| a + s * v)
            .collect()
    }
}

/// `H_r = chi Htilde + (1 - chi) H` with `Htilde(Q, P) = H(G(Q), DG(Q)^{-T} P)`.
#[derive(Clone, Debug)]
pub struct PerturbedHamiltonian {
    pub h_r: HamiltonianExpr,
    pub r: f64,
    pub cutoff: Expr,
    pub lifted: Expr,
}

/// Solves `A x = b` symbolically by elimination without pivoting (`A` near the identity).
fn solve_symbolic(mut a: Vec<Vec<Expr>>, mut b: Vec<Expr>) -> Vec<Expr> {
    let n = b.len();
    for k in 0..n {
        let piv = a[k][k].clone();
        for i in k + 1..n {
            if a[i][k].is_const(0.0) {
                continue;
            }
            let f = a[i][k].div(&piv);
            for j in k..n {
                a[i][j] = a[i][j].sub(&f.mul(&a[k][j]));
            }
            b[i] = b[i].sub(&f.mul(&b[k]));
        }
    }
    let mut x = vec![Expr::zero(); n];
    for i in (0..n).rev() {
        let mut s = b[i].clone();
        for j in i + 1..n {
            s = s.sub(&a[i][j].mul(&x[j]));
        }
        x[i] = s.div(&a[i][i]);
    }
    x
}

/// Pulls `H` back by the cotangent lift of `Phi_r` and blends with a phase-space cutoff
/// around the target's lifted germ.
pub fn pullback_hamiltonian(h: &HamiltonianExpr, d: &Displacement) -> PerturbedHamiltonian {
    let n = h.n();
    if d.r == 0.0 {
        return PerturbedHamiltonian {
            h_r: h.clone(),
            r: 0.0,
            cutoff: Expr::zero(),
            lifted: h.expr().clone(),
        };
    }
    let plan = &d.plan;
    let o = &plan.opts;
    let dg_t: Vec<Vec<Expr>> = (0..n)
        .map(|i| (0..n).map(|j| d.inverse[j].diff(i)).collect())
        .collect();
    let pvars: Vec<Expr> = (0..n).map(|i| Expr::var(n + i)).collect();
    let pulled = solve_symbolic(dg_t, pvars);
    let mut sub = d.inverse.clone();
    sub.extend(pulled);
    let lifted = h.expr().substitute(&sub);
    let tau = tau_expr(plan);
    let dp2 = Expr::sum(
        &(0..n)
            .map(|i| {
                Expr::var(n + i)
                    .sub(&Expr::constant(plan.p_ref[i]))
                    .square()
            })
            .collect::<Vec<_>>(),
    );
    let cutoff = plateau_sq(&tau.square(), o.eps_outer, 1.5 * o.eps_outer)
        .mul(&plateau_sq(
            &perp_sq_expr(plan),
            o.rho_outer,
            1.5 * o.rho_outer,
        ))
        .mul(&plateau_sq(&dp2, plan.momentum_inner, plan.momentum_outer));
    let e = cutoff
        .mul(&lifted)
        .add(&Expr::one().sub(&cutoff).mul(h.expr()));
    let h_r = HamiltonianExpr::new(e, n, format!("{}-resolved", h.name()))
        .unwrap()
        .with_periods(h.periods().to_vec());
    PerturbedHamiltonian {
        h_r,
        r: d.r,
        cutoff,
        lifted,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepStats {
    pub pairs: usize,
    pub target_points: usize,
    pub contacts: usize,
    pub min_distance: f64,
}

/// Sampled `C^0`, `C^1`, `C^2` sizes of `H_r - H` over the perturbation region.
pub fn c_distances(
    h: &HamiltonianExpr,
    ph: &PerturbedHamiltonian,
    target: &Orbit,
    samples: usize,
    seed: u64,
) -> Result<[f64; 3], PerturbError> {
    let n = h.n();
    let diff = ph.h_r.expr().sub(h.expr());
    let tape = Tape::compile(&[diff], 2 * n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t0, t1) = target.window;
    let mut out = [0.0f64; 3];
    for _ in 0..samples {
        let mut z = target.eval(rng.gen_range(t0.min(t1)..t0.max(t1))).unwrap();
        for v in z.iter_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
        let d = mtps::derivatives(&tape, &z, 2)?;
        out[0] = out[0].max(d.c[0].abs());
        let mut g: f64 = 0.0;
        let mut hs: f64 = 0.0;
        let mut alpha = vec![0u8; 2 * n];
        for i in 0..2 * n {
            alpha[i] += 1;
            g = g.max(d.derivative(&alpha).abs());
            for j in i..2 * n {
                alpha[j] += 1;
                hs = hs.max(d.derivative(&alpha).abs());
                alpha[j] -= 1;
            }
            alpha[i] -= 1;
        }
        out[1] = out[1].max(g);
        out[2] = out[2].max(hs);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolutionReport {
    pub q_star: Vec<f64>,
    pub theta: Option<f64>,
    pub r_selected: Option<f64>,
    pub radius_index: Option<usize>,
    /// Smallest target-to-bystander base distance near `q_star`, saturating at `2 r0`.
    pub clearance: f64,
    pub c0_dist: f64,
    pub c1_dist: f64,
    pub c2_dist_estimate: f64,
    pub image_error: f64,
    pub bystander_change: f64,
    pub sweep_stats: SweepStats,
    pub attempts: Vec<(f64, String)>,
}

pub struct Resolution {
    pub hamiltonian: HamiltonianExpr,
    pub target: Orbit,
    pub bystanders: Vec<Orbit>,
    pub plan: Option<ResolutionPlan>,
    pub report: ResolutionReport,
}

/// Contacts closer than `clearance_min` between the target and the others near `center`;
/// the reported minimum distance saturates at `cap`.
fn sweep(
    target: &Orbit,
    others: &[Orbit],
    center: &[f64],
    reach: f64,
    cap: f64,
    tol: &Tolerances,
) -> SweepStats {
    let ds = tol.clearance_min / 4.0;
    let tl = base_polyline(target, ds, center, reach);
    let index = SegmentIndex::new(others, ds, center, reach, cap);
    let mut stats = SweepStats {
        pairs: others.len(),
        target_points: tl.len(),
        contacts: 0,
        min_distance: cap,
    };
    for x in &tl {
        let d = index.distance(x, cap);
        stats.min_distance = stats.min_distance.min(d);
        if d < tol.clearance_min {
            stats.contacts += 1;
        }
    }
    stats
}

fn reintegrate(
    h: &HamiltonianExpr,
    o: &Orbit,
    max_step: f64,
    tol: &Tolerances,
) -> Result<Orbit, PerturbError> {
    let x0 = level_point_at(h, &o.samples[0].1.z(), tol)?;
    let tol = Tolerances {
        max_step: tol.max_step.min(max_step),
        ..tol.clone()
    };
    Ok(integrate(
        h,
        &x0,
        Window::time(o.window.0, o.window.1),
        &tol,
    )?)
}

fn max_orbit_gap(a: &Orbit, b: &Orbit, samples: usize) -> f64 {
    let (t0, t1) = a.window;
    (0..=samples)
        .map(|i| {
            let t = t0 + (t1 - t0) * i as f64 / samples as f64;
            let (za, zb) = (a.eval(t).unwrap(), b.eval(t).unwrap());
            za.iter()
                .zip(&zb)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// Plans, displaces and verifies radii `r0 2^-k` in order until one passes.
pub fn resolve_intersection(
    h: &HamiltonianExpr,
    target: &Orbit,
    bystanders: &[Orbit],
    q_star: &[f64],
    opts: &PlanOptions,
    tol: &Tolerances,
) -> Result<Resolution, PerturbError> {
    let n = h.n();
    if n < 3 {
        return Err(PerturbError::Dimension(n));
    }
    let reach = opts.eps_outer + 2.0 * opts.rho_outer;
    let cap = (2.0 * opts.r0).max(2.0 * tol.clearance_min);
    let initial = sweep(target, bystanders, q_star, reach, cap, tol);
    if initial.contacts == 0 {
        return Ok(Resolution {
            hamiltonian: h.clone(),
            target: target.clone(),
            bystanders: bystanders.to_vec(),
            plan: None,
            report: ResolutionReport {
                q_star: q_star.to_vec(),
                theta: None,
                r_selected: None,
                radius_index: None,
                clearance: initial.min_distance,
                c0_dist: 0.0,
                c1_dist: 0.0,
                c2_dist_estimate: 0.0,
                image_error: 0.0,
                bystander_change: 0.0,
                sweep_stats: initial,
                attempts: Vec::new(),
            },
        });
    }
    let plan = plan_resolution(h, target, bystanders, q_star, opts, tol)?;
    let mut attempts = Vec::new();
    // Flow steps must resolve the narrowest transition layer of the cutoffs.
    let max_step = 0.25
        * (opts.eps_outer - opts.eps_inner)
            .min(opts.rho_outer - opts.rho_inner)
            .min(plan.momentum_outer - plan.momentum_inner);
    for (idx, &r) in plan.radii.iter().enumerate() {
        let d = match build_displacement(&plan, r) {
            Ok(d) => d,
            Err(e) => {
                attempts.push((r, e.to_string()));
                continue;
            }
        };
        let ph = pullback_hamiltonian(h, &d);
        let new_target = match reintegrate(&ph.h_r, target, max_step, tol) {
            Ok(o) => o,
            Err(e) => {
                attempts.push((r, e.to_string()));
                continue;
            }
        };
        let new_bys: Result<Vec<Orbit>, PerturbError> = bystanders
            .iter()
            .map(|b| reintegrate(&ph.h_r, b, max_step, tol))
            .collect();
        let new_bys = match new_bys {
            Ok(v) => v,
            Err(e) => {
                attempts.push((r, e.to_string()));
                continue;
            }
        };
        let bystander_change = bystanders
            .iter()
            .zip(&new_bys)
            .map(|(a, b)| max_orbit_gap(a, b, 2000))
            .fold(0.0, f64::max);
        // Image property: the new projected target is Phi_r of the old one at equal times.
        let mut image_error: f64 = 0.0;
        let (t0, t1) = target.window;
        for i in 0..=2000 {
            let t = t0 + (t1 - t0) * i as f64 / 2000.0;
            let c = target.base_at(t).unwrap();
            let want = plan.delta(&c, r, &plan.nu);
            let got = new_target.base_at(t).unwrap();
            image_error = image_error.max(norm(
                &want
                    .iter()
                    .zip(&got)
                    .map(|(a, b)| a - b)
                    .collect::<Vec<_>>(),
            ));
        }
        let stats = sweep(&new_target, &new_bys, q_star, reach, cap, tol);
        if stats.contacts > 0 || image_error > 1e-6 || bystander_change > 1e-9 {
            attempts.push((
                r,
                format!(
                    "contacts {} image error {image_error:e} bystander change {bystander_change:e}",
                    stats.contacts
                ),
            ));
            continue;
        }
        let c = c_distances(h, &ph, target, 200, 5)?;
        attempts.push((r, "passed".into()));
        return Ok(Resolution {
            hamiltonian: ph.h_r,
            target: new_target,
            bystanders: new_bys,
            report: ResolutionReport {
                q_star: q_star.to_vec(),
                theta: Some(plan.theta),
                r_selected: Some(r),
                radius_index: Some(idx),
                clearance: stats.min_distance,
                c0_dist: c[0],
                c1_dist: c[1],
                c2_dist_estimate: c[2],
                image_error,
                bystander_change,
                sweep_stats: stats,
                attempts,
            },
            plan: Some(plan),
        });
    }
    Err(PerturbError::AllRadiiFailed(attempts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::library;

    fn line(h: &HamiltonianExpr, q: &[f64], p: &[f64], len: f64, tol: &Tolerances) -> Orbit {
        let mut z = q.to_vec();
        z.extend_from_slice(p);
        let x = level_point_at(h, &z, tol).unwrap();
        integrate(h, &x, Window::time(0.0, len), tol).unwrap()
    }

    #[test]
    fn planar_base_is_rejected() {
        let tol = Tolerances::default();
        let h = library::flat(2);
        let a = line(&h, &[-1.0, 0.0], &[1.0, 0.0], 2.0, &tol);
        let b = line(&h, &[0.0, -1.0], &[0.0, 1.0], 2.0, &tol);
        assert_eq!(
            plan_resolution(&h, &a, &[b], &[0.0, 0.0], &PlanOptions::default(), &tol).unwrap_err(),
            PerturbError::Dimension(2)
        );
    }

    #[test]
    fn zero_radius_is_identity() {
        let tol = Tolerances::default();
        let h = library::flat(3);
        let a = line(&h, &[-1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], 2.0, &tol);
        let b = line(&h, &[0.0, -1.0, 0.0], &[0.0, 1.0, 0.0], 2.0, &tol);
        let plan = plan_resolution(&h, &a, &[b], &[0.0; 3], &PlanOptions::default(), &tol).unwrap();
        let d = build_displacement(&plan, 0.0).unwrap();
        assert_eq!(d.apply(&[0.1, 0.02, -0.03]), vec![0.1, 0.02, -0.03]);
        assert_eq!(pullback_hamiltonian(&h, &d).h_r.source(), h.source());
    }

    #[test]
    fn displacement_inverts_and_has_compact_support() {
        let tol = Tolerances::default();
        let h = library::flat(3);
        let a = line(&h, &[-1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], 2.0, &tol);
        let b = line(&h, &[0.0, -1.0, 0.0], &[0.0, 1.0, 0.0], 2.0, &tol);
        let plan = plan_resolution(&h, &a, &[b], &[0.0; 3], &PlanOptions::default(), &tol).unwrap();
        // Displacing along the other line never separates them.
        assert!((plan.nu[1]).abs() < 1e-12);
        let d = build_displacement(&plan, plan.radii[0]).unwrap();
        for x in [[0.0, 0.0, 0.0], [0.3, 0.05, 0.0], [-0.45, 0.0, 0.1]] {
            let y = d.apply(&x);
            let back = d.apply_inverse(&y);
            assert!(norm(&back.iter().zip(&x).map(|(a, b)| a - b).collect::<Vec<_>>()) < 1e-12);
        }
        for x in [[0.8, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, -0.4]] {
            assert_eq!(d.apply(&x), x.to_vec());
        }
        let c = a.base_at(1.0).unwrap();
        let err = norm(
            &d.apply(&c)
                .iter()
                .zip(plan.delta(&c, d.r, &plan.nu))
                .map(|(u, v)| u - v)
                .collect::<Vec<_>>(),
        );
        assert!(err < 1e-9);
    }

    #[test]
    fn cutoff_is_exact_outside_support() {
        let tol = Tolerances::default();
        let h = library::flat(3);
        let a = line(&h, &[-1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], 2.0, &tol);
        let b = line(&h, &[0.0, -1.0, 0.0], &[0.0, 1.0, 0.0], 2.0, &tol);
        let plan = plan_resolution(&h, &a, &[b], &[0.0; 3], &PlanOptions::default(), &tol).unwrap();
        let ph = pullback_hamiltonian(&h, &build_displacement(&plan, plan.radii[0]).unwrap());
        for z in [
            [0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            [2.0, 0.0, 0.0, 1.0, 0.0, 0.0],
            [0.0, 1.0, 1.0, 0.6, 0.8, 0.0],
        ] {
            assert_eq!(
                ph.h_r.value(&z).unwrap().to_bits(),
                h.value(&z).unwrap().to_bits()
            );
            assert_eq!(ph.h_r.field(&z).unwrap(), h.field(&z).unwrap());
        }
    }

    #[test]
    fn distances_shrink_with_radius() {
        let tol = Tolerances::default();
        let h = library::flat(3);
        let a = line(&h, &[-1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], 2.0, &tol);
        let b = line(&h, &[0.0, -1.0, 0.0], &[0.0, 1.0, 0.0], 2.0, &tol);
        let plan = plan_resolution(&h, &a, &[b], &[0.0; 3], &PlanOptions::default(), &tol).unwrap();
        let mut last = [f64::INFINITY; 3];
        for &r in plan.radii.iter().take(3) {
            let c = c_distances(
                &h,
                &pullback_hamiltonian(&h, &build_displacement(&plan, r).unwrap()),
                &a,
                100,
                1,
            )
            .unwrap();
            assert!(c[0] < last[0] && c[1] < last[1]);
            last = c;
        }
    }

    #[test]
    fn crossing_lines_are_separated() {
        let tol = Tolerances::default();
        let h = library::flat(3);
        let a = line(&h, &[-1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], 2.0, &tol);
        let b = line(&h, &[0.0, -1.0, 0.0], &[0.0, 1.0, 0.0], 2.0, &tol);
        let res = resolve_intersection(
            &h,
            &a,
            &[b.clone()],
            &[0.0; 3],
            &PlanOptions::default(),
            &tol,
        )
        .unwrap();
        let r = res.report.r_selected.unwrap();
        assert!(
            res.report.clearance >= tol.clearance_min.max(0.5 * r),
            "{:?}",
            res.report
        );
        assert!(res.report.image_error <= 1e-6);
        assert!(res.report.bystander_change <= 1e-9);
        // Outside the window the target is untouched.
        let z = res.target.eval(0.2).unwrap();
        assert!((z[1].abs() + z[2].abs()) < 1e-9);
    }

    #[test]
    fn disjoint_orbits_are_left_alone() {
        let tol = Tolerances::default();
        let h = library::flat(3);
        let a = line(&h, &[-1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], 2.0, &tol);
        let b = line(&h, &[0.0, -1.0, 0.5], &[0.0, 1.0, 0.0], 2.0, &tol);
        let res =
            resolve_intersection(&h, &a, &[b], &[0.0; 3], &PlanOptions::default(), &tol).unwrap();
        assert!(res.plan.is_none());
        assert_eq!(res.hamiltonian.source(), h.source());
    }
}
