//! Radial charts on the energy level and the local contact picture: the form
//! `alpha = (p - P) dq` restricted to the level, its Reeb field, contact
//! Hamiltonian fields, and the construction of a contact Hamiltonian whose
//! orbit has a prescribed projected jet.

use crate::expr::{DomainError, Expr, Tape, TaylorWork};
use crate::flow::complement_basis;
use crate::hamsys::{dot, norm, HamiltonianExpr, LevelPoint};
use crate::homopode::fiber_point_along_ray;
use crate::subjets::{CurveJet, SubjetError};
use crate::tol::Tolerances;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContactError {
    #[error("ray tangency: |alpha(X_H)| = {0:e} at a sampled point")]
    RayTangency(f64),
    #[error("a sampled ray meets the level {0} times")]
    MultipleCrossing(usize),
    #[error("a sampled ray misses the level")]
    RayMiss,
    #[error("singular linear system")]
    Singular,
    #[error("jet is not transverse to the contact structure (alpha(psi') = {0:e})")]
    NotTransverse(f64),
    #[error("constructed h drops to {min:e} (< {h_min}) on the validity box")]
    NegativeH { min: f64, h_min: f64 },
    #[error("radial function does not parametrize the level (residual {0:e})")]
    BadRadius(f64),
    #[error("chart has no explicit radial function")]
    NoRadius,
    #[error("invalid chart: {0}")]
    Invalid(String),
    #[error("domain error: {0}")]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Subjet(#[from] SubjetError),
}

/// `omega(u, v) = u_p . v_q - u_q . v_p`.
pub fn omega(u: &[f64], v: &[f64]) -> f64 {
    let n = u.len() / 2;
    (0..n).map(|i| u[n + i] * v[i] - u[i] * v[n + i]).sum()
}

/// Covector `iota_u omega` in `(q, p)` slots.
fn iota_omega(u: &[f64]) -> Vec<f64> {
    let n = u.len() / 2;
    let mut c = u[n..].to_vec();
    c.extend(u[..n].iter().map(|v| -v));
    c
}

fn mat_cols(cols: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(cols[0].len(), cols.len(), |i, j| cols[j][i])
}

/// Region of the level swept by rays `P + r w` with base point in a box and `w` in a cone.
#[derive(Clone, Debug)]
pub struct RadialChart {
    h: HamiltonianExpr,
    pub center: Vec<f64>,
    pub q_lo: Vec<f64>,
    pub q_hi: Vec<f64>,
    pub direction: Vec<f64>,
    pub cone: f64,
    /// Optional explicit `r(q, w)` over `2n` variables (q first, then w).
    pub radius: Option<Expr>,
    pub min_transversality: f64,
    pub samples: usize,
}

fn cone_direction(rng: &mut ChaCha8Rng, axis: &[f64], cone: f64) -> Vec<f64> {
    let n = axis.len();
    let basis = complement_basis(axis);
    let mut t: Vec<f64> = (0..n - 1).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let tn = norm(&t).max(1e-300);
    let ang = cone * rng.gen::<f64>();
    t.iter_mut().for_each(|v| *v *= ang.tan() / tn);
    let mut w = axis.to_vec();
    for i in 0..n {
        for (j, tj) in t.iter().enumerate() {
            w[i] += basis[(i, j)] * tj;
        }
    }
    let wn = norm(&w);
    w.iter().map(|v| v / wn).collect()
}

/// Builds and validates a radial chart around the level point `x0`.
pub fn build_radial_chart(
    h: &HamiltonianExpr,
    x0: &LevelPoint,
    center: &[f64],
    q_half_width: f64,
    cone: f64,
    tol: &Tolerances,
    seed: u64,
) -> Result<RadialChart, ContactError> {
    let n = h.n();
    let d: Vec<f64> = (0..n).map(|i| x0.point.p[i] - center[i]).collect();
    let dn = norm(&d);
    let hp = &x0.base_velocity;
    if dn == 0.0 {
        return Err(ContactError::Invalid(
            "center coincides with the base point covector".into(),
        ));
    }
    let t0 = dot(&d, hp) / (dn * norm(hp));
    if t0.abs() <= tol.ray_tol {
        return Err(ContactError::RayTangency(t0.abs()));
    }
    let direction: Vec<f64> = d.iter().map(|v| v / dn).collect();
    let q_lo: Vec<f64> = x0.point.q.iter().map(|v| v - q_half_width).collect();
    let q_hi: Vec<f64> = x0.point.q.iter().map(|v| v + q_half_width).collect();
    let mut chart = RadialChart {
        h: h.clone(),
        center: center.to_vec(),
        q_lo,
        q_hi,
        direction,
        cone,
        radius: None,
        min_transversality: f64::INFINITY,
        samples: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r_max = 3.0 * dn;
    for s in 0..128 {
        let (q, w) = if s == 0 {
            (x0.point.q.clone(), chart.direction.clone())
        } else {
            chart.random_ray(&mut rng)
        };
        let mut crossings = 0;
        let mut prev = None;
        for i in 1..=400 {
            let r = r_max * i as f64 / 400.0;
            let mut z = q.clone();
            z.extend((0..n).map(|j| center[j] + r * w[j]));
            let v = h.value(&z)?;
            if let Some(pv) = prev {
                if f64::signum(pv) != v.signum() {
                    crossings += 1;
                }
            }
            prev = Some(v);
        }
        match crossings {
            0 => return Err(ContactError::RayMiss),
            1 => {}
            c => return Err(ContactError::MultipleCrossing(c)),
        }
        let x = fiber_point_along_ray(h, &q, center, &w, tol).ok_or(ContactError::RayMiss)?;
        let tr = chart.alpha_of(&x.z(), &x.xh).abs();
        if tr < tol.ray_tol {
            return Err(ContactError::RayTangency(tr));
        }
        chart.min_transversality = chart.min_transversality.min(tr);
        chart.samples += 1;
    }
    Ok(chart)
}

impl RadialChart {
    /// Unit cotangent bundle of flat `R^n` with `P = 0` and `r = 1`.
    pub fn flat(n: usize, tol: &Tolerances) -> RadialChart {
        let h = crate::library::flat(n);
        let mut z = vec![0.0; 2 * n];
        z[n] = 1.0;
        let x0 = crate::hamsys::level_point_at(&h, &z, tol).unwrap();
        let chart = build_radial_chart(&h, &x0, &vec![0.0; n], 1.0, 1.2, tol, 0).unwrap();
        chart.with_radius(Expr::one(), tol).unwrap()
    }

    pub fn hamiltonian(&self) -> &HamiltonianExpr {
        &self.h
    }

    pub fn n(&self) -> usize {
        self.h.n()
    }

    /// Attaches an explicit radial function after checking it on sampled rays.
    pub fn with_radius(
        mut self,
        radius: Expr,
        tol: &Tolerances,
    ) -> Result<RadialChart, ContactError> {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        self.radius = Some(radius);
        let mut worst: f64 = 0.0;
        for _ in 0..64 {
            let (q, w) = self.random_ray(&mut rng);
            let z = self.point(&q, &w, tol)?;
            worst = worst.max(self.h.value(&z)?.abs());
        }
        if worst > 1e-10 {
            return Err(ContactError::BadRadius(worst));
        }
        Ok(self)
    }

    fn random_ray(&self, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
        let q = self
            .q_lo
            .iter()
            .zip(&self.q_hi)
            .map(|(a, b)| rng.gen_range(*a..=*b))
            .collect();
        (q, cone_direction(rng, &self.direction, self.cone))
    }

    /// Level point on the ray from `P` in direction `w` over `q`.
    pub fn point(&self, q: &[f64], w: &[f64], tol: &Tolerances) -> Result<Vec<f64>, ContactError> {
        let n = self.n();
        match &self.radius {
            Some(r) => {
                let mut qw = q.to_vec();
                qw.extend_from_slice(w);
                let rv = r.eval(&qw)?;
                let mut z = q.to_vec();
                z.extend((0..n).map(|i| self.center[i] + rv * w[i]));
                Ok(z)
            }
            None => Ok(fiber_point_along_ray(&self.h, q, &self.center, w, tol)
                .ok_or(ContactError::RayMiss)?
                .z()),
        }
    }

    /// Seeded sample of chart points on the level.
    pub fn sample_points(
        &self,
        count: usize,
        seed: u64,
        tol: &Tolerances,
    ) -> Result<Vec<Vec<f64>>, ContactError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let (q, w) = self.random_ray(&mut rng);
                self.point(&q, &w, tol)
            })
            .collect()
    }

    /// `lambda_P` at `z` as an ambient covector.
    pub fn alpha(&self, z: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut a: Vec<f64> = (0..n).map(|i| z[n + i] - self.center[i]).collect();
        a.extend(std::iter::repeat(0.0).take(n));
        a
    }

    fn alpha_of(&self, z: &[f64], v: &[f64]) -> f64 {
        dot(&self.alpha(z), v)
    }

    /// Liouville field `Y_P = (p - P) d/dp`.
    pub fn liouville(&self, z: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut y = vec![0.0; n];
        y.extend((0..n).map(|i| z[n + i] - self.center[i]));
        y
    }

    /// `lambda_P` as coefficient expressions over phase variables.
    pub fn alpha_exprs(&self) -> Vec<Expr> {
        let n = self.n();
        let mut a: Vec<Expr> = (0..n)
            .map(|i| Expr::var(n + i).sub(&Expr::constant(self.center[i])))
            .collect();
        a.extend((0..n).map(|_| Expr::zero()));
        a
    }

    pub fn describe(&self) -> ChartDescriptor {
        let names: Vec<String> = crate::expr::VarTable::phase(self.n()).names().to_vec();
        let mut rn: Vec<String> = (1..=self.n()).map(|i| format!("q{i}")).collect();
        rn.extend((1..=self.n()).map(|i| format!("w{i}")));
        ChartDescriptor {
            hamiltonian: self.h.source(),
            center: self.center.clone(),
            q_lo: self.q_lo.clone(),
            q_hi: self.q_hi.clone(),
            direction: self.direction.clone(),
            cone: self.cone,
            alpha: self
                .alpha_exprs()
                .iter()
                .zip(&names)
                .map(|(e, v)| format!("({}) d{v}", e.display(&names)))
                .collect::<Vec<_>>()
                .join(" + "),
            radius: self.radius.as_ref().map(|r| r.display(&rn).to_string()),
            min_transversality: self.min_transversality,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChartDescriptor {
    pub hamiltonian: String,
    pub center: Vec<f64>,
    pub q_lo: Vec<f64>,
    pub q_hi: Vec<f64>,
    pub direction: Vec<f64>,
    pub cone: f64,
    pub alpha: String,
    pub radius: Option<String>,
    pub min_transversality: f64,
}

/// Reeb vector, contact hyperplane and `d alpha` on the frame `[R, xi]` at a level point.
#[derive(Clone, Debug)]
pub struct ContactFrame {
    pub point: Vec<f64>,
    pub reeb: Vec<f64>,
    pub xi: DMatrix<f64>,
    pub dalpha: DMatrix<f64>,
    pub alpha_residual: f64,
    pub iota_residual: f64,
    pub xi_alpha_residual: f64,
    /// Sine of the angle between `R` and `X_H`.
    pub parallel_defect: f64,
}

fn tangent_and_xi(
    chart: &RadialChart,
    z: &[f64],
) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>), ContactError> {
    let (_, g) = chart.h.gradient(z)?;
    let t = complement_basis(&g);
    let a = chart.alpha(z);
    let at: Vec<f64> = (0..t.ncols())
        .map(|j| (0..t.nrows()).map(|i| t[(i, j)] * a[i]).sum())
        .collect();
    if norm(&at) < 1e-14 {
        return Err(ContactError::Singular);
    }
    let xi = &t * complement_basis(&at);
    Ok((t, at, xi))
}

/// Solves `alpha(R) = 1`, `d alpha(R, e_j) = 0` for `e_j` spanning `xi`.
pub fn reeb_field(chart: &RadialChart, z: &[f64]) -> Result<ContactFrame, ContactError> {
    let (t, at, xi) = tangent_and_xi(chart, z)?;
    let m = t.ncols();
    let mut a = DMatrix::zeros(m, m);
    let mut b = DVector::zeros(m);
    for j in 0..m {
        a[(0, j)] = at[j];
    }
    b[0] = 1.0;
    for r in 0..m - 1 {
        let e: Vec<f64> = xi.column(r).iter().copied().collect();
        for j in 0..m {
            let tj: Vec<f64> = t.column(j).iter().copied().collect();
            a[(r + 1, j)] = omega(&tj, &e);
        }
    }
    let c = a.lu().solve(&b).ok_or(ContactError::Singular)?;
    let reeb: Vec<f64> = (&t * c).iter().copied().collect();
    let alpha_residual = (chart.alpha_of(z, &reeb) - 1.0).abs();
    let iota_residual = (0..m)
        .map(|j| omega(&reeb, &t.column(j).iter().copied().collect::<Vec<_>>()).abs())
        .fold(0.0, f64::max);
    let xi_alpha_residual = (0..m - 1)
        .map(|j| {
            chart
                .alpha_of(z, &xi.column(j).iter().copied().collect::<Vec<_>>())
                .abs()
        })
        .fold(0.0, f64::max);
    let xh = chart.h.field(z)?;
    let (rn, xn) = (norm(&reeb), norm(&xh));
    let c = dot(&reeb, &xh) / (rn * xn);
    let perp: Vec<f64> = reeb
        .iter()
        .zip(&xh)
        .map(|(r, x)| r / rn - c * x / xn)
        .collect();
    let mut cols = vec![reeb.clone()];
    cols.extend((0..m - 1).map(|j| xi.column(j).iter().copied().collect()));
    let f = mat_cols(&cols);
    let dalpha = DMatrix::from_fn(m, m, |i, j| {
        omega(
            &f.column(i).iter().copied().collect::<Vec<_>>(),
            &f.column(j).iter().copied().collect::<Vec<_>>(),
        )
    });
    Ok(ContactFrame {
        point: z.to_vec(),
        reeb,
        xi,
        dalpha,
        alpha_residual,
        iota_residual,
        xi_alpha_residual,
        parallel_defect: norm(&perp),
    })
}

/// A contact Hamiltonian `h` on a chart with compiled tapes for its field.
pub struct ContactHam<'c> {
    chart: &'c RadialChart,
    pub expr: Expr,
    /// Outputs: `grad H` (2n), `h`, `grad h` (2n).
    tape: Tape,
}

impl<'c> ContactHam<'c> {
    pub fn new(chart: &'c RadialChart, expr: Expr) -> Self {
        let n = chart.n();
        let vars: Vec<usize> = (0..2 * n).collect();
        let mut outs = chart.h.expr().gradient(&vars);
        outs.push(expr.clone());
        outs.extend(expr.gradient(&vars));
        let tape = Tape::compile(&outs, 2 * n);
        ContactHam { chart, expr, tape }
    }

    fn bordered(&self, alpha: &[f64], grad_h: &[f64], with_j: bool) -> DMatrix<f64> {
        let m = alpha.len();
        let n = m / 2;
        let mut a = DMatrix::zeros(m + 2, m + 2);
        if with_j {
            for i in 0..n {
                a[(i, n + i)] = 1.0;
                a[(n + i, i)] = -1.0;
            }
        }
        for i in 0..m {
            a[(i, m)] = -alpha[i];
            a[(i, m + 1)] = -grad_h[i];
            a[(m, i)] = grad_h[i];
            a[(m + 1, i)] = alpha[i];
        }
        a
    }

    /// `R_h` from the ambient bordered system
    /// `iota_R omega + dh - s alpha - mu dH = 0`, `dH(R) = 0`, `alpha(R) = h`.
    pub fn field(&self, z: &[f64]) -> Result<ContactField, ContactError> {
        let m = z.len();
        let out = self.tape.eval_vec(z)?;
        let (gh, hv, dh) = (&out[..m], out[m], &out[m + 1..]);
        let alpha = self.chart.alpha(z);
        let a = self.bordered(&alpha, gh, true);
        let mut b = DVector::zeros(m + 2);
        for i in 0..m {
            b[i] = -dh[i];
        }
        b[m + 1] = hv;
        let x = a.lu().solve(&b).ok_or(ContactError::Singular)?;
        let r_h: Vec<f64> = x.iter().take(m).copied().collect();
        Ok(ContactField {
            r_h,
            dh_reeb: x[m],
            h: hv,
        })
    }

    /// Taylor coefficients of the `R_h` orbit through `z0` up to `order`, exact in floating point.
    pub fn orbit_series(&self, z0: &[f64], order: usize) -> Result<Vec<Vec<f64>>, ContactError> {
        let m = z0.len();
        let n = m / 2;
        let mut work = TaylorWork::new(&self.tape, order.max(1));
        let mut zc = vec![vec![0.0; order + 1]; m];
        let mut xs: Vec<DVector<f64>> = Vec::new();
        let mut mats: Vec<DMatrix<f64>> = Vec::new();
        for i in 0..m {
            zc[i][0] = z0[i];
            work.set_input(i, 0, z0[i]);
        }
        let mut lu = None;
        for j in 0..order {
            work.compute(j)?;
            let gh: Vec<f64> = (0..m).map(|i| work.output(i, j)).collect();
            let alpha: Vec<f64> = (0..m)
                .map(|i| {
                    if i < n {
                        zc[n + i][j] - if j == 0 { self.chart.center[i] } else { 0.0 }
                    } else {
                        0.0
                    }
                })
                .collect();
            mats.push(self.bordered(&alpha, &gh, j == 0));
            let mut b = DVector::zeros(m + 2);
            for i in 0..m {
                b[i] = -work.output(m + 1 + i, j);
            }
            b[m + 1] = work.output(m, j);
            for i in 1..=j {
                b -= &mats[i] * &xs[j - i];
            }
            if j == 0 {
                lu = Some(mats[0].clone().lu());
            }
            let x = lu
                .as_ref()
                .unwrap()
                .solve(&b)
                .ok_or(ContactError::Singular)?;
            for i in 0..m {
                let v = x[i] / (j + 1) as f64;
                zc[i][j + 1] = v;
                work.set_input(i, j + 1, v);
            }
            xs.push(x);
        }
        Ok(zc)
    }

    /// Projected k-jet of the `R_h` orbit through `z0` on the given axis.
    pub fn orbit_jet(
        &self,
        z0: &[f64],
        axis: Option<usize>,
        k: usize,
    ) -> Result<CurveJet, ContactError> {
        let n = self.chart.n();
        let s = self.orbit_series(z0, k)?;
        Ok(CurveJet::from_curve_series(&s[..n], axis, k, 0.0)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContactField {
    pub r_h: Vec<f64>,
    /// `dh(R)`, a by-product of the bordered solve.
    pub dh_reeb: f64,
    pub h: f64,
}

/// Reeb field of `(1/h) alpha`, from `iota_R d((1/h) alpha) = 0` on the tangent space in least squares.
pub fn reeb_of_scaled(chart: &RadialChart, h: &Expr, z: &[f64]) -> Result<Vec<f64>, ContactError> {
    let m = z.len();
    let f = Expr::one().div(h);
    let df: Vec<f64> = f
        .gradient(&(0..m).collect::<Vec<_>>())
        .iter()
        .map(|e| e.eval(z))
        .collect::<Result<_, _>>()?;
    let fv = f.eval(z)?;
    let (_, g) = chart.h.gradient(z)?;
    let t = complement_basis(&g);
    let d = t.ncols();
    let alpha = chart.alpha(z);
    let tc: Vec<Vec<f64>> = (0..d)
        .map(|j| t.column(j).iter().copied().collect())
        .collect();
    let al: Vec<f64> = tc.iter().map(|c| dot(&alpha, c)).collect();
    let dfl: Vec<f64> = tc.iter().map(|c| dot(&df, c)).collect();
    // d(f alpha)(u, v) = df(u) alpha(v) - df(v) alpha(u) + f omega(u, v)
    let mut a = DMatrix::zeros(d + 1, d);
    let mut b = DVector::zeros(d + 1);
    for i in 0..d {
        for j in 0..d {
            a[(i, j)] = dfl[j] * al[i] - dfl[i] * al[j] + fv * omega(&tc[j], &tc[i]);
        }
    }
    for j in 0..d {
        a[(d, j)] = fv * al[j];
    }
    b[d] = 1.0;
    let c = a
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|_| ContactError::Singular)?;
    Ok((&t * c).iter().copied().collect())
}

/// `R_h` at `z` together with the discrepancy to the Reeb field of `(1/h) alpha`.
pub fn contact_ham_field(
    chart: &RadialChart,
    h: &Expr,
    z: &[f64],
) -> Result<(ContactField, f64), ContactError> {
    let f = ContactHam::new(chart, h.clone()).field(z)?;
    let other = reeb_of_scaled(chart, h, z)?;
    let diff: Vec<f64> = f.r_h.iter().zip(&other).map(|(a, b)| a - b).collect();
    Ok((f.clone(), norm(&diff) / norm(&f.r_h).max(1.0)))
}

/// Result of the jet-realization construction.
#[derive(Clone, Debug)]
pub struct RealizedJet {
    pub h: Expr,
    pub target: CurveJet,
    /// Base point `psi(x0)` on the level.
    pub base: Vec<f64>,
    /// Lift `psi(T)` and its derivative, as expressions in one variable `T`.
    pub psi: Vec<Expr>,
    pub psi_dot: Vec<Expr>,
    pub a: Expr,
    pub a_prime: Expr,
    pub box_half_width: f64,
    pub h_min_sampled: f64,
}

/// Options for [`realize_jet_hamiltonian`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RealizeOptions {
    pub box_half_width: f64,
    pub box_samples: usize,
    pub seed: u64,
}

impl Default for RealizeOptions {
    fn default() -> Self {
        RealizeOptions {
            box_half_width: 0.25,
            box_samples: 200,
            seed: 0,
        }
    }
}

/// Constructs `h` on the chart whose `R_h` orbit through the lifted base point has projected jet `target`.
///
/// The target is represented by its degree-`k` graph polynomial `c(T)`, lifted to the level by
/// `psi(T) = (c, P + r(c, w) w)` with `w` the unit tangent of `c`. Along `psi`, `h = alpha(psi')`,
/// `dh = -iota_{psi'} d alpha` on `xi` and `dh(psi') = (alpha(psi'))'`; off `psi`, `h` is affine
/// on each slice `q_axis = T`.
pub fn realize_jet_hamiltonian(
    chart: &RadialChart,
    target: &CurveJet,
    opts: &RealizeOptions,
    tol: &Tolerances,
) -> Result<RealizedJet, ContactError> {
    let n = chart.n();
    if target.dim() != n {
        return Err(ContactError::Invalid(format!(
            "jet lives in R^{} but the chart base is R^{n}",
            target.dim()
        )));
    }
    let radius = chart.radius.as_ref().ok_or(ContactError::NoRadius)?;
    let axis = target.axis;
    let tv = Expr::var(0);
    let s = tv.sub(&Expr::constant(target.base));
    let mut c = Vec::with_capacity(n);
    let mut col = 0;
    for i in 0..n {
        if i == axis {
            c.push(tv.clone());
        } else {
            let mut poly = Expr::zero();
            for r in (0..=target.k).rev() {
                poly = poly.mul(&s).add(&Expr::constant(
                    target.y[r][col] / crate::series::factorial(r),
                ));
            }
            c.push(poly);
            col += 1;
        }
    }
    let cdot: Vec<Expr> = c.iter().map(|e| e.diff(0)).collect();
    let speed = Expr::sum(&cdot.iter().map(|e| e.square()).collect::<Vec<_>>()).sqrt();
    let w: Vec<Expr> = cdot.iter().map(|e| e.div(&speed)).collect();
    let mut qw = c.clone();
    qw.extend(w.iter().cloned());
    let r = radius.substitute(&qw);
    let p: Vec<Expr> = (0..n)
        .map(|i| Expr::constant(chart.center[i]).add(&r.mul(&w[i])))
        .collect();
    let pdot: Vec<Expr> = p.iter().map(|e| e.diff(0)).collect();
    let a = Expr::sum(
        &(0..n)
            .map(|i| p[i].sub(&Expr::constant(chart.center[i])).mul(&cdot[i]))
            .collect::<Vec<_>>(),
    );
    let a_prime = a.diff(0);
    let ratio = a_prime.div(&a);

    let a0 = a.eval(&[target.base])?;
    if !(a0.abs() >= tol.ray_tol) {
        return Err(ContactError::NotTransverse(a0));
    }
    let to_phase = [Expr::var(axis)];
    let mut h = a.substitute(&to_phase);
    for i in 0..n {
        let gq = pdot[i]
            .neg()
            .add(&ratio.mul(&p[i].sub(&Expr::constant(chart.center[i]))));
        if i != axis {
            h = h.add(
                &gq.substitute(&to_phase)
                    .mul(&Expr::var(i).sub(&c[i].substitute(&to_phase))),
            );
        }
        h = h.add(
            &cdot[i]
                .substitute(&to_phase)
                .mul(&Expr::var(n + i).sub(&p[i].substitute(&to_phase))),
        );
    }
    let mut psi = c.clone();
    psi.extend(p.iter().cloned());
    let mut psi_dot = cdot.clone();
    psi_dot.extend(pdot.iter().cloned());
    let base: Vec<f64> = psi
        .iter()
        .map(|e| e.eval(&[target.base]))
        .collect::<Result<_, _>>()?;

    let mut half = opts.box_half_width;
    let mut last_min = f64::NAN;
    for _ in 0..2 {
        let hmin = sample_min_h(chart, &h, &base, half, opts, tol)?;
        last_min = hmin;
        if hmin >= tol.h_min {
            return Ok(RealizedJet {
                h,
                target: target.clone(),
                base,
                psi,
                psi_dot,
                a,
                a_prime,
                box_half_width: half,
                h_min_sampled: hmin,
            });
        }
        half *= 0.5;
    }
    Err(ContactError::NegativeH {
        min: last_min,
        h_min: tol.h_min,
    })
}

fn sample_min_h(
    chart: &RadialChart,
    h: &Expr,
    base: &[f64],
    half: f64,
    opts: &RealizeOptions,
    tol: &Tolerances,
) -> Result<f64, ContactError> {
    let n = chart.n();
    let tape = Tape::compile(std::slice::from_ref(h), 2 * n);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let dir: Vec<f64> = {
        let d: Vec<f64> = (0..n).map(|i| base[n + i] - chart.center[i]).collect();
        let dn = norm(&d);
        d.iter().map(|v| v / dn).collect()
    };
    let mut hmin = f64::INFINITY;
    for s in 0..opts.box_samples {
        let (q, w) = if s == 0 {
            (base[..n].to_vec(), dir.clone())
        } else {
            let q: Vec<f64> = base[..n]
                .iter()
                .map(|v| v + rng.gen_range(-half..=half))
                .collect();
            (q, cone_direction(&mut rng, &dir, half))
        };
        let z = chart.point(&q, &w, tol)?;
        hmin = hmin.min(tape.eval_vec(&z)?[0]);
    }
    Ok(hmin)
}

impl RealizedJet {
    /// Largest `|dh(psi') - (alpha(psi'))'|` over `samples` parameters within `half_width` of the base.
    pub fn autonomy_residual(&self, half_width: f64, samples: usize) -> Result<f64, ContactError> {
        let m = self.psi.len();
        let grad: Vec<Expr> = self.h.gradient(&(0..m).collect::<Vec<_>>());
        let mut worst: f64 = 0.0;
        for i in 0..samples {
            let t = self.target.base
                + half_width * (2.0 * i as f64 / (samples - 1).max(1) as f64 - 1.0);
            let z: Vec<f64> = self
                .psi
                .iter()
                .map(|e| e.eval(&[t]))
                .collect::<Result<_, _>>()?;
            let zd: Vec<f64> = self
                .psi_dot
                .iter()
                .map(|e| e.eval(&[t]))
                .collect::<Result<_, _>>()?;
            let g: Vec<f64> = grad.iter().map(|e| e.eval(&z)).collect::<Result<_, _>>()?;
            worst = worst.max((dot(&g, &zd) - self.a_prime.eval(&[t])?).abs());
        }
        Ok(worst)
    }

    /// Largest scaled coefficient error between the `R_h` orbit jet and the target.
    pub fn roundtrip_error(&self, chart: &RadialChart) -> Result<f64, ContactError> {
        let ch = ContactHam::new(chart, self.h.clone());
        let got = ch.orbit_jet(&self.base, Some(self.target.axis), self.target.k)?;
        Ok(jet_error(&got, &self.target))
    }
}

/// Per-coefficient error scaled by `max(1, |target|)`.
pub fn jet_error(got: &CurveJet, target: &CurveJet) -> f64 {
    let mut worst: f64 = (got.base - target.base).abs();
    for (gr, tr) in got.y.iter().zip(&target.y) {
        for (g, t) in gr.iter().zip(tr) {
            worst = worst.max((g - t).abs() / t.abs().max(1.0));
        }
    }
    worst
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubmersivityReport {
    pub k: usize,
    pub directions: usize,
    pub excluded: usize,
    pub gains: Vec<f64>,
    pub singular_values: Vec<f64>,
    pub min_singular_value: f64,
}

fn random_poly(n2: usize, degree: usize, at: &[f64], rng: &mut ChaCha8Rng) -> Expr {
    let vars: Vec<Expr> = (0..n2)
        .map(|i| Expr::var(i).sub(&Expr::constant(at[i])))
        .collect();
    let mut terms = vec![Expr::one()];
    let mut layer = vec![(Expr::one(), 0usize)];
    for _ in 0..degree {
        let mut next = Vec::new();
        for (e, start) in &layer {
            for (v, var) in vars.iter().enumerate().skip(*start) {
                next.push((e.mul(var), v));
            }
        }
        terms.extend(next.iter().map(|(e, _)| e.clone()));
        layer = next;
    }
    let scale = 1.0 / (terms.len() as f64).sqrt();
    Expr::sum(
        &terms
            .iter()
            .map(|t| t.scale(rng.gen_range(-1.0..1.0) * scale))
            .collect::<Vec<_>>(),
    )
}

/// Sampled differential of `h -> (y^(1), .., y^(k))` of the projected `R_h` orbit through `z0`,
/// along seeded random polynomial directions plus any `extra` directions.
pub fn jet_map_submersivity_check(
    chart: &RadialChart,
    h: &Expr,
    z0: &[f64],
    k: usize,
    n_directions: usize,
    seed: u64,
    extra: &[Expr],
) -> Result<SubmersivityReport, ContactError> {
    let n = chart.n();
    let base = ContactHam::new(chart, h.clone());
    let axis = base.orbit_jet(z0, None, k)?.axis;
    let flatten = |j: &CurveJet| -> Vec<f64> { j.y[1..].iter().flatten().copied().collect() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dirs: Vec<Expr> = (0..n_directions)
        .map(|_| random_poly(2 * n, k + 1, z0, &mut rng))
        .collect();
    dirs.extend(extra.iter().cloned());
    let eps = 1e-5;
    let mut cols = Vec::new();
    let mut gains = Vec::new();
    for d in &dirs {
        let jp = ContactHam::new(chart, h.add(&d.scale(eps))).orbit_jet(z0, Some(axis), k)?;
        let jm = ContactHam::new(chart, h.sub(&d.scale(eps))).orbit_jet(z0, Some(axis), k)?;
        let col: Vec<f64> = flatten(&jp)
            .iter()
            .zip(flatten(&jm))
            .map(|(a, b)| (a - b) / (2.0 * eps))
            .collect();
        gains.push(norm(&col));
        cols.push(col);
    }
    let gmax = gains.iter().copied().fold(0.0, f64::max);
    let kept: Vec<Vec<f64>> = cols
        .into_iter()
        .zip(&gains)
        .filter(|(_, g)| **g > 1e-12 * gmax.max(1e-300))
        .map(|(c, _)| c)
        .collect();
    let excluded = dirs.len() - kept.len();
    let rows = k * (n - 1);
    let mut sv: Vec<f64> = if kept.is_empty() {
        vec![]
    } else {
        mat_cols(&kept)
            .svd(false, false)
            .singular_values
            .iter()
            .copied()
            .collect()
    };
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let min_sv = if sv.len() >= rows { sv[rows - 1] } else { 0.0 };
    Ok(SubmersivityReport {
        k,
        directions: dirs.len(),
        excluded,
        gains,
        singular_values: sv,
        min_singular_value: min_sv,
    })
}

/// Residuals of the structural identities at sampled chart points.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub points: usize,
    pub reeb_alpha: f64,
    pub reeb_iota: f64,
    pub xi_alpha: f64,
    pub reeb_parallel: f64,
    pub dlambda_omega: f64,
    pub liouville: f64,
    pub hamiltonian_crosscheck: f64,
}

/// Evaluates every contact identity over `count` seeded chart points, with `h` for the cross-check.
pub fn check_identities(
    chart: &RadialChart,
    h: &Expr,
    count: usize,
    seed: u64,
    tol: &Tolerances,
) -> Result<IdentityReport, ContactError> {
    let n = chart.n();
    let m = 2 * n;
    let a = chart.alpha_exprs();
    // (d lambda)_{jk} = d_j a_k - d_k a_j, compared with omega_{jk} = omega(e_j, e_k).
    let da: Vec<Vec<Expr>> = (0..m)
        .map(|j| (0..m).map(|k| a[k].diff(j).sub(&a[j].diff(k))).collect())
        .collect();
    let mut rep = IdentityReport::default();
    for z in chart.sample_points(count, seed, tol)? {
        let f = reeb_field(chart, &z)?;
        rep.reeb_alpha = rep.reeb_alpha.max(f.alpha_residual);
        rep.reeb_iota = rep.reeb_iota.max(f.iota_residual);
        rep.xi_alpha = rep.xi_alpha.max(f.xi_alpha_residual);
        rep.reeb_parallel = rep.reeb_parallel.max(f.parallel_defect);
        for j in 0..m {
            for k in 0..m {
                let mut ej = vec![0.0; m];
                let mut ek = vec![0.0; m];
                ej[j] = 1.0;
                ek[k] = 1.0;
                rep.dlambda_omega = rep
                    .dlambda_omega
                    .max((da[j][k].eval(&z)? - omega(&ej, &ek)).abs());
            }
        }
        let iy = iota_omega(&chart.liouville(&z));
        let lam = chart.alpha(&z);
        rep.liouville = rep.liouville.max(
            iy.iter()
                .zip(&lam)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
        let (_, err) = contact_ham_field(chart, h, &z)?;
        rep.hamiltonian_crosscheck = rep.hamiltonian_crosscheck.max(err);
        rep.points += 1;
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::library;

    fn tol() -> Tolerances {
        Tolerances::default()
    }

    #[test]
    fn flat_reeb_is_the_geodesic_field() {
        let chart = RadialChart::flat(2, &tol());
        let th = 0.7f64;
        let z = [0.1, 0.2, th.cos(), th.sin()];
        let f = reeb_field(&chart, &z).unwrap();
        let want = [th.cos(), th.sin(), 0.0, 0.0];
        for i in 0..4 {
            assert!((f.reeb[i] - want[i]).abs() < 1e-12);
        }
        assert!(f.alpha_residual < 1e-12 && f.iota_residual < 1e-12 && f.parallel_defect < 1e-12);
    }

    #[test]
    fn tangent_center_is_rejected() {
        let h = library::flat(2);
        let x0 = crate::hamsys::level_point_at(&h, &[0.0, 0.0, 1.0, 0.0], &tol()).unwrap();
        // P - p0 = (0, 1) is tangent to the unit circle at (1, 0).
        let r = build_radial_chart(&h, &x0, &[1.0, 1.0], 0.5, 0.3, &tol(), 0);
        assert!(matches!(r, Err(ContactError::RayTangency(_))));
    }

    #[test]
    fn heart_chart_about_its_kernel() {
        let h = library::heart(library::HEART_B);
        let x0 = fiber_point_along_ray(&h, &[0.0, 0.0], &[0.0, 0.0], &[1.0, 0.0], &tol()).unwrap();
        let chart = build_radial_chart(&h, &x0, &[0.0, 0.0], 0.5, 1.0, &tol(), 3).unwrap();
        assert!(chart.min_transversality > 0.1);
    }

    #[test]
    fn contact_field_scales_with_constant_h() {
        let chart = RadialChart::flat(3, &tol());
        let z = chart.sample_points(1, 4, &tol()).unwrap().remove(0);
        let r = reeb_field(&chart, &z).unwrap().reeb;
        let (one, _) = contact_ham_field(&chart, &Expr::one(), &z).unwrap();
        let (c, _) = contact_ham_field(&chart, &Expr::constant(2.5), &z).unwrap();
        for i in 0..6 {
            assert!((one.r_h[i] - r[i]).abs() < 1e-12);
            assert!((c.r_h[i] - 2.5 * r[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn identities_on_flat_chart() {
        let chart = RadialChart::flat(2, &tol());
        let h = crate::library::parse_phase_fn("1 + 0.2*sin(q1)", 2).unwrap();
        let rep = check_identities(&chart, &h, 50, 1, &tol()).unwrap();
        assert!(rep.reeb_alpha < 1e-10 && rep.reeb_iota < 1e-9);
        assert!(rep.dlambda_omega < 1e-12 && rep.liouville < 1e-12);
        assert!(rep.hamiltonian_crosscheck < 1e-8, "{rep:?}");
    }

    #[test]
    fn reeb_orbit_jet_is_realized_with_unit_h() {
        let chart = RadialChart::flat(2, &tol());
        let target = CurveJet {
            axis: 0,
            base: 0.0,
            y: vec![vec![0.0]; 4],
            k: 3,
            orientation: 1,
        };
        let rj =
            realize_jet_hamiltonian(&chart, &target, &RealizeOptions::default(), &tol()).unwrap();
        assert!((rj.h.eval(&rj.base).unwrap() - 1.0).abs() < 1e-14);
        assert!(rj.roundtrip_error(&chart).unwrap() < 1e-7);
    }

    #[test]
    fn bent_jet_roundtrip() {
        let chart = RadialChart::flat(3, &tol());
        let target = CurveJet {
            axis: 0,
            base: 0.0,
            y: vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![0.1, 0.0]],
            k: 2,
            orientation: 1,
        };
        let rj =
            realize_jet_hamiltonian(&chart, &target, &RealizeOptions::default(), &tol()).unwrap();
        assert!(rj.roundtrip_error(&chart).unwrap() < 1e-6);
        assert!(rj.autonomy_residual(0.1, 11).unwrap() < 1e-7);
    }

    #[test]
    fn submersivity_on_flat_chart() {
        let chart = RadialChart::flat(2, &tol());
        let z0 = [0.0, 0.0, 1.0, 0.0];
        let far = crate::expr::bump_sq(&Expr::var(0).sub(&Expr::constant(5.0)).square());
        for k in [1, 3] {
            let rep =
                jet_map_submersivity_check(&chart, &Expr::one(), &z0, k, 3 * k, 2, &[far.clone()])
                    .unwrap();
            assert!(rep.min_singular_value > 1e-3, "{rep:?}");
            assert_eq!(rep.excluded, 1);
            assert_eq!(*rep.gains.last().unwrap(), 0.0);
        }
    }
}
