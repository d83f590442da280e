use super::{formula_dimension, Flavor, HomopodalPair, HomopodeError, Solver};
use crate::hamsys::{level_point_at, HamiltonianExpr, LevelPoint};
use crate::tol::Tolerances;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;

/// Additive recurrence `u_i = frac(s + i alpha)` with `alpha_j = phi_d^{-j}`,
/// where `phi_d` is the positive root of `x^{d+1} = x + 1`.
#[derive(Clone, Debug)]
pub struct RdSequence {
    alpha: Vec<f64>,
    shift: Vec<f64>,
}

impl RdSequence {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut g = 2.0f64;
        for _ in 0..64 {
            g = (1.0 + g).powf(1.0 / (dim as f64 + 1.0));
        }
        let alpha = (1..=dim).map(|j| g.powi(-(j as i32)).fract()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shift = (0..dim).map(|_| rng.gen::<f64>()).collect();
        RdSequence { alpha, shift }
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn point(&self, i: u64) -> Vec<f64> {
        self.alpha
            .iter()
            .zip(&self.shift)
            .map(|(a, s)| {
                // Split the product to keep precision for large indices.
                let hi = (i >> 20) as f64 * ((1u64 << 20) as f64 * a).fract();
                let lo = (i & 0xFFFFF) as f64 * a;
                (s + hi.fract() + lo.fract()).fract()
            })
            .collect()
    }
}

/// Seed distribution for homopodal scans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedStrategy {
    /// Base box for the first point; empty means `[-1, 1]^n`.
    pub q_lo: Vec<f64>,
    pub q_hi: Vec<f64>,
    /// Componentwise bound on the base offset of the second point.
    pub q_offset: f64,
    /// Ray center in each fiber; empty means the zero covector.
    pub fiber_center: Vec<f64>,
    /// Fraction of seeds whose second direction is drawn near the reversed first one.
    pub antipodal_fraction: f64,
    pub antipodal_spread: f64,
    pub seed: u64,
    pub estimate_dims: bool,
}

impl Default for SeedStrategy {
    fn default() -> Self {
        SeedStrategy {
            q_lo: Vec::new(),
            q_hi: Vec::new(),
            q_offset: 0.05,
            fiber_center: Vec::new(),
            antipodal_fraction: 0.5,
            antipodal_spread: 0.3,
            seed: 0,
            estimate_dims: true,
        }
    }
}

impl SeedStrategy {
    fn resolved(&self, n: usize) -> SeedStrategy {
        let mut s = self.clone();
        if s.q_lo.is_empty() {
            s.q_lo = vec![-1.0; n];
        }
        if s.q_hi.is_empty() {
            s.q_hi = vec![1.0; n];
        }
        if s.fiber_center.is_empty() {
            s.fiber_center = vec![0.0; n];
        }
        s
    }

    fn in_box(&self, q: &[f64]) -> bool {
        q.iter()
            .zip(self.q_lo.iter().zip(&self.q_hi))
            .all(|(x, (lo, hi))| *x >= *lo && *x <= *hi)
    }
}

/// Maps `n-1` uniform parameters to a unit direction in `R^n`
/// (equal-area for `n <= 3`, hyperspherical angles beyond).
fn direction(u: &[f64], n: usize) -> Vec<f64> {
    match n {
        2 => {
            let a = 2.0 * PI * u[0];
            vec![a.cos(), a.sin()]
        }
        3 => {
            let z = 2.0 * u[0] - 1.0;
            let a = 2.0 * PI * u[1];
            let r = (1.0 - z * z).max(0.0).sqrt();
            vec![r * a.cos(), r * a.sin(), z]
        }
        _ => {
            let mut v = vec![1.0; n];
            for (j, uj) in u.iter().enumerate() {
                let a = if j + 1 == n - 1 {
                    2.0 * PI * uj
                } else {
                    PI * uj
                };
                for vi in v.iter_mut().skip(j + 1) {
                    *vi *= a.sin();
                }
                v[j] *= a.cos();
            }
            v
        }
    }
}

/// First crossing of the level along the ray `center + r w` in the fiber over `q`.
pub fn fiber_point_along_ray(
    h: &HamiltonianExpr,
    q: &[f64],
    center: &[f64],
    w: &[f64],
    tol: &Tolerances,
) -> Option<LevelPoint> {
    let n = h.n();
    let at = |r: f64| -> Option<f64> {
        let mut z = q.to_vec();
        z.extend((0..n).map(|i| center[i] + r * w[i]));
        h.value(&z).ok()
    };
    let mut a = 1e-3;
    let mut fa = at(a)?;
    let mut b = a;
    let mut fb = fa;
    while b < 20.0 {
        b = a + 0.02 * (1.0 + a);
        fb = at(b)?;
        if fa.signum() != fb.signum() {
            break;
        }
        a = b;
        fa = fb;
    }
    if fa.signum() == fb.signum() {
        return None;
    }
    for _ in 0..80 {
        let m = 0.5 * (a + b);
        let fm = at(m)?;
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
        if b - a < 1e-15 {
            break;
        }
    }
    let r = 0.5 * (a + b);
    let mut z = q.to_vec();
    z.extend((0..n).map(|i| center[i] + r * w[i]));
    level_point_at(h, &z, tol).ok()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub n: usize,
    pub k: usize,
    pub budget: u64,
    pub seed: u64,
    pub formula_dim: i64,
    pub pairs: Vec<HomopodalPair>,
    pub converged: usize,
    pub not_converged: usize,
    pub collapsed: usize,
    pub out_of_box: usize,
    pub seed_failures: usize,
    pub iso: usize,
    pub anti: usize,
    pub ambiguous: usize,
    pub dim_histogram: BTreeMap<i64, usize>,
    pub certificate: Option<String>,
}

impl ScanReport {
    /// Columns: `x1_q1..x1_qn, x1_p1..x1_pn, x2_q1.., x2_p1.., flavor, residual, dim`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.n;
        let mut head = Vec::new();
        for side in ["x1", "x2"] {
            for c in ["q", "p"] {
                for i in 1..=n {
                    head.push(format!("{side}_{c}{i}"));
                }
            }
        }
        writeln!(w, "{},flavor,residual,dim", head.join(","))?;
        for p in &self.pairs {
            let mut row: Vec<String> =
                p.x1.z()
                    .iter()
                    .chain(p.x2.z().iter())
                    .map(|v| format!("{v:.15e}"))
                    .collect();
            row.push(format!("{:?}", p.flavor).to_lowercase());
            row.push(format!("{:.3e}", p.residual_norm));
            row.push(
                p.est_dim
                    .as_ref()
                    .map(|d| {
                        if d.ambiguous {
                            "ambiguous".to_string()
                        } else {
                            d.dim.to_string()
                        }
                    })
                    .unwrap_or_default(),
            );
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

enum Outcome {
    Found(Box<HomopodalPair>),
    NotConverged,
    Collapsed,
    OutOfBox,
    SeedFailure,
}

fn seed_pair(
    h: &HamiltonianExpr,
    s: &SeedStrategy,
    u: &[f64],
    tol: &Tolerances,
) -> Option<(LevelPoint, LevelPoint)> {
    let n = h.n();
    let q1: Vec<f64> = (0..n)
        .map(|i| s.q_lo[i] + u[i] * (s.q_hi[i] - s.q_lo[i]))
        .collect();
    let q2: Vec<f64> = (0..n)
        .map(|i| q1[i] + s.q_offset * (2.0 * u[n + i] - 1.0))
        .collect();
    let w1 = direction(&u[2 * n..3 * n - 1], n);
    let anti = u[4 * n - 2] < s.antipodal_fraction;
    let w2 = if anti {
        let jitter = direction(&u[3 * n - 1..4 * n - 2], n);
        let mut w: Vec<f64> = w1
            .iter()
            .zip(&jitter)
            .map(|(a, j)| -a + s.antipodal_spread * j)
            .collect();
        let nw = crate::hamsys::norm(&w);
        w.iter_mut().for_each(|v| *v /= nw);
        w
    } else {
        direction(&u[3 * n - 1..4 * n - 2], n)
    };
    let x1 = fiber_point_along_ray(h, &q1, &s.fiber_center, &w1, tol)?;
    let x2 = fiber_point_along_ray(h, &q2, &s.fiber_center, &w2, tol)?;
    Some((x1, x2))
}

fn lex(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    std::cmp::Ordering::Equal
}

/// Sorts pairs lexicographically and drops any within `eps` phase distance of a kept one.
pub fn dedup_pairs(mut found: Vec<HomopodalPair>, eps: f64) -> Vec<HomopodalPair> {
    let key = |p: &HomopodalPair| [p.x1.z(), p.x2.z()].concat();
    found.sort_by(|a, b| lex(&key(a), &key(b)));
    let mut kept: Vec<HomopodalPair> = Vec::new();
    for p in found {
        let zp = key(&p);
        let dup = kept
            .iter()
            .rev()
            .take_while(|q| zp[0] - q.x1.point.q[0] <= eps)
            .any(|q| {
                let d: Vec<f64> = zp.iter().zip(key(q)).map(|(a, b)| a - b).collect();
                crate::hamsys::norm(&d) <= eps
            });
        if !dup {
            kept.push(p);
        }
    }
    kept
}

/// Quasi-random multistart search for homopodal pairs of order `k`.
pub fn scan_homopodal(
    h: &HamiltonianExpr,
    k: usize,
    strategy: &SeedStrategy,
    budget: u64,
    tol: &Tolerances,
) -> ScanReport {
    let n = h.n();
    let s = strategy.resolved(n);
    let rd = RdSequence::new(4 * n - 1, s.seed);
    let outcomes: Vec<Outcome> = (0..budget)
        .into_par_iter()
        .map_init(
            || Solver::new(h, k, tol),
            |solver, i| {
                let u = rd.point(i);
                let Some((x1, x2)) = seed_pair(h, &s, &u, tol) else {
                    return Outcome::SeedFailure;
                };
                match solver.solve(&x1, &x2) {
                    Ok(mut pair) => {
                        if !s.in_box(&pair.x1.point.q) || !s.in_box(&pair.x2.point.q) {
                            return Outcome::OutOfBox;
                        }
                        if lex(&pair.x2.z(), &pair.x1.z()).is_lt() {
                            std::mem::swap(&mut pair.x1, &mut pair.x2);
                        }
                        Outcome::Found(Box::new(pair))
                    }
                    Err(HomopodeError::Collapse(_)) | Err(HomopodeError::Diagonal(_)) => {
                        Outcome::Collapsed
                    }
                    Err(_) => Outcome::NotConverged,
                }
            },
        )
        .collect();

    let mut report = ScanReport {
        n,
        k,
        budget,
        seed: s.seed,
        formula_dim: formula_dimension(n, k),
        pairs: Vec::new(),
        converged: 0,
        not_converged: 0,
        collapsed: 0,
        out_of_box: 0,
        seed_failures: 0,
        iso: 0,
        anti: 0,
        ambiguous: 0,
        dim_histogram: BTreeMap::new(),
        certificate: None,
    };
    let mut found = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Found(p) => found.push(*p),
            Outcome::NotConverged => report.not_converged += 1,
            Outcome::Collapsed => report.collapsed += 1,
            Outcome::OutOfBox => report.out_of_box += 1,
            Outcome::SeedFailure => report.seed_failures += 1,
        }
    }
    report.converged = found.len();
    let mut kept = dedup_pairs(found, tol.dedup_eps);

    if s.estimate_dims {
        let dims: Vec<_> = kept
            .par_iter()
            .map_init(
                || Solver::new(h, k, tol),
                |solver, p| solver.local_dimension(p).ok(),
            )
            .collect();
        for (p, d) in kept.iter_mut().zip(dims) {
            p.est_dim = d;
        }
    }
    for p in &kept {
        match p.flavor {
            Flavor::Iso => report.iso += 1,
            Flavor::Anti => report.anti += 1,
            Flavor::Undefined => {}
        }
        if let Some(d) = &p.est_dim {
            if d.ambiguous {
                report.ambiguous += 1;
            } else {
                *report.dim_histogram.entry(d.dim).or_insert(0) += 1;
            }
        }
    }
    if report.formula_dim < 0 && kept.is_empty() {
        report.certificate = Some("no off-diagonal solutions found within budget".into());
    }
    report.pairs = kept;
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::library;

    #[test]
    fn rd_points_fill_the_cube() {
        let rd = RdSequence::new(3, 7);
        let pts: Vec<_> = (0..4096).map(|i| rd.point(i)).collect();
        assert!(pts.iter().flatten().all(|v| (0.0..1.0).contains(v)));
        for j in 0..3 {
            let mean: f64 = pts.iter().map(|p| p[j]).sum::<f64>() / pts.len() as f64;
            assert!((mean - 0.5).abs() < 5e-3);
        }
        assert_eq!(rd.point(123), RdSequence::new(3, 7).point(123));
    }

    #[test]
    fn directions_are_unit() {
        for n in 2..6 {
            let v = direction(&vec![0.37; n - 1], n);
            assert!((crate::hamsys::norm(&v) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn ray_hits_the_fiber() {
        let h = library::heart(library::HEART_B);
        let tol = Tolerances::default();
        let x = fiber_point_along_ray(&h, &[0.0, 0.0], &[0.0, 0.0], &[0.0, 1.0], &tol).unwrap();
        assert!((x.point.p[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn flat_scan_finds_the_antipodal_family() {
        let h = library::flat(2);
        let tol = Tolerances::default();
        let s = SeedStrategy {
            seed: 3,
            ..Default::default()
        };
        let r = scan_homopodal(&h, 1, &s, 64, &tol);
        assert!(r.pairs.len() > 10);
        assert!(r.pairs.iter().all(|p| p.flavor == Flavor::Anti));
        assert_eq!(r.dim_histogram.keys().copied().collect::<Vec<_>>(), vec![3]);
        let again = scan_homopodal(&h, 1, &s, 64, &tol);
        assert_eq!(r, again);
    }

    #[test]
    fn dedup_merges_nearby_pairs() {
        let h = library::flat(2);
        let tol = Tolerances::default();
        let s = SeedStrategy {
            q_lo: vec![0.1, 0.2],
            q_hi: vec![0.1, 0.2],
            q_offset: 0.0,
            antipodal_fraction: 1.0,
            antipodal_spread: 0.0,
            estimate_dims: false,
            ..Default::default()
        };
        let r = scan_homopodal(&h, 1, &s, 4, &tol);
        let mut shifted = r.pairs[0].clone();
        shifted.x2.point.q[0] += 1e-6;
        let pairs = vec![r.pairs[0].clone(), shifted, r.pairs[0].clone()];
        assert_eq!(dedup_pairs(pairs, tol.dedup_eps).len(), 1);
    }
}
