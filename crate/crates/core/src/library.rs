//! Built-in Hamiltonians and seeded random test Hamiltonians.

use crate::expr::{parse_expr, Expr, VarTable};
use crate::hamsys::{HamError, HamiltonianExpr};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn q(i: usize) -> Expr {
    Expr::var(i)
}

fn p(n: usize, i: usize) -> Expr {
    Expr::var(n + i)
}

/// Squared norm of the covector, `|p|^2`.
pub fn p_norm_sq(n: usize) -> Expr {
    let terms: Vec<Expr> = (0..n).map(|i| p(n, i).square()).collect();
    Expr::sum(&terms)
}

/// Flat metric `|p|^2/2 - 1/2` on `T*R^n`.
pub fn flat(n: usize) -> HamiltonianExpr {
    HamiltonianExpr::new(p_norm_sq(n).scale(0.5).sub(&Expr::constant(0.5)), n, "flat").unwrap()
}

/// Pendulum-type `|p|^2/2 + cos(q1) - energy`; regular and submersive for `energy > 1`.
pub fn pendulum(n: usize, energy: f64) -> HamiltonianExpr {
    let e = p_norm_sq(n)
        .scale(0.5)
        .add(&q(0).cos())
        .sub(&Expr::constant(energy));
    HamiltonianExpr::new(e, n, "pendulum").unwrap()
}

/// Constant magnetic field `B` on `R^2` in symmetric gauge; orbits are circles of radius `1/B`.
pub fn magnetic(b: f64) -> HamiltonianExpr {
    let px = p(2, 0).add(&q(1).scale(b / 2.0));
    let py = p(2, 1).sub(&q(0).scale(b / 2.0));
    let e = px
        .square()
        .add(&py.square())
        .scale(0.5)
        .sub(&Expr::constant(0.5));
    HamiltonianExpr::new(e, 2, "magnetic").unwrap()
}

/// Conformally perturbed metric `|p|^2 (1 + eps sin q1)/2 - 1/2`.
pub fn conformal(n: usize, eps: f64) -> HamiltonianExpr {
    let f = Expr::one().add(&q(0).sin().scale(eps));
    let e = p_norm_sq(n).mul(&f).scale(0.5).sub(&Expr::constant(0.5));
    HamiltonianExpr::new(e, n, "conformal").unwrap()
}

/// Non-reversible Finsler-type fibers `|p| + w.p = 1` (requires `|w| < 1`).
pub fn randers(w: &[f64]) -> HamiltonianExpr {
    let n = w.len();
    let mut e = p_norm_sq(n).sqrt();
    for (i, wi) in w.iter().enumerate() {
        e = e.add(&p(n, i).scale(*wi));
    }
    HamiltonianExpr::new(e.sub(&Expr::one()), n, "randers").unwrap()
}

/// Heart-shaped fibers: the limacon `|p| = 1 - b sin(phi)` written as
/// `|p|^2 + b p2 - |p|`. Star-shaped about `p = 0`; for `1/2 < b < 1` the
/// fiber has exactly two inflection points.
pub fn heart(b: f64) -> HamiltonianExpr {
    let r2 = p_norm_sq(2);
    let e = r2.add(&p(2, 1).scale(b)).sub(&r2.sqrt());
    HamiltonianExpr::new(e, 2, "heart").unwrap()
}

pub const HEART_B: f64 = 0.75;

/// Resolves a built-in name.
pub fn builtin(name: &str, n: usize) -> Result<HamiltonianExpr, HamError> {
    Ok(match name {
        "flat" => flat(n),
        "pendulum" => pendulum(n, 2.0),
        "conformal" => conformal(n, 0.1),
        "magnetic" => {
            if n != 2 {
                return Err(HamError::Invalid(
                    "magnetic model is defined for n = 2".into(),
                ));
            }
            magnetic(1.0)
        }
        "randers" => {
            let mut w = vec![0.0; n];
            w[0] = 0.3;
            randers(&w)
        }
        "heart" => {
            if n != 2 {
                return Err(HamError::Invalid("heart model is defined for n = 2".into()));
            }
            heart(HEART_B)
        }
        _ => {
            return Err(HamError::Invalid(format!(
                "unknown built-in Hamiltonian '{name}'"
            )))
        }
    })
}

pub const BUILTINS: &[&str] = &[
    "flat",
    "pendulum",
    "conformal",
    "magnetic",
    "randers",
    "heart",
];

/// A seeded random metric-type Hamiltonian
/// `1/2 p^T A(q) p + b(q).p - 1/2` with `A` uniformly positive definite and
/// `b` small, so that the level is regular and everywhere submersive.
pub fn random_metric(n: usize, seed: u64) -> HamiltonianExpr {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wave = |amp: f64| -> Expr {
        let mut arg = Expr::constant(rng.gen_range(0.0..6.0));
        for i in 0..n {
            arg = arg.add(&q(i).scale(rng.gen_range(-1.5..1.5)));
        }
        if rng.gen_bool(0.5) {
            arg.sin().scale(amp)
        } else {
            arg.cos().scale(amp)
        }
    };
    let mut e = Expr::zero();
    for i in 0..n {
        let a = Expr::one().add(&wave(0.25));
        e = e.add(&a.mul(&p(n, i).square()).scale(0.5));
    }
    for i in 0..n {
        for j in i + 1..n {
            e = e.add(&wave(0.1).mul(&p(n, i)).mul(&p(n, j)));
        }
        e = e.add(&wave(0.1).mul(&p(n, i)));
    }
    let e = e.sub(&Expr::constant(0.5));
    HamiltonianExpr::new(e, n, format!("random-metric-{seed}")).unwrap()
}

/// A seeded positive factor `g = 1 + sum of small waves` over phase space (`g >= 0.55`).
pub fn random_positive_factor(n: usize, seed: u64) -> Expr {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut g = Expr::one();
    for _ in 0..3 {
        let mut arg = Expr::constant(rng.gen_range(0.0..6.0));
        for v in 0..2 * n {
            arg = arg.add(&Expr::var(v).scale(rng.gen_range(-1.0..1.0)));
        }
        g = g.add(&arg.sin().scale(rng.gen_range(-0.15..0.15)));
    }
    g
}

/// Parses a factor or auxiliary function over phase coordinates.
pub fn parse_phase_fn(src: &str, n: usize) -> Result<Expr, HamError> {
    Ok(parse_expr(src, &VarTable::phase(n))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heart_fiber_is_the_limacon() {
        let h = heart(HEART_B);
        for k in 0..16 {
            let phi = k as f64 * 0.39;
            let r = 1.0 - HEART_B * phi.sin();
            let v = h.value(&[0.0, 0.0, r * phi.cos(), r * phi.sin()]).unwrap();
            assert!(v.abs() < 1e-14);
        }
    }

    #[test]
    fn random_metric_is_deterministic() {
        assert_eq!(random_metric(3, 4).source(), random_metric(3, 4).source());
        assert_ne!(random_metric(3, 4).source(), random_metric(3, 5).source());
    }
}
