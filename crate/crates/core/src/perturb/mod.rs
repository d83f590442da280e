//! Perturbations of Hamiltonians: generic compactly supported bumps and the
//! displacement that resolves an isolated intersection of projected orbits.

mod resolve;
pub use resolve::*;

use crate::expr::{bump_sq, Expr};
use crate::hamsys::HamiltonianExpr;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `H + amplitude * bump(|q - center|^2 / radius^2) * poly(q - center, p)` where `poly`
/// has seeded coefficients on every monomial of degree at most 3 (odd terms in `p` included,
/// so the perturbation breaks reversibility).
pub fn bump_perturb(
    h: &HamiltonianExpr,
    center: &[f64],
    amplitude: f64,
    radius: f64,
    seed: u64,
) -> HamiltonianExpr {
    let n = h.n();
    if amplitude == 0.0 {
        return h.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vars: Vec<Expr> = (0..2 * n)
        .map(|i| {
            if i < n {
                Expr::var(i).sub(&Expr::constant(center[i]))
            } else {
                Expr::var(i)
            }
        })
        .collect();
    let mut terms = vec![Expr::constant(rng.gen_range(-1.0..1.0))];
    for a in 0..2 * n {
        terms.push(vars[a].scale(rng.gen_range(-1.0..1.0)));
        for b in a..2 * n {
            terms.push(vars[a].mul(&vars[b]).scale(rng.gen_range(-1.0..1.0)));
            for c in b..2 * n {
                terms.push(
                    vars[a]
                        .mul(&vars[b])
                        .mul(&vars[c])
                        .scale(rng.gen_range(-1.0..1.0)),
                );
            }
        }
    }
    let poly = Expr::sum(&terms);
    let s = Expr::sum(&vars[..n].iter().map(|v| v.square()).collect::<Vec<_>>())
        .scale(1.0 / (radius * radius));
    let e = h.expr().add(&bump_sq(&s).mul(&poly).scale(amplitude));
    HamiltonianExpr::new(e, n, format!("{}+bump{seed}", h.name()))
        .unwrap()
        .with_periods(h.periods().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::library;

    #[test]
    fn zero_amplitude_is_identity() {
        let h = library::flat(2);
        assert_eq!(
            bump_perturb(&h, &[0.0, 0.0], 0.0, 1.0, 1).source(),
            h.source()
        );
    }

    #[test]
    fn support_and_determinism() {
        let h = library::flat(3);
        let a = bump_perturb(&h, &[0.0; 3], 1e-2, 2.0, 5);
        let b = bump_perturb(&h, &[0.0; 3], 1e-2, 2.0, 5);
        assert_eq!(a.source(), b.source());
        let z = [2.5, 0.0, 0.0, 0.3, 0.4, 0.5];
        assert_eq!(a.value(&z).unwrap(), h.value(&z).unwrap());
        let z = [0.5, 0.0, 0.0, 0.3, 0.4, 0.5];
        assert_ne!(a.value(&z).unwrap(), h.value(&z).unwrap());
    }

    #[test]
    fn level_stays_regular() {
        let h = library::flat(2);
        let hp = bump_perturb(&h, &[0.0, 0.0], 1e-2, 3.0, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let q: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let z = [q[0], q[1], a.cos(), a.sin()];
            let (_, g0) = h.gradient(&z).unwrap();
            let (_, g1) = hp.gradient(&z).unwrap();
            assert!(crate::hamsys::norm(&g1) >= 0.5 * crate::hamsys::norm(&g0));
        }
    }
}
