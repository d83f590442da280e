//! Truncated univariate power series stored as coefficient vectors.

/// Product truncated to `n` coefficients.
pub fn mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n];
    for (i, ai) in a.iter().enumerate().take(n) {
        if *ai == 0.0 {
            continue;
        }
        for (j, bj) in b.iter().enumerate().take(n - i) {
            c[i + j] += ai * bj;
        }
    }
    c
}

/// `f(g(s))` truncated to `n` coefficients; requires `g[0] == 0`.
pub fn compose(f: &[f64], g: &[f64], n: usize) -> Vec<f64> {
    debug_assert!(g.first().map_or(true, |g0| *g0 == 0.0));
    let mut acc = vec![0.0; n];
    for fk in f.iter().take(n).rev() {
        acc = mul(&acc, g, n);
        acc[0] += fk;
    }
    acc
}

/// Compositional inverse of `x(t) = x1 t + x2 t^2 + ...` truncated to `n` coefficients.
///
/// Returns `None` when `x1` vanishes.
pub fn revert(x: &[f64], n: usize) -> Option<Vec<f64>> {
    let x1 = *x.get(1)?;
    if x1 == 0.0 || !x1.is_finite() {
        return None;
    }
    let mut t = vec![0.0; n];
    if n > 1 {
        t[1] = 1.0 / x1;
    }
    let mut xs = x.to_vec();
    xs.resize(n, 0.0);
    xs[0] = 0.0;
    for j in 2..n {
        let c = compose(&xs, &t, j + 1);
        t[j] = -c[j] / x1;
    }
    Some(t)
}

/// Horner evaluation at `h`.
pub fn eval(c: &[f64], h: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, v| acc * h + v)
}

/// Coefficients of the derivative series.
pub fn deriv(c: &[f64]) -> Vec<f64> {
    c.iter()
        .enumerate()
        .skip(1)
        .map(|(k, v)| k as f64 * v)
        .collect()
}

/// Converts Taylor coefficients to derivatives (`c_r * r!`).
pub fn coeffs_to_derivs(c: &[f64]) -> Vec<f64> {
    let mut f = 1.0;
    c.iter()
        .enumerate()
        .map(|(r, v)| {
            if r > 0 {
                f *= r as f64;
            }
            v * f
        })
        .collect()
}

pub fn factorial(r: usize) -> f64 {
    (1..=r).fold(1.0, |a, b| a * b as f64)
}
