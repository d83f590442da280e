//! Estimated local dimensions of the homopodal sets against `(3-k)(n-1)+1`.

use super::scenario::BumpSpec;
use crate::hamsys::HamiltonianExpr;
use crate::homopode::{scan_homopodal, ScanReport, SeedStrategy};
use crate::perturb::bump_perturb;
use crate::tol::Tolerances;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionRow {
    pub k: usize,
    pub n: usize,
    /// `"base"` or `"perturbed"`.
    pub variant: String,
    pub formula: i64,
    pub pairs: usize,
    pub mean_est_dim: Option<f64>,
    pub dims: BTreeMap<i64, usize>,
    pub ambiguous: usize,
    /// Some pair contradicts the formula (any pair at all when it is negative).
    pub non_generic: bool,
    pub certificate: Option<String>,
}

impl DimensionRow {
    fn from_scan(variant: &str, r: &ScanReport) -> DimensionRow {
        let with_dim: Vec<i64> = r
            .pairs
            .iter()
            .filter_map(|p| p.est_dim.as_ref())
            .filter(|d| !d.ambiguous)
            .map(|d| d.dim)
            .collect();
        let mean = if with_dim.is_empty() {
            None
        } else {
            Some(with_dim.iter().sum::<i64>() as f64 / with_dim.len() as f64)
        };
        DimensionRow {
            k: r.k,
            n: r.n,
            variant: variant.into(),
            formula: r.formula_dim,
            pairs: r.pairs.len(),
            mean_est_dim: mean,
            dims: r.dim_histogram.clone(),
            ambiguous: r.ambiguous,
            non_generic: if r.formula_dim < 0 {
                !r.pairs.is_empty()
            } else {
                with_dim.iter().any(|d| *d != r.formula_dim)
            },
            certificate: r.certificate.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionReport {
    pub rows: Vec<DimensionRow>,
}

impl DimensionReport {
    /// Columns: `k, n, variant, formula, pairs, mean_est_dim, ambiguous, non_generic`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "k,n,variant,formula,pairs,mean_est_dim,ambiguous,non_generic")?;
        for r in &self.rows {
            let mean = r.mean_est_dim.map(|m| format!("{m:.6}")).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.k, r.n, r.variant, r.formula, r.pairs, mean, r.ambiguous, r.non_generic
            )?;
        }
        Ok(())
    }
}

/// Scans `h` and its bump-perturbed copy at every order in `ks`.
pub fn dimension_report(
    h: &HamiltonianExpr,
    ks: &[usize],
    budget: u64,
    bump: &BumpSpec,
    strategy: &SeedStrategy,
    tol: &Tolerances,
) -> DimensionReport {
    let perturbed = bump_perturb(h, &bump.center, bump.amplitude, bump.radius, bump.seed);
    let mut rows = Vec::new();
    for &k in ks {
        for (variant, ham) in [("base", h), ("perturbed", &perturbed)] {
            let r = scan_homopodal(ham, k, strategy, budget, tol);
            rows.push(DimensionRow::from_scan(variant, &r));
        }
    }
    DimensionReport { rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::library;

    #[test]
    fn flat_order_two_is_flagged_and_bump_restores_formula() {
        let strategy = SeedStrategy {
            seed: 1,
            ..Default::default()
        };
        let r = dimension_report(
            &library::flat(2),
            &[2],
            200,
            &BumpSpec {
                center: vec![0.0; 2],
                ..Default::default()
            },
            &strategy,
            &Tolerances::default(),
        );
        let (base, pert) = (&r.rows[0], &r.rows[1]);
        assert_eq!(base.formula, 2);
        assert!(base.pairs > 0 && base.non_generic);
        assert_eq!(base.dims.keys().copied().collect::<Vec<_>>(), vec![3]);
        assert!(pert.pairs > 0 && !pert.non_generic);
        assert_eq!(pert.mean_est_dim, Some(2.0));
    }
}
