//! Scenario files: one TOML document per run, resolved to a fully explicit form.

use crate::contact::RealizeOptions;
use crate::hamsys::{HamError, HamiltonianExpr};
use crate::homopode::SeedStrategy;
use crate::library;
use crate::perturb::{bump_perturb, PlanOptions};
use crate::subjets::JetRecord;
use crate::tol::Tolerances;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("scenario syntax: {0}")]
    Syntax(String),
    #[error("hamiltonian: {0}")]
    Hamiltonian(#[from] HamError),
    #[error("{0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Seed for every randomized step of the task.
    #[serde(default)]
    pub seed: u64,
    pub hamiltonian: HamSpec,
    #[serde(default)]
    pub chart: ChartBox,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub output: OutputSpec,
    pub task: Task,
}

/// Either a built-in model or an expression in `q1..qn, p1..pn`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HamSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expr: Option<String>,
    pub n: usize,
    /// Period of each base axis, 0 for a non-periodic axis.
    #[serde(default)]
    pub periods: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturb: Option<BumpSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BumpSpec {
    pub amplitude: f64,
    pub radius: f64,
    pub center: Vec<f64>,
    pub seed: u64,
}

impl Default for BumpSpec {
    fn default() -> Self {
        BumpSpec {
            amplitude: 1e-2,
            radius: 3.0,
            center: Vec::new(),
            seed: 7,
        }
    }
}

/// Base box for seeding; empty means `[-1, 1]^n`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChartBox {
    pub q_lo: Vec<f64>,
    pub q_hi: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: String,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            dir: "podex-out".into(),
        }
    }
}

/// Start point and time window of one orbit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitSpec {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    #[serde(default)]
    pub t0: f64,
    pub t1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Task {
    Flow(FlowTask),
    Chord(ChordTask),
    Jets(JetsTask),
    Intersections(IntersectionsTask),
    HomopodeScan(ScanTask),
    Dimension(DimensionTask),
    Heart(HeartTask),
    RealizeJet(RealizeTask),
    Resolve(ResolveTask),
}

impl Task {
    pub fn kind(&self) -> &'static str {
        match self {
            Task::Flow(_) => "flow",
            Task::Chord(_) => "chord",
            Task::Jets(_) => "jets",
            Task::Intersections(_) => "intersections",
            Task::HomopodeScan(_) => "homopode-scan",
            Task::Dimension(_) => "dimension",
            Task::Heart(_) => "heart",
            Task::RealizeJet(_) => "realize-jet",
            Task::Resolve(_) => "resolve",
        }
    }
}

/// Exactly one of `t1` and `arclength` sets the window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowTask {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    #[serde(default)]
    pub t0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arclength: Option<f64>,
    #[serde(default)]
    pub backward: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChordTask {
    pub q_a: Vec<f64>,
    pub q_b: Vec<f64>,
    pub p_guess: Vec<f64>,
    pub t_guess: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JetsTask {
    /// Phase points `(q1..qn, p1..pn)`, projected onto the level first.
    pub points: Vec<Vec<f64>>,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntersectionsTask {
    pub orbits: Vec<OrbitSpec>,
    #[serde(default = "default_ds")]
    pub ds: f64,
    #[serde(default = "default_accept")]
    pub accept: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_ds() -> f64 {
    0.01
}

fn default_accept() -> f64 {
    1e-9
}

fn default_samples() -> usize {
    10_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanTask {
    pub k: usize,
    pub budget: u64,
    #[serde(default)]
    pub strategy: SeedStrategy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimensionTask {
    pub ks: Vec<usize>,
    pub budget: u64,
    /// Bump added to obtain the perturbed copy.
    #[serde(default)]
    pub perturb: BumpSpec,
    #[serde(default)]
    pub strategy: SeedStrategy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeartTask {
    #[serde(default)]
    pub q: Vec<f64>,
    /// Interior kernel point of the fiber; rays from it parametrize the fiber by angle.
    #[serde(default)]
    pub center: Vec<f64>,
    #[serde(default = "default_grid")]
    pub grid: usize,
}

fn default_grid() -> usize {
    360
}

/// Explicit targets, `random` seeded targets, or both.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealizeTask {
    #[serde(default)]
    pub targets: Vec<JetRecord>,
    #[serde(default)]
    pub random: usize,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default)]
    pub options: RealizeOptions,
    /// Chart points used for the contact identity check.
    #[serde(default = "default_identity_points")]
    pub identity_points: usize,
}

fn default_k_max() -> usize {
    4
}

fn default_amplitude() -> f64 {
    0.2
}

fn default_identity_points() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolveTask {
    pub target: OrbitSpec,
    pub bystanders: Vec<OrbitSpec>,
    pub q_star: Vec<f64>,
    #[serde(default)]
    pub plan: PlanOptions,
}

fn check_len(what: &str, v: &[f64], n: usize) -> Result<(), ConfigError> {
    if v.len() != n {
        return invalid(format!("{what} has {} entries, expected {n}", v.len()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return invalid(format!("{what} has non-finite entries"));
    }
    Ok(())
}

fn check_orbit(what: &str, o: &OrbitSpec, n: usize) -> Result<(), ConfigError> {
    check_len(&format!("{what}.q"), &o.q, n)?;
    check_len(&format!("{what}.p"), &o.p, n)?;
    if !(o.t0.is_finite() && o.t1.is_finite()) || o.t0 == o.t1 {
        return invalid(format!("{what} needs finite t0 != t1"));
    }
    Ok(())
}

impl Scenario {
    pub fn from_toml(src: &str) -> Result<Scenario, ConfigError> {
        toml::from_str(src).map_err(|e| ConfigError::Syntax(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Scenario, ConfigError> {
        let src = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Scenario::from_toml(&src)
    }

    /// The unperturbed Hamiltonian with periods applied.
    pub fn base_hamiltonian(&self) -> Result<HamiltonianExpr, ConfigError> {
        let s = &self.hamiltonian;
        if s.n == 0 {
            return invalid("hamiltonian.n must be positive");
        }
        let h = match (&s.builtin, &s.expr) {
            (Some(b), None) => library::builtin(b, s.n)?,
            (None, Some(e)) => HamiltonianExpr::parse(e, s.n, self.name.clone())?,
            _ => return invalid("hamiltonian needs exactly one of 'builtin' and 'expr'"),
        };
        if s.periods.is_empty() {
            return Ok(h);
        }
        check_len("hamiltonian.periods", &s.periods, s.n)?;
        if s.periods.iter().any(|p| *p < 0.0) {
            return invalid("hamiltonian.periods must be non-negative");
        }
        Ok(h.with_periods(
            s.periods
                .iter()
                .map(|p| if *p > 0.0 { Some(*p) } else { None })
                .collect(),
        ))
    }

    /// The Hamiltonian the task runs on (the base one plus the optional bump).
    pub fn hamiltonian(&self) -> Result<HamiltonianExpr, ConfigError> {
        let h = self.base_hamiltonian()?;
        Ok(match &self.hamiltonian.perturb {
            Some(b) => bump_perturb(&h, &b.center, b.amplitude, b.radius, b.seed),
            None => h,
        })
    }

    /// Fills every default that depends on `n` or the scenario seed, and checks shapes.
    pub fn resolve(mut self) -> Result<Scenario, ConfigError> {
        let n = self.hamiltonian.n;
        if let Some(b) = &mut self.hamiltonian.perturb {
            if b.center.is_empty() {
                b.center = vec![0.0; n];
            }
            check_len("hamiltonian.perturb.center", &b.center, n)?;
            if !(b.radius > 0.0) {
                return invalid("hamiltonian.perturb.radius must be positive");
            }
        }
        self.hamiltonian()?;
        if self.chart.q_lo.is_empty() && self.chart.q_hi.is_empty() {
            self.chart.q_lo = vec![-1.0; n];
            self.chart.q_hi = vec![1.0; n];
        }
        check_len("chart.q_lo", &self.chart.q_lo, n)?;
        check_len("chart.q_hi", &self.chart.q_hi, n)?;
        if self.chart.q_lo.iter().zip(&self.chart.q_hi).any(|(a, b)| a >= b) {
            return invalid("chart.q_lo must be below chart.q_hi in every axis");
        }
        let seed = self.seed;
        let chart = self.chart.clone();
        let fill_strategy = |s: &mut SeedStrategy| -> Result<(), ConfigError> {
            s.seed = seed;
            if s.q_lo.is_empty() && s.q_hi.is_empty() {
                s.q_lo = chart.q_lo.clone();
                s.q_hi = chart.q_hi.clone();
            }
            if s.fiber_center.is_empty() {
                s.fiber_center = vec![0.0; n];
            }
            check_len("strategy.q_lo", &s.q_lo, n)?;
            check_len("strategy.q_hi", &s.q_hi, n)?;
            check_len("strategy.fiber_center", &s.fiber_center, n)
        };
        match &mut self.task {
            Task::Flow(t) => {
                check_len("task.q", &t.q, n)?;
                check_len("task.p", &t.p, n)?;
                match (t.t1, t.arclength) {
                    (Some(t1), None) if t1.is_finite() && t1 != t.t0 => {}
                    (None, Some(l)) if l > 0.0 => {}
                    _ => return invalid("flow task needs exactly one of t1 (!= t0) and arclength (> 0)"),
                }
            }
            Task::Chord(t) => {
                check_len("task.q_a", &t.q_a, n)?;
                check_len("task.q_b", &t.q_b, n)?;
                check_len("task.p_guess", &t.p_guess, n)?;
                if !(t.t_guess > 0.0) {
                    return invalid("task.t_guess must be positive");
                }
            }
            Task::Jets(t) => {
                if t.points.is_empty() {
                    return invalid("jets task needs at least one point");
                }
                for (i, z) in t.points.iter().enumerate() {
                    check_len(&format!("task.points[{i}]"), z, 2 * n)?;
                }
                if t.k == 0 || t.k > self.tolerances.k_max_derivs {
                    return invalid(format!("task.k must lie in 1..={}", self.tolerances.k_max_derivs));
                }
            }
            Task::Intersections(t) => {
                if t.orbits.len() < 2 {
                    return invalid("intersections task needs at least two orbits");
                }
                for (i, o) in t.orbits.iter().enumerate() {
                    check_orbit(&format!("task.orbits[{i}]"), o, n)?;
                }
                if !(t.ds > 0.0 && t.accept > 0.0) {
                    return invalid("task.ds and task.accept must be positive");
                }
            }
            Task::HomopodeScan(t) => {
                fill_strategy(&mut t.strategy)?;
                if t.k > self.tolerances.k_max {
                    return invalid(format!("task.k exceeds tolerances.k_max = {}", self.tolerances.k_max));
                }
            }
            Task::Dimension(t) => {
                fill_strategy(&mut t.strategy)?;
                if t.perturb.center.is_empty() {
                    t.perturb.center = vec![0.0; n];
                }
                check_len("task.perturb.center", &t.perturb.center, n)?;
                if t.ks.is_empty() || t.ks.iter().any(|k| *k > self.tolerances.k_max) {
                    return invalid(format!("task.ks must be non-empty with entries <= {}", self.tolerances.k_max));
                }
            }
            Task::Heart(t) => {
                if n != 2 {
                    return invalid("heart task needs n = 2");
                }
                if t.q.is_empty() {
                    t.q = vec![0.0; 2];
                }
                if t.center.is_empty() {
                    t.center = vec![0.0; 2];
                }
                check_len("task.q", &t.q, 2)?;
                check_len("task.center", &t.center, 2)?;
                if t.grid < 16 {
                    return invalid("task.grid must be at least 16");
                }
            }
            Task::RealizeJet(t) => {
                if self.hamiltonian.builtin.as_deref() != Some("flat") || self.hamiltonian.perturb.is_some() {
                    return invalid("realize-jet runs on the built-in flat chart (hamiltonian.builtin = \"flat\", no perturbation)");
                }
                if n < 2 {
                    return invalid("realize-jet needs n >= 2");
                }
                if t.targets.is_empty() && t.random == 0 {
                    return invalid("realize-jet needs explicit targets or random > 0");
                }
                t.options.seed = seed;
                for (i, r) in t.targets.iter().enumerate() {
                    if r.axis == 0 || r.axis > n || r.coeffs.len() != r.k + 1 || r.coeffs.iter().any(|c| c.len() != n - 1) {
                        return invalid(format!("task.targets[{i}] must have axis in 1..={n} and k+1 rows of {} coefficients", n - 1));
                    }
                }
            }
            Task::Resolve(t) => {
                check_orbit("task.target", &t.target, n)?;
                for (i, o) in t.bystanders.iter().enumerate() {
                    check_orbit(&format!("task.bystanders[{i}]"), o, n)?;
                }
                check_len("task.q_star", &t.q_star, n)?;
            }
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FLOW: &str = r#"
name = "flat-flow"
[hamiltonian]
builtin = "flat"
n = 2
[task]
kind = "flow"
q = [0.0, 0.0]
p = [1.0, 0.0]
t1 = 2.0
"#;

    #[test]
    fn defaults_are_materialized() {
        let s = Scenario::from_toml(FLOW).unwrap().resolve().unwrap();
        assert_eq!(s.chart.q_lo, vec![-1.0, -1.0]);
        assert_eq!(s.tolerances, Tolerances::default());
        let echo = toml::to_string(&s).unwrap();
        assert_eq!(Scenario::from_toml(&echo).unwrap(), s);
    }

    #[test]
    fn unknown_keys_and_bad_shapes_are_rejected() {
        let extra = FLOW.replace("t1 = 2.0", "t1 = 2.0\nspeed = 3");
        assert!(matches!(Scenario::from_toml(&extra), Err(ConfigError::Syntax(_))));
        let short = FLOW.replace("q = [0.0, 0.0]", "q = [0.0]");
        assert!(matches!(Scenario::from_toml(&short).unwrap().resolve(), Err(ConfigError::Invalid(_))));
        let both = FLOW.replace("t1 = 2.0", "t1 = 2.0\narclength = 1.0");
        assert!(Scenario::from_toml(&both).unwrap().resolve().is_err());
    }

    #[test]
    fn malformed_expression_reports_position() {
        let bad = FLOW.replace("builtin = \"flat\"", "expr = \"0.5*(p1^2 + p2^2 - 1\"");
        let err = Scenario::from_toml(&bad).unwrap().resolve().unwrap_err();
        assert!(matches!(err, ConfigError::Hamiltonian(HamError::Parse(_))), "{err}");
    }
}
