//! Task dispatch and report assembly. Reports are built in memory and written once.

use super::dimension::dimension_report;
use super::heart::heart_fiber_scan;
use super::scenario::{ConfigError, OrbitSpec, Scenario, Task};
use crate::contact::{check_identities, realize_jet_hamiltonian, RadialChart};
use crate::expr::{Expr, VarTable};
use crate::flow::{integrate, shoot_chord, Orbit, Window};
use crate::hamsys::{certify_level_point, HamiltonianExpr, LevelPoint, PhasePoint};
use crate::homopode::{inflection_order, scan_homopodal, Flavor};
use crate::perturb::resolve_intersection;
use crate::subjets::{find_intersections, project_jet, CurveJet};
use crate::tol::Tolerances;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Column contract of every CSV the runner emits.
pub const SCHEMA: &str = include_str!("../../schema.md");

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("cannot write reports: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    /// 2 for configuration problems, 3 for numerical failures and output errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            _ => 3,
        }
    }
}

fn num<E: std::fmt::Display>(what: &str) -> impl FnOnce(E) -> RunError + '_ {
    move |e| RunError::Numerical(format!("{what}: {e}"))
}

/// Report files of one run, keyed by file name.
#[derive(Clone, Debug, Default)]
pub struct Reports {
    pub files: Vec<(String, Vec<u8>)>,
}

impl Reports {
    fn json(&mut self, name: &str, v: &Value) {
        let mut s = serde_json::to_string_pretty(v).expect("report serializes");
        s.push('\n');
        self.files.push((name.into(), s.into_bytes()));
    }

    fn csv(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) {
        let mut buf = Vec::new();
        f(&mut buf).expect("in-memory write");
        self.files.push((name.into(), buf));
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
    }

    /// Writes every file into `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, bytes) in &self.files {
            std::fs::write(dir.join(name), bytes)?;
        }
        Ok(())
    }
}

/// Output directory: the explicit flag, then `PODEX_OUT_DIR`, then the scenario.
pub fn output_dir(s: &Scenario, flag: Option<&Path>) -> PathBuf {
    if let Some(d) = flag {
        return d.to_path_buf();
    }
    match std::env::var_os("PODEX_OUT_DIR") {
        Some(d) if !d.is_empty() => PathBuf::from(d),
        _ => PathBuf::from(&s.output.dir),
    }
}

fn start(h: &HamiltonianExpr, q: &[f64], p: &[f64], tol: &Tolerances) -> Result<LevelPoint, RunError> {
    certify_level_point(h, &PhasePoint::new(q.to_vec(), p.to_vec()), tol).map_err(num("start point"))
}

fn orbit(h: &HamiltonianExpr, o: &OrbitSpec, tol: &Tolerances) -> Result<Orbit, RunError> {
    let x0 = start(h, &o.q, &o.p, tol)?;
    integrate(h, &x0, Window::time(o.t0, o.t1), tol).map_err(num("integration"))
}

fn orbit_csv(o: &Orbit) -> impl FnOnce(&mut Vec<u8>) -> std::io::Result<()> + '_ {
    move |w| o.write_csv(w)
}

fn flavor_name(f: Flavor) -> String {
    format!("{f:?}").to_lowercase()
}

fn expr_string(e: &Expr, n: usize) -> String {
    e.display(VarTable::phase(n).names()).to_string()
}

/// Resolves, validates and runs a scenario; nothing touches the disk.
pub fn run_scenario(s: &Scenario) -> Result<Reports, RunError> {
    let s = s.clone().resolve()?;
    let h = s.hamiltonian()?;
    let tol = &s.tolerances;
    let n = h.n();
    let mut out = Reports::default();
    let name = s.name.clone();
    let result: Value = match &s.task {
        Task::Flow(t) => {
            let x0 = start(&h, &t.q, &t.p, tol)?;
            let window = match (t.t1, t.arclength) {
                (Some(t1), _) => Window::time(t.t0, t1),
                (None, Some(l)) => Window::Arclength {
                    length: l,
                    backward: t.backward,
                    t_max: 1e6,
                },
                _ => unreachable!("checked by resolve"),
            };
            let o = integrate(&h, &x0, window, tol).map_err(num("integration"))?;
            out.csv(&format!("{name}.orbit.csv"), orbit_csv(&o));
            json!({
                "window": [o.window.0, o.window.1],
                "start": o.samples[0].1,
                "end": o.last(),
                "stats": o.stats,
            })
        }
        Task::Chord(t) => {
            let c = shoot_chord(&h, &t.q_a, &t.q_b, &t.p_guess, t.t_guess, tol).map_err(num("chord"))?;
            out.csv(&format!("{name}.orbit.csv"), orbit_csv(&c.orbit));
            json!({
                "q_a": c.q_a,
                "q_b": c.q_b,
                "p_a": c.orbit.samples[0].1.point.p,
                "duration": c.duration,
                "residual": c.residual,
                "iterations": c.iterations,
            })
        }
        Task::Jets(t) => {
            let mut rows = Vec::new();
            for z in &t.points {
                let x = certify_level_point(&h, &PhasePoint::from_z(z), tol).map_err(num("jet point"))?;
                let j = project_jet(&h, &x, t.k, tol.axis_margin).map_err(num("jet"))?;
                let infl = inflection_order(&h, &x, tol).map_err(num("inflection order"))?;
                rows.push(json!({
                    "point": x.z(),
                    "jet": j.record(),
                    "coordinate_count": j.coordinate_count(),
                    "inflection_order": infl,
                }));
            }
            json!({ "jets": rows })
        }
        Task::Intersections(t) => {
            let orbits: Vec<Orbit> = t.orbits.iter().map(|o| orbit(&h, o, tol)).collect::<Result<_, _>>()?;
            let mut pairs = Vec::new();
            let mut csv = String::from("orbit_a,orbit_b,t1,t2,");
            csv += &(1..=n).map(|i| format!("q{i}")).collect::<Vec<_>>().join(",");
            csv += ",order,epsilon,isolated\n";
            for i in 0..orbits.len() {
                for j in i + 1..orbits.len() {
                    let hits = find_intersections(&h, &orbits[i], &h, &orbits[j], t.ds, t.accept, t.samples, tol);
                    for x in &hits {
                        let q: Vec<String> = x.q.iter().map(|v| format!("{v:.15e}")).collect();
                        csv += &format!(
                            "{i},{j},{:.15e},{:.15e},{},{},{},{}\n",
                            x.t1,
                            x.t2,
                            q.join(","),
                            x.order.map(|o| o.to_string()).unwrap_or_else(|| "full".into()),
                            x.isolation.map(|r| format!("{:.6e}", r.epsilon)).unwrap_or_default(),
                            x.check.as_ref().map(|c| c.isolated.to_string()).unwrap_or_default(),
                        );
                    }
                    pairs.push(json!({ "orbits": [i, j], "intersections": hits }));
                }
            }
            out.csv(&format!("{name}.intersections.csv"), |w| {
                w.extend_from_slice(csv.as_bytes());
                Ok(())
            });
            json!({ "pairs": pairs })
        }
        Task::HomopodeScan(t) => {
            let r = scan_homopodal(&h, t.k, &t.strategy, t.budget, tol);
            out.csv(&format!("{name}.pairs.csv"), |w| r.write_csv(w));
            let pairs: Vec<Value> = r
                .pairs
                .iter()
                .map(|p| {
                    json!({
                        "x1": p.x1.z(),
                        "x2": p.x2.z(),
                        "k": p.k,
                        "flavor": flavor_name(p.flavor),
                        "residual": p.residual_norm,
                        "dim": p.est_dim.as_ref().map(|d| if d.ambiguous { json!("rank-deficient-ambiguous") } else { json!(d.dim) }),
                    })
                })
                .collect();
            json!({
                "n": r.n,
                "k": r.k,
                "budget": r.budget,
                "formula_dim": r.formula_dim,
                "pairs": pairs,
                "not_converged_count": r.not_converged,
                "converged": r.converged,
                "collapsed": r.collapsed,
                "out_of_box": r.out_of_box,
                "seed_failures": r.seed_failures,
                "iso": r.iso,
                "anti": r.anti,
                "ambiguous": r.ambiguous,
                "dim_histogram": r.dim_histogram,
                "certificate": r.certificate,
            })
        }
        Task::Dimension(t) => {
            let r = dimension_report(&h, &t.ks, t.budget, &t.perturb, &t.strategy, tol);
            out.csv(&format!("{name}.dimension.csv"), |w| r.write_csv(w));
            serde_json::to_value(&r).expect("serializable")
        }
        Task::Heart(t) => {
            let r = heart_fiber_scan(&h, &t.q, &t.center, t.grid, tol).map_err(num("heart scan"))?;
            out.csv(&format!("{name}.torus.csv"), |w| r.write_csv(w));
            json!({
                "grid": r.grid,
                "points": r.points.len(),
                "components": r.components,
                "anti_components": r.count(Flavor::Anti),
                "iso_components": r.count(Flavor::Iso),
                "inflections": r.inflections,
                "inflection_orders": r.inflection_orders,
                "stray_inflections": r.stray_inflections,
                "parallels": r.parallels,
                "max_residual": r.max_residual,
                "min_speed": r.min_speed,
            })
        }
        Task::RealizeJet(t) => {
            let chart = RadialChart::flat(n, tol);
            let mut targets: Vec<CurveJet> = t.targets.iter().map(CurveJet::from_record).collect();
            targets.extend(random_target_jets(n, t.random, t.k_max, t.amplitude, s.seed));
            let mut rows = Vec::new();
            let mut csv = String::from("index,k,roundtrip_error,autonomy_residual,h_min\n");
            let mut worst: f64 = 0.0;
            for (i, target) in targets.iter().enumerate() {
                let rj = realize_jet_hamiltonian(&chart, target, &t.options, tol).map_err(num("realize jet"))?;
                let err = rj.roundtrip_error(&chart).map_err(num("roundtrip"))?;
                let auto = rj.autonomy_residual(0.1, 11).map_err(num("autonomy"))?;
                worst = worst.max(err);
                csv += &format!("{i},{},{err:.6e},{auto:.6e},{:.6e}\n", target.k, rj.h_min_sampled);
                rows.push(json!({
                    "target": target.record(),
                    "h": expr_string(&rj.h, n),
                    "base": rj.base,
                    "roundtrip_error": err,
                    "autonomy_residual": auto,
                    "h_min_sampled": rj.h_min_sampled,
                }));
            }
            let ids = check_identities(&chart, &Expr::one(), t.identity_points, s.seed, tol).map_err(num("contact identities"))?;
            out.csv(&format!("{name}.realize.csv"), |w| {
                w.extend_from_slice(csv.as_bytes());
                Ok(())
            });
            json!({
                "chart": chart.describe(),
                "identities": ids,
                "max_roundtrip_error": worst,
                "jets": rows,
            })
        }
        Task::Resolve(t) => {
            let target = orbit(&h, &t.target, tol)?;
            let bys: Vec<Orbit> = t.bystanders.iter().map(|o| orbit(&h, o, tol)).collect::<Result<_, _>>()?;
            let res = resolve_intersection(&h, &target, &bys, &t.q_star, &t.plan, tol).map_err(num("resolve"))?;
            out.csv(&format!("{name}.target.csv"), orbit_csv(&res.target));
            json!({
                "report": res.report,
                "plan": res.plan,
                "hamiltonian": res.hamiltonian.source(),
            })
        }
    };
    let report = json!({
        "scenario": serde_json::to_value(&s).expect("serializable"),
        "task": s.task.kind(),
        "result": result,
    });
    out.json(&format!("{name}.json"), &report);
    Ok(out)
}

/// Seeded graph jets with orders cycling through `1..=k_max` and every entry in `[-amp, amp]`.
pub fn random_target_jets(n: usize, count: usize, k_max: usize, amp: f64, seed: u64) -> Vec<CurveJet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let k = 1 + i % k_max.max(1);
            let base = rng.gen_range(-amp..=amp);
            let y = (0..=k)
                .map(|_| (0..n - 1).map(|_| rng.gen_range(-amp..=amp)).collect())
                .collect();
            CurveJet {
                axis: 0,
                base,
                y,
                k,
                orientation: 1,
            }
        })
        .collect()
}

/// Wall-clock sidecar, kept apart so the reports stay byte-identical across runs.
pub fn runtime_sidecar(name: &str, seconds: f64, threads: usize) -> (String, Vec<u8>) {
    #[derive(Serialize)]
    struct Runtime<'a> {
        scenario: &'a str,
        seconds: f64,
        threads: usize,
    }
    let mut s = serde_json::to_string_pretty(&Runtime {
        scenario: name,
        seconds,
        threads,
    })
    .expect("serializable");
    s.push('\n');
    (format!("{name}.runtime.json"), s.into_bytes())
}
