//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

use podex::cli::{dimension_report, heart_fiber_scan, random_target_jets, BumpSpec, DimensionRow};
use podex::contact::{
    build_radial_chart, check_identities, jet_error, realize_jet_hamiltonian, RadialChart, RealizeOptions,
};
use podex::expr::Expr;
use podex::flow::{integrate, Orbit, Window};
use podex::hamsys::{certify_level_point, eval_ham, HamiltonianExpr, LevelPoint, PhasePoint};
use podex::homopode::{fiber_point_along_ray, scan_homopodal, Flavor, HomopodalPair, SeedStrategy, Solver};
use podex::library;
use podex::perturb::{bump_perturb, plan_resolution, resolve_intersection, PerturbError, PlanOptions};
use podex::subjets::{find_intersections, project_jet};
use podex::tol::Tolerances;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::{Duration, Instant};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn tol() -> Tolerances {
    Tolerances::default()
}

fn perturbed_flat(n: usize) -> HamiltonianExpr {
    bump_perturb(&library::flat(n), &vec![0.0; n], 1e-2, 3.0, 7)
}

fn strategy() -> SeedStrategy {
    SeedStrategy {
        seed: 1,
        ..Default::default()
    }
}

fn lp(h: &HamiltonianExpr, q: &[f64], p: &[f64]) -> LevelPoint {
    certify_level_point(h, &PhasePoint::new(q.to_vec(), p.to_vec()), &tol()).expect("level point")
}

fn orbit(h: &HamiltonianExpr, q: &[f64], p: &[f64], t0: f64, t1: f64) -> Orbit {
    integrate(h, &lp(h, q, p), Window::time(t0, t1), &tol()).expect("orbit")
}

fn ray_orbit(h: &HamiltonianExpr, q: &[f64], w: &[f64], t0: f64, t1: f64) -> Orbit {
    let x = fiber_point_along_ray(h, q, &vec![0.0; q.len()], &unit(w), &tol()).expect("ray");
    integrate(h, &x, Window::time(t0, t1), &tol()).expect("orbit")
}

fn unit(w: &[f64]) -> Vec<f64> {
    let n = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    w.iter().map(|v| v / n).collect()
}

fn dims_row(rows: &[DimensionRow], k: usize, variant: &str) -> DimensionRow {
    rows.iter()
        .find(|r| r.k == k && r.variant == variant)
        .cloned()
        .expect("row")
}

fn generic_dimensions(rows: &[DimensionRow], elapsed: Duration) -> Outcome {
    let mut pass = elapsed <= Duration::from_secs(300);
    let mut parts = Vec::new();
    for k in 1..=3 {
        let r = dims_row(rows, k, "perturbed");
        let exact = r.dims.keys().all(|d| *d == r.formula) && !r.dims.is_empty();
        pass &= r.pairs >= 20 && r.ambiguous == 0 && exact && r.formula == (3 - k as i64) + 1;
        parts.push(format!("k={k}: {} pairs, dims {:?}, ambiguous {}", r.pairs, r.dims, r.ambiguous));
    }
    outcome(pass, format!("{} ({elapsed:.1?})", parts.join("; ")))
}

fn non_genericity(rows: &[DimensionRow], elapsed: Duration) -> Outcome {
    let base = dims_row(rows, 2, "base");
    let pert = dims_row(rows, 2, "perturbed");
    let base_three = base.pairs > 0 && base.dims.keys().all(|d| *d == 3) && base.non_generic;
    let restored = pert.pairs > 0 && pert.dims.keys().all(|d| *d == 2) && !pert.non_generic;
    outcome(
        base_three && restored && elapsed <= Duration::from_secs(120),
        format!(
            "flat k=2 dims {:?}, perturbed k=2 dims {:?} ({elapsed:.1?})",
            base.dims, pert.dims
        ),
    )
}

fn emptiness() -> Outcome {
    let t = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for (n, k) in [(3, 4), (2, 5)] {
        let r = scan_homopodal(&perturbed_flat(n), k, &strategy(), 100_000, &tol());
        pass &= r.pairs.is_empty() && r.formula_dim < 0;
        parts.push(format!(
            "n={n} k={k}: formula {}, {} pairs, {} non-converged",
            r.formula_dim,
            r.pairs.len(),
            r.not_converged
        ));
    }
    let elapsed = t.elapsed();
    pass &= elapsed <= Duration::from_secs(900);
    outcome(pass, format!("{} ({elapsed:.1?})", parts.join("; ")))
}

fn heart() -> Outcome {
    let t = Instant::now();
    let h = library::heart(library::HEART_B);
    let r = match heart_fiber_scan(&h, &[0.0, 0.0], &[0.0, 0.0], 360, &tol()) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let anti: Vec<_> = r.components.iter().filter(|c| c.flavor == Flavor::Anti).collect();
    let iso: Vec<_> = r.components.iter().filter(|c| c.flavor == Flavor::Iso).collect();
    let pass = r.components.len() == 2
        && anti.len() == 1
        && iso.len() == 1
        && !anti[0].contractible
        && iso[0].contractible
        && r.inflection_orders == vec![1, 1]
        && r.stray_inflections == 0
        && t.elapsed() <= Duration::from_secs(120);
    outcome(
        pass,
        format!(
            "components {:?}, inflection orders {:?} ({:.1?})",
            r.components
                .iter()
                .map(|c| (c.flavor, c.winding, c.contractible))
                .collect::<Vec<_>>(),
            r.inflection_orders,
            t.elapsed()
        ),
    )
}

fn realization() -> Outcome {
    let t = Instant::now();
    let mut ok = 0;
    let mut worst: f64 = 0.0;
    for (n, seed) in [(2, 11), (3, 12)] {
        let chart = RadialChart::flat(n, &tol());
        for target in random_target_jets(n, 50, 4, 0.2, seed) {
            let err = realize_jet_hamiltonian(&chart, &target, &RealizeOptions::default(), &tol())
                .and_then(|rj| rj.roundtrip_error(&chart));
            if let Ok(e) = err {
                worst = worst.max(e);
                ok += usize::from(e <= 1e-5);
            }
        }
    }
    outcome(
        ok == 100 && t.elapsed() <= Duration::from_secs(180),
        format!("{ok}/100 within 1e-5, worst {worst:.2e} ({:.1?})", t.elapsed()),
    )
}

fn contact_identities() -> Outcome {
    let mut charts = vec![
        ("flat n=2", RadialChart::flat(2, &tol())),
        ("flat n=3", RadialChart::flat(3, &tol())),
    ];
    let hh = library::heart(library::HEART_B);
    let x0 = fiber_point_along_ray(&hh, &[0.0, 0.0], &[0.0, 0.0], &[1.0, 0.0], &tol()).expect("heart ray");
    match build_radial_chart(&hh, &x0, &[0.0, 0.0], 0.5, 1.0, &tol(), 3) {
        Ok(c) => charts.push(("heart", c)),
        Err(e) => return outcome(false, format!("heart chart: {e}")),
    }
    let mut worst = [0.0f64; 5];
    for (i, (_, chart)) in charts.iter().enumerate() {
        let n = chart.n();
        let hs = [
            Expr::one(),
            library::parse_phase_fn("1 + 0.2*sin(q1)", n).unwrap(),
            library::random_positive_factor(n, 5 + i as u64),
        ];
        for h in &hs {
            match check_identities(chart, h, 50, 1 + i as u64, &tol()) {
                Ok(r) => {
                    for (w, v) in worst.iter_mut().zip([
                        r.reeb_alpha,
                        r.reeb_iota,
                        r.dlambda_omega,
                        r.liouville,
                        r.hamiltonian_crosscheck,
                    ]) {
                        *w = w.max(v);
                    }
                }
                Err(e) => return outcome(false, e.to_string()),
            }
        }
    }
    let pass = worst[0] <= 1e-9 && worst[1] <= 1e-9 && worst[2] <= 1e-12 && worst[3] <= 1e-12 && worst[4] <= 1e-8;
    outcome(
        pass,
        format!(
            "alpha(R)-1 {:.1e}, iota_R dalpha {:.1e}, dlambda-omega {:.1e}, iota_Y omega-lambda {:.1e}, R_h cross-check {:.1e}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

fn reparametrization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    for i in 0..50u64 {
        let n = 2 + (i % 2) as usize;
        let h = library::random_metric(n, 100 + i);
        let g = library::random_positive_factor(n, 200 + i);
        let gh = h.scaled_by(&g, "gH").expect("scaled");
        let q: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let Some(x) = fiber_point_along_ray(&h, &q, &vec![0.0; n], &unit(&w), &tol()) else {
            continue;
        };
        let k = 1 + (i % 4) as usize;
        let (Ok(a), Ok(b)) = (project_jet(&h, &x, k, 0.2), project_jet(&gh, &x, k, 0.2)) else {
            return outcome(false, format!("jet failed at triple {i}"));
        };
        if a.axis != b.axis {
            return outcome(false, format!("axis mismatch at triple {i}"));
        }
        worst = worst.max(jet_error(&b, &a));
        done += 1;
    }
    outcome(
        done == 50 && worst <= 1e-9,
        format!("{done}/50 triples, worst jet difference {worst:.2e}"),
    )
}

fn isolation() -> Outcome {
    let flat2 = library::flat(2);
    let flat3 = library::flat(3);
    let mag = library::magnetic(1.0);
    let rm = library::random_metric(2, 3);
    let cases: Vec<(&str, &HamiltonianExpr, Orbit, Orbit)> = vec![
        (
            "flat lines",
            &flat2,
            orbit(&flat2, &[-1.0, 0.0], &[1.0, 0.0], 0.0, 2.0),
            orbit(&flat2, &[0.0, -1.0], &unit(&[0.6, 0.8]), 0.0, 2.0),
        ),
        (
            "flat lines n=3",
            &flat3,
            orbit(&flat3, &[-1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], 0.0, 2.0),
            orbit(&flat3, &[0.0, -1.0, 0.0], &[0.0, 1.0, 0.0], 0.0, 2.0),
        ),
        (
            "tangent circles",
            &mag,
            orbit(&mag, &[0.0, 0.0], &[1.0, 0.0], -1.5, 1.5),
            orbit(&mag, &[0.0, 0.0], &[-1.0, 0.0], -1.5, 1.5),
        ),
        (
            "circle and chord",
            &mag,
            orbit(&mag, &[0.0, 0.0], &[1.0, 0.0], -1.5, 1.5),
            orbit(&mag, &[0.0, -0.5], &[0.25, 1.0], 0.0, 1.5),
        ),
        (
            "random metric geodesics",
            &rm,
            ray_orbit(&rm, &[-0.5, 0.0], &[1.0, 0.1], -0.2, 1.2),
            ray_orbit(&rm, &[0.0, -0.5], &[0.1, 1.0], -0.2, 1.2),
        ),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    let mut total = 0;
    for (name, h, a, b) in &cases {
        let hits = find_intersections(h, a, h, b, 0.01, 1e-9, 10_000, &tol());
        pass &= !hits.is_empty();
        for x in &hits {
            total += 1;
            let eps = x.isolation.map(|r| r.epsilon).unwrap_or(0.0);
            let clean = x.check.as_ref().is_some_and(|c| c.isolated && c.samples >= 10_000);
            pass &= x.order.is_some() && eps > 0.0 && clean;
            parts.push(format!("{name}: order {:?}, eps {eps:.2e}", x.order));
        }
    }
    outcome(pass && total > 0, parts.join("; "))
}

fn resolution() -> Outcome {
    let t = Instant::now();
    let h = library::flat(3);
    let target = orbit(&h, &[-1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], 0.0, 2.0);
    let bystander = orbit(&h, &[0.0, -1.0, 0.0], &[0.0, 1.0, 0.0], 0.0, 2.0);
    let opts = PlanOptions::default();
    let res = match resolve_intersection(&h, &target, &[bystander], &[0.0; 3], &opts, &tol()) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let rep = &res.report;
    let h2 = library::flat(2);
    let t2 = orbit(&h2, &[-1.0, 0.0], &[1.0, 0.0], 0.0, 2.0);
    let b2 = orbit(&h2, &[0.0, -1.0], &[0.0, 1.0], 0.0, 2.0);
    let rejected = matches!(
        plan_resolution(&h2, &t2, &[b2], &[0.0; 2], &opts, &tol()),
        Err(PerturbError::Dimension(2))
    );
    let pass = rep.clearance >= tol().clearance_min
        && rep.sweep_stats.contacts == 0
        && rep.bystander_change <= 1e-9
        && rejected
        && t.elapsed() <= Duration::from_secs(120);
    outcome(
        pass,
        format!(
            "r {:?}, clearance {:.3e}, bystander change {:.1e}, n=2 rejected {rejected} ({:.1?})",
            rep.r_selected,
            rep.clearance,
            rep.bystander_change,
            t.elapsed()
        ),
    )
}

fn multi_indices(m: usize, order: usize) -> Vec<Vec<u8>> {
    if m == 0 {
        return if order == 0 { vec![vec![]] } else { vec![] };
    }
    let mut out = Vec::new();
    for a in 0..=order {
        for mut rest in multi_indices(m - 1, order - a) {
            rest.insert(0, a as u8);
            out.push(rest);
        }
    }
    out
}

fn backbone(pairs: &[(HamiltonianExpr, HomopodalPair)]) -> Outcome {
    let t = tol();
    // Each order-j partial against a central difference of the order-(j-1) partials.
    let mut deriv_err: f64 = 0.0;
    let step = 1e-5;
    let hams = [library::random_metric(2, 21), library::pendulum(2, 2.0), library::magnetic(1.0)];
    for h in &hams {
        let m = 2 * h.n();
        for z in [[0.1, -0.2, 0.7, 0.4], [-0.3, 0.25, -0.5, 0.9]] {
            let x = PhasePoint::from_z(&z);
            let d = eval_ham(h, &x, 4, &t).expect("derivatives");
            for order in 1..=4 {
                for alpha in multi_indices(m, order) {
                    let v = alpha.iter().position(|a| *a > 0).unwrap();
                    let mut lower = alpha.clone();
                    lower[v] -= 1;
                    let side = |s: f64| {
                        let mut zz = z;
                        zz[v] += s * step;
                        eval_ham(h, &PhasePoint::from_z(&zz), order - 1, &t)
                            .expect("derivatives")
                            .derivative(&lower)
                    };
                    let fd = (side(1.0) - side(-1.0)) / (2.0 * step);
                    let exact = d.derivative(&alpha);
                    deriv_err = deriv_err.max((exact - fd).abs() / exact.abs().max(1.0));
                }
            }
        }
    }
    let mut drift: f64 = 0.0;
    let flows: [(HamiltonianExpr, [f64; 2], [f64; 2]); 3] = [
        (library::pendulum(2, 2.0), [0.3, 0.0], [1.0, 0.3]),
        (library::magnetic(1.0), [0.0, 0.0], [1.0, 0.0]),
        (library::random_metric(2, 21), [0.1, -0.2], [0.7, 0.4]),
    ];
    for (h, q, w) in &flows {
        let x0 = fiber_point_along_ray(h, q, &[0.0, 0.0], &unit(w), &t).expect("start");
        match integrate(h, &x0, Window::arclength(50.0), &t) {
            Ok(o) => {
                drift = drift.max(o.stats.max_pre_projection_drift);
                for (_, s) in &o.samples {
                    drift = drift.max(h.value(&s.z()).unwrap().abs());
                }
            }
            Err(e) => return outcome(false, format!("flow: {e}")),
        }
    }
    let mut rich: f64 = 0.0;
    for (h, p) in pairs.iter().take(10) {
        let mut s = Solver::new(h, p.k, &t);
        match s.richardson_error(&p.x1.z(), &p.x2.z(), p.axis, 1e-3) {
            Ok(e) => rich = rich.max(e),
            Err(e) => return outcome(false, format!("richardson: {e}")),
        }
    }
    outcome(
        deriv_err <= 1e-5 && drift <= 1e-9 && rich <= 1e-4 && !pairs.is_empty(),
        format!(
            "derivative rel. error {deriv_err:.1e}, energy drift {drift:.1e}, Richardson {rich:.1e} over {} pairs",
            pairs.len().min(10)
        ),
    )
}

/// Runs every criterion, or only those whose numbers are given as arguments.
fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |i: usize| only.is_empty() || only.contains(&i);
    let tol = tol();
    let mut dims = None;
    if wanted(1) || wanted(2) {
        let t = Instant::now();
        let bump = BumpSpec {
            center: vec![0.0; 2],
            ..Default::default()
        };
        let r = dimension_report(&library::flat(2), &[1, 2, 3], 400, &bump, &strategy(), &tol);
        dims = Some((r.rows, t.elapsed()));
    }
    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, "generic dimensions", Box::new(|| {
            let (rows, el) = dims.as_ref().unwrap();
            generic_dimensions(rows, *el)
        })),
        (2, "non-genericity detection", Box::new(|| {
            let (rows, el) = dims.as_ref().unwrap();
            non_genericity(rows, *el)
        })),
        (3, "emptiness certificate", Box::new(emptiness)),
        (4, "heart fiber", Box::new(heart)),
        (5, "jet realization roundtrip", Box::new(realization)),
        (6, "contact identities", Box::new(contact_identities)),
        (7, "reparametrization invariance", Box::new(reparametrization)),
        (8, "isolation", Box::new(isolation)),
        (9, "resolution", Box::new(resolution)),
        (10, "numerical backbone", Box::new(|| {
            let h = perturbed_flat(2);
            let scan = scan_homopodal(&h, 2, &strategy(), 100, &tol);
            let pairs: Vec<_> = scan.pairs.iter().map(|p| (h.clone(), p.clone())).collect();
            backbone(&pairs)
        })),
    ];
    let (mut run, mut failed) = (0, 0);
    for (i, name, check) in &criteria {
        if !wanted(*i) {
            continue;
        }
        let o = check();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {i:>2} {tag} {name}: {}", o.detail);
        run += 1;
        failed += usize::from(!o.pass);
    }
    println!("{}/{run} criteria passed", run - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
