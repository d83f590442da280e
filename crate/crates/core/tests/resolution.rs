use podex::flow::{integrate, Orbit, Window};
use podex::hamsys::{certify_level_point, HamiltonianExpr, PhasePoint};
use podex::library;
use podex::perturb::{resolve_intersection, PlanOptions};
use podex::subjets::find_intersections;
use podex::tol::Tolerances;

fn chord(h: &HamiltonianExpr, q: [f64; 3], p: [f64; 3]) -> Orbit {
    let tol = Tolerances::default();
    let x = certify_level_point(h, &PhasePoint::new(q.to_vec(), p.to_vec()), &tol).unwrap();
    integrate(h, &x, Window::time(0.0, 2.0), &tol).unwrap()
}

fn meetings(h: &HamiltonianExpr, a: &Orbit, b: &Orbit) -> usize {
    find_intersections(h, a, h, b, 0.005, 1e-9, 100, &Tolerances::default()).len()
}

/// Three unit-speed chords through the origin are separated one at a time.
#[test]
fn triple_crossing_needs_two_resolutions() {
    let tol = Tolerances::default();
    let h = library::flat(3);
    let s = 0.5f64.sqrt();
    let a = chord(&h, [-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]);
    let b = chord(&h, [0.0, -1.0, 0.0], [0.0, 1.0, 0.0]);
    let c = chord(&h, [-s, -s, 0.0], [s, s, 0.0]);
    assert_eq!(meetings(&h, &a, &b) + meetings(&h, &a, &c) + meetings(&h, &b, &c), 3);

    let opts = PlanOptions::default();
    let first = resolve_intersection(&h, &a, &[b, c], &[0.0; 3], &opts, &tol).unwrap();
    let h1 = first.hamiltonian.clone();
    let (a1, b1, c1) = (&first.target, &first.bystanders[0], &first.bystanders[1]);
    assert!(first.report.bystander_change <= 1e-9);
    assert_eq!(meetings(&h1, a1, b1) + meetings(&h1, a1, c1), 0);
    assert_eq!(meetings(&h1, b1, c1), 1);

    let second = resolve_intersection(&h1, b1, &[a1.clone(), c1.clone()], &[0.0; 3], &opts, &tol).unwrap();
    let h2 = &second.hamiltonian;
    let (b2, a2, c2) = (&second.target, &second.bystanders[0], &second.bystanders[1]);
    assert!(second.report.bystander_change <= 1e-9);
    assert!(second.report.clearance >= tol.clearance_min);
    assert_eq!(meetings(h2, a2, b2) + meetings(h2, a2, c2) + meetings(h2, b2, c2), 0);
}
