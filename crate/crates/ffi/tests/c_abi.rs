use podex_ffi::*;
use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

fn last_error() -> String {
    let p = podex_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn parse(src: &str, n: usize) -> Result<*mut PodexHamiltonian, PodexStatus> {
    let src = CString::new(src).unwrap();
    let mut h = ptr::null_mut();
    match unsafe { podex_hamiltonian_parse(src.as_ptr(), n, &mut h) } {
        PodexStatus::Ok => Ok(h),
        s => Err(s),
    }
}

#[test]
fn flow_of_a_free_particle() {
    let h = parse("(p1^2 + p2^2)/2 - 1/2", 2).unwrap();
    let z0 = [0.0, 0.0, 0.6, 0.8];
    let mut v = f64::NAN;
    assert_eq!(unsafe { podex_hamiltonian_value(h, z0.as_ptr(), 4, &mut v) }, PodexStatus::Ok);
    assert!(v.abs() < 1e-15);
    let mut o = ptr::null_mut();
    assert_eq!(unsafe { podex_flow(h, z0.as_ptr(), 4, 0.0, 5.0, &mut o) }, PodexStatus::Ok);
    let (mut z, mut len) = ([0.0; 4], 0);
    assert_eq!(unsafe { podex_orbit_eval(o, 5.0, z.as_mut_ptr(), 4, &mut len) }, PodexStatus::Ok);
    assert_eq!(len, 4);
    assert!((z[0] - 3.0).abs() < 1e-12 && (z[1] - 4.0).abs() < 1e-12);
    assert_eq!(
        unsafe { podex_orbit_eval(o, 7.0, z.as_mut_ptr(), 4, &mut len) },
        PodexStatus::InvalidArgument
    );
    assert!(last_error().contains("outside the window"));
    unsafe {
        podex_orbit_free(o);
        podex_hamiltonian_free(h);
    }
}

#[test]
fn short_buffers_report_the_needed_length() {
    let name = CString::new("flat").unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { podex_hamiltonian_builtin(name.as_ptr(), 3, &mut h) }, PodexStatus::Ok);
    let z = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
    let (mut out, mut len) = ([0.0; 2], 0);
    let s = unsafe { podex_hamiltonian_field(h, z.as_ptr(), 6, out.as_mut_ptr(), 2, &mut len) };
    assert_eq!((s, len), (PodexStatus::InvalidArgument, 6));
    unsafe { podex_hamiltonian_free(h) };
}

#[test]
fn jets_and_tangency_of_tangent_circles() {
    let name = CString::new("magnetic").unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { podex_hamiltonian_builtin(name.as_ptr(), 2, &mut h) }, PodexStatus::Ok);
    let (za, zb) = ([0.0, 0.0, 1.0, 0.0], [0.0, 0.0, -1.0, 0.0]);
    let (mut axis, mut base, mut coeffs, mut len) = (9, f64::NAN, [0.0; 4], 0);
    let s = unsafe {
        podex_project_jet(h, za.as_ptr(), 4, 3, &mut axis, &mut base, coeffs.as_mut_ptr(), 4, &mut len)
    };
    assert_eq!((s, axis, len), (PodexStatus::Ok, 0, 4));
    // Unit circle through the origin, horizontal there: |y''| = 1.
    assert!((coeffs[2].abs() - 1.0).abs() < 1e-12 && coeffs[1].abs() < 1e-12);
    let mut order = 0;
    let s = unsafe { podex_tangency_order(h, za.as_ptr(), h, zb.as_ptr(), 4, 4, &mut order) };
    assert_eq!((s, order), (PodexStatus::Ok, 2));
    unsafe { podex_hamiltonian_free(h) };
}

#[test]
fn errors_carry_codes_and_messages() {
    assert_eq!(parse("p1^2 + (q1", 1).unwrap_err(), PodexStatus::ParseError);
    assert!(!last_error().is_empty());
    let mut n = 0;
    assert_eq!(unsafe { podex_hamiltonian_dim(ptr::null(), &mut n) }, PodexStatus::NullPointer);
    assert!(last_error().contains("null"));
    assert_eq!(parse("p1 - 1", 1).unwrap_err(), PodexStatus::InvalidArgument);
    let h = parse("ln(q1) + p1 - 1", 2).unwrap();
    let mut v = 0.0;
    assert_eq!(
        unsafe { podex_hamiltonian_value(h, [-1.0, 0.0, 0.0, 0.0].as_ptr(), 4, &mut v) },
        PodexStatus::DomainError
    );
    assert_eq!(
        unsafe { podex_hamiltonian_value(h, [1.0, 0.0].as_ptr(), 2, &mut v) },
        PodexStatus::InvalidArgument
    );
    assert_eq!(unsafe { podex_hamiltonian_dim(h, &mut n) }, PodexStatus::Ok);
    assert!(podex_last_error().is_null());
    unsafe { podex_hamiltonian_free(h) };
}

#[test]
fn scan_and_scenario() {
    let name = CString::new("flat").unwrap();
    let mut h = ptr::null_mut();
    unsafe { podex_hamiltonian_builtin(name.as_ptr(), 2, &mut h) };
    let (mut pairs, mut formula) = (0, 0);
    let s = unsafe { podex_scan_homopodal(h, 1, 50, 3, &mut pairs, &mut formula) };
    assert_eq!((s, formula), (PodexStatus::Ok, 3));
    assert!(pairs > 0);
    unsafe { podex_hamiltonian_free(h) };

    let dir = tempfile::tempdir().unwrap();
    let toml = CString::new(
        "name = \"line\"\n[hamiltonian]\nbuiltin = \"flat\"\nn = 2\n[task]\nkind = \"flow\"\nq = [0.0, 0.0]\np = [1.0, 0.0]\nt1 = 1.0\n",
    )
    .unwrap();
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { podex_run_scenario(toml.as_ptr(), out.as_ptr()) }, PodexStatus::Ok);
    assert!(dir.path().join("line.json").exists());
    let bad = CString::new("name = \"x\"\n[hamiltonian]\nexpr = \"p1^\"\nn = 1\n[task]\nkind = \"flow\"\nq = [0.0]\np = [1.0]\nt1 = 1.0\n").unwrap();
    assert_eq!(unsafe { podex_run_scenario(bad.as_ptr(), out.as_ptr()) }, PodexStatus::ParseError);
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/podex.h");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{}\"\nint main(void) {{ PodexHamiltonian *h = 0; return podex_hamiltonian_parse(\"p1\", 1, &h) == PODEX_STATUS_OK ? 0 : 1; }}\n",
            header.display()
        ),
    )
    .unwrap();
    let Ok(status) = Command::new("cc").args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"]).arg(&src).status() else {
        eprintln!("no C compiler; skipped");
        return;
    };
    assert!(status.success());
}
