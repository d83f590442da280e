//! C ABI over the podex library.
//!
//! Every function returns a [`PodexStatus`]; on failure the message is available from
//! [`podex_last_error`] on the same thread. Objects are opaque handles released with their
//! `_free` function. Arrays are caller-allocated: the caller passes a capacity, the callee
//! writes the required length and fails with `PODEX_STATUS_INVALID_ARGUMENT` when it is short.

use podex::cli::{run_scenario, ConfigError, RunError, Scenario};
use podex::flow::{integrate, Orbit, Window};
use podex::hamsys::{certify_level_point, HamError, HamiltonianExpr, PhasePoint};
use podex::homopode::{scan_homopodal, SeedStrategy};
use podex::library;
use podex::subjets::{project_jet, tangency_order, Tangency};
use podex::tol::Tolerances;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PodexStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ParseError = 3,
    DomainError = 4,
    NumericalFailure = 5,
    Panic = 6,
}

/// Opaque Hamiltonian handle.
pub struct PodexHamiltonian(HamiltonianExpr);

/// Opaque orbit handle with dense output.
pub struct PodexOrbit(Orbit);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(PodexStatus, String);

impl Failure {
    fn new(status: PodexStatus, msg: impl ToString) -> Failure {
        Failure(status, msg.to_string())
    }
}

impl From<HamError> for Failure {
    fn from(e: HamError) -> Failure {
        let status = match e {
            HamError::Parse(_) => PodexStatus::ParseError,
            HamError::Domain(_) => PodexStatus::DomainError,
            _ => PodexStatus::InvalidArgument,
        };
        Failure::new(status, e)
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PodexStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PodexStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            PodexStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::new(PodexStatus::NullPointer, format!("{what} is null"))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(PodexStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn write_out<T>(p: *mut T, v: T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(v);
    Ok(())
}

/// Copies `v` to `out` if `cap` suffices; always reports the length through `out_len`.
unsafe fn write_array(v: &[f64], out: *mut f64, cap: usize, out_len: *mut usize) -> Result<(), Failure> {
    write_out(out_len, v.len(), "out_len")?;
    if cap < v.len() {
        return Err(Failure::new(
            PodexStatus::InvalidArgument,
            format!("output needs {} entries, capacity is {cap}", v.len()),
        ));
    }
    if out.is_null() {
        return Err(null("out"));
    }
    ptr::copy_nonoverlapping(v.as_ptr(), out, v.len());
    Ok(())
}

fn phase_len(h: &HamiltonianExpr, len: usize) -> Result<(), Failure> {
    if len != 2 * h.n() {
        return Err(Failure::new(
            PodexStatus::InvalidArgument,
            format!("phase point has {len} entries, expected {}", 2 * h.n()),
        ));
    }
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. Valid until the next call.
#[no_mangle]
pub extern "C" fn podex_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Parses `src` over the variables `q1..qn, p1..pn`.
///
/// # Safety
/// `src` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn podex_hamiltonian_parse(
    src: *const c_char,
    n: usize,
    out: *mut *mut PodexHamiltonian,
) -> PodexStatus {
    guard(|| {
        let src = string(src, "src")?;
        let h = HamiltonianExpr::parse(src, n, "ffi")?;
        write_out(out, Box::into_raw(Box::new(PodexHamiltonian(h))), "out")
    })
}

/// One of the built-in models (`flat`, `pendulum`, `magnetic`, `randers`, `heart`, ...).
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn podex_hamiltonian_builtin(
    name: *const c_char,
    n: usize,
    out: *mut *mut PodexHamiltonian,
) -> PodexStatus {
    guard(|| {
        let name = string(name, "name")?;
        let h = library::builtin(name, n)?;
        write_out(out, Box::into_raw(Box::new(PodexHamiltonian(h))), "out")
    })
}

/// # Safety
/// `h` must come from a podex constructor and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn podex_hamiltonian_free(h: *mut PodexHamiltonian) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Base dimension `n`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn podex_hamiltonian_dim(h: *const PodexHamiltonian, out_n: *mut usize) -> PodexStatus {
    guard(|| write_out(out_n, handle(h, "h")?.0.n(), "out_n"))
}

/// `H(z)` at a phase point `z = (q1..qn, p1..pn)` of length `2n`.
///
/// # Safety
/// `z` must point to `len` doubles; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn podex_hamiltonian_value(
    h: *const PodexHamiltonian,
    z: *const f64,
    len: usize,
    out: *mut f64,
) -> PodexStatus {
    guard(|| {
        let h = &handle(h, "h")?.0;
        phase_len(h, len)?;
        let v = h
            .value(slice(z, len, "z")?)
            .map_err(|e| Failure::new(PodexStatus::DomainError, e))?;
        write_out(out, v, "out")
    })
}

/// Hamiltonian vector field at `z`, written to `out` (capacity `cap`, length `2n`).
///
/// # Safety
/// `z` must point to `len` doubles and `out` to `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn podex_hamiltonian_field(
    h: *const PodexHamiltonian,
    z: *const f64,
    len: usize,
    out: *mut f64,
    cap: usize,
    out_len: *mut usize,
) -> PodexStatus {
    guard(|| {
        let h = &handle(h, "h")?.0;
        phase_len(h, len)?;
        let f = h
            .field(slice(z, len, "z")?)
            .map_err(|e| Failure::new(PodexStatus::DomainError, e))?;
        write_array(&f, out, cap, out_len)
    })
}

/// Projects `z0` onto the level and integrates over `[t0, t1]` (backward when `t1 < t0`).
///
/// # Safety
/// `z0` must point to `len` doubles and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn podex_flow(
    h: *const PodexHamiltonian,
    z0: *const f64,
    len: usize,
    t0: f64,
    t1: f64,
    out: *mut *mut PodexOrbit,
) -> PodexStatus {
    guard(|| {
        let h = &handle(h, "h")?.0;
        phase_len(h, len)?;
        let tol = Tolerances::default();
        let x0 = certify_level_point(h, &PhasePoint::from_z(slice(z0, len, "z0")?), &tol)
            .map_err(|e| Failure::new(PodexStatus::InvalidArgument, e))?;
        let o = integrate(h, &x0, Window::time(t0, t1), &tol)
            .map_err(|e| Failure::new(PodexStatus::NumericalFailure, e))?;
        write_out(out, Box::into_raw(Box::new(PodexOrbit(o))), "out")
    })
}

/// # Safety
/// `o` must come from [`podex_flow`] and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn podex_orbit_free(o: *mut PodexOrbit) {
    if !o.is_null() {
        drop(Box::from_raw(o));
    }
}

/// Time window of the orbit as integrated.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn podex_orbit_window(o: *const PodexOrbit, t0: *mut f64, t1: *mut f64) -> PodexStatus {
    guard(|| {
        let (a, b) = handle(o, "o")?.0.window;
        write_out(t0, a, "t0")?;
        write_out(t1, b, "t1")
    })
}

/// Phase point at time `t` from the dense output.
///
/// # Safety
/// `out` must point to `cap` doubles; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn podex_orbit_eval(
    o: *const PodexOrbit,
    t: f64,
    out: *mut f64,
    cap: usize,
    out_len: *mut usize,
) -> PodexStatus {
    guard(|| {
        let o = &handle(o, "o")?.0;
        let z = o.eval(t).ok_or_else(|| {
            Failure::new(
                PodexStatus::InvalidArgument,
                format!("t = {t} outside the window {:?}", o.window),
            )
        })?;
        write_array(&z, out, cap, out_len)
    })
}

/// k-jet of the projected orbit through `z` as a graph over `*out_axis` (0-based).
///
/// `coeffs` receives `y^(0)..y^(k)` row by row, `(k + 1)(n - 1)` doubles.
///
/// # Safety
/// `z` must point to `len` doubles, `coeffs` to `cap` doubles; other pointers must be valid.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn podex_project_jet(
    h: *const PodexHamiltonian,
    z: *const f64,
    len: usize,
    k: usize,
    out_axis: *mut usize,
    out_base: *mut f64,
    coeffs: *mut f64,
    cap: usize,
    out_len: *mut usize,
) -> PodexStatus {
    guard(|| {
        let h = &handle(h, "h")?.0;
        phase_len(h, len)?;
        let tol = Tolerances::default();
        let x = certify_level_point(h, &PhasePoint::from_z(slice(z, len, "z")?), &tol)
            .map_err(|e| Failure::new(PodexStatus::InvalidArgument, e))?;
        let j = project_jet(h, &x, k, tol.axis_margin)
            .map_err(|e| Failure::new(PodexStatus::NumericalFailure, e))?;
        let flat: Vec<f64> = j.y.concat();
        write_array(&flat, coeffs, cap, out_len)?;
        write_out(out_axis, j.axis, "out_axis")?;
        write_out(out_base, j.base, "out_base")
    })
}

/// Tangency order of the projected orbits through `z1` (of `h1`) and `z2` (of `h2`) up to
/// `k_max`: `-1` when the base points differ, `r` for the first disagreeing order, and
/// `-2` when the jets agree through `k_max`.
///
/// # Safety
/// `z1`, `z2` must point to `len` doubles; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn podex_tangency_order(
    h1: *const PodexHamiltonian,
    z1: *const f64,
    h2: *const PodexHamiltonian,
    z2: *const f64,
    len: usize,
    k_max: usize,
    out: *mut i64,
) -> PodexStatus {
    guard(|| {
        let (h1, h2) = (&handle(h1, "h1")?.0, &handle(h2, "h2")?.0);
        phase_len(h1, len)?;
        phase_len(h2, len)?;
        let tol = Tolerances::default();
        let jet = |h: &HamiltonianExpr, z: &[f64]| {
            let x = certify_level_point(h, &PhasePoint::from_z(z), &tol)
                .map_err(|e| Failure::new(PodexStatus::InvalidArgument, e))?;
            project_jet(h, &x, k_max, tol.axis_margin).map_err(|e| Failure::new(PodexStatus::NumericalFailure, e))
        };
        let j1 = jet(h1, slice(z1, len, "z1")?)?;
        let j2 = jet(h2, slice(z2, len, "z2")?)?;
        let t = tangency_order(&j1, &j2, k_max, tol.jet_tol, tol.axis_margin)
            .map_err(|e| Failure::new(PodexStatus::NumericalFailure, e))?;
        let code = match t {
            Tangency::Disjoint => -1,
            Tangency::Order(r) => r as i64,
            Tangency::Full => -2,
        };
        write_out(out, code, "out")
    })
}

/// Seeded homopodal scan of order `k`: number of distinct pairs found and the expected
/// dimension `(3-k)(n-1)+1`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn podex_scan_homopodal(
    h: *const PodexHamiltonian,
    k: usize,
    budget: u64,
    seed: u64,
    out_pairs: *mut usize,
    out_formula_dim: *mut i64,
) -> PodexStatus {
    guard(|| {
        let h = &handle(h, "h")?.0;
        if k == 0 {
            return Err(Failure::new(PodexStatus::InvalidArgument, "k must be at least 1"));
        }
        let strategy = SeedStrategy {
            seed,
            ..Default::default()
        };
        let r = scan_homopodal(h, k, &strategy, budget, &Tolerances::default());
        write_out(out_pairs, r.pairs.len(), "out_pairs")?;
        write_out(out_formula_dim, r.formula_dim, "out_formula_dim")
    })
}

/// Runs a TOML scenario and writes its reports into `out_dir`.
///
/// # Safety
/// Both arguments must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn podex_run_scenario(toml: *const c_char, out_dir: *const c_char) -> PodexStatus {
    guard(|| {
        let src = string(toml, "toml")?;
        let dir = string(out_dir, "out_dir")?;
        let s = Scenario::from_toml(src).map_err(|e| Failure::new(PodexStatus::ParseError, e))?;
        let reports = run_scenario(&s).map_err(|e| {
            let status = match &e {
                RunError::Config(ConfigError::Syntax(_) | ConfigError::Hamiltonian(HamError::Parse(_))) => {
                    PodexStatus::ParseError
                }
                RunError::Config(_) => PodexStatus::InvalidArgument,
                _ => PodexStatus::NumericalFailure,
            };
            Failure::new(status, e)
        })?;
        reports
            .write(Path::new(dir))
            .map_err(|e| Failure::new(PodexStatus::InvalidArgument, format!("cannot write reports: {e}")))
    })
}
