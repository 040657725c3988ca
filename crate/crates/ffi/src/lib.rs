//! C interface to the moment-closure library.
//!
//! Objects are opaque handles created by `mc_*_new`/`mc_*_load` and released
//! by the matching `mc_*_free`. Every fallible call returns an `McStatus`;
//! on failure `mc_last_error` gives the message for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use moment_closure::closure::{ClosureKind, ClosureModel};
use moment_closure::hyperbolicity::constrain_outputs;
use moment_closure::moment_system::{solve_moment_system, MomentField, RunStatus, Source, SystemSpec};
use moment_closure::quadrature::{gauss_rule, QuadratureKind};
use moment_closure::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McStatus {
    Ok = 0,
    InvalidArgument = 1,
    Config = 2,
    BlowUp = 3,
    Io = 4,
    Numerical = 5,
    NullPointer = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McClosureKind {
    Pn = 0,
    Lm = 1,
    Lg = 2,
    LgHyper = 3,
}

impl From<ClosureKind> for McClosureKind {
    fn from(k: ClosureKind) -> Self {
        match k {
            ClosureKind::Pn => McClosureKind::Pn,
            ClosureKind::Lm => McClosureKind::Lm,
            ClosureKind::Lg => McClosureKind::Lg,
            ClosureKind::LgHyper => McClosureKind::LgHyper,
        }
    }
}

/// A trained (or P_N) closure.
pub struct McModel {
    inner: ClosureModel,
}

/// A deterministic moment system and its current state.
pub struct McSolver {
    spec: SystemSpec,
    state: MomentField,
    dx: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> McStatus {
    match e {
        Error::InvalidArgument(_) | Error::Precondition(_) => McStatus::InvalidArgument,
        Error::Config(_) => McStatus::Config,
        Error::BlowUp { .. } => McStatus::BlowUp,
        Error::Io { .. } | Error::Format { .. } => McStatus::Io,
        _ => McStatus::Numerical,
    }
}

/// Runs `f`, converting errors and panics into a status plus a message.
fn guard<F: FnOnce() -> Result<(), (McStatus, String)>>(f: F) -> McStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => McStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            McStatus::Panic
        }
    }
}

fn lib<T>(r: moment_closure::Result<T>) -> Result<T, (McStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (McStatus, String) {
    (McStatus::NullPointer, format!("{what} is null"))
}

/// Message of the last failed call on this thread; empty if none. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn mc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// `n`-point Gauss-Hermite rule for the weight `e^{-v^2}`.
///
/// # Safety
/// `nodes` and `weights` must point to `n` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mc_gauss_hermite(n: usize, nodes: *mut f64, weights: *mut f64) -> McStatus {
    guard(|| {
        if nodes.is_null() || weights.is_null() {
            return Err(null("output buffer"));
        }
        let rule = lib(gauss_rule(QuadratureKind::GaussHermite, n))?;
        std::slice::from_raw_parts_mut(nodes, n).copy_from_slice(&rule.nodes);
        std::slice::from_raw_parts_mut(weights, n).copy_from_slice(&rule.weights);
        Ok(())
    })
}

/// Hyperbolicity-constrained head outputs for order `n`.
///
/// # Safety
/// `raw` and `out` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mc_constrain_outputs(raw: *const f64, len: usize, n: usize, eps: f64, out: *mut f64) -> McStatus {
    guard(|| {
        if raw.is_null() || out.is_null() {
            return Err(null("buffer"));
        }
        let c = lib(constrain_outputs(std::slice::from_raw_parts(raw, len), n, eps))?;
        if c.len() != len {
            return Err((McStatus::InvalidArgument, format!("head for N = {n} has {} outputs, got {len}", c.len())));
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&c);
        Ok(())
    })
}

/// The P_N closure of order `n` (deterministic).
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn mc_model_pn(n: usize, out: *mut *mut McModel) -> McStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if n < 1 {
            return Err((McStatus::InvalidArgument, "N must be at least 1".into()));
        }
        *out = Box::into_raw(Box::new(McModel {
            inner: ClosureModel::pn(n, 0),
        }));
        Ok(())
    })
}

/// Loads a checkpoint written by the `train` command.
///
/// # Safety
/// `path` must be a NUL-terminated string, `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn mc_model_load(path: *const c_char, out: *mut *mut McModel) -> McStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (McStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let inner = lib(ClosureModel::load(Path::new(p)))?;
        *out = Box::into_raw(Box::new(McModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mc_model_free(model: *mut McModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// All pointers must be valid; output pointers may be null to skip them.
#[no_mangle]
pub unsafe extern "C" fn mc_model_info(
    model: *const McModel,
    kind: *mut McClosureKind,
    n: *mut usize,
    k: *mut usize,
) -> McStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if !kind.is_null() {
            *kind = m.inner.kind.into();
        }
        if !n.is_null() {
            *n = m.inner.n;
        }
        if !k.is_null() {
            *k = m.inner.k;
        }
        Ok(())
    })
}

/// Predicted `d_x m_{N+1}` for `rows` points. `m` and `dxm` hold
/// `rows * (N+1)(K+1)` values row by row, `out` receives `rows * (K+1)`.
///
/// # Safety
/// Buffers must have the sizes above.
#[no_mangle]
pub unsafe extern "C" fn mc_model_predict_gradient(
    model: *const McModel,
    m: *const f64,
    dxm: *const f64,
    rows: usize,
    out: *mut f64,
) -> McStatus {
    guard(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        if m.is_null() || dxm.is_null() || out.is_null() {
            return Err(null("buffer"));
        }
        let d = model.feature_dim();
        let mv = ndarray::ArrayView2::from_shape((rows, d), std::slice::from_raw_parts(m, rows * d)).expect("sized");
        let gv = ndarray::ArrayView2::from_shape((rows, d), std::slice::from_raw_parts(dxm, rows * d)).expect("sized");
        let pred = lib(model.predict_gradient_batch(mv, gv))?;
        std::slice::from_raw_parts_mut(out, rows * (model.k + 1)).copy_from_slice(pred.as_slice().expect("standard"));
        Ok(())
    })
}

/// Deterministic moment system with collision frequency `sigma`, started from
/// `initial` (`nx * (N+1)` values, point-major) on a periodic grid of spacing
/// `dx`. `alpha_lf` and `cfl` take their defaults (5 and 0.1) when `<= 0`.
///
/// # Safety
/// `model` must be valid, `initial` must hold `nx * (N+1)` values.
#[no_mangle]
pub unsafe extern "C" fn mc_solver_new(
    model: *const McModel,
    sigma: f64,
    alpha_lf: f64,
    cfl: f64,
    initial: *const f64,
    nx: usize,
    dx: f64,
    out: *mut *mut McSolver,
) -> McStatus {
    guard(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        if initial.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        if model.k != 0 {
            return Err((McStatus::Config, "the C solver is deterministic (K = 0)".into()));
        }
        if !(dx > 0.0) || nx < 7 {
            return Err((McStatus::InvalidArgument, format!("need dx > 0 and nx >= 7, got dx = {dx}, nx = {nx}")));
        }
        let mut spec = lib(SystemSpec::new(model.clone(), Source::Constant(sigma)))?;
        if alpha_lf > 0.0 {
            spec = lib(spec.with_alpha(alpha_lf))?;
        }
        if cfl > 0.0 {
            spec = lib(spec.with_cfl(cfl))?;
        }
        let mut state = MomentField::zeros(nx, model.n, 0);
        let len = state.data.len();
        state.data.copy_from_slice(std::slice::from_raw_parts(initial, len));
        *out = Box::into_raw(Box::new(McSolver { spec, state, dx }));
        Ok(())
    })
}

/// # Safety
/// `solver` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mc_solver_free(solver: *mut McSolver) {
    if !solver.is_null() {
        drop(Box::from_raw(solver));
    }
}

/// Advances by `duration`. Returns `BlowUp` (state unchanged) if the run
/// leaves the finite range.
///
/// # Safety
/// `solver` must be valid; `t_now` may be null.
#[no_mangle]
pub unsafe extern "C" fn mc_solver_advance(solver: *mut McSolver, duration: f64, t_now: *mut f64) -> McStatus {
    guard(|| {
        let s = solver.as_mut().ok_or_else(|| null("solver"))?;
        let run = lib(solve_moment_system(&s.state, &s.spec, s.dx, duration, usize::MAX))?;
        if let RunStatus::BlowUp { t, step } = run.status {
            return Err((McStatus::BlowUp, Error::BlowUp { t: s.state.t + t, step }.to_string()));
        }
        let t0 = s.state.t;
        s.state = run.last().clone();
        s.state.t = t0 + duration;
        if !t_now.is_null() {
            *t_now = s.state.t;
        }
        Ok(())
    })
}

/// Copies the state (`nx * (N+1)` values) into `out`.
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mc_solver_state(solver: *const McSolver, out: *mut f64, len: usize) -> McStatus {
    guard(|| {
        let s = solver.as_ref().ok_or_else(|| null("solver"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if len != s.state.data.len() {
            return Err((
                McStatus::InvalidArgument,
                format!("state has {} values, buffer has {len}", s.state.data.len()),
            ));
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&s.state.data);
        Ok(())
    })
}

/// `sum_j m_0(x_j) dx` of the current state.
///
/// # Safety
/// `solver` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mc_solver_mass(solver: *const McSolver, out: *mut f64) -> McStatus {
    guard(|| {
        let s = solver.as_ref().ok_or_else(|| null("solver"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = s.state.mass(0, s.dx);
        Ok(())
    })
}
