//! C ABI over the `risloc` toolkit.
//!
//! Objects cross the boundary as opaque handles created by the
//! constructor functions and released with the matching `*_free`. Every fallible
//! function returns a [`RislocStatus`]; on failure a message is kept per
//! thread and can be read with [`risloc_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use risloc::estimator::{Estimator, EstimatorConfig};
use risloc::hcrlb::bound_at;
use risloc::ris::{optimize_phase_shifts, random_phase_shifts, PhaseShiftVector, SdrSettings};
use risloc::signal::{build_pn_covariance, sample_phase_noise, CVector, SignalModel, C64};
use risloc::{Error, Position3, ScenarioConfig};

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RislocStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DegenerateGeometry = 3,
    Singular = 4,
    SolverFailed = 5,
    SignalAbsent = 6,
    Io = 7,
    Parse = 8,
    BufferTooSmall = 9,
    Panic = 10,
    /// Scenario or input file rejected as a configuration.
    InvalidConfig = 11,
}

impl From<&Error> for RislocStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::DegenerateGeometry(_) => Self::DegenerateGeometry,
            Error::IndexOutOfRange { .. } | Error::InvalidParameter(_) => Self::InvalidArgument,
            Error::SignalAbsent(_) => Self::SignalAbsent,
            Error::Singular { .. } => Self::Singular,
            Error::Solver { .. } => Self::SolverFailed,
            Error::Config(_) => Self::InvalidConfig,
            Error::Parse { .. } => Self::Parse,
            Error::Io(_) | Error::Csv(_) => Self::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: RislocStatus, msg: impl Into<String>) -> RislocStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, converting errors and panics into status codes.
fn guard<F: FnOnce() -> Result<(), RislocStatus>>(f: F) -> RislocStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RislocStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(RislocStatus::Panic, format!("panic: {msg}"))
        }
    }
}

fn lift<T>(r: risloc::Result<T>) -> Result<T, RislocStatus> {
    r.map_err(|e| fail(RislocStatus::from(&e), e.to_string()))
}

fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, RislocStatus> {
    // SAFETY: the caller promises `p` is either null or a live handle.
    unsafe { p.as_ref() }.ok_or_else(|| fail(RislocStatus::NullPointer, format!("{what} is null")))
}

fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], RislocStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(RislocStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: the caller promises `len` readable doubles at `p`.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], RislocStatus> {
    if p.is_null() {
        return Err(fail(RislocStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: the caller promises `len` writable doubles at `p`.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

fn put<T>(out: *mut *mut T, value: T) -> Result<(), RislocStatus> {
    if out.is_null() {
        return Err(fail(RislocStatus::NullPointer, "output pointer is null"));
    }
    // SAFETY: checked non-null; the caller owns the slot.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Opaque scenario handle.
pub struct RislocScenario {
    config: ScenarioConfig,
}

/// Opaque phase-shift handle.
pub struct RislocPhases {
    w: PhaseShiftVector,
}

/// Outcome of one estimation run.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RislocEstimate {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub phi: f64,
    pub objective: f64,
    pub outer_iters: usize,
    pub inner_iters: usize,
    /// 1 if the outer loop met its tolerance.
    pub converged: i32,
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn risloc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn risloc_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn risloc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Reference scenario with `n_ris` elements (a perfect square).
///
/// # Safety
/// `out` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn risloc_scenario_reference(n_ris: usize, out: *mut *mut RislocScenario) -> RislocStatus {
    guard(|| put(out, RislocScenario { config: lift(ScenarioConfig::reference(n_ris))? }))
}

/// Scenario from TOML text.
///
/// # Safety
/// `toml` must be NULL or a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn risloc_scenario_from_toml(toml: *const c_char, out: *mut *mut RislocScenario) -> RislocStatus {
    guard(|| {
        if toml.is_null() {
            return Err(fail(RislocStatus::NullPointer, "toml is null"));
        }
        // SAFETY: non-null and NUL-terminated per the contract.
        let text = unsafe { CStr::from_ptr(toml) }.to_str().map_err(|e| fail(RislocStatus::Parse, e.to_string()))?;
        put(out, RislocScenario { config: lift(ScenarioConfig::from_toml_str(text))? })
    })
}

/// # Safety
/// `scenario` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn risloc_scenario_set_tx_power_dbm(scenario: *mut RislocScenario, dbm: f64) -> RislocStatus {
    guard(|| {
        // SAFETY: non-null checked; exclusive access per the contract.
        let s = unsafe { scenario.as_mut() }.ok_or_else(|| fail(RislocStatus::NullPointer, "scenario is null"))?;
        if !dbm.is_finite() {
            return Err(fail(RislocStatus::InvalidArgument, format!("transmit power {dbm} dBm")));
        }
        s.config = s.config.clone().with_tx_power_dbm(dbm);
        Ok(())
    })
}

/// # Safety
/// `scenario` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn risloc_scenario_n_ris(scenario: *const RislocScenario) -> usize {
    // SAFETY: per the contract.
    unsafe { scenario.as_ref() }.map_or(0, |s| s.config.ris.n_elements())
}

/// # Safety
/// `scenario` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn risloc_scenario_free(scenario: *mut RislocScenario) {
    if !scenario.is_null() {
        // SAFETY: created by Box::into_raw and freed once per the contract.
        drop(unsafe { Box::from_raw(scenario) });
    }
}

/// I.i.d. uniform phases.
///
/// # Safety
/// `out` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn risloc_phases_random(n_ris: usize, seed: u64, out: *mut *mut RislocPhases) -> RislocStatus {
    guard(|| {
        if n_ris == 0 {
            return Err(fail(RislocStatus::InvalidArgument, "n_ris must be positive"));
        }
        put(out, RislocPhases { w: random_phase_shifts(n_ris, seed) })
    })
}

/// Phase shifts from `len` angles in radians.
///
/// # Safety
/// `phases` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn risloc_phases_from_angles(phases: *const f64, len: usize, out: *mut *mut RislocPhases) -> RislocStatus {
    guard(|| {
        let p = slice(phases, len, "phases")?;
        if p.is_empty() || p.iter().any(|v| !v.is_finite()) {
            return Err(fail(RislocStatus::InvalidArgument, "phases must be non-empty and finite"));
        }
        put(out, RislocPhases { w: PhaseShiftVector::from_phases(p) })
    })
}

/// Designs phase shifts for the scenario's AOI from `samples` random AOI
/// points. Can take tens of seconds for large surfaces.
///
/// # Safety
/// `scenario` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn risloc_phases_optimize(
    scenario: *const RislocScenario,
    samples: usize,
    seed: u64,
    out: *mut *mut RislocPhases,
) -> RislocStatus {
    guard(|| {
        let s = non_null(scenario, "scenario")?;
        let model = lift(SignalModel::new(s.config.clone()))?;
        let sol = lift(optimize_phase_shifts(&model, samples, seed, &SdrSettings::default()))?;
        put(out, RislocPhases { w: sol.extracted })
    })
}

/// # Safety
/// `phases` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn risloc_phases_len(phases: *const RislocPhases) -> usize {
    // SAFETY: per the contract.
    unsafe { phases.as_ref() }.map_or(0, |p| p.w.len())
}

/// Copies the angles in radians into `out[0..len)`.
///
/// # Safety
/// `phases` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn risloc_phases_angles(phases: *const RislocPhases, out: *mut f64, len: usize) -> RislocStatus {
    guard(|| {
        let p = non_null(phases, "phases")?;
        if len < p.w.len() {
            return Err(fail(RislocStatus::BufferTooSmall, format!("need {} doubles, got {len}", p.w.len())));
        }
        let dst = slice_mut(out, len, "out")?;
        dst[..p.w.len()].copy_from_slice(&p.w.phases());
        Ok(())
    })
}

/// # Safety
/// `phases` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn risloc_phases_free(phases: *mut RislocPhases) {
    if !phases.is_null() {
        // SAFETY: created by Box::into_raw and freed once per the contract.
        drop(unsafe { Box::from_raw(phases) });
    }
}

fn model_and_w<'a>(scenario: *const RislocScenario, phases: *const RislocPhases) -> Result<(SignalModel, &'a PhaseShiftVector), RislocStatus> {
    let s = non_null(scenario, "scenario")?;
    let p = non_null(phases, "phases")?;
    if p.w.len() != s.config.ris.n_elements() {
        return Err(fail(
            RislocStatus::InvalidArgument,
            format!("{} phase shifts for {} RIS elements", p.w.len(), s.config.ris.n_elements()),
        ));
    }
    Ok((lift(SignalModel::new(s.config.clone()))?, &p.w))
}

/// Position error bound (m) and CFO/PN bound (rad^2) at a UE position.
/// Either output may be NULL.
///
/// # Safety
/// Handles must be live; outputs NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn risloc_peb(
    scenario: *const RislocScenario,
    phases: *const RislocPhases,
    x: f64,
    y: f64,
    z: f64,
    peb: *mut f64,
    cfo_pn_bound: *mut f64,
) -> RislocStatus {
    guard(|| {
        let (model, w) = model_and_w(scenario, phases)?;
        let cfg = model.config();
        let pn = lift(build_pn_covariance(cfg.n_subcarriers, cfg.pn_increment_var))?;
        let b = lift(bound_at(&model, &pn, &Position3::new(x, y, z), w.as_vector()))?;
        // SAFETY: each output is NULL or writable per the contract.
        unsafe {
            if let Some(p) = peb.as_mut() {
                *p = b.peb;
            }
            if let Some(p) = cfo_pn_bound.as_mut() {
                *p = b.cfo_pn_bound;
            }
        }
        Ok(())
    })
}

/// Number of pilot subcarriers, i.e. the length of a received vector.
///
/// # Safety
/// `scenario` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn risloc_scenario_subcarriers(scenario: *const RislocScenario) -> usize {
    // SAFETY: per the contract.
    unsafe { scenario.as_ref() }.map_or(0, |s| s.config.n_subcarriers)
}

/// Synthesizes a received vector at a UE position with CFO `phi`, a phase
/// noise path and receiver noise drawn from `seed`. Writes `len` real and
/// imaginary parts.
///
/// # Safety
/// Handles must be live; `re` and `im` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn risloc_synthesize(
    scenario: *const RislocScenario,
    phases: *const RislocPhases,
    x: f64,
    y: f64,
    z: f64,
    phi: f64,
    seed: u64,
    re: *mut f64,
    im: *mut f64,
    len: usize,
) -> RislocStatus {
    guard(|| {
        let (model, w) = model_and_w(scenario, phases)?;
        let n = model.n();
        if len < n {
            return Err(fail(RislocStatus::BufferTooSmall, format!("need {n} samples, got {len}")));
        }
        let cfg = model.config();
        let pn = lift(build_pn_covariance(cfg.n_subcarriers, cfg.pn_increment_var))?;
        let theta = sample_phase_noise(&pn, seed);
        let sig = lift(model.synthesize_received(&Position3::new(x, y, z), w.as_vector(), phi, &theta, seed.wrapping_add(1)))?;
        let (re, im) = (slice_mut(re, len, "re")?, slice_mut(im, len, "im")?);
        for (k, v) in sig.y.iter().enumerate() {
            re[k] = v.re;
            im[k] = v.im;
        }
        Ok(())
    })
}

/// Joint CFO, phase-noise and position estimation from a received vector,
/// starting at the AOI center with default settings.
///
/// # Safety
/// Handles must be live; `re` and `im` must hold `len` doubles; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn risloc_estimate(
    scenario: *const RislocScenario,
    phases: *const RislocPhases,
    re: *const f64,
    im: *const f64,
    len: usize,
    out: *mut RislocEstimate,
) -> RislocStatus {
    guard(|| {
        let (model, w) = model_and_w(scenario, phases)?;
        if len != model.n() {
            return Err(fail(RislocStatus::InvalidArgument, format!("expected {} samples, got {len}", model.n())));
        }
        let (re, im) = (slice(re, len, "re")?, slice(im, len, "im")?);
        if out.is_null() {
            return Err(fail(RislocStatus::NullPointer, "out is null"));
        }
        let y = nalgebra_vector(re, im);
        let cfg = model.config();
        let pn = lift(build_pn_covariance(cfg.n_subcarriers, cfg.pn_increment_var))?;
        let est = lift(Estimator::new(&model, &pn, w.as_vector(), EstimatorConfig::for_model(&model)))?;
        let s = lift(est.run(&y))?;
        let p = s.position();
        // SAFETY: checked non-null above.
        unsafe {
            *out = RislocEstimate {
                x: p.x,
                y: p.y,
                z: p.z,
                phi: s.phi_hat,
                objective: s.objective,
                outer_iters: s.outer_iters,
                inner_iters: s.inner_iters,
                converged: s.converged as i32,
            };
        }
        Ok(())
    })
}

fn nalgebra_vector(re: &[f64], im: &[f64]) -> CVector {
    CVector::from_iterator(re.len(), re.iter().zip(im).map(|(&a, &b)| C64::new(a, b)))
}
