//! C ABI over `diracwave`.
//!
//! Every function returns a [`DwStatus`]. On failure the message is kept per
//! thread and can be read with [`dw_last_error`]. Objects are opaque handles
//! created by `*_new`/`*_from_*` functions and released by the matching
//! `*_free`.

use diracwave::experiments::{run_experiment, ExperimentConfig};
use diracwave::greens_slab::{slab_tr, Discretization, PotentialRep};
use diracwave::spectral_basis::YProfile;
use diracwave::tr_merge::{extract_smatrix, TRMatrix};
use diracwave::Error;
use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DwStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BandEdge = 3,
    IllConditioned = 4,
    Mismatch = 5,
    MissingSamples = 6,
    Io = 7,
    Config = 8,
    Iterate = 9,
    Panic = 98,
    Other = 99,
}

/// y-dependence of the potential coefficients.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DwProfile {
    Hermite = 0,
    Scaled = 1,
    Constant = 2,
}

/// Opaque potential.
pub struct DwPotential(PotentialRep);

/// Opaque TR matrix at one energy.
pub struct DwTr(TRMatrix);

/// Opaque experiment configuration.
pub struct DwConfig(ExperimentConfig);

/// Summary of a reconstruction run.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct DwRunSummary {
    pub iterations: usize,
    pub objective: f64,
    pub misfit: f64,
    /// NaN when the run has no reference.
    pub err: f64,
    /// NaN when undefined for the reference.
    pub err_avg: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> DwStatus {
    match e {
        Error::BandEdge { .. } | Error::ExcludedFrequency { .. } => DwStatus::BandEdge,
        Error::IllConditioned { .. } | Error::ResonantMerge { .. } | Error::DualBasis { .. } => {
            DwStatus::IllConditioned
        }
        Error::Mismatch(_) | Error::NotAdjacent { .. } => DwStatus::Mismatch,
        Error::MissingSamples(_) => DwStatus::MissingSamples,
        Error::Invalid(_) => DwStatus::InvalidArgument,
        Error::Io(_) | Error::Csv(_) | Error::Json(_) => DwStatus::Io,
        Error::Config(_) => DwStatus::Config,
        Error::Iterate { .. } => DwStatus::Iterate,
        Error::Experiment { source, .. } => status_of(source),
    }
}

fn guard(f: impl FnOnce() -> Result<(), DwStatus>) -> DwStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            DwStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            DwStatus::Panic
        }
    }
}

fn fail(e: Error) -> DwStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

fn bad(msg: &str) -> DwStatus {
    set_error(msg.to_string());
    DwStatus::InvalidArgument
}

unsafe fn deref<'a, T>(p: *const T) -> Result<&'a T, DwStatus> {
    if p.is_null() {
        set_error("null handle".into());
        Err(DwStatus::NullPointer)
    } else {
        Ok(&*p)
    }
}

unsafe fn out<'a, T>(p: *mut T) -> Result<&'a mut T, DwStatus> {
    if p.is_null() {
        set_error("null output pointer".into());
        Err(DwStatus::NullPointer)
    } else {
        Ok(&mut *p)
    }
}

unsafe fn string<'a>(p: *const c_char) -> Result<&'a str, DwStatus> {
    if p.is_null() {
        set_error("null string".into());
        return Err(DwStatus::NullPointer);
    }
    CStr::from_ptr(p).to_str().map_err(|_| bad("string is not UTF-8"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dw_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copy the last error message of this thread into `buf`.
///
/// Returns the full message length excluding the NUL; the copy is truncated
/// to `len - 1` bytes.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes of writes.
#[no_mangle]
pub unsafe extern "C" fn dw_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = e.len().min(len - 1);
            ptr::copy_nonoverlapping(e.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}

/// Zero potential with `(n_x + 1)(n_y + 1)` coefficients per Pauli channel.
///
/// # Safety
/// `out` must be valid for a pointer write. The handle must be released
/// with [`dw_potential_free`].
#[no_mangle]
pub unsafe extern "C" fn dw_potential_new(
    x_left: f64,
    x_right: f64,
    n_x: usize,
    n_y: usize,
    profile: DwProfile,
    out_pot: *mut *mut DwPotential,
) -> DwStatus {
    guard(|| {
        let o = out(out_pot)?;
        let prof = match profile {
            DwProfile::Hermite => YProfile::Hermite,
            DwProfile::Scaled => YProfile::Scaled,
            DwProfile::Constant => YProfile::Constant,
        };
        let p = PotentialRep::zeros(x_left, x_right, n_x, n_y, prof).map_err(fail)?;
        *o = Box::into_raw(Box::new(DwPotential(p)));
        Ok(())
    })
}

/// # Safety
/// `pot` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dw_potential_free(pot: *mut DwPotential) {
    if !pot.is_null() {
        drop(Box::from_raw(pot));
    }
}

/// # Safety
/// `pot` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dw_potential_len(pot: *const DwPotential) -> usize {
    if pot.is_null() {
        0
    } else {
        (*pot).0.len()
    }
}

fn check_index(p: &PotentialRep, j: usize, k: usize, c: usize) -> Result<(), DwStatus> {
    if j > p.n_x || k > p.n_y || c > 3 {
        return Err(bad(&format!("index (j={j}, k={k}, channel={c}) out of range")));
    }
    Ok(())
}

/// Set the coefficient of x-function `j`, y-function `k`, Pauli channel `c`.
///
/// # Safety
/// `pot` must be a live handle not used concurrently.
#[no_mangle]
pub unsafe extern "C" fn dw_potential_set(pot: *mut DwPotential, j: usize, k: usize, c: usize, v: f64) -> DwStatus {
    guard(|| {
        let p = &mut out(pot)?.0;
        check_index(p, j, k, c)?;
        p.set(j, k, c, v);
        Ok(())
    })
}

/// # Safety
/// `pot` must be a live handle; `value` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dw_potential_get(
    pot: *const DwPotential,
    j: usize,
    k: usize,
    c: usize,
    value: *mut f64,
) -> DwStatus {
    guard(|| {
        let p = &deref(pot)?.0;
        let v = out(value)?;
        check_index(p, j, k, c)?;
        *v = p.get(j, k, c);
        Ok(())
    })
}

/// Evaluate the four Pauli channels at `(x, y)` into `values[0..4]`.
///
/// # Safety
/// `pot` must be a live handle; `values` must be valid for 4 writes.
#[no_mangle]
pub unsafe extern "C" fn dw_potential_eval(pot: *const DwPotential, x: f64, y: f64, values: *mut f64) -> DwStatus {
    guard(|| {
        let p = &deref(pot)?.0;
        out(values)?;
        let v = p.channels_at(x, y);
        ptr::copy_nonoverlapping(v.as_ptr(), values, 4);
        Ok(())
    })
}

/// TR matrix of the potential's support at `energy`, keeping levels up to
/// `n_y`. `order = 0` picks the Legendre order automatically.
///
/// # Safety
/// `pot` must be a live handle; `out_tr` must be valid for a pointer write.
/// Release the result with [`dw_tr_free`].
#[no_mangle]
pub unsafe extern "C" fn dw_slab_tr(
    pot: *const DwPotential,
    energy: f64,
    n_y: usize,
    order: usize,
    out_tr: *mut *mut DwTr,
) -> DwStatus {
    guard(|| {
        let p = &deref(pot)?.0;
        let o = out(out_tr)?;
        let disc = if order == 0 {
            Discretization::new(n_y)
        } else {
            Discretization::with_order(n_y, order)
        };
        let t = slab_tr(p, energy, disc).map_err(fail)?;
        *o = Box::into_raw(Box::new(DwTr(t)));
        Ok(())
    })
}

/// # Safety
/// `tr` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dw_tr_free(tr: *mut DwTr) {
    if !tr.is_null() {
        drop(Box::from_raw(tr));
    }
}

/// Side length of the TR matrix, `2 n_y + 1`.
///
/// # Safety
/// `tr` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dw_tr_dim(tr: *const DwTr) -> usize {
    if tr.is_null() {
        0
    } else {
        (*tr).0.dim()
    }
}

/// Entry `(row, col)`. Rows and columns follow the mode order
/// `(0,-)..(n_y,-)` then `(1,+)..(n_y,+)`.
///
/// # Safety
/// `tr` must be a live handle; `re` and `im` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dw_tr_get(tr: *const DwTr, row: usize, col: usize, re: *mut f64, im: *mut f64) -> DwStatus {
    guard(|| {
        let t = &deref(tr)?.0;
        let r = out(re)?;
        let i = out(im)?;
        let n = t.dim();
        if row >= n || col >= n {
            return Err(bad(&format!("entry ({row}, {col}) outside {n}x{n}")));
        }
        let z = t.data[[row, col]];
        *r = z.re;
        *i = z.im;
        Ok(())
    })
}

/// Frobenius norm of `S^H S - I` on the propagating block.
///
/// # Safety
/// `tr` must be a live handle; `defect` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dw_tr_unitarity_defect(tr: *const DwTr, defect: *mut f64) -> DwStatus {
    guard(|| {
        let t = &deref(tr)?.0;
        *out(defect)? = extract_smatrix(t).unitarity_defect();
        Ok(())
    })
}

/// Named preset, e.g. `"exp2-small"`.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out_cfg` valid for a write.
/// Release with [`dw_config_free`].
#[no_mangle]
pub unsafe extern "C" fn dw_config_from_preset(name: *const c_char, out_cfg: *mut *mut DwConfig) -> DwStatus {
    guard(|| {
        let n = string(name)?;
        let o = out(out_cfg)?;
        let c = ExperimentConfig::preset(n).map_err(fail)?;
        *o = Box::into_raw(Box::new(DwConfig(c)));
        Ok(())
    })
}

/// Configuration parsed from TOML text.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out_cfg` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dw_config_from_toml(text: *const c_char, out_cfg: *mut *mut DwConfig) -> DwStatus {
    guard(|| {
        let t = string(text)?;
        let o = out(out_cfg)?;
        let c = ExperimentConfig::from_toml(t).map_err(fail)?;
        c.validate().map_err(fail)?;
        *o = Box::into_raw(Box::new(DwConfig(c)));
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dw_config_free(cfg: *mut DwConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Override the iteration budget.
///
/// # Safety
/// `cfg` must be a live handle not used concurrently.
#[no_mangle]
pub unsafe extern "C" fn dw_config_set_iterations(cfg: *mut DwConfig, iters: usize) -> DwStatus {
    guard(|| {
        out(cfg)?.0.i_max = iters;
        Ok(())
    })
}

/// Reference potential of the configuration.
///
/// # Safety
/// `cfg` must be a live handle; `out_pot` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dw_config_reference(cfg: *const DwConfig, out_pot: *mut *mut DwPotential) -> DwStatus {
    guard(|| {
        let c = &deref(cfg)?.0;
        let o = out(out_pot)?;
        let p = c.reference_potential().map_err(fail)?;
        *o = Box::into_raw(Box::new(DwPotential(p)));
        Ok(())
    })
}

/// Run the reconstruction. `out_dir` may be null to skip writing artifacts.
/// `out_pot` may be null; otherwise it receives the final iterate.
///
/// # Safety
/// `cfg` must be a live handle, `out_dir` null or NUL-terminated, `summary`
/// valid for a write, `out_pot` null or valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn dw_reconstruct(
    cfg: *const DwConfig,
    out_dir: *const c_char,
    summary: *mut DwRunSummary,
    out_pot: *mut *mut DwPotential,
) -> DwStatus {
    guard(|| {
        let c = &deref(cfg)?.0;
        let s = out(summary)?;
        let dir = if out_dir.is_null() { None } else { Some(string(out_dir)?) };
        let o = run_experiment(c, dir.map(Path::new)).map_err(fail)?;
        let last = o.report.history.last().ok_or_else(|| bad("empty history"))?;
        *s = DwRunSummary {
            iterations: last.iteration,
            objective: last.objective,
            misfit: last.misfit,
            err: last.err.unwrap_or(f64::NAN),
            err_avg: last.err_avg.unwrap_or(f64::NAN),
        };
        if !out_pot.is_null() {
            let p = o.run.potential();
            *out_pot = Box::into_raw(Box::new(DwPotential(p)));
        }
        Ok(())
    })
}
