//! C ABI over the spur engine.
//!
//! Matrices and masks cross the boundary as opaque handles. Every fallible
//! function returns a [`SpurStatus`]; on failure the thread's last error
//! message is available through [`spur_last_error`]. Panics are caught and
//! reported as [`SpurStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use spur::analysis::{grid_concentration, survivor_stats, write_magnitude_pgm, write_mask_pbm};
use spur::artifacts::write_run_dir;
use spur::config::load_config;
use spur::harness::train;
use spur::pruner::{compute_mask, density_at};
use spur::regularizer::{deviance, expected_magnitude, lambda_at, regularization_loss};
use spur::{DevianceVariant, LambdaSchedule, Mask, Matrix, PruningSchedule, SpurError};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpurStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Contract = 5,
    Integrity = 6,
    Aborted = 7,
    Io = 8,
    Panic = 9,
}

/// Deviance variants accepted by the `variant` parameters.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpurDevianceVariant {
    Spur = 0,
    L1s = 1,
    L1 = 2,
    L2 = 3,
}

/// Dense row-major matrix of doubles.
pub struct SpurMatrix(Matrix);

/// Binary pruning mask.
pub struct SpurMask(Mask);

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct SpurPruningSchedule {
    pub v_initial: f64,
    pub v_final: f64,
    pub t_i: usize,
    pub ramp_steps: usize,
    pub cadence: usize,
    pub total_steps: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct SpurLambdaSchedule {
    pub lambda_final: f64,
    pub t_i: usize,
    pub ramp_steps: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct SpurSurvivorStats {
    pub avg: f64,
    pub std: f64,
    /// Percent.
    pub cv: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct SpurGridScore {
    pub row_score: f64,
    pub col_score: f64,
    pub grid: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(SpurStatus, String);

impl From<SpurError> for Failure {
    fn from(e: SpurError) -> Self {
        let status = match &e {
            SpurError::Shape { .. } => SpurStatus::Shape,
            SpurError::Input(_) => SpurStatus::InvalidArgument,
            SpurError::Config(_) => SpurStatus::Config,
            SpurError::Contract(_) => SpurStatus::Contract,
            SpurError::Integrity(_) => SpurStatus::Integrity,
            SpurError::Aborted { .. } => SpurStatus::Aborted,
            SpurError::Io(_) => SpurStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(msg));
}

fn run(f: impl FnOnce() -> Result<(), Failure>) -> SpurStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            SpurStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            SpurStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(SpurStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(SpurStatus::InvalidArgument, msg.into())
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_slot<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{what}` is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn variant_arg(v: u32) -> Result<DevianceVariant, Failure> {
    match v {
        0 => Ok(DevianceVariant::Spur),
        1 => Ok(DevianceVariant::L1s),
        2 => Ok(DevianceVariant::L1),
        3 => Ok(DevianceVariant::L2),
        other => Err(invalid(format!("unknown deviance variant {other}"))),
    }
}

fn finite(m: &Matrix) -> Result<(), Failure> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(invalid("matrix has non-finite entries"))
    }
}

/// Message describing the last failure on this thread, or NULL after a
/// successful call. The pointer stays valid until the next call on the same
/// thread.
#[no_mangle]
pub extern "C" fn spur_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Creates a `rows x cols` matrix from `rows * cols` row-major values.
///
/// # Safety
/// `data` must point to `rows * cols` readable doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spur_matrix_new(
    rows: usize,
    cols: usize,
    data: *const f64,
    out: *mut *mut SpurMatrix,
) -> SpurStatus {
    run(|| {
        let out = out_slot(out, "out")?;
        if data.is_null() {
            return Err(null("data"));
        }
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| invalid("matrix size overflows"))?;
        let values = std::slice::from_raw_parts(data, len).to_vec();
        let m = Matrix::from_vec(rows, cols, values)?;
        *out = Box::into_raw(Box::new(SpurMatrix(m)));
        Ok(())
    })
}

/// Releases a matrix. NULL is ignored.
///
/// # Safety
/// `m` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn spur_matrix_free(m: *mut SpurMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Row count, or 0 for NULL.
///
/// # Safety
/// `m` must be NULL or a live matrix handle.
#[no_mangle]
pub unsafe extern "C" fn spur_matrix_rows(m: *const SpurMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.rows())
}

/// Column count, or 0 for NULL.
///
/// # Safety
/// `m` must be NULL or a live matrix handle.
#[no_mangle]
pub unsafe extern "C" fn spur_matrix_cols(m: *const SpurMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.cols())
}

/// Copies the row-major values into `out`, which holds `len` doubles.
///
/// # Safety
/// `m` must be a live handle and `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn spur_matrix_copy_data(
    m: *const SpurMatrix,
    out: *mut f64,
    len: usize,
) -> SpurStatus {
    run(|| {
        let m = &borrow(m, "m")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        if len != m.len() {
            return Err(invalid(format!("buffer holds {len} values, matrix has {}", m.len())));
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(m.data());
        Ok(())
    })
}

/// Expected magnitude of `w` under row/column independence.
///
/// # Safety
/// `w` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spur_expected_magnitude(
    w: *const SpurMatrix,
    out: *mut *mut SpurMatrix,
) -> SpurStatus {
    run(|| {
        let w = &borrow(w, "w")?.0;
        let out = out_slot(out, "out")?;
        finite(w)?;
        *out = Box::into_raw(Box::new(SpurMatrix(expected_magnitude(w))));
        Ok(())
    })
}

/// Mean deviance of `w` for the given [`SpurDevianceVariant`] value.
///
/// # Safety
/// `w` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spur_deviance(
    w: *const SpurMatrix,
    variant: u32,
    out: *mut f64,
) -> SpurStatus {
    run(|| {
        let w = &borrow(w, "w")?.0;
        let out = out_slot(out, "out")?;
        let variant = variant_arg(variant)?;
        finite(w)?;
        *out = deviance(w, variant);
        Ok(())
    })
}

/// Mean deviance over `n` target matrices.
///
/// # Safety
/// `targets` must point to `n` live matrix handles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spur_regularization_loss(
    targets: *const *const SpurMatrix,
    n: usize,
    variant: u32,
    out: *mut f64,
) -> SpurStatus {
    run(|| {
        let out = out_slot(out, "out")?;
        let variant = variant_arg(variant)?;
        if n > 0 && targets.is_null() {
            return Err(null("targets"));
        }
        let handles: &[*const SpurMatrix] = if n == 0 {
            &[]
        } else {
            std::slice::from_raw_parts(targets, n)
        };
        let mut mats = Vec::with_capacity(n);
        for &h in handles {
            let m = &borrow(h, "targets[i]")?.0;
            finite(m)?;
            mats.push(m);
        }
        *out = regularization_loss(mats, variant)?;
        Ok(())
    })
}

/// Scheduled density at step `t`.
///
/// # Safety
/// `schedule` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spur_density_at(
    t: usize,
    schedule: *const SpurPruningSchedule,
    out: *mut f64,
) -> SpurStatus {
    run(|| {
        let s = borrow(schedule, "schedule")?;
        let out = out_slot(out, "out")?;
        let s = PruningSchedule {
            v_initial: s.v_initial,
            v_final: s.v_final,
            t_i: s.t_i,
            ramp_steps: s.ramp_steps,
            cadence: s.cadence,
            total_steps: s.total_steps,
        };
        s.validate()?;
        *out = density_at(t, &s);
        Ok(())
    })
}

/// Regularization weight at step `t`.
///
/// # Safety
/// `schedule` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spur_lambda_at(
    t: usize,
    schedule: *const SpurLambdaSchedule,
    out: *mut f64,
) -> SpurStatus {
    run(|| {
        let s = borrow(schedule, "schedule")?;
        let out = out_slot(out, "out")?;
        let s = LambdaSchedule {
            lambda_final: s.lambda_final,
            t_i: s.t_i,
            ramp_steps: s.ramp_steps,
        };
        s.validate()?;
        *out = lambda_at(t, &s);
        Ok(())
    })
}

/// Mask keeping the `round(v * rows * cols)` largest magnitudes of `w`.
///
/// # Safety
/// `w` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spur_compute_mask(
    w: *const SpurMatrix,
    v: f64,
    out: *mut *mut SpurMask,
) -> SpurStatus {
    run(|| {
        let w = &borrow(w, "w")?.0;
        let out = out_slot(out, "out")?;
        if !(0.0..=1.0).contains(&v) {
            return Err(invalid(format!("density {v} outside [0, 1]")));
        }
        finite(w)?;
        *out = Box::into_raw(Box::new(SpurMask(compute_mask(w, v))));
        Ok(())
    })
}

/// Releases a mask. NULL is ignored.
///
/// # Safety
/// `m` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn spur_mask_free(m: *mut SpurMask) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Row count, or 0 for NULL.
///
/// # Safety
/// `m` must be NULL or a live mask handle.
#[no_mangle]
pub unsafe extern "C" fn spur_mask_rows(m: *const SpurMask) -> usize {
    m.as_ref().map_or(0, |m| m.0.rows())
}

/// Column count, or 0 for NULL.
///
/// # Safety
/// `m` must be NULL or a live mask handle.
#[no_mangle]
pub unsafe extern "C" fn spur_mask_cols(m: *const SpurMask) -> usize {
    m.as_ref().map_or(0, |m| m.0.cols())
}

/// Number of surviving entries, or 0 for NULL.
///
/// # Safety
/// `m` must be NULL or a live mask handle.
#[no_mangle]
pub unsafe extern "C" fn spur_mask_popcount(m: *const SpurMask) -> usize {
    m.as_ref().map_or(0, |m| m.0.popcount())
}

/// Copies the row-major mask into `out` as 0/1 bytes.
///
/// # Safety
/// `m` must be a live handle and `out` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn spur_mask_copy_bits(
    m: *const SpurMask,
    out: *mut u8,
    len: usize,
) -> SpurStatus {
    run(|| {
        let m = &borrow(m, "m")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        if len != m.bits().len() {
            return Err(invalid(format!(
                "buffer holds {len} entries, mask has {}",
                m.bits().len()
            )));
        }
        let dst = std::slice::from_raw_parts_mut(out, len);
        for (d, &b) in dst.iter_mut().zip(m.bits()) {
            *d = u8::from(b);
        }
        Ok(())
    })
}

/// Mean, standard deviation and cv of the magnitudes `m` keeps.
///
/// # Safety
/// `w` and `m` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spur_survivor_stats(
    w: *const SpurMatrix,
    m: *const SpurMask,
    out: *mut SpurSurvivorStats,
) -> SpurStatus {
    run(|| {
        let w = &borrow(w, "w")?.0;
        let m = &borrow(m, "m")?.0;
        let out = out_slot(out, "out")?;
        let s = survivor_stats(w, m)?;
        *out = SpurSurvivorStats {
            avg: s.avg,
            std: s.std,
            cv: s.cv,
        };
        Ok(())
    })
}

/// Row, column and combined concentration of the survivors of `m`.
///
/// # Safety
/// `m` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spur_grid_concentration(
    m: *const SpurMask,
    out: *mut SpurGridScore,
) -> SpurStatus {
    run(|| {
        let m = &borrow(m, "m")?.0;
        let out = out_slot(out, "out")?;
        let s = grid_concentration(m)?;
        *out = SpurGridScore {
            row_score: s.row_score,
            col_score: s.col_score,
            grid: s.grid,
        };
        Ok(())
    })
}

/// Writes `m` as a plain PBM file.
///
/// # Safety
/// `m` must be a live handle and `path` a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn spur_write_mask_pbm(m: *const SpurMask, path: *const c_char) -> SpurStatus {
    run(|| {
        let m = &borrow(m, "m")?.0;
        let path = path_arg(path, "path")?;
        write_mask_pbm(m, &path)?;
        Ok(())
    })
}

/// Writes `|w|` as a plain PGM heatmap.
///
/// # Safety
/// `w` must be a live handle and `path` a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn spur_write_magnitude_pgm(
    w: *const SpurMatrix,
    path: *const c_char,
) -> SpurStatus {
    run(|| {
        let w = &borrow(w, "w")?.0;
        let path = path_arg(path, "path")?;
        finite(w)?;
        write_magnitude_pgm(w, &path)?;
        Ok(())
    })
}

fn train_into(config: &Path, out_dir: &Path) -> Result<(), SpurError> {
    let cfg = load_config(config)?;
    let data = cfg.dataset()?;
    let outcome = train(&cfg, &data)?;
    write_run_dir(out_dir, &cfg, &outcome)
}

/// Trains one model from a config file and writes its run directory.
///
/// # Safety
/// Both arguments must be NUL-terminated UTF-8 strings.
#[no_mangle]
pub unsafe extern "C" fn spur_train(config_path: *const c_char, out_dir: *const c_char) -> SpurStatus {
    run(|| {
        let config = path_arg(config_path, "config_path")?;
        let out_dir = path_arg(out_dir, "out_dir")?;
        train_into(&config, &out_dir)?;
        Ok(())
    })
}
