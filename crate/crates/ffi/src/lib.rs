//! C ABI for the sonotrack toolkit.
//!
//! Conventions: opaque handles (`StConfig`, `StVolume`) own Rust objects and
//! must be released with the matching `st_*_free`; every fallible call
//! returns an [`StStatus`] and the last error message is retrievable per
//! thread via [`st_last_error`]. Strings are NUL-terminated UTF-8; paths
//! must be valid UTF-8.

use sonotrack::cli;
use sonotrack::config::ExperimentConfig;
use sonotrack::error::Error;
use sonotrack::geom::Vec3;
use sonotrack::registration::{register_gd, register_lm, GdOptions, LmOptions};
use sonotrack::volume::{Grid3, Volume};
use std::cell::RefCell;
use std::ffi::{c_char, c_double, CStr, CString};
use std::path::Path;
use std::ptr;

// ---------------------------------------------------------------------------
// Status and error reporting
// ---------------------------------------------------------------------------

/// Result codes of the C API.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// Malformed argument (bad UTF-8, bad enum value, bad dimensions).
    InvalidArgument = 2,
    /// Configuration rejected.
    ConfigError = 3,
    /// File system failure.
    IoError = 4,
    /// Numerical failure (degenerate input, no overlap, empty volume).
    NumericalError = 5,
    /// Input artifacts from different configurations.
    HashMismatch = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let cleaned: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(cleaned).unwrap());
}

fn status_of(err: &Error) -> StStatus {
    match err {
        Error::Io(_) => StStatus::IoError,
        Error::Config(_) => StStatus::ConfigError,
        Error::ConfigHashMismatch { .. } => StStatus::HashMismatch,
        Error::Format(_) => StStatus::InvalidArgument,
        _ => StStatus::NumericalError,
    }
}

fn fail(err: Error) -> StStatus {
    set_error(&err.to_string());
    status_of(&err)
}

/// Last error message of the current thread; valid until the next failing
/// call on this thread. Never NULL.
#[no_mangle]
pub extern "C" fn st_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn st_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

// ---------------------------------------------------------------------------
// Config handle
// ---------------------------------------------------------------------------

/// Opaque experiment configuration.
pub struct StConfig {
    inner: ExperimentConfig,
}

unsafe fn cstr_arg<'a>(s: *const c_char) -> Result<&'a str, StStatus> {
    if s.is_null() {
        set_error("NULL string argument");
        return Err(StStatus::NullArgument);
    }
    CStr::from_ptr(s).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        StStatus::InvalidArgument
    })
}

/// Create a default configuration with the given seed. Free with
/// [`st_config_free`].
#[no_mangle]
pub extern "C" fn st_config_default(seed: u64) -> *mut StConfig {
    Box::into_raw(Box::new(StConfig { inner: ExperimentConfig::with_seed(seed) }))
}

/// Parse a configuration file. Returns NULL on failure (see
/// [`st_last_error`]).
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn st_config_load(path: *const c_char) -> *mut StConfig {
    let Ok(path) = cstr_arg(path) else { return ptr::null_mut() };
    match std::fs::read_to_string(path)
        .map_err(Error::from)
        .and_then(|text| ExperimentConfig::parse(&text))
    {
        Ok(cfg) => Box::into_raw(Box::new(StConfig { inner: cfg })),
        Err(e) => {
            fail(e);
            ptr::null_mut()
        }
    }
}

/// Write the 16-hex-digit configuration hash into `out` (at least 17 bytes).
///
/// # Safety
/// `config` must come from this API and `out` must hold 17 writable bytes.
#[no_mangle]
pub unsafe extern "C" fn st_config_hash(config: *const StConfig, out: *mut c_char) -> StStatus {
    if config.is_null() || out.is_null() {
        set_error("NULL argument");
        return StStatus::NullArgument;
    }
    let hash = (*config).inner.hash();
    let bytes = hash.as_bytes();
    for (i, b) in bytes.iter().enumerate() {
        *out.add(i) = *b as c_char;
    }
    *out.add(bytes.len()) = 0;
    StStatus::Ok
}

/// Release a configuration handle; NULL is a no-op.
///
/// # Safety
/// `config` must have been returned by this API and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn st_config_free(config: *mut StConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

// ---------------------------------------------------------------------------
// Pipeline entry points
// ---------------------------------------------------------------------------

/// Run the closed-loop acquisition and write the record into `out_dir`.
///
/// # Safety
/// `config` must be a live handle; `out_dir` a valid string.
#[no_mangle]
pub unsafe extern "C" fn st_simulate(config: *const StConfig, out_dir: *const c_char) -> StStatus {
    if config.is_null() {
        set_error("NULL config");
        return StStatus::NullArgument;
    }
    let Ok(dir) = cstr_arg(out_dir) else { return StStatus::NullArgument };
    match cli::cmd_simulate(&(*config).inner, Path::new(dir)) {
        Ok(_) => StStatus::Ok,
        Err(e) => fail(e),
    }
}

/// Run the offline super-resolution pipeline on a record directory.
///
/// # Safety
/// Both paths must be valid strings.
#[no_mangle]
pub unsafe extern "C" fn st_ulm(record_dir: *const c_char, out_dir: *const c_char) -> StStatus {
    let Ok(record) = cstr_arg(record_dir) else { return StStatus::NullArgument };
    let Ok(out) = cstr_arg(out_dir) else { return StStatus::NullArgument };
    match cli::cmd_ulm(Path::new(record), Path::new(out)) {
        Ok(_) => StStatus::Ok,
        Err(e) => fail(e),
    }
}

/// Generate the evaluation report. `ulm_dir` and `compare_dir` may be NULL.
///
/// # Safety
/// Non-NULL paths must be valid strings.
#[no_mangle]
pub unsafe extern "C" fn st_report(
    record_dir: *const c_char,
    ulm_dir: *const c_char,
    compare_dir: *const c_char,
    out_dir: *const c_char,
) -> StStatus {
    let Ok(record) = cstr_arg(record_dir) else { return StStatus::NullArgument };
    let Ok(out) = cstr_arg(out_dir) else { return StStatus::NullArgument };
    let ulm = if ulm_dir.is_null() {
        None
    } else {
        match cstr_arg(ulm_dir) {
            Ok(s) => Some(s),
            Err(st) => return st,
        }
    };
    let compare = if compare_dir.is_null() {
        None
    } else {
        match cstr_arg(compare_dir) {
            Ok(s) => Some(s),
            Err(st) => return st,
        }
    };
    match cli::cmd_report(
        Path::new(record),
        ulm.map(Path::new),
        compare.map(Path::new),
        Path::new(out),
    ) {
        Ok(_) => StStatus::Ok,
        Err(e) => fail(e),
    }
}

// ---------------------------------------------------------------------------
// Volume handle
// ---------------------------------------------------------------------------

/// Opaque 3D scalar volume.
pub struct StVolume {
    inner: Volume,
}

/// Load a volume from `<stem>.raw` / `<stem>.hdr`. Returns NULL on failure.
///
/// # Safety
/// `path_stem` must be a valid string.
#[no_mangle]
pub unsafe extern "C" fn st_volume_load(path_stem: *const c_char) -> *mut StVolume {
    let Ok(stem) = cstr_arg(path_stem) else { return ptr::null_mut() };
    match Volume::load(Path::new(stem)) {
        Ok((vol, _)) => Box::into_raw(Box::new(StVolume { inner: vol })),
        Err(e) => {
            fail(e);
            ptr::null_mut()
        }
    }
}

/// Wrap a caller-provided buffer (copied) as a volume. `data` holds
/// `dims[0]*dims[1]*dims[2]` f32 samples, x fastest.
///
/// # Safety
/// `data`, `dims`, `spacing_mm`, `origin_mm` must point to valid memory of
/// the documented lengths.
#[no_mangle]
pub unsafe extern "C" fn st_volume_from_data(
    data: *const f32,
    dims: *const usize,
    spacing_mm: *const c_double,
    origin_mm: *const c_double,
) -> *mut StVolume {
    if data.is_null() || dims.is_null() || spacing_mm.is_null() || origin_mm.is_null() {
        set_error("NULL argument");
        return ptr::null_mut();
    }
    let d = [*dims, *dims.add(1), *dims.add(2)];
    if d.iter().any(|&n| n == 0) || d[0] * d[1] * d[2] > usize::MAX / 8 {
        set_error("invalid dimensions");
        return ptr::null_mut();
    }
    let n = d[0] * d[1] * d[2];
    let spacing = Vec3::new(*spacing_mm, *spacing_mm.add(1), *spacing_mm.add(2));
    if spacing.x <= 0.0 || spacing.y <= 0.0 || spacing.z <= 0.0 {
        set_error("spacing must be positive");
        return ptr::null_mut();
    }
    let origin = Vec3::new(*origin_mm, *origin_mm.add(1), *origin_mm.add(2));
    let grid = Grid3::new(origin, spacing, d);
    let slice = std::slice::from_raw_parts(data, n);
    let vol = Volume { grid, data: slice.to_vec(), frame_id: 0, timestamp: 0.0 };
    Box::into_raw(Box::new(StVolume { inner: vol }))
}

/// Volume dimensions (3 values written to `out`).
///
/// # Safety
/// `volume` must be live; `out` must hold three usize slots.
#[no_mangle]
pub unsafe extern "C" fn st_volume_dims(volume: *const StVolume, out: *mut usize) -> StStatus {
    if volume.is_null() || out.is_null() {
        set_error("NULL argument");
        return StStatus::NullArgument;
    }
    let d = (*volume).inner.grid.dims;
    *out = d[0];
    *out.add(1) = d[1];
    *out.add(2) = d[2];
    StStatus::Ok
}

/// Borrow the sample buffer (x fastest); valid while the handle lives.
///
/// # Safety
/// `volume` must be live.
#[no_mangle]
pub unsafe extern "C" fn st_volume_data(volume: *const StVolume) -> *const f32 {
    if volume.is_null() {
        set_error("NULL volume");
        return ptr::null();
    }
    (*volume).inner.data.as_ptr()
}

/// Save a volume to `<stem>.raw` / `<stem>.hdr` with the given hash tag.
///
/// # Safety
/// `volume` must be live; both strings valid.
#[no_mangle]
pub unsafe extern "C" fn st_volume_save(
    volume: *const StVolume,
    path_stem: *const c_char,
    config_hash: *const c_char,
) -> StStatus {
    if volume.is_null() {
        set_error("NULL volume");
        return StStatus::NullArgument;
    }
    let Ok(stem) = cstr_arg(path_stem) else { return StStatus::NullArgument };
    let Ok(hash) = cstr_arg(config_hash) else { return StStatus::NullArgument };
    match (*volume).inner.save(Path::new(stem), hash) {
        Ok(()) => StStatus::Ok,
        Err(e) => fail(e),
    }
}

/// Release a volume handle; NULL is a no-op.
///
/// # Safety
/// `volume` must have been returned by this API and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn st_volume_free(volume: *mut StVolume) {
    if !volume.is_null() {
        drop(Box::from_raw(volume));
    }
}

// ---------------------------------------------------------------------------
// Registration
// ---------------------------------------------------------------------------

/// Translation solver selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StSolver {
    /// Coarse-to-fine regular-step gradient descent.
    GradientDescent = 0,
    /// Levenberg-Marquardt.
    LevenbergMarquardt = 1,
}

/// Register `moving` against `reference`: writes the translation (mm) that
/// maps reference voxels onto the moving volume into `out_translation[3]`
/// and the iteration count into `out_iterations` (may be NULL).
///
/// # Safety
/// Both volumes must be live handles; `out_translation` must hold three
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn st_register_translation(
    reference: *const StVolume,
    moving: *const StVolume,
    solver: StSolver,
    out_translation: *mut c_double,
    out_iterations: *mut usize,
) -> StStatus {
    if reference.is_null() || moving.is_null() || out_translation.is_null() {
        set_error("NULL argument");
        return StStatus::NullArgument;
    }
    let r = &(*reference).inner;
    let m = &(*moving).inner;
    let result = match solver {
        StSolver::GradientDescent => register_gd(r, m, &GdOptions::default()),
        StSolver::LevenbergMarquardt => register_lm(r, m, &LmOptions::default()),
    };
    match result {
        Ok(res) => {
            *out_translation = res.t.x;
            *out_translation.add(1) = res.t.y;
            *out_translation.add(2) = res.t.z;
            if !out_iterations.is_null() {
                *out_iterations = res.iterations;
            }
            StStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Built-in invariant checks; returns the number of failures.
#[no_mangle]
pub extern "C" fn st_selftest() -> usize {
    cli::cmd_selftest().iter().filter(|(_, ok)| !ok).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_is_nul_terminated() {
        let v = unsafe { CStr::from_ptr(st_version()) };
        assert!(!v.to_str().unwrap().is_empty());
    }

    #[test]
    fn config_lifecycle_and_hash() {
        let cfg = st_config_default(9);
        assert!(!cfg.is_null());
        let mut buf = [0 as c_char; 17];
        unsafe {
            assert_eq!(st_config_hash(cfg, buf.as_mut_ptr()), StStatus::Ok);
            let hash = CStr::from_ptr(buf.as_ptr()).to_str().unwrap();
            assert_eq!(hash.len(), 16);
            st_config_free(cfg);
        }
    }

    #[test]
    fn null_arguments_are_rejected() {
        unsafe {
            assert_eq!(st_simulate(ptr::null(), ptr::null()), StStatus::NullArgument);
            assert!(st_volume_load(ptr::null()).is_null());
            let err = CStr::from_ptr(st_last_error()).to_str().unwrap();
            assert!(!err.is_empty());
        }
    }
}
