//! Exercise the C ABI the way a foreign binding would: through the extern
//! functions, raw pointers and NUL-terminated strings.

use sonotrack_ffi::*;
use std::ffi::{c_char, CStr, CString};

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

#[test]
fn simulate_ulm_report_through_the_c_api() {
    let base = std::env::temp_dir().join("sonotrack_capi_test");
    let _ = std::fs::remove_dir_all(&base);
    std::fs::create_dir_all(&base).unwrap();

    // short sparse run so the whole chain stays quick
    let cfg_text = "\
seed = 77
[scene]
profile = static
speckle_points = 400
[acquisition]
duration_s = 1.5
store_volumes = false
[ulm]
psf_instances = 3
min_track_frames = 4
";
    let cfg_path = base.join("exp.cfg");
    std::fs::write(&cfg_path, cfg_text).unwrap();

    let cfg = unsafe { st_config_load(c(cfg_path.to_str().unwrap()).as_ptr()) };
    assert!(!cfg.is_null(), "config load failed: {}", last_error());

    let mut hash = [0 as c_char; 17];
    unsafe {
        assert_eq!(st_config_hash(cfg, hash.as_mut_ptr()), StStatus::Ok);
    }

    let record_dir = c(base.join("record").to_str().unwrap());
    let status = unsafe { st_simulate(cfg, record_dir.as_ptr()) };
    assert_eq!(status, StStatus::Ok, "simulate failed: {}", last_error());
    assert!(base.join("record/poses.csv").is_file());

    let ulm_dir = c(base.join("ulm").to_str().unwrap());
    let status = unsafe { st_ulm(record_dir.as_ptr(), ulm_dir.as_ptr()) };
    assert_eq!(status, StStatus::Ok, "ulm failed: {}", last_error());
    assert!(base.join("ulm/tracks.csv").is_file());

    let report_dir = c(base.join("report").to_str().unwrap());
    let status = unsafe {
        st_report(record_dir.as_ptr(), ulm_dir.as_ptr(), std::ptr::null(), report_dir.as_ptr())
    };
    assert_eq!(status, StStatus::Ok, "report failed: {}", last_error());
    assert!(base.join("report/report.txt").is_file());

    unsafe { st_config_free(cfg) };
}

#[test]
fn volume_roundtrip_and_registration_on_buffers() {
    // a Gaussian blob shifted by a known translation, passed through raw
    // buffers exactly like a foreign caller
    let dims = [24usize, 24, 24];
    let spacing = [0.4f64, 0.4, 0.4];
    let origin = [0.0f64, 0.0, 0.0];
    let blob = |shift: (f64, f64, f64)| -> Vec<f32> {
        let mut data = vec![0.0f32; dims[0] * dims[1] * dims[2]];
        for iz in 0..dims[2] {
            for iy in 0..dims[1] {
                for ix in 0..dims[0] {
                    let x = ix as f64 * 0.4 - (4.6 + shift.0);
                    let y = iy as f64 * 0.4 - (4.6 + shift.1);
                    let z = iz as f64 * 0.4 - (4.6 + shift.2);
                    data[ix + dims[0] * (iy + dims[1] * iz)] =
                        (-(x * x + y * y + z * z) / (2.0 * 1.2 * 1.2)).exp() as f32;
                }
            }
        }
        data
    };
    let ref_data = blob((0.0, 0.0, 0.0));
    let mov_data = blob((0.9, -0.4, 0.3));
    unsafe {
        let reference = st_volume_from_data(
            ref_data.as_ptr(),
            dims.as_ptr(),
            spacing.as_ptr(),
            origin.as_ptr(),
        );
        let moving = st_volume_from_data(
            mov_data.as_ptr(),
            dims.as_ptr(),
            spacing.as_ptr(),
            origin.as_ptr(),
        );
        assert!(!reference.is_null() && !moving.is_null());

        let mut out = [0.0f64; 3];
        let mut iters = 0usize;
        let status = st_register_translation(
            reference,
            moving,
            StSolver::GradientDescent,
            out.as_mut_ptr(),
            &mut iters,
        );
        assert_eq!(status, StStatus::Ok, "{}", last_error());
        assert!((out[0] - 0.9).abs() < 0.05, "tx {}", out[0]);
        assert!((out[1] + 0.4).abs() < 0.05, "ty {}", out[1]);
        assert!((out[2] - 0.3).abs() < 0.05, "tz {}", out[2]);
        assert!(iters > 0);

        let status = st_register_translation(
            reference,
            moving,
            StSolver::LevenbergMarquardt,
            out.as_mut_ptr(),
            std::ptr::null_mut(),
        );
        assert_eq!(status, StStatus::Ok, "{}", last_error());
        assert!((out[0] - 0.9).abs() < 0.05, "lm tx {}", out[0]);

        // save / load through the API
        let dir = std::env::temp_dir().join("sonotrack_capi_vol");
        std::fs::create_dir_all(&dir).unwrap();
        let stem = c(dir.join("v").to_str().unwrap());
        assert_eq!(
            st_volume_save(reference, stem.as_ptr(), c("cafe0000cafe0000").as_ptr()),
            StStatus::Ok
        );
        let loaded = st_volume_load(stem.as_ptr());
        assert!(!loaded.is_null());
        let mut d = [0usize; 3];
        assert_eq!(st_volume_dims(loaded, d.as_mut_ptr()), StStatus::Ok);
        assert_eq!(d, dims);
        let data = st_volume_data(loaded);
        assert!(!data.is_null());
        let slice = std::slice::from_raw_parts(data, dims[0] * dims[1] * dims[2]);
        assert_eq!(slice, &ref_data[..]);

        st_volume_free(loaded);
        st_volume_free(reference);
        st_volume_free(moving);
    }
}

#[test]
fn selftest_has_no_failures() {
    assert_eq!(st_selftest(), 0);
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(st_last_error()).to_string_lossy().into_owned() }
}
