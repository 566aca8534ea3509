use diracwave_ffi::*;
use std::ffi::{CStr, CString};
use std::ptr;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    unsafe {
        dw_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(dw_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn potential_roundtrip_and_bounds() {
    unsafe {
        let mut p = ptr::null_mut();
        assert_eq!(dw_potential_new(-0.5, 0.5, 3, 2, DwProfile::Hermite, &mut p), DwStatus::Ok);
        assert_eq!(dw_potential_len(p), 4 * 3 * 4);
        assert_eq!(dw_potential_set(p, 1, 2, 3, 0.25), DwStatus::Ok);
        let mut v = 0.0;
        assert_eq!(dw_potential_get(p, 1, 2, 3, &mut v), DwStatus::Ok);
        assert_eq!(v, 0.25);
        assert_eq!(dw_potential_set(p, 4, 0, 0, 1.0), DwStatus::InvalidArgument);
        assert!(last_error().contains("out of range"));
        assert_eq!(dw_potential_get(p, 0, 0, 4, &mut v), DwStatus::InvalidArgument);
        let mut vals = [1.0; 4];
        assert_eq!(dw_potential_eval(p, 0.0, 0.0, vals.as_mut_ptr()), DwStatus::Ok);
        assert_eq!(vals[0], 0.0);
        dw_potential_free(p);
    }
}

#[test]
fn empty_support_rejected() {
    unsafe {
        let mut p = ptr::null_mut();
        assert_eq!(dw_potential_new(1.0, 1.0, 2, 2, DwProfile::Hermite, &mut p), DwStatus::InvalidArgument);
        assert!(p.is_null());
        assert!(!last_error().is_empty());
    }
}

#[test]
fn null_pointers_reported() {
    unsafe {
        assert_eq!(dw_potential_new(0.0, 1.0, 1, 1, DwProfile::Hermite, ptr::null_mut()), DwStatus::NullPointer);
        let mut v = 0.0;
        assert_eq!(dw_potential_get(ptr::null(), 0, 0, 0, &mut v), DwStatus::NullPointer);
        let mut t = ptr::null_mut();
        assert_eq!(dw_slab_tr(ptr::null(), 2.0, 2, 0, &mut t), DwStatus::NullPointer);
        assert_eq!(dw_tr_dim(ptr::null()), 0);
        dw_tr_free(ptr::null_mut());
        dw_potential_free(ptr::null_mut());
        dw_config_free(ptr::null_mut());
    }
}

#[test]
fn zero_potential_tr_is_free_propagation() {
    unsafe {
        let mut p = ptr::null_mut();
        assert_eq!(dw_potential_new(-0.3, 0.3, 2, 3, DwProfile::Hermite, &mut p), DwStatus::Ok);
        let mut t = ptr::null_mut();
        assert_eq!(dw_slab_tr(p, 2.3, 3, 0, &mut t), DwStatus::Ok);
        assert_eq!(dw_tr_dim(t), 7);
        let mut d = 1.0;
        assert_eq!(dw_tr_unitarity_defect(t, &mut d), DwStatus::Ok);
        assert!(d < 1e-12, "{d}");
        let (mut re, mut im) = (0.0, 0.0);
        // (1,-) to (0,-) is zero without scattering
        assert_eq!(dw_tr_get(t, 0, 1, &mut re, &mut im), DwStatus::Ok);
        assert!(re.hypot(im) < 1e-12);
        assert_eq!(dw_tr_get(t, 7, 0, &mut re, &mut im), DwStatus::InvalidArgument);
        dw_tr_free(t);
        dw_potential_free(p);
    }
}

#[test]
fn band_edge_maps_to_status() {
    unsafe {
        let mut p = ptr::null_mut();
        dw_potential_new(-0.3, 0.3, 2, 3, DwProfile::Hermite, &mut p);
        let mut t = ptr::null_mut();
        let s = dw_slab_tr(p, 2f64.sqrt(), 3, 0, &mut t);
        assert_eq!(s, DwStatus::BandEdge, "{}", last_error());
        assert!(t.is_null());
        dw_potential_free(p);
    }
}

#[test]
fn config_from_preset_and_toml() {
    unsafe {
        let name = CString::new("exp2-small").unwrap();
        let mut c = ptr::null_mut();
        assert_eq!(dw_config_from_preset(name.as_ptr(), &mut c), DwStatus::Ok);
        let mut r = ptr::null_mut();
        assert_eq!(dw_config_reference(c, &mut r), DwStatus::Ok);
        assert!(dw_potential_len(r) > 0);
        dw_potential_free(r);
        dw_config_free(c);

        let bad = CString::new("nope").unwrap();
        let mut c = ptr::null_mut();
        assert_ne!(dw_config_from_preset(bad.as_ptr(), &mut c), DwStatus::Ok);
        let junk = CString::new("n_x = \"x\"").unwrap();
        assert_eq!(dw_config_from_toml(junk.as_ptr(), &mut c), DwStatus::Config);
    }
}

#[test]
fn short_reconstruction_decreases_objective() {
    unsafe {
        let name = CString::new("exp2-small").unwrap();
        let mut c = ptr::null_mut();
        dw_config_from_preset(name.as_ptr(), &mut c);
        assert_eq!(dw_config_set_iterations(c, 2), DwStatus::Ok);
        let mut s = DwRunSummary::default();
        let mut p = ptr::null_mut();
        assert_eq!(dw_reconstruct(c, ptr::null(), &mut s, &mut p), DwStatus::Ok, "{}", last_error());
        assert_eq!(s.iterations, 2);
        assert!(s.objective < 1.0);
        assert!(s.err.is_finite());
        assert!(!p.is_null());
        dw_potential_free(p);
        dw_config_free(c);
    }
}

#[test]
fn header_declares_exports() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/diracwave.h")).unwrap();
    for f in [
        "dw_version",
        "dw_last_error",
        "dw_potential_new",
        "dw_potential_free",
        "dw_slab_tr",
        "dw_tr_get",
        "dw_config_from_preset",
        "dw_reconstruct",
        "DW_STATUS_BAND_EDGE",
    ] {
        assert!(h.contains(f), "{f} missing from header");
    }
}
