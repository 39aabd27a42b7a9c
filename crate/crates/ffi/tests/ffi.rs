use std::ffi::{c_char, CStr, CString};
use std::ptr;

use purls::bundle::write_split;
use purls::{generate, write_bundle, SynthSpec};
use purls_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    let n = unsafe { purls_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let s = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned();
    assert_eq!(s.len(), n.min(511));
    s
}

fn cstr(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    bundle: CString,
    split: CString,
    root: std::path::PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        concepts: 3,
        seen_classes: 4,
        unseen_classes: 2,
        samples_per_class: 3,
        temporal: 3,
        joints: 6,
        parts: 2,
        intervals: 3,
        feature_dim: 16,
        text_dim: 8,
        ..SynthSpec::default()
    };
    let out = generate(&spec).unwrap();
    let b = dir.path().join("bundle");
    write_bundle(&out.bundle, &b).unwrap();
    let s = dir.path().join("split.json");
    write_split(&s, &out.split).unwrap();
    Fixture {
        bundle: cstr(&b),
        split: cstr(&s),
        root: dir.path().to_path_buf(),
        _dir: dir,
    }
}

#[test]
fn full_round_trip() {
    let fx = fixture();
    unsafe {
        let mut bundle = ptr::null_mut();
        assert_eq!(purls_bundle_load(fx.bundle.as_ptr(), &mut bundle), PurlsStatus::Ok);
        let (mut classes, mut samples) = (0u32, 0u32);
        assert_eq!(purls_bundle_counts(bundle, &mut classes, &mut samples), PurlsStatus::Ok);
        assert_eq!((classes, samples), (6, 18));

        let cfg =
            CString::new(r#"{"max_epochs": 3, "patience": 3, "batch_size": 4, "hidden_dim": 8, "mode": "adaptive"}"#)
                .unwrap();
        let mut model = ptr::null_mut();
        assert_eq!(
            purls_train(bundle, fx.split.as_ptr(), cfg.as_ptr(), &mut model),
            PurlsStatus::Ok,
            "{}",
            last_error()
        );
        assert!(!model.is_null());

        let mut top1 = -1.0;
        assert_eq!(
            purls_evaluate_top1(bundle, fx.split.as_ptr(), model, &mut top1),
            PurlsStatus::Ok
        );
        assert!((0.0..=1.0).contains(&top1));

        let ck = cstr(&fx.root.join("ck"));
        assert_eq!(purls_model_save(model, ck.as_ptr()), PurlsStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(purls_model_load(ck.as_ptr(), &mut loaded), PurlsStatus::Ok);
        let mut again = -1.0;
        assert_eq!(
            purls_evaluate_top1(bundle, fx.split.as_ptr(), loaded, &mut again),
            PurlsStatus::Ok
        );
        assert_eq!(top1, again);

        let id = CString::new("c4_s000").unwrap();
        let cands = [4u32, 5];
        let mut class = u32::MAX;
        assert_eq!(
            purls_predict(bundle, loaded, id.as_ptr(), cands.as_ptr(), 2, &mut class),
            PurlsStatus::Ok
        );
        assert!(cands.contains(&class));

        let missing = CString::new("nope").unwrap();
        assert_eq!(
            purls_predict(bundle, loaded, missing.as_ptr(), cands.as_ptr(), 2, &mut class),
            PurlsStatus::NotFound
        );
        assert!(last_error().contains("nope"));
        assert_eq!(
            purls_predict(bundle, loaded, id.as_ptr(), cands.as_ptr(), 0, &mut class),
            PurlsStatus::NotFound
        );
        let bad = [77u32];
        assert_eq!(
            purls_predict(bundle, loaded, id.as_ptr(), bad.as_ptr(), 1, &mut class),
            PurlsStatus::NotFound
        );

        purls_model_free(model);
        purls_model_free(loaded);
        purls_bundle_free(bundle);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let fx = fixture();
    unsafe {
        let mut bundle = ptr::null_mut();
        assert_eq!(purls_bundle_load(ptr::null(), &mut bundle), PurlsStatus::NullArgument);
        assert!(last_error().contains("dir"));
        assert_eq!(
            purls_bundle_load(fx.bundle.as_ptr(), ptr::null_mut()),
            PurlsStatus::NullArgument
        );

        let nowhere = cstr(&fx.root.join("absent"));
        assert_eq!(purls_bundle_load(nowhere.as_ptr(), &mut bundle), PurlsStatus::Io);
        assert!(bundle.is_null());
        assert!(!last_error().is_empty());

        let bad_utf8 = [0xffu8 as c_char, 0];
        assert_eq!(
            purls_bundle_load(bad_utf8.as_ptr(), &mut bundle),
            PurlsStatus::InvalidUtf8
        );

        assert_eq!(purls_bundle_load(fx.bundle.as_ptr(), &mut bundle), PurlsStatus::Ok);
        assert_eq!(last_error(), "");
        let mut model = ptr::null_mut();
        let cfg = CString::new("{\"max_epochs\": 0}").unwrap();
        assert_eq!(
            purls_train(bundle, fx.split.as_ptr(), cfg.as_ptr(), &mut model),
            PurlsStatus::InvalidConfig
        );
        let cfg = CString::new("{\"no_such_field\": 1").unwrap();
        assert_eq!(
            purls_train(bundle, fx.split.as_ptr(), cfg.as_ptr(), &mut model),
            PurlsStatus::InvalidConfig
        );
        assert!(model.is_null());
        let mut top1 = 0.0;
        assert_eq!(
            purls_evaluate_top1(bundle, fx.split.as_ptr(), ptr::null(), &mut top1),
            PurlsStatus::NullArgument
        );
        assert_eq!(purls_model_load(nowhere.as_ptr(), &mut model), PurlsStatus::Io);

        // Freeing null is a no-op.
        purls_bundle_free(ptr::null_mut());
        purls_model_free(ptr::null_mut());
        purls_bundle_free(bundle);
    }
}

#[test]
fn error_message_truncates_safely() {
    unsafe {
        let mut b = ptr::null_mut();
        purls_bundle_load(ptr::null(), &mut b);
        let full = purls_last_error_message(ptr::null_mut(), 0);
        assert!(full > 4);
        let mut buf = [1 as c_char; 4];
        assert_eq!(purls_last_error_message(buf.as_mut_ptr(), 4), full);
        assert_eq!(buf[3], 0);
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_bytes().len(), 3);
    }
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(purls_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/purls.h")).unwrap();
    for name in [
        "purls_bundle_load",
        "purls_train",
        "purls_predict",
        "purls_last_error_message",
        "PURLS_STATUS_OK",
        "PurlsModel",
    ] {
        assert!(header.contains(name), "{name}");
    }
}
