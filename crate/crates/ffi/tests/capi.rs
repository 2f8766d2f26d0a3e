//! Drive the C ABI end to end: build a small defended classifier, save the
//! bundle, load it back through the extern "C" surface, and classify.

use advrej::backbone::{mlp_arch, train_backbone, TrainConfig};
use advrej::data::{synth_blobs, BlobSpec};
use advrej::defended::{calibrate_threshold, save_bundle, Combiner, DefendedClassifier};
use advrej::detectors::{fit_detector, DetectorSpec};
use advrej::linalg::KernelConvention;
use advrej::rng::RngSeed;
use advrej_ffi::{
    advrej_classifier_class_count, advrej_classifier_decide, advrej_classifier_free,
    advrej_classifier_input_dim, advrej_classifier_load, advrej_classifier_prototype_total,
    advrej_status_message, advrej_version, AdvrejStatus,
};
use std::ffi::{CStr, CString};

fn toy_bundle(dir: &std::path::Path) -> (DefendedClassifier, Vec<Vec<f64>>, Vec<usize>) {
    let seed = RngSeed(7);
    let ds = synth_blobs(&BlobSpec::toy_triangle(), seed).unwrap();
    let backbone = train_backbone(
        &ds.features,
        &ds.labels,
        mlp_arch(2, &[8], 3),
        &TrainConfig {
            epochs: 15,
            batch_size: 32,
            ..TrainConfig::default()
        },
        seed,
    )
    .unwrap();
    let det = fit_detector(
        &DetectorSpec::svm_rbf(1.0, None),
        &ds.features,
        &ds.labels,
        3,
        KernelConvention::Multiplier,
        seed,
    )
    .unwrap();
    let mut dc = DefendedClassifier::new(
        backbone,
        vec!["input".to_string()],
        vec![det],
        Combiner::Identity,
        0.0,
        0.0,
    )
    .unwrap();
    dc.theta = calibrate_threshold(&dc, &ds.features, 0.10).unwrap().theta;
    save_bundle(&dc, dir).unwrap();
    (dc, ds.features, ds.labels)
}

#[test]
fn load_decide_and_free_through_the_c_abi() {
    let dir = tempfile::tempdir().unwrap();
    let (dc, xs, ys) = toy_bundle(dir.path());
    let bundle = CString::new(dir.path().join("bundle.txt").to_str().unwrap()).unwrap();

    unsafe {
        let mut handle = std::ptr::null_mut();
        let status = advrej_classifier_load(bundle.as_ptr(), &mut handle);
        assert_eq!(status, AdvrejStatus::Ok);
        assert!(!handle.is_null());
        assert_eq!(advrej_classifier_input_dim(handle), 2);
        assert_eq!(advrej_classifier_class_count(handle), 3);
        assert_eq!(
            advrej_classifier_prototype_total(handle),
            dc.total_prototypes()
        );

        // agreement with the native path on clean samples
        let mut agree = 0;
        for (x, _y) in xs.iter().zip(&ys).take(50) {
            let mut label: i32 = -2;
            let mut scores = [0.0f64; 4];
            let status =
                advrej_classifier_decide(handle, x.as_ptr(), x.len(), &mut label, scores.as_mut_ptr());
            assert_eq!(status, AdvrejStatus::Ok);
            let native = dc.decide(x).unwrap();
            let native_label = native.class_label().map_or(-1, |l| l as i32);
            assert_eq!(label, native_label);
            assert_eq!(scores.to_vec(), native.extended_scores);
            if label >= 0 {
                agree += 1;
            }
        }
        assert!(agree > 25, "most clean samples accepted");

        // far-off-manifold point is rejected through the C ABI too
        let far = [50.0f64, -40.0];
        let mut label: i32 = 0;
        let status =
            advrej_classifier_decide(handle, far.as_ptr(), far.len(), &mut label, std::ptr::null_mut());
        assert_eq!(status, AdvrejStatus::Ok);
        assert_eq!(label, -1, "off-manifold input must be rejected");

        // dimension mismatch is a typed error
        let status = advrej_classifier_decide(handle, far.as_ptr(), 1, &mut label, std::ptr::null_mut());
        assert_eq!(status, AdvrejStatus::Dimension);

        advrej_classifier_free(handle);
    }
}

#[test]
fn null_and_missing_path_errors() {
    unsafe {
        let mut handle = std::ptr::null_mut();
        assert_eq!(
            advrej_classifier_load(std::ptr::null(), &mut handle),
            AdvrejStatus::NullArgument
        );
        let missing = CString::new("/nonexistent/bundle.txt").unwrap();
        assert_eq!(
            advrej_classifier_load(missing.as_ptr(), &mut handle),
            AdvrejStatus::Io
        );
        advrej_classifier_free(std::ptr::null_mut());
    }
}

#[test]
fn version_and_status_strings_are_static() {
    unsafe {
        let v = CStr::from_ptr(advrej_version()).to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
        let m = CStr::from_ptr(advrej_status_message(AdvrejStatus::Dimension))
            .to_str()
            .unwrap();
        assert!(m.contains("dimension"));
    }
}

#[test]
fn generated_header_declares_the_api() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/advrej.h");
    let text = std::fs::read_to_string(header).expect("cbindgen header generated at build time");
    for symbol in [
        "advrej_classifier_load",
        "advrej_classifier_decide",
        "advrej_classifier_free",
        "AdvrejStatus",
    ] {
        assert!(text.contains(symbol), "header missing {symbol}");
    }
}
