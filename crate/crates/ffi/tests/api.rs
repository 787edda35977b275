use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use novelty_ffi::*;

fn last_error() -> String {
    let p = nv_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn images(n: usize) -> Vec<f32> {
    (0..n * 32 * 32).map(|i| ((i * 37) % 101) as f32 / 100.0).collect()
}

#[test]
fn build_score_attack_save_load() {
    let spec = c(r#"{"base_channels": 2, "principals": {"k_s": 4}}"#);
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(nv_detector_build(spec.as_ptr(), 7, &mut h), NvStatus::Ok);
        let (mut ch, mut side) = (0, 0);
        assert_eq!(nv_detector_geometry(h, &mut ch, &mut side), NvStatus::Ok);
        assert_eq!((ch, side), (1, 32));

        let x = images(4);
        let mut scores = [0.0; 4];
        assert_eq!(nv_detector_scores(h, x.as_ptr(), 4, scores.as_mut_ptr()), NvStatus::Usage);
        assert!(last_error().contains("not initialized"));
        assert_eq!(nv_detector_init_components(h, x.as_ptr(), 4), NvStatus::Ok);
        assert_eq!(nv_detector_scores(h, x.as_ptr(), 4, scores.as_mut_ptr()), NvStatus::Ok);
        assert!(scores.iter().all(|s| s.is_finite() && *s >= 0.0));

        let attack = c(r#"{"epsilon": "8/255", "t_max": 2}"#);
        let labels = [1.0, 1.0, -1.0, -1.0];
        let mut adv = vec![0.0f32; x.len()];
        assert_eq!(nv_attack(h, attack.as_ptr(), x.as_ptr(), labels.as_ptr(), 4, adv.as_mut_ptr()), NvStatus::Ok);
        let linf = x.iter().zip(&adv).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(linf as f64 <= 8.0 / 255.0 + 1e-6);

        let dir = tempfile::tempdir().unwrap();
        let path = c(dir.path().join("m.ckpt").to_str().unwrap());
        assert_eq!(nv_detector_save(h, path.as_ptr()), NvStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(nv_detector_load(path.as_ptr(), &mut back), NvStatus::Ok);
        let mut again = [0.0; 4];
        assert_eq!(nv_detector_scores(back, x.as_ptr(), 4, again.as_mut_ptr()), NvStatus::Ok);
        assert_eq!(scores, again);
        nv_detector_free(back);
        nv_detector_free(h);
        nv_detector_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_status_codes() {
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(nv_detector_build(ptr::null(), 0, &mut h), NvStatus::NullPointer);
        let bad = c(r#"{"base_chanels": 2}"#);
        assert_eq!(nv_detector_build(bad.as_ptr(), 0, &mut h), NvStatus::Config);
        assert!(last_error().contains("base_chanels"));
        let missing = c("/nonexistent/m.ckpt");
        assert_eq!(nv_detector_load(missing.as_ptr(), &mut h), NvStatus::Io);
        assert!(h.is_null());
        let mut out = 0.0;
        assert_eq!(nv_auroc([1.0].as_ptr(), 1, [].as_ptr(), 0, &mut out), NvStatus::Contract);
        assert_eq!(nv_auroc([1.0, 3.0].as_ptr(), 2, [2.0, 4.0].as_ptr(), 2, &mut out), NvStatus::Ok);
        assert_eq!(out, 0.75);
        let n = [1.0, 2.0, 3.0, 4.0];
        let a = [2.5, 3.5, 4.5, 5.5];
        assert_eq!(nv_fpr_at_tpr(n.as_ptr(), 4, a.as_ptr(), 4, 0.95, &mut out), NvStatus::Ok);
        assert_eq!(out, 0.5);
    }
    let v = unsafe { CStr::from_ptr(nv_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

const PROBE: &str = r#"#include "novelty.h"
#include <stdio.h>
#include <string.h>

int main(void) {
    NvDetector *h = NULL;
    if (nv_detector_build("{\"base_channels\": 2}", 1, &h) != NV_STATUS_OK) return 1;
    size_t channels = 0, side = 0;
    nv_detector_geometry(h, &channels, &side);
    static float images[2 * 32 * 32];
    for (size_t i = 0; i < sizeof images / sizeof images[0]; ++i) images[i] = (float)(i % 7) / 7.0f;
    double scores[2];
    if (nv_detector_scores(h, images, 2, scores) != NV_STATUS_OK) return 2;
    nv_detector_free(h);
    if (nv_detector_build("{\"kind\": \"gan\"}", 1, &h) != NV_STATUS_CONFIG) return 3;
    if (strstr(nv_last_error(), "gan") == NULL) return 4;
    printf("%s %zu %zu %.6f\n", nv_version(), channels, side, scores[0]);
    return 0;
}
"#;

#[test]
fn header_compiles_and_links_from_c() {
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let text = std::fs::read_to_string(format!("{include}/novelty.h")).unwrap();
    for f in ["nv_detector_build", "nv_detector_scores", "nv_attack", "nv_auroc", "nv_last_error"] {
        assert!(text.contains(f), "{f} missing from the header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(&src, PROBE).unwrap();
    for lang in ["c", "c++"] {
        match Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang, "-I", include]).arg(&src).status() {
            Ok(s) => assert!(s.success(), "probe does not compile as {lang}"),
            Err(_) => {
                eprintln!("no C compiler found; skipping the header checks");
                return;
            }
        }
    }
    // target/<profile>/deps/<this test> -> target/<profile>/libnovelty_ffi.a
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(|d| d.parent()).unwrap();
    let lib = profile_dir.join("libnovelty_ffi.a");
    if !lib.exists() {
        // test builds link the rlib only; produce the staticlib for this profile
        let mut build = Command::new(env!("CARGO"));
        build.args(["build", "-p", "novelty-ffi", "--lib"]);
        if profile_dir.file_name().is_some_and(|n| n == "release") {
            build.arg("--release");
        }
        assert!(build.status().unwrap().success(), "staticlib build failed");
    }
    assert!(lib.exists(), "{} missing", lib.display());
    let bin = dir.path().join("probe");
    let ok = Command::new("cc")
        .args(["-I", include])
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(ok.success(), "probe does not link");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "probe exited with {:?}", out.status);
    let line = String::from_utf8(out.stdout).unwrap();
    assert!(line.starts_with(&format!("{} 1 32 ", env!("CARGO_PKG_VERSION"))), "{line}");
}
