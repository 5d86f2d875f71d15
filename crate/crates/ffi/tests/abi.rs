use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use cadunet_ffi::*;

fn last_error() -> String {
    let p = cadunet_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny() -> *mut CadunetModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { cadunet_model_new(CadunetPreset::Tiny, 3, &mut m) }, CadunetStatus::Ok);
    assert!(!m.is_null());
    m
}

fn signal(frames: usize, channels: usize) -> Vec<f32> {
    (0..frames * channels)
        .map(|i| ((i as f32) * 0.37).sin() * 0.3 + ((i * 7919 % 101) as f32 / 101.0 - 0.5) * 0.05)
        .collect()
}

#[test]
fn enhance_is_additive_and_handles_round_trip() {
    let m = tiny();
    let c = unsafe { cadunet_model_channels(m) };
    assert_eq!(c, 2);
    assert_eq!(unsafe { cadunet_model_segment_len(m) }, 352);
    assert_eq!(unsafe { cadunet_model_precision(m) }, 4);
    let frames = 1000;
    let y = signal(frames, c);
    let mut s = vec![0.0f32; y.len()];
    let mut n = vec![0.0f32; y.len()];
    let st = unsafe { cadunet_enhance(m, y.as_ptr(), frames, c, s.as_mut_ptr(), n.as_mut_ptr()) };
    assert_eq!(st, CadunetStatus::Ok);
    let worst = y.iter().zip(&s).zip(&n).map(|((y, s), n)| (s + n - y).abs()).fold(0.0f32, f32::max);
    assert!(worst < 1e-5, "{worst}");

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { cadunet_model_save(m, path.as_ptr()) }, CadunetStatus::Ok);
    let mut m2 = ptr::null_mut();
    assert_eq!(unsafe { cadunet_model_load(path.as_ptr(), &mut m2) }, CadunetStatus::Ok);
    let mut s2 = vec![0.0f32; y.len()];
    let mut n2 = vec![0.0f32; y.len()];
    let st = unsafe { cadunet_enhance(m2, y.as_ptr(), frames, c, s2.as_mut_ptr(), n2.as_mut_ptr()) };
    assert_eq!(st, CadunetStatus::Ok);
    assert_eq!(s, s2);
    assert_eq!(n, n2);
    unsafe {
        cadunet_model_free(m);
        cadunet_model_free(m2);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut m = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(unsafe { cadunet_model_load(missing.as_ptr(), &mut m) }, CadunetStatus::Io);
    assert!(m.is_null());
    assert!(last_error().contains("nonexistent"));

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { cadunet_model_load(junk.as_ptr(), &mut m) }, CadunetStatus::Format);

    assert_eq!(unsafe { cadunet_model_load(ptr::null(), &mut m) }, CadunetStatus::NullPointer);

    let model = tiny();
    let y = signal(100, 3);
    let mut s = vec![0.0f32; y.len()];
    let mut n = vec![0.0f32; y.len()];
    let st = unsafe { cadunet_enhance(model, y.as_ptr(), 100, 3, s.as_mut_ptr(), n.as_mut_ptr()) };
    assert_eq!(st, CadunetStatus::Shape);
    assert!(last_error().contains("2 channels"));

    let mut y = signal(100, 2);
    y[17] = f32::NAN;
    let st = unsafe { cadunet_enhance(model, y.as_ptr(), 100, 2, s.as_mut_ptr(), n.as_mut_ptr()) };
    assert_eq!(st, CadunetStatus::NonFinite);
    assert!(s.iter().all(|&v| v == 0.0));
    let st = unsafe { cadunet_enhance(ptr::null(), y.as_ptr(), 100, 2, s.as_mut_ptr(), n.as_mut_ptr()) };
    assert_eq!(st, CadunetStatus::NullPointer);
    unsafe {
        cadunet_model_free(model);
        cadunet_model_free(ptr::null_mut());
    }
    let name = unsafe { CStr::from_ptr(cadunet_status_str(CadunetStatus::Shape)) };
    assert_eq!(name.to_str().unwrap(), "shape mismatch");
}

#[test]
fn si_sdr_through_the_abi() {
    let r: Vec<f64> = (0..256).map(|i| (i as f64 * 0.1).sin()).collect();
    let e: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
    let mut out = 0.0;
    assert_eq!(unsafe { cadunet_si_sdr(e.as_ptr(), r.as_ptr(), r.len(), &mut out) }, CadunetStatus::Ok);
    assert!(out >= 99.0, "{out}");
    let z = vec![0.0; 256];
    assert_eq!(unsafe { cadunet_si_sdr(e.as_ptr(), z.as_ptr(), 256, &mut out) }, CadunetStatus::InvalidArgument);
}

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "cadunet.h"

int main(void) {
    CadunetModel *m = NULL;
    if (cadunet_model_new(CADUNET_PRESET_TINY, 1, &m) != CADUNET_STATUS_OK) return 1;
    size_t c = cadunet_model_channels(m), frames = 400;
    static float y[800], s[800], n[800];
    for (size_t i = 0; i < frames * c; i++) y[i] = (float)((int)(i % 17) - 8) / 40.0f;
    if (cadunet_enhance(m, y, frames, c, s, n) != CADUNET_STATUS_OK) return 2;
    float worst = 0.0f;
    for (size_t i = 0; i < frames * c; i++) {
        float d = s[i] + n[i] - y[i];
        if (d < 0) d = -d;
        if (d > worst) worst = d;
    }
    if (worst > 1e-5f) return 3;
    if (cadunet_model_load("/nonexistent", &m) != CADUNET_STATUS_IO) return 4;
    printf("%s ok %s\n", cadunet_version(), cadunet_last_error());
    cadunet_model_free(m);
    return 0;
}
"#;

#[test]
fn c_program_links_against_the_static_library() {
    let lib = target_dir().join("libcadunet_ffi.a");
    if !lib.exists() {
        panic!("static library not built at {}", lib.display());
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let exe = dir.path().join("main");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .expect("C compiler");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("ok") && text.contains("nonexistent"), "{text}");
}
