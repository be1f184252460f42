use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use motion_evolve::generator::{synthesize, ModelConfig, ViewBundle};
use motion_evolve::harness::{Checkpoint, TrainConfig};
use motion_evolve::primitives::Frame;
use motion_evolve::Tensor;
use motion_evolve_ffi::*;

fn frame(seed: u64, n: usize) -> Vec<f64> {
    (0..3 * n * n)
        .map(|i| ((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 999.0)
        .collect()
}

fn tiny_checkpoint(dir: &Path) -> (Checkpoint, CString) {
    let cfg = TrainConfig {
        references: 1,
        model: ModelConfig::tiny(),
        ..TrainConfig::default()
    };
    let ckpt = Checkpoint::new(cfg).unwrap();
    let path = dir.join("tiny.ckpt");
    ckpt.save(&path).unwrap();
    (ckpt, CString::new(path.to_str().unwrap()).unwrap())
}

fn last_error() -> String {
    let p = me_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn synthesize_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, path) = tiny_checkpoint(dir.path());
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { me_model_load(path.as_ptr(), &mut model) }, MeStatus::Ok);
    let (mut h, mut w) = (0, 0);
    assert_eq!(unsafe { me_model_frame_size(model, &mut h, &mut w) }, MeStatus::Ok);
    assert_eq!((h, w), (16, 16));

    let (src, rf, drv) = (frame(1, 16), frame(2, 16), frame(3, 16));
    let mut out = vec![0.0; 3 * 16 * 16];
    let status = unsafe { me_model_synthesize(model, src.as_ptr(), rf.as_ptr(), 1, drv.as_ptr(), out.as_mut_ptr()) };
    assert_eq!(status, MeStatus::Ok);

    let f = |v: &Vec<f64>| Frame::new(Tensor::from_vec(&[3, 16, 16], v.clone())).unwrap();
    let bundle = ViewBundle::new(f(&src), vec![f(&rf)]).unwrap();
    let direct = synthesize(&ckpt.model, &bundle, &f(&drv), &ckpt.config.ablation).unwrap();
    assert_eq!(direct.frame.tensor().data(), out.as_slice());

    let status = unsafe { me_model_synthesize(model, src.as_ptr(), ptr::null(), 1, drv.as_ptr(), out.as_mut_ptr()) };
    assert_eq!(status, MeStatus::NullPointer);
    unsafe { me_model_free(model) };
}

#[test]
fn errors_carry_codes_and_messages() {
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { me_model_load(missing.as_ptr(), &mut model) }, MeStatus::Io);
    assert!(model.is_null());
    assert!(last_error().contains("/nonexistent/model.ckpt"));

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint at all").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { me_model_load(junk.as_ptr(), &mut model) }, MeStatus::Io);
    assert!(last_error().contains("magic"));

    assert_eq!(unsafe { me_model_load(ptr::null(), &mut model) }, MeStatus::NullPointer);
    let bad = vec![2.0; 3 * 4 * 4];
    let mut v = 0.0;
    assert_eq!(
        unsafe { me_metric_l1(bad.as_ptr(), bad.as_ptr(), 4, 4, &mut v) },
        MeStatus::InvalidArgument
    );
    let ok = frame(0, 4);
    assert_eq!(unsafe { me_metric_l1(ok.as_ptr(), ok.as_ptr(), 4, 4, &mut v) }, MeStatus::Ok);
    assert!(me_last_error_message().is_null());
    unsafe { me_model_free(ptr::null_mut()) };
}

#[test]
fn metrics_agree_with_the_library() {
    let (a, b) = (frame(4, 32), frame(5, 32));
    let f = |v: &Vec<f64>| Frame::new(Tensor::from_vec(&[3, 32, 32], v.clone())).unwrap();
    let mut v = 0.0;
    unsafe { me_metric_ssim(a.as_ptr(), b.as_ptr(), 32, 32, &mut v) };
    assert_eq!(v, motion_evolve::metrics::ssim(&f(&a), &f(&b)).unwrap());
    unsafe { me_metric_psnr(a.as_ptr(), b.as_ptr(), 32, 32, &mut v) };
    assert_eq!(v, motion_evolve::metrics::psnr(&f(&a), &f(&b), 1.0).unwrap());
    assert_eq!(unsafe { me_metric_ms_ssim(a.as_ptr(), a.as_ptr(), 32, 32, 2, &mut v) }, MeStatus::Ok);
    assert!((v - 1.0).abs() < 1e-12);
    assert_eq!(
        unsafe { me_metric_ms_ssim(a.as_ptr(), b.as_ptr(), 32, 32, 4, &mut v) },
        MeStatus::InvalidArgument
    );
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "motion_evolve.h"

int main(void) {
    double a[3 * 4 * 4], b[3 * 4 * 4], l1 = -1.0;
    for (int i = 0; i < 48; i++) { a[i] = 0.25; b[i] = 0.75; }
    if (me_metric_l1(a, b, 4, 4, &l1) != ME_STATUS_OK) return 1;
    MeModel *model = NULL;
    MeStatus s = me_model_load("/nonexistent.ckpt", &model);
    if (s != ME_STATUS_IO || model != NULL) return 2;
    const char *msg = me_last_error_message();
    if (msg == NULL || strstr(msg, "nonexistent") == NULL) return 3;
    printf("%s %.3f\n", me_version(), l1);
    return 0;
}
"#;

#[test]
fn header_compiles_as_c() {
    let header = crate_dir().join("include").join("motion_evolve.h");
    assert!(header.exists(), "header not generated");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let status = Command::new("cc")
        .args(["-std=c11", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(crate_dir().join("include"))
        .arg(&src)
        .status()
        .expect("a C compiler named cc");
    assert!(status.success());
}

#[test]
fn c_program_links_against_the_static_library() {
    let target = std::env::var_os("CARGO_TARGET_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| crate_dir().join("../../target"));
    let release = !cfg!(debug_assertions);
    // `cargo test` only builds the rlib; bring the static library up to date.
    let mut build = Command::new(env!("CARGO"));
    build.args(["build", "-p", "motion-evolve-ffi", "--lib"]);
    if release {
        build.arg("--release");
    }
    assert!(build.status().expect("cargo").success());
    let lib = target.join(if release { "release" } else { "debug" }).join("libmotion_evolve_ffi.a");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    let exe = dir.path().join("probe");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let status = Command::new("cc")
        .args(["-std=c11", "-I"])
        .arg(crate_dir().join("include"))
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("a C compiler named cc");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "probe exited with {:?}", out.status);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.trim(), format!("{} 0.500", env!("CARGO_PKG_VERSION")));
}
