use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use fode::model::{FieldKind, FilterInit, ModelConfig};
use fode::odeint::SolverConfig;
use fode::Matrix;
use fode_ffi::*;

fn new_model(kind: FodeFieldKind, seed: u64) -> *mut FodeModel {
    let mut m = ptr::null_mut();
    let st = unsafe { fode_model_new(kind as u32, 10, 3, 16, true, FodeFilterInit::Xavier as u32, seed, &mut m) };
    assert_eq!(st, FodeStatus::Ok);
    assert!(!m.is_null());
    m
}

fn reference(kind: FieldKind, seed: u64) -> fode::model::FodeModel {
    let cfg = ModelConfig {
        k_init: FilterInit::Xavier,
        ..ModelConfig::forecasting(kind, 10, 3)
    };
    fode::model::FodeModel::new(cfg, seed).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    unsafe { fode_last_error_message(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

#[test]
fn predict_matches_library() {
    let m = new_model(FodeFieldKind::Fourier, 3);
    let window: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
    let mut out = vec![0.0; 30];
    let st = unsafe { fode_model_predict(m, window.as_ptr(), 30, out.as_mut_ptr(), 30) };
    assert_eq!(st, FodeStatus::Ok);
    let want = fode::pipeline::predict_window(
        &reference(FieldKind::Fode, 3),
        &Matrix::from_vec(10, 3, window).unwrap(),
        &SolverConfig::default(),
    )
    .unwrap();
    assert_eq!(out, want.as_slice());
    unsafe { fode_model_free(m) };
}

#[test]
fn vector_field_and_lipschitz_match_library() {
    for kind in [FodeFieldKind::Fourier, FodeFieldKind::TimeDomain] {
        let m = new_model(kind, 8);
        let lib = reference(
            if kind == FodeFieldKind::Fourier { FieldKind::Fode } else { FieldKind::Node },
            8,
        );
        let x: Vec<f64> = (0..30).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut f = vec![0.0; 30];
        assert_eq!(
            unsafe { fode_model_vector_field(m, x.as_ptr(), 30, 0.0, f.as_mut_ptr(), 30) },
            FodeStatus::Ok
        );
        let want = lib.field_batch(&Matrix::from_vec(1, 30, x).unwrap(), 0.0).unwrap();
        assert_eq!(f, want.as_slice());
        let mut l = FodeLipschitz::default();
        assert_eq!(unsafe { fode_model_lipschitz(m, &mut l) }, FodeStatus::Ok);
        assert_eq!(l.l_f_bound, fode::analysis::lipschitz_bound(&lib).unwrap().l_f_bound);
        let (mut n, mut c) = (0, 0);
        assert_eq!(unsafe { fode_model_dims(m, &mut n, &mut c) }, FodeStatus::Ok);
        assert_eq!((n, c), (10, 3));
        unsafe { fode_model_free(m) };
    }
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    let m = new_model(FodeFieldKind::Fourier, 1);
    assert_eq!(unsafe { fode_model_save(m, path.as_ptr()) }, FodeStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { fode_model_load(path.as_ptr(), &mut back) }, FodeStatus::Ok);
    let x = vec![0.25; 30];
    let (mut a, mut b) = (vec![0.0; 30], vec![0.0; 30]);
    unsafe {
        fode_model_vector_field(m, x.as_ptr(), 30, 0.0, a.as_mut_ptr(), 30);
        fode_model_vector_field(back, x.as_ptr(), 30, 0.0, b.as_mut_ptr(), 30);
    }
    assert_eq!(a, b);
    let missing = CString::new(dir.path().join("nope.ckpt").to_str().unwrap()).unwrap();
    let mut none = ptr::null_mut();
    assert_eq!(unsafe { fode_model_load(missing.as_ptr(), &mut none) }, FodeStatus::Io);
    assert!(none.is_null());
    assert!(!last_error().is_empty());
    unsafe {
        fode_model_free(m);
        fode_model_free(back);
    }
}

#[test]
fn shape_errors_leave_output_untouched() {
    let m = new_model(FodeFieldKind::Fourier, 0);
    let x = vec![1.0; 29];
    let mut out = vec![7.0; 30];
    let st = unsafe { fode_model_predict(m, x.as_ptr(), 29, out.as_mut_ptr(), 30) };
    assert_eq!(st, FodeStatus::ShapeMismatch);
    assert!(last_error().contains("expected 30"));
    assert!(out.iter().all(|&v| v == 7.0));
    unsafe { fode_model_free(m) };
}

#[test]
fn fft_matches_naive_dft() {
    let n = 12;
    let re: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
    let im: Vec<f64> = (0..n).map(|i| (i as f64 * 0.5).cos()).collect();
    let (mut ro, mut io) = (vec![0.0; n], vec![0.0; n]);
    assert_eq!(
        unsafe { fode_fft(re.as_ptr(), im.as_ptr(), n, false, ro.as_mut_ptr(), io.as_mut_ptr()) },
        FodeStatus::Ok
    );
    let x: Vec<_> = re.iter().zip(&im).map(|(&a, &b)| num_complex::Complex64::new(a, b)).collect();
    let want = fode::spectral::dft_naive(&x).unwrap();
    for k in 0..n {
        assert!((ro[k] - want[k].re).abs() < 1e-10 && (io[k] - want[k].im).abs() < 1e-10);
    }
    let (mut rb, mut ib) = (vec![0.0; n], vec![0.0; n]);
    unsafe { fode_fft(ro.as_ptr(), io.as_ptr(), n, true, rb.as_mut_ptr(), ib.as_mut_ptr()) };
    for k in 0..n {
        assert!((rb[k] - re[k]).abs() < 1e-12 && (ib[k] - im[k]).abs() < 1e-12);
    }
    assert_eq!(
        unsafe { fode_fft(re.as_ptr(), im.as_ptr(), 0, false, ro.as_mut_ptr(), io.as_mut_ptr()) },
        FodeStatus::InvalidArgument
    );
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "fode.h"

int main(void) {
    FodeModel *m = NULL;
    if (fode_model_new(FODE_FIELD_KIND_FOURIER, 10, 3, 16, true, FODE_FILTER_INIT_UNIFORM, 42, &m) != FODE_STATUS_OK) return 1;
    double w[30], out[30];
    for (int i = 0; i < 30; i++) w[i] = 0.1 * i;
    if (fode_model_predict(m, w, 30, out, 30) != FODE_STATUS_OK) return 2;
    if (fode_model_predict(m, w, 29, out, 30) != FODE_STATUS_SHAPE_MISMATCH) return 3;
    char msg[128];
    size_t need = fode_last_error_message(msg, sizeof msg);
    if (need < 2 || strlen(msg) + 1 != need) return 4;
    FodeLipschitz l;
    if (fode_model_lipschitz(m, &l) != FODE_STATUS_OK || !(l.l_f_bound > 0.0)) return 5;
    fode_model_free(m);
    if (fode_model_predict(NULL, w, 30, out, 30) != FODE_STATUS_NULL_POINTER) return 6;
    printf("%s %.17g\n", fode_version(), out[0]);
    return 0;
}
"#;

#[test]
fn c_program_links_against_static_library() {
    let exe = std::env::current_exe().unwrap();
    let target_root = exe.ancestors().nth(3).unwrap().join("c-link");
    let status = Command::new(env!("CARGO"))
        .args(["build", "--quiet", "-p", "fode-ffi", "--lib", "--target-dir"])
        .arg(&target_root)
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .status()
        .expect("cargo");
    assert!(status.success());
    let lib = target_root.join("debug").join("libfode_ffi.a");
    assert!(lib.is_file(), "static library not found at {}", lib.display());
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let work = tempfile::tempdir().unwrap();
    let src = work.path().join("main.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let bin = work.path().join("main");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("C compiler");
    assert!(status.success());
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    let text = String::from_utf8(run.stdout).unwrap();
    let mut parts = text.split_whitespace();
    assert_eq!(parts.next(), Some(env!("CARGO_PKG_VERSION")));
    let first: f64 = parts.next().unwrap().parse().unwrap();

    let cfg = ModelConfig::forecasting(FieldKind::Fode, 10, 3);
    let model = fode::model::FodeModel::new(cfg, 42).unwrap();
    let w = Matrix::from_fn(10, 3, |r, c| 0.1 * (r * 3 + c) as f64);
    let want = fode::pipeline::predict_window(&model, &w, &SolverConfig::default()).unwrap();
    assert_eq!(first, want[(0, 0)]);
}
