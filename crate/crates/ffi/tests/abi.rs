use fableloop_ffi::*;
use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

fn last_error() -> String {
    let p = fl_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn score_extraction() {
    let raw = CString::new("Plot: 80%\nOverall Score: 85%\n").unwrap();
    let (mut v, mut start, mut end) = (0.0, 0usize, 0usize);
    let st = unsafe { fl_extract_score(raw.as_ptr(), &mut v, &mut start, &mut end) };
    assert_eq!(st, FlStatus::Ok);
    assert_eq!(v, 85.0);
    assert_eq!(&raw.to_str().unwrap()[start..end], "85");
    assert!(fl_last_error_message().is_null());

    let raw = CString::new("great story, 80% and 90%").unwrap();
    let st = unsafe { fl_extract_score(raw.as_ptr(), &mut v, ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(st, FlStatus::AmbiguousScore);
    assert!(last_error().contains("2 percentages"));

    let raw = CString::new("Overall Score: 120%").unwrap();
    let st = unsafe { fl_extract_score(raw.as_ptr(), &mut v, ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(st, FlStatus::ScoreOutOfRange);

    let st = unsafe { fl_extract_score(ptr::null(), &mut v, ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(st, FlStatus::NullPointer);

    let bad = [0xffu8, 0xfe, 0];
    let st = unsafe { fl_extract_score(bad.as_ptr().cast(), &mut v, ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(st, FlStatus::InvalidUtf8);
}

#[test]
fn mortality_detection() {
    let (mut period, mut event) = (0u32, false);
    let s = [70.0, 80.0, 85.0, 85.0, 90.0];
    assert_eq!(unsafe { fl_detect_mortality(s.as_ptr(), s.len(), true, &mut period, &mut event) }, FlStatus::Ok);
    assert_eq!((period, event), (3, true));
    assert_eq!(unsafe { fl_detect_mortality(s.as_ptr(), s.len(), false, &mut period, &mut event) }, FlStatus::Ok);
    assert_eq!((period, event), (4, false));
    assert_eq!(
        unsafe { fl_detect_mortality(s.as_ptr(), 1, true, &mut period, &mut event) },
        FlStatus::TooShort
    );
}

#[test]
fn survival_products() {
    let h = [0.5; 4];
    let mut out = [0.0; 4];
    assert_eq!(unsafe { fl_survival_from_hazards(h.as_ptr(), 4, out.as_mut_ptr()) }, FlStatus::Ok);
    assert_eq!(out, [0.5, 0.25, 0.125, 0.0625]);
    let h = [0.5, 1.5];
    assert_eq!(
        unsafe { fl_survival_from_hazards(h.as_ptr(), 2, out.as_mut_ptr()) },
        FlStatus::InvalidArgument
    );
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

#[test]
fn writer_prompt_rendering() {
    let forge = fl_prompt_forge_builtin();
    assert!(!forge.is_null());
    let (p, l, m, o, a) = (c("a cat"), c("a kitchen"), c("cozy"), c("a red ball"), c("baking"));
    let mut tuple = FlTuple {
        protagonist: p.as_ptr(),
        location: l.as_ptr(),
        mood: m.as_ptr(),
        important_object: o.as_ptr(),
        activity: a.as_ptr(),
        special_appearance: ptr::null(),
    };
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { fl_prompt_forge_render_writer_first(forge, &tuple, &mut out) }, FlStatus::Ok);
    let prompt = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_string();
    unsafe { fl_string_free(out) };
    for label in ["a cat", "a kitchen", "cozy", "a red ball", "baking"] {
        assert!(prompt.contains(label), "missing {label}");
    }

    let empty = c(" ");
    tuple.mood = empty.as_ptr();
    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { fl_prompt_forge_render_writer_first(forge, &tuple, &mut out) },
        FlStatus::InvalidTuple
    );
    assert!(out.is_null());
    assert!(last_error().contains("mood"));
    unsafe { fl_prompt_forge_free(forge) };
}

#[test]
fn template_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = c(dir.path().to_str().unwrap());
    let mut forge = ptr::null_mut();
    assert_eq!(unsafe { fl_prompt_forge_load_dir(path.as_ptr(), &mut forge) }, FlStatus::Template);
    assert!(forge.is_null());
}

fn push(data: *mut FlHazardData, period: u32, x: f64, event: bool) {
    assert_eq!(unsafe { fl_hazard_data_push(data, period, &x, event) }, FlStatus::Ok);
}

#[test]
fn hazard_fit_round_trip() {
    let data = fl_hazard_data_new(1);
    // Group x=0: hazard 3/10 in period 1, group x=1: 6/10.
    for g in [0.0, 1.0] {
        let events = if g == 0.0 { 3 } else { 6 };
        for i in 0..10 {
            push(data, 1, g, i < events);
        }
    }
    assert_eq!(unsafe { fl_hazard_data_len(data) }, 20);
    let mut fit = ptr::null_mut();
    assert_eq!(unsafe { fl_hazard_fit(data, FlLink::Logit, true, &mut fit) }, FlStatus::Ok);
    unsafe { fl_hazard_data_free(data) };

    assert_eq!(unsafe { fl_hazard_fit_n_periods(fit) }, 1);
    assert_eq!(unsafe { fl_hazard_fit_n_covariates(fit) }, 1);
    assert!(!unsafe { fl_hazard_fit_penalized(fit) });
    let mut alpha = [0.0];
    let mut n = 0;
    assert_eq!(unsafe { fl_hazard_fit_period_effects(fit, alpha.as_mut_ptr(), 1, &mut n) }, FlStatus::Ok);
    assert_eq!(n, 1);
    assert!((alpha[0] - (0.3f64 / 0.7).ln()).abs() < 1e-8);

    let mut beta = [0.0];
    assert_eq!(unsafe { fl_hazard_fit_coefficients(fit, beta.as_mut_ptr(), 1, ptr::null_mut()) }, FlStatus::Ok);
    let expected = (0.6f64 / 0.4).ln() - (0.3f64 / 0.7).ln();
    assert!((beta[0] - expected).abs() < 1e-8);

    let (mut h, mut s) = ([0.0], [0.0]);
    let x = 1.0;
    assert_eq!(unsafe { fl_hazard_fit_hazards(fit, &x, h.as_mut_ptr(), 1, ptr::null_mut()) }, FlStatus::Ok);
    assert_eq!(unsafe { fl_hazard_fit_survival(fit, &x, s.as_mut_ptr(), 1, ptr::null_mut()) }, FlStatus::Ok);
    assert!((h[0] - 0.6).abs() < 1e-8);
    assert!((s[0] - 0.4).abs() < 1e-8);
    let p = unsafe { fl_hazard_fit_p_value(fit) };
    assert!(p > 0.0 && p < 1.0);
    assert!(unsafe { fl_hazard_fit_log_likelihood(fit) } < 0.0);

    let mut n = 0;
    assert_eq!(
        unsafe { fl_hazard_fit_period_effects(fit, ptr::null_mut(), 0, &mut n) },
        FlStatus::BufferTooSmall
    );
    assert_eq!(n, 1);
    unsafe { fl_hazard_fit_free(fit) };
}

#[test]
fn hazard_fit_errors() {
    let data = fl_hazard_data_new(0);
    assert_eq!(unsafe { fl_hazard_data_push(data, 0, ptr::null(), true) }, FlStatus::InvalidArgument);
    for _ in 0..5 {
        assert_eq!(unsafe { fl_hazard_data_push(data, 1, ptr::null(), false) }, FlStatus::Ok);
    }
    let mut fit = ptr::null_mut();
    assert_eq!(unsafe { fl_hazard_fit(data, FlLink::Logit, true, &mut fit) }, FlStatus::NoEvents);
    assert!(fit.is_null());
    unsafe { fl_hazard_data_free(data) };

    let data = fl_hazard_data_new(1);
    for i in 0..10 {
        push(data, 1, (i % 2) as f64, i % 2 == 1);
    }
    assert_eq!(unsafe { fl_hazard_fit(data, FlLink::Cloglog, false, &mut fit) }, FlStatus::Separation);
    assert_eq!(unsafe { fl_hazard_fit(data, FlLink::Logit, true, &mut fit) }, FlStatus::Ok);
    assert!(unsafe { fl_hazard_fit_penalized(fit) });
    unsafe {
        fl_hazard_fit_free(fit);
        fl_hazard_data_free(data);
    }
}

fn target_dir() -> PathBuf {
    // tests/<bin> lives in <target>/<profile>/deps.
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header_dir = manifest.join("include");
    assert!(header_dir.join("fableloop.h").exists());
    let Ok(cc) = Command::new("cc").arg("--version").output() else {
        eprintln!("skipped: no C compiler");
        return;
    };
    assert!(cc.status.success());
    let work = tempfile::tempdir().unwrap();
    let src = work.path().join("smoke.c");
    std::fs::write(&src, C_SMOKE).unwrap();

    let lib = target_dir().join("libfableloop_ffi.a");
    let mut cmd = Command::new("cc");
    cmd.arg("-std=c99").arg("-Wall").arg("-Werror").arg("-I").arg(&header_dir).arg(&src);
    if !lib.exists() {
        let out = cmd.arg("-fsyntax-only").output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        eprintln!("header checked; static library not found, link step skipped");
        return;
    }
    let bin = work.path().join("smoke");
    let out = cmd
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "85 3 0.2500");
}

const C_SMOKE: &str = r#"
#include <stdio.h>
#include "fableloop.h"

int main(void) {
    double v = 0;
    if (fl_extract_score("Overall Score: 85%", &v, NULL, NULL) != FL_STATUS_OK) return 1;
    double s[] = {70, 80, 85, 85, 90};
    uint32_t period = 0;
    bool event = false;
    if (fl_detect_mortality(s, 5, true, &period, &event) != FL_STATUS_OK || !event) return 2;
    double h[] = {0.5, 0.5}, out[2];
    if (fl_survival_from_hazards(h, 2, out) != FL_STATUS_OK) return 3;
    if (fl_extract_score("", &v, NULL, NULL) != FL_STATUS_EMPTY_INPUT) return 4;
    if (fl_last_error_message() == NULL) return 5;
    printf("%.0f %u %.4f\n", v, period, out[1]);
    return 0;
}
"#;
