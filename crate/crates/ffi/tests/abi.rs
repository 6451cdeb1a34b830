use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use tlspec_ffi::*;

const SMALL: &str = "seed = 2\n[window]\nn_freq = 300\nn_bias = 60\nf_span_mhz = 6\n";

fn config(text: &str) -> *mut TlspecConfig {
    let c = CString::new(text).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { tlspec_config_from_toml(c.as_ptr(), &mut cfg) }, TlspecStatus::Ok);
    assert!(!cfg.is_null());
    cfg
}

fn last_error() -> String {
    let p = tlspec_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn version_is_static_string() {
    let v = unsafe { CStr::from_ptr(tlspec_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn config_errors_set_status_and_message() {
    let bad = CString::new("[resonator]\nf0_hz = 1\n").unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { tlspec_config_from_toml(bad.as_ptr(), &mut cfg) }, TlspecStatus::Config);
    assert!(cfg.is_null());
    assert!(last_error().contains("f0_hz"));
    assert_eq!(unsafe { tlspec_config_from_toml(ptr::null(), &mut cfg) }, TlspecStatus::NullPointer);
    let ok = config(SMALL);
    assert!(tlspec_last_error().is_null());
    unsafe { tlspec_config_free(ok) };
    unsafe { tlspec_config_free(ptr::null_mut()) };
}

#[test]
fn null_handles_are_rejected() {
    let mut n = 0usize;
    assert_eq!(unsafe { tlspec_tracks_len(ptr::null(), &mut n) }, TlspecStatus::NullPointer);
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { tlspec_simulate(ptr::null(), &mut out, ptr::null_mut()) }, TlspecStatus::NullPointer);
    let mut m = 0.0;
    assert_eq!(
        unsafe { tlspec_calculated_mean_std(ptr::null(), 3, &mut m, ptr::null_mut()) },
        TlspecStatus::NullPointer
    );
}

#[test]
fn statistics_entry_points() {
    let p = [1.0, 2.0, 4.0];
    let (mut mean, mut sd) = (0.0, 0.0);
    assert_eq!(unsafe { tlspec_calculated_mean_std(p.as_ptr(), 3, &mut mean, &mut sd) }, TlspecStatus::Ok);
    assert!((mean - 3.0 / 1.75).abs() < 1e-12);
    assert_eq!(unsafe { tlspec_calculated_mean_std(p.as_ptr(), 0, &mut mean, &mut sd) }, TlspecStatus::InsufficientPoints);
    let neg = [-1.0, 2.0];
    assert_eq!(unsafe { tlspec_calculated_mean_std(neg.as_ptr(), 2, &mut mean, &mut sd) }, TlspecStatus::InvalidArgument);

    let cfg = config(SMALL);
    let (mut p0, mut p0_double, mut loss) = (0.0, 0.0, 0.0);
    let twice = [1.0, 1.0, 2.0, 2.0, 4.0, 4.0];
    unsafe {
        assert_eq!(tlspec_material_constant(p.as_ptr(), 3, cfg, &mut p0), TlspecStatus::Ok);
        assert_eq!(tlspec_material_constant(twice.as_ptr(), 6, cfg, &mut p0_double), TlspecStatus::Ok);
        assert_eq!(tlspec_loss_from_dipoles(p.as_ptr(), 3, cfg, &mut loss), TlspecStatus::Ok);
        tlspec_config_free(cfg);
    }
    assert!((p0_double / p0 - 2.0).abs() < 1e-12);
    assert!(loss > 0.0);

    let xs: Vec<f64> = (0..200).map(|i| 1.0 + 3.0 * ((i as f64 + 0.5) / 200.0)).collect();
    let mut fit = TlspecDistributionFit::default();
    assert_eq!(unsafe { tlspec_mle_fit(TlspecFitFamily::Gamma, xs.as_ptr(), xs.len(), &mut fit) }, TlspecStatus::Ok);
    assert!((fit.mean - 2.5).abs() < 0.05, "{fit:?}");
    assert!(fit.converged);
}

#[test]
fn spectrum_round_trip_through_file() {
    let freqs = [4.99e9, 5.0e9, 5.01e9];
    let biases = [-1e3, 0.0];
    let re = [1.0, 0.9, 0.5, 0.4, 0.95, 1.0];
    let im = [0.0, 0.1, -0.2, 0.2, 0.0, -0.1];
    let mut spec = ptr::null_mut();
    let st = unsafe {
        tlspec_spectrum_from_arrays(freqs.as_ptr(), 3, biases.as_ptr(), 2, re.as_ptr(), im.as_ptr(), &mut spec)
    };
    assert_eq!(st, TlspecStatus::Ok);
    let dir = tempdir();
    let path = CString::new(dir.join("s.tlsspec").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { tlspec_spectrum_write(spec, ptr::null(), path.as_ptr()) }, TlspecStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { tlspec_spectrum_read(path.as_ptr(), &mut back) }, TlspecStatus::Ok);
    let (mut nf, mut nb) = (0, 0);
    assert_eq!(unsafe { tlspec_spectrum_shape(back, &mut nf, &mut nb) }, TlspecStatus::Ok);
    assert_eq!((nf, nb), (3, 2));
    let (mut r2, mut i2) = ([0.0; 6], [0.0; 6]);
    assert_eq!(unsafe { tlspec_spectrum_copy_data(back, r2.as_mut_ptr(), i2.as_mut_ptr(), 6) }, TlspecStatus::Ok);
    assert_eq!((r2, i2), (re, im));
    assert_eq!(unsafe { tlspec_spectrum_copy_data(back, r2.as_mut_ptr(), i2.as_mut_ptr(), 5) }, TlspecStatus::Dimension);

    let mut bytes = std::fs::read(dir.join("s.tlsspec")).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 0x40;
    std::fs::write(dir.join("s.tlsspec"), bytes).unwrap();
    let mut bad = ptr::null_mut();
    assert_eq!(unsafe { tlspec_spectrum_read(path.as_ptr(), &mut bad) }, TlspecStatus::Data);
    assert!(last_error().contains("checksum"));
    let missing = CString::new(dir.join("nope").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { tlspec_spectrum_read(missing.as_ptr(), &mut bad) }, TlspecStatus::Io);
    unsafe {
        tlspec_spectrum_free(spec);
        tlspec_spectrum_free(back);
    }
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn simulate_extract_and_fit() {
    let cfg = config(SMALL);
    let mut spec = ptr::null_mut();
    let mut n_def = 0usize;
    assert_eq!(unsafe { tlspec_simulate(cfg, &mut spec, &mut n_def) }, TlspecStatus::Ok);
    assert!(n_def > 0);
    let mut tracks = ptr::null_mut();
    assert_eq!(unsafe { tlspec_extract(spec, cfg, &mut tracks) }, TlspecStatus::Ok);
    let mut len = 0usize;
    assert_eq!(unsafe { tlspec_tracks_len(tracks, &mut len) }, TlspecStatus::Ok);
    let mut t = TlspecTrack::default();
    for i in 0..len {
        assert_eq!(unsafe { tlspec_tracks_get(tracks, i, &mut t) }, TlspecStatus::Ok);
        assert!(t.pz_debye > 0.0 && t.n_points > 0);
    }
    assert_eq!(unsafe { tlspec_tracks_get(tracks, len, &mut t) }, TlspecStatus::InvalidArgument);
    let mut fit = TlspecResonatorFit::default();
    assert_eq!(unsafe { tlspec_fit_resonator(spec, TlspecResonatorModel::Simple, &mut fit) }, TlspecStatus::Ok);
    assert!((fit.f0_hz / 5e9 - 1.0).abs() < 1e-3);
    assert!(fit.q_i > 0.0 && fit.converged);
    unsafe {
        tlspec_tracks_free(tracks);
        tlspec_spectrum_free(spec);
        tlspec_config_free(cfg);
    }
}

fn tempdir() -> PathBuf {
    let d = std::env::temp_dir().join(format!("tlspec-ffi-{}-{:?}", std::process::id(), std::thread::current().id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}

/// Compiles tests/c/smoke.c against the generated header and the static
/// library when a C compiler is available.
#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = manifest.join("include/tlspec.h");
    assert!(header.exists(), "header not generated");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["tlspec_simulate", "tlspec_extract", "tlspec_last_error", "tlspec_mle_fit", "TLSPEC_STATUS_PANIC"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping C link test: no cc");
        return;
    }
    // `cargo test` builds only the rlib; build the archive in its own target
    // directory so the outer build lock is not contended.
    let target = manifest.join("../../target/c-abi");
    let built = Command::new(env!("CARGO"))
        .args(["build", "--quiet", "--release", "--lib", "-p", "tlspec-ffi", "--target-dir"])
        .arg(&target)
        .current_dir(&manifest)
        .status()
        .unwrap();
    assert!(built.success(), "building the static library failed");
    let lib = target.join("release/libtlspec_ffi.a");
    let out = tempdir().join("smoke");
    let status = Command::new("cc")
        .args(["-std=c11", "-Wall", "-Werror", "-I"])
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let run = Command::new(&out).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).contains("grid 200x40"));
}
