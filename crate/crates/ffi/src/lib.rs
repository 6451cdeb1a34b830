//! C ABI over the tlspec toolkit.
//!
//! Every fallible function returns a [`TlspecStatus`]; on failure the
//! message is available from [`tlspec_last_error`] on the same thread.
//! Objects are opaque handles created by `*_new`/producer functions and
//! released with the matching `*_free`. Passing NULL to a `*_free` is a
//! no-op. Panics never cross the boundary; they are reported as
//! `TLSPEC_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use tlspec::config::ExperimentConfig;
use tlspec::io::{self, SpectrumMeta, TrackRecord};
use tlspec::num_complex::Complex64;
use tlspec::pipeline::TlsTrack;
use tlspec::resonator::{fit_simple, fit_with_background, FitMask};
use tlspec::stats::{self, DistributionFit};
use tlspec::{synth, BiasSpectrum, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TlspecStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Dimension = 4,
    InsufficientPoints = 5,
    NonConvergence = 6,
    Data = 7,
    Io = 8,
    Panic = 9,
}

impl From<&Error> for TlspecStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Domain(_) => TlspecStatus::InvalidArgument,
            Error::Config(_) => TlspecStatus::Config,
            Error::Dimension(_) => TlspecStatus::Dimension,
            Error::InsufficientPoints { .. } => TlspecStatus::InsufficientPoints,
            Error::NonConvergence(_) => TlspecStatus::NonConvergence,
            Error::Data(_) => TlspecStatus::Data,
            Error::Io { .. } => TlspecStatus::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(TlspecStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail((&e).into(), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(TlspecStatus::NullPointer, format!("{what} is NULL"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TlspecStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            TlspecStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            TlspecStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(TlspecStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or NULL after a
/// successful call. Valid until the next call into the library.
#[no_mangle]
pub extern "C" fn tlspec_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tlspec_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Opaque experiment configuration.
pub struct TlspecConfig(ExperimentConfig);

/// Opaque bias-sweep grid.
pub struct TlspecSpectrum(BiasSpectrum);

/// Opaque list of extracted tracks.
pub struct TlspecTracks(Vec<TlsTrack>);

#[no_mangle]
pub unsafe extern "C" fn tlspec_config_default(out: *mut *mut TlspecConfig) -> TlspecStatus {
    guard(|| {
        *out_arg(out, "out")? = Box::into_raw(Box::new(TlspecConfig(ExperimentConfig::default())));
        Ok(())
    })
}

/// Parses a TOML configuration from a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tlspec_config_from_toml(text: *const c_char, out: *mut *mut TlspecConfig) -> TlspecStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = ExperimentConfig::from_toml(str_arg(text, "text")?)?;
        *out = Box::into_raw(Box::new(TlspecConfig(cfg)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn tlspec_config_load(path: *const c_char, out: *mut *mut TlspecConfig) -> TlspecStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = ExperimentConfig::load(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(TlspecConfig(cfg)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn tlspec_config_set_seed(cfg: *mut TlspecConfig, seed: u64) -> TlspecStatus {
    guard(|| {
        out_arg(cfg, "cfg")?.0.seed = seed;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn tlspec_config_free(cfg: *mut TlspecConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Draws the configured ensemble and renders its sweep. `n_defects`, when
/// not NULL, receives the ensemble size.
#[no_mangle]
pub unsafe extern "C" fn tlspec_simulate(
    cfg: *const TlspecConfig,
    out: *mut *mut TlspecSpectrum,
    n_defects: *mut usize,
) -> TlspecStatus {
    guard(|| {
        let cfg = &ref_arg(cfg, "cfg")?.0;
        let out = out_arg(out, "out")?;
        let window = cfg.window.window()?;
        let res = cfg.resonator.model()?;
        let ens = synth::sample_ensemble(&cfg.material.spec(&window)?, &res, cfg.seed)?;
        let spec = synth::generate_spectrum(&ens, &res, &window, &cfg.noise.noise()?, cfg.seed)?;
        if let Some(n) = n_defects.as_mut() {
            *n = ens.len();
        }
        *out = Box::into_raw(Box::new(TlspecSpectrum(spec)));
        Ok(())
    })
}

/// Builds a spectrum from axes and a frequency-major grid of
/// `n_freq * n_bias` real and imaginary parts.
#[no_mangle]
pub unsafe extern "C" fn tlspec_spectrum_from_arrays(
    freqs_hz: *const f64,
    n_freq: usize,
    biases_vpm: *const f64,
    n_bias: usize,
    re: *const f64,
    im: *const f64,
    out: *mut *mut TlspecSpectrum,
) -> TlspecStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cells = n_freq
            .checked_mul(n_bias)
            .ok_or_else(|| Fail(TlspecStatus::Dimension, "grid size overflows".into()))?;
        let f = slice_arg(freqs_hz, n_freq, "freqs_hz")?;
        let b = slice_arg(biases_vpm, n_bias, "biases_vpm")?;
        let re = slice_arg(re, cells, "re")?;
        let im = slice_arg(im, cells, "im")?;
        let data = re.iter().zip(im).map(|(a, b)| Complex64::new(*a, *b)).collect();
        let spec = BiasSpectrum::new(f.to_vec(), b.to_vec(), data)?;
        *out = Box::into_raw(Box::new(TlspecSpectrum(spec)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn tlspec_spectrum_read(path: *const c_char, out: *mut *mut TlspecSpectrum) -> TlspecStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let (spec, _) = io::read_spectrum(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(TlspecSpectrum(spec)));
        Ok(())
    })
}

/// Writes a spectrum file atomically. `cfg` may be NULL; when given, its
/// seed and hash are recorded in the header.
#[no_mangle]
pub unsafe extern "C" fn tlspec_spectrum_write(
    spec: *const TlspecSpectrum,
    cfg: *const TlspecConfig,
    path: *const c_char,
) -> TlspecStatus {
    guard(|| {
        let spec = &ref_arg(spec, "spec")?.0;
        let path = str_arg(path, "path")?;
        let meta = match cfg.as_ref() {
            Some(c) => SpectrumMeta {
                seed: Some(c.0.seed),
                config_sha256: Some(c.0.hash()),
                resonator: c.0.resonator.model().ok(),
            },
            None => SpectrumMeta::default(),
        };
        io::write_spectrum(Path::new(path), spec, &meta)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn tlspec_spectrum_shape(
    spec: *const TlspecSpectrum,
    n_freq: *mut usize,
    n_bias: *mut usize,
) -> TlspecStatus {
    guard(|| {
        let spec = &ref_arg(spec, "spec")?.0;
        *out_arg(n_freq, "n_freq")? = spec.n_freq();
        *out_arg(n_bias, "n_bias")? = spec.n_bias();
        Ok(())
    })
}

/// Copies the grid into caller buffers of `len` = n_freq·n_bias values,
/// frequency-major.
#[no_mangle]
pub unsafe extern "C" fn tlspec_spectrum_copy_data(
    spec: *const TlspecSpectrum,
    re: *mut f64,
    im: *mut f64,
    len: usize,
) -> TlspecStatus {
    guard(|| {
        let spec = &ref_arg(spec, "spec")?.0;
        if len != spec.data.len() {
            return Err(Fail(TlspecStatus::Dimension, format!("buffer holds {len} cells, grid has {}", spec.data.len())));
        }
        if re.is_null() || im.is_null() {
            return Err(null("re/im"));
        }
        let (re, im) = (std::slice::from_raw_parts_mut(re, len), std::slice::from_raw_parts_mut(im, len));
        for (i, z) in spec.data.iter().enumerate() {
            re[i] = z.re;
            im[i] = z.im;
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn tlspec_spectrum_free(spec: *mut TlspecSpectrum) {
    if !spec.is_null() {
        drop(Box::from_raw(spec));
    }
}

/// Runs the extraction pipeline with the configuration's pipeline settings
/// and seed.
#[no_mangle]
pub unsafe extern "C" fn tlspec_extract(
    spec: *const TlspecSpectrum,
    cfg: *const TlspecConfig,
    out: *mut *mut TlspecTracks,
) -> TlspecStatus {
    guard(|| {
        let spec = &ref_arg(spec, "spec")?.0;
        let cfg = &ref_arg(cfg, "cfg")?.0;
        let out = out_arg(out, "out")?;
        let ex = tlspec::pipeline::extract(spec, &cfg.pipeline, cfg.seed)?;
        *out = Box::into_raw(Box::new(TlspecTracks(ex.tracks)));
        Ok(())
    })
}

/// One extracted track in reporting units.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TlspecTrack {
    pub delta0_ghz: f64,
    pub vertex_bias_kvpm: f64,
    pub pz_debye: f64,
    /// Mean squared frequency residual (kHz²).
    pub rss_khz2: f64,
    pub n_points: usize,
}

#[no_mangle]
pub unsafe extern "C" fn tlspec_tracks_len(tracks: *const TlspecTracks, len: *mut usize) -> TlspecStatus {
    guard(|| {
        *out_arg(len, "len")? = ref_arg(tracks, "tracks")?.0.len();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn tlspec_tracks_get(tracks: *const TlspecTracks, index: usize, out: *mut TlspecTrack) -> TlspecStatus {
    guard(|| {
        let t = &ref_arg(tracks, "tracks")?.0;
        let out = out_arg(out, "out")?;
        let k = t
            .get(index)
            .ok_or_else(|| Fail(TlspecStatus::InvalidArgument, format!("index {index} out of range ({} tracks)", t.len())))?;
        let r = TrackRecord::from(k);
        *out = TlspecTrack {
            delta0_ghz: r.delta0_ghz,
            vertex_bias_kvpm: r.vertex_bias_kvpm,
            pz_debye: r.pz_debye,
            rss_khz2: r.rss,
            n_points: r.n_points,
        };
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn tlspec_tracks_free(tracks: *mut TlspecTracks) {
    if !tracks.is_null() {
        drop(Box::from_raw(tracks));
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TlspecResonatorModel {
    Simple = 0,
    Background = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TlspecResonatorFit {
    pub f0_hz: f64,
    pub q_total: f64,
    pub q_i: f64,
    pub q_e: f64,
    pub phi: f64,
    pub residual: f64,
    pub converged: bool,
    pub ill_conditioned: bool,
}

/// Fits the ensemble-averaged trace of a spectrum over its full span.
#[no_mangle]
pub unsafe extern "C" fn tlspec_fit_resonator(
    spec: *const TlspecSpectrum,
    model: TlspecResonatorModel,
    out: *mut TlspecResonatorFit,
) -> TlspecStatus {
    guard(|| {
        let spec = &ref_arg(spec, "spec")?.0;
        let out = out_arg(out, "out")?;
        let avg = synth::ensemble_average(spec)?;
        let mask = FitMask::default();
        let fit = match model {
            TlspecResonatorModel::Simple => fit_simple(&spec.freqs, &avg, &mask)?,
            TlspecResonatorModel::Background => fit_with_background(&spec.freqs, &avg, &mask)?,
        };
        *out = TlspecResonatorFit {
            f0_hz: fit.f0,
            q_total: fit.q_total,
            q_i: fit.q_i,
            q_e: fit.q_e,
            phi: fit.phi,
            residual: fit.residual,
            converged: fit.converged,
            ill_conditioned: fit.ill_conditioned,
        };
        Ok(())
    })
}

/// Material-weighted mean and standard deviation of measured dipoles (D).
#[no_mangle]
pub unsafe extern "C" fn tlspec_calculated_mean_std(
    values: *const f64,
    n: usize,
    mean: *mut f64,
    std: *mut f64,
) -> TlspecStatus {
    guard(|| {
        let v = slice_arg(values, n, "values")?;
        let mean = out_arg(mean, "mean")?;
        let std = out_arg(std, "std")?;
        (*mean, *std) = stats::calculated_mean_std(v)?;
        Ok(())
    })
}

/// Material constant P₀ (1/(J·m³)) from measured dipoles (D) and the
/// configuration's geometry.
#[no_mangle]
pub unsafe extern "C" fn tlspec_material_constant(
    values: *const f64,
    n: usize,
    cfg: *const TlspecConfig,
    out: *mut f64,
) -> TlspecStatus {
    guard(|| {
        let v = slice_arg(values, n, "values")?;
        let g = ref_arg(cfg, "cfg")?.0.geometry()?;
        *out_arg(out, "out")? = stats::material_constant(v, &g)?;
        Ok(())
    })
}

/// Low-power loss tangent of measured dipoles (D) with the configuration's
/// geometry and permittivity.
#[no_mangle]
pub unsafe extern "C" fn tlspec_loss_from_dipoles(
    values: *const f64,
    n: usize,
    cfg: *const TlspecConfig,
    out: *mut f64,
) -> TlspecStatus {
    guard(|| {
        let v = slice_arg(values, n, "values")?;
        let cfg = &ref_arg(cfg, "cfg")?.0;
        *out_arg(out, "out")? = stats::loss_from_dipoles(v, &cfg.geometry()?, cfg.eps_r())?;
        Ok(())
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TlspecFitFamily {
    ModifiedGaussian = 0,
    TruncatedNormal = 1,
    Gamma = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TlspecDistributionFit {
    /// (μ, σ) in D, or shape α and rate β (1/D).
    pub params: [f64; 2],
    pub stderr: [f64; 2],
    pub loglik: f64,
    pub mean: f64,
    pub converged: bool,
}

/// Maximum-likelihood fit of a dipole family to measured dipoles (D).
#[no_mangle]
pub unsafe extern "C" fn tlspec_mle_fit(
    family: TlspecFitFamily,
    values: *const f64,
    n: usize,
    out: *mut TlspecDistributionFit,
) -> TlspecStatus {
    guard(|| {
        let v = slice_arg(values, n, "values")?;
        let out = out_arg(out, "out")?;
        let fit: DistributionFit = match family {
            TlspecFitFamily::ModifiedGaussian => stats::mle_modified_gaussian(v)?,
            TlspecFitFamily::TruncatedNormal => stats::mle_truncated_normal(v)?,
            TlspecFitFamily::Gamma => stats::mle_gamma(v)?,
        };
        *out = TlspecDistributionFit {
            params: fit.params,
            stderr: fit.stderr,
            loglik: fit.loglik,
            mean: fit.mean(),
            converged: fit.converged,
        };
        Ok(())
    })
}
