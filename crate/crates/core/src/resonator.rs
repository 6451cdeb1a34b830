//! Notch-type resonator fits of complex transmission traces, with an
//! optional linear background for nearby low-Q modes.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{levenberg_marquardt, LmOptions, LmReport};

/// Linear background C(1 + (a + ib)(f − f₀))e^{iθ}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Background {
    /// |C|
    pub c: f64,
    /// Slope coefficients (1/Hz).
    pub a: f64,
    pub b: f64,
    /// Global phase (rad).
    pub theta: f64,
}

impl Background {
    pub fn eval(&self, f: f64, f0: f64) -> Complex64 {
        Complex64::from_polar(self.c, self.theta) * Complex64::new(1.0 + self.a * (f - f0), self.b * (f - f0))
    }
}

/// One-sigma uncertainties from the fit covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitUncertainty {
    pub f0: f64,
    pub q_total: f64,
    pub q_i: f64,
    pub q_e: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResonatorFitResult {
    pub f0: f64,
    pub q_total: f64,
    pub q_i: f64,
    /// Effective external Q, |Q_e|/cos φ, so that 1/Q = 1/Q_i + 1/Q_e.
    pub q_e: f64,
    /// Impedance-mismatch phase φ (rad).
    pub phi: f64,
    /// |Q_e| of the complex coupling Q.
    pub q_e_abs: f64,
    pub background: Background,
    /// RMS of the complex residual divided by the mean off-resonant level.
    pub residual: f64,
    pub uncertainty: Option<FitUncertainty>,
    pub converged: bool,
    /// Set when the trace does not constrain the resonance (span below one
    /// linewidth, or no visible dip).
    pub ill_conditioned: bool,
}

impl ResonatorFitResult {
    /// Fitted model at frequency `f` (Hz).
    pub fn model(&self, f: f64) -> Complex64 {
        let r = self.q_total / self.q_e_abs;
        let x = Complex64::new(1.0, 2.0 * self.q_total * (f - self.f0) / self.f0);
        self.background.eval(f, self.f0) * (Complex64::new(1.0, 0.0) - Complex64::from_polar(r, self.phi) / x)
    }

    /// Defect self-energy in units of the fitted half-linewidth, recovered
    /// from a measured point: S21/bg = 1 − r e^{iφ}/(1 + 2iQ(f − f₀)/f₀ + y).
    /// Re y is a Lorentzian peak at each defect frequency.
    pub fn normalized_self_energy(&self, f: f64, s21: Complex64) -> Complex64 {
        let s = s21 / self.background.eval(f, self.f0);
        let r = self.q_total / self.q_e_abs;
        let one_minus = Complex64::new(1.0, 0.0) - s;
        let one_minus = if one_minus.norm() < 1e-12 { Complex64::new(1e-12, 0.0) } else { one_minus };
        Complex64::from_polar(r, self.phi) / one_minus - Complex64::new(1.0, 2.0 * self.q_total * (f - self.f0) / self.f0)
    }
}

/// Optional restriction of the fit to part of the trace.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FitMask {
    pub f_min: Option<f64>,
    pub f_max: Option<f64>,
}

impl FitMask {
    fn select(&self, freqs: &[f64], trace: &[Complex64]) -> (Vec<f64>, Vec<Complex64>) {
        freqs
            .iter()
            .zip(trace)
            .filter(|(f, _)| self.f_min.is_none_or(|lo| **f >= lo) && self.f_max.is_none_or(|hi| **f <= hi))
            .map(|(f, s)| (*f, *s))
            .unzip()
    }
}

// Parameter vector: [Re P, Im P, x0, ln Q, r, φ, a·s, b·s] where P is the
// complex prefactor, x0 = (f₀ − f_ref)/w_ref, r = Q/|Q_e| and s the scale
// of the frequency offsets. The background fit uses all eight.
struct Scales {
    f_ref: f64,
    w_ref: f64,
    span: f64,
}

fn model_at(p: &[f64], f: f64, sc: &Scales) -> Complex64 {
    let pre = Complex64::new(p[0], p[1]);
    let f0 = sc.f_ref + p[2] * sc.w_ref;
    let q = p[3].exp();
    let x = Complex64::new(1.0, 2.0 * q * (f - f0) / f0);
    let dip = Complex64::new(1.0, 0.0) - Complex64::from_polar(p[4], p[5]) / x;
    let bg = if p.len() > 6 {
        let u = (f - f0) / sc.span;
        Complex64::new(1.0 + p[6] * u, p[7] * u)
    } else {
        Complex64::new(1.0, 0.0)
    };
    pre * bg * dip
}

struct Guess {
    params: Vec<f64>,
    ill: bool,
}

fn initial_guess(freqs: &[f64], trace: &[Complex64]) -> Guess {
    let n = freqs.len();
    let k = (n / 20).max(1);
    let lo: Complex64 = trace[..k].iter().sum::<Complex64>() / k as f64;
    let hi: Complex64 = trace[n - k..].iter().sum::<Complex64>() / k as f64;
    let pre = 0.5 * (lo + hi);
    let norm: Vec<Complex64> = trace.iter().map(|s| s / pre).collect();
    let depth: Vec<f64> = norm.iter().map(|s| (Complex64::new(1.0, 0.0) - s).norm()).collect();
    let (imax, &dmax) = depth.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    let half = dmax / 2f64.sqrt();
    let mut left = imax;
    while left > 0 && depth[left] > half {
        left -= 1;
    }
    let mut right = imax;
    while right + 1 < n && depth[right] > half {
        right += 1;
    }
    let span = freqs[n - 1] - freqs[0];
    let fwhm = (freqs[right] - freqs[left]).max(span / n as f64);
    let f0 = freqs[imax];
    let q = f0 / fwhm;
    let d = Complex64::new(1.0, 0.0) - norm[imax];
    let ill = dmax < 1e-6 || fwhm >= span;
    Guess { params: vec![pre.re, pre.im, 0.0, q.ln(), d.norm().max(1e-6), d.arg()], ill: ill || span < 1.0 }
}

fn run_fit(
    freqs: &[f64],
    trace: &[Complex64],
    x0: &[f64],
    sc: &Scales,
) -> Result<LmReport> {
    let m = 2 * freqs.len();
    let residuals = |p: &[f64], r: &mut [f64]| {
        for (k, (&f, s)) in freqs.iter().zip(trace).enumerate() {
            let d = model_at(p, f, sc) - s;
            r[2 * k] = d.re;
            r[2 * k + 1] = d.im;
        }
    };
    let typical: Vec<f64> = x0
        .iter()
        .enumerate()
        .map(|(i, v)| match i {
            0 | 1 => x0[0].hypot(x0[1]).max(1e-3),
            2 => 1.0,
            3 => 1.0,
            4 => 0.1,
            5 => 0.1,
            _ => v.abs().max(1e-2),
        })
        .collect();
    let opts = LmOptions { max_iter: 500, ..Default::default() };
    levenberg_marquardt(residuals, x0, m, &typical, &opts)
}

fn assemble(report: &LmReport, freqs: &[f64], trace: &[Complex64], sc: &Scales, ill: bool) -> Result<ResonatorFitResult> {
    let p = &report.params;
    let f0 = sc.f_ref + p[2] * sc.w_ref;
    let q_total = p[3].exp();
    let (mut r, mut phi) = (p[4], p[5]);
    if r < 0.0 {
        r = -r;
        phi += std::f64::consts::PI;
    }
    let phi = (phi + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
    let q_e_abs = q_total / r.max(1e-300);
    let inv_qi = 1.0 / q_total - phi.cos() / q_e_abs;
    let q_i = 1.0 / inv_qi;
    let q_e = q_e_abs / phi.cos();
    let pre = Complex64::new(p[0], p[1]);
    let (a, b) = if p.len() > 6 { (p[6] / sc.span, p[7] / sc.span) } else { (0.0, 0.0) };
    let background = Background { c: pre.norm(), a, b, theta: pre.arg() };
    let level = trace.iter().map(|s| s.norm()).fold(0.0, f64::max).max(1e-300);
    let residual = (report.rss / trace.len() as f64).sqrt() / level;
    let span = freqs[freqs.len() - 1] - freqs[0];
    let ill = ill || f0 / q_total > span || r < 1e-6;
    if !ill && (!(q_total > 0.0) || !(q_i > 0.0) || !q_i.is_finite() || !(q_e > 0.0)) {
        return Err(Error::NonConvergence(format!(
            "unphysical resonator fit: Q={q_total:.4e}, Q_i={q_i:.4e}, Q_e={q_e:.4e}, phi={phi:.3}, residual={residual:.3e}"
        )));
    }
    let uncertainty = report.covariance().map(|cov| {
        // delta method on the mapping p -> (f0, Q, Q_i, Q_e)
        let outputs = |p: &[f64]| {
            let q = p[3].exp();
            let qe_abs = q / p[4];
            let qi = 1.0 / (1.0 / q - p[5].cos() / qe_abs);
            [sc.f_ref + p[2] * sc.w_ref, q, qi, qe_abs / p[5].cos()]
        };
        let base = outputs(p);
        let n = p.len();
        let mut grads = vec![[0.0; 4]; n];
        let mut pp = p.clone();
        for j in 0..n {
            let h = 1e-6 * p[j].abs().max(1e-3);
            pp[j] = p[j] + h;
            let up = outputs(&pp);
            pp[j] = p[j];
            for o in 0..4 {
                grads[j][o] = (up[o] - base[o]) / h;
            }
        }
        let mut var = [0.0; 4];
        for o in 0..4 {
            for i in 0..n {
                for j in 0..n {
                    var[o] += grads[i][o] * cov[(i, j)] * grads[j][o];
                }
            }
        }
        FitUncertainty { f0: var[0].sqrt(), q_total: var[1].sqrt(), q_i: var[2].sqrt(), q_e: var[3].sqrt() }
    });
    Ok(ResonatorFitResult {
        f0,
        q_total,
        q_i,
        q_e,
        phi,
        q_e_abs,
        background,
        residual,
        uncertainty,
        converged: report.converged,
        ill_conditioned: ill,
    })
}

fn check_inputs(freqs: &[f64], trace: &[Complex64]) -> Result<()> {
    if freqs.len() != trace.len() {
        return Err(Error::Dimension(format!("{} frequencies vs {} samples", freqs.len(), trace.len())));
    }
    if freqs.len() < 8 {
        return Err(Error::InsufficientPoints { needed: 8, got: freqs.len() });
    }
    if freqs.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::data("frequency axis must be strictly ascending"));
    }
    if trace.iter().any(|s| !s.re.is_finite() || !s.im.is_finite()) {
        return Err(Error::data("trace contains non-finite samples"));
    }
    Ok(())
}

fn fit_simple_report(freqs: &[f64], trace: &[Complex64]) -> Result<(LmReport, Scales, bool)> {
    let g = initial_guess(freqs, trace);
    let pre = Complex64::new(g.params[0], g.params[1]);
    let k = trace
        .iter()
        .enumerate()
        .map(|(k, s)| (k, (s / pre - 1.0).norm()))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .0;
    let f_ref = freqs[k];
    let span = freqs[freqs.len() - 1] - freqs[0];
    let w_ref = f_ref / g.params[3].exp();
    let sc = Scales { f_ref, w_ref, span };
    let mut best: Option<LmReport> = None;
    for q_scale in [1.0, 0.5, 2.0] {
        let mut x0 = g.params.clone();
        x0[3] += f64::ln(q_scale);
        if let Ok(rep) = run_fit(freqs, trace, &x0, &sc) {
            if best.as_ref().is_none_or(|b| rep.rss < b.rss) {
                best = Some(rep);
            }
        }
    }
    let rep = best.ok_or_else(|| Error::NonConvergence("every resonator fit start failed".into()))?;
    Ok((rep, sc, g.ill))
}

/// Fits the notch model with a constant complex prefactor.
pub fn fit_simple(freqs: &[f64], trace: &[Complex64], mask: &FitMask) -> Result<ResonatorFitResult> {
    check_inputs(freqs, trace)?;
    let (f, t) = mask.select(freqs, trace);
    check_inputs(&f, &t)?;
    let (rep, sc, ill) = fit_simple_report(&f, &t)?;
    assemble(&rep, &f, &t, &sc, ill)
}

/// Fits the notch model times a linear background. Starts from the simple
/// optimum with zero slope, so its residual never exceeds the simple fit's.
pub fn fit_with_background(freqs: &[f64], trace: &[Complex64], mask: &FitMask) -> Result<ResonatorFitResult> {
    check_inputs(freqs, trace)?;
    let (f, t) = mask.select(freqs, trace);
    check_inputs(&f, &t)?;
    let (simple, sc, ill) = fit_simple_report(&f, &t)?;
    let mut x0 = simple.params.clone();
    x0.extend([0.0, 0.0]);
    let rep = run_fit(&f, &t, &x0, &sc)?;
    let rep = if rep.rss <= simple.rss {
        rep
    } else {
        // keep the nested optimum if the extended search went nowhere
        let mut s = simple;
        s.params.extend([0.0, 0.0]);
        let m = 2 * f.len();
        let jac = nalgebra::DMatrix::zeros(m, 8);
        LmReport { jacobian: jac, ..s }
    };
    assemble(&rep, &f, &t, &sc, ill)
}

/// One auxiliary low-Q mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowQMode {
    pub q: f64,
    pub q_e: f64,
    /// Angular frequency (rad/s).
    pub omega: f64,
}

/// Product of distant low-Q notch responses, Π_k (1 − (Q_k/Q_e,k)/(1 − 2iQ_k(ω − ω_k)/ω_k)).
pub fn low_q_background(omega: f64, modes: &[LowQMode]) -> Result<Complex64> {
    if modes.is_empty() {
        return Err(Error::domain("low-Q background needs at least one mode"));
    }
    Ok(modes
        .iter()
        .map(|m| {
            let x = Complex64::new(1.0, -2.0 * m.q * (omega - m.omega) / m.omega);
            Complex64::new(1.0, 0.0) - (m.q / m.q_e) / x
        })
        .product())
}
