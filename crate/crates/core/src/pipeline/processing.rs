use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::resonator::ResonatorFitResult;
use crate::spectrum::BiasSpectrum;

/// Real-valued grid on the spectrum's axes, same frequency-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedGrid {
    pub freqs: Vec<f64>,
    pub biases: Vec<f64>,
    pub values: Vec<f64>,
    /// Processing steps applied, oldest first.
    pub provenance: Vec<String>,
}

impl ProcessedGrid {
    pub fn n_freq(&self) -> usize {
        self.freqs.len()
    }

    pub fn n_bias(&self) -> usize {
        self.biases.len()
    }

    pub fn get(&self, fi: usize, bi: usize) -> f64 {
        self.values[fi * self.n_bias() + bi]
    }

    pub fn column(&self, bi: usize) -> Vec<f64> {
        let nb = self.n_bias();
        (0..self.n_freq()).map(|fi| self.values[fi * nb + bi]).collect()
    }

    fn from_columns(freqs: Vec<f64>, biases: Vec<f64>, cols: Vec<Vec<f64>>, provenance: Vec<String>) -> Self {
        let nb = biases.len();
        let mut values = vec![0.0; freqs.len() * nb];
        for (bi, c) in cols.iter().enumerate() {
            for (fi, v) in c.iter().enumerate() {
                values[fi * nb + bi] = *v;
            }
        }
        Self { freqs, biases, values, provenance }
    }
}

/// 20·log₁₀|z| with a floor; reports whether the floor was used.
fn db(z: Complex64, floor_db: f64) -> (f64, bool) {
    let m = z.norm();
    if m > 0.0 {
        ((20.0 * m.log10()).max(floor_db), false)
    } else {
        (floor_db, true)
    }
}

/// Cell value (|S21|_dB − |S21,avg|_dB)·|S21,avg|. Cells with zero
/// magnitude are replaced by `floor_db` and counted in the provenance.
pub fn contrast_enhance(spec: &BiasSpectrum, avg: &[Complex64], floor_db: f64) -> Result<ProcessedGrid> {
    if avg.len() != spec.n_freq() {
        return Err(Error::Dimension(format!(
            "average trace has {} points, spectrum has {} frequencies",
            avg.len(),
            spec.n_freq()
        )));
    }
    let nb = spec.n_bias();
    let mut floored = 0usize;
    let mut values = Vec::with_capacity(spec.data.len());
    for (fi, a) in avg.iter().enumerate() {
        let (a_db, fa) = db(*a, floor_db);
        floored += fa as usize;
        for bi in 0..nb {
            let (s_db, fs) = db(spec.data[fi * nb + bi], floor_db);
            floored += fs as usize;
            values.push((s_db - a_db) * a.norm());
        }
    }
    let mut provenance = vec!["contrast_enhance".to_string()];
    if floored > 0 {
        provenance.push(format!("db_floor {floor_db} dB applied to {floored} cells"));
    }
    Ok(ProcessedGrid { freqs: spec.freqs.clone(), biases: spec.biases.clone(), values, provenance })
}

/// Zero-phase low-pass response: flat to `cutoff`, raised-cosine roll-off
/// over the next quarter of `cutoff`. Frequencies in cycles per sample.
fn response(q: f64, cutoff: f64) -> f64 {
    let q = q.abs();
    let edge = 1.25 * cutoff;
    if q <= cutoff {
        1.0
    } else if q >= edge {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * (q - cutoff) / (edge - cutoff)).cos())
    }
}

fn cutoff_cycles_per_sample(freqs: &[f64], cutoff_per_ghz: f64) -> Result<f64> {
    if freqs.len() < 2 {
        return Err(Error::InsufficientPoints { needed: 2, got: freqs.len() });
    }
    let step_ghz = (freqs[1] - freqs[0]) / 1e9;
    let c = cutoff_per_ghz * step_ghz;
    if !(c > 0.0) || c >= 0.5 {
        return Err(Error::config(format!(
            "low-pass cutoff {cutoff_per_ghz} cycles/GHz must lie in (0, Nyquist = {}) cycles/GHz",
            0.5 / step_ghz
        )));
    }
    Ok(c)
}

/// Low-pass along frequency, applied per bias column. The column is
/// mirror-extended to suppress wrap-around at the ends.
pub fn lowpass(grid: &ProcessedGrid, cutoff_per_ghz: f64) -> Result<ProcessedGrid> {
    let c = cutoff_cycles_per_sample(&grid.freqs, cutoff_per_ghz)?;
    let n = grid.n_freq();
    let m = 2 * n;
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(m);
    let inv = planner.plan_fft_inverse(m);
    let gain: Vec<f64> = (0..m)
        .map(|k| {
            let q = if k <= m / 2 { k as f64 } else { k as f64 - m as f64 } / m as f64;
            response(q, c)
        })
        .collect();
    let cols: Vec<Vec<f64>> = (0..grid.n_bias())
        .into_par_iter()
        .map(|bi| {
            let col = grid.column(bi);
            let mut buf: Vec<Complex64> = col
                .iter()
                .chain(col.iter().rev())
                .map(|&v| Complex64::new(v, 0.0))
                .collect();
            fwd.process(&mut buf);
            for (b, g) in buf.iter_mut().zip(&gain) {
                *b *= g;
            }
            inv.process(&mut buf);
            buf[..n].iter().map(|z| z.re / m as f64).collect()
        })
        .collect();
    let mut provenance = grid.provenance.clone();
    provenance.push(format!("lowpass cutoff {cutoff_per_ghz} cycles/GHz"));
    Ok(ProcessedGrid::from_columns(grid.freqs.clone(), grid.biases.clone(), cols, provenance))
}

/// Low-pass followed by a forward first difference along frequency. The
/// last row repeats the previous difference so the shape is unchanged.
pub fn lowpass_derivative(grid: &ProcessedGrid, cutoff_per_ghz: f64) -> Result<ProcessedGrid> {
    let smooth = lowpass(grid, cutoff_per_ghz)?;
    let (nf, nb) = (smooth.n_freq(), smooth.n_bias());
    let mut values = vec![0.0; nf * nb];
    for fi in 0..nf - 1 {
        for bi in 0..nb {
            values[fi * nb + bi] = smooth.values[(fi + 1) * nb + bi] - smooth.values[fi * nb + bi];
        }
    }
    for bi in 0..nb {
        values[(nf - 1) * nb + bi] = values[(nf - 2) * nb + bi];
    }
    let mut provenance = smooth.provenance;
    provenance.push("first_difference".into());
    Ok(ProcessedGrid { freqs: smooth.freqs, biases: smooth.biases, values, provenance })
}

/// −Re of the defect self-energy recovered through a fitted resonator model;
/// every defect shows up as a narrow minimum exactly at its frequency.
pub fn self_energy_grid(spec: &BiasSpectrum, fit: &ResonatorFitResult) -> ProcessedGrid {
    let nb = spec.n_bias();
    let values = spec
        .data
        .iter()
        .enumerate()
        .map(|(k, s)| -fit.normalized_self_energy(spec.freqs[k / nb], *s).re)
        .collect();
    ProcessedGrid {
        freqs: spec.freqs.clone(),
        biases: spec.biases.clone(),
        values,
        provenance: vec![format!("self_energy f0={:.6e} Q={:.6e}", fit.f0, fit.q_total)],
    }
}

/// |S21| as a grid.
pub fn magnitude_grid(spec: &BiasSpectrum) -> ProcessedGrid {
    ProcessedGrid {
        freqs: spec.freqs.clone(),
        biases: spec.biases.clone(),
        values: spec.data.iter().map(|z| z.norm()).collect(),
        provenance: vec!["magnitude".into()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn grid_from(nf: usize, nb: usize, mut f: impl FnMut(usize, usize) -> f64) -> ProcessedGrid {
        let freqs: Vec<f64> = (0..nf).map(|i| 5e9 + 1e4 * i as f64).collect();
        let biases: Vec<f64> = (0..nb).map(|i| i as f64).collect();
        let mut values = Vec::new();
        for fi in 0..nf {
            for bi in 0..nb {
                values.push(f(fi, bi));
            }
        }
        ProcessedGrid { freqs, biases, values, provenance: vec!["test".into()] }
    }

    fn spectrum(nf: usize, nb: usize, f: impl Fn(usize, usize) -> Complex64) -> BiasSpectrum {
        let freqs: Vec<f64> = (0..nf).map(|i| 5e9 + 1e4 * i as f64).collect();
        let biases: Vec<f64> = (0..nb).map(|i| i as f64).collect();
        let mut data = Vec::new();
        for fi in 0..nf {
            for bi in 0..nb {
                data.push(f(fi, bi));
            }
        }
        BiasSpectrum::new(freqs, biases, data).unwrap()
    }

    #[test]
    fn contrast_of_identical_columns_is_zero() {
        let s = spectrum(50, 4, |fi, _| Complex64::new(0.5 + 0.01 * fi as f64, 0.1));
        let avg = s.column(0);
        let g = contrast_enhance(&s, &avg, -140.0).unwrap();
        assert!(g.values.iter().all(|v| *v == 0.0));
        assert_eq!(g.provenance, vec!["contrast_enhance"]);
    }

    #[test]
    fn contrast_with_unit_average_is_db_difference() {
        let s = spectrum(10, 3, |fi, bi| Complex64::from_polar(0.1 + 0.05 * (fi + bi) as f64, 0.3));
        let avg = vec![Complex64::new(0.0, 1.0); 10];
        let g = contrast_enhance(&s, &avg, -140.0).unwrap();
        for fi in 0..10 {
            for bi in 0..3 {
                let expect = 20.0 * s.get(fi, bi).norm().log10();
                assert!((g.get(fi, bi) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn contrast_floors_zero_cells() {
        let s = spectrum(4, 2, |fi, _| if fi == 1 { Complex64::new(0.0, 0.0) } else { Complex64::new(1.0, 0.0) });
        let g = contrast_enhance(&s, &[Complex64::new(1.0, 0.0); 4], -140.0).unwrap();
        assert_eq!(g.get(1, 0), -140.0);
        assert!(g.provenance[1].contains("2 cells"));
        assert!(contrast_enhance(&s, &[Complex64::new(1.0, 0.0); 3], -140.0).is_err());
    }

    #[test]
    fn contrast_ignores_common_phase_background() {
        let s = spectrum(40, 5, |fi, bi| Complex64::new(0.3 + 0.01 * fi as f64, 0.02 * bi as f64));
        let avg: Vec<Complex64> = (0..40).map(|fi| Complex64::new(0.4 + 0.01 * fi as f64, 0.05)).collect();
        let bg: Vec<Complex64> = (0..40).map(|fi| Complex64::from_polar(1.0, 0.1 * fi as f64)).collect();
        let s2 = spectrum(40, 5, |fi, bi| s.get(fi, bi) * bg[fi]);
        let avg2: Vec<Complex64> = avg.iter().zip(&bg).map(|(a, b)| a * b).collect();
        let a = contrast_enhance(&s, &avg, -140.0).unwrap();
        let b = contrast_enhance(&s2, &avg2, -140.0).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn derivative_of_constant_is_zero() {
        let g = grid_from(256, 3, |_, _| 4.2);
        let d = lowpass_derivative(&g, 5000.0).unwrap();
        assert!(d.values.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(d.provenance.len(), 3);
    }

    #[test]
    fn slow_ripple_passes_mid_band() {
        // 10 kHz cells -> Nyquist 50 000 cycles/GHz
        let n = 1024;
        let cycles_per_sample = 8.0 / n as f64;
        let g = grid_from(n, 2, |fi, _| (2.0 * std::f64::consts::PI * cycles_per_sample * fi as f64).sin());
        let out = lowpass(&g, 5000.0).unwrap();
        for fi in n / 4..3 * n / 4 {
            assert!((out.get(fi, 0) - g.get(fi, 0)).abs() < 0.01);
        }
    }

    #[test]
    fn white_noise_variance_follows_noise_bandwidth() {
        let n = 2048;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = grid_from(n, 64, |_, _| StandardNormal.sample(&mut rng));
        let cutoff = 10_000.0;
        let out = lowpass(&g, cutoff).unwrap();
        let c = cutoff * 1e4 / 1e9;
        // Σ|H|² over the two-sided band, per unit cycles/sample
        let bw = crate::optim::integrate(|q| response(q, c).powi(2), -0.5, 0.5, 1e-12, 1e-12, 200).unwrap();
        let interior: Vec<f64> = (0..64)
            .flat_map(|bi| (n / 8..7 * n / 8).map(move |fi| (fi, bi)))
            .map(|(fi, bi)| out.get(fi, bi))
            .collect();
        let var = interior.iter().map(|v| v * v).sum::<f64>() / interior.len() as f64;
        assert!((var / bw - 1.0).abs() < 0.05, "{var} vs {bw}");
    }

    #[test]
    fn lowpass_derivative_is_linear() {
        let a = grid_from(128, 3, |fi, bi| ((fi * 7 + bi * 3) % 11) as f64);
        let bg = grid_from(128, 3, |fi, _| (fi as f64 * 0.05).cos());
        let sum = grid_from(128, 3, |fi, bi| a.get(fi, bi) + bg.get(fi, bi));
        let da = lowpass_derivative(&a, 20_000.0).unwrap();
        let db = lowpass_derivative(&bg, 20_000.0).unwrap();
        let ds = lowpass_derivative(&sum, 20_000.0).unwrap();
        for k in 0..ds.values.len() {
            assert!((ds.values[k] - da.values[k] - db.values[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn cutoff_above_nyquist_is_rejected() {
        let g = grid_from(16, 2, |_, _| 0.0);
        assert!(matches!(lowpass(&g, 50_000.0), Err(Error::Config(_))));
        assert!(matches!(lowpass(&g, 0.0), Err(Error::Config(_))));
    }
}
