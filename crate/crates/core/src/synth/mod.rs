//! Ground-truth generation: defect ensembles drawn from a material density
//! and the bias-sweep transmission grids they produce.

mod timeseries;

pub use timeseries::{render_time_series, TimeSeries};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Gamma as GammaDist, Normal};

use crate::error::{Error, Result};
use crate::physics::{
    tls_energy, tls_frequency_noise_sensitivity, CoupledSystem, DressingMode, ResonatorModel,
    SweepWindow, TwoLevelSystem,
};
use crate::spectrum::BiasSpectrum;
use crate::units::{debye_to_cm, hz_to_angular, HBAR, PLANCK};

/// Largest grid `generate_spectrum` accepts (cells). At 16 bytes per cell
/// this caps the in-memory grid at 512 MiB.
pub const MAX_GRID_CELLS: usize = 1 << 25;

/// Largest ensemble `sample_ensemble` will draw.
pub const MAX_ENSEMBLE: usize = 50_000_000;

/// Shape of the dipole-moment density, in Debye. Every family is
/// normalized over p_z ≥ 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum DipoleFamily {
    /// Normal(μ, σ) truncated to p_z ≥ 0.
    #[serde(alias = "truncated-normal")]
    Gaussian { mu: f64, sigma: f64 },
    /// p_z = p₀ cosθ with cosθ uniform: flat on [0, p₀].
    IsotropicSingleP0 { p0: f64 },
    /// Shape α, rate β (1/D).
    Gamma { alpha: f64, beta: f64 },
    Flat { lo: f64, hi: f64 },
}

impl DipoleFamily {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            DipoleFamily::Gaussian { mu, sigma } => sigma > 0.0 && mu.is_finite(),
            DipoleFamily::IsotropicSingleP0 { p0 } => p0 > 0.0,
            DipoleFamily::Gamma { alpha, beta } => alpha > 0.0 && beta > 0.0,
            DipoleFamily::Flat { lo, hi } => lo >= 0.0 && hi > lo,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid dipole family parameters: {self:?}")))
        }
    }

    /// Density (1/D) at `p` Debye.
    pub fn pdf(&self, p: f64) -> f64 {
        if p < 0.0 {
            return 0.0;
        }
        match *self {
            DipoleFamily::Gaussian { mu, sigma } => {
                let n = Normal::new(mu, sigma).unwrap();
                n.pdf(p) / (1.0 - n.cdf(0.0))
            }
            DipoleFamily::IsotropicSingleP0 { p0 } => {
                if p <= p0 {
                    1.0 / p0
                } else {
                    0.0
                }
            }
            DipoleFamily::Gamma { alpha, beta } => {
                if p == 0.0 {
                    return if alpha < 1.0 { f64::INFINITY } else if alpha == 1.0 { beta } else { 0.0 };
                }
                GammaDist::new(alpha, beta).unwrap().pdf(p)
            }
            DipoleFamily::Flat { lo, hi } => {
                if p >= lo && p <= hi {
                    1.0 / (hi - lo)
                } else {
                    0.0
                }
            }
        }
    }

    pub fn cdf(&self, p: f64) -> f64 {
        if p <= 0.0 {
            return 0.0;
        }
        match *self {
            DipoleFamily::Gaussian { mu, sigma } => {
                let n = Normal::new(mu, sigma).unwrap();
                let c0 = n.cdf(0.0);
                (n.cdf(p) - c0) / (1.0 - c0)
            }
            DipoleFamily::IsotropicSingleP0 { p0 } => (p / p0).min(1.0),
            DipoleFamily::Gamma { alpha, beta } => GammaDist::new(alpha, beta).unwrap().cdf(p),
            DipoleFamily::Flat { lo, hi } => ((p - lo) / (hi - lo)).clamp(0.0, 1.0),
        }
    }

    /// A dipole above which the family has negligible mass (< 10⁻⁶).
    pub fn effective_max(&self) -> f64 {
        match *self {
            DipoleFamily::Gaussian { mu, sigma } => mu.max(0.0) + 5.0 * sigma,
            DipoleFamily::IsotropicSingleP0 { p0 } => p0,
            DipoleFamily::Gamma { alpha, beta } => (alpha + 8.0 * alpha.sqrt() + 8.0) / beta,
            DipoleFamily::Flat { hi, .. } => hi,
        }
    }

    /// One draw in Debye.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            DipoleFamily::Gaussian { mu, sigma } => {
                // inverse CDF restricted to the p ≥ 0 tail
                let n = Normal::new(mu, sigma).unwrap();
                let lo = n.cdf(0.0);
                loop {
                    let u: f64 = rng.random();
                    let p = n.inverse_cdf(lo + u * (1.0 - lo));
                    if p.is_finite() && p >= 0.0 {
                        return p;
                    }
                }
            }
            DipoleFamily::IsotropicSingleP0 { p0 } => p0 * rng.random::<f64>(),
            DipoleFamily::Gamma { alpha, beta } => Gamma::new(alpha, 1.0 / beta).unwrap().sample(rng),
            DipoleFamily::Flat { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
        }
    }
}

/// How many defects to draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Abundance {
    /// Material constant P₀ in 1/(J·m³).
    Density(f64),
    Count(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialSpec {
    pub family: DipoleFamily,
    pub abundance: Abundance,
    /// Asymmetry energies are uniform on ±delta_max (J).
    pub delta_max: f64,
    /// Tunneling energies are log-uniform on this band (J).
    pub delta0_band: (f64, f64),
    /// Decoherence rate given to every sampled defect (rad/s).
    pub gamma_tls: f64,
}

impl MaterialSpec {
    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        let (lo, hi) = self.delta0_band;
        if !(lo > 0.0) || !(hi > lo) {
            return Err(Error::config(format!(
                "tunneling-energy band must satisfy 0 < min < max, got [{lo:e}, {hi:e}] J"
            )));
        }
        if !(self.delta_max > 0.0) {
            return Err(Error::config("delta_max must be > 0"));
        }
        if !(self.gamma_tls >= 0.0) {
            return Err(Error::config("gamma_tls must be >= 0"));
        }
        if let Abundance::Density(p0) = self.abundance {
            if !(p0 > 0.0) {
                return Err(Error::config("P0 density must be > 0"));
            }
        }
        Ok(())
    }

    /// 10 × (2 p_max E_max): wide enough that the uniform-Δ assumption
    /// holds across the sweep.
    pub fn default_delta_max(family: &DipoleFamily, window: &SweepWindow) -> f64 {
        10.0 * 2.0 * debye_to_cm(family.effective_max()) * window.max_abs_bias()
    }

    /// Expected ensemble size for a density specification.
    pub fn expected_count(&self, res: &ResonatorModel) -> f64 {
        match self.abundance {
            Abundance::Count(n) => n as f64,
            Abundance::Density(p0) => {
                let (lo, hi) = self.delta0_band;
                p0 * res.volume * 2.0 * self.delta_max * (hi / lo).ln()
            }
        }
    }
}

/// Draws a defect ensemble. The count is deterministic given the spec
/// (rounded expectation), and every random draw comes from `seed`.
pub fn sample_ensemble(spec: &MaterialSpec, res: &ResonatorModel, seed: u64) -> Result<Vec<TwoLevelSystem>> {
    spec.validate()?;
    let expected = spec.expected_count(res);
    if expected > MAX_ENSEMBLE as f64 {
        return Err(Error::config(format!(
            "ensemble of {expected:.3e} defects exceeds the limit of {MAX_ENSEMBLE}"
        )));
    }
    let n = expected.round() as usize;
    let (lo, hi) = spec.delta0_band;
    let ln_ratio = (hi / lo).ln();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let delta = spec.delta_max * (2.0 * rng.random::<f64>() - 1.0);
        let delta0 = lo * (ln_ratio * rng.random::<f64>()).exp();
        let pz = debye_to_cm(spec.family.sample(&mut rng));
        out.push(TwoLevelSystem { delta, delta0, pz, gamma: spec.gamma_tls, sigma_noise: 0.0 });
    }
    Ok(out)
}

/// Isotropic single-magnitude model: p_z = p₀ cosθ, cosθ uniform on [0, 1].
/// The returned defects sit at Δ = 0 with Δ₀/h = 5 GHz; only the dipoles
/// carry information.
pub fn sample_isotropic(p0_debye: f64, count: usize, seed: u64) -> Result<Vec<TwoLevelSystem>> {
    if !(p0_debye > 0.0) {
        return Err(Error::domain("p0 must be > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let delta0 = PLANCK * 5e9;
    Ok((0..count)
        .map(|_| {
            let cos_t: f64 = rng.random();
            TwoLevelSystem { delta: 0.0, delta0, pz: debye_to_cm(p0_debye * cos_t), gamma: 0.0, sigma_noise: 0.0 }
        })
        .collect())
}

/// Defects whose vertex falls inside the bias window and whose tunneling
/// energy falls inside the frequency span. These are the ones a sweep can
/// fully trace.
pub fn observable(tls: &TwoLevelSystem, window: &SweepWindow) -> bool {
    if tls.pz == 0.0 {
        return false;
    }
    let v = tls.vertex_bias();
    let f = tls.delta0 / PLANCK;
    v >= window.bias_min && v <= window.bias_max && f >= window.f_min() && f <= window.f_max()
}

/// Per-quadrature Gaussian jitter and defect-frequency noise models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum VoltageNoise {
    /// Use each defect's own `sigma_noise`.
    FromEnsemble,
    /// Same σ (rad/s) for every defect.
    Uniform { sigma: f64 },
    /// σ_i from a bias-voltage noise amplitude δV (V) through the local slope
    /// of each hyperbola, so it vanishes at the vertex.
    FromBiasNoise { delta_v: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Telegraph {
    /// Mean switching rate (1/s).
    pub switch_rate: f64,
    /// Std of the frequency offset after a switch (Hz).
    pub jump_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Std of the additive Gaussian noise on each quadrature of S21.
    pub meas_sigma: f64,
    pub voltage: VoltageNoise,
    /// Draws used for the noise-broadened average.
    pub broadening_samples: usize,
    pub telegraph: Option<Telegraph>,
    /// Random-walk drift of defect frequencies (Hz/√hour).
    pub drift_sigma: f64,
    /// Defects farther than this many total linewidths from the frequency
    /// window are dropped from a column.
    pub cutoff_linewidths: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            meas_sigma: 0.0,
            voltage: VoltageNoise::FromEnsemble,
            broadening_samples: 200,
            telegraph: None,
            drift_sigma: 0.0,
            cutoff_linewidths: 10.0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let mut vals = vec![self.meas_sigma, self.drift_sigma, self.cutoff_linewidths];
        match self.voltage {
            VoltageNoise::FromEnsemble => {}
            VoltageNoise::Uniform { sigma } => vals.push(sigma),
            VoltageNoise::FromBiasNoise { delta_v } => vals.push(delta_v),
        }
        if let Some(t) = self.telegraph {
            vals.push(t.switch_rate);
            vals.push(t.jump_sigma);
        }
        if vals.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::config("noise parameters must be finite and non-negative"));
        }
        if self.broadening_samples == 0 {
            return Err(Error::config("broadening_samples must be >= 1"));
        }
        Ok(())
    }

    fn sigma_for(&self, tls: &TwoLevelSystem, e_ex: f64, thickness: f64) -> f64 {
        match self.voltage {
            VoltageNoise::FromEnsemble => tls.sigma_noise,
            VoltageNoise::Uniform { sigma } => sigma,
            VoltageNoise::FromBiasNoise { delta_v } => {
                tls_frequency_noise_sensitivity(tls, e_ex, delta_v, thickness).abs()
            }
        }
    }
}

/// Column RNG: one independent ChaCha stream per bias index, so output does
/// not depend on scheduling.
pub(crate) fn column_rng(seed: u64, column: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(column as u64 + 1);
    rng
}

/// Indices of defects whose frequency can come within `reach` (rad/s) of
/// [w_lo, w_hi] anywhere inside the bias window.
pub(crate) fn prefilter(ensemble: &[TwoLevelSystem], window: &SweepWindow, reach: f64) -> Vec<usize> {
    let w_hi = hz_to_angular(window.f_max()) + reach;
    ensemble
        .iter()
        .enumerate()
        .filter(|(_, t)| {
            let v = t.vertex_bias();
            let e_min = if v.is_finite() && v >= window.bias_min && v <= window.bias_max {
                t.delta0
            } else {
                tls_energy(t, window.bias_min).min(tls_energy(t, window.bias_max))
            };
            e_min / HBAR <= w_hi
        })
        .map(|(i, _)| i)
        .collect()
}

pub(crate) fn add_measurement_noise(trace: &mut [Complex64], sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma == 0.0 {
        return;
    }
    for v in trace.iter_mut() {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        *v += Complex64::new(sigma * re, sigma * im);
    }
}

/// Transmission trace at one bias, before measurement noise.
pub(crate) fn render_column(
    ensemble: &[TwoLevelSystem],
    candidates: &[usize],
    res: &ResonatorModel,
    omegas: &[f64],
    e_ex: f64,
    noise: &NoiseConfig,
    offsets: Option<&[f64]>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Complex64>> {
    let reach = noise.cutoff_linewidths * res.kappa_total();
    let (w_lo, w_hi) = (omegas[0] - reach, omegas[omegas.len() - 1] + reach);
    let e_rms = res.zero_point_field();
    let mut modes = Vec::new();
    for (k, &i) in candidates.iter().enumerate() {
        let t = &ensemble[i];
        let w = t.angular_frequency(e_ex) + offsets.map_or(0.0, |o| o[k]);
        if w < w_lo || w > w_hi {
            continue;
        }
        if !(t.gamma > 0.0) {
            return Err(Error::domain("defects rendered into a spectrum need gamma > 0"));
        }
        let g = crate::physics::coupling_g(t, e_ex, e_rms);
        modes.push(DressingMode {
            omega: w,
            g2: g * g,
            half_gamma: 0.5 * t.gamma,
            sigma: noise.sigma_for(t, e_ex, res.thickness),
        });
    }
    let system = CoupledSystem::from_modes(res, modes);
    Ok(system.s21_noise_averaged(omegas, noise.broadening_samples, rng))
}

/// Renders the full bias sweep. Columns are computed in parallel, each from
/// its own RNG stream, so the grid is bit-identical for a given seed
/// regardless of thread count.
pub fn generate_spectrum(
    ensemble: &[TwoLevelSystem],
    res: &ResonatorModel,
    window: &SweepWindow,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<BiasSpectrum> {
    noise.validate()?;
    let cells = window.n_freq.saturating_mul(window.n_bias);
    if cells > MAX_GRID_CELLS {
        return Err(Error::config(format!(
            "grid of {cells} cells exceeds the limit of {MAX_GRID_CELLS}"
        )));
    }
    let freqs = window.freq_axis();
    let biases = window.bias_axis();
    let omegas: Vec<f64> = freqs.iter().map(|&f| hz_to_angular(f)).collect();
    let reach = noise.cutoff_linewidths * res.kappa_total();
    let candidates = prefilter(ensemble, window, reach);
    let columns: Vec<Vec<Complex64>> = biases
        .par_iter()
        .enumerate()
        .map(|(bi, &e_ex)| {
            let mut rng = column_rng(seed, bi);
            let mut col = render_column(ensemble, &candidates, res, &omegas, e_ex, noise, None, &mut rng)?;
            add_measurement_noise(&mut col, noise.meas_sigma, &mut rng);
            Ok(col)
        })
        .collect::<Result<_>>()?;
    BiasSpectrum::from_columns(freqs, biases, &columns)
}

/// Mean complex transmission over all bias columns.
pub fn ensemble_average(spec: &BiasSpectrum) -> Result<Vec<Complex64>> {
    let nb = spec.n_bias();
    if nb < 2 {
        return Err(Error::Dimension(format!("ensemble average needs >= 2 bias columns, got {nb}")));
    }
    Ok((0..spec.n_freq())
        .map(|fi| {
            let row = &spec.data[fi * nb..(fi + 1) * nb];
            row.iter().sum::<Complex64>() / nb as f64
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::bare_s21;
    use crate::units::{cm_to_debye, GHZ, KHZ, MHZ};

    fn resonator() -> ResonatorModel {
        ResonatorModel::new(5.0 * GHZ, hz_to_angular(1.0 * MHZ), hz_to_angular(0.5 * MHZ), 1.11e-17, 20e-9, 10.0)
            .unwrap()
    }

    fn window(nf: usize, nb: usize) -> SweepWindow {
        SweepWindow::new(5.0 * GHZ, 20.0 * MHZ, -90e3, 90e3, nf, nb).unwrap()
    }

    fn spec(family: DipoleFamily, n: usize) -> MaterialSpec {
        MaterialSpec {
            family,
            abundance: Abundance::Count(n),
            delta_max: 1e-23,
            delta0_band: (PLANCK * 1.0 * GHZ, PLANCK * 6.0 * GHZ),
            gamma_tls: hz_to_angular(10.0 * KHZ),
        }
    }

    /// χ² statistic against equal expected counts; returns the upper-tail p.
    fn chi2_uniform(values: &[f64], lo: f64, hi: f64, bins: usize) -> f64 {
        let mut counts = vec![0.0; bins];
        for &v in values {
            let k = (((v - lo) / (hi - lo)) * bins as f64).floor() as usize;
            counts[k.min(bins - 1)] += 1.0;
        }
        let e = values.len() as f64 / bins as f64;
        let chi2: f64 = counts.iter().map(|c| (c - e) * (c - e) / e).sum();
        let dist = statrs::distribution::ChiSquared::new((bins - 1) as f64).unwrap();
        1.0 - dist.cdf(chi2)
    }

    #[test]
    fn flat_family_is_uniform() {
        let s = spec(DipoleFamily::Flat { lo: 0.0, hi: 4.5 }, 50_000);
        let ens = sample_ensemble(&s, &resonator(), 11).unwrap();
        assert_eq!(ens.len(), 50_000);
        let p: Vec<f64> = ens.iter().map(|t| cm_to_debye(t.pz)).collect();
        assert!(chi2_uniform(&p, 0.0, 4.5, 20) > 0.01);
    }

    #[test]
    fn gaussian_family_matches_truncated_mean() {
        let (mu, sigma) = (2.6, 1.6);
        let s = spec(DipoleFamily::Gaussian { mu, sigma }, 20_000);
        let ens = sample_ensemble(&s, &resonator(), 3).unwrap();
        let p: Vec<f64> = ens.iter().map(|t| cm_to_debye(t.pz)).collect();
        assert!(p.iter().all(|&v| v >= 0.0));
        let n = p.len() as f64;
        let mean = p.iter().sum::<f64>() / n;
        let sd = (p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        // truncated-normal mean μ + σ φ(α)/(1 − Φ(α)), α = −μ/σ
        let std = Normal::new(0.0, 1.0).unwrap();
        let a = -mu / sigma;
        let truth = mu + sigma * std.pdf(a) / (1.0 - std.cdf(a));
        assert!((mean - truth).abs() < 3.0 * sd / n.sqrt(), "{mean} vs {truth}");
    }

    #[test]
    fn density_sets_count_and_empty_count_is_empty() {
        let mut s = spec(DipoleFamily::Flat { lo: 0.0, hi: 4.5 }, 0);
        assert!(sample_ensemble(&s, &resonator(), 0).unwrap().is_empty());
        s.abundance = Abundance::Density(1e44);
        let res = resonator();
        let expect = 1e44 * res.volume * 2.0 * 1e-23 * 6f64.ln();
        assert_eq!(sample_ensemble(&s, &res, 0).unwrap().len(), expect.round() as usize);
        s.delta0_band = (1e-24, 1e-24);
        assert!(matches!(sample_ensemble(&s, &res, 0), Err(Error::Config(_))));
    }

    #[test]
    fn ensemble_is_seed_deterministic() {
        let s = spec(DipoleFamily::Gamma { alpha: 5.15, beta: 1.72 }, 1000);
        let a = sample_ensemble(&s, &resonator(), 9).unwrap();
        let b = sample_ensemble(&s, &resonator(), 9).unwrap();
        let c = sample_ensemble(&s, &resonator(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn isotropic_samples() {
        let ens = sample_isotropic(4.5, 100_000, 1).unwrap();
        let p: Vec<f64> = ens.iter().map(|t| cm_to_debye(t.pz)).collect();
        assert!(p.iter().all(|&v| (0.0..=4.5 + 1e-12).contains(&v)));
        assert!(chi2_uniform(&p, 0.0, 4.5, 25) > 0.01);
        let mean = p.iter().sum::<f64>() / p.len() as f64;
        assert!((mean - 2.25).abs() < 0.02);
        assert!(sample_isotropic(0.0, 1, 1).is_err());
    }

    #[test]
    fn family_pdf_integrates_to_cdf() {
        let fams = [
            DipoleFamily::Gaussian { mu: 2.6, sigma: 1.6 },
            DipoleFamily::Gamma { alpha: 5.15, beta: 1.72 },
            DipoleFamily::Flat { lo: 0.5, hi: 4.5 },
        ];
        for f in fams {
            let v = crate::optim::integrate(|p| f.pdf(p), 0.0, 3.0, 1e-10, 1e-10, 500).unwrap();
            assert!((v - f.cdf(3.0)).abs() < 1e-6, "{f:?}");
            assert!(f.cdf(f.effective_max()) > 1.0 - 1e-6);
        }
    }

    #[test]
    fn empty_ensemble_gives_bare_columns() {
        let res = resonator();
        let w = window(101, 5);
        let s = generate_spectrum(&[], &res, &w, &NoiseConfig::default(), 0).unwrap();
        for bi in 0..5 {
            for (fi, f) in s.freqs.iter().enumerate() {
                assert_eq!(s.get(fi, bi), bare_s21(hz_to_angular(*f), &res));
            }
        }
        let avg = ensemble_average(&s).unwrap();
        for (a, b) in avg.iter().zip(s.column(0)) {
            assert!((a - b).norm() < 1e-15);
        }
    }

    #[test]
    fn single_defect_ridge_follows_hyperbola() {
        let res = resonator();
        let w = window(801, 401);
        let pz = debye_to_cm(3.0);
        let v = 20e3;
        let t = TwoLevelSystem::new(-2.0 * pz * v, PLANCK * 4.997 * GHZ, pz, hz_to_angular(10.0 * KHZ), 0.0).unwrap();
        let s = generate_spectrum(&[t], &res, &w, &NoiseConfig::default(), 0).unwrap();
        let step = w.freq_step();
        let mut checked = 0;
        for bi in 0..w.n_bias {
            let e = s.biases[bi];
            let f_t = tls_energy(&t, e) / PLANCK;
            if f_t < w.f_min() + 5.0 * step || f_t > w.f_max() - 5.0 * step {
                continue;
            }
            // Re of the self-energy recovered from the trace peaks at the
            // defect; raw |S21| extrema are dispersively pulled.
            let (fi, _) = s
                .freqs
                .iter()
                .enumerate()
                .map(|(fi, &f)| {
                    let d = hz_to_angular(f) - res.omega_c();
                    let sigma = 0.5 * res.kappa_c / (Complex64::new(1.0, 0.0) - s.get(fi, bi))
                        - Complex64::new(0.5 * res.kappa_total(), d);
                    (fi, sigma.re)
                })
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            assert!((s.freqs[fi] - f_t).abs() <= step, "bias {e}: {} vs {f_t}", s.freqs[fi]);
            checked += 1;
        }
        assert!(checked > 10);
    }

    #[test]
    fn spectrum_is_bit_reproducible() {
        let res = resonator();
        let w = window(64, 16);
        let s = MaterialSpec { abundance: Abundance::Count(2000), ..spec(DipoleFamily::Gaussian { mu: 2.6, sigma: 1.6 }, 0) };
        let ens = sample_ensemble(&s, &res, 4).unwrap();
        let noise = NoiseConfig { meas_sigma: 1e-3, voltage: VoltageNoise::Uniform { sigma: 1e5 }, broadening_samples: 8, ..Default::default() };
        let a = generate_spectrum(&ens, &res, &w, &noise, 77).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| generate_spectrum(&ens, &res, &w, &noise, 77).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_oversized_grid_and_single_column_average() {
        let w = SweepWindow { n_freq: 1 << 13, n_bias: 1 << 13, ..window(2, 2) };
        assert!(generate_spectrum(&[], &resonator(), &w, &NoiseConfig::default(), 0).is_err());
        let s = BiasSpectrum::new(vec![1.0, 2.0], vec![0.0], vec![Complex64::new(1.0, 0.0); 2]).unwrap();
        assert!(matches!(ensemble_average(&s), Err(Error::Dimension(_))));
    }

    #[test]
    fn observation_window_selects_vertices() {
        let w = window(3, 3);
        let pz = debye_to_cm(2.0);
        let inside = TwoLevelSystem::new(-2.0 * pz * 10e3, PLANCK * 5.001 * GHZ, pz, 0.0, 0.0).unwrap();
        assert!(observable(&inside, &w));
        let outside = TwoLevelSystem { delta: -2.0 * pz * 100e3, ..inside };
        assert!(!observable(&outside, &w));
        let low = TwoLevelSystem { delta0: PLANCK * 4.9 * GHZ, ..inside };
        assert!(!observable(&low, &w));
    }
}
