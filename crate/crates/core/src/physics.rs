//! Domain types and closed-form physics of a resonator dressed by tunable
//! two-level defects.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::{EPSILON_0, HBAR, PLANCK};

/// One tunneling defect. Energies in J, dipole in C·m, rates in rad/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoLevelSystem {
    /// Asymmetry energy Δ at zero bias.
    pub delta: f64,
    /// Tunneling energy Δ₀ (> 0), the minimum transition energy.
    pub delta0: f64,
    /// Dipole projection on the bias field. The sign only moves the vertex.
    pub pz: f64,
    /// Decoherence rate γ (angular).
    pub gamma: f64,
    /// Std of the Gaussian frequency jitter from bias-line voltage noise (angular).
    pub sigma_noise: f64,
}

impl TwoLevelSystem {
    pub fn new(delta: f64, delta0: f64, pz: f64, gamma: f64, sigma_noise: f64) -> Result<Self> {
        if !(delta0 > 0.0) || !delta0.is_finite() {
            return Err(Error::domain(format!("tunneling energy must be > 0, got {delta0}")));
        }
        if !(gamma >= 0.0) || !(sigma_noise >= 0.0) {
            return Err(Error::domain("decoherence and noise rates must be non-negative"));
        }
        if !delta.is_finite() || !pz.is_finite() {
            return Err(Error::domain("asymmetry and dipole must be finite"));
        }
        Ok(Self { delta, delta0, pz, gamma, sigma_noise })
    }

    /// Biased asymmetry Δ' = Δ + 2 p_z E_ex.
    pub fn biased_asymmetry(&self, e_ex: f64) -> f64 {
        self.delta + 2.0 * self.pz * e_ex
    }

    /// Bias field at which Δ' = 0. Infinite for p_z = 0.
    pub fn vertex_bias(&self) -> f64 {
        -self.delta / (2.0 * self.pz)
    }

    pub fn energy(&self, e_ex: f64) -> f64 {
        tls_energy(self, e_ex)
    }

    /// Transition frequency as an angular rate E/ℏ.
    pub fn angular_frequency(&self, e_ex: f64) -> f64 {
        tls_energy(self, e_ex) / HBAR
    }
}

/// Lumped parallel-plate resonator. Q factors are derived, never stored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResonatorModel {
    /// Resonance frequency (Hz).
    pub f0: f64,
    /// External (coupling) decay rate κ_c (rad/s).
    pub kappa_c: f64,
    /// Internal decay rate γ_c without resolved defects (rad/s).
    pub gamma_c: f64,
    /// Dielectric volume (m³).
    pub volume: f64,
    /// Dielectric thickness l₀ (m).
    pub thickness: f64,
    pub eps_r: f64,
}

impl ResonatorModel {
    pub fn new(
        f0: f64,
        kappa_c: f64,
        gamma_c: f64,
        volume: f64,
        thickness: f64,
        eps_r: f64,
    ) -> Result<Self> {
        let all = [f0, kappa_c, gamma_c, volume, thickness, eps_r];
        if all.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::domain(format!(
                "resonator parameters must be positive and finite: {all:?}"
            )));
        }
        Ok(Self { f0, kappa_c, gamma_c, volume, thickness, eps_r })
    }

    pub fn omega_c(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.f0
    }

    /// κ = κ_c + γ_c.
    pub fn kappa_total(&self) -> f64 {
        self.kappa_c + self.gamma_c
    }

    pub fn q_external(&self) -> f64 {
        self.omega_c() / self.kappa_c
    }

    pub fn q_internal(&self) -> f64 {
        self.omega_c() / self.gamma_c
    }

    pub fn q_total(&self) -> f64 {
        self.omega_c() / self.kappa_total()
    }

    pub fn zero_point_field(&self) -> f64 {
        zero_point_field(self)
    }
}

/// Frequency/bias rectangle of a dc-bias sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepWindow {
    pub f_center: f64,
    pub f_span: f64,
    /// Bias field range (V/m).
    pub bias_min: f64,
    pub bias_max: f64,
    pub n_freq: usize,
    pub n_bias: usize,
}

impl SweepWindow {
    pub fn new(
        f_center: f64,
        f_span: f64,
        bias_min: f64,
        bias_max: f64,
        n_freq: usize,
        n_bias: usize,
    ) -> Result<Self> {
        if !(f_span > 0.0) || !(f_center > 0.0) {
            return Err(Error::domain("frequency span and center must be > 0"));
        }
        if !(bias_max > bias_min) {
            return Err(Error::domain("bias_max must exceed bias_min"));
        }
        if n_freq < 2 || n_bias < 2 {
            return Err(Error::domain("grid counts must be at least 2"));
        }
        Ok(Self { f_center, f_span, bias_min, bias_max, n_freq, n_bias })
    }

    pub fn f_min(&self) -> f64 {
        self.f_center - 0.5 * self.f_span
    }

    pub fn f_max(&self) -> f64 {
        self.f_center + 0.5 * self.f_span
    }

    pub fn freq_step(&self) -> f64 {
        self.f_span / (self.n_freq - 1) as f64
    }

    pub fn bias_step(&self) -> f64 {
        (self.bias_max - self.bias_min) / (self.n_bias - 1) as f64
    }

    pub fn freq_axis(&self) -> Vec<f64> {
        linspace(self.f_min(), self.f_max(), self.n_freq)
    }

    pub fn bias_axis(&self) -> Vec<f64> {
        linspace(self.bias_min, self.bias_max, self.n_bias)
    }

    /// Bias voltage excursion ΔV = (E_max − E_min)·l₀.
    pub fn delta_v_bias(&self, thickness: f64) -> f64 {
        (self.bias_max - self.bias_min) * thickness
    }

    pub fn max_abs_bias(&self) -> f64 {
        self.bias_min.abs().max(self.bias_max.abs())
    }
}

pub(crate) fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    let step = (b - a) / (n - 1) as f64;
    (0..n)
        .map(|i| if i == n - 1 { b } else { a + step * i as f64 })
        .collect()
}

/// Parameters of the general resonant-absorption loss integrand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossIntegrandParams {
    /// Temperature (K).
    pub temperature: f64,
    /// Relaxation time T₁ (s).
    pub t1: f64,
    /// Decoherence time T₂ (s).
    pub t2: f64,
    /// Rabi frequency Ω (rad/s).
    pub rabi: f64,
}

impl LossIntegrandParams {
    pub fn new(temperature: f64, t1: f64, t2: f64, rabi: f64) -> Result<Self> {
        if [temperature, t1, t2, rabi].iter().any(|v| !(*v > 0.0)) {
            return Err(Error::domain("loss integrand parameters must all be > 0"));
        }
        Ok(Self { temperature, t1, t2, rabi })
    }

    /// Saturation parameter Ω² T₁ T₂.
    pub fn saturation(&self) -> f64 {
        self.rabi * self.rabi * self.t1 * self.t2
    }

    /// The low-power closed form is trusted when Ω²T₁T₂ ≤ 10⁻².
    pub fn low_power_valid(&self) -> bool {
        self.saturation() <= 1e-2
    }
}

/// Transition energy E = √((Δ + 2 p_z E_ex)² + Δ₀²).
pub fn tls_energy(tls: &TwoLevelSystem, e_ex: f64) -> f64 {
    tls.biased_asymmetry(e_ex).hypot(tls.delta0)
}

/// dE/dE_ex = 2 p_z Δ'/E.
pub fn tls_energy_slope(tls: &TwoLevelSystem, e_ex: f64) -> f64 {
    let dp = tls.biased_asymmetry(e_ex);
    2.0 * tls.pz * dp / dp.hypot(tls.delta0)
}

/// Vacuum coupling g = (Δ₀/E)·2|p_z|E_rms/ℏ in rad/s.
pub fn coupling_g(tls: &TwoLevelSystem, e_ex: f64, e_rms: f64) -> f64 {
    let e = tls_energy(tls, e_ex);
    (tls.delta0 / e) * 2.0 * tls.pz.abs() * e_rms / HBAR
}

/// Zero-point rms field √(h f₀ / (8 ε_r ε₀ 𝕍)) of the parallel-plate mode.
pub fn zero_point_field(res: &ResonatorModel) -> f64 {
    (PLANCK * res.f0 / (8.0 * res.eps_r * EPSILON_0 * res.volume)).sqrt()
}

/// g²/(γ_TLS κ). Values ≥ 1 mean the defect is individually resolvable.
pub fn cooperativity(g: f64, gamma_tls: f64, kappa_total: f64) -> Result<f64> {
    if !(gamma_tls > 0.0) || !(kappa_total > 0.0) {
        return Err(Error::domain(format!(
            "cooperativity needs positive rates, got gamma={gamma_tls}, kappa={kappa_total}"
        )));
    }
    Ok(g * g / (gamma_tls * kappa_total))
}

/// Transmission of the bare notch resonator (no defects).
pub fn bare_s21(omega: f64, res: &ResonatorModel) -> Complex64 {
    let denom = Complex64::new(0.5 * res.kappa_total(), omega - res.omega_c());
    Complex64::new(1.0, 0.0) - 0.5 * res.kappa_c / denom
}

/// Transmission of a resonator coupled to many defects at bias `e_ex`.
///
/// S21(ω) = 1 − (κ_c/2) / [(κ_c+γ_c)/2 + i(ω−ω_c) + Σ g_i²/(γ_i/2 + i(ω−ω_i))]
pub fn s21_multi_tls(
    omega: f64,
    res: &ResonatorModel,
    tls_list: &[TwoLevelSystem],
    e_ex: f64,
) -> Result<Complex64> {
    let e_rms = zero_point_field(res);
    let mut self_energy = Complex64::new(0.0, 0.0);
    for tls in tls_list {
        let w_i = tls.angular_frequency(e_ex);
        let g = coupling_g(tls, e_ex, e_rms);
        let d = Complex64::new(0.5 * tls.gamma, omega - w_i);
        if d.norm_sqr() == 0.0 {
            if g == 0.0 {
                continue;
            }
            return Err(Error::domain(format!(
                "pole: lossless defect exactly on resonance at omega={omega}"
            )));
        }
        self_energy += g * g / d;
    }
    let denom = Complex64::new(0.5 * res.kappa_total(), omega - res.omega_c()) + self_energy;
    Ok(Complex64::new(1.0, 0.0) - 0.5 * res.kappa_c / denom)
}

/// One defect mode as seen by the cavity at a fixed bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DressingMode {
    /// Transition frequency (rad/s).
    pub omega: f64,
    /// Squared coupling g² (rad²/s²).
    pub g2: f64,
    pub half_gamma: f64,
    /// Jitter std (rad/s).
    pub sigma: f64,
}

/// Resonator plus the defects it sees at one bias point, with couplings
/// precomputed for fast repeated evaluation.
#[derive(Debug, Clone)]
pub struct CoupledSystem {
    pub omega_c: f64,
    pub half_kappa: f64,
    pub half_kappa_c: f64,
    pub modes: Vec<DressingMode>,
}

impl CoupledSystem {
    /// Every defect evaluated in transmission must have γ > 0.
    pub fn new(res: &ResonatorModel, tls_list: &[TwoLevelSystem], e_ex: f64) -> Result<Self> {
        let e_rms = zero_point_field(res);
        let mut modes = Vec::with_capacity(tls_list.len());
        for tls in tls_list {
            if !(tls.gamma > 0.0) {
                return Err(Error::domain(
                    "defects used in transmission evaluation need gamma > 0",
                ));
            }
            let g = coupling_g(tls, e_ex, e_rms);
            modes.push(DressingMode {
                omega: tls.angular_frequency(e_ex),
                g2: g * g,
                half_gamma: 0.5 * tls.gamma,
                sigma: tls.sigma_noise,
            });
        }
        Ok(Self::from_modes(res, modes))
    }

    pub fn from_modes(res: &ResonatorModel, modes: Vec<DressingMode>) -> Self {
        Self {
            omega_c: res.omega_c(),
            half_kappa: 0.5 * res.kappa_total(),
            half_kappa_c: 0.5 * res.kappa_c,
            modes,
        }
    }

    pub fn self_energy(&self, omega: f64) -> Complex64 {
        self.modes
            .iter()
            .map(|m| m.g2 / Complex64::new(m.half_gamma, omega - m.omega))
            .sum()
    }

    pub fn s21(&self, omega: f64) -> Complex64 {
        let denom = Complex64::new(self.half_kappa, omega - self.omega_c) + self.self_energy(omega);
        Complex64::new(1.0, 0.0) - self.half_kappa_c / denom
    }

    /// S21 with each mode frequency displaced by `shifts[i]`.
    pub fn s21_shifted(&self, omega: f64, shifts: &[f64]) -> Complex64 {
        let sigma: Complex64 = self
            .modes
            .iter()
            .zip(shifts)
            .map(|(m, s)| m.g2 / Complex64::new(m.half_gamma, omega - m.omega - s))
            .sum();
        let denom = Complex64::new(self.half_kappa, omega - self.omega_c) + sigma;
        Complex64::new(1.0, 0.0) - self.half_kappa_c / denom
    }

    /// Monte Carlo average of S21 over Gaussian frequency jitter of every
    /// mode. The same draws are shared across all `omegas`, so the returned
    /// trace is smooth in frequency.
    pub fn s21_noise_averaged(&self, omegas: &[f64], n_samples: usize, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
        let mut acc = vec![Complex64::new(0.0, 0.0); omegas.len()];
        if self.modes.iter().all(|m| m.sigma == 0.0) {
            for (a, &w) in acc.iter_mut().zip(omegas) {
                *a = self.s21(w);
            }
            return acc;
        }
        let mut shifts = vec![0.0; self.modes.len()];
        for _ in 0..n_samples {
            for (s, m) in shifts.iter_mut().zip(&self.modes) {
                let z: f64 = StandardNormal.sample(rng);
                *s = m.sigma * z;
            }
            for (a, &w) in acc.iter_mut().zip(omegas) {
                *a += self.s21_shifted(w, &shifts);
            }
        }
        let n = n_samples as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

/// Noise-broadened transmission at a single frequency.
pub fn s21_noise_broadened(
    omega: f64,
    res: &ResonatorModel,
    tls_list: &[TwoLevelSystem],
    e_ex: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Complex64> {
    Ok(s21_noise_broadened_trace(&[omega], res, tls_list, e_ex, n_samples, seed)?[0])
}

/// Noise-broadened transmission over a frequency trace with common random
/// numbers. Equals [`s21_multi_tls`] exactly when every σ_i is zero.
pub fn s21_noise_broadened_trace(
    omegas: &[f64],
    res: &ResonatorModel,
    tls_list: &[TwoLevelSystem],
    e_ex: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Complex64>> {
    if n_samples == 0 {
        return Err(Error::domain("n_samples must be at least 1"));
    }
    if tls_list.iter().all(|t| t.sigma_noise == 0.0) {
        return omegas
            .iter()
            .map(|&w| s21_multi_tls(w, res, tls_list, e_ex))
            .collect();
    }
    let system = CoupledSystem::new(res, tls_list, e_ex)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(system.s21_noise_averaged(omegas, n_samples, &mut rng))
}

/// Frequency shift of a defect caused by a bias-voltage excursion δV:
/// δω = (Δ'/(ℏE))·2 p_z δV/l₀.
pub fn tls_frequency_noise_sensitivity(
    tls: &TwoLevelSystem,
    e_ex: f64,
    delta_v: f64,
    l0: f64,
) -> f64 {
    let dp = tls.biased_asymmetry(e_ex);
    let e = dp.hypot(tls.delta0);
    dp / (HBAR * e) * 2.0 * tls.pz * delta_v / l0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::{debye_to_cm, hz_to_angular, GHZ, KV_PER_M, MHZ};
    use proptest::prelude::*;

    fn tls(delta_ghz: f64, delta0_ghz: f64, pz_debye: f64) -> TwoLevelSystem {
        TwoLevelSystem::new(
            delta_ghz * GHZ * PLANCK,
            delta0_ghz * GHZ * PLANCK,
            debye_to_cm(pz_debye),
            hz_to_angular(0.5 * MHZ),
            0.0,
        )
        .unwrap()
    }

    fn reference_resonator() -> ResonatorModel {
        ResonatorModel::new(5.0 * GHZ, hz_to_angular(4.0 * MHZ), hz_to_angular(4.0 * MHZ), 1.11e-17, 20e-9, 10.0)
            .unwrap()
    }

    #[test]
    fn energy_at_vertex_is_tunneling_energy() {
        let t = tls(0.0, 4.0, 2.6);
        assert!((tls_energy(&t, 0.0) / PLANCK / GHZ - 4.0).abs() < 1e-12);
        // Δ = −2 p_z E_ex puts the vertex at E_ex
        let e_ex = 37.0 * KV_PER_M;
        let t2 = TwoLevelSystem { delta: -2.0 * t.pz * e_ex, ..t };
        assert!((tls_energy(&t2, e_ex) - t2.delta0).abs() <= 1e-12 * t2.delta0);
    }

    #[test]
    fn energy_at_90_kv_per_m() {
        let t = tls(0.0, 4.0, 2.6);
        let e = tls_energy(&t, 90.0 * KV_PER_M) / PLANCK / GHZ;
        let shift = 2.0 * t.pz * 90.0 * KV_PER_M / PLANCK / GHZ;
        assert!((shift - 2.355_966_587_5).abs() < 1e-9);
        assert!((e - 4.642_260_070_4).abs() < 1e-9);
    }

    #[test]
    fn rejects_non_positive_tunneling_energy() {
        assert!(TwoLevelSystem::new(0.0, 0.0, 1e-30, 0.0, 0.0).is_err());
        assert!(TwoLevelSystem::new(0.0, 1e-24, 1e-30, -1.0, 0.0).is_err());
    }

    #[test]
    fn coupling_at_vertex() {
        let t = tls(0.0, 4.0, 2.6);
        let g = coupling_g(&t, 0.0, 20.5);
        assert!((g - 3_371_788.669_582).abs() / g < 1e-9);
        let zero = TwoLevelSystem { pz: 0.0, ..t };
        assert_eq!(coupling_g(&zero, 0.0, 20.5), 0.0);
    }

    #[test]
    fn coupling_decays_away_from_vertex() {
        let t = tls(0.0, 4.0, 2.6);
        let mut last = f64::INFINITY;
        for k in 0..20 {
            let g = coupling_g(&t, k as f64 * 200.0 * KV_PER_M, 20.5);
            assert!(g < last);
            last = g;
        }
        assert!(last < 0.1 * coupling_g(&t, 0.0, 20.5));
    }

    #[test]
    fn zero_point_field_scaling() {
        let res = reference_resonator();
        let e = zero_point_field(&res);
        assert!((e - 20.527_316_07).abs() < 1e-6);
        let bigger = ResonatorModel { volume: 4.0 * res.volume, ..res };
        assert!((zero_point_field(&bigger) - 0.5 * e).abs() < 1e-12);
        let faster = ResonatorModel { f0: 4.0 * res.f0, ..res };
        assert!((zero_point_field(&faster) - 2.0 * e).abs() < 1e-12);
    }

    #[test]
    fn cooperativity_values() {
        let w = |mhz: f64| hz_to_angular(mhz * MHZ);
        assert_eq!(cooperativity(0.0, 1.0, 1.0).unwrap(), 0.0);
        assert!((cooperativity(2.0, 2.0, 2.0).unwrap() - 1.0).abs() < 1e-15);
        let c = cooperativity(w(0.7), w(0.5), w(8.0)).unwrap();
        assert!((c - 0.1225).abs() < 1e-12);
        assert!(cooperativity(1.0, 0.0, 1.0).is_err());
        assert!(cooperativity(1.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn bare_resonator_transmission() {
        let res = reference_resonator();
        let s = s21_multi_tls(res.omega_c(), &res, &[], 0.0).unwrap();
        assert!((s - Complex64::new(0.5, 0.0)).norm() < 1e-15);
        let far = res.omega_c() + 50.0 * res.kappa_total();
        assert!(s21_multi_tls(far, &res, &[], 0.0).unwrap().norm() > 0.99);
    }

    /// Independent route: direct complex arithmetic with the coupling written
    /// out from its definition, at 1001 frequencies.
    #[test]
    fn single_defect_matches_direct_evaluation() {
        let res = reference_resonator();
        let w_c = res.omega_c();
        let e_rms = zero_point_field(&res);
        // choose p_z so that g = 2π·0.7 MHz at the vertex
        let g_target = hz_to_angular(0.7 * MHZ);
        let pz = g_target * HBAR / (2.0 * e_rms);
        let t = TwoLevelSystem::new(0.0, HBAR * w_c, pz, hz_to_angular(0.5 * MHZ), 0.0).unwrap();
        let (kc, gc) = (res.kappa_c, res.gamma_c);
        let mut min_with = f64::INFINITY;
        for k in 0..1001 {
            let w = w_c + (k as f64 - 500.0) / 500.0 * 3.0 * (kc + gc);
            let s = s21_multi_tls(w, &res, &[t], 0.0).unwrap();
            let gamma_i = hz_to_angular(0.5 * MHZ);
            let self_e = g_target * g_target / Complex64::new(gamma_i / 2.0, w - w_c);
            let expect = Complex64::new(1.0, 0.0)
                - (kc / 2.0) / (Complex64::new((kc + gc) / 2.0, w - w_c) + self_e);
            assert!((s - expect).norm() < 1e-12, "k={k}");
            min_with = min_with.min(s.norm());
        }
        let at_center = s21_multi_tls(w_c, &res, &[t], 0.0).unwrap().norm();
        assert!(at_center > 0.5, "defect on resonance lifts the center of the dip");
        assert!(min_with < at_center, "split line shape has side minima");
    }

    #[test]
    fn zero_coupling_defects_are_invisible() {
        let res = reference_resonator();
        let t = TwoLevelSystem { pz: 0.0, ..tls(0.3, 5.0, 1.0) };
        for k in 0..50 {
            let w = res.omega_c() + (k as f64 - 25.0) * 1e6;
            let a = s21_multi_tls(w, &res, &[t, t], 0.0).unwrap();
            assert_eq!(a, bare_s21(w, &res));
        }
    }

    #[test]
    fn lossless_pole_is_an_error() {
        let res = reference_resonator();
        let t = TwoLevelSystem { gamma: 0.0, ..tls(0.0, 5.0, 2.0) };
        let w = t.angular_frequency(0.0);
        assert!(s21_multi_tls(w, &res, &[t], 0.0).is_err());
        assert!(s21_multi_tls(w + 1.0, &res, &[t], 0.0).is_ok());
        assert!(CoupledSystem::new(&res, &[t], 0.0).is_err());
    }

    #[test]
    fn noise_free_broadening_equals_plain_transmission() {
        let res = reference_resonator();
        let ts = [tls(0.1, 4.99, 2.0), tls(-0.2, 5.0, 3.0)];
        for seed in [0, 7, 99] {
            for k in 0..20 {
                let w = res.omega_c() + (k as f64 - 10.0) * 2e6;
                let a = s21_noise_broadened(w, &res, &ts, 0.0, 16, seed).unwrap();
                let b = s21_multi_tls(w, &res, &ts, 0.0).unwrap();
                assert_eq!(a, b);
            }
        }
        assert!(s21_noise_broadened(1.0, &res, &ts, 0.0, 0, 0).is_err());
    }

    #[test]
    fn broadening_is_seed_reproducible() {
        let res = reference_resonator();
        let t = TwoLevelSystem { sigma_noise: hz_to_angular(2.0 * MHZ), ..tls(0.0, 5.0, 2.6) };
        let w: Vec<f64> = (0..64).map(|k| res.omega_c() + (k as f64 - 32.0) * 1e6).collect();
        let a = s21_noise_broadened_trace(&w, &res, &[t], 0.0, 200, 5).unwrap();
        let b = s21_noise_broadened_trace(&w, &res, &[t], 0.0, 200, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_sensitivity() {
        let t = tls(0.0, 4.0, 4.0);
        assert_eq!(tls_frequency_noise_sensitivity(&t, 0.0, 1e-3, 20e-9), 0.0);
        // Δ'/E = 0.5 requires Δ' = Δ₀/√3
        let d0 = t.delta0;
        let t2 = TwoLevelSystem { delta: d0 / 3f64.sqrt(), ..t };
        let l0 = 20e-9;
        let dv = 1.0 * KV_PER_M * l0;
        let s = tls_frequency_noise_sensitivity(&t2, 0.0, dv, l0);
        assert!((s - 126_521_150.828_6).abs() / s < 1e-9);
        // far from the vertex the slope saturates at 2 p_z δV/(ℏ l₀)
        let t3 = TwoLevelSystem { delta: 1e6 * d0, ..t };
        let lim = 2.0 * t.pz * dv / (HBAR * l0);
        assert!((tls_frequency_noise_sensitivity(&t3, 0.0, dv, l0) - lim).abs() / lim < 1e-9);
    }

    #[test]
    fn window_axes() {
        let w = SweepWindow::new(5.0 * GHZ, 20.0 * MHZ, -90e3, 90e3, 11, 5).unwrap();
        let f = w.freq_axis();
        assert_eq!(f.len(), 11);
        assert_eq!(f[0], w.f_min());
        assert_eq!(f[10], w.f_max());
        assert!((w.delta_v_bias(20e-9) - 3.6e-3).abs() < 1e-15);
        assert!(SweepWindow::new(5.0, 1.0, 1.0, 1.0, 3, 3).is_err());
        assert!(SweepWindow::new(5.0, 1.0, 0.0, 1.0, 1, 3).is_err());
    }

    proptest! {
        #[test]
        fn energy_is_even_in_biased_asymmetry(
            delta in -20.0f64..20.0, d0 in 0.5f64..8.0, p in -10.0f64..10.0, e in -1e5f64..1e5
        ) {
            let t = tls(delta, d0, p);
            let dp = t.biased_asymmetry(e);
            let mirrored = TwoLevelSystem { delta: -dp - 2.0 * t.pz * e, ..t };
            let a = tls_energy(&t, e);
            let b = tls_energy(&mirrored, e);
            prop_assert!((a - b).abs() <= 1e-12 * a);
            prop_assert!(a >= t.delta0);
        }

        #[test]
        fn slope_matches_finite_differences(
            delta in -20.0f64..20.0, d0 in 0.5f64..8.0, p in 0.3f64..10.0, e in -1e5f64..1e5
        ) {
            let t = tls(delta, d0, p);
            // stay away from the vertex where the slope changes sign quickly
            prop_assume!(t.biased_asymmetry(e).abs() > 0.05 * t.delta0);
            let h = 1e-3;
            let fd = (tls_energy(&t, e + h) - tls_energy(&t, e - h)) / (2.0 * h);
            let an = tls_energy_slope(&t, e);
            prop_assert!((fd - an).abs() <= 1e-6 * an.abs());
        }

        #[test]
        fn coupling_times_energy_is_independent_of_asymmetry(
            delta in -20.0f64..20.0, d0 in 0.5f64..8.0, p in 0.1f64..10.0
        ) {
            let a = tls(delta, d0, p);
            let b = tls(0.0, d0, p);
            let ga = coupling_g(&a, 0.0, 20.5) * tls_energy(&a, 0.0) / a.delta0;
            let gb = coupling_g(&b, 0.0, 20.5) * tls_energy(&b, 0.0) / b.delta0;
            prop_assert!((ga - gb).abs() <= 1e-12 * gb);
        }
    }
}
