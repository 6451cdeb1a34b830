//! Resonant-absorption loss tangent with saturation and thermal population.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};
use crate::optim::integrate;
use crate::physics::LossIntegrandParams;
use crate::units::{debye_to_cm, BOLTZMANN, EPSILON_0, HBAR};

/// tanδ(ω₀) = (1/εℏ) ∫dp D(p) p² ∫₀^∞dΔ ∫₀^∞dΔ₀ (1/Δ₀)(Δ₀/E)² tanh(E/2k_BT)
///            · T₂ / (1 + Ω²T₁T₂ + (ω₀ − E/ℏ)²T₂²)
///
/// `density` gives D(p_z) in 1/(J·m³·D) for p_z in Debye on [0, p_max].
/// The (Δ, Δ₀) plane is integrated in polar form Δ = E cosθ, Δ₀ = E sinθ;
/// the Lorentzian is mapped through a tangent substitution so its tails are
/// included exactly. For Ω²T₁T₂ ≪ 1 and k_BT ≪ ℏω₀ this reduces to
/// (π/ε)∫D p² dp.
pub fn loss_integral_general<F: Fn(f64) -> f64>(
    density: F,
    p_max: f64,
    params: &LossIntegrandParams,
    f0: f64,
    eps_r: f64,
) -> Result<f64> {
    if !(p_max > 0.0) || !(f0 > 0.0) || !(eps_r > 0.0) {
        return Err(Error::domain("p_max, f0 and eps_r must be > 0"));
    }
    let eps = eps_r * EPSILON_0;
    let omega = 2.0 * PI * f0;
    let s = params.saturation();
    let root = (1.0 + s).sqrt();
    let t2 = params.t2;
    let kt = BOLTZMANN * params.temperature;

    let dipole = integrate(|p| density(p) * debye_to_cm(p).powi(2) * debye_to_cm(1.0), 0.0, p_max, 0.0, 1e-9, 2000)?;

    // angular factor (1/Δ₀)(Δ₀/E)²·E = sinθ
    let angular = integrate(f64::sin, 0.0, FRAC_PI_2, 0.0, 1e-12, 100)?;

    // E = ℏ(ω₀ + √(1+s)·tan(u)/T₂): the Lorentzian becomes ℏ/√(1+s) du
    let u0 = (-omega * t2 / root).atan();
    let thermal = |u: f64| {
        let e = HBAR * (omega + root * u.tan() / t2);
        if e <= 0.0 {
            0.0
        } else {
            (e / (2.0 * kt)).tanh()
        }
    };
    let lorentz = HBAR / root * integrate(thermal, u0, FRAC_PI_2, 0.0, 1e-10, 4000)?;

    Ok(dipole * angular * lorentz / (eps * HBAR))
}
