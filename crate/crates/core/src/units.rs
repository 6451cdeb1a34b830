//! Physical constants and I/O unit conversions.
//!
//! Everything inside the crate is SI (J, rad/s, V/m, C·m). Debye, GHz, MHz
//! and kV/m only appear at file and CLI boundaries.

use std::f64::consts::PI;

/// Planck constant h (J·s), exact in SI 2019.
pub const PLANCK: f64 = 6.626_070_15e-34;

/// Reduced Planck constant ℏ = h/2π (J·s).
pub const HBAR: f64 = PLANCK / (2.0 * PI);

/// Vacuum permittivity ε₀ (F/m).
pub const EPSILON_0: f64 = 8.854_187_8e-12;

/// Boltzmann constant k_B (J/K), exact.
pub const BOLTZMANN: f64 = 1.380_649e-23;

/// One Debye in C·m (3.335641×10⁻³⁰).
pub const DEBYE: f64 = 3.335_641e-30;

pub const GHZ: f64 = 1e9;
pub const MHZ: f64 = 1e6;
pub const KHZ: f64 = 1e3;
pub const KV_PER_M: f64 = 1e3;
pub const NM: f64 = 1e-9;

pub fn debye_to_cm(p: f64) -> f64 {
    p * DEBYE
}

pub fn cm_to_debye(p: f64) -> f64 {
    p / DEBYE
}

/// Energy in J to the equivalent frequency E/h in Hz.
pub fn joule_to_hz(e: f64) -> f64 {
    e / PLANCK
}

pub fn hz_to_joule(f: f64) -> f64 {
    f * PLANCK
}

/// Ordinary frequency (Hz) to angular rate (rad/s).
pub fn hz_to_angular(f: f64) -> f64 {
    2.0 * PI * f
}

pub fn angular_to_hz(w: f64) -> f64 {
    w / (2.0 * PI)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn debye_round_trip() {
        let p = 2.6;
        assert!((cm_to_debye(debye_to_cm(p)) - p).abs() < 1e-15);
        // 1 D ≈ 0.2082 eÅ
        let e_angstrom = 1.602_176_634e-19 * 1e-10;
        assert!((DEBYE / e_angstrom - 0.2082).abs() < 1e-4);
    }

    #[test]
    fn energy_frequency_conversion_is_lossless() {
        for f in [1.0, 4.974e9, 5.0e9, 123.456e6] {
            let back = joule_to_hz(hz_to_joule(f));
            assert!((back - f).abs() <= f * 4.0 * f64::EPSILON);
        }
    }

    #[test]
    fn hbar_matches_codata() {
        assert!((HBAR - 1.054_571_817e-34).abs() < 1e-42);
    }
}
