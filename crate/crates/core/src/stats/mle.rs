//! Maximum-likelihood fits of dipole distribution families.
//!
//! All samples and location/scale parameters are in Debye; the gamma rate is
//! in 1/D.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::optim::{bfgs, numeric_hessian, BfgsOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitFamily {
    /// p·exp(−(p−μ)²/2σ²) on p ≥ 0: the measured image of a material
    /// Gaussian.
    ModifiedGaussian,
    TruncatedNormal,
    /// Shape α, rate β.
    Gamma,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionFit {
    pub family: FitFamily,
    /// (μ, σ) in D, or (α, β) for the gamma family.
    pub params: [f64; 2],
    pub loglik: f64,
    /// From the inverse observed information; NaN when it is singular.
    pub stderr: [f64; 2],
    pub converged: bool,
}

impl DistributionFit {
    /// Mean of the fitted density.
    pub fn mean(&self) -> f64 {
        let [a, b] = self.params;
        match self.family {
            FitFamily::Gamma => a / b,
            FitFamily::TruncatedNormal => {
                let z = a / b;
                a + b * phi(z) / big_phi(z)
            }
            FitFamily::ModifiedGaussian => {
                // E[p] = ∫p² e^{..} / ∫p e^{..}
                let (m, s) = (a, b);
                let z = m / s;
                let i1 = s * s * phi(z) * (2.0 * PI).sqrt() + m * s * (2.0 * PI).sqrt() * big_phi(z);
                let i2 = (m * m + s * s) * s * (2.0 * PI).sqrt() * big_phi(z) + m * s * s * (2.0 * PI).sqrt() * phi(z);
                i2 / i1
            }
        }
    }

    /// Log density at `p` Debye.
    pub fn log_pdf(&self, p: f64) -> f64 {
        log_pdf(self.family, self.params, p)
    }
}

fn phi(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

fn big_phi(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / 2f64.sqrt()))
}

/// C₁(μ,σ) = σ²e^{−μ²/2σ²} + μσ√(π/2)(1 − erf(−μ/σ√2)).
pub fn c1(mu: f64, sigma: f64) -> f64 {
    sigma * sigma * (-mu * mu / (2.0 * sigma * sigma)).exp()
        + mu * sigma * (PI / 2.0).sqrt() * (1.0 - erf(-mu / (sigma * 2f64.sqrt())))
}

/// C(μ,σ) = 2/(1 − erf(−μ/σ√2)).
pub fn c_trunc(mu: f64, sigma: f64) -> f64 {
    2.0 / (1.0 - erf(-mu / (sigma * 2f64.sqrt())))
}

fn log_pdf(family: FitFamily, params: [f64; 2], p: f64) -> f64 {
    if p < 0.0 {
        return f64::NEG_INFINITY;
    }
    let [a, b] = params;
    match family {
        FitFamily::ModifiedGaussian => p.ln() - (p - a).powi(2) / (2.0 * b * b) - c1(a, b).ln(),
        FitFamily::TruncatedNormal => {
            c_trunc(a, b).ln() - (b * (2.0 * PI).sqrt()).ln() - (p - a).powi(2) / (2.0 * b * b)
        }
        FitFamily::Gamma => a * b.ln() + (a - 1.0) * p.ln() - b * p - ln_gamma(a),
    }
}

fn loglik(family: FitFamily, params: [f64; 2], xs: &[f64]) -> f64 {
    let v: f64 = xs.iter().map(|&x| log_pdf(family, params, x)).sum();
    if v.is_finite() {
        v
    } else {
        f64::NEG_INFINITY
    }
}

// optimizer coordinates: (μ, ln σ) or (ln α, ln β)
fn to_natural(family: FitFamily, x: &[f64]) -> [f64; 2] {
    match family {
        FitFamily::Gamma => [x[0].exp(), x[1].exp()],
        _ => [x[0], x[1].exp()],
    }
}

fn from_natural(family: FitFamily, p: [f64; 2]) -> [f64; 2] {
    match family {
        FitFamily::Gamma => [p[0].ln(), p[1].ln()],
        _ => [p[0], p[1].ln()],
    }
}

fn check_sample(xs: &[f64], min_n: usize) -> Result<(f64, f64)> {
    if xs.len() < min_n {
        return Err(Error::InsufficientPoints { needed: min_n, got: xs.len() });
    }
    if let Some(bad) = xs.iter().find(|x| !(**x > 0.0) || !x.is_finite()) {
        return Err(Error::domain(format!("dipole values must be finite and > 0, got {bad}")));
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    if !(v > 0.0) {
        return Err(Error::domain("zero variance"));
    }
    Ok((m, v.sqrt()))
}

fn fit(family: FitFamily, xs: &[f64], starts: &[[f64; 2]]) -> Result<DistributionFit> {
    let objective = |x: &[f64]| {
        let ll = loglik(family, to_natural(family, x), xs);
        if ll.is_finite() {
            -ll
        } else {
            f64::INFINITY
        }
    };
    let opts = BfgsOptions { max_iter: 1000, ftol: 1e-9, gtol: 1e-7 };
    let mut best: Option<(f64, Vec<f64>, bool)> = None;
    for s in starts {
        let x0 = from_natural(family, *s);
        if !objective(&x0).is_finite() {
            continue;
        }
        let r = bfgs(objective, &x0, &opts);
        if best.as_ref().is_none_or(|b| r.fx < b.0) {
            best = Some((r.fx, r.x, r.converged));
        }
    }
    let (fx, x, converged) = best.ok_or_else(|| Error::NonConvergence("no start had a finite likelihood".into()))?;
    let params = to_natural(family, &x);
    let nat = |p: &[f64]| {
        let ll = loglik(family, [p[0], p[1]], xs);
        if ll.is_finite() {
            -ll
        } else {
            f64::INFINITY
        }
    };
    let h = numeric_hessian(&nat, &params);
    let stderr = match h.try_inverse() {
        Some(cov) if cov[(0, 0)] > 0.0 && cov[(1, 1)] > 0.0 => [cov[(0, 0)].sqrt(), cov[(1, 1)].sqrt()],
        _ => [f64::NAN; 2],
    };
    Ok(DistributionFit { family, params, loglik: -fx, stderr, converged: converged && fx.is_finite() })
}

/// Fits the measured-dipole model C₁⁻¹·p·exp(−(p−μ)²/2σ²).
pub fn mle_modified_gaussian(xs: &[f64]) -> Result<DistributionFit> {
    let (m, s) = check_sample(xs, 10)?;
    fit(FitFamily::ModifiedGaussian, xs, &[[m, s], [m - 0.5 * s, s], [0.5 * m, 1.2 * s]])
}

/// Fits a normal density truncated to p ≥ 0.
pub fn mle_truncated_normal(xs: &[f64]) -> Result<DistributionFit> {
    let (m, s) = check_sample(xs, 10)?;
    fit(FitFamily::TruncatedNormal, xs, &[[m, s], [m - 0.5 * s, 1.2 * s], [m + 0.25 * s, 0.8 * s]])
}

/// Fits the standard gamma density β^α p^{α−1} e^{−βp} / Γ(α).
pub fn mle_gamma(xs: &[f64]) -> Result<DistributionFit> {
    let (m, s) = check_sample(xs, 10)?;
    let alpha = (m / s).powi(2);
    let beta = m / (s * s);
    fit(FitFamily::Gamma, xs, &[[alpha, beta], [0.5 * alpha, 0.5 * beta], [2.0 * alpha, 2.0 * beta]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::integrate;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Gamma, Normal};

    /// Rejection sampler for p·N(μ,σ) on p ≥ 0.
    fn modified_gaussian(mu: f64, sigma: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(mu, sigma).unwrap();
        let cap = mu.max(0.0) + 6.0 * sigma;
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let p: f64 = normal.sample(&mut rng);
            if p > 0.0 && rng.random::<f64>() * cap < p {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn normalizers_integrate_to_one() {
        for (mu, sigma) in [(2.6, 1.6), (0.0, 1.0), (-1.0, 2.0), (5.0, 0.5)] {
            let f = |p: f64| log_pdf(FitFamily::ModifiedGaussian, [mu, sigma], p).exp();
            let i = integrate(f, 0.0, mu.max(0.0) + 12.0 * sigma, 1e-12, 1e-10, 200).unwrap();
            assert!((i - 1.0).abs() < 1e-8, "modified {mu} {sigma}: {i}");
            let g = |p: f64| log_pdf(FitFamily::TruncatedNormal, [mu, sigma], p).exp();
            let i = integrate(g, 0.0, mu.max(0.0) + 12.0 * sigma, 1e-12, 1e-10, 200).unwrap();
            assert!((i - 1.0).abs() < 1e-8, "truncated {mu} {sigma}: {i}");
        }
    }

    #[test]
    fn c1_reduces_to_sigma_squared_at_zero_mean() {
        assert!((c1(0.0, 1.7) - 1.7 * 1.7).abs() < 1e-14);
        assert!((c_trunc(0.0, 3.0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn recovers_modified_gaussian() {
        let xs = modified_gaussian(2.6, 1.6, 4000, 1);
        let f = mle_modified_gaussian(&xs).unwrap();
        assert!(f.converged);
        assert!((f.params[0] - 2.6).abs() < 3.0 * f.stderr[0], "{f:?}");
        assert!((f.params[1] - 1.6).abs() < 3.0 * f.stderr[1], "{f:?}");
    }

    #[test]
    fn truncated_normal_far_from_zero_is_plain_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = Normal::new(10.0, 1.0).unwrap();
        let xs: Vec<f64> = (0..2000).map(|_| n.sample(&mut rng)).collect();
        let f = mle_truncated_normal(&xs).unwrap();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let s = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
        assert!((f.params[0] - m).abs() < 1e-4 && (f.params[1] - s).abs() < 1e-4, "{f:?} vs {m} {s}");
    }

    #[test]
    fn truncated_normal_recovers_half_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = Normal::new(0.0, 1.5).unwrap();
        let xs: Vec<f64> = (0..5000).map(|_| n.sample(&mut rng)).map(|x: f64| x.abs()).collect();
        let f = mle_truncated_normal(&xs).unwrap();
        assert!(f.params[0].abs() < 3.0 * f.stderr[0] + 0.05, "{f:?}");
        assert!((f.params[1] - 1.5).abs() < 3.0 * f.stderr[1], "{f:?}");
    }

    #[test]
    fn gamma_recovers_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = Gamma::new(5.15, 1.0 / 1.72).unwrap();
        let xs: Vec<f64> = (0..394).map(|_| g.sample(&mut rng)).collect();
        let f = mle_gamma(&xs).unwrap();
        let sd = xs.iter().map(|x| (x - f.mean()).powi(2)).sum::<f64>().sqrt() / xs.len() as f64;
        assert!((f.mean() - 5.15 / 1.72).abs() < 3.0 * sd, "{f:?}");
    }

    #[test]
    fn exponential_gives_unit_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Gamma::new(1.0, 2.0).unwrap();
        let xs: Vec<f64> = (0..5000).map(|_| g.sample(&mut rng)).collect();
        let f = mle_gamma(&xs).unwrap();
        assert!((f.params[0] - 1.0).abs() < 3.0 * f.stderr[0], "{f:?}");
    }

    #[test]
    fn flat_data_prefers_flat_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xs: Vec<f64> = (0..1000).map(|_| 1.0 + 4.0 * rng.random::<f64>()).collect();
        let f = mle_modified_gaussian(&xs).unwrap();
        assert!(f.converged);
        let flat = xs.len() as f64 * (0.25f64).ln();
        assert!(f.loglik < flat, "{} vs {flat}", f.loglik);
    }

    #[test]
    fn errors_on_bad_input() {
        assert!(matches!(mle_gamma(&[1.0; 5]), Err(Error::InsufficientPoints { .. })));
        let e = mle_modified_gaussian(&[2.0; 20]).unwrap_err();
        assert!(e.to_string().contains("zero variance"));
        let mut xs = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 0.0];
        assert!(matches!(mle_truncated_normal(&xs), Err(Error::Domain(_))));
        xs[9] = f64::NAN;
        assert!(mle_truncated_normal(&xs).is_err());
    }

    #[test]
    fn estimators_are_consistent() {
        let mut prev = f64::INFINITY;
        for (i, n) in [100usize, 1000, 10000].into_iter().enumerate() {
            // average error over a few draws keeps the sequence monotone
            let err: f64 = (0..4)
                .map(|r| {
                    let xs = modified_gaussian(2.6, 1.6, n, 100 + 10 * i as u64 + r);
                    let f = mle_modified_gaussian(&xs).unwrap();
                    (f.params[0] - 2.6).abs() + (f.params[1] - 1.6).abs()
                })
                .sum::<f64>()
                / 4.0;
            assert!(err < prev, "n={n}: {err} !< {prev}");
            prev = err;
        }
        assert!(prev < 0.1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn gamma_shape_is_scale_invariant(c in 0.2f64..5.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = Gamma::new(3.0, 1.0).unwrap();
            let xs: Vec<f64> = (0..300).map(|_| g.sample(&mut rng)).collect();
            let ys: Vec<f64> = xs.iter().map(|x| c * x).collect();
            let a = mle_gamma(&xs).unwrap();
            let b = mle_gamma(&ys).unwrap();
            prop_assert!((a.params[0] - b.params[0]).abs() < 1e-4 * a.params[0]);
            prop_assert!((c * a.mean() - b.mean()).abs() < 1e-4 * b.mean());
        }
    }
}
