//! χ² and Kolmogorov–Smirnov tests used to compare dipole histograms.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    /// Degrees of freedom (χ²) or effective sample size (KS).
    pub dof: f64,
    pub p_value: f64,
}

fn chi2_sf(x: f64, dof: f64) -> Result<f64> {
    let d = ChiSquared::new(dof).map_err(|e| Error::domain(e.to_string()))?;
    Ok(d.sf(x))
}

/// Pools adjacent bins, left to right, until each pooled `weight` reaches
/// `min`; a short tail joins the last full group.
fn pool(weight: &[f64], min: f64) -> Vec<std::ops::Range<usize>> {
    let mut groups = Vec::new();
    let mut start = 0;
    let mut acc = 0.0;
    for (i, w) in weight.iter().enumerate() {
        acc += w;
        if acc >= min {
            groups.push(start..i + 1);
            start = i + 1;
            acc = 0.0;
        }
    }
    if start < weight.len() {
        match groups.last_mut() {
            Some(last) => last.end = weight.len(),
            None => groups.push(0..weight.len()),
        }
    }
    groups
}

/// Pearson goodness of fit of observed counts against expected counts.
/// Expected counts are rescaled to the observed total, bins are pooled to
/// an expectation of at least 5, and `ddof` extra fitted parameters are
/// removed from the degrees of freedom.
pub fn chi_square_gof(observed: &[f64], expected: &[f64], ddof: usize) -> Result<TestResult> {
    if observed.len() != expected.len() {
        return Err(Error::Dimension(format!("{} observed vs {} expected bins", observed.len(), expected.len())));
    }
    if expected.iter().chain(observed).any(|x| !(*x >= 0.0)) {
        return Err(Error::domain("counts must be >= 0"));
    }
    let no: f64 = observed.iter().sum();
    let ne: f64 = expected.iter().sum();
    if !(ne > 0.0) || !(no > 0.0) {
        return Err(Error::domain("empty histogram"));
    }
    let e: Vec<f64> = expected.iter().map(|x| x * no / ne).collect();
    let groups = pool(&e, 5.0);
    if groups.len() < ddof + 2 {
        return Err(Error::InsufficientPoints { needed: ddof + 2, got: groups.len() });
    }
    let stat: f64 = groups
        .iter()
        .map(|g| {
            let o: f64 = observed[g.clone()].iter().sum();
            let x: f64 = e[g.clone()].iter().sum();
            (o - x).powi(2) / x
        })
        .sum();
    let dof = (groups.len() - 1 - ddof) as f64;
    Ok(TestResult { statistic: stat, dof, p_value: chi2_sf(stat, dof)? })
}

/// Two-sample χ² for binned data with unequal totals. Bins are pooled until
/// the combined count reaches 10.
pub fn chi_square_two_sample(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("{} vs {} bins", a.len(), b.len())));
    }
    let (na, nb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(Error::domain("empty histogram"));
    }
    let both: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + y).collect();
    let groups = pool(&both, 10.0);
    if groups.len() < 2 {
        return Err(Error::InsufficientPoints { needed: 2, got: groups.len() });
    }
    let (ra, rb) = ((nb / na).sqrt(), (na / nb).sqrt());
    let stat: f64 = groups
        .iter()
        .map(|g| {
            let x: f64 = a[g.clone()].iter().sum();
            let y: f64 = b[g.clone()].iter().sum();
            (ra * x - rb * y).powi(2) / (x + y)
        })
        .sum();
    let dof = (groups.len() - 1) as f64;
    Ok(TestResult { statistic: stat, dof, p_value: chi2_sf(stat, dof)? })
}

/// Kolmogorov distribution tail Q(λ) = 2 Σ (−1)^{k−1} e^{−2k²λ²}.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = sign * (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov–Smirnov test with the Stephens small-sample
/// correction of the asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientPoints { needed: 1, got: 0 });
    }
    if a.iter().chain(b).any(|x| x.is_nan()) {
        return Err(Error::domain("samples contain NaN"));
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let ne = n * m / (n + m);
    let sq = ne.sqrt();
    let p = kolmogorov_q((sq + 0.12 + 0.11 / sq) * d);
    Ok(TestResult { statistic: d, dof: ne, p_value: p })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_fit_has_p_one() {
        let o = [10.0, 20.0, 30.0, 40.0];
        let r = chi_square_gof(&o, &o, 0).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!((r.p_value - 1.0).abs() < 1e-12);
        assert_eq!(r.dof, 3.0);
    }

    #[test]
    fn known_chi_square_value() {
        // (10−20)²/20 + (30−20)²/20 = 10, 1 dof
        let r = chi_square_gof(&[10.0, 30.0], &[1.0, 1.0], 0).unwrap();
        assert!((r.statistic - 10.0).abs() < 1e-12);
        assert!((r.p_value - 0.001_565_402_258_002_549).abs() < 1e-9, "{}", r.p_value);
    }

    #[test]
    fn sparse_bins_are_pooled() {
        let r = chi_square_gof(&[1.0, 0.0, 5.0, 50.0, 47.0], &[2.0, 2.0, 2.0, 50.0, 47.0], 0).unwrap();
        assert_eq!(r.dof, 2.0);
    }

    #[test]
    fn two_sample_same_shape_different_totals() {
        let a = [10.0, 20.0, 30.0];
        let b = [20.0, 40.0, 60.0];
        let r = chi_square_two_sample(&a, &b).unwrap();
        assert!(r.statistic.abs() < 1e-12);
        assert!(chi_square_two_sample(&a, &[1.0]).is_err());
    }

    #[test]
    fn ks_detects_shift_and_accepts_same() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..500).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..400).map(|_| rng.random::<f64>()).collect();
        let c: Vec<f64> = (0..400).map(|_| 0.2 + rng.random::<f64>()).collect();
        assert!(ks_two_sample(&a, &b).unwrap().p_value > 0.01);
        assert!(ks_two_sample(&a, &c).unwrap().p_value < 1e-6);
        let d = ks_two_sample(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(d.statistic, 0.0);
    }

    #[test]
    fn kolmogorov_tail_reference() {
        // Q(1.36) ≈ 0.0494
        assert!((kolmogorov_q(1.36) - 0.0494).abs() < 5e-4);
    }
}
