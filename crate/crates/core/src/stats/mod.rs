//! Dipole statistics: measured/material histograms, calculated means, loss
//! tangent and P₀ estimates, distribution fits, and comparison tests.
//!
//! Unlike the rest of the crate, dipole lists here are in Debye because the
//! distribution parameters are quoted in Debye. Geometry stays SI.

pub mod gof;
pub mod loss;
pub mod mle;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::physics::{ResonatorModel, SweepWindow};
use crate::units::{debye_to_cm, EPSILON_0};

pub use gof::{chi_square_gof, chi_square_two_sample, ks_two_sample, TestResult};
pub use loss::loss_integral_general;
pub use mle::{mle_gamma, mle_modified_gaussian, mle_truncated_normal, DistributionFit, FitFamily};

/// Sample geometry that links observed counts to volume densities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    /// Participating volume 𝕍 (m³).
    pub volume: f64,
    /// Dielectric thickness l₀ (m).
    pub thickness: f64,
    /// Bias voltage range ΔV_bias (V).
    pub delta_v_bias: f64,
    /// Resonator frequency f₀ (Hz).
    pub f0: f64,
    /// Swept frequency span Δf₀ (Hz).
    pub delta_f0: f64,
}

impl Geometry {
    pub fn new(volume: f64, thickness: f64, delta_v_bias: f64, f0: f64, delta_f0: f64) -> Result<Self> {
        let g = Self { volume, thickness, delta_v_bias, f0, delta_f0 };
        g.validate()?;
        Ok(g)
    }

    pub fn from_sweep(res: &ResonatorModel, window: &SweepWindow) -> Result<Self> {
        Self::new(
            res.volume,
            res.thickness,
            window.delta_v_bias(res.thickness),
            window.f_center,
            window.f_span,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let v = [self.volume, self.thickness, self.delta_v_bias, self.f0, self.delta_f0];
        if v.iter().all(|x| *x > 0.0 && x.is_finite()) {
            Ok(())
        } else {
            Err(Error::domain(format!("geometry entries must be finite and > 0: {self:?}")))
        }
    }

    /// (1/𝕍)·(l₀/ΔV_bias)·(f₀/Δf₀), the factor shared by every count-to-density
    /// conversion (1/(m³·V/m)).
    fn scale(&self) -> f64 {
        self.thickness / (self.volume * self.delta_v_bias) * (self.f0 / self.delta_f0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HistogramKind {
    /// H(p_z): observed defects per Debye, Σ counts·width = N_tot.
    Measured,
    /// D(p_z) in 1/(J·m³·C·m).
    Material,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DipoleHistogram {
    /// Bin edges (D).
    pub edges: Vec<f64>,
    /// Per-bin density; units follow `kind`.
    pub counts: Vec<f64>,
    pub kind: HistogramKind,
    pub n_total: usize,
    pub geometry: Option<Geometry>,
}

/// Freedman–Diaconis edges with at least `min_bins` bins.
pub fn auto_edges(values: &[f64], min_bins: usize) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::InsufficientPoints { needed: 1, got: 0 });
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (lo, hi) = (v[0], v[v.len() - 1]);
    let iqr = quantile_sorted(&v, 0.75) - quantile_sorted(&v, 0.25);
    let width = 2.0 * iqr / (v.len() as f64).cbrt();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let bins = if width > 0.0 { ((span / width).ceil() as usize).max(min_bins) } else { min_bins };
    let bins = bins.clamp(1, 10_000);
    let step = span / bins as f64;
    Ok((0..=bins).map(|i| if i == bins { lo + span } else { lo + step * i as f64 }).collect())
}

/// Linear-interpolation quantile (type 7) of sorted data.
fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let i = h.floor() as usize;
    let j = (i + 1).min(v.len() - 1);
    v[i] + (h - i as f64) * (v[j] - v[i])
}

pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InsufficientPoints { needed: 1, got: 0 });
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&v, q))
}

impl DipoleHistogram {
    /// Bins a list of measured dipoles (D). Values outside the edges are
    /// dropped; the top edge is inclusive.
    pub fn measured(values: &[f64], edges: Option<Vec<f64>>, geometry: Option<Geometry>) -> Result<Self> {
        let edges = match edges {
            Some(e) => e,
            None => auto_edges(values, 12)?,
        };
        if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::domain("histogram edges must be strictly increasing, at least two"));
        }
        let nb = edges.len() - 1;
        let mut n = vec![0usize; nb];
        for &x in values {
            if x < edges[0] || x > edges[nb] {
                continue;
            }
            let i = edges.partition_point(|e| *e <= x).saturating_sub(1).min(nb - 1);
            n[i] += 1;
        }
        let n_total = n.iter().sum();
        let counts = n.iter().zip(edges.windows(2)).map(|(&c, w)| c as f64 / (w[1] - w[0])).collect();
        Ok(Self { edges, counts, kind: HistogramKind::Measured, n_total, geometry })
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| w[1] - w[0]).collect()
    }

    fn conversion(&self, want: HistogramKind) -> Result<(Geometry, Vec<f64>)> {
        if self.kind == want {
            return Err(Error::domain(format!("histogram is already {want:?}")));
        }
        let g = self.geometry.ok_or_else(|| Error::domain("histogram has no geometry"))?;
        g.validate()?;
        let c = self.centers();
        if let Some(i) = self.edges.windows(2).position(|w| w[0] <= 0.0 && w[1] >= 0.0) {
            return Err(Error::domain(format!("bin {i} contains p_z = 0")));
        }
        if c.iter().any(|x| *x <= 0.0) {
            return Err(Error::domain("bin centers must be > 0"));
        }
        Ok((g, c))
    }

    /// D(p_z) = (1/𝕍)·H(p_z)/(2p_z)·(l₀/ΔV_bias)·(f₀/Δf₀), with H taken per
    /// C·m and p_z in C·m.
    pub fn to_material(&self) -> Result<Self> {
        let (g, c) = self.conversion(HistogramKind::Material)?;
        let s = g.scale();
        let counts = self
            .counts
            .iter()
            .zip(&c)
            .map(|(h, p)| {
                let p = debye_to_cm(*p);
                s * (h / debye_to_cm(1.0)) / (2.0 * p)
            })
            .collect();
        Ok(Self { counts, kind: HistogramKind::Material, ..self.clone() })
    }

    /// Inverse of [`DipoleHistogram::to_material`].
    pub fn to_measured(&self) -> Result<Self> {
        let (g, c) = self.conversion(HistogramKind::Measured)?;
        let s = g.scale();
        let counts = self
            .counts
            .iter()
            .zip(&c)
            .map(|(d, p)| {
                let p = debye_to_cm(*p);
                d * 2.0 * p / s * debye_to_cm(1.0)
            })
            .collect();
        Ok(Self { counts, kind: HistogramKind::Measured, ..self.clone() })
    }

    /// Least-squares slope of the bin values against bin center. A material
    /// density from any mixture of isotropic defects has slope ≤ 0.
    pub fn slope(&self) -> f64 {
        let c = self.centers();
        let n = c.len() as f64;
        let mx = c.iter().sum::<f64>() / n;
        let my = self.counts.iter().sum::<f64>() / n;
        let sxy: f64 = c.iter().zip(&self.counts).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = c.iter().map(|x| (x - mx).powi(2)).sum();
        if sxx > 0.0 {
            sxy / sxx
        } else {
            0.0
        }
    }
}

pub fn measured_to_material(h: &DipoleHistogram) -> Result<DipoleHistogram> {
    if h.kind != HistogramKind::Measured {
        return Err(Error::domain("expected a measured histogram"));
    }
    h.to_material()
}

fn check_positive(values: &[f64]) -> Result<()> {
    match values.iter().find(|p| !(**p > 0.0) || !p.is_finite()) {
        Some(bad) => Err(Error::domain(format!("dipole values must be finite and > 0, got {bad}"))),
        None => Ok(()),
    }
}

/// Material-weighted mean and standard deviation of measured dipoles (D).
///
/// Observation weights each defect by p_z, so the material moments are
/// E_D[pᵏ] = Σpᵏ⁻¹/Σp⁻¹: mean N/Σ(1/p), second moment Σp/Σ(1/p).
pub fn calculated_mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::InsufficientPoints { needed: 1, got: 0 });
    }
    check_positive(values)?;
    let inv: f64 = values.iter().map(|p| 1.0 / p).sum();
    let mean = values.len() as f64 / inv;
    let m2 = values.iter().sum::<f64>() / inv;
    Ok((mean, (m2 - mean * mean).max(0.0).sqrt()))
}

/// Same moments from a measured histogram, ∫H dp / ∫p⁻¹H dp at bin centers.
pub fn calculated_mean_std_hist(h: &DipoleHistogram) -> Result<(f64, f64)> {
    if h.kind != HistogramKind::Measured {
        return Err(Error::domain("expected a measured histogram"));
    }
    let c = h.centers();
    check_positive(&c)?;
    let w = h.widths();
    let (mut n, mut inv, mut s) = (0.0, 0.0, 0.0);
    for i in 0..c.len() {
        let m = h.counts[i] * w[i];
        n += m;
        inv += m / c[i];
        s += m * c[i];
    }
    if !(inv > 0.0) {
        return Err(Error::InsufficientPoints { needed: 1, got: 0 });
    }
    let mean = n / inv;
    Ok((mean, (s / inv - mean * mean).max(0.0).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSummary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    /// Statistical standard error, std/√n.
    pub stderr: f64,
    /// Thickness systematic: `thickness_frac`·mean.
    pub systematic: f64,
    /// Both terms in quadrature.
    pub total_error: f64,
}

/// Material mean with its statistical and thickness-systematic errors.
pub fn material_mean_summary(values: &[f64], thickness_frac: f64) -> Result<MeanSummary> {
    let (mean, std) = calculated_mean_std(values)?;
    let n = values.len();
    let stderr = std / (n as f64).sqrt();
    let systematic = thickness_frac.abs() * mean;
    Ok(MeanSummary { mean, std, n, stderr, systematic, total_error: stderr.hypot(systematic) })
}

/// Low-power loss tangent of the observed defects:
/// tanδ = (π/2ε)·(l₀/(𝕍·ΔV_bias))·(f₀/Δf₀)·Σ p_z.
pub fn loss_from_dipoles(values: &[f64], geometry: &Geometry, eps_r: f64) -> Result<f64> {
    geometry.validate()?;
    if !(eps_r > 0.0) {
        return Err(Error::domain("eps_r must be > 0"));
    }
    let eps = eps_r * EPSILON_0;
    let sum: f64 = values.iter().map(|p| debye_to_cm(*p)).sum();
    Ok(std::f64::consts::PI / (2.0 * eps) * geometry.scale() * sum)
}

/// Tunneling-model constant P₀ = Σ (1/𝕍)·(1/p_z)·(l₀/2ΔV_bias)·(f₀/Δf₀),
/// in 1/(J·m³).
pub fn material_constant(values: &[f64], geometry: &Geometry) -> Result<f64> {
    geometry.validate()?;
    check_positive(values)?;
    let inv: f64 = values.iter().map(|p| 1.0 / debye_to_cm(*p)).sum();
    Ok(0.5 * geometry.scale() * inv)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub percentile: f64,
    /// Dipole value at the percentile (D).
    pub threshold: f64,
    pub m_factor: f64,
    /// Plain mean with the small-p counts multiplied by M.
    pub raw_mean: f64,
    /// Material-weighted mean with the same reweighting.
    pub material_mean: f64,
}

/// Mean after multiplying the counts below each percentile threshold by
/// each factor M, modeling defects missed at small p_z.
pub fn missing_tls_sensitivity(values: &[f64], percentiles: &[f64], m_factors: &[f64]) -> Result<Vec<SensitivityRow>> {
    if values.is_empty() {
        return Err(Error::InsufficientPoints { needed: 1, got: 0 });
    }
    check_positive(values)?;
    if let Some(m) = m_factors.iter().find(|m| !(**m >= 1.0)) {
        return Err(Error::domain(format!("multiplication factors must be >= 1, got {m}")));
    }
    let mut out = Vec::with_capacity(percentiles.len() * m_factors.len());
    for &pc in percentiles {
        if !(0.0..=100.0).contains(&pc) {
            return Err(Error::domain(format!("percentile {pc} outside [0, 100]")));
        }
        let threshold = quantile(values, pc / 100.0)?;
        for &m in m_factors {
            let (mut w, mut wp, mut winv) = (0.0, 0.0, 0.0);
            for &p in values {
                let k = if p < threshold { m } else { 1.0 };
                w += k;
                wp += k * p;
                winv += k / p;
            }
            out.push(SensitivityRow { percentile: pc, threshold, m_factor: m, raw_mean: wp / w, material_mean: w / winv });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Welch two-sample comparison between two groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupComparison {
    pub a: String,
    pub b: String,
    pub t: f64,
    pub dof: f64,
    /// Two-sided p-value.
    pub p_value: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = if v.len() > 1 { (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (m, s)
}

pub fn welch_test(a: &[f64], b: &[f64]) -> Result<(f64, f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InsufficientPoints { needed: 2, got: a.len().min(b.len()) });
    }
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    let (va, vb) = (sa * sa / a.len() as f64, sb * sb / b.len() as f64);
    let se2 = va + vb;
    if !(se2 > 0.0) {
        // both groups constant
        let same = ma == mb;
        return Ok((if same { 0.0 } else { f64::INFINITY }, f64::INFINITY, if same { 1.0 } else { 0.0 }));
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / (va * va / (a.len() as f64 - 1.0) + vb * vb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::domain(e.to_string()))?;
    Ok((t, dof, 2.0 * dist.sf(t.abs())))
}

/// Plain mean/std per group and a Welch comparison for every pair.
pub fn subset_summary(groups: &[(String, Vec<f64>)]) -> Result<(Vec<GroupSummary>, Vec<GroupComparison>)> {
    let mut rows = Vec::with_capacity(groups.len());
    for (name, v) in groups {
        if v.is_empty() {
            return Err(Error::domain(format!("group '{name}' is empty")));
        }
        let (mean, std) = mean_std(v);
        rows.push(GroupSummary { name: name.clone(), mean, std, n: v.len() });
    }
    let mut cmp = Vec::new();
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            let (t, dof, p_value) = welch_test(&groups[i].1, &groups[j].1)?;
            cmp.push(GroupComparison { a: groups[i].0.clone(), b: groups[j].0.clone(), t, dof, p_value });
        }
    }
    Ok((rows, cmp))
}

/// Material density of defects with one dipole magnitude p₀ and random
/// orientation: flat on [0, p₀].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsotropicDensity {
    pub p0: f64,
    pub height: f64,
}

pub fn isotropic_density(p0: f64) -> Result<IsotropicDensity> {
    if !(p0 > 0.0) || !p0.is_finite() {
        return Err(Error::domain("p0 must be finite and > 0"));
    }
    Ok(IsotropicDensity { p0, height: 1.0 / p0 })
}

impl IsotropicDensity {
    pub fn with_height(self, height: f64) -> Self {
        Self { height, ..self }
    }

    pub fn material(&self, p: f64) -> f64 {
        if (0.0..=self.p0).contains(&p) {
            self.height
        } else {
            0.0
        }
    }

    /// Measured image p·D(p).
    pub fn measured(&self, p: f64) -> f64 {
        p * self.material(p)
    }
}
