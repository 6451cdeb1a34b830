//! Experiment configuration. The TOML schema uses unit-bearing keys
//! (`f0_ghz`, `bias_min_kvpm`, ...); everything is converted to SI by the
//! accessors here. Rates quoted in Hz-like units are angular rates divided
//! by 2π.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::physics::{ResonatorModel, SweepWindow};
use crate::pipeline::PipelineConfig;
use crate::stats::Geometry;
use crate::synth::{Abundance, DipoleFamily, MaterialSpec, NoiseConfig, Telegraph, VoltageNoise};
use crate::units::{hz_to_angular, hz_to_joule, GHZ, KHZ, KV_PER_M, MHZ, NM};

/// Environment variable naming the default configuration directory.
pub const CONFIG_DIR_ENV: &str = "TLSPEC_CONFIG_DIR";
/// File looked up in the configuration directory when no path is given.
pub const DEFAULT_CONFIG_NAME: &str = "tlspec.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub material: MaterialConfig,
    pub resonator: ResonatorConfig,
    pub window: WindowConfig,
    pub noise: NoiseSection,
    pub pipeline: PipelineConfig,
    pub stats: StatsConfig,
    pub truth: TruthConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            material: MaterialConfig::default(),
            resonator: ResonatorConfig::default(),
            window: WindowConfig::default(),
            noise: NoiseSection::default(),
            pipeline: PipelineConfig::default(),
            stats: StatsConfig::default(),
            truth: TruthConfig::default(),
        }
    }
}

/// Dipole family with Debye-valued parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DipoleSection {
    #[serde(alias = "truncated-normal")]
    Gaussian { mu_debye: f64, sigma_debye: f64 },
    IsotropicSingleP0 { p0_debye: f64 },
    Gamma { alpha: f64, beta_per_debye: f64 },
    Flat { lo_debye: f64, hi_debye: f64 },
}

impl DipoleSection {
    pub fn family(&self) -> DipoleFamily {
        match *self {
            DipoleSection::Gaussian { mu_debye, sigma_debye } => DipoleFamily::Gaussian { mu: mu_debye, sigma: sigma_debye },
            DipoleSection::IsotropicSingleP0 { p0_debye } => DipoleFamily::IsotropicSingleP0 { p0: p0_debye },
            DipoleSection::Gamma { alpha, beta_per_debye } => DipoleFamily::Gamma { alpha, beta: beta_per_debye },
            DipoleSection::Flat { lo_debye, hi_debye } => DipoleFamily::Flat { lo: lo_debye, hi: hi_debye },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaterialConfig {
    pub dipole: DipoleSection,
    /// Material constant P₀ (1/(J·m³)).
    pub p0_per_j_m3: Option<f64>,
    /// Fixed ensemble size; replaces the density when set.
    pub count: Option<usize>,
    pub delta0_min_ghz: f64,
    pub delta0_max_ghz: f64,
    /// Asymmetry bound Δ_max/h. Defaults to ten times the largest bias shift.
    pub delta_max_ghz: Option<f64>,
    pub gamma_tls_khz: f64,
}

impl Default for MaterialConfig {
    fn default() -> Self {
        Self {
            dipole: DipoleSection::Gaussian { mu_debye: 2.6, sigma_debye: 1.6 },
            p0_per_j_m3: Some(1e44),
            count: None,
            delta0_min_ghz: 0.5,
            delta0_max_ghz: 10.0,
            delta_max_ghz: None,
            gamma_tls_khz: 10.0,
        }
    }
}

impl MaterialConfig {
    pub fn spec(&self, window: &SweepWindow) -> Result<MaterialSpec> {
        let abundance = match (self.count, self.p0_per_j_m3) {
            (Some(n), _) => Abundance::Count(n),
            (None, Some(p0)) => Abundance::Density(p0),
            (None, None) => return Err(Error::config("material: set p0_per_j_m3 or count")),
        };
        let family = self.dipole.family();
        family.validate()?;
        let delta_max = match self.delta_max_ghz {
            Some(d) => hz_to_joule(d * GHZ),
            None => MaterialSpec::default_delta_max(&family, window),
        };
        let spec = MaterialSpec {
            family,
            abundance,
            delta_max,
            delta0_band: (hz_to_joule(self.delta0_min_ghz * GHZ), hz_to_joule(self.delta0_max_ghz * GHZ)),
            gamma_tls: hz_to_angular(self.gamma_tls_khz * KHZ),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResonatorConfig {
    pub f0_ghz: f64,
    pub kappa_c_mhz: f64,
    pub gamma_c_mhz: f64,
    pub volume_m3: f64,
    pub thickness_nm: f64,
    pub eps_r: f64,
}

impl Default for ResonatorConfig {
    fn default() -> Self {
        Self { f0_ghz: 5.0, kappa_c_mhz: 1.0, gamma_c_mhz: 0.5, volume_m3: 1.11e-17, thickness_nm: 20.0, eps_r: 10.0 }
    }
}

impl ResonatorConfig {
    pub fn model(&self) -> Result<ResonatorModel> {
        ResonatorModel::new(
            self.f0_ghz * GHZ,
            hz_to_angular(self.kappa_c_mhz * MHZ),
            hz_to_angular(self.gamma_c_mhz * MHZ),
            self.volume_m3,
            self.thickness_nm * NM,
            self.eps_r,
        )
        .map_err(|e| Error::config(format!("resonator: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    pub f_center_ghz: f64,
    pub f_span_mhz: f64,
    pub bias_min_kvpm: f64,
    pub bias_max_kvpm: f64,
    pub n_freq: usize,
    pub n_bias: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { f_center_ghz: 5.0, f_span_mhz: 20.0, bias_min_kvpm: -90.0, bias_max_kvpm: 90.0, n_freq: 2000, n_bias: 400 }
    }
}

impl WindowConfig {
    pub fn window(&self) -> Result<SweepWindow> {
        SweepWindow::new(
            self.f_center_ghz * GHZ,
            self.f_span_mhz * MHZ,
            self.bias_min_kvpm * KV_PER_M,
            self.bias_max_kvpm * KV_PER_M,
            self.n_freq,
            self.n_bias,
        )
        .map_err(|e| Error::config(format!("window: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    /// Std of the Gaussian noise on each quadrature of S21.
    pub meas_sigma: f64,
    /// Uniform defect frequency noise σ/2π. Exclusive with `bias_noise_mv`.
    pub tls_sigma_khz: Option<f64>,
    /// Bias-voltage noise amplitude.
    pub bias_noise_mv: Option<f64>,
    pub broadening_samples: usize,
    pub telegraph_rate_hz: Option<f64>,
    pub telegraph_jump_khz: f64,
    pub drift_hz_per_sqrt_hour: f64,
    pub cutoff_linewidths: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        let d = NoiseConfig::default();
        Self {
            meas_sigma: 5e-4,
            tls_sigma_khz: None,
            bias_noise_mv: None,
            broadening_samples: d.broadening_samples,
            telegraph_rate_hz: None,
            telegraph_jump_khz: 0.0,
            drift_hz_per_sqrt_hour: d.drift_sigma,
            cutoff_linewidths: d.cutoff_linewidths,
        }
    }
}

impl NoiseSection {
    pub fn noise(&self) -> Result<NoiseConfig> {
        let voltage = match (self.tls_sigma_khz, self.bias_noise_mv) {
            (None, None) => VoltageNoise::FromEnsemble,
            (Some(s), None) => VoltageNoise::Uniform { sigma: hz_to_angular(s * KHZ) },
            (None, Some(v)) => VoltageNoise::FromBiasNoise { delta_v: v * 1e-3 },
            _ => return Err(Error::config("noise: tls_sigma_khz and bias_noise_mv are exclusive")),
        };
        let n = NoiseConfig {
            meas_sigma: self.meas_sigma,
            voltage,
            broadening_samples: self.broadening_samples,
            telegraph: self
                .telegraph_rate_hz
                .map(|r| Telegraph { switch_rate: r, jump_sigma: self.telegraph_jump_khz * KHZ }),
            drift_sigma: self.drift_hz_per_sqrt_hour,
            cutoff_linewidths: self.cutoff_linewidths,
        };
        n.validate().map_err(|e| Error::config(format!("noise: {e}")))?;
        Ok(n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsConfig {
    /// Explicit histogram edges; overrides `bins`.
    pub edges_debye: Option<Vec<f64>>,
    /// Number of equal-width bins on [0, max]; Freedman–Diaconis when unset.
    pub bins: Option<usize>,
    /// Permittivity for the loss tangent; the resonator's when unset.
    pub eps_r: Option<f64>,
    /// Relative systematic error on means (film thickness).
    pub systematic_frac: f64,
    pub isotropic_p0_debye: f64,
    pub sensitivity_percentiles: Vec<f64>,
    pub sensitivity_factors: Vec<f64>,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            edges_debye: None,
            bins: None,
            eps_r: None,
            systematic_frac: 0.1,
            isotropic_p0_debye: 4.5,
            sensitivity_percentiles: vec![10.0, 20.0],
            sensitivity_factors: (1..=10).map(f64::from).collect(),
        }
    }
}

/// Ground-truth matching used when a manifest accompanies a spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TruthConfig {
    pub match_f_cells: f64,
    pub match_bias_cells: f64,
    /// Minimum vertex separation, in linewidths, for a defect to count as
    /// resolvable.
    pub sep_linewidths: f64,
}

impl Default for TruthConfig {
    fn default() -> Self {
        Self { match_f_cells: 3.0, match_bias_cells: 3.0, sep_linewidths: 3.0 }
    }
}

impl ExperimentConfig {
    /// Parses TOML. Schema violations carry the line and column.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Resolves a configuration path: an explicit path is used as given
    /// unless it does not exist and is relative, in which case it is looked
    /// up in `$TLSPEC_CONFIG_DIR`. Without a path, `tlspec.toml` in that
    /// directory is used when present, else the defaults.
    pub fn resolve_path(explicit: Option<&Path>) -> Option<PathBuf> {
        let dir = std::env::var_os(CONFIG_DIR_ENV).map(PathBuf::from);
        match explicit {
            Some(p) if p.exists() || p.is_absolute() => Some(p.to_path_buf()),
            Some(p) => Some(dir.map(|d| d.join(p)).filter(|q| q.exists()).unwrap_or_else(|| p.to_path_buf())),
            None => dir.map(|d| d.join(DEFAULT_CONFIG_NAME)).filter(|q| q.exists()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let window = self.window.window()?;
        self.resonator.model()?;
        self.material.spec(&window)?;
        self.noise.noise()?;
        self.pipeline.validate()?;
        let s = &self.stats;
        if !(s.systematic_frac >= 0.0) || !(s.isotropic_p0_debye > 0.0) {
            return Err(Error::config("stats: systematic_frac must be >= 0 and isotropic_p0_debye > 0"));
        }
        if s.eps_r.is_some_and(|e| !(e > 0.0)) {
            return Err(Error::config("stats: eps_r must be > 0"));
        }
        if s.bins == Some(0) {
            return Err(Error::config("stats: bins must be > 0"));
        }
        if s.sensitivity_percentiles.iter().any(|p| !(0.0..=100.0).contains(p))
            || s.sensitivity_factors.iter().any(|m| !(*m >= 1.0))
        {
            return Err(Error::config("stats: percentiles must lie in [0, 100] and factors be >= 1"));
        }
        let t = &self.truth;
        if [t.match_f_cells, t.match_bias_cells, t.sep_linewidths].iter().any(|v| !(*v > 0.0)) {
            return Err(Error::config("truth: tolerances must be > 0"));
        }
        Ok(())
    }

    /// Canonical TOML of the fully resolved configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of [`Self::to_toml`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::from_sweep(&self.resonator.model()?, &self.window.window()?)
    }

    pub fn eps_r(&self) -> f64 {
        self.stats.eps_r.unwrap_or(self.resonator.eps_r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = ExperimentConfig::from_toml("seed = 7\n[window]\nn_freq = 100\nn_bias = 50\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.window.n_freq, 100);
        assert_eq!(c.resonator, ResonatorConfig::default());
    }

    #[test]
    fn unknown_key_reports_line() {
        let e = ExperimentConfig::from_toml("seed = 1\n\n[resonator]\nf0_hz = 5e9\n").unwrap_err();
        let msg = e.to_string();
        assert!(matches!(e, Error::Config(_)));
        assert!(msg.contains("f0_hz") && msg.contains("line 4"), "{msg}");
    }

    #[test]
    fn dipole_families_parse() {
        let c = ExperimentConfig::from_toml("[material.dipole]\nfamily = \"gamma\"\nalpha = 5.15\nbeta_per_debye = 1.72\n").unwrap();
        assert_eq!(c.material.dipole.family(), DipoleFamily::Gamma { alpha: 5.15, beta: 1.72 });
        let t = ExperimentConfig::from_toml("[material.dipole]\nfamily = \"truncated-normal\"\nmu_debye = 1\nsigma_debye = 2\n").unwrap();
        assert_eq!(t.material.dipole.family(), DipoleFamily::Gaussian { mu: 1.0, sigma: 2.0 });
    }

    #[test]
    fn semantic_errors() {
        assert!(ExperimentConfig::from_toml("[material]\np0_per_j_m3 = -1\n").is_err());
        assert!(ExperimentConfig::from_toml("[noise]\ntls_sigma_khz = 1\nbias_noise_mv = 1\n").is_err());
        assert!(ExperimentConfig::from_toml("[window]\nn_bias = 1\n").is_err());
        assert!(ExperimentConfig::from_toml("[resonator]\nthickness_nm = -1\n").is_err());
        assert!(ExperimentConfig::from_toml("seed = \"x\"\n").is_err());
    }

    #[test]
    fn count_replaces_density() {
        let c = ExperimentConfig::from_toml("[material]\ncount = 3\n").unwrap();
        let spec = c.material.spec(&c.window.window().unwrap()).unwrap();
        assert_eq!(spec.abundance, Abundance::Count(3));
    }

    #[test]
    fn conversions_to_si() {
        let c = ExperimentConfig::default();
        let w = c.window.window().unwrap();
        assert_eq!(w.bias_max, 90e3);
        assert!((w.f_span - 20e6).abs() < 1e-6);
        let r = c.resonator.model().unwrap();
        assert!((r.thickness - 20e-9).abs() < 1e-20);
        let noise = NoiseSection { bias_noise_mv: Some(2.0), ..Default::default() }.noise().unwrap();
        assert_eq!(noise.voltage, VoltageNoise::FromBiasNoise { delta_v: 2e-3 });
    }
}
