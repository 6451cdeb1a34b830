//! Command-line front end. Exit codes: 0 success, 2 configuration error,
//! 3 data error, 4 non-convergence.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::io::{self, Manifest, SpectrumMeta, TrackRecord, TruthRecord, TOOLKIT_VERSION};
use crate::pipeline::{self, MatchReport};
use crate::resonator::{fit_simple, fit_with_background, FitMask, ResonatorFitResult};
use crate::stats::{self, DipoleHistogram, DistributionFit, GroupComparison, GroupSummary, MeanSummary, SensitivityRow};
use crate::synth;
use crate::units::GHZ;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NONCONVERGENCE: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::NonConvergence(_) => EXIT_NONCONVERGENCE,
        _ => EXIT_DATA,
    }
}

#[derive(Debug, Parser)]
#[command(name = "tlspec", version, about = "Simulate and analyze dc-bias defect spectroscopy sweeps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// TOML configuration. Relative paths not found are looked up in
    /// $TLSPEC_CONFIG_DIR; without this flag $TLSPEC_CONFIG_DIR/tlspec.toml
    /// or the built-in defaults are used.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResonatorModelKind {
    Simple,
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GroupBy {
    /// Pool every track file into one dataset.
    None,
    /// One group per track file, named by `NAME=PATH` or the file stem.
    File,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a defect ensemble and render its bias sweep.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Output directory for spectrum.tlsspec, manifest.json and config.toml.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Extract hyperbola tracks from a spectrum.
    Extract {
        spectrum: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Ground truth; defaults to manifest.json beside the spectrum.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Track-list CSV to write.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Fit the ensemble-averaged trace of a spectrum.
    FitResonator {
        spectrum: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "simple")]
        model: ResonatorModelKind,
        #[arg(long)]
        f_min_ghz: Option<f64>,
        #[arg(long)]
        f_max_ghz: Option<f64>,
        /// JSON record to write.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Dipole statistics over one or more track lists.
    Stats {
        /// Track files, optionally as NAME=PATH.
        #[arg(required = true)]
        tracks: Vec<String>,
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "none")]
        group_by: GroupBy,
        /// Add the missing-defect sensitivity table.
        #[arg(long)]
        sensitivity: bool,
        /// Output directory for the report and plot data.
        #[arg(long, short)]
        out: PathBuf,
    },
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(msg) => {
            print!("{msg}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match ExperimentConfig::resolve_path(common.config.as_deref()) {
        Some(p) => ExperimentConfig::load(&p).map_err(|e| match e {
            Error::Io { path, source } => Error::config(format!("cannot read {path}: {source}")),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Runs one command; returns the summary printed on success.
pub fn run(cmd: Command) -> Result<String> {
    match cmd {
        Command::Simulate { common, out } => simulate(&load_config(&common)?, &out),
        Command::Extract { spectrum, common, manifest, out } => {
            extract(&load_config(&common)?, &spectrum, manifest.as_deref(), &out)
        }
        Command::FitResonator { spectrum, common, model, f_min_ghz, f_max_ghz, out } => {
            let mask = FitMask { f_min: f_min_ghz.map(|f| f * GHZ), f_max: f_max_ghz.map(|f| f * GHZ) };
            fit_resonator(&load_config(&common)?, &spectrum, model, mask, &out)
        }
        Command::Stats { tracks, common, group_by, sensitivity, out } => {
            stats_cmd(&load_config(&common)?, &tracks, group_by, sensitivity, &out)
        }
    }
}

fn sidecar_config(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".config.toml");
    out.with_file_name(name)
}

pub fn simulate(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let window = cfg.window.window()?;
    let res = cfg.resonator.model()?;
    let material = cfg.material.spec(&window)?;
    let noise = cfg.noise.noise()?;
    let ensemble = synth::sample_ensemble(&material, &res, cfg.seed)?;
    let spectrum = synth::generate_spectrum(&ensemble, &res, &window, &noise, cfg.seed)?;
    let resolvable = pipeline::resolvable(&ensemble, &res, &window, cfg.truth.sep_linewidths);
    let observable: Vec<TruthRecord> = ensemble
        .iter()
        .enumerate()
        .filter(|(_, t)| synth::observable(t, &window))
        .map(|(i, t)| TruthRecord::new(t, resolvable.binary_search(&i).is_ok()))
        .collect();
    let hash = cfg.hash();
    let manifest = Manifest {
        toolkit_version: TOOLKIT_VERSION.into(),
        config_sha256: hash.clone(),
        seed: cfg.seed,
        n_ensemble: ensemble.len(),
        window,
        resonator: res,
        observable,
    };
    let meta = SpectrumMeta { seed: Some(cfg.seed), config_sha256: Some(hash), resonator: Some(res) };
    io::write_spectrum(&out.join("spectrum.tlsspec"), &spectrum, &meta)?;
    io::write_json(&out.join("manifest.json"), &manifest)?;
    io::write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    Ok(format!(
        "simulated {} defects ({} with vertex in window, {} resolvable) on a {}x{} grid into {}\n",
        ensemble.len(),
        manifest.observable.len(),
        resolvable.len(),
        spectrum.n_freq(),
        spectrum.n_bias(),
        out.display()
    ))
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Recall over resolvable defects, precision over all defects with a vertex
/// in the window.
pub fn truth_report(tracks: &[pipeline::TlsTrack], manifest: &Manifest, cfg: &ExperimentConfig) -> MatchReport {
    let w = &manifest.window;
    let (tf, tb) = (cfg.truth.match_f_cells * w.freq_step(), cfg.truth.match_bias_cells * w.bias_step());
    let mut rep = pipeline::match_tracks(tracks, &manifest.resolvable(), tf, tb);
    rep.precision = pipeline::match_tracks(tracks, &manifest.observable_tls(), tf, tb).precision;
    rep
}

pub fn extract(cfg: &ExperimentConfig, spectrum: &Path, manifest: Option<&Path>, out: &Path) -> Result<String> {
    let (spec, _) = io::read_spectrum(spectrum)?;
    let ex = pipeline::extract(&spec, &cfg.pipeline, cfg.seed)?;
    let implicit = spectrum.with_file_name("manifest.json");
    let manifest = match manifest {
        Some(p) => Some(io::read_manifest(p)?),
        None if implicit.exists() => Some(io::read_manifest(&implicit)?),
        None => None,
    };
    let report = manifest.as_ref().map(|m| truth_report(&ex.tracks, m, cfg));
    let rows: Vec<TrackRecord> = ex.tracks.iter().map(TrackRecord::from).collect();
    let bytes = io::encode_tracks(&rows, &cfg.hash(), &file_sha256(spectrum)?, report.as_ref())?;
    io::write_atomic(out, &bytes)?;
    io::write_atomic(&sidecar_config(out), cfg.to_toml().as_bytes())?;
    let mut msg = format!(
        "{} tracks ({} minima, {} candidates, {} rejected) written to {}\n",
        rows.len(),
        ex.n_minima,
        ex.n_candidates,
        ex.rejected.len(),
        out.display()
    );
    if let Some(r) = report {
        let _ = writeln!(msg, "recall {:.3} precision {:.3} over {} resolvable defects", r.recall, r.precision, r.n_truth);
    }
    Ok(msg)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResonatorRecord {
    pub toolkit_version: String,
    pub config_sha256: String,
    pub spectrum_sha256: String,
    pub model: ResonatorModelKind,
    pub fit: ResonatorFitResult,
    /// 1/Q_i of the fit minus the configured bare internal loss γ_c/ω_c.
    pub excess_internal_loss: f64,
}

pub fn fit_resonator(
    cfg: &ExperimentConfig,
    spectrum: &Path,
    model: ResonatorModelKind,
    mask: FitMask,
    out: &Path,
) -> Result<String> {
    let (spec, _) = io::read_spectrum(spectrum)?;
    let avg = synth::ensemble_average(&spec)?;
    let fit = match model {
        ResonatorModelKind::Simple => fit_simple(&spec.freqs, &avg, &mask)?,
        ResonatorModelKind::Background => fit_with_background(&spec.freqs, &avg, &mask)?,
    };
    let res = cfg.resonator.model()?;
    let record = ResonatorRecord {
        toolkit_version: TOOLKIT_VERSION.into(),
        config_sha256: cfg.hash(),
        spectrum_sha256: file_sha256(spectrum)?,
        model,
        fit: fit.clone(),
        excess_internal_loss: 1.0 / fit.q_i - 1.0 / res.q_internal(),
    };
    io::write_json(out, &record)?;
    io::write_atomic(&sidecar_config(out), cfg.to_toml().as_bytes())?;
    if !fit.converged || fit.ill_conditioned {
        return Err(Error::NonConvergence(format!(
            "resonator fit {} (record written to {})",
            if fit.ill_conditioned { "is ill-conditioned" } else { "did not converge" },
            out.display()
        )));
    }
    Ok(format!(
        "f0 {:.6} GHz  Q {:.1}  Q_i {:.1}  Q_e {:.1}  phi {:.4}\n",
        fit.f0 / GHZ,
        fit.q_total,
        fit.q_i,
        fit.q_e,
        fit.phi
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetReport {
    pub name: String,
    pub n: usize,
    pub measured_mean: f64,
    pub measured_std: f64,
    pub material: MeanSummary,
    pub p0_per_j_m3: f64,
    pub tan_delta: f64,
    pub fits: Vec<DistributionFit>,
    /// Least-squares slope of the material histogram (1/(J·m³·D²)); a
    /// positive value is incompatible with isotropic defects.
    pub material_slope: f64,
    pub isotropic_p0_debye: f64,
    pub sensitivity: Option<Vec<SensitivityRow>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsReport {
    pub toolkit_version: String,
    pub config_sha256: String,
    pub inputs: Vec<(String, String)>,
    pub datasets: Vec<DatasetReport>,
    pub groups: Option<(Vec<GroupSummary>, Vec<GroupComparison>)>,
}

fn mle_fits(values: &[f64]) -> Vec<DistributionFit> {
    [stats::mle_modified_gaussian, stats::mle_truncated_normal, stats::mle_gamma]
        .iter()
        .filter_map(|f| f(values).ok())
        .collect()
}

pub fn dataset_report(name: &str, values: &[f64], cfg: &ExperimentConfig, sensitivity: bool) -> Result<(DatasetReport, DipoleHistogram)> {
    let geometry = cfg.geometry()?;
    let n = values.len();
    let measured_mean = values.iter().sum::<f64>() / n as f64;
    let measured_std = (values.iter().map(|p| (p - measured_mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let edges = match (&cfg.stats.edges_debye, cfg.stats.bins) {
        (Some(e), _) => Some(e.clone()),
        (None, Some(b)) => {
            let top = values.iter().copied().fold(0.0, f64::max);
            Some((0..=b).map(|i| top * i as f64 / b as f64).collect())
        }
        (None, None) => None,
    };
    let hist = DipoleHistogram::measured(values, edges, Some(geometry))?;
    let material_slope = hist.to_material().map(|m| m.slope()).unwrap_or(f64::NAN);
    let report = DatasetReport {
        name: name.to_string(),
        n,
        measured_mean,
        measured_std,
        material: stats::material_mean_summary(values, cfg.stats.systematic_frac)?,
        p0_per_j_m3: stats::material_constant(values, &geometry)?,
        tan_delta: stats::loss_from_dipoles(values, &geometry, cfg.eps_r())?,
        fits: mle_fits(values),
        material_slope,
        isotropic_p0_debye: cfg.stats.isotropic_p0_debye,
        sensitivity: if sensitivity {
            Some(stats::missing_tls_sensitivity(values, &cfg.stats.sensitivity_percentiles, &cfg.stats.sensitivity_factors)?)
        } else {
            None
        },
    };
    Ok((report, hist))
}

fn provenance_line(cfg: &ExperimentConfig) -> String {
    format!("# tlspec {TOOLKIT_VERSION} config_sha256 {}\n", cfg.hash())
}

fn table(cfg: &ExperimentConfig, header: &[&str], rows: &[Vec<f64>]) -> Result<Vec<u8>> {
    let mut out = provenance_line(cfg).into_bytes();
    out.extend(io::encode_table(header, rows)?);
    Ok(out)
}

fn histogram_rows(h: &DipoleHistogram) -> Vec<Vec<f64>> {
    let mat = h.to_material().ok();
    let (c, w) = (h.centers(), h.widths());
    (0..c.len())
        .map(|i| {
            vec![
                h.edges[i],
                h.edges[i + 1],
                c[i],
                (h.counts[i] * w[i]).round(),
                h.counts[i],
                mat.as_ref().map_or(f64::NAN, |m| m.counts[i]),
            ]
        })
        .collect()
}

/// Fitted densities scaled to counts per Debye, and the isotropic overlay
/// in both spaces, on a uniform grid.
fn overlay_rows(d: &DatasetReport, h: &DipoleHistogram) -> Vec<Vec<f64>> {
    let top = h.edges[h.edges.len() - 1].max(d.isotropic_p0_debye) * 1.05;
    let n = d.n as f64;
    let p0 = d.isotropic_p0_debye;
    let iso = stats::isotropic_density(p0).expect("validated p0");
    // measured image p·h on [0, p0] holding n defects
    let iso_meas = iso.with_height(2.0 * n / (p0 * p0));
    let material_total = h.to_material().map(|m| m.counts.iter().zip(m.widths()).map(|(c, w)| c * w).sum::<f64>()).unwrap_or(f64::NAN);
    let iso_mat = iso.with_height(material_total / p0);
    (0..=400)
        .map(|i| {
            let p = top * i as f64 / 400.0;
            let mut row = vec![p];
            row.extend(d.fits.iter().map(|f| n * f.log_pdf(p).exp()));
            row.push(iso_meas.measured(p));
            row.push(iso_mat.material(p));
            row
        })
        .collect()
}

fn render_text(report: &StatsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "tlspec {} dipole statistics (config {})", report.toolkit_version, &report.config_sha256[..12]);
    for d in &report.datasets {
        let _ = writeln!(s, "\n[{}] n = {}", d.name, d.n);
        let _ = writeln!(s, "  measured mean        {:.3} D   std {:.3} D", d.measured_mean, d.measured_std);
        let m = &d.material;
        let _ = writeln!(
            s,
            "  material mean        {:.3} ± {:.3} (stat) ± {:.3} (sys) D   std {:.3} D",
            m.mean, m.stderr, m.systematic, m.std
        );
        let _ = writeln!(s, "  P0                   {:.3e} 1/(J m^3)", d.p0_per_j_m3);
        let _ = writeln!(s, "  tan delta            {:.3e}", d.tan_delta);
        let _ = writeln!(s, "  material slope       {:.3e}{}", d.material_slope, if d.material_slope > 0.0 { "  (rises: not isotropic)" } else { "" });
        for f in &d.fits {
            let _ = writeln!(
                s,
                "  fit {:<18} ({:.3} ± {:.3}, {:.3} ± {:.3})  mean {:.3} D  loglik {:.2}",
                format!("{:?}", f.family),
                f.params[0],
                f.stderr[0],
                f.params[1],
                f.stderr[1],
                f.mean(),
                f.loglik
            );
        }
        if let Some(rows) = &d.sensitivity {
            let _ = writeln!(s, "  sensitivity: percentile threshold M raw_mean material_mean");
            for r in rows {
                let _ = writeln!(s, "    {:>5.1} {:>7.3} {:>4.1} {:>7.3} {:>7.3}", r.percentile, r.threshold, r.m_factor, r.raw_mean, r.material_mean);
            }
        }
    }
    if let Some((rows, cmp)) = &report.groups {
        let _ = writeln!(s, "\ngroup                 mean    std     n");
        for r in rows {
            let _ = writeln!(s, "{:<20} {:>6.3} {:>6.3} {:>5}", r.name, r.mean, r.std, r.n);
        }
        for c in cmp {
            let _ = writeln!(s, "{} vs {}: Welch t = {:.3}, dof = {:.1}, p = {:.4}", c.a, c.b, c.t, c.dof, c.p_value);
        }
    }
    s
}

fn split_named(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((name, path)) if !name.is_empty() && !Path::new(arg).exists() => (name.to_string(), PathBuf::from(path)),
        _ => {
            let p = PathBuf::from(arg);
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| arg.to_string());
            (stem, p)
        }
    }
}

pub fn stats_cmd(cfg: &ExperimentConfig, tracks: &[String], group_by: GroupBy, sensitivity: bool, out: &Path) -> Result<String> {
    let mut inputs = Vec::new();
    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    for arg in tracks {
        let (name, path) = split_named(arg);
        let rows = io::read_tracks(&path)?;
        inputs.push((name.clone(), file_sha256(&path)?));
        groups.push((name, rows.iter().map(|r| r.pz_debye).collect()));
    }
    let pooled: Vec<f64> = groups.iter().flat_map(|g| g.1.iter().copied()).collect();
    if pooled.is_empty() {
        return Err(Error::data("no tracks in the input files"));
    }
    let mut datasets = vec![("all".to_string(), pooled)];
    if group_by == GroupBy::File {
        datasets.extend(groups.iter().filter(|g| !g.1.is_empty()).cloned());
    }
    let mut reports = Vec::new();
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    for (name, values) in &datasets {
        let (rep, hist) = dataset_report(name, values, cfg, sensitivity)?;
        let prefix = if name == "all" { String::new() } else { format!("{name}_") };
        files.push((
            format!("{prefix}histogram.csv"),
            table(cfg, &["lo_debye", "hi_debye", "center_debye", "count", "h_per_debye", "d_per_j_m3_debye"], &histogram_rows(&hist))?,
        ));
        let mut header = vec!["pz_debye".to_string()];
        header.extend(rep.fits.iter().map(|f| format!("{}_counts_per_debye", serde_json::to_value(f.family).unwrap().as_str().unwrap())));
        header.push("isotropic_measured_counts_per_debye".into());
        header.push("isotropic_material_per_j_m3_debye".into());
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        files.push((format!("{prefix}fits.csv"), table(cfg, &header, &overlay_rows(&rep, &hist))?));
        if let Some(rows) = &rep.sensitivity {
            let t: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.percentile, r.threshold, r.m_factor, r.raw_mean, r.material_mean]).collect();
            files.push((format!("{prefix}sensitivity.csv"), table(cfg, &["percentile", "threshold_debye", "m_factor", "raw_mean_debye", "material_mean_debye"], &t)?));
        }
        reports.push(rep);
    }
    let group_table = if group_by == GroupBy::File && groups.len() > 1 { Some(stats::subset_summary(&groups)?) } else { None };
    let report = StatsReport {
        toolkit_version: TOOLKIT_VERSION.into(),
        config_sha256: cfg.hash(),
        inputs,
        datasets: reports,
        groups: group_table,
    };
    let text = render_text(&report);
    for (name, bytes) in &files {
        io::write_atomic(&out.join(name), bytes)?;
    }
    io::write_json(&out.join("report.json"), &report)?;
    io::write_atomic(&out.join("report.txt"), text.as_bytes())?;
    io::write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    Ok(text)
}
