//! Inversion of a bias spectrum into defect hyperbolae.
//!
//! The chain is: a real-valued grid (defect self-energy, |S21| or a
//! contrast-enhanced trace), per-column local minima, a smoothed minima
//! density for vertex proposals, then largest-Δ₀-first Monte Carlo fits
//! that peel their points off the cloud.

pub mod candidates;
pub mod fit;
pub mod minima;
pub mod processing;

use serde::{Deserialize, Serialize};

pub use candidates::{propose_candidates, Candidate, CandidateConfig};
pub use fit::{fit_hyperbola_mc, peel_and_iterate, FitConfig, MinimaCloud, PeelResult, Rejection, TlsTrack};
pub use minima::{find_local_minima, smooth_minima, DensityGrid, MinimaConfig, MinimumPoint};
pub use processing::ProcessedGrid;

use crate::error::{Error, Result};
use crate::physics::{cooperativity, coupling_g, ResonatorModel, SweepWindow, TwoLevelSystem};
use crate::resonator::{fit_simple, FitMask, ResonatorFitResult};
use crate::spectrum::BiasSpectrum;
use crate::synth::{ensemble_average, observable};
use crate::units::{angular_to_hz, PLANCK};

/// Grid the minima are searched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MinimaSource {
    /// −Re of the defect self-energy through a resonator fit of the
    /// ensemble-averaged trace. Peaks sit exactly at the defect frequencies.
    SelfEnergy,
    /// Raw |S21|.
    Magnitude,
    /// Contrast-enhanced dB grid followed by a low-pass along frequency.
    Processed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub source: MinimaSource,
    /// Floor for zero-magnitude cells in the contrast grid (dB).
    pub floor_db: f64,
    /// Low-pass cutoff for the processed source (cycles per GHz).
    pub lowpass_cutoff_per_ghz: f64,
    pub minima: MinimaConfig,
    /// Density kernel widths in grid cells.
    pub sigma_f_cells: f64,
    pub sigma_bias_cells: f64,
    pub candidates: CandidateConfig,
    pub fit: FitConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            source: MinimaSource::SelfEnergy,
            floor_db: -140.0,
            lowpass_cutoff_per_ghz: 20_000.0,
            minima: MinimaConfig::default(),
            sigma_f_cells: 2.0,
            sigma_bias_cells: 0.6,
            candidates: CandidateConfig::default(),
            fit: FitConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.sigma_f_cells,
            self.sigma_bias_cells,
            self.fit.corridor_cells,
            self.fit.rss_max_cells2,
            self.candidates.tolerance_cells,
            self.lowpass_cutoff_per_ghz,
        ];
        if pos.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::config("kernel widths, corridor, residual bound and cutoff must be > 0"));
        }
        if !(self.minima.threshold_k >= 0.0) || !(self.minima.min_depth >= 0.0) {
            return Err(Error::config("minima thresholds must be >= 0"));
        }
        if self.fit.budget == 0 {
            return Err(Error::config("Monte Carlo budget must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.fit.min_coverage) {
            return Err(Error::config("min_coverage must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Extraction {
    /// Admitted tracks, Δ₀ descending.
    pub tracks: Vec<TlsTrack>,
    pub rejected: Vec<(TlsTrack, Rejection)>,
    pub n_minima: usize,
    pub n_candidates: usize,
    pub source: MinimaSource,
    pub resonator_fit: Option<ResonatorFitResult>,
    pub provenance: Vec<String>,
}

/// Builds the grid used for minima detection.
pub fn minima_grid(
    spec: &BiasSpectrum,
    cfg: &PipelineConfig,
) -> Result<(ProcessedGrid, MinimaSource, Option<ResonatorFitResult>)> {
    match cfg.source {
        MinimaSource::Magnitude => Ok((processing::magnitude_grid(spec), MinimaSource::Magnitude, None)),
        MinimaSource::Processed => {
            let avg = ensemble_average(spec)?;
            let contrast = processing::contrast_enhance(spec, &avg, cfg.floor_db)?;
            Ok((processing::lowpass(&contrast, cfg.lowpass_cutoff_per_ghz)?, MinimaSource::Processed, None))
        }
        MinimaSource::SelfEnergy => {
            let avg = ensemble_average(spec)?;
            let fit = fit_simple(&spec.freqs, &avg, &FitMask::default())?;
            if fit.ill_conditioned || !fit.converged {
                let mut g = processing::magnitude_grid(spec);
                g.provenance.push("resonator fit unusable; fell back to magnitude".into());
                return Ok((g, MinimaSource::Magnitude, Some(fit)));
            }
            Ok((processing::self_energy_grid(spec, &fit), MinimaSource::SelfEnergy, Some(fit)))
        }
    }
}

/// Runs the full extraction on one spectrum. Deterministic for a given
/// spectrum, configuration and seed.
pub fn extract(spec: &BiasSpectrum, cfg: &PipelineConfig, seed: u64) -> Result<Extraction> {
    cfg.validate()?;
    if spec.n_freq() < 3 || spec.n_bias() < 3 {
        return Err(Error::Dimension(format!(
            "extraction needs at least 3x3 cells, got {}x{}",
            spec.n_freq(),
            spec.n_bias()
        )));
    }
    let (grid, source, resonator_fit) = minima_grid(spec, cfg)?;
    let points = find_local_minima(&grid, &cfg.minima);
    let df = spec.freqs[1] - spec.freqs[0];
    let db = spec.biases[1] - spec.biases[0];
    let density = smooth_minima(&points, &spec.freqs, &spec.biases, cfg.sigma_f_cells * df, cfg.sigma_bias_cells * db);
    let band = (spec.freqs[0], spec.freqs[spec.n_freq() - 1]);
    let cands = propose_candidates(&density, band, &cfg.candidates);
    let mut cloud = MinimaCloud::new(&points, &spec.freqs, &spec.biases)?;
    let peel = peel_and_iterate(&mut cloud, &cands, &cfg.fit, seed);
    let mut provenance = grid.provenance;
    provenance.push(format!("{} minima, {} candidates, {} skipped", points.len(), cands.len(), peel.skipped));
    Ok(Extraction {
        tracks: peel.admitted,
        rejected: peel.rejected,
        n_minima: points.len(),
        n_candidates: cands.len(),
        source,
        resonator_fit,
        provenance,
    })
}

/// Track-to-truth pairing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthMatch {
    pub truth: usize,
    pub track: usize,
    /// |p_fit − p_true| / p_true
    pub pz_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub matches: Vec<TruthMatch>,
    pub n_truth: usize,
    pub n_tracks: usize,
    pub recall: f64,
    pub precision: f64,
}

impl MatchReport {
    pub fn median_pz_error(&self) -> Option<f64> {
        let mut e: Vec<f64> = self.matches.iter().map(|m| m.pz_rel_error).collect();
        if e.is_empty() {
            return None;
        }
        e.sort_by(f64::total_cmp);
        let n = e.len();
        Some(if n % 2 == 1 { e[n / 2] } else { 0.5 * (e[n / 2 - 1] + e[n / 2]) })
    }
}

/// Greedy one-to-one pairing of tracks and defects by vertex position.
/// A pair qualifies when the vertex frequencies differ by at most `tol_f`
/// (Hz) and the vertex biases by at most `tol_bias` (V/m).
pub fn match_tracks(tracks: &[TlsTrack], truth: &[TwoLevelSystem], tol_f: f64, tol_bias: f64) -> MatchReport {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (ti, t) in truth.iter().enumerate() {
        let (tf, tb) = (t.delta0 / PLANCK, t.vertex_bias());
        for (ki, k) in tracks.iter().enumerate() {
            let d = ((k.vertex_frequency() - tf).abs() / tol_f).max((k.vertex_bias - tb).abs() / tol_bias);
            if d <= 1.0 {
                pairs.push((d, ti, ki));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut used_t = vec![false; truth.len()];
    let mut used_k = vec![false; tracks.len()];
    let mut matches = Vec::new();
    for (_, ti, ki) in pairs {
        if used_t[ti] || used_k[ki] {
            continue;
        }
        used_t[ti] = true;
        used_k[ki] = true;
        let p = truth[ti].pz.abs();
        matches.push(TruthMatch { truth: ti, track: ki, pz_rel_error: (tracks[ki].pz - p).abs() / p });
    }
    let frac = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    MatchReport {
        recall: frac(matches.len(), truth.len()),
        precision: frac(matches.len(), tracks.len()),
        n_truth: truth.len(),
        n_tracks: tracks.len(),
        matches,
    }
}

/// Bias steps each arm of a resolvable defect must span inside the window.
pub const ARM_COLUMNS: usize = 3;

fn arms_in_window(t: &TwoLevelSystem, window: &SweepWindow) -> bool {
    let (b0, b1) = (window.bias_min, window.bias_max);
    let f_top = window.f_max();
    let ev = t.vertex_bias();
    let step = window.bias_step();
    (1..=ARM_COLUMNS).all(|j| {
        [-1.0, 1.0].iter().all(|s| {
            let e = ev + s * j as f64 * step;
            e >= b0 && e <= b1 && angular_to_hz(t.angular_frequency(e)) <= f_top
        })
    })
}

/// Indices of defects a sweep can resolve: vertex and Δ₀ inside the window
/// with the curve staying in the window for [`ARM_COLUMNS`] bias steps on
/// both sides, cooperativity ≥ 1 at the vertex, and no other defect within
/// `sep_linewidths` linewidths of the vertex frequency at the vertex bias.
pub fn resolvable(
    ensemble: &[TwoLevelSystem],
    res: &ResonatorModel,
    window: &SweepWindow,
    sep_linewidths: f64,
) -> Vec<usize> {
    let e_rms = res.zero_point_field();
    let kappa = res.kappa_total();
    let vis: Vec<usize> = (0..ensemble.len()).filter(|&i| observable(&ensemble[i], window)).collect();
    vis.into_iter()
        .filter(|&i| {
            let t = &ensemble[i];
            if !arms_in_window(t, window) {
                return false;
            }
            let ev = t.vertex_bias();
            let g = coupling_g(t, ev, e_rms);
            if !cooperativity(g, t.gamma, kappa).is_ok_and(|c| c >= 1.0) {
                return false;
            }
            let w = t.angular_frequency(ev);
            ensemble.iter().enumerate().all(|(j, u)| {
                j == i || u.pz == 0.0 || {
                    let lw = t.gamma.max(u.gamma);
                    (u.angular_frequency(ev) - w).abs() > sep_linewidths * lw
                }
            })
        })
        .collect()
}
