use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::candidates::Candidate;
use super::minima::MinimumPoint;
use crate::error::{Error, Result};
use crate::optim::{levenberg_marquardt, LmOptions};
use crate::units::PLANCK as H;

/// One extracted hyperbola.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TlsTrack {
    /// Tunneling energy Δ₀ (J).
    pub delta0: f64,
    /// Bias where the asymmetry vanishes (V/m).
    pub vertex_bias: f64,
    /// Dipole moment magnitude along the field (C·m).
    pub pz: f64,
    /// Mean squared frequency residual of the assigned points (Hz²).
    pub rss: f64,
    pub n_points: usize,
    pub crosses_vertex: bool,
    pub converged: bool,
    /// Assigned points over visible in-window columns.
    pub coverage: f64,
    /// Assigned (bias V/m, frequency Hz) points.
    pub points: Vec<[f64; 2]>,
}

impl TlsTrack {
    pub fn vertex_frequency(&self) -> f64 {
        self.delta0 / H
    }

    /// Frequency of the fitted hyperbola at a bias field.
    pub fn frequency_at(&self, bias: f64) -> f64 {
        let k = 2.0 * self.pz / H;
        let fv = self.vertex_frequency();
        (fv * fv + (k * (bias - self.vertex_bias)).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    /// Random proposals per candidate.
    pub budget: usize,
    /// Assignment corridor half-width (frequency cells).
    pub corridor_cells: f64,
    /// Score penalty for a visible column without a point in the corridor.
    pub miss_penalty: f64,
    /// Best proposals polished by least squares.
    pub refine_top: usize,
    pub f_spread_cells: f64,
    pub bias_spread_cells: f64,
    /// p_z proposals are log-uniform in [guess/spread, guess·spread].
    pub pz_spread: f64,
    /// Largest admitted mean squared residual (cells²).
    pub rss_max_cells2: f64,
    pub min_points: usize,
    pub min_coverage: f64,
    /// Also remove the points of rejected fits before the next candidate.
    pub peel_rejected: bool,
    pub merge_pz_rel: f64,
    /// Vertex frequency tolerance for merging (Hz).
    pub merge_delta0_hz: f64,
    /// Vertex bias tolerance for merging (V/m).
    #[serde(rename = "merge_bias_vpm")]
    pub merge_bias: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            budget: 2000,
            corridor_cells: 2.0,
            miss_penalty: 0.5,
            refine_top: 8,
            f_spread_cells: 3.0,
            bias_spread_cells: 2.0,
            pz_spread: 1.3,
            rss_max_cells2: 0.5,
            min_points: 6,
            min_coverage: 0.8,
            peel_rejected: false,
            merge_pz_rel: 0.03,
            merge_delta0_hz: 1e6,
            merge_bias: 5e3,
        }
    }
}

/// Minima indexed by bias column, with peeled points masked out.
#[derive(Debug, Clone)]
pub struct MinimaCloud {
    pub freqs: Vec<f64>,
    pub biases: Vec<f64>,
    points: Vec<MinimumPoint>,
    /// Point ids per column, sorted by frequency.
    columns: Vec<Vec<usize>>,
    taken: Vec<bool>,
}

impl MinimaCloud {
    /// `points[i].bi` must index `biases`.
    pub fn new(points: &[MinimumPoint], freqs: &[f64], biases: &[f64]) -> Result<Self> {
        if freqs.len() < 2 || biases.is_empty() {
            return Err(Error::Dimension("cloud needs a frequency axis and at least one bias".into()));
        }
        let mut columns = vec![Vec::new(); biases.len()];
        for (id, p) in points.iter().enumerate() {
            let col = columns
                .get_mut(p.bi)
                .ok_or_else(|| Error::Dimension(format!("point bias index {} out of range", p.bi)))?;
            col.push(id);
        }
        for col in &mut columns {
            col.sort_by(|&a, &b| points[a].f.total_cmp(&points[b].f));
        }
        Ok(Self {
            freqs: freqs.to_vec(),
            biases: biases.to_vec(),
            points: points.to_vec(),
            columns,
            taken: vec![false; points.len()],
        })
    }

    pub fn freq_step(&self) -> f64 {
        self.freqs[1] - self.freqs[0]
    }

    pub fn bias_step(&self) -> f64 {
        if self.biases.len() > 1 { self.biases[1] - self.biases[0] } else { 1.0 }
    }

    pub fn remaining(&self) -> usize {
        self.taken.iter().filter(|t| !**t).count()
    }

    fn nearest(&self, bi: usize, f: f64) -> Option<(usize, f64)> {
        let col = &self.columns[bi];
        let pos = col.partition_point(|&id| self.points[id].f < f);
        let up = col[pos..].iter().find(|&&id| !self.taken[id]);
        let down = col[..pos].iter().rev().find(|&&id| !self.taken[id]);
        let cand = |id: &usize| (*id, (self.points[*id].f - f).abs());
        match (up.map(cand), down.map(cand)) {
            (Some(a), Some(b)) => Some(if b.1 < a.1 { b } else { a }),
            (a, b) => a.or(b),
        }
    }

    /// Columns whose hyperbola frequency falls inside the frequency window.
    fn visible(&self, h: &Hyp, margin: f64) -> Vec<usize> {
        let top = self.freqs[self.freqs.len() - 1] + margin;
        let bottom = self.freqs[0] - margin;
        if h.fv > top || h.k <= 0.0 {
            return Vec::new();
        }
        let reach = (top * top - h.fv * h.fv).sqrt() / h.k;
        let lo = self.biases.partition_point(|b| *b < h.ev - reach);
        let hi = self.biases.partition_point(|b| *b <= h.ev + reach);
        (lo..hi).filter(|&bi| h.at(self.biases[bi]) >= bottom).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Hyp {
    fv: f64,
    ev: f64,
    /// Tuning rate 2p/h (Hz per V/m).
    k: f64,
}

impl Hyp {
    fn at(&self, e: f64) -> f64 {
        (self.fv * self.fv + (self.k * (e - self.ev)).powi(2)).sqrt()
    }
}

struct Assignment {
    score: f64,
    /// (point id, signed residual in Hz)
    inliers: Vec<(usize, f64)>,
    visible: usize,
}

fn assign(cloud: &MinimaCloud, h: &Hyp, cfg: &FitConfig) -> Assignment {
    assign_within(cloud, h, cfg, f64::INFINITY)
}

/// Assignment restricted to columns within `reach` (V/m) of the vertex.
fn assign_within(cloud: &MinimaCloud, h: &Hyp, cfg: &FitConfig, reach: f64) -> Assignment {
    let c = cfg.corridor_cells * cloud.freq_step();
    let mut cols = cloud.visible(h, 0.0);
    cols.retain(|&bi| (cloud.biases[bi] - h.ev).abs() <= reach);
    let mut score = 0.0;
    let mut inliers = Vec::new();
    for &bi in &cols {
        let fp = h.at(cloud.biases[bi]);
        match cloud.nearest(bi, fp) {
            Some((id, d)) if d < c => {
                score += 1.0 - (d / c).powi(2);
                inliers.push((id, cloud.points[id].f - fp));
            }
            _ => score -= cfg.miss_penalty,
        }
    }
    Assignment { score, inliers, visible: cols.len() }
}

fn lm_step(cloud: &MinimaCloud, h: Hyp, a: &Assignment) -> Option<(Hyp, bool)> {
    let df = cloud.freq_step();
    let db = cloud.bias_step();
    let data: Vec<(f64, f64)> = a.inliers.iter().map(|(id, _)| (cloud.points[*id].bias, cloud.points[*id].f)).collect();
    let model = |x: &[f64]| Hyp { fv: h.fv + x[0] * df, ev: h.ev + x[1] * db, k: h.k * x[2].exp() };
    let resid = |x: &[f64], r: &mut [f64]| {
        let hh = model(x);
        for (ri, (e, f)) in r.iter_mut().zip(&data) {
            *ri = (hh.at(*e) - f) / df;
        }
    };
    let rep = levenberg_marquardt(resid, &[0.0, 0.0, 0.0], data.len(), &[1.0, 1.0, 0.1], &LmOptions::default()).ok()?;
    let next = model(&rep.params);
    (next.fv.is_finite() && next.ev.is_finite() && next.k.is_finite() && next.k > 0.0).then_some((next, rep.converged))
}

/// Least-squares refinement that tracks outward from the vertex: fit the
/// inliers within a bias reach, then widen the reach, so that a rough tuning
/// rate does not lose the steep outer arms.
fn polish(cloud: &MinimaCloud, start: Hyp, cfg: &FitConfig) -> (Hyp, Assignment, bool) {
    let db = cloud.bias_step();
    let span = cloud.biases[cloud.biases.len() - 1] - cloud.biases[0];
    let mut h = start;
    let mut converged = false;
    let mut reach = 4.0 * db;
    loop {
        let a = assign_within(cloud, &h, cfg, reach);
        if a.inliers.len() >= 4 {
            if let Some((next, conv)) = lm_step(cloud, h, &a) {
                h = next;
                converged = conv;
            }
        }
        if reach > span {
            break;
        }
        reach *= 1.6;
    }
    let mut a = assign(cloud, &h, cfg);
    for _ in 0..3 {
        if a.inliers.len() < 4 {
            break;
        }
        let Some((next, conv)) = lm_step(cloud, h, &a) else { break };
        let na = assign(cloud, &next, cfg);
        let same = na.inliers.iter().map(|x| x.0).eq(a.inliers.iter().map(|x| x.0));
        h = next;
        a = na;
        converged = conv;
        if same {
            break;
        }
    }
    (h, a, converged)
}

/// Fits one hyperbola f(E) = √(f_v² + (2p/h)²(E − E_v)²) to the unpeeled
/// points near a candidate.
///
/// Random proposals around the guess are scored by soft corridor inliers
/// minus a penalty per visible column without a point; the best few are
/// polished by least squares on their inliers. Deterministic per seed.
pub fn fit_hyperbola_mc(cloud: &MinimaCloud, candidate: &Candidate, cfg: &FitConfig, seed: u64) -> Result<TlsTrack> {
    let df = cloud.freq_step();
    let db = cloud.bias_step();
    let k_guess = 2.0 * candidate.pz_guess / H;
    if !(k_guess > 0.0 && k_guess.is_finite() && candidate.f_vertex > 0.0) {
        return Err(Error::domain("candidate needs positive p_z and vertex frequency guesses"));
    }
    let guess = Hyp { fv: candidate.f_vertex, ev: candidate.vertex_guess, k: k_guess };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bias_spread = cfg.bias_spread_cells + 0.5 * candidate.run as f64;
    let ln_spread = cfg.pz_spread.max(1.0).ln();

    // proposals are ranked on the vertex neighborhood only: over the full
    // window a steeper curve has fewer columns to miss and would be favored
    let local = (6.0 + 0.5 * candidate.run as f64) * db;
    let mut scored: Vec<(f64, Hyp)> = Vec::with_capacity(cfg.budget + 1);
    scored.push((assign_within(cloud, &guess, cfg, local).score, guess));
    for _ in 0..cfg.budget {
        let h = Hyp {
            fv: guess.fv + rng.random_range(-1.0..=1.0) * cfg.f_spread_cells * df,
            ev: guess.ev + rng.random_range(-1.0..=1.0) * bias_spread * db,
            k: guess.k * (rng.random_range(-1.0..=1.0) * ln_spread).exp(),
        };
        scored.push((assign_within(cloud, &h, cfg, local).score, h));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut best: Option<(f64, Hyp, Assignment, bool)> = None;
    for (_, h) in scored.iter().take(cfg.refine_top.max(1)) {
        let (hh, a, conv) = polish(cloud, *h, cfg);
        let better = match &best {
            None => true,
            Some((s, ..)) => a.score > *s,
        };
        if better {
            best = Some((a.score, hh, a, conv));
        }
    }
    let (_, h, a, lm_converged) = best.expect("at least one proposal");
    if a.inliers.len() < 4 {
        return Err(Error::InsufficientPoints { needed: 4, got: a.inliers.len() });
    }
    let n = a.inliers.len();
    let rss = a.inliers.iter().map(|(_, r)| r * r).sum::<f64>() / n as f64;
    let points: Vec<[f64; 2]> = a.inliers.iter().map(|(id, _)| [cloud.points[*id].bias, cloud.points[*id].f]).collect();
    let below = points.iter().any(|p| p[0] < h.ev);
    let above = points.iter().any(|p| p[0] > h.ev);
    Ok(TlsTrack {
        delta0: H * h.fv,
        vertex_bias: h.ev,
        pz: H * h.k / 2.0,
        rss,
        n_points: n,
        crosses_vertex: below && above,
        converged: lm_converged && rss <= cfg.rss_max_cells2 * df * df,
        coverage: if a.visible > 0 { n as f64 / a.visible as f64 } else { 0.0 },
        points,
    })
}

/// Why a fitted track was not admitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rejection {
    NoCrossing,
    Residual,
    TooFewPoints,
    Coverage,
    OutsideWindow,
}

pub fn admission(track: &TlsTrack, cloud: &MinimaCloud, cfg: &FitConfig) -> Option<Rejection> {
    let df = cloud.freq_step();
    let fv = track.vertex_frequency();
    if track.vertex_bias < cloud.biases[0]
        || track.vertex_bias > cloud.biases[cloud.biases.len() - 1]
        || fv < cloud.freqs[0]
        || fv > cloud.freqs[cloud.freqs.len() - 1]
    {
        return Some(Rejection::OutsideWindow);
    }
    if !track.crosses_vertex {
        return Some(Rejection::NoCrossing);
    }
    if track.n_points < cfg.min_points {
        return Some(Rejection::TooFewPoints);
    }
    if track.rss > cfg.rss_max_cells2 * df * df {
        return Some(Rejection::Residual);
    }
    if track.coverage < cfg.min_coverage {
        return Some(Rejection::Coverage);
    }
    None
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PeelResult {
    pub admitted: Vec<TlsTrack>,
    pub rejected: Vec<(TlsTrack, Rejection)>,
    /// Candidates that had too few points left to fit.
    pub skipped: usize,
}

fn stream_seed(seed: u64, idx: usize) -> u64 {
    seed ^ (idx as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Fits candidates from the largest Δ₀ down, removing the points of each
/// admitted track before the next fit, then merges near-duplicates.
pub fn peel_and_iterate(cloud: &mut MinimaCloud, candidates: &[Candidate], cfg: &FitConfig, seed: u64) -> PeelResult {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].delta0_guess.total_cmp(&candidates[a].delta0_guess));
    let mut out = PeelResult::default();
    for idx in order {
        let track = match fit_hyperbola_mc(cloud, &candidates[idx], cfg, stream_seed(seed, idx)) {
            Ok(t) => t,
            Err(_) => {
                out.skipped += 1;
                continue;
            }
        };
        let verdict = admission(&track, cloud, cfg);
        if verdict.is_none() || cfg.peel_rejected {
            let h = Hyp { fv: track.vertex_frequency(), ev: track.vertex_bias, k: 2.0 * track.pz / H };
            for (id, _) in assign(cloud, &h, cfg).inliers {
                cloud.taken[id] = true;
            }
        }
        match verdict {
            None => out.admitted.push(track),
            Some(r) => out.rejected.push((track, r)),
        }
    }
    out.admitted = merge_tracks(out.admitted, cfg);
    out
}

/// Merges tracks whose p_z agree within `merge_pz_rel` and whose vertices lie
/// within `merge_delta0_hz` and `merge_bias`; the track with more points wins.
pub fn merge_tracks(mut tracks: Vec<TlsTrack>, cfg: &FitConfig) -> Vec<TlsTrack> {
    tracks.sort_by(|a, b| b.n_points.cmp(&a.n_points).then(b.delta0.total_cmp(&a.delta0)));
    let mut out: Vec<TlsTrack> = Vec::with_capacity(tracks.len());
    for t in tracks {
        let dup = out.iter_mut().find(|u| {
            (u.pz - t.pz).abs() <= cfg.merge_pz_rel * u.pz.max(t.pz)
                && (u.vertex_frequency() - t.vertex_frequency()).abs() <= cfg.merge_delta0_hz
                && (u.vertex_bias - t.vertex_bias).abs() <= cfg.merge_bias
        });
        match dup {
            Some(u) => {
                u.points.extend(t.points);
                u.n_points = u.points.len();
            }
            None => out.push(t),
        }
    }
    out.sort_by(|a, b| b.delta0.total_cmp(&a.delta0));
    out
}
