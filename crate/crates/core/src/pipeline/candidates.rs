use serde::{Deserialize, Serialize};

use nalgebra::{Matrix3, Vector3};

use super::minima::DensityGrid;
use crate::units::PLANCK as H;

/// Initial guess for one hyperbola.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Tunneling energy guess (J).
    pub delta0_guess: f64,
    /// Vertex bias guess (V/m).
    pub vertex_guess: f64,
    /// Dipole moment guess (C·m).
    pub pz_guess: f64,
    /// Vertex frequency (Hz).
    pub f_vertex: f64,
    /// Number of symmetric crest pairs that supported the vertex.
    pub support: usize,
    /// Columns spanned by a flat vertex run.
    pub run: usize,
    /// Log-likelihood ratio (nats) of the arm pattern against crest clutter.
    pub evidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CandidateConfig {
    /// Minimum density for a crest.
    pub crest_threshold: f64,
    /// Frequency tolerance (cells) for matching crest pairs.
    pub tolerance_cells: f64,
    /// Pairs needed to accept a vertex.
    pub min_pairs: usize,
    /// Largest column offset examined.
    pub max_pairs: usize,
    /// Largest curvature searched, in cells per column².
    pub max_curvature_cells: f64,
    /// Consecutive column offsets allowed without a matching pair.
    pub max_gap: usize,
    /// Evidence (nats) needed to accept a vertex.
    pub min_evidence: f64,
    /// Evidence charged for each examined pair without a match.
    pub miss_cost: f64,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        Self { crest_threshold: 0.5, tolerance_cells: 1.5, min_pairs: 3, max_pairs: 40, max_curvature_cells: 60.0, max_gap: 2, min_evidence: 12.0, miss_cost: 1.5 }
    }
}

/// Crest positions (fractional cell index) of one density column.
pub fn column_crests(d: &DensityGrid, bi: usize, threshold: f64) -> Vec<f64> {
    let nf = d.n_freq();
    let mut out = Vec::new();
    let mut i = 1;
    while i + 1 < nf {
        let v = d.get(i, bi);
        if v >= threshold && v > d.get(i - 1, bi) && v >= d.get(i + 1, bi) {
            // flat tops: take the middle of the plateau
            let mut j = i;
            while j + 1 < nf && d.get(j + 1, bi) == v {
                j += 1;
            }
            let mid = 0.5 * (i + j) as f64;
            let refined = if i == j {
                let (a, b, c) = (d.get(i - 1, bi), v, d.get(i + 1, bi));
                let den = a - 2.0 * b + c;
                if den < 0.0 { mid + 0.5 * (a - c) / den } else { mid }
            } else {
                mid
            };
            out.push(refined);
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

/// Nearest crest of a sorted list to `x`, as (distance, position).
fn nearest(crests: &[f64], x: f64) -> (f64, f64) {
    let i = crests.partition_point(|c| *c < x);
    let up = crests.get(i).map_or((f64::INFINITY, x), |&c| (c - x, c));
    let down = if i > 0 { (x - crests[i - 1], crests[i - 1]) } else { (f64::INFINITY, x) };
    if up.0 < down.0 { up } else { down }
}

pub struct Vertex {
    pub fi: f64,
    pub bi: usize,
    /// Sub-column vertex position relative to `bi`.
    pub offset: f64,
    pub support: usize,
    /// Rise per column² in cells.
    pub curvature: f64,
    pub evidence: f64,
}

const OFFSETS: [f64; 5] = [-0.4, -0.2, 0.0, 0.2, 0.4];

struct Hit {
    score: f64,
    matched: usize,
}

/// Vertex at column bv + δ and frequency f0 with curvature a: the arms sit
/// at f0 + a(j ± δ)² in columns bv ∓ j.
#[derive(Clone, Copy)]
struct Hyp {
    f0: f64,
    a: f64,
    d: f64,
}

/// Scores the arm pattern of `h` against crest clutter. Each matched pair
/// earns −ln q, where q is the chance that clutter of the observed column
/// crest rate lands a pair within tolerance. Matched crests are pushed to
/// `pts` as (signed offset j, cell) when given.
fn score_hypothesis(
    crests: &[Vec<f64>],
    rate: &[f64],
    bv: usize,
    top: f64,
    h: Hyp,
    slack: f64,
    cfg: &CandidateConfig,
    mut pts: Option<&mut Vec<(f64, f64)>>,
) -> Option<Hit> {
    let nb = crests.len();
    let t = cfg.tolerance_cells;
    let Hyp { f0, a, d } = h;
    let (mut matched, mut examined, mut run_miss) = (0usize, 0usize, 0usize);
    let mut evidence = 0.0;
    for j in 1..=cfg.max_pairs {
        if bv < j || bv + j >= nb {
            break;
        }
        let jf = j as f64;
        let (rl, rr) = (a * (jf + d) * (jf + d), a * (jf - d) * (jf - d));
        if f0 + rl.max(rr) > top {
            break;
        }
        examined += 1;
        let tol = t + slack * rl.max(rr);
        let (gl, cl) = nearest(&crests[bv - j], f0 + rl);
        let (gr, cr) = nearest(&crests[bv + j], f0 + rr);
        if gl <= tol && gr <= tol {
            matched += 1;
            run_miss = 0;
            let q = (2.0 * tol * rate[bv - j]).min(1.0) * (2.0 * tol * rate[bv + j]).min(1.0);
            evidence += -q.max(1e-12).ln() - (gl / tol).powi(2) - (gr / tol).powi(2);
            if let Some(p) = pts.as_deref_mut() {
                p.push((-jf, cl));
                p.push((jf, cr));
            }
        } else {
            run_miss += 1;
            evidence -= cfg.miss_cost;
            if run_miss > cfg.max_gap {
                break;
            }
        }
        if j == 4 && matched < 2 {
            break;
        }
    }
    if matched < cfg.min_pairs || (matched as f64) < 0.6 * examined as f64 {
        return None;
    }
    Some(Hit { score: evidence, matched })
}

/// Least-squares parabola through matched crests: y = c + a·x² − 2aδ·x with
/// x the signed column offset, which is linear in (c, a, aδ).
fn fit_parabola(pts: &[(f64, f64)]) -> Option<Hyp> {
    let solve = |pts: &mut dyn Iterator<Item = &(f64, f64)>| {
        let mut m = Matrix3::zeros();
        let mut v = Vector3::zeros();
        for &(x, y) in pts {
            let row = Vector3::new(1.0, x * x, -2.0 * x);
            m += row * row.transpose();
            v += row * y;
        }
        m.lu().solve(&v)
    };
    let mut sol = solve(&mut pts.iter())?;
    // one trimming pass against stray clutter crests
    let resid: Vec<f64> = pts.iter().map(|&(x, y)| (y - sol[0] - sol[1] * x * x + 2.0 * sol[2] * x).abs()).collect();
    let mut sorted = resid.clone();
    sorted.sort_by(f64::total_cmp);
    let cut = (3.0 * 1.4826 * sorted[sorted.len() / 2]).max(2.0);
    if resid.iter().any(|&r| r > cut) {
        let kept: Vec<(f64, f64)> = pts.iter().zip(&resid).filter(|(_, &r)| r <= cut).map(|(p, _)| *p).collect();
        if kept.len() >= 5 {
            sol = solve(&mut kept.iter())?;
        }
    }
    let (c, a, ad) = (sol[0], sol[1], sol[2]);
    if !(a > 0.0) {
        return None;
    }
    let d = ad / a;
    if d.abs() > 0.75 {
        return None;
    }
    Some(Hyp { f0: c - a * d * d, a, d })
}

/// Scans curvature and sub-column offset hypotheses for a vertex at crest
/// (fv, bv). A coarse scan with loose tolerance picks the hypotheses, a
/// local scan settles each one, and a least-squares pass on the matched
/// crests sharpens it enough to score at tight tolerance.
pub fn test_vertex(
    crests: &[Vec<f64>],
    rate: &[f64],
    fv: f64,
    bv: usize,
    top: f64,
    curvatures: &[f64],
    cfg: &CandidateConfig,
) -> Vec<Vertex> {
    let hyp = |a: f64, d: f64| Hyp { f0: fv - a * d * d, a, d };
    let mut coarse: Vec<(f64, f64, f64)> = Vec::new();
    for &a in curvatures {
        let offsets: &[f64] = if a < FLAT { &[0.0] } else { &OFFSETS };
        for &d in offsets {
            if let Some(h) = score_hypothesis(crests, rate, bv, top, hyp(a, d), 0.12, cfg, None) {
                coarse.push((h.score, a, d));
            }
        }
    }
    coarse.sort_by(|x, y| y.0.total_cmp(&x.0));
    // one crest can sit on several hyperbolas; refine each distinct curvature
    let mut out: Vec<Vertex> = Vec::new();
    let mut tried: Vec<f64> = Vec::new();
    for &(_, a0, d0) in &coarse {
        if tried.len() >= 6 {
            break;
        }
        if tried.iter().any(|&t| (a0 / t).ln().abs() < 0.2) {
            continue;
        }
        tried.push(a0);
        let mut best: Option<(Hit, Hyp)> = None;
        for i in -10..=10 {
            let a = a0 * 1.01f64.powi(i);
            for k in -2..=2 {
                let h = hyp(a, (d0 + 0.05 * k as f64).clamp(-0.5, 0.5));
                if let Some(hit) = score_hypothesis(crests, rate, bv, top, h, 0.03, cfg, None) {
                    if best.as_ref().is_none_or(|(b, _)| hit.score > b.score) {
                        best = Some((hit, h));
                    }
                }
            }
        }
        let Some((mut hit, mut h)) = best else { continue };
        let mut cur = h;
        for slack in [0.03, 0.02, 0.012, 0.008, 0.008] {
            let mut pts = vec![(0.0, fv)];
            if score_hypothesis(crests, rate, bv, top, cur, slack, cfg, Some(&mut pts)).is_none() {
                break;
            }
            let Some(next) = fit_parabola(&pts) else { break };
            cur = next;
            if let Some(nh) = score_hypothesis(crests, rate, bv, top, cur, 0.008, cfg, None) {
                if nh.score > hit.score {
                    hit = nh;
                    h = cur;
                }
            }
        }
        if hit.score >= cfg.min_evidence {
            out.push(Vertex { fi: h.f0, bi: bv, offset: h.d, support: hit.matched, curvature: h.a, evidence: hit.score });
        }
    }
    out
}

/// Curvatures agree, or both are too flat to tell apart.
fn same_shape(a: f64, b: f64) -> bool {
    (a < FLAT && b < FLAT) || (a / b).ln().abs() < 0.3
}

/// Below this curvature (cells per column²) the offset scan is skipped.
const FLAT: f64 = 0.3;

/// Finds hyperbola vertices in a density grid: a crest whose neighbors at
/// bias offsets ±j hold a symmetric pair of crests rising like j².
///
/// `band` restricts accepted vertex frequencies (Hz). The result is sorted
/// by Δ₀ descending.
pub fn propose_candidates(density: &DensityGrid, band: (f64, f64), cfg: &CandidateConfig) -> Vec<Candidate> {
    let nb = density.n_bias();
    let nf = density.n_freq();
    if nb < 3 || nf < 3 {
        return Vec::new();
    }
    let df = density.freqs[1] - density.freqs[0];
    let db = density.biases[1] - density.biases[0];
    let crests: Vec<Vec<f64>> = (0..nb).map(|bi| column_crests(density, bi, cfg.crest_threshold)).collect();
    // clutter rate: crests per cell in each column
    let rate: Vec<f64> = crests.iter().map(|c| c.len() as f64 / nf as f64).collect();
    let to_f = |fi: f64| density.freqs[0] + fi * df;
    let top = (nf - 1) as f64;
    let mut curvatures = Vec::new();
    let mut a = 1e-3;
    while a <= cfg.max_curvature_cells {
        curvatures.push(a);
        a *= 1.1;
    }

    let mut found: Vec<Vertex> = Vec::new();
    for (bv, col) in crests.iter().enumerate() {
        for &fv in col {
            let f = to_f(fv);
            if f < band.0 || f > band.1 {
                continue;
            }
            found.extend(test_vertex(&crests, &rate, fv, bv, top, &curvatures, cfg));
        }
    }

    // a crest on the arm of a much better supported vertex is its shadow
    found.sort_by(|a, b| b.evidence.total_cmp(&a.evidence));
    let mut kept: Vec<Vertex> = Vec::with_capacity(found.len());
    for v in found {
        let shadowed = kept.iter().any(|u| {
            let dj = u.bi.abs_diff(v.bi) as f64;
            let rise = u.curvature * dj * dj;
            u.evidence >= 2.0 * v.evidence
                && rise > 2.0 * cfg.tolerance_cells
                && (v.fi - u.fi - rise).abs() <= 2.0 * cfg.tolerance_cells
        });
        if !shadowed {
            kept.push(v);
        }
    }
    let mut found = kept;

    // collapse flat runs and near-duplicates of the same curvature
    found.sort_by(|a, b| a.bi.cmp(&b.bi).then(a.fi.total_cmp(&b.fi)));
    let mut used = vec![false; found.len()];
    let mut out = Vec::new();
    for i in 0..found.len() {
        if used[i] {
            continue;
        }
        let mut group = vec![i];
        used[i] = true;
        let mut k = 0;
        while k < group.len() {
            let g = &found[group[k]];
            let (gfi, gbi, ga) = (g.fi, g.bi, g.curvature);
            for (m, v) in found.iter().enumerate() {
                if !used[m]
                    && (v.fi - gfi).abs() <= 2.0 * cfg.tolerance_cells
                    && v.bi.abs_diff(gbi) <= 2
                    && same_shape(v.curvature, ga)
                {
                    used[m] = true;
                    group.push(m);
                }
            }
            k += 1;
        }
        group.sort_by_key(|&m| found[m].bi);
        let bmin = found[group[0]].bi;
        let bmax = found[group[group.len() - 1]].bi;
        let run = bmax - bmin + 1;
        // a flat vertex is centered on its run, a curved one on its best member
        let rep = if run > 2 {
            group[group.len() / 2]
        } else {
            *group.iter().max_by(|&&x, &&y| found[x].evidence.total_cmp(&found[y].evidence)).unwrap_or(&i)
        };
        let v = &found[rep];
        let support = group.iter().map(|&m| found[m].support).max().unwrap_or(0);
        let evidence = group.iter().map(|&m| found[m].evidence).fold(f64::NEG_INFINITY, f64::max);
        let f_vertex = to_f(v.fi);
        // a ≈ k²Δb²/(2 f_v Δf) near the vertex, and p = h·k/2
        let a = v.curvature;
        let k = (2.0 * a * f_vertex * df).sqrt() / db;
        let center = if run <= 2 { v.bi as f64 + v.offset } else { 0.5 * (bmin + bmax) as f64 };
        let vertex = density.biases[0] + center * db;
        out.push(Candidate {
            delta0_guess: H * f_vertex,
            vertex_guess: vertex,
            pz_guess: H * k / 2.0,
            f_vertex,
            support,
            run,
            evidence,
        });
    }
    out.sort_by(|a, b| b.delta0_guess.total_cmp(&a.delta0_guess));
    out
}
