use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::processing::ProcessedGrid;

/// One local minimum of a grid column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinimumPoint {
    /// Frequency (Hz).
    pub f: f64,
    /// Bias field (V/m).
    pub bias: f64,
    /// Depth below the local background, in grid units.
    pub depth: f64,
    pub fi: usize,
    pub bi: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MinimaConfig {
    /// Depth threshold in units of the local noise σ.
    pub threshold_k: f64,
    /// Absolute depth floor.
    pub min_depth: f64,
    /// Half-width (cells) of the running median used as background.
    pub background_half_width: usize,
    /// Block length (cells) for the local noise estimate.
    pub noise_block: usize,
}

impl Default for MinimaConfig {
    fn default() -> Self {
        Self { threshold_k: 3.0, min_depth: 0.0, background_half_width: 10, noise_block: 128 }
    }
}

fn median(buf: &mut [f64]) -> f64 {
    let n = buf.len();
    let mid = n / 2;
    let (_, m, _) = buf.select_nth_unstable_by(mid, f64::total_cmp);
    let m = *m;
    if n % 2 == 1 {
        m
    } else {
        let lower = buf[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + m)
    }
}

/// Per-cell noise σ from the MAD of second differences (σ(Δ²x) = √6 σ for
/// white noise), estimated per block and interpolated between block centers.
pub fn local_noise(v: &[f64], block: usize) -> Vec<f64> {
    let n = v.len();
    if n < 3 {
        return vec![0.0; n];
    }
    let d2: Vec<f64> = (1..n - 1).map(|i| v[i - 1] - 2.0 * v[i] + v[i + 1]).collect();
    let block = block.max(8).min(d2.len());
    let nblocks = d2.len().div_ceil(block);
    let mut centers = Vec::with_capacity(nblocks);
    let mut sig = Vec::with_capacity(nblocks);
    for b in 0..nblocks {
        let lo = b * block;
        let hi = ((b + 1) * block).min(d2.len());
        let mut chunk: Vec<f64> = d2[lo..hi].to_vec();
        let med = median(&mut chunk);
        let mut dev: Vec<f64> = d2[lo..hi].iter().map(|x| (x - med).abs()).collect();
        sig.push(1.4826 * median(&mut dev) / 6f64.sqrt());
        centers.push(0.5 * (lo + hi) as f64 + 1.0);
    }
    (0..n)
        .map(|i| {
            let x = i as f64;
            if nblocks == 1 || x <= centers[0] {
                return sig[0];
            }
            if x >= centers[nblocks - 1] {
                return sig[nblocks - 1];
            }
            let k = centers.partition_point(|c| *c <= x) - 1;
            let t = (x - centers[k]) / (centers[k + 1] - centers[k]);
            sig[k] * (1.0 - t) + sig[k + 1] * t
        })
        .collect()
}

/// Strict local minima of one column that sit deeper than
/// max(k·σ_local, min_depth) below the running-median background.
pub fn column_minima(v: &[f64], cfg: &MinimaConfig) -> Vec<(usize, f64)> {
    let n = v.len();
    if n < 3 {
        return Vec::new();
    }
    let noise = local_noise(v, cfg.noise_block);
    let w = cfg.background_half_width.max(1);
    let mut out = Vec::new();
    let mut buf = Vec::with_capacity(2 * w + 1);
    for i in 1..n - 1 {
        if !(v[i] < v[i - 1] && v[i] < v[i + 1]) {
            continue;
        }
        buf.clear();
        buf.extend_from_slice(&v[i.saturating_sub(w)..(i + w + 1).min(n)]);
        let depth = median(&mut buf) - v[i];
        let thr = (cfg.threshold_k * noise[i]).max(cfg.min_depth);
        if depth > thr {
            out.push((i, depth));
        }
    }
    out
}

/// Local minima of every column of a processed grid.
pub fn find_local_minima(grid: &ProcessedGrid, cfg: &MinimaConfig) -> Vec<MinimumPoint> {
    let per_col: Vec<Vec<MinimumPoint>> = (0..grid.n_bias())
        .into_par_iter()
        .map(|bi| {
            let col = grid.column(bi);
            column_minima(&col, cfg)
                .into_iter()
                .map(|(fi, depth)| MinimumPoint { f: grid.freqs[fi], bias: grid.biases[bi], depth, fi, bi })
                .collect()
        })
        .collect();
    per_col.into_iter().flatten().collect()
}

/// Unnormalized Gaussian density of minima on the sweep grid: every point
/// contributes a bump of unit height.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub freqs: Vec<f64>,
    pub biases: Vec<f64>,
    /// Frequency-major values.
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn n_freq(&self) -> usize {
        self.freqs.len()
    }

    pub fn n_bias(&self) -> usize {
        self.biases.len()
    }

    pub fn get(&self, fi: usize, bi: usize) -> f64 {
        self.values[fi * self.n_bias() + bi]
    }
}

/// Smooths a point cloud with a separable Gaussian (σ in Hz and V/m),
/// truncated at 4σ. Each point weighs log2(1 + depth/median depth), so a
/// median point counts 1 and shallow clutter barely moves the crests.
pub fn smooth_minima(
    points: &[MinimumPoint],
    freqs: &[f64],
    biases: &[f64],
    sigma_f: f64,
    sigma_bias: f64,
) -> DensityGrid {
    let (nf, nb) = (freqs.len(), biases.len());
    let mut values = vec![0.0; nf * nb];
    if nf == 0 || nb == 0 || points.is_empty() {
        return DensityGrid { freqs: freqs.to_vec(), biases: biases.to_vec(), values };
    }
    let df = if nf > 1 { freqs[1] - freqs[0] } else { 1.0 };
    let db = if nb > 1 { biases[1] - biases[0] } else { 1.0 };
    let rf = (4.0 * sigma_f / df).ceil() as isize;
    let rb = (4.0 * sigma_bias / db).ceil() as isize;
    let mut depths: Vec<f64> = points.iter().map(|p| p.depth).collect();
    let ref_depth = median(&mut depths).max(f64::MIN_POSITIVE);
    for p in points {
        let w = (p.depth.max(0.0) / ref_depth).ln_1p() / std::f64::consts::LN_2;
        let cf = ((p.f - freqs[0]) / df).round() as isize;
        let cb = ((p.bias - biases[0]) / db).round() as isize;
        for bi in (cb - rb).max(0)..=(cb + rb).min(nb as isize - 1) {
            let ub = (biases[bi as usize] - p.bias) / sigma_bias;
            let wb = (-0.5 * ub * ub).exp();
            for fi in (cf - rf).max(0)..=(cf + rf).min(nf as isize - 1) {
                let uf = (freqs[fi as usize] - p.f) / sigma_f;
                values[fi as usize * nb + bi as usize] += w * wb * (-0.5 * uf * uf).exp();
            }
        }
    }
    DensityGrid { freqs: freqs.to_vec(), biases: biases.to_vec(), values }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn grid(cols: Vec<Vec<f64>>) -> ProcessedGrid {
        let nf = cols[0].len();
        let nb = cols.len();
        let mut values = vec![0.0; nf * nb];
        for (bi, c) in cols.iter().enumerate() {
            for (fi, v) in c.iter().enumerate() {
                values[fi * nb + bi] = *v;
            }
        }
        ProcessedGrid {
            freqs: (0..nf).map(|i| 5e9 + 1e4 * i as f64).collect(),
            biases: (0..nb).map(|i| 1e3 * i as f64).collect(),
            values,
            provenance: vec!["test".into()],
        }
    }

    fn lorentz_dip(n: usize, center: f64, width: f64, depth: f64) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let x = (i as f64 - center) / width;
                1.0 - depth / (1.0 + x * x)
            })
            .collect()
    }

    #[test]
    fn bare_dip_has_one_minimum() {
        let g = grid(vec![lorentz_dip(401, 200.3, 40.0, 0.5)]);
        let m = find_local_minima(&g, &MinimaConfig { background_half_width: 100, ..Default::default() });
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].fi, 200);
    }

    #[test]
    fn hybridized_column_has_two_minima() {
        // resonator dip split by a resonant defect: two dips around center
        let a = lorentz_dip(401, 170.0, 15.0, 0.4);
        let b = lorentz_dip(401, 230.0, 15.0, 0.4);
        let col: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y - 1.0).collect();
        let g = grid(vec![col]);
        let m = find_local_minima(&g, &MinimaConfig { background_half_width: 60, ..Default::default() });
        assert!(m.len() >= 2);
    }

    #[test]
    fn quiet_noise_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let col: Vec<f64> = (0..500).map(|_| 1.0 + 1e-6 * { let z: f64 = StandardNormal.sample(&mut rng); z }).collect();
        let g = grid(vec![col]);
        let cfg = MinimaConfig { min_depth: 1e-4, ..Default::default() };
        assert!(find_local_minima(&g, &cfg).is_empty());
    }

    #[test]
    fn noise_estimate_matches_white_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..4000).map(|_| 0.2 * { let z: f64 = StandardNormal.sample(&mut rng); z }).collect();
        let s = local_noise(&v, 256);
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        assert!((mean / 0.2 - 1.0).abs() < 0.05, "{mean}");
    }

    fn pt(f: f64, bias: f64) -> MinimumPoint {
        MinimumPoint { f, bias, depth: 1.0, fi: 0, bi: 0 }
    }

    #[test]
    fn single_point_density_peaks_there() {
        let freqs: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let biases: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let d = smooth_minima(&[pt(20.0, 10.0)], &freqs, &biases, 2.0, 2.0);
        let (imax, vmax) = d.values.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        assert_eq!(imax, 20 * 30 + 10);
        assert!((vmax - 1.0).abs() < 1e-12);
        assert!((d.get(22, 10) - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn separated_points_give_two_peaks() {
        let freqs: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let biases: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let d = smooth_minima(&[pt(20.0, 5.0), pt(60.0, 5.0)], &freqs, &biases, 2.0, 2.0);
        let col: Vec<f64> = (0..100).map(|fi| d.get(fi, 5)).collect();
        let peaks: Vec<usize> = (1..99).filter(|&i| col[i] > col[i - 1] && col[i] >= col[i + 1]).collect();
        assert_eq!(peaks, vec![20, 60]);
    }

    #[test]
    fn hyperbola_points_form_a_ridge_on_the_curve() {
        let freqs: Vec<f64> = (0..400).map(|i| i as f64).collect();
        let biases: Vec<f64> = (0..60).map(|i| i as f64).collect();
        let curve = |b: f64| (100.0f64.powi(2) + (8.0 * (b - 30.0)).powi(2)).sqrt();
        let pts: Vec<MinimumPoint> = biases.iter().map(|&b| pt(curve(b), b)).filter(|p| p.f < 399.0).collect();
        let d = smooth_minima(&pts, &freqs, &biases, 2.0, 2.0);
        for bi in 5..55 {
            let target = curve(bi as f64);
            if target > 390.0 {
                continue;
            }
            // highest crest within ±10 cells of the curve
            let lo = (target - 10.0).max(0.0) as usize;
            let hi = ((target + 10.0) as usize).min(399);
            let (fi, _) = (lo..=hi).map(|fi| (fi, d.get(fi, bi))).max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
            assert!((fi as f64 - target).abs() <= 2.0, "bias {bi}: {fi} vs {target}");
        }
    }
}
