use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use super::{add_measurement_noise, column_rng, prefilter, render_column, NoiseConfig};
use crate::error::{Error, Result};
use crate::physics::{ResonatorModel, SweepWindow, TwoLevelSystem};
use crate::units::hz_to_angular;

/// Repeated traces at a fixed bias while defect frequencies wander.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    /// Frame times (s), starting at 0.
    pub times: Vec<f64>,
    /// Bias field of every frame (V/m).
    pub bias: f64,
    pub freqs: Vec<f64>,
    pub frames: Vec<Vec<Complex64>>,
    /// Ensemble indices of the defects that were evolved.
    pub tracked: Vec<usize>,
    /// Frequency offset (Hz) of each tracked defect, per frame.
    pub offsets: Vec<Vec<f64>>,
    /// Telegraph switches experienced by each tracked defect.
    pub jumps: Vec<usize>,
}

/// Re-renders the trace at the window's center bias for `frames` evenly
/// spaced times over `duration` seconds. Between frames every defect may
/// switch (Poisson, redrawing its offset from Normal(0, jump_sigma)) and
/// drifts by a Gaussian random walk.
pub fn render_time_series(
    ensemble: &[TwoLevelSystem],
    res: &ResonatorModel,
    window: &SweepWindow,
    noise: &NoiseConfig,
    duration: f64,
    frames: usize,
    seed: u64,
) -> Result<TimeSeries> {
    noise.validate()?;
    if frames == 0 || !(duration >= 0.0) {
        return Err(Error::domain("time series needs frames >= 1 and duration >= 0"));
    }
    let bias = 0.5 * (window.bias_min + window.bias_max);
    let freqs = window.freq_axis();
    let omegas: Vec<f64> = freqs.iter().map(|&f| hz_to_angular(f)).collect();
    let dt = if frames > 1 { duration / (frames - 1) as f64 } else { 0.0 };

    // Anything that could wander into view is tracked.
    let hours = duration / 3600.0;
    let excursion = 6.0 * (noise.drift_sigma * hours.sqrt() + noise.telegraph.map_or(0.0, |t| t.jump_sigma));
    let reach = noise.cutoff_linewidths * res.kappa_total() + hz_to_angular(excursion);
    let single = SweepWindow { bias_min: bias - 1e-9, bias_max: bias + 1e-9, ..*window };
    let tracked = prefilter(ensemble, &single, reach);

    // Stream 0 drives the defect dynamics; frame k draws its measurement
    // noise from stream k + 1.
    let mut dyn_rng = column_rng(seed, usize::MAX - 1);
    let step_sigma = noise.drift_sigma * (dt / 3600.0).sqrt();
    let mut telegraph_off = vec![0.0; tracked.len()];
    let mut drift_off = vec![0.0; tracked.len()];
    let mut jumps = vec![0usize; tracked.len()];
    let mut out_frames = Vec::with_capacity(frames);
    let mut offsets = Vec::with_capacity(frames);
    let mut times = Vec::with_capacity(frames);
    for k in 0..frames {
        if k > 0 {
            for i in 0..tracked.len() {
                if let Some(t) = noise.telegraph {
                    let lam = t.switch_rate * dt;
                    let n = if lam > 0.0 { Poisson::new(lam).unwrap().sample(&mut dyn_rng) as usize } else { 0 };
                    if n > 0 {
                        jumps[i] += n;
                        let z: f64 = StandardNormal.sample(&mut dyn_rng);
                        telegraph_off[i] = t.jump_sigma * z;
                    }
                }
                if step_sigma > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut dyn_rng);
                    drift_off[i] += step_sigma * z;
                }
            }
        }
        let off_hz: Vec<f64> = telegraph_off.iter().zip(&drift_off).map(|(a, b)| a + b).collect();
        let off_w: Vec<f64> = off_hz.iter().map(|&o| hz_to_angular(o)).collect();
        let mut rng = column_rng(seed, k);
        let mut trace = render_column(ensemble, &tracked, res, &omegas, bias, noise, Some(&off_w), &mut rng)?;
        add_measurement_noise(&mut trace, noise.meas_sigma, &mut rng);
        out_frames.push(trace);
        offsets.push(off_hz);
        times.push(k as f64 * dt);
        let _: f64 = dyn_rng.random();
    }
    Ok(TimeSeries { times, bias, freqs, frames: out_frames, tracked, offsets, jumps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::Telegraph;
    use crate::units::{debye_to_cm, GHZ, KHZ, MHZ, PLANCK};

    fn setup(n: usize) -> (Vec<TwoLevelSystem>, ResonatorModel, SweepWindow) {
        let res = ResonatorModel::new(5.0 * GHZ, hz_to_angular(1.0 * MHZ), hz_to_angular(0.5 * MHZ), 1.11e-17, 20e-9, 10.0)
            .unwrap();
        let w = SweepWindow::new(5.0 * GHZ, 20.0 * MHZ, -90e3, 90e3, 201, 3).unwrap();
        let ens = (0..n)
            .map(|i| {
                let f = 4.995 * GHZ + 1e4 * i as f64;
                TwoLevelSystem::new(0.0, PLANCK * f, debye_to_cm(3.0), hz_to_angular(10.0 * KHZ), 0.0).unwrap()
            })
            .collect();
        (ens, res, w)
    }

    #[test]
    fn static_defects_give_identical_frames() {
        let (ens, res, w) = setup(3);
        let ts = render_time_series(&ens, &res, &w, &NoiseConfig::default(), 100.0, 5, 1).unwrap();
        assert_eq!(ts.frames.len(), 5);
        assert!(ts.frames.iter().all(|f| *f == ts.frames[0]));
        assert!(ts.jumps.iter().all(|&j| j == 0));
    }

    #[test]
    fn telegraph_jump_count_is_poisson() {
        let (ens, res, w) = setup(2000);
        let noise = NoiseConfig {
            telegraph: Some(Telegraph { switch_rate: 0.03, jump_sigma: 1e5 }),
            ..Default::default()
        };
        let ts = render_time_series(&ens, &res, &w, &noise, 100.0, 11, 5).unwrap();
        let mean = ts.jumps.iter().sum::<usize>() as f64 / ts.jumps.len() as f64;
        // switch_rate · duration = 3, se = √(3/2000)
        assert!((mean - 3.0).abs() < 4.0 * (3.0f64 / 2000.0).sqrt(), "{mean}");
    }

    #[test]
    fn drift_rms_scales_as_sqrt_time() {
        let (ens, res, w) = setup(2000);
        let noise = NoiseConfig { drift_sigma: 2.0 * MHZ, ..Default::default() };
        let ts = render_time_series(&ens, &res, &w, &noise, 36_000.0, 21, 8).unwrap();
        let last = ts.offsets.last().unwrap();
        let rms = (last.iter().map(|o| o * o).sum::<f64>() / last.len() as f64).sqrt();
        // 2 MHz/√hr × √10 hr ≈ 6.32 MHz
        assert!((rms - 6.3246 * MHZ).abs() < 0.05 * 6.3246 * MHZ, "{rms}");
    }
}
