//! Small dense optimizers shared by the fitting code: Levenberg–Marquardt
//! for least squares, BFGS for smooth scalar objectives, and adaptive
//! Gauss–Kronrod quadrature.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Relative reduction of the cost below which iteration stops.
    pub ftol: f64,
    /// Relative step size below which iteration stops.
    pub xtol: f64,
    /// Infinity norm of the scaled gradient below which iteration stops.
    pub gtol: f64,
    pub lambda0: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self { max_iter: 400, ftol: 1e-14, xtol: 1e-12, gtol: 1e-12, lambda0: 1e-3 }
    }
}

#[derive(Debug, Clone)]
pub struct LmReport {
    pub params: Vec<f64>,
    /// Sum of squared residuals at `params`.
    pub rss: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Residual Jacobian at the solution (m × n).
    pub jacobian: DMatrix<f64>,
}

impl LmReport {
    /// Parameter covariance s²(JᵀJ)⁻¹ with s² = rss/(m − n). `None` when
    /// the normal matrix is singular or there are no degrees of freedom.
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        let (m, n) = self.jacobian.shape();
        if m <= n {
            return None;
        }
        let jtj = self.jacobian.transpose() * &self.jacobian;
        let inv = jtj.try_inverse()?;
        let s2 = self.rss / (m - n) as f64;
        Some(inv * s2)
    }
}

fn eval_rss(r: &DVector<f64>) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// Central-difference Jacobian of a residual function. `typical` sets the
/// absolute step floor per parameter.
pub fn numeric_jacobian<F>(f: &F, x: &[f64], m: usize, typical: &[f64]) -> DMatrix<f64>
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = x.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut xp = x.to_vec();
    let mut rp = vec![0.0; m];
    let mut rm = vec![0.0; m];
    for j in 0..n {
        let h = 1e-6 * x[j].abs().max(typical[j]);
        xp[j] = x[j] + h;
        f(&xp, &mut rp);
        xp[j] = x[j] - h;
        f(&xp, &mut rm);
        xp[j] = x[j];
        for i in 0..m {
            jac[(i, j)] = (rp[i] - rm[i]) / (2.0 * h);
        }
    }
    jac
}

/// Minimizes Σ rᵢ(x)² with Marquardt-scaled damping and a numeric Jacobian.
///
/// `f(x, r)` writes `m` residuals into `r`. Non-finite residuals are treated
/// as an infinitely bad step.
pub fn levenberg_marquardt<F>(
    f: F,
    x0: &[f64],
    m: usize,
    typical: &[f64],
    opts: &LmOptions,
) -> Result<LmReport>
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = x0.len();
    if m < n {
        return Err(Error::InsufficientPoints { needed: n, got: m });
    }
    let mut x = x0.to_vec();
    let mut r = DVector::zeros(m);
    f(&x, r.as_mut_slice());
    let mut rss = eval_rss(&r);
    if !rss.is_finite() {
        return Err(Error::NonConvergence("residuals not finite at the initial point".into()));
    }
    let mut lambda = opts.lambda0;
    let mut jac = numeric_jacobian(&f, &x, m, typical);
    let mut converged = false;
    let mut iterations = 0;
    let mut trial = vec![0.0; n];
    let mut r_trial = DVector::zeros(m);

    'outer: while iterations < opts.max_iter {
        iterations += 1;
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        let diag: Vec<f64> = (0..n).map(|i| jtj[(i, i)].max(1e-300)).collect();
        let gmax = (0..n)
            .map(|i| (g[i] / diag[i].sqrt()).abs())
            .fold(0.0, f64::max);
        if gmax <= opts.gtol * rss.sqrt().max(1e-300) {
            converged = true;
            break;
        }
        loop {
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += lambda * diag[i];
            }
            let step = match a.cholesky() {
                Some(ch) => ch.solve(&(-&g)),
                None => {
                    lambda *= 10.0;
                    if lambda > 1e16 {
                        break 'outer;
                    }
                    continue;
                }
            };
            for i in 0..n {
                trial[i] = x[i] + step[i];
            }
            f(&trial, r_trial.as_mut_slice());
            let rss_trial = eval_rss(&r_trial);
            if rss_trial.is_finite() && rss_trial <= rss {
                let rel = (rss - rss_trial) / rss.max(1e-300);
                let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let snorm = step.norm();
                x.copy_from_slice(&trial);
                std::mem::swap(&mut r, &mut r_trial);
                rss = rss_trial;
                lambda = (lambda / 3.0).max(1e-12);
                if rel <= opts.ftol || snorm <= opts.xtol * (xnorm + opts.xtol) || rss == 0.0 {
                    converged = true;
                    break 'outer;
                }
                jac = numeric_jacobian(&f, &x, m, typical);
                break;
            }
            lambda *= 4.0;
            if lambda > 1e16 {
                // No descent possible at any damping: at a minimum to precision.
                converged = true;
                break 'outer;
            }
        }
    }
    let jacobian = numeric_jacobian(&f, &x, m, typical);
    Ok(LmReport { params: x, rss, iterations, converged, jacobian })
}

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Absolute change in the objective below which iteration stops.
    pub ftol: f64,
    pub gtol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { max_iter: 500, ftol: 1e-9, gtol: 1e-7 }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsReport {
    pub x: Vec<f64>,
    pub fx: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub fn numeric_gradient<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64]) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|j| {
            let h = 1e-6 * x[j].abs().max(1.0);
            xp[j] = x[j] + h;
            let fp = f(&xp);
            xp[j] = x[j] - h;
            let fm = f(&xp);
            xp[j] = x[j];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Central-difference Hessian.
pub fn numeric_hessian<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    let step: Vec<f64> = x.iter().map(|v| 1e-4 * v.abs().max(1.0)).collect();
    let mut xp = x.to_vec();
    let f0 = f(x);
    for i in 0..n {
        for j in i..n {
            let v = if i == j {
                xp[i] = x[i] + step[i];
                let fp = f(&xp);
                xp[i] = x[i] - step[i];
                let fm = f(&xp);
                xp[i] = x[i];
                (fp - 2.0 * f0 + fm) / (step[i] * step[i])
            } else {
                let mut acc = 0.0;
                for (si, sj, sign) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
                    xp[i] = x[i] + si * step[i];
                    xp[j] = x[j] + sj * step[j];
                    acc += sign * f(&xp);
                }
                xp[i] = x[i];
                xp[j] = x[j];
                acc / (4.0 * step[i] * step[j])
            };
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    h
}

/// Quasi-Newton minimization with a backtracking Armijo line search.
pub fn bfgs<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], opts: &BfgsOptions) -> BfgsReport {
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let mut fx = f(x.as_slice());
    let mut g = DVector::from_vec(numeric_gradient(&f, x.as_slice()));
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut converged = false;
    let mut iterations = 0;
    let mut small_steps = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        if g.amax() < opts.gtol {
            converged = true;
            break;
        }
        let mut dir = -(&hinv * &g);
        if dir.dot(&g) >= 0.0 {
            hinv = DMatrix::identity(n, n);
            dir = -g.clone();
        }
        let slope = dir.dot(&g);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn = &x + &dir * t;
            let fxn = f(xn.as_slice());
            if fxn.is_finite() && fxn <= fx + 1e-4 * t * slope {
                accepted = Some((xn, fxn));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fxn)) = accepted else {
            // Line search failed: the gradient is dominated by noise, which
            // only happens at the optimum to working precision.
            converged = g.amax() < 1e-3 || hinv == DMatrix::identity(n, n);
            break;
        };
        let gn = DVector::from_vec(numeric_gradient(&f, xn.as_slice()));
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(n, n);
            let a = &eye - &s * y.transpose() * rho;
            let b = &eye - &y * s.transpose() * rho;
            hinv = &a * &hinv * &b + &s * s.transpose() * rho;
        }
        let df = (fx - fxn).abs();
        x = xn;
        fx = fxn;
        g = gn;
        if df < opts.ftol {
            small_steps += 1;
            if small_steps >= 2 {
                converged = true;
                break;
            }
        } else {
            small_steps = 0;
        }
    }
    BfgsReport { x: x.as_slice().to_vec(), fx, iterations, converged }
}

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_WEIGHTS: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const GAUSS7_WEIGHTS: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = fc * GK_WEIGHTS[7];
    let mut gauss = fc * GAUSS7_WEIGHTS[3];
    for i in 0..7 {
        let dx = h * GK_NODES[i];
        let s = f(c - dx) + f(c + dx);
        kron += GK_WEIGHTS[i] * s;
        if i % 2 == 1 {
            gauss += GAUSS7_WEIGHTS[i / 2] * s;
        }
    }
    (kron * h, ((kron - gauss) * h).abs())
}

/// Adaptive Gauss–Kronrod (7/15) integration on a finite interval.
///
/// Fails with [`Error::NonConvergence`] when the error estimate does not
/// fall below `max(abs_tol, rel_tol·|I|)` within `max_intervals` splits.
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
    max_intervals: usize,
) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let mut pieces = vec![(a, b, gk15(&f, a, b))];
    loop {
        let total: f64 = pieces.iter().map(|p| p.2 .0).sum();
        let err: f64 = pieces.iter().map(|p| p.2 .1).sum();
        if err <= abs_tol.max(rel_tol * total.abs()) {
            return Ok(total);
        }
        if pieces.len() >= max_intervals {
            return Err(Error::NonConvergence(format!(
                "quadrature error {err:.3e} above tolerance after {max_intervals} intervals"
            )));
        }
        let (idx, _) = pieces
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .2 .1.total_cmp(&y.1 .2 .1))
            .unwrap();
        let (lo, hi, _) = pieces.swap_remove(idx);
        let mid = 0.5 * (lo + hi);
        pieces.push((lo, mid, gk15(&f, lo, mid)));
        pieces.push((mid, hi, gk15(&f, mid, hi)));
    }
}
