//! `L(P, D) = [ (P_c / P)^(a_P / a_D) + D_c / D ]^(a_D)`, fitted in log space.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{LmError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub params: f64,
    /// Training tokens; `f64::INFINITY` for the data-unlimited limit.
    pub tokens: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub p_c: f64,
    pub d_c: f64,
    pub alpha_p: f64,
    pub alpha_d: f64,
    /// Root mean square of `ln L_fit - ln L` over the points.
    pub residual: f64,
    pub points: usize,
    pub refine_iterations: usize,
    /// `true` when every point has `D = inf` and only `P_c, alpha_P` are fitted.
    pub power_law_only: bool,
}

impl ScalingFit {
    pub fn predict(&self, params: f64, tokens: f64) -> f64 {
        scaling_law(self.p_c, self.d_c, self.alpha_p, self.alpha_d, params, tokens)
    }
}

pub fn scaling_law(p_c: f64, d_c: f64, alpha_p: f64, alpha_d: f64, params: f64, tokens: f64) -> f64 {
    ((p_c / params).powf(alpha_p / alpha_d) + d_c / tokens).powf(alpha_d)
}

fn decades(xs: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = xs.fold((f64::INFINITY, 0.0f64), |(lo, hi), x| (lo.min(x), hi.max(x)));
    (hi / lo).log10()
}

/// Least-squares slope and intercept of `y` on `x`.
fn line_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// `L = (c / x)^alpha` by log-log regression; returns `(alpha, c, rms residual)`.
pub fn fit_power_law(x: &[f64], loss: &[f64]) -> Result<(f64, f64, f64)> {
    if x.len() < 2 || x.len() != loss.len() {
        return Err(LmError::Data("power-law fit needs at least two matching points".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = loss.iter().map(|v| v.ln()).collect();
    let (slope, icpt) = line_fit(&lx, &ly);
    let alpha = -slope;
    let c = (icpt / alpha).exp();
    let rms = (lx
        .iter()
        .zip(&ly)
        .map(|(a, b)| (slope * a + icpt - b).powi(2))
        .sum::<f64>()
        / lx.len() as f64)
        .sqrt();
    Ok((alpha, c, rms))
}

struct Data {
    lp: Vec<f64>,
    ld: Vec<f64>,
    ll: Vec<f64>,
}

/// theta = (ln P_c, ln D_c, alpha_P, alpha_D)
fn residuals_and_jacobian(d: &Data, th: &[f64; 4]) -> (DVector<f64>, DMatrix<f64>) {
    let n = d.ll.len();
    let (lpc, ldc, ap, ad) = (th[0], th[1], th[2], th[3]);
    let r = ap / ad;
    let mut res = DVector::zeros(n);
    let mut jac = DMatrix::zeros(n, 4);
    for k in 0..n {
        let x = lpc - d.lp[k];
        let a = (r * x).exp();
        let b = (ldc - d.ld[k]).exp();
        let s = a + b;
        let f = ad * s.ln();
        res[k] = f - d.ll[k];
        jac[(k, 0)] = ap * a / s;
        jac[(k, 1)] = ad * b / s;
        jac[(k, 2)] = a * x / s;
        jac[(k, 3)] = s.ln() - r * a * x / s;
    }
    (res, jac)
}

fn sse(d: &Data, th: &[f64; 4]) -> f64 {
    residuals_and_jacobian(d, th).0.norm_squared()
}

/// Best `(a, b) >= 0` for `y = a x1 + b x2` in least squares.
fn nonneg_ls2(x1: &[f64], x2: &[f64], y: &[f64]) -> (f64, f64) {
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let (s11, s22, s12) = (dot(x1, x1), dot(x2, x2), dot(x1, x2));
    let (t1, t2) = (dot(x1, y), dot(x2, y));
    let det = s11 * s22 - s12 * s12;
    if det > 0.0 {
        let a = (t1 * s22 - t2 * s12) / det;
        let b = (s11 * t2 - s12 * t1) / det;
        if a > 0.0 && b > 0.0 {
            return (a, b);
        }
    }
    let only_a = (t1 / s11).max(0.0);
    let only_b = (t2 / s22).max(0.0);
    let err_a: f64 = x1.iter().zip(y).map(|(x, y)| (only_a * x - y).powi(2)).sum();
    let err_b: f64 = x2.iter().zip(y).map(|(x, y)| (only_b * x - y).powi(2)).sum();
    if err_a <= err_b {
        (only_a, 0.0)
    } else {
        (0.0, only_b)
    }
}

/// Grid over `(alpha_P, alpha_D)` with the constants solved linearly on
/// `L^(1/alpha_D)`, then Levenberg-Marquardt on all four parameters.
pub fn fit_scaling(points: &[ScalingPoint]) -> Result<ScalingFit> {
    if points.len() < 6 {
        return Err(LmError::Data(format!("scaling fit needs at least 6 points, got {}", points.len())));
    }
    if points
        .iter()
        .any(|q| !(q.params > 0.0 && q.params.is_finite() && q.tokens > 0.0 && q.loss > 0.0 && q.loss.is_finite()))
    {
        return Err(LmError::Data("scaling points need positive finite P and L, and D > 0".into()));
    }
    let span_p = decades(points.iter().map(|q| q.params));
    if span_p < 1.0 {
        return Err(LmError::Data(format!(
            "parameter counts span {span_p:.2} decades; at least one decade in P (and in D) is needed to identify the exponents"
        )));
    }
    if points.iter().all(|q| q.tokens.is_infinite()) {
        let x: Vec<f64> = points.iter().map(|q| q.params).collect();
        let y: Vec<f64> = points.iter().map(|q| q.loss).collect();
        let (alpha, c, rms) = fit_power_law(&x, &y)?;
        return Ok(ScalingFit {
            p_c: c,
            d_c: 0.0,
            alpha_p: alpha,
            alpha_d: alpha,
            residual: rms,
            points: points.len(),
            refine_iterations: 0,
            power_law_only: true,
        });
    }
    if points.iter().any(|q| q.tokens.is_infinite()) {
        return Err(LmError::Data("mix of finite and infinite D is not supported".into()));
    }
    let span_d = decades(points.iter().map(|q| q.tokens));
    if span_d < 1.0 {
        return Err(LmError::Data(format!(
            "token counts span {span_d:.2} decades; at least one decade in D (and in P) is needed to identify the exponents"
        )));
    }
    let data = Data {
        lp: points.iter().map(|q| q.params.ln()).collect(),
        ld: points.iter().map(|q| q.tokens.ln()).collect(),
        ll: points.iter().map(|q| q.loss.ln()).collect(),
    };
    // coarse grid, log-spaced over [0.005, 2]
    let grid: Vec<f64> = (0..60).map(|k| 0.005 * (400f64).powf(k as f64 / 59.0)).collect();
    let mut best: Option<(f64, [f64; 4])> = None;
    for &ap in &grid {
        for &ad in &grid {
            let r = ap / ad;
            let x1: Vec<f64> = data.lp.iter().map(|lp| (-r * lp).exp()).collect();
            let x2: Vec<f64> = data.ld.iter().map(|ld| (-ld).exp()).collect();
            let y: Vec<f64> = data.ll.iter().map(|ll| (ll / ad).exp()).collect();
            if y.iter().any(|v| !v.is_finite()) {
                continue;
            }
            let (a, b) = nonneg_ls2(&x1, &x2, &y);
            if a <= 0.0 || b <= 0.0 {
                continue;
            }
            let th = [a.ln() / r, b.ln(), ap, ad];
            let e = sse(&data, &th);
            if e.is_finite() && best.as_ref().is_none_or(|(be, _)| e < *be) {
                best = Some((e, th));
            }
        }
    }
    let (mut err, mut th) = best.ok_or_else(|| LmError::Numeric("no grid point gives a finite fit".into()))?;
    let mut lambda = 1e-3;
    let mut iterations = 0;
    for _ in 0..500 {
        iterations += 1;
        let (res, jac) = residuals_and_jacobian(&data, &th);
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &res;
        let mut improved = false;
        for _ in 0..20 {
            let mut a = jtj.clone();
            for i in 0..4 {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&(-&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let cand = [th[0] + step[0], th[1] + step[1], th[2] + step[2], th[3] + step[3]];
            let e = if cand[2] > 0.0 && cand[3] > 0.0 { sse(&data, &cand) } else { f64::INFINITY };
            if e.is_finite() && e < err {
                let rel = (err - e) / err.max(1e-300);
                th = cand;
                err = e;
                lambda = (lambda / 3.0).max(1e-12);
                improved = rel > 1e-15;
                break;
            }
            lambda *= 10.0;
        }
        if !improved || err < 1e-28 {
            break;
        }
    }
    Ok(ScalingFit {
        p_c: th[0].exp(),
        d_c: th[1].exp(),
        alpha_p: th[2],
        alpha_d: th[3],
        residual: (err / points.len() as f64).sqrt(),
        points: points.len(),
        refine_iterations: iterations,
        power_law_only: false,
    })
}

/// Log-spaced grid of `n` values from `lo` to `hi`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|k| lo * (hi / lo).powf(k as f64 / (n - 1) as f64)).collect()
}

/// Points on a `P x D` grid from the law, optionally with multiplicative
/// noise `exp(sigma z)`.
pub fn synthetic_points(
    p_c: f64,
    d_c: f64,
    alpha_p: f64,
    alpha_d: f64,
    ps: &[f64],
    ds: &[f64],
    noise: Option<(f64, &mut crate::rng::Rng)>,
) -> Vec<ScalingPoint> {
    use rand_distr::{Distribution, Normal};
    let mut noise = noise;
    let mut out = Vec::new();
    for &p in ps {
        for &d in ds {
            let mut loss = scaling_law(p_c, d_c, alpha_p, alpha_d, p, d);
            if let Some((sigma, rng)) = noise.as_mut() {
                loss *= (*sigma * Normal::new(0.0, 1.0).expect("unit normal").sample(*rng)).exp();
            }
            out.push(ScalingPoint {
                params: p,
                tokens: d,
                loss,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn grid() -> (Vec<f64>, Vec<f64>) {
        (log_grid(1e5, 1e11, 9), log_grid(1e6, 1e12, 9))
    }

    #[test]
    fn noiseless_recovery() {
        let (ps, ds) = grid();
        let pts = synthetic_points(8.8e13, 5.4e13, 0.076, 0.095, &ps, &ds, None);
        let f = fit_scaling(&pts).unwrap();
        assert!((f.alpha_p / 0.076 - 1.0).abs() < 1e-6, "{f:?}");
        assert!((f.alpha_d / 0.095 - 1.0).abs() < 1e-6, "{f:?}");
        assert!(f.residual < 1e-8);
    }

    #[test]
    fn narrow_span_is_rejected() {
        let pts = synthetic_points(1e10, 1e10, 0.1, 0.1, &log_grid(1e6, 5e6, 3), &log_grid(1e8, 1e11, 3), None);
        let e = fit_scaling(&pts).unwrap_err();
        assert!(e.to_string().contains("decade"));
    }

    #[test]
    fn infinite_data_limit_is_a_power_law() {
        let ps = log_grid(1e5, 1e9, 8);
        let pts = synthetic_points(3e12, 1.0, 0.08, 0.1, &ps, &[f64::INFINITY], None);
        let f = fit_scaling(&pts).unwrap();
        assert!(f.power_law_only);
        let x: Vec<f64> = pts.iter().map(|q| q.params.ln()).collect();
        let y: Vec<f64> = pts.iter().map(|q| q.loss.ln()).collect();
        let slope = (y[7] - y[0]) / (x[7] - x[0]);
        assert!((f.alpha_p + slope).abs() < 1e-12);
        assert!((f.p_c / 3e12 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn noisy_median_within_ten_percent() {
        let (ps, ds) = grid();
        let mut ep = Vec::new();
        let mut ed = Vec::new();
        for seed in 0..20 {
            let mut rng = seeded(seed);
            let pts = synthetic_points(8.8e13, 5.4e13, 0.076, 0.095, &ps, &ds, Some((0.05, &mut rng)));
            let f = fit_scaling(&pts).unwrap();
            ep.push((f.alpha_p / 0.076 - 1.0).abs());
            ed.push((f.alpha_d / 0.095 - 1.0).abs());
        }
        let med = crate::analysis::stats::median;
        assert!(med(&ep) < 0.1 && med(&ed) < 0.1, "{} {}", med(&ep), med(&ed));
    }
}
