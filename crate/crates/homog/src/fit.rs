//! Least-squares line fits in log-log space, used for decay-law slopes
//! and convergence rates.

use serde::Serialize;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the fit in the transformed space.
    pub rms_residual: f64,
    pub points: usize,
}

/// Ordinary least squares on the given points.
pub fn fit_line(points: &[(f64, f64)]) -> LineFit {
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    let mut ss = 0.0;
    for (x, y) in points {
        let r = y - (slope * x + intercept);
        ss += r * r;
    }
    LineFit {
        slope,
        intercept,
        rms_residual: (ss / n).sqrt(),
        points: points.len(),
    }
}

/// Fit `log(value) ~ slope * log(scale) + c`. Non-positive values are
/// rejected by the caller's data preparation; here they would poison the
/// fit, so they are skipped.
pub fn fit_loglog(data: &[(f64, f64)]) -> LineFit {
    let pts: Vec<(f64, f64)> = data
        .iter()
        .filter(|(s, v)| *s > 0.0 && *v > 0.0)
        .map(|(s, v)| (s.ln(), v.ln()))
        .collect();
    fit_line(&pts)
}
