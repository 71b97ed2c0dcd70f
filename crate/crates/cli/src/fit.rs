//! Least-squares order fits.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Fitted line `y = intercept + slope·x` with the slope's standard error as
/// half-width and the RMS residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub half_width: f64,
    pub intercept: f64,
    pub residual: f64,
    pub points: usize,
}

/// Weighted least squares; `weights` of `None` means unit weights.
pub fn fit_line(x: &[f64], y: &[f64], weights: Option<&[f64]>) -> Result<SlopeFit> {
    let n = x.len();
    if n != y.len() || weights.is_some_and(|w| w.len() != n) {
        return Err(LabError::Input("fit inputs differ in length".into()));
    }
    if n < 3 {
        return Err(LabError::Input(format!("a line fit needs at least 3 points, got {n}")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(LabError::Input("fit inputs must be finite".into()));
    }
    let w: Vec<f64> = match weights {
        Some(w) => w.to_vec(),
        None => vec![1.0; n],
    };
    if w.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(LabError::Input("fit weights must be positive".into()));
    }
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(&w).map(|(a, b)| b * (a - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(LabError::Input("fit abscissae are all equal".into()));
    }
    let sxy: f64 = x.iter().zip(y).zip(&w).map(|((a, c), b)| b * (a - mx) * (c - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = x
        .iter()
        .zip(y)
        .zip(&w)
        .map(|((a, c), b)| b * (c - intercept - slope * a).powi(2))
        .sum();
    let dof = (n - 2) as f64;
    // Known-variance weights give 1/Sxx; the residual scale is used when it is
    // larger, so unmodelled scatter still widens the interval.
    let scale = if weights.is_some() { (ssr / dof).max(1.0) } else { ssr / dof };
    Ok(SlopeFit {
        slope,
        half_width: (scale / sxx).sqrt(),
        intercept,
        residual: (ssr / sw).sqrt(),
        points: n,
    })
}

/// Slope of `log error` against `log x`.
pub fn fit_order(pairs: &[(f64, f64)]) -> Result<SlopeFit> {
    if pairs.len() < 4 {
        return Err(LabError::Input(format!("an order fit needs at least 4 pairs, got {}", pairs.len())));
    }
    if pairs.iter().any(|(x, e)| !(*x > 0.0) || !(*e > 0.0)) {
        return Err(LabError::Input("order fits need positive values".into()));
    }
    let (x, y): (Vec<f64>, Vec<f64>) = pairs.iter().map(|(x, e)| (x.ln(), e.ln())).unzip();
    fit_line(&x, &y, None)
}

/// As [`fit_order`], with each error's standard error folded in as a
/// log-space weight `(e/σ)²`.
pub fn fit_order_weighted(pairs: &[(f64, f64)], stderr: &[f64]) -> Result<SlopeFit> {
    if pairs.len() < 4 {
        return Err(LabError::Input(format!("an order fit needs at least 4 pairs, got {}", pairs.len())));
    }
    if pairs.iter().any(|(x, e)| !(*x > 0.0) || !(*e > 0.0)) {
        return Err(LabError::Input("order fits need positive values".into()));
    }
    if stderr.len() != pairs.len() || stderr.iter().any(|s| !(*s > 0.0)) {
        return Err(LabError::Input("one positive standard error per pair is required".into()));
    }
    let (x, y): (Vec<f64>, Vec<f64>) = pairs.iter().map(|(x, e)| (x.ln(), e.ln())).unzip();
    let w: Vec<f64> = pairs.iter().zip(stderr).map(|((_, e), s)| (e / s).powi(2)).collect();
    fit_line(&x, &y, Some(&w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn exact_inverse_law() {
        let pairs: Vec<(f64, f64)> = [64.0, 128.0, 256.0, 512.0, 1024.0].iter().map(|&n| (n, 3.0 / n)).collect();
        let fit = fit_order(&pairs).unwrap();
        assert!((fit.slope + 1.0).abs() < 1e-12);
        assert!(fit.half_width < 1e-12);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn inverse_square_root_law() {
        let pairs: Vec<(f64, f64)> = (1..=6).map(|k| (k as f64, 0.7 / (k as f64).sqrt())).collect();
        assert!((fit_order(&pairs).unwrap().slope + 0.5).abs() < 1e-12);
    }

    #[test]
    fn noisy_inverse_law() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let pairs: Vec<(f64, f64)> = (0..6)
                .map(|k| {
                    let n = 64.0 * 2f64.powi(k);
                    (n, (1.0 + 0.05 * (2.0 * rng.random::<f64>() - 1.0)) / n)
                })
                .collect();
            let fit = fit_order(&pairs).unwrap();
            assert!((fit.slope + 1.0).abs() <= 0.1, "{fit:?}");
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(fit_order(&[(1.0, 1.0), (2.0, 0.5), (3.0, 0.0), (4.0, 0.2)]).is_err());
        assert!(fit_order(&[(1.0, 1.0), (2.0, 0.5), (3.0, 0.3)]).is_err());
        assert!(fit_order(&[(-1.0, 1.0), (2.0, 0.5), (3.0, 0.3), (4.0, 0.2)]).is_err());
    }

    #[test]
    fn weighted_fit_downweights_noisy_point() {
        let mut pairs: Vec<(f64, f64)> = (0..5).map(|k| (2f64.powi(k), 1.0 / 2f64.powi(k))).collect();
        pairs[4].1 *= 3.0;
        let mut se: Vec<f64> = pairs.iter().map(|(_, e)| 1e-4 * e).collect();
        se[4] = 10.0 * pairs[4].1;
        let fit = fit_order_weighted(&pairs, &se).unwrap();
        assert!((fit.slope + 1.0).abs() < 1e-3, "{fit:?}");
        assert!(fit_order(&pairs).unwrap().slope > -0.8);
    }
}
