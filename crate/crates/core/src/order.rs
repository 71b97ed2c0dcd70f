//! Log-log slope fitting for convergence studies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderFit {
    pub slope: f64,
    /// One standard error of the slope.
    pub half_width: f64,
    pub intercept: f64,
    /// Root-mean-square residual in log space.
    pub residual: f64,
}

/// Least-squares fit of `log(error) = intercept + slope·log(x)`.
pub fn fit_order(pairs: &[(f64, f64)]) -> Result<OrderFit> {
    if pairs.len() < 4 {
        return Err(Error::input(format!(
            "order fit needs at least 4 points, got {}",
            pairs.len()
        )));
    }
    if let Some(&(x, e)) = pairs.iter().find(|(x, e)| !(*x > 0.0) || !(*e > 0.0)) {
        return Err(Error::input(format!(
            "order fit needs positive values, got ({x}, {e})"
        )));
    }
    let n = pairs.len() as f64;
    let lx: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::input("order fit needs at least two distinct x values"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let half_width = (ssr / (n - 2.0) / sxx).sqrt();
    Ok(OrderFit {
        slope,
        half_width,
        intercept,
        residual: (ssr / n).sqrt(),
    })
}
