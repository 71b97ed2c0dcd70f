//! Closed-form marginals of finite-atom data under Gaussian smoothing.
//!
//! For data `X = Σ w_i δ_{y_i}` and the forward marginal `X_t = f·X + g·Z`,
//! the law of `X_t` is the Gaussian mixture
//!
//! ```text
//! q(x) = Σ_i w_i φ_{g²}(x − f·y_i)
//! ```
//!
//! and every derivative of `log q` is a moment of the posterior over atoms
//! (the "responsibilities" `r_i ∝ w_i exp(−‖x − f y_i‖² / 2g²)`):
//!
//! ```text
//! ∇log q       = −(x − f·E_r[y]) / g²
//! ∇²log q      = −(1/g²)·[I − (f²/g²)·Cov_r(y)]
//! ∇tr ∇²log q  = (f³/g⁶)·[Cov_r(‖y‖², y) − 2·Cov_r(y)·E_r[y]]
//! ```
//!
//! All mixture sums go through log-sum-exp; `g` near `10⁻²` otherwise
//! underflows the naive exponentials.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::forward::ForwardSpec;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Finitely supported data distribution with a support radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AtomCloudRepr", into = "AtomCloudRepr")]
pub struct AtomCloud {
    atoms: Vec<DVector<f64>>,
    weights: Vec<f64>,
    radius: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AtomCloudRepr {
    atoms: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl TryFrom<AtomCloudRepr> for AtomCloud {
    type Error = Error;

    fn try_from(repr: AtomCloudRepr) -> Result<Self> {
        let atoms = repr.atoms.into_iter().map(DVector::from_vec).collect();
        AtomCloud::new(atoms, repr.weights)
    }
}

impl From<AtomCloud> for AtomCloudRepr {
    fn from(cloud: AtomCloud) -> Self {
        AtomCloudRepr {
            atoms: cloud.atoms.iter().map(|a| a.iter().copied().collect()).collect(),
            weights: cloud.weights,
        }
    }
}

impl AtomCloud {
    /// Builds a cloud whose support radius is the largest atom norm.
    pub fn new(atoms: Vec<DVector<f64>>, weights: Vec<f64>) -> Result<Self> {
        let radius = atoms.iter().map(|a| a.norm()).fold(0.0, f64::max);
        Self::with_radius(atoms, weights, radius)
    }

    pub fn with_radius(atoms: Vec<DVector<f64>>, weights: Vec<f64>, radius: f64) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::input("atom cloud needs at least one atom"));
        }
        if atoms.len() != weights.len() {
            return Err(Error::input(format!(
                "{} atoms but {} weights",
                atoms.len(),
                weights.len()
            )));
        }
        let dim = atoms[0].len();
        if dim == 0 {
            return Err(Error::input("atoms must have dimension >= 1"));
        }
        for a in &atoms {
            check_dim(dim, a.len())?;
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::input("atom coordinates must be finite"));
            }
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::input("weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::input(format!("weights sum to {total}, expected 1")));
        }
        if !(radius >= 0.0) || !radius.is_finite() {
            return Err(Error::input("support radius must be finite and nonnegative"));
        }
        if let Some(a) = atoms.iter().find(|a| a.norm() > radius * (1.0 + 1e-12)) {
            return Err(Error::input(format!(
                "atom of norm {} exceeds support radius {radius}",
                a.norm()
            )));
        }
        Ok(AtomCloud {
            atoms,
            weights,
            radius,
        })
    }

    /// Equal-weight cloud on the given scalar atoms (d = 1).
    pub fn uniform_1d(points: &[f64]) -> Result<Self> {
        let w = 1.0 / points.len().max(1) as f64;
        Self::new(
            points.iter().map(|&p| DVector::from_element(1, p)).collect(),
            vec![w; points.len()],
        )
    }

    pub fn single(atom: DVector<f64>) -> Result<Self> {
        Self::new(vec![atom], vec![1.0])
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].len()
    }

    pub fn atoms(&self) -> &[DVector<f64>] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim());
        for (a, &w) in self.atoms.iter().zip(&self.weights) {
            m.axpy(w, a, 1.0);
        }
        m
    }

    /// `E‖X₀‖²`.
    pub fn second_moment(&self) -> f64 {
        self.atoms
            .iter()
            .zip(&self.weights)
            .map(|(a, &w)| w * a.norm_squared())
            .sum()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::input(format!("atom cloud json: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("atom cloud serializes")
    }
}

/// Data scaling `f` and noise scale `g` of `X_t = f·X₀ + g·Z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalScaling {
    pub f: f64,
    pub g: f64,
}

impl MarginalScaling {
    pub fn new(f: f64, g: f64) -> Result<Self> {
        if !f.is_finite() || !g.is_finite() {
            return Err(Error::domain("marginal scaling must be finite"));
        }
        if g <= 0.0 {
            return Err(Error::domain(format!("noise scale g = {g} must be positive")));
        }
        Ok(MarginalScaling { f, g })
    }

    pub fn variance(&self) -> f64 {
        self.g * self.g
    }
}

/// Posterior moments of the atom index given an observation `x`.
///
/// Computing these once is enough for the density, score, Hessian, trace and
/// trace gradient at `x`.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub resp: Vec<f64>,
    /// `log q(x)`.
    pub log_density: f64,
    /// `E_r[y]`.
    pub mean: DVector<f64>,
    /// `Cov_r(y)`.
    pub cov: DMatrix<f64>,
    /// `Cov_r(‖y‖², y)`.
    pub norm_cross: DVector<f64>,
    scaling: MarginalScaling,
    x: DVector<f64>,
}

impl Posterior {
    pub fn compute(cloud: &AtomCloud, ms: MarginalScaling, x: &DVector<f64>) -> Result<Self> {
        check_dim(cloud.dim(), x.len())?;
        let d = cloud.dim();
        let var = ms.variance();
        let logits: Vec<f64> = cloud
            .atoms
            .iter()
            .zip(&cloud.weights)
            .map(|(y, &w)| {
                if w == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    let mut sq = 0.0;
                    for j in 0..d {
                        let r = x[j] - ms.f * y[j];
                        sq += r * r;
                    }
                    w.ln() - sq / (2.0 * var)
                }
            })
            .collect();
        let (lse, resp) = softmax(&logits);
        let log_density = lse - 0.5 * d as f64 * (LN_2PI + var.ln());

        let mut mean = DVector::zeros(d);
        for (y, &r) in cloud.atoms.iter().zip(&resp) {
            mean.axpy(r, y, 1.0);
        }
        let mut cov = DMatrix::zeros(d, d);
        let mut sq_mean = 0.0;
        for (y, &r) in cloud.atoms.iter().zip(&resp) {
            sq_mean += r * y.norm_squared();
        }
        let mut norm_cross = DVector::zeros(d);
        for (y, &r) in cloud.atoms.iter().zip(&resp) {
            if r == 0.0 {
                continue;
            }
            let c = y - &mean;
            cov.ger(r, &c, &c, 1.0);
            norm_cross.axpy(r * (y.norm_squared() - sq_mean), &c, 1.0);
        }
        Ok(Posterior {
            resp,
            log_density,
            mean,
            cov,
            norm_cross,
            scaling: ms,
            x: x.clone(),
        })
    }

    pub fn score(&self) -> DVector<f64> {
        let MarginalScaling { f, g } = self.scaling;
        (&self.x - &self.mean * f) * (-1.0 / (g * g))
    }

    pub fn score_jacobian(&self) -> DMatrix<f64> {
        let MarginalScaling { f, g } = self.scaling;
        let g2 = g * g;
        let d = self.x.len();
        let mut jac = &self.cov * (f * f / (g2 * g2));
        for i in 0..d {
            jac[(i, i)] -= 1.0 / g2;
        }
        // Symmetrize against rounding in the rank-one updates.
        for i in 0..d {
            for j in (i + 1)..d {
                let v = 0.5 * (jac[(i, j)] + jac[(j, i)]);
                jac[(i, j)] = v;
                jac[(j, i)] = v;
            }
        }
        jac
    }

    pub fn score_divergence(&self) -> f64 {
        let MarginalScaling { f, g } = self.scaling;
        let g2 = g * g;
        let d = self.x.len() as f64;
        -d / g2 + f * f / (g2 * g2) * self.cov.trace()
    }

    pub fn grad_trace_hessian(&self) -> DVector<f64> {
        let MarginalScaling { f, g } = self.scaling;
        let g2 = g * g;
        let scale = f * f * f / (g2 * g2 * g2);
        (&self.norm_cross - &self.cov * &self.mean * 2.0) * scale
    }
}

/// Log-sum-exp and the normalized weights of a logit vector.
pub(crate) fn softmax(logits: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    for e in &mut exps {
        *e /= sum;
    }
    (max + sum.ln(), exps)
}

pub fn marginal_density(cloud: &AtomCloud, ms: MarginalScaling, x: &DVector<f64>) -> Result<f64> {
    Ok(log_marginal_density(cloud, ms, x)?.exp())
}

pub fn log_marginal_density(
    cloud: &AtomCloud,
    ms: MarginalScaling,
    x: &DVector<f64>,
) -> Result<f64> {
    check_dim(cloud.dim(), x.len())?;
    let d = cloud.dim();
    let var = ms.variance();
    let logits: Vec<f64> = cloud
        .atoms
        .iter()
        .zip(&cloud.weights)
        .map(|(y, &w)| {
            if w == 0.0 {
                f64::NEG_INFINITY
            } else {
                w.ln() - (x - y * ms.f).norm_squared() / (2.0 * var)
            }
        })
        .collect();
    Ok(softmax(&logits).0 - 0.5 * d as f64 * (LN_2PI + var.ln()))
}

pub fn responsibilities(
    cloud: &AtomCloud,
    ms: MarginalScaling,
    x: &DVector<f64>,
) -> Result<Vec<f64>> {
    Ok(Posterior::compute(cloud, ms, x)?.resp)
}

pub fn score(cloud: &AtomCloud, ms: MarginalScaling, x: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(Posterior::compute(cloud, ms, x)?.score())
}

pub fn score_jacobian(
    cloud: &AtomCloud,
    ms: MarginalScaling,
    x: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    Ok(Posterior::compute(cloud, ms, x)?.score_jacobian())
}

pub fn score_divergence(cloud: &AtomCloud, ms: MarginalScaling, x: &DVector<f64>) -> Result<f64> {
    Ok(Posterior::compute(cloud, ms, x)?.score_divergence())
}

pub fn grad_trace_hessian(
    cloud: &AtomCloud,
    ms: MarginalScaling,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    Ok(Posterior::compute(cloud, ms, x)?.grad_trace_hessian())
}

/// Time derivatives of the score and of its divergence.
#[derive(Debug, Clone)]
pub struct TimeDerivatives {
    pub score: DVector<f64>,
    pub trace_hessian: f64,
}

/// `∂_t ∇log q_t(x)` and `∂_t tr ∇²log q_t(x)` by central differences with one
/// Richardson extrapolation, `h = 1e−4·max(t, 10⁻³)`.
pub fn time_derivatives(
    cloud: &AtomCloud,
    fs: &ForwardSpec,
    t: f64,
    x: &DVector<f64>,
) -> Result<TimeDerivatives> {
    let h = 1e-4 * t.max(1e-3);
    if !(t - h > 0.0) || !t.is_finite() {
        return Err(Error::domain(format!(
            "time {t} is at the boundary of the forward time domain"
        )));
    }
    let central = |h: f64| -> Result<(DVector<f64>, f64)> {
        let plus = Posterior::compute(cloud, fs.scaling(t + h)?, x)?;
        let minus = Posterior::compute(cloud, fs.scaling(t - h)?, x)?;
        let ds = (plus.score() - minus.score()) / (2.0 * h);
        let dtr = (plus.score_divergence() - minus.score_divergence()) / (2.0 * h);
        Ok((ds, dtr))
    };
    let (s_h, tr_h) = central(h)?;
    let (s_h2, tr_h2) = central(0.5 * h)?;
    Ok(TimeDerivatives {
        score: (s_h2 * 4.0 - s_h) / 3.0,
        trace_hessian: (4.0 * tr_h2 - tr_h) / 3.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    fn ms(f: f64, g: f64) -> MarginalScaling {
        MarginalScaling::new(f, g).unwrap()
    }

    #[test]
    fn standard_normal_mode() {
        let cloud = AtomCloud::single(dvector![0.0]).unwrap();
        let p = marginal_density(&cloud, ms(1.0, 1.0), &dvector![0.0]).unwrap();
        assert_relative_eq!(p, 0.398_942_280_401_432_7, epsilon = 1e-15);
    }

    #[test]
    fn symmetric_pair_collapses_to_shifted_normal() {
        let cloud = AtomCloud::uniform_1d(&[-1.0, 1.0]).unwrap();
        let p = marginal_density(&cloud, ms(1.0, 1.0), &dvector![0.0]).unwrap();
        let expected = (-0.5f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert_relative_eq!(p, expected, max_relative = 1e-14);
        let r = responsibilities(&cloud, ms(1.0, 0.3), &dvector![0.0]).unwrap();
        assert_relative_eq!(r[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(r[1], 0.5, epsilon = 1e-15);
        assert_relative_eq!(score(&cloud, ms(1.0, 1.0), &dvector![0.0]).unwrap()[0], 0.0);
        let jac = score_jacobian(&cloud, ms(1.0, 1.0), &dvector![0.0]).unwrap();
        assert!(jac[(0, 0)].abs() < 1e-15);
        assert!(score_divergence(&cloud, ms(1.0, 1.0), &dvector![0.0]).unwrap().abs() < 1e-15);
        assert!(grad_trace_hessian(&cloud, ms(1.0, 1.0), &dvector![0.0]).unwrap()[0].abs() < 1e-15);
    }

    #[test]
    fn single_atom_reduces_to_gaussian() {
        let y = dvector![0.4, -0.2, 1.0];
        let cloud = AtomCloud::single(y.clone()).unwrap();
        let s = ms(0.7, 0.5);
        let x = dvector![1.0, 2.0, -0.5];
        let post = Posterior::compute(&cloud, s, &x).unwrap();
        let expected = -(&x - &y * 0.7) / 0.25;
        assert_relative_eq!(post.score(), expected, epsilon = 1e-12);
        assert_relative_eq!(
            post.score_jacobian(),
            DMatrix::identity(3, 3) * (-1.0 / 0.25),
            epsilon = 1e-12
        );
        assert_relative_eq!(post.grad_trace_hessian().norm(), 0.0);
        let unit = AtomCloud::single(DVector::zeros(3)).unwrap();
        let div = score_divergence(&unit, ms(0.3, 1.0), &x).unwrap();
        assert_relative_eq!(div, -3.0, epsilon = 1e-15);
    }

    #[test]
    fn extreme_separation_does_not_underflow() {
        let cloud = AtomCloud::uniform_1d(&[-2.0, 2.0]).unwrap();
        let x = dvector![1.7];
        let post = Posterior::compute(&cloud, ms(1.0, 1e-2), &x).unwrap();
        assert!(post.log_density.is_finite());
        assert!(post.resp.iter().all(|r| r.is_finite()));
        assert_relative_eq!(post.resp.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let far = dvector![50.0];
        let post = Posterior::compute(&cloud, ms(1.0, 1e-2), &far).unwrap();
        assert!(post.log_density.is_finite() && post.log_density < -1e6);
        assert_relative_eq!(post.score()[0], -(50.0 - 2.0) / 1e-4, max_relative = 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let cloud = AtomCloud::single(dvector![0.0, 0.0]).unwrap();
        let err = score(&cloud, ms(1.0, 1.0), &dvector![0.0]).unwrap_err();
        assert_eq!(err, Error::DimensionMismatch { expected: 2, got: 1 });
    }

    #[test]
    fn invalid_clouds_are_rejected() {
        assert!(AtomCloud::new(vec![], vec![]).is_err());
        assert!(AtomCloud::uniform_1d(&[1.0]).is_ok());
        assert!(AtomCloud::new(vec![dvector![1.0]], vec![0.9]).is_err());
        assert!(AtomCloud::new(vec![dvector![1.0], dvector![1.0, 2.0]], vec![0.5, 0.5]).is_err());
        assert!(AtomCloud::with_radius(vec![dvector![2.0]], vec![1.0], 1.0).is_err());
        assert!(MarginalScaling::new(1.0, 0.0).is_err());
    }

    #[test]
    fn json_round_trip_derives_radius() {
        let cloud = AtomCloud::from_json(r#"{"atoms": [[3.0, 4.0], [0.0, 1.0]], "weights": [0.25, 0.75]}"#)
            .unwrap();
        assert_relative_eq!(cloud.radius(), 5.0);
        let again = AtomCloud::from_json(&cloud.to_json()).unwrap();
        assert_eq!(cloud, again);
        assert!(AtomCloud::from_json(r#"{"atoms": [[1.0]], "weights": [1.0], "extra": 1}"#).is_err());
    }

    #[test]
    fn time_derivative_rejects_boundary() {
        let cloud = AtomCloud::single(dvector![0.0]).unwrap();
        let fs = ForwardSpec::vp();
        assert!(matches!(
            time_derivatives(&cloud, &fs, 0.0, &dvector![1.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn time_derivative_single_atom_matches_analytic() {
        let cloud = AtomCloud::single(dvector![0.0]).unwrap();
        let x = dvector![1.3];
        for &t in &[0.05, 0.3, 1.0, 2.5] {
            // VP: score = −x/(1 − e^{−2t}), so ∂_t score = x·2e^{−2t}/(1 − e^{−2t})².
            let vp = time_derivatives(&cloud, &ForwardSpec::vp(), t, &x).unwrap();
            let g2 = 1.0 - (-2.0 * t).exp();
            let exact = x[0] * 2.0 * (-2.0 * t).exp() / (g2 * g2);
            assert_relative_eq!(vp.score[0], exact, max_relative = 1e-5);
            // VE: score = −x/t, so ∂_t score = x/t².
            let ve = time_derivatives(&cloud, &ForwardSpec::ve(), t, &x).unwrap();
            assert_relative_eq!(ve.score[0], x[0] / (t * t), max_relative = 1e-5);
            assert_relative_eq!(ve.trace_hessian, 1.0 / (t * t), max_relative = 1e-5);
        }
    }
}
