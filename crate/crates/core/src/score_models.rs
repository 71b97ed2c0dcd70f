//! Score fields consumed by the samplers.
//!
//! Fields are indexed by forward time `τ`: a reverse step at time `t` queries
//! `s(T − t, x)`.

use nalgebra::{Complex, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic_data::{AtomCloud, Posterior};
use crate::error::{check_dim, Error, Result};
use crate::forward::{sample_scaled, ForwardSpec, TimeGrid};
use crate::quadrature::GaussLegendre;
use crate::rng;

/// Score value and Jacobian at one point.
#[derive(Debug, Clone)]
pub struct FieldEval {
    pub score: DVector<f64>,
    pub jacobian: DMatrix<f64>,
}

impl FieldEval {
    pub fn divergence(&self) -> f64 {
        self.jacobian.trace()
    }
}

pub trait ScoreField: Send + Sync {
    fn dim(&self) -> usize;

    fn score(&self, tau: f64, x: &DVector<f64>) -> Result<DVector<f64>>;

    fn eval(&self, tau: f64, x: &DVector<f64>) -> Result<FieldEval>;

    fn jacobian(&self, tau: f64, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.eval(tau, x)?.jacobian)
    }

    fn divergence(&self, tau: f64, x: &DVector<f64>) -> Result<f64> {
        Ok(self.jacobian(tau, x)?.trace())
    }

    fn spec(&self) -> FieldSpec;
}

/// Serializable description of a field variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    Exact,
    /// The exact score plus `amplitude·sin(wavenumber·x)` in every coordinate.
    Perturbed { amplitude: f64, wavenumber: u32 },
    SineCounterexample {
        n: u32,
        #[serde(rename = "T")]
        horizon: f64,
    },
    Zero,
}

impl FieldSpec {
    pub fn build(&self, cloud: &AtomCloud, fs: &ForwardSpec) -> Result<Box<dyn ScoreField>> {
        Ok(match *self {
            FieldSpec::Exact => Box::new(exact_field(cloud, fs)),
            FieldSpec::Perturbed {
                amplitude,
                wavenumber,
            } => Box::new(perturbed_field(
                Box::new(exact_field(cloud, fs)),
                amplitude,
                wavenumber,
            )?),
            FieldSpec::SineCounterexample { n, horizon } => {
                if cloud.dim() != 1 {
                    return Err(Error::input("the sine counterexample field is one-dimensional"));
                }
                Box::new(sine_counterexample_field(n, horizon)?)
            }
            FieldSpec::Zero => Box::new(ZeroField { dim: cloud.dim() }),
        })
    }
}

/// `∇log q_τ` of a smoothed atom cloud.
#[derive(Debug, Clone)]
pub struct ExactField {
    cloud: AtomCloud,
    fs: ForwardSpec,
}

pub fn exact_field(cloud: &AtomCloud, fs: &ForwardSpec) -> ExactField {
    ExactField {
        cloud: cloud.clone(),
        fs: *fs,
    }
}

impl ExactField {
    pub fn cloud(&self) -> &AtomCloud {
        &self.cloud
    }

    pub fn forward(&self) -> &ForwardSpec {
        &self.fs
    }

    pub fn posterior(&self, tau: f64, x: &DVector<f64>) -> Result<Posterior> {
        Posterior::compute(&self.cloud, self.fs.scaling(tau)?, x)
    }
}

impl ScoreField for ExactField {
    fn dim(&self) -> usize {
        self.cloud.dim()
    }

    fn score(&self, tau: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.posterior(tau, x)?.score())
    }

    fn eval(&self, tau: f64, x: &DVector<f64>) -> Result<FieldEval> {
        let post = self.posterior(tau, x)?;
        Ok(FieldEval {
            score: post.score(),
            jacobian: post.score_jacobian(),
        })
    }

    fn divergence(&self, tau: f64, x: &DVector<f64>) -> Result<f64> {
        Ok(self.posterior(tau, x)?.score_divergence())
    }

    fn spec(&self) -> FieldSpec {
        FieldSpec::Exact
    }
}

pub struct PerturbedField {
    base: Box<dyn ScoreField>,
    amplitude: f64,
    wavenumber: u32,
}

pub fn perturbed_field(
    base: Box<dyn ScoreField>,
    amplitude: f64,
    wavenumber: u32,
) -> Result<PerturbedField> {
    if !(amplitude >= 0.0) || !amplitude.is_finite() {
        return Err(Error::input(format!("amplitude {amplitude} must be nonnegative")));
    }
    if wavenumber < 1 {
        return Err(Error::input("wavenumber must be at least 1"));
    }
    Ok(PerturbedField {
        base,
        amplitude,
        wavenumber,
    })
}

impl ScoreField for PerturbedField {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn score(&self, tau: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let m = self.wavenumber as f64;
        let mut s = self.base.score(tau, x)?;
        for (si, xi) in s.iter_mut().zip(x.iter()) {
            *si += self.amplitude * (m * xi).sin();
        }
        Ok(s)
    }

    fn eval(&self, tau: f64, x: &DVector<f64>) -> Result<FieldEval> {
        let m = self.wavenumber as f64;
        let mut ev = self.base.eval(tau, x)?;
        for (i, xi) in x.iter().enumerate() {
            let (sin, cos) = (m * xi).sin_cos();
            ev.score[i] += self.amplitude * sin;
            ev.jacobian[(i, i)] += self.amplitude * m * cos;
        }
        Ok(ev)
    }

    fn spec(&self) -> FieldSpec {
        match self.base.spec() {
            FieldSpec::Exact => FieldSpec::Perturbed {
                amplitude: self.amplitude,
                wavenumber: self.wavenumber,
            },
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ZeroField {
    pub dim: usize,
}

impl ScoreField for ZeroField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, _tau: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim, x.len())?;
        Ok(DVector::zeros(self.dim))
    }

    fn eval(&self, _tau: f64, x: &DVector<f64>) -> Result<FieldEval> {
        check_dim(self.dim, x.len())?;
        Ok(FieldEval {
            score: DVector::zeros(self.dim),
            jacobian: DMatrix::zeros(self.dim, self.dim),
        })
    }

    fn spec(&self) -> FieldSpec {
        FieldSpec::Zero
    }
}

/// One-dimensional field whose probability flow, started from `N(0,1)` on the
/// VP process over `[0, T]`, carries the law `φ(x)(1 + c·sin(2nπx))` with
/// `c = (T − τ)/(2T)`, while staying within `1/(Tnπ)` of the score `−x`.
#[derive(Debug, Clone)]
pub struct SineCounterexample {
    n: u32,
    horizon: f64,
    omega: f64,
    rule: GaussLegendre,
}

pub fn sine_counterexample_field(n: u32, horizon: f64) -> Result<SineCounterexample> {
    if n < 1 {
        return Err(Error::input("counterexample frequency n must be at least 1"));
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::input(format!("horizon {horizon} must be positive")));
    }
    Ok(SineCounterexample {
        n,
        horizon,
        omega: 2.0 * std::f64::consts::PI * n as f64,
        rule: GaussLegendre::new(16),
    })
}

impl SineCounterexample {
    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    /// Modulation depth `c = (T − τ)/(2T)`.
    pub fn depth(&self, tau: f64) -> f64 {
        (self.horizon - tau) / (2.0 * self.horizon)
    }

    /// Density `φ(x)(1 + c·sin(2nπx))` transported by the field.
    pub fn density(&self, tau: f64, x: f64) -> f64 {
        std_normal_pdf(x) * (1.0 + self.depth(tau) * (self.omega * x).sin())
    }

    /// Probability flux `(s + x)·q̂ = I(x)/(2T)`, where
    /// `I(x) = ∫_x^∞ φ(y) sin(2nπy) dy`; it does not depend on time.
    pub fn flux(&self, x: f64) -> f64 {
        std_normal_pdf(x) * self.tail_ratio(x) / (2.0 * self.horizon)
    }

    /// `I(x)/φ(x)`.
    ///
    /// With `y = |x| + u` the ratio is `∫₀^∞ e^{−|x|u − u²/2} sin(ω(|x| + u)) du`
    /// (`I` is even). The integral is truncated where the exponent reaches
    /// −40 and evaluated with 16-point Gauss–Legendre panels that tile the
    /// sine period. Panel-to-panel factors are advanced by multiplication and
    /// re-anchored every 64 panels.
    ///
    /// When `|x − iω|² ≥ 400` the ratio is instead summed from
    /// `Im[e^{iωx}/(x − iω)·Σ_k (−1)^k (2k−1)!!/(x − iω)^{2k}]`, the asymptotic
    /// expansion of the complex `erfcx`, whose terms there fall below
    /// rounding long before they start to grow.
    pub fn tail_ratio(&self, x: f64) -> f64 {
        let w = Complex::new(x.abs(), -self.omega);
        if w.norm_sqr() >= 400.0 {
            return asymptotic_tail_ratio(x.abs(), self.omega, w);
        }
        self.panel_tail_ratio(x)
    }

    fn panel_tail_ratio(&self, x: f64) -> f64 {
        let a = x.abs();
        let omega = self.omega;
        let upper = (-a + (a * a + 80.0).sqrt()).min(12.0);
        let period = 2.0 * std::f64::consts::PI / omega;
        let per_period = (2.0 * (1.0 + a + upper) * period).ceil().max(1.0);
        let w = period / per_period;
        let panels = (upper / w).ceil() as usize;
        let nodes = self.rule.len();
        let half = 0.5 * w;
        let nu: Vec<f64> = self.rule.nodes.iter().map(|&xi| half * (1.0 + xi)).collect();
        let wts: Vec<f64> = self.rule.weights.iter().map(|&wi| half * wi).collect();
        let beta: Vec<f64> = nu.iter().map(|&v| (-w * v).exp()).collect();
        let (rot_s, rot_c) = (omega * w).sin_cos();
        let r = (-w * w).exp();

        let mut node_exp = vec![0.0; nodes];
        let mut node_sin = vec![0.0; nodes];
        let mut node_cos = vec![0.0; nodes];
        let mut panel_exp = 0.0;
        let mut panel_ratio = 0.0;
        let mut total = 0.0;
        for p in 0..panels {
            if p % 64 == 0 {
                let start = p as f64 * w;
                panel_exp = (-a * start - 0.5 * start * start).exp();
                panel_ratio = (-a * w - 0.5 * w * w - start * w).exp();
                for j in 0..nodes {
                    node_exp[j] = (-(a + start) * nu[j] - 0.5 * nu[j] * nu[j]).exp();
                    let (s, c) = (omega * (a + start + nu[j])).sin_cos();
                    node_sin[j] = s;
                    node_cos[j] = c;
                }
            }
            let mut acc = 0.0;
            for j in 0..nodes {
                acc += wts[j] * node_exp[j] * node_sin[j];
            }
            total += panel_exp * acc;
            panel_exp *= panel_ratio;
            panel_ratio *= r;
            for j in 0..nodes {
                node_exp[j] *= beta[j];
                let s = node_sin[j] * rot_c + node_cos[j] * rot_s;
                let c = node_cos[j] * rot_c - node_sin[j] * rot_s;
                node_sin[j] = s;
                node_cos[j] = c;
            }
        }
        total
    }

    fn eval_scalar(&self, tau: f64, x: f64) -> (f64, f64) {
        let c = self.depth(tau);
        let (sin, cos) = (self.omega * x).sin_cos();
        let ratio = self.tail_ratio(x);
        let m = 1.0 + c * sin;
        let two_t = 2.0 * self.horizon;
        let s = ratio / (two_t * m) - x;
        let dratio = -sin + x * ratio;
        let ds = (dratio * m - ratio * c * self.omega * cos) / (two_t * m * m) - 1.0;
        (s, ds)
    }
}

fn asymptotic_tail_ratio(x: f64, omega: f64, w: Complex<f64>) -> f64 {
    let inv_w2 = (w * w).inv();
    let mut term = Complex::new(1.0, 0.0);
    let mut sum = term;
    for k in 1..60 {
        let next = term * inv_w2 * (-(2.0 * k as f64 - 1.0));
        if next.norm() > term.norm() {
            break;
        }
        term = next;
        sum += term;
        if term.norm() < 1e-18 * sum.norm() {
            break;
        }
    }
    let (s, c) = (omega * x).sin_cos();
    (Complex::new(c, s) * sum / w).im
}

impl ScoreField for SineCounterexample {
    fn dim(&self) -> usize {
        1
    }

    fn score(&self, tau: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(1, x.len())?;
        Ok(DVector::from_element(1, self.eval_scalar(tau, x[0]).0))
    }

    fn eval(&self, tau: f64, x: &DVector<f64>) -> Result<FieldEval> {
        check_dim(1, x.len())?;
        let (s, ds) = self.eval_scalar(tau, x[0]);
        if !s.is_finite() || !ds.is_finite() {
            return Err(Error::computation(format!(
                "counterexample field not finite at x = {}",
                x[0]
            )));
        }
        Ok(FieldEval {
            score: DVector::from_element(1, s),
            jacobian: DMatrix::from_element(1, 1, ds),
        })
    }

    fn spec(&self) -> FieldSpec {
        FieldSpec::SineCounterexample {
            n: self.n,
            horizon: self.horizon,
        }
    }
}

pub(crate) fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Largest singular value.
pub(crate) fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 && m.ncols() == 1 {
        return m[(0, 0)].abs();
    }
    m.clone().singular_values().max()
}

/// Measured constants of the score-error assumptions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// `(Σ_k η_k·E‖s_θ − ∇log q‖²)^{1/2}`.
    pub eps_score: f64,
    /// Monte-Carlo standard error of `eps_score`.
    pub eps_score_stderr: f64,
    /// `Σ_k η_k·(E tr(ΔΔ))^{1/2}` with `Δ` the Jacobian error.
    pub eps_div: f64,
    pub lipschitz_l: f64,
    /// `max_k ‖s_θ(T − t_k, 0)‖`.
    pub bound_c: f64,
    pub samples: usize,
}

/// Estimates the score/divergence errors of `field` against `exact` along the
/// reverse grid, plus Lipschitz and origin-bound probes.
pub fn measure_assumptions(
    field: &dyn ScoreField,
    exact: &dyn ScoreField,
    cloud: &AtomCloud,
    fs: &ForwardSpec,
    grid: &TimeGrid,
    samples: usize,
    seed: u64,
) -> Result<AssumptionReport> {
    if samples == 0 {
        return Err(Error::input("measure_assumptions needs at least one sample"));
    }
    check_dim(cloud.dim(), field.dim())?;
    let horizon = grid.horizon;
    let per_step: Vec<(f64, f64, f64)> = (0..grid.steps())
        .into_par_iter()
        .map(|k| -> Result<(f64, f64, f64)> {
            let tau = horizon - grid.nodes[k];
            let ms = fs.scaling(tau)?;
            let pts = sample_scaled(cloud, ms, samples, rng::derive_seed(seed, k as u64))?;
            let mut sq = Vec::with_capacity(samples);
            let mut div_sq = 0.0;
            for x in &pts {
                let a = field.eval(tau, x)?;
                let b = exact.eval(tau, x)?;
                sq.push((&a.score - &b.score).norm_squared());
                let delta = &a.jacobian - &b.jacobian;
                div_sq += (&delta * &delta).trace();
            }
            let n = samples as f64;
            let mean = sq.iter().sum::<f64>() / n;
            let var = if samples > 1 {
                sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            Ok((mean, var / n, (div_sq / n).max(0.0).sqrt()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut eps_sq = 0.0;
    let mut eps_sq_var = 0.0;
    let mut eps_div = 0.0;
    for (k, (mean, var, div)) in per_step.iter().enumerate() {
        let eta = grid.step_size(k);
        eps_sq += eta * mean;
        eps_sq_var += eta * eta * var;
        eps_div += eta * div;
    }
    let eps_score = eps_sq.sqrt();
    // Delta method for the square root.
    let eps_score_stderr = if eps_score > 0.0 {
        eps_sq_var.sqrt() / (2.0 * eps_score)
    } else {
        eps_sq_var.sqrt().sqrt()
    };

    let lattice = probe_lattice(cloud.dim());
    let origin = DVector::zeros(cloud.dim());
    let mut lipschitz_l: f64 = 0.0;
    let mut bound_c: f64 = 0.0;
    for &t in &grid.nodes {
        let tau = horizon - t;
        let evals = lattice
            .iter()
            .map(|x| field.eval(tau, x))
            .collect::<Result<Vec<_>>>()?;
        for i in 0..lattice.len() {
            lipschitz_l = lipschitz_l.max(spectral_norm(&evals[i].jacobian));
            for j in (i + 1)..lattice.len() {
                let num = (&evals[i].score - &evals[j].score).norm();
                let den = (&lattice[i] - &lattice[j]).norm();
                lipschitz_l = lipschitz_l.max(num / den);
            }
        }
        bound_c = bound_c.max(field.score(tau, &origin)?.norm());
    }
    Ok(AssumptionReport {
        eps_score,
        eps_score_stderr,
        eps_div,
        lipschitz_l,
        bound_c,
        samples,
    })
}

/// Deterministic probe lattice on `[−4, 4]^d`.
fn probe_lattice(d: usize) -> Vec<DVector<f64>> {
    let per_axis: usize = match d {
        1 => 33,
        2 => 9,
        _ => 5,
    };
    let coord = |i: usize| -4.0 + 8.0 * i as f64 / (per_axis - 1) as f64;
    let total = per_axis.pow(d as u32);
    (0..total)
        .map(|mut idx| {
            DVector::from_fn(d, |_, _| {
                let c = coord(idx % per_axis);
                idx /= per_axis;
                c
            })
        })
        .collect()
}
