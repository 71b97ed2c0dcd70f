//! Total-variation distances, sampler pushforward densities, the
//! TV-derivative identity check and the sine counterexample report.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic_data::{AtomCloud, MarginalScaling};
use crate::error::{check_dim, Error, Result};
use crate::forward::{prior, GaussianSpec, TimeGrid};
use crate::ode::{Dopri5, OdeOptions};
use crate::quadrature::GaussLegendre;
use crate::rng;
use crate::samplers::{continuous_flow, Sampler};
use crate::score_models::{sine_counterexample_field, std_normal_pdf, ScoreField};

const GL_POINTS: usize = 8;
const GL_POINTS_2D: usize = 6;

/// Mean and covariance of a density, used for windows and MC proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Moments {
    pub fn isotropic(mean: DVector<f64>, variance: f64) -> Self {
        let d = mean.len();
        Moments {
            mean,
            cov: DMatrix::identity(d, d) * variance,
        }
    }

    /// Moments of the law of `f·Y + g·Z`, `Y` drawn from the cloud.
    pub fn of_marginal(cloud: &AtomCloud, ms: MarginalScaling) -> Self {
        let d = cloud.dim();
        let m = cloud.mean();
        let mut cov = DMatrix::zeros(d, d);
        for (a, &w) in cloud.atoms().iter().zip(cloud.weights()) {
            let c = a - &m;
            cov += &c * c.transpose() * w;
        }
        cov *= ms.f * ms.f;
        for i in 0..d {
            cov[(i, i)] += ms.g * ms.g;
        }
        Moments { mean: m * ms.f, cov }
    }

    pub fn of_gaussian(g: &GaussianSpec) -> Self {
        Moments::isotropic(DVector::zeros(g.dim), g.variance)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Square root of the largest covariance eigenvalue.
    pub fn sd_max(&self) -> f64 {
        self.cov
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .fold(0.0_f64, |m, &v| m.max(v))
            .sqrt()
    }
}

/// `[μ − 10σ_max, μ + 10σ_max]` per axis, covering every listed density.
pub fn auto_window(moments: &[Moments]) -> Result<Vec<(f64, f64)>> {
    let first = moments.first().ok_or_else(|| Error::input("no densities for the window"))?;
    let d = first.dim();
    let sd = moments.iter().map(Moments::sd_max).fold(0.0_f64, f64::max);
    (0..d)
        .map(|i| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for m in moments {
                check_dim(d, m.dim())?;
                lo = lo.min(m.mean[i]);
                hi = hi.max(m.mean[i]);
            }
            Ok((lo - 10.0 * sd, hi + 10.0 * sd))
        })
        .collect()
}

/// Tabulated density on a uniform tensor grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub axes: Vec<Vec<f64>>,
    /// Row-major values, the last axis varying fastest.
    pub values: Vec<f64>,
    pub cell_measure: f64,
}

impl DensityGrid {
    pub fn tabulate<F>(window: &[(f64, f64)], points: usize, density: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Result<f64> + Sync,
    {
        if window.is_empty() || window.len() > 2 {
            return Err(Error::input("density grids support d = 1 or 2"));
        }
        if points < 2 {
            return Err(Error::input("a density grid needs at least two points per axis"));
        }
        let axes: Vec<Vec<f64>> = window
            .iter()
            .map(|&(lo, hi)| {
                (0..points)
                    .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
                    .collect()
            })
            .collect();
        let cell_measure = window
            .iter()
            .map(|&(lo, hi)| (hi - lo) / (points - 1) as f64)
            .product();
        let total = points.pow(window.len() as u32);
        let values = (0..total)
            .into_par_iter()
            .map(|flat| {
                let x = grid_point(&axes, flat);
                let v = density(&x)?;
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::computation(format!("density {v} at {x:?}")));
                }
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DensityGrid {
            axes,
            values,
            cell_measure,
        })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    /// Trapezoidal mass over the window.
    pub fn mass(&self) -> f64 {
        let n = self.axes[0].len();
        let edge = |i: usize| if i == 0 || i + 1 == n { 0.5 } else { 1.0 };
        let total: f64 = self
            .values
            .iter()
            .enumerate()
            .map(|(flat, v)| {
                let mut w = 1.0;
                let mut rest = flat;
                for _ in 0..self.dim() {
                    w *= edge(rest % n);
                    rest /= n;
                }
                w * v
            })
            .sum();
        total * self.cell_measure
    }

    pub fn mass_deficit(&self) -> f64 {
        (1.0 - self.mass()).max(0.0)
    }

    /// CSV with columns `x0…, value`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = (0..self.dim()).map(|i| format!("x{i}")).collect();
        header.push("value".into());
        w.write_record(&header).map_err(csv_err)?;
        for (flat, v) in self.values.iter().enumerate() {
            let mut row: Vec<String> = grid_point(&self.axes, flat).iter().map(|x| x.to_string()).collect();
            row.push(v.to_string());
            w.write_record(&row).map_err(csv_err)?;
        }
        finish_csv(w)
    }
}

fn grid_point(axes: &[Vec<f64>], flat: usize) -> Vec<f64> {
    let n = axes[0].len();
    let mut idx = vec![0; axes.len()];
    let mut rest = flat;
    for slot in idx.iter_mut().rev() {
        *slot = rest % n;
        rest /= n;
    }
    idx.iter().zip(axes).map(|(&i, a)| a[i]).collect()
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::computation(format!("csv: {e}"))
}

pub(crate) fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::computation(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::computation(e.to_string()))
}

/// Window and resolution for quadrature TV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub window: Vec<(f64, f64)>,
    /// Cells per axis on the coarse pass; the refined pass doubles it.
    pub cells: usize,
    pub mass_tol: f64,
}

impl QuadratureSpec {
    pub fn new(window: Vec<(f64, f64)>, cells: usize) -> Self {
        QuadratureSpec {
            window,
            cells,
            mass_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvEstimate {
    /// Value on the refined pass.
    pub value: f64,
    /// Change under refinement plus the mass missing from the window.
    pub error: f64,
    pub coarse: f64,
    pub mass_p: f64,
    pub mass_q: f64,
    pub warning: Option<String>,
}

/// `½∫|p − q|` by composite Gauss–Legendre quadrature on the spec window.
///
/// In one dimension every sign change of `p − q` between cell ends is located
/// and the cell split there, so the integrand is smooth on each piece.
pub fn tv_quadrature<P, Q>(p: P, q: Q, spec: &QuadratureSpec) -> Result<TvEstimate>
where
    P: Fn(&[f64]) -> Result<f64> + Sync,
    Q: Fn(&[f64]) -> Result<f64> + Sync,
{
    match spec.window.len() {
        1 => tv_quadrature_pair_1d(|x| Ok((p(&[x])?, q(&[x])?)), spec),
        2 => {
            let pass = |cells: usize| tv_pass_2d(&p, &q, &spec.window, cells);
            let coarse = pass(spec.cells)?;
            let fine = pass(2 * spec.cells)?;
            Ok(assemble(coarse, fine, spec.mass_tol))
        }
        d => Err(Error::input(format!("quadrature TV needs d = 1 or 2, got {d}"))),
    }
}

/// One-dimensional TV for a callable returning `(p(x), q(x))` jointly.
pub fn tv_quadrature_pair_1d<F>(pq: F, spec: &QuadratureSpec) -> Result<TvEstimate>
where
    F: Fn(f64) -> Result<(f64, f64)> + Sync,
{
    let &[(lo, hi)] = spec.window.as_slice() else {
        return Err(Error::input("tv_quadrature_pair_1d needs a one-dimensional window"));
    };
    if !(hi > lo) || spec.cells == 0 {
        return Err(Error::input("empty quadrature window"));
    }
    let gl = GaussLegendre::new(GL_POINTS);
    let coarse = tv_pass_1d(&pq, lo, hi, spec.cells, &gl)?;
    let fine = tv_pass_1d(&pq, lo, hi, 2 * spec.cells, &gl)?;
    Ok(assemble(coarse, fine, spec.mass_tol))
}

#[derive(Debug, Clone, Copy)]
struct Pass {
    tv: f64,
    mass_p: f64,
    mass_q: f64,
}

fn assemble(coarse: Pass, fine: Pass, mass_tol: f64) -> TvEstimate {
    let deficit_p = (1.0 - fine.mass_p).max(0.0);
    let deficit_q = (1.0 - fine.mass_q).max(0.0);
    let warning = (deficit_p.max(deficit_q) > mass_tol).then(|| {
        format!("mass deficit {:.3e} exceeds tolerance {mass_tol:.1e}", deficit_p.max(deficit_q))
    });
    TvEstimate {
        value: fine.tv,
        error: (fine.tv - coarse.tv).abs() + 0.5 * (deficit_p + deficit_q),
        coarse: coarse.tv,
        mass_p: fine.mass_p,
        mass_q: fine.mass_q,
        warning,
    }
}

fn diff_of(v: Result<(f64, f64)>) -> Result<(f64, f64, f64)> {
    let (p, q) = v?;
    if !p.is_finite() || !q.is_finite() {
        return Err(Error::computation(format!("non-finite density pair ({p}, {q})")));
    }
    Ok((p, q, p - q))
}

fn tv_pass_1d<F>(pq: &F, lo: f64, hi: f64, cells: usize, gl: &GaussLegendre) -> Result<Pass>
where
    F: Fn(f64) -> Result<(f64, f64)> + Sync,
{
    let h = (hi - lo) / cells as f64;
    let edge = |i: usize| if i == cells { hi } else { lo + i as f64 * h };
    let ends: Vec<f64> = (0..=cells)
        .into_par_iter()
        .map(|i| diff_of(pq(edge(i))).map(|v| v.2))
        .collect::<Result<_>>()?;
    let parts: Vec<(f64, f64, f64)> = (0..cells)
        .into_par_iter()
        .map(|i| {
            let (a, b) = (edge(i), edge(i + 1));
            let mut cuts = vec![a];
            if ends[i] * ends[i + 1] < 0.0 {
                cuts.push(sign_change(pq, a, b, ends[i], ends[i + 1])?);
            }
            cuts.push(b);
            let mut acc = (0.0, 0.0, 0.0);
            for w in cuts.windows(2) {
                for (x, wt) in gl.mapped(w[0], w[1]) {
                    let (p, q, d) = diff_of(pq(x))?;
                    acc.0 += wt * d.abs();
                    acc.1 += wt * p;
                    acc.2 += wt * q;
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let (tv, mp, mq) = parts
        .iter()
        .fold((0.0, 0.0, 0.0), |s, v| (s.0 + v.0, s.1 + v.1, s.2 + v.2));
    Ok(Pass {
        tv: 0.5 * tv,
        mass_p: mp,
        mass_q: mq,
    })
}

/// Root of `p − q` in `[a, b]` by the Illinois variant of regula falsi.
fn sign_change<F>(pq: &F, mut a: f64, mut b: f64, mut fa: f64, mut fb: f64) -> Result<f64>
where
    F: Fn(f64) -> Result<(f64, f64)>,
{
    let tol = 1e-12 * (b - a) + 4.0 * f64::EPSILON * a.abs().max(b.abs());
    let mut side = 0i8;
    for _ in 0..100 {
        let c = (a * fb - b * fa) / (fb - fa);
        let fc = diff_of(pq(c))?.2;
        if fc == 0.0 || (b - a).abs() < tol {
            return Ok(c);
        }
        if fc * fb > 0.0 {
            b = c;
            fb = fc;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        } else {
            a = c;
            fa = fc;
            if side == 1 {
                fb *= 0.5;
            }
            side = 1;
        }
    }
    Ok(0.5 * (a + b))
}

fn tv_pass_2d<P, Q>(p: &P, q: &Q, window: &[(f64, f64)], cells: usize) -> Result<Pass>
where
    P: Fn(&[f64]) -> Result<f64> + Sync,
    Q: Fn(&[f64]) -> Result<f64> + Sync,
{
    let gl = GaussLegendre::new(GL_POINTS_2D);
    let (hx, hy) = (
        (window[0].1 - window[0].0) / cells as f64,
        (window[1].1 - window[1].0) / cells as f64,
    );
    let rows: Vec<(f64, f64, f64)> = (0..cells)
        .into_par_iter()
        .map(|i| {
            let (ax, bx) = (window[0].0 + i as f64 * hx, window[0].0 + (i + 1) as f64 * hx);
            let mut acc = (0.0, 0.0, 0.0);
            for j in 0..cells {
                let (ay, by) = (window[1].0 + j as f64 * hy, window[1].0 + (j + 1) as f64 * hy);
                for (x, wx) in gl.mapped(ax, bx) {
                    for (y, wy) in gl.mapped(ay, by) {
                        let pt = [x, y];
                        let (pv, qv, d) = diff_of(Ok((p(&pt)?, q(&pt)?)))?;
                        let w = wx * wy;
                        acc.0 += w * d.abs();
                        acc.1 += w * pv;
                        acc.2 += w * qv;
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let (tv, mp, mq) = rows
        .iter()
        .fold((0.0, 0.0, 0.0), |s, v| (s.0 + v.0, s.1 + v.1, s.2 + v.2));
    Ok(Pass {
        tv: 0.5 * tv,
        mass_p: mp,
        mass_q: mq,
    })
}

/// Log-density at node `node` of the sampler's law started from `start`
/// (a log-density at node 0): pull `x` back and subtract the accumulated
/// log-determinant.
pub fn pushforward_log_density<S>(
    sampler: &Sampler<'_>,
    grid: &TimeGrid,
    node: usize,
    x: &DVector<f64>,
    start: S,
) -> Result<f64>
where
    S: Fn(&DVector<f64>) -> f64,
{
    let (z, logdet) = sampler.pull_back(grid, node, x)?;
    Ok(start(&z) - logdet)
}

/// Density at node `node` of the sampler's law started from the prior.
pub fn pushforward_density(sampler: &Sampler<'_>, grid: &TimeGrid, node: usize, x: &DVector<f64>) -> Result<f64> {
    let pi = prior(&sampler.fs, grid.horizon, sampler.field.dim());
    Ok(pushforward_log_density(sampler, grid, node, x, |z| pi.log_density(z))?.exp())
}

/// `TV(Φ#p₀, target)` for the composed sampler map `Φ` in one dimension,
/// evaluated as `½∫|p₀(z) − target(Φ(z))·Φ'(z)| dz`. The window is in the
/// start variable `z`.
pub fn transport_tv_1d<S, T>(
    sampler: &Sampler<'_>,
    grid: &TimeGrid,
    start: S,
    target: T,
    spec: &QuadratureSpec,
) -> Result<TvEstimate>
where
    S: Fn(f64) -> f64 + Sync,
    T: Fn(f64) -> f64 + Sync,
{
    check_dim(1, sampler.field.dim())?;
    tv_quadrature_pair_1d(
        |z| {
            let (x, logdet) = sampler.transport(grid, &DVector::from_element(1, z))?;
            Ok((start(z), target(x[0]) * logdet.exp()))
        },
        spec,
    )
}

/// `TV(Φ#p₀, target)` by Monte Carlo over start points `starts ~ p₀`:
/// `½E|1 − target(Φ(z))·det∇Φ(z)/p₀(z)|`.
pub fn transport_tv_mc<S, T>(
    sampler: &Sampler<'_>,
    grid: &TimeGrid,
    starts: &[DVector<f64>],
    start_log: S,
    target_log: T,
) -> Result<McEstimate>
where
    S: Fn(&DVector<f64>) -> Result<f64> + Sync,
    T: Fn(&DVector<f64>) -> Result<f64> + Sync,
{
    if starts.len() < 2 {
        return Err(Error::input("Monte Carlo TV needs at least two samples"));
    }
    let terms: Vec<f64> = starts
        .par_iter()
        .map(|z| {
            let (x, logdet) = sampler.transport(grid, z)?;
            let lr = target_log(&x)? + logdet - start_log(z)?;
            Ok(0.5 * (1.0 - lr.exp()).abs())
        })
        .collect::<Result<_>>()?;
    let n = terms.len() as f64;
    let mean = terms.iter().sum::<f64>() / n;
    let var = terms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(McEstimate {
        value: mean,
        stderr: (var / n).sqrt(),
        samples: terms.len(),
    })
}

/// Monte Carlo TV estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub stderr: f64,
    pub samples: usize,
}

struct Gaussian {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
    inv: DMatrix<f64>,
    log_norm: f64,
}

impl Gaussian {
    fn new(m: &Moments) -> Result<Self> {
        let ch = m
            .cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::input("proposal covariance is not positive definite"))?;
        let l = ch.l();
        let logdet: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let d = m.dim() as f64;
        Ok(Gaussian {
            mean: m.mean.clone(),
            inv: ch.inverse(),
            chol: l,
            log_norm: -0.5 * (d * (2.0 * PI).ln() + logdet),
        })
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let c = x - &self.mean;
        self.log_norm - 0.5 * c.dot(&(&self.inv * &c))
    }
}

/// `½E_r|p − q|/r` under the equal mixture `r` of Gaussians moment-matched to
/// `p` and `q`. Sample `i` uses its own random stream.
pub fn tv_monte_carlo<P, Q>(
    p: P,
    q: Q,
    p_moments: &Moments,
    q_moments: &Moments,
    n: usize,
    seed: u64,
) -> Result<McEstimate>
where
    P: Fn(&DVector<f64>) -> Result<f64> + Sync,
    Q: Fn(&DVector<f64>) -> Result<f64> + Sync,
{
    check_dim(p_moments.dim(), q_moments.dim())?;
    if n < 2 {
        return Err(Error::input("Monte Carlo TV needs at least two samples"));
    }
    let comps = [Gaussian::new(p_moments)?, Gaussian::new(q_moments)?];
    let d = p_moments.dim();
    let terms: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            let c = &comps[usize::from(r.random::<bool>())];
            let z = DVector::from_fn(d, |_, _| r.sample::<f64, _>(StandardNormal));
            let x = &c.mean + &c.chol * z;
            let l0 = comps[0].log_density(&x);
            let l1 = comps[1].log_density(&x);
            let m = l0.max(l1);
            let log_r = m + (0.5 * ((l0 - m).exp() + (l1 - m).exp())).ln();
            if !log_r.is_finite() {
                return Err(Error::computation(format!("proposal density vanishes at {x:?}")));
            }
            let diff = p(&x)? - q(&x)?;
            Ok(0.5 * diff.abs() * (-log_r).exp())
        })
        .collect::<Result<_>>()?;
    let mean = terms.iter().sum::<f64>() / n as f64;
    let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(McEstimate {
        value: mean,
        stderr: (var / n as f64).sqrt(),
        samples: n,
    })
}

/// Drift `b(t, x)` of the reverse ODE driven by `field`, and its divergence,
/// for scalar states.
pub fn reverse_drift_1d<'a>(
    fs: crate::forward::ForwardSpec,
    field: &'a dyn ScoreField,
    horizon: f64,
) -> impl Fn(f64, f64) -> Result<(f64, f64)> + Sync + 'a {
    let a = fs.drift_coeff();
    let half_g2 = 0.5 * fs.diffusion_sq();
    move |t, x| {
        let ev = field.eval(horizon - t, &DVector::from_element(1, x))?;
        Ok((-(a * x) + half_g2 * ev.score[0], -a + half_g2 * ev.jacobian[(0, 0)]))
    }
}

/// Resolution of the TV-derivative check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Spec {
    pub window: (f64, f64),
    pub points: usize,
    /// Time at which the initial densities are given.
    pub t0: f64,
    pub times: Vec<f64>,
    /// Half-width of the centred difference for `dTV/dt`.
    pub fd_step: f64,
    pub ode_tol: f64,
}

impl Lemma1Spec {
    /// Twice the points (nested), half the difference step.
    pub fn refined(&self) -> Self {
        Lemma1Spec {
            points: 2 * self.points - 1,
            fd_step: 0.5 * self.fd_step,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Row {
    pub t: f64,
    pub tv: f64,
    pub dtv_fd: f64,
    pub rhs: f64,
    /// `|dTV/dt − RHS| / max(|RHS|, 10⁻⁶)`.
    pub residual: f64,
}

/// Log-densities at time `t` on `xs` of the law transported by `b` from
/// `log_p0` at `t0`, by backward characteristics carrying
/// `d log J/ds = ∂ₓb`.
fn transported_log_density<B, P>(b: &B, log_p0: &P, t0: f64, t: f64, xs: &[f64], tol: f64) -> Result<Vec<f64>>
where
    B: Fn(f64, f64) -> Result<(f64, f64)> + Sync,
    P: Fn(f64) -> f64 + Sync,
{
    let feet: Vec<(f64, f64)> = xs
        .par_iter()
        .map(|&x| {
            if t == t0 {
                return Ok((x, 0.0));
            }
            let mut rhs = |s: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
                let (v, div) = b(s, y[0])?;
                dy[0] = v;
                dy[1] = div;
                Ok(())
            };
            let mut solver = Dopri5::new(t, &[x, 0.0], OdeOptions::with_tol(tol))?;
            solver.advance_to(&mut rhs, t0)?;
            Ok((solver.y()[0], solver.y()[1]))
        })
        .collect::<Result<_>>()?;
    for (i, w) in feet.windows(2).enumerate() {
        if !(w[1].0 > w[0].0) {
            return Err(Error::CharacteristicCrossing { t, x: xs[i + 1] });
        }
    }
    Ok(feet.iter().map(|&(x0, a)| log_p0(x0) + a).collect())
}

/// Trapezoidal `½∫|p − q|` with the kinks at sign changes located by linear
/// interpolation.
fn tv_on_nodes(xs: &[f64], p: &[f64], q: &[f64]) -> f64 {
    let d: Vec<f64> = p.iter().zip(q).map(|(a, b)| a - b).collect();
    let mut acc = 0.0;
    for i in 0..xs.len() - 1 {
        let h = xs[i + 1] - xs[i];
        let (a, b) = (d[i], d[i + 1]);
        acc += if a * b < 0.0 {
            0.5 * h * (a * a + b * b) / (a.abs() + b.abs())
        } else {
            0.5 * h * (a.abs() + b.abs())
        };
    }
    0.5 * acc
}

/// `∫_{p > q} g` with trapezoidal cells and linear boundary location.
fn integral_over_excess(xs: &[f64], p: &[f64], q: &[f64], g: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..xs.len() - 1 {
        let h = xs[i + 1] - xs[i];
        let (da, db) = (p[i] - q[i], p[i + 1] - q[i + 1]);
        if da > 0.0 && db > 0.0 {
            acc += 0.5 * h * (g[i] + g[i + 1]);
        } else if da > 0.0 && db <= 0.0 {
            let th = da / (da - db);
            let gc = g[i] + th * (g[i + 1] - g[i]);
            acc += 0.5 * th * h * (g[i] + gc);
        } else if da <= 0.0 && db > 0.0 {
            let th = -da / (db - da);
            let gc = g[i] + th * (g[i + 1] - g[i]);
            acc += 0.5 * (1.0 - th) * h * (gc + g[i + 1]);
        }
    }
    acc
}

/// Compares a centred difference of `TV(p_t, q_t)` with the volume-integral
/// expression over `Ω_t = {p > q}`, where `p` is transported by `b` and `q`
/// by `b_star`. Drifts return `(b, ∂ₓb)`; initial densities are given as
/// log-densities at `spec.t0`.
pub fn lemma1_check<B, BS, P, Q>(b: &B, b_star: &BS, log_p0: &P, log_q0: &Q, spec: &Lemma1Spec) -> Result<Vec<Lemma1Row>>
where
    B: Fn(f64, f64) -> Result<(f64, f64)> + Sync,
    BS: Fn(f64, f64) -> Result<(f64, f64)> + Sync,
    P: Fn(f64) -> f64 + Sync,
    Q: Fn(f64) -> f64 + Sync,
{
    let (lo, hi) = spec.window;
    if spec.points < 5 || !(hi > lo) {
        return Err(Error::input("the TV derivative check needs a window and at least 5 points"));
    }
    if !(spec.fd_step > 0.0) {
        return Err(Error::input("difference step must be positive"));
    }
    let n = spec.points;
    let dx = (hi - lo) / (n - 1) as f64;
    let xs: Vec<f64> = (0..n).map(|i| lo + i as f64 * dx).collect();
    let densities = |t: f64| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let lp = transported_log_density(b, log_p0, spec.t0, t, &xs, spec.ode_tol)?;
        let lq = transported_log_density(b_star, log_q0, spec.t0, t, &xs, spec.ode_tol)?;
        Ok((lp.iter().map(|v| v.exp()).collect(), lq.iter().map(|v| v.exp()).collect(), lq))
    };
    spec.times
        .iter()
        .map(|&t| {
            if t - spec.fd_step < spec.t0 {
                return Err(Error::input(format!("check time {t} too close to t0")));
            }
            let (pm, qm, _) = densities(t - spec.fd_step)?;
            let (pp, qp, _) = densities(t + spec.fd_step)?;
            let (p, q, lq) = densities(t)?;
            let dtv_fd = (tv_on_nodes(&xs, &pp, &qp) - tv_on_nodes(&xs, &pm, &qm)) / (2.0 * spec.fd_step);
            // ∂ₓ log q by second-order differences, one-sided at the ends.
            let grad_lq: Vec<f64> = (0..n)
                .map(|i| {
                    if i == 0 {
                        (-3.0 * lq[0] + 4.0 * lq[1] - lq[2]) / (2.0 * dx)
                    } else if i == n - 1 {
                        (3.0 * lq[n - 1] - 4.0 * lq[n - 2] + lq[n - 3]) / (2.0 * dx)
                    } else {
                        (lq[i + 1] - lq[i - 1]) / (2.0 * dx)
                    }
                })
                .collect();
            let integrand = xs
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let (bv, bd) = b(t, x)?;
                    let (sv, sd) = b_star(t, x)?;
                    Ok(-(bd - sd) * q[i] - (bv - sv) * grad_lq[i] * q[i])
                })
                .collect::<Result<Vec<f64>>>()?;
            let rhs = integral_over_excess(&xs, &p, &q, &integrand);
            Ok(Lemma1Row {
                t,
                tv: tv_on_nodes(&xs, &p, &q),
                dtv_fd,
                rhs,
                residual: (dtv_fd - rhs).abs() / rhs.abs().max(1e-6),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub coarse: Vec<Lemma1Row>,
    pub fine: Vec<Lemma1Row>,
    pub max_residual_coarse: f64,
    pub max_residual_fine: f64,
    /// Coarse over fine maximum residual.
    pub refinement_ratio: f64,
}

impl Lemma1Report {
    /// CSV with columns `level, t, tv, dtv_fd, rhs, residual`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["level", "t", "tv", "dtv_fd", "rhs", "residual"])
            .map_err(csv_err)?;
        for (level, rows) in [("coarse", &self.coarse), ("fine", &self.fine)] {
            for r in rows {
                w.write_record([
                    level.to_string(),
                    r.t.to_string(),
                    r.tv.to_string(),
                    r.dtv_fd.to_string(),
                    r.rhs.to_string(),
                    r.residual.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        finish_csv(w)
    }
}

/// Runs [`lemma1_check`] at `spec` and at its refinement.
pub fn lemma1_refined<B, BS, P, Q>(b: &B, b_star: &BS, log_p0: &P, log_q0: &Q, spec: &Lemma1Spec) -> Result<Lemma1Report>
where
    B: Fn(f64, f64) -> Result<(f64, f64)> + Sync,
    BS: Fn(f64, f64) -> Result<(f64, f64)> + Sync,
    P: Fn(f64) -> f64 + Sync,
    Q: Fn(f64) -> f64 + Sync,
{
    let coarse = lemma1_check(b, b_star, log_p0, log_q0, spec)?;
    let fine = lemma1_check(b, b_star, log_p0, log_q0, &spec.refined())?;
    let worst = |rows: &[Lemma1Row]| rows.iter().map(|r| r.residual).fold(0.0, f64::max);
    let (mc, mf) = (worst(&coarse), worst(&fine));
    Ok(Lemma1Report {
        coarse,
        fine,
        max_residual_coarse: mc,
        max_residual_fine: mf,
        refinement_ratio: if mf > 0.0 { mc / mf } else { f64::INFINITY },
    })
}

/// Resolution of the counterexample report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleSpec {
    /// Times and abscissae of the score-error scan.
    pub scan_times: usize,
    pub scan_points: usize,
    pub x_max: f64,
    /// Nodes per axis of the finite-volume residual grid.
    pub fp_nodes: usize,
    pub ode_samples: usize,
    pub ode_tol: f64,
    pub seed: u64,
}

impl Default for CounterexampleSpec {
    fn default() -> Self {
        CounterexampleSpec {
            scan_times: 41,
            scan_points: 401,
            x_max: 8.0,
            fp_nodes: 401,
            ode_samples: 2000,
            ode_tol: 1e-10,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleReport {
    pub n: u32,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub sup_score_error: f64,
    /// `1/(Tnπ)`.
    pub score_error_bound: f64,
    /// TV between the final law `φ(1 + ½sin 2nπx)` and `N(0, 1)`.
    pub tv_final: f64,
    pub tv_error: f64,
    /// `1/(4π)`.
    pub tv_lower_bound: f64,
    /// Largest finite-volume continuity residual, per unit time and length.
    pub fp_residual: f64,
    /// Largest relative gap between the ODE-transported density at the
    /// sample endpoints and the closed-form final law.
    pub ode_density_error: f64,
    /// TV from the transported samples, by importance weighting.
    pub ode_tv: f64,
    pub ode_tv_stderr: f64,
    pub score_check: bool,
    pub tv_check: bool,
}

/// Evaluates the sine counterexample: score error, final TV, continuity
/// residual of the constructed drift and a transported-sample cross-check.
pub fn counterexample_report(n: u32, horizon: f64, spec: &CounterexampleSpec) -> Result<CounterexampleReport> {
    let field = sine_counterexample_field(n, horizon)?;
    let omega = field.omega();

    let scan: Vec<f64> = (0..spec.scan_times)
        .into_par_iter()
        .map(|j| {
            let t = horizon * j as f64 / (spec.scan_times - 1).max(1) as f64;
            let mut worst = 0.0_f64;
            for i in 0..spec.scan_points {
                let x = -spec.x_max + 2.0 * spec.x_max * i as f64 / (spec.scan_points - 1).max(1) as f64;
                let s = field.score(horizon - t, &DVector::from_element(1, x))?[0];
                worst = worst.max((s + x).abs());
            }
            Ok(worst)
        })
        .collect::<Result<_>>()?;
    let sup_score_error = scan.iter().copied().fold(0.0, f64::max);

    let final_law = |x: f64| std_normal_pdf(x) * (1.0 + 0.5 * (omega * x).sin());
    // Two cells per half period of the sine.
    let cells = (20.0 * 2.0 * n as f64).ceil().max(2000.0) as usize;
    let tv = tv_quadrature_pair_1d(
        |x| Ok((final_law(x), std_normal_pdf(x))),
        &QuadratureSpec::new(vec![(-10.0, 10.0)], cells),
    )?;

    let fp_residual = continuity_residual(&field, horizon, spec.x_max, spec.fp_nodes)?;

    let fs = crate::forward::ForwardSpec::vp();
    let starts = GaussianSpec { dim: 1, variance: 1.0 }.sample(spec.ode_samples, spec.seed);
    let moved: Vec<(f64, f64)> = starts
        .par_iter()
        .map(|z| {
            let (x, logdet, _) = continuous_flow(&fs, &field, horizon, 0.0, horizon, z, spec.ode_tol)?;
            let density = std_normal_pdf(z[0]) * (-logdet).exp();
            Ok((x[0], density))
        })
        .collect::<Result<_>>()?;
    let mut ode_density_error = 0.0_f64;
    let terms: Vec<f64> = moved
        .iter()
        .map(|&(x, p)| {
            ode_density_error = ode_density_error.max((p - final_law(x)).abs() / final_law(x));
            (1.0 - std_normal_pdf(x) / p).max(0.0)
        })
        .collect();
    let m = terms.len() as f64;
    let ode_tv = terms.iter().sum::<f64>() / m;
    let var = terms.iter().map(|t| (t - ode_tv).powi(2)).sum::<f64>() / (m - 1.0);

    let score_error_bound = 1.0 / (horizon * n as f64 * PI);
    let tv_lower_bound = 1.0 / (4.0 * PI);
    Ok(CounterexampleReport {
        n,
        horizon,
        sup_score_error,
        score_error_bound,
        tv_final: tv.value,
        tv_error: tv.error,
        tv_lower_bound,
        fp_residual,
        ode_density_error,
        ode_tv,
        ode_tv_stderr: (var / m).sqrt(),
        score_check: sup_score_error <= score_error_bound,
        tv_check: tv.value - tv.error >= tv_lower_bound,
    })
}

/// Largest `|Δmass + Δt·Δflux|/(Δt·Δx)` over the cells of a uniform
/// `nodes × nodes` grid of `[0, T] × [−x_max, x_max]`, with the flux built
/// from the field's score.
fn continuity_residual(
    field: &crate::score_models::SineCounterexample,
    horizon: f64,
    x_max: f64,
    nodes: usize,
) -> Result<f64> {
    if nodes < 2 {
        return Err(Error::input("residual grid needs at least two nodes per axis"));
    }
    let gl = GaussLegendre::new(24);
    let dx = 2.0 * x_max / (nodes - 1) as f64;
    let dt = horizon / (nodes - 1) as f64;
    let xs: Vec<f64> = (0..nodes).map(|i| -x_max + i as f64 * dx).collect();
    let rows: Vec<f64> = (0..nodes - 1)
        .into_par_iter()
        .map(|j| {
            let (t0, t1) = (j as f64 * dt, (j + 1) as f64 * dt);
            let tau_mid = horizon - 0.5 * (t0 + t1);
            let flux = xs
                .iter()
                .map(|&x| {
                    let s = field.score(tau_mid, &DVector::from_element(1, x))?[0];
                    Ok((s + x) * field.density(tau_mid, x))
                })
                .collect::<Result<Vec<f64>>>()?;
            let mut worst = 0.0_f64;
            for i in 0..nodes - 1 {
                let dm = gl.integrate(xs[i], xs[i + 1], |x| {
                    field.density(horizon - t1, x) - field.density(horizon - t0, x)
                });
                let r = (dm + dt * (flux[i + 1] - flux[i])).abs() / (dt * dx);
                worst = worst.max(r);
            }
            Ok(worst)
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().fold(0.0, f64::max))
}

/// CSV with one `quantity, value` row per report field.
pub fn counterexample_csv(report: &CounterexampleReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["quantity", "value"]).map_err(csv_err)?;
    let rows: [(&str, f64); 11] = [
        ("n", report.n as f64),
        ("T", report.horizon),
        ("sup_score_error", report.sup_score_error),
        ("score_error_bound", report.score_error_bound),
        ("tv_final", report.tv_final),
        ("tv_error", report.tv_error),
        ("tv_lower_bound", report.tv_lower_bound),
        ("fp_residual", report.fp_residual),
        ("ode_density_error", report.ode_density_error),
        ("ode_tv", report.ode_tv),
        ("ode_tv_stderr", report.ode_tv_stderr),
    ];
    for (k, v) in rows {
        w.write_record([k.to_string(), v.to_string()]).map_err(csv_err)?;
    }
    finish_csv(w)
}
