//! Deterministic reverse samplers and their continuous interpolations.
//!
//! Every scheme advances `x` on `[t_k, t_{k+1}]` by an affine combination of
//! the state and the score frozen at the step start,
//!
//! ```text
//! F_{t_k→t}(z) = α(Δ)·z + β(Δ)·s(T − t_k, z),     Δ = t − t_k,
//! ```
//!
//! with, for drift `a·x` and diffusion `G`,
//!
//! | scheme | α        | β               |
//! |--------|----------|-----------------|
//! | Euler  | 1 − aΔ   | ½G²Δ            |
//! | EI     | e^Δ      | e^Δ − 1         |
//! | DDIM   | 1 − aΔ   | c_l·G²·Δ        |
//!
//! where `c_l = l(1 − √(1 − 1/l))` and `l = (T − t_k)/η_k`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::forward::{prior, ForwardKind, ForwardSpec, TimeGrid};
use crate::ode::{Dopri5, OdeOptions, OdeStats};
use crate::score_models::{FieldEval, ScoreField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Euler,
    #[serde(alias = "ei")]
    ExponentialIntegrator,
    #[serde(alias = "ddim")]
    DdimType,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Euler => "euler",
            Scheme::ExponentialIntegrator => "exponential_integrator",
            Scheme::DdimType => "ddim_type",
        })
    }
}

/// `c_l = l(1 − √(1 − 1/l))`, written as `1/(1 + √(1 − 1/l))` to avoid
/// cancellation for large `l`.
pub fn ddim_coefficient(l: f64) -> Result<f64> {
    if !(l >= 1.0) {
        return Err(Error::input(format!("DDIM ratio l = {l} must be at least 1")));
    }
    Ok(1.0 / (1.0 + (1.0 - 1.0 / l).sqrt()))
}

/// Coefficients `(α, β, α', β')` of the interpolant and their time derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub dalpha: f64,
    pub dbeta: f64,
}

/// A scheme bound to a forward process, a score field and a horizon `T`.
#[derive(Clone, Copy)]
pub struct Sampler<'a> {
    pub scheme: Scheme,
    pub fs: ForwardSpec,
    pub field: &'a dyn ScoreField,
    pub horizon: f64,
}

const INVERT_MAX_ITER: usize = 100;

impl<'a> Sampler<'a> {
    pub fn new(scheme: Scheme, fs: ForwardSpec, field: &'a dyn ScoreField, horizon: f64) -> Result<Self> {
        if scheme == Scheme::ExponentialIntegrator && fs.kind != ForwardKind::Vp {
            return Err(Error::UnsupportedScheme(format!(
                "the exponential integrator needs the linear VP drift, got {}",
                fs.kind
            )));
        }
        if !(horizon > 0.0) {
            return Err(Error::input(format!("horizon {horizon} must be positive")));
        }
        Ok(Sampler {
            scheme,
            fs,
            field,
            horizon,
        })
    }

    pub fn coefficients(&self, t_k: f64, t_next: f64, t: f64) -> Result<StepCoefficients> {
        if !(t_next > t_k) {
            return Err(Error::input(format!("step [{t_k}, {t_next}] is empty")));
        }
        let span = t_next - t_k;
        let tol = 1e-12 * span.max(t_next.abs());
        if t < t_k - tol || t > t_next + tol {
            return Err(Error::input(format!(
                "time {t} outside the step [{t_k}, {t_next}]"
            )));
        }
        let d = (t - t_k).clamp(0.0, span);
        let a = self.fs.drift_coeff();
        let g2 = self.fs.diffusion_sq();
        Ok(match self.scheme {
            Scheme::Euler => StepCoefficients {
                alpha: 1.0 - a * d,
                beta: 0.5 * g2 * d,
                dalpha: -a,
                dbeta: 0.5 * g2,
            },
            Scheme::ExponentialIntegrator => {
                let e = d.exp();
                StepCoefficients {
                    alpha: e,
                    beta: d.exp_m1(),
                    dalpha: e,
                    dbeta: e,
                }
            }
            Scheme::DdimType => {
                let c = ddim_coefficient((self.horizon - t_k) / span)?;
                StepCoefficients {
                    alpha: 1.0 - a * d,
                    beta: c * g2 * d,
                    dalpha: -a,
                    dbeta: c * g2,
                }
            }
        })
    }

    fn tau(&self, t_k: f64) -> f64 {
        self.horizon - t_k
    }

    /// One discrete step from `t_k` to `t_next`.
    pub fn step(&self, t_k: f64, t_next: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.interpolant(t_k, t_next, t_next, x)
    }

    /// `F_{t_k→t}(z)`.
    pub fn interpolant(&self, t_k: f64, t_next: f64, t: f64, z: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.field.dim(), z.len())?;
        let c = self.coefficients(t_k, t_next, t)?;
        if t == t_k {
            return Ok(z.clone());
        }
        let s = self.field.score(self.tau(t_k), z)?;
        Ok(z * c.alpha + s * c.beta)
    }

    /// `∂_t F_{t_k→t}(z)`.
    pub fn interpolant_velocity(&self, t_k: f64, t_next: f64, t: f64, z: &DVector<f64>) -> Result<DVector<f64>> {
        let c = self.coefficients(t_k, t_next, t)?;
        let s = self.field.score(self.tau(t_k), z)?;
        Ok(z * c.dalpha + s * c.dbeta)
    }

    /// `∇_z F_{t_k→t}(z)` together with `F` itself.
    pub fn interpolant_with_jacobian(
        &self,
        t_k: f64,
        t_next: f64,
        t: f64,
        z: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>, FieldEval)> {
        check_dim(self.field.dim(), z.len())?;
        let c = self.coefficients(t_k, t_next, t)?;
        let ev = self.field.eval(self.tau(t_k), z)?;
        let value = z * c.alpha + &ev.score * c.beta;
        let mut jac = &ev.jacobian * c.beta;
        for i in 0..z.len() {
            jac[(i, i)] += c.alpha;
        }
        Ok((value, jac, ev))
    }

    /// `log |det ∇F_{t_k→t}(z)|`.
    pub fn step_logdet(&self, t_k: f64, t_next: f64, t: f64, z: &DVector<f64>) -> Result<f64> {
        if t == t_k {
            self.coefficients(t_k, t_next, t)?;
            return Ok(0.0);
        }
        let (_, jac, _) = self.interpolant_with_jacobian(t_k, t_next, t, z)?;
        logabsdet(&jac)
    }

    /// Solves `F_{t_k→t}(z) = x` by damped Newton, falling back to a damped
    /// fixed-point iteration when Newton stalls.
    pub fn invert(&self, t_k: f64, t_next: f64, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.field.dim(), x.len())?;
        let c = self.coefficients(t_k, t_next, t)?;
        if t == t_k || c.beta == 0.0 {
            return Ok(x / c.alpha);
        }
        let tol = 1e-12 * (1.0 + x.norm());
        let mut z = x / c.alpha;
        let mut iterations = 0;
        let mut residual = f64::INFINITY;
        while iterations < INVERT_MAX_ITER {
            let (fz, jac, _) = self.interpolant_with_jacobian(t_k, t_next, t, &z)?;
            let r = fz - x;
            residual = r.norm();
            if residual <= tol {
                return Ok(z);
            }
            iterations += 1;
            let Some(dz) = jac.lu().solve(&r) else { break };
            // Backtrack until the residual decreases.
            let mut lambda = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let cand = &z - &dz * lambda;
                let rc = (self.interpolant(t_k, t_next, t, &cand)? - x).norm();
                if rc < residual || rc <= tol {
                    z = cand;
                    accepted = true;
                    break;
                }
                lambda *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        // z = (x − β s(z))/α is a contraction when β·L < α.
        let mut theta = 1.0;
        for _ in 0..INVERT_MAX_ITER {
            let s = self.field.score(self.tau(t_k), &z)?;
            let target = (x - s * c.beta) / c.alpha;
            let cand = &z * (1.0 - theta) + target * theta;
            let rc = (self.interpolant(t_k, t_next, t, &cand)? - x).norm();
            if rc <= tol {
                return Ok(cand);
            }
            if rc < residual {
                z = cand;
                residual = rc;
            } else {
                theta *= 0.5;
                if theta < 1e-6 {
                    break;
                }
            }
            iterations += 1;
        }
        Err(Error::SingularMap {
            residual,
            iterations,
        })
    }

    /// Pushes a single state through the whole grid, returning the final state
    /// and the accumulated log-determinant.
    pub fn transport(&self, grid: &TimeGrid, x0: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        let mut x = x0.clone();
        let mut logdet = 0.0;
        for k in 0..grid.steps() {
            let (t_k, t_next) = (grid.nodes[k], grid.nodes[k + 1]);
            let (next, jac, _) = self
                .interpolant_with_jacobian(t_k, t_next, t_next, &x)
                .map_err(|e| e.at_node(k))?;
            logdet += logabsdet(&jac).map_err(|e| e.at_node(k))?;
            x = next;
        }
        Ok((x, logdet))
    }

    /// Maps a point at node `node` back to its preimage at node 0, returning
    /// the preimage and the accumulated forward log-determinant.
    pub fn pull_back(&self, grid: &TimeGrid, node: usize, x: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        if node > grid.steps() {
            return Err(Error::input(format!("node {node} beyond grid of {} steps", grid.steps())));
        }
        let mut z = x.clone();
        let mut logdet = 0.0;
        for k in (0..node).rev() {
            let (t_k, t_next) = (grid.nodes[k], grid.nodes[k + 1]);
            z = self.invert(t_k, t_next, t_next, &z).map_err(|e| e.at_node(k))?;
            logdet += self
                .step_logdet(t_k, t_next, t_next, &z)
                .map_err(|e| e.at_node(k))?;
        }
        Ok((z, logdet))
    }
}

pub(crate) fn logabsdet(m: &DMatrix<f64>) -> Result<f64> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::computation("non-finite Jacobian entry"));
    }
    let det = if m.nrows() == 1 { m[(0, 0)] } else { m.determinant() };
    if det == 0.0 {
        return Err(Error::computation("singular step Jacobian"));
    }
    Ok(det.abs().ln())
}

/// Starting states of a reverse run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Points(Vec<Vec<f64>>),
    /// `count` draws from the prior of the forward process.
    Prior { count: usize, seed: u64 },
}

/// Per-particle trajectories of a reverse run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReverseRun {
    pub scheme: Scheme,
    pub grid: TimeGrid,
    /// `states[p][k]` is particle `p` at node `k`.
    pub states: Vec<Vec<DVector<f64>>>,
    /// Cumulative `log |det ∂x_k/∂x_0|` per particle and node.
    pub logdet: Vec<Vec<f64>>,
    pub seed: u64,
}

impl ReverseRun {
    pub fn final_states(&self) -> Vec<DVector<f64>> {
        self.states.iter().map(|s| s.last().expect("nonempty").clone()).collect()
    }

    /// CSV with columns `node, t, x0…, logdet` for one particle.
    pub fn particle_csv(&self, particle: usize) -> Result<String> {
        let states = self
            .states
            .get(particle)
            .ok_or_else(|| Error::input(format!("no particle {particle}")))?;
        let d = states[0].len();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["node".to_string(), "t".to_string()];
        header.extend((0..d).map(|j| format!("x{j}")));
        header.push("logdet".into());
        w.write_record(&header).map_err(csv_err)?;
        for (k, x) in states.iter().enumerate() {
            let mut row = vec![k.to_string(), self.grid.nodes[k].to_string()];
            row.extend(x.iter().map(|v| v.to_string()));
            row.push(self.logdet[particle][k].to_string());
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::computation(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::computation(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::computation(format!("csv: {e}"))
}

pub fn initial_states(fs: &ForwardSpec, horizon: f64, dim: usize, init: &Init) -> Result<Vec<DVector<f64>>> {
    match init {
        Init::Points(pts) => pts
            .iter()
            .map(|p| {
                check_dim(dim, p.len())?;
                Ok(DVector::from_column_slice(p))
            })
            .collect(),
        Init::Prior { count, seed } => Ok(prior(fs, horizon, dim).sample(*count, *seed)),
    }
}

/// Runs every particle across the grid, keeping full trajectories.
pub fn run_reverse(sampler: &Sampler<'_>, grid: &TimeGrid, init: &Init, seed: u64) -> Result<ReverseRun> {
    if (grid.horizon - sampler.horizon).abs() > 0.0 {
        return Err(Error::input("grid horizon differs from the sampler horizon"));
    }
    let starts = initial_states(&sampler.fs, grid.horizon, sampler.field.dim(), init)?;
    let per_particle: Vec<(Vec<DVector<f64>>, Vec<f64>)> = starts
        .into_par_iter()
        .map(|x0| {
            let mut states = Vec::with_capacity(grid.nodes.len());
            let mut logdet = Vec::with_capacity(grid.nodes.len());
            states.push(x0);
            logdet.push(0.0);
            for k in 0..grid.steps() {
                let (t_k, t_next) = (grid.nodes[k], grid.nodes[k + 1]);
                let (next, jac, _) = sampler
                    .interpolant_with_jacobian(t_k, t_next, t_next, &states[k])
                    .map_err(|e| e.at_node(k))?;
                let ld = logabsdet(&jac).map_err(|e| e.at_node(k))?;
                logdet.push(logdet[k] + ld);
                states.push(next);
            }
            Ok((states, logdet))
        })
        .collect::<Result<Vec<_>>>()?;
    let (states, logdet) = per_particle.into_iter().unzip();
    Ok(ReverseRun {
        scheme: sampler.scheme,
        grid: grid.clone(),
        states,
        logdet,
        seed,
    })
}

/// Integrates the simulated reverse ODE
/// `dY/dt = −(a·Y − ½G²·s(T − t, Y))` from `t_start` to `t_end`.
pub fn continuous_reference(
    fs: &ForwardSpec,
    field: &dyn ScoreField,
    horizon: f64,
    t_start: f64,
    t_end: f64,
    x: &DVector<f64>,
    tol: f64,
) -> Result<(DVector<f64>, OdeStats)> {
    check_dim(field.dim(), x.len())?;
    if !(tol > 0.0) {
        return Err(Error::input("tolerance must be positive"));
    }
    let a = fs.drift_coeff();
    let half_g2 = 0.5 * fs.diffusion_sq();
    let d = x.len();
    let mut rhs = |t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
        let yv = DVector::from_column_slice(y);
        let s = field.score(horizon - t, &yv)?;
        for i in 0..d {
            dy[i] = -(a * y[i] - half_g2 * s[i]);
        }
        Ok(())
    };
    let mut solver = Dopri5::new(t_start, x.as_slice(), OdeOptions::with_tol(tol))?;
    solver.advance_to(&mut rhs, t_end)?;
    Ok((DVector::from_column_slice(solver.y()), solver.stats))
}

/// Like [`continuous_reference`], additionally integrating
/// `d log J/dt = ∇·drift` so that the returned log-determinant is that of the
/// flow map from `t_start` to `t_end`.
pub fn continuous_flow(
    fs: &ForwardSpec,
    field: &dyn ScoreField,
    horizon: f64,
    t_start: f64,
    t_end: f64,
    x: &DVector<f64>,
    tol: f64,
) -> Result<(DVector<f64>, f64, OdeStats)> {
    check_dim(field.dim(), x.len())?;
    if !(tol > 0.0) {
        return Err(Error::input("tolerance must be positive"));
    }
    let a = fs.drift_coeff();
    let half_g2 = 0.5 * fs.diffusion_sq();
    let d = x.len();
    let mut rhs = |t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
        let yv = DVector::from_column_slice(&y[..d]);
        let ev = field.eval(horizon - t, &yv)?;
        for i in 0..d {
            dy[i] = -(a * y[i] - half_g2 * ev.score[i]);
        }
        dy[d] = -(a * d as f64) + half_g2 * ev.divergence();
        Ok(())
    };
    let mut y0 = x.as_slice().to_vec();
    y0.push(0.0);
    let mut solver = Dopri5::new(t_start, &y0, OdeOptions::with_tol(tol))?;
    solver.advance_to(&mut rhs, t_end)?;
    let y = solver.y();
    Ok((DVector::from_column_slice(&y[..d]), y[d], solver.stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic_data::AtomCloud;
    use crate::forward::build_grid;
    use crate::score_models::{exact_field, perturbed_field, ZeroField};
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    fn origin() -> AtomCloud {
        AtomCloud::single(dvector![0.0]).unwrap()
    }

    #[test]
    fn ddim_coefficient_limits() {
        assert_relative_eq!(ddim_coefficient(1.0).unwrap(), 1.0);
        let l: f64 = 4.0;
        assert_relative_eq!(
            ddim_coefficient(l).unwrap(),
            l * (1.0 - (1.0 - 1.0 / l).sqrt()),
            epsilon = 1e-15
        );
        assert_relative_eq!(ddim_coefficient(1e12).unwrap(), 0.5, epsilon = 1e-12);
        assert!(ddim_coefficient(0.9).is_err());
    }

    #[test]
    fn zero_field_on_ve_is_identity() {
        let field = ZeroField { dim: 2 };
        let x = dvector![0.3, -1.2];
        for scheme in [Scheme::Euler, Scheme::DdimType] {
            let s = Sampler::new(scheme, ForwardSpec::ve(), &field, 4.0).unwrap();
            assert_eq!(s.step(0.5, 0.7, &x).unwrap(), x);
            assert_eq!(s.step_logdet(0.5, 0.7, 0.6, &x).unwrap(), 0.0);
        }
        assert!(matches!(
            Sampler::new(Scheme::ExponentialIntegrator, ForwardSpec::ve(), &field, 4.0),
            Err(Error::UnsupportedScheme(_))
        ));
    }

    #[test]
    fn ei_keeps_standard_normal_score_fixed() {
        // With s(x) = −x the EI update returns x exactly: e^η x − (e^η − 1)x.
        let field = exact_field(&origin(), &ForwardSpec::vp());
        let s = Sampler::new(Scheme::ExponentialIntegrator, ForwardSpec::vp(), &field, 60.0).unwrap();
        let x = dvector![1.7];
        assert_relative_eq!(s.step(0.0, 0.3, &x).unwrap()[0], 1.7, epsilon = 1e-12);
    }

    #[test]
    fn ddim_small_step_follows_reverse_drift() {
        let cloud = AtomCloud::uniform_1d(&[-1.0, 0.5]).unwrap();
        let fs = ForwardSpec::ve();
        let field = exact_field(&cloud, &fs);
        let s = Sampler::new(Scheme::DdimType, fs, &field, 4.0).unwrap();
        let (t_k, eta) = (1.0, 1e-6);
        let x = dvector![0.4];
        let next = s.step(t_k, t_k + eta, &x).unwrap();
        let drift = 0.5 * field.score(3.0, &x).unwrap()[0];
        assert_relative_eq!((next[0] - x[0]) / eta, drift, max_relative = 1e-4);
    }

    #[test]
    fn interpolant_endpoints_and_midpoint() {
        let fs = ForwardSpec::vp();
        let field = exact_field(&origin(), &fs);
        let horizon = 3.0;
        let s = Sampler::new(Scheme::ExponentialIntegrator, fs, &field, horizon).unwrap();
        let z = dvector![0.8];
        let (t_k, t_next) = (1.0, 1.4);
        assert_eq!(s.interpolant(t_k, t_next, t_k, &z).unwrap(), z);
        assert_eq!(s.interpolant(t_k, t_next, t_next, &z).unwrap(), s.step(t_k, t_next, &z).unwrap());
        let t = 1.2;
        let d: f64 = t - t_k;
        let g2 = 1.0 - (-2.0 * (horizon - t_k)).exp();
        let expected = d.exp() * 0.8 + d.exp_m1() * (-0.8 / g2);
        assert_relative_eq!(s.interpolant(t_k, t_next, t, &z).unwrap()[0], expected, epsilon = 1e-15);
        assert!(s.interpolant(t_k, t_next, 1.5, &z).is_err());
    }

    #[test]
    fn linear_inverse_and_logdet() {
        let fs = ForwardSpec::vp();
        let field = exact_field(&origin(), &fs);
        let horizon = 3.0;
        let s = Sampler::new(Scheme::ExponentialIntegrator, fs, &field, horizon).unwrap();
        let (t_k, t_next, t) = (1.0, 1.4, 1.3);
        let d: f64 = t - t_k;
        let g2 = 1.0 - (-2.0 * (horizon - t_k)).exp();
        let slope = d.exp() - d.exp_m1() / g2;
        let x = dvector![0.9];
        assert_relative_eq!(s.invert(t_k, t_next, t, &x).unwrap()[0], 0.9 / slope, epsilon = 1e-14);
        assert_relative_eq!(s.step_logdet(t_k, t_next, t, &x).unwrap(), slope.ln(), epsilon = 1e-14);
        assert_eq!(s.invert(t_k, t_next, t_k, &x).unwrap(), x);
    }

    #[test]
    fn round_trip_inversion_on_mixture() {
        let cloud = AtomCloud::uniform_1d(&[-1.0, 1.0]).unwrap();
        for (scheme, fs) in [
            (Scheme::ExponentialIntegrator, ForwardSpec::vp()),
            (Scheme::DdimType, ForwardSpec::ve()),
            (Scheme::Euler, ForwardSpec::vp()),
        ] {
            let field = perturbed_field(Box::new(exact_field(&cloud, &fs)), 0.1, 3).unwrap();
            let s = Sampler::new(scheme, fs, &field, 5.0).unwrap();
            for i in 0..50 {
                let z = dvector![-3.0 + 6.0 * i as f64 / 49.0];
                let x = s.interpolant(2.0, 2.2, 2.13, &z).unwrap();
                let back = s.invert(2.0, 2.2, 2.13, &x).unwrap();
                assert!((back[0] - z[0]).abs() < 1e-10, "{scheme} {}", z[0]);
            }
        }
    }

    #[test]
    fn reverse_run_on_single_gaussian() {
        let fs = ForwardSpec::vp();
        let field = exact_field(&origin(), &fs);
        let grid = build_grid(6.0, 0.01, 0.01).unwrap();
        let s = Sampler::new(Scheme::ExponentialIntegrator, fs, &field, 6.0).unwrap();
        let init = Init::Prior { count: 4000, seed: 3 };
        let run = run_reverse(&s, &grid, &init, 3).unwrap();
        let finals = run.final_states();
        let n = finals.len() as f64;
        let sq: Vec<f64> = finals.iter().map(|x| x[0] * x[0]).collect();
        let var = sq.iter().sum::<f64>() / n;
        let sd = (sq.iter().map(|v| (v - var).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        // The start law N(0,1) is slightly off q_T; the flow contracts variance
        // toward 1 − e^{−2δ}.
        let target = 1.0 - (-0.02f64).exp();
        assert!((var - target).abs() < 3.0 * sd + 0.01 * target, "{var} {target}");
        assert_eq!(run.logdet[0][0], 0.0);
        assert_eq!(run.states[0].len(), grid.nodes.len());
        let again = run_reverse(&s, &grid, &init, 3).unwrap();
        assert_eq!(run, again);
        let total: f64 = (0..grid.steps())
            .map(|k| s.step_logdet(grid.nodes[k], grid.nodes[k + 1], grid.nodes[k + 1], &run.states[5][k]).unwrap())
            .sum();
        assert_relative_eq!(total, *run.logdet[5].last().unwrap(), epsilon = 1e-12);
        let csv = run.particle_csv(0).unwrap();
        assert!(csv.starts_with("node,t,x0,logdet\n0,0,"));
    }

    #[test]
    fn reference_integrator_on_linear_flow() {
        // Single atom at 0 under VP the flow is linear and Y_t/g(T − t) is constant.
        let fs = ForwardSpec::vp();
        let field = exact_field(&origin(), &fs);
        let horizon = 4.0;
        let (y, _) = continuous_reference(&fs, &field, horizon, 0.0, 3.5, &dvector![1.3], 1e-10).unwrap();
        let g = |t: f64| (-(-2.0 * (horizon - t)).exp_m1()).sqrt();
        let expected = 1.3 * g(3.5) / g(0.0);
        assert_relative_eq!(y[0], expected, max_relative = 1e-9);

        let zero = ZeroField { dim: 1 };
        let (y, _) = continuous_reference(&ForwardSpec::ve(), &zero, 2.0, 0.0, 1.9, &dvector![0.7], 1e-8).unwrap();
        assert_eq!(y[0], 0.7);
    }
}
