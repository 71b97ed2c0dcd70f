//! Forward noising processes, the two-stage reverse time grid, priors and the
//! bounds that depend only on the forward process.

use nalgebra::DVector;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::analytic_data::{AtomCloud, MarginalScaling};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForwardKind {
    /// Variance preserving (Ornstein–Uhlenbeck): `dX = −X dt + √2 dW`.
    Vp,
    /// Variance exploding: `dX = dW`.
    Ve,
}

impl std::fmt::Display for ForwardKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ForwardKind::Vp => "vp",
            ForwardKind::Ve => "ve",
        })
    }
}

/// A forward SDE `dX = a·X dt + G dW` with its Gaussian marginal scalings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardSpec {
    pub kind: ForwardKind,
}

impl ForwardSpec {
    pub fn new(kind: ForwardKind) -> Self {
        ForwardSpec { kind }
    }

    pub fn vp() -> Self {
        Self::new(ForwardKind::Vp)
    }

    pub fn ve() -> Self {
        Self::new(ForwardKind::Ve)
    }

    /// Coefficient `a` of the linear drift `f_sde(t, x) = a·x`.
    pub fn drift_coeff(&self) -> f64 {
        match self.kind {
            ForwardKind::Vp => -1.0,
            ForwardKind::Ve => 0.0,
        }
    }

    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        x * self.drift_coeff()
    }

    pub fn diffusion(&self) -> f64 {
        match self.kind {
            ForwardKind::Vp => std::f64::consts::SQRT_2,
            ForwardKind::Ve => 1.0,
        }
    }

    /// `g_sde²`.
    pub fn diffusion_sq(&self) -> f64 {
        match self.kind {
            ForwardKind::Vp => 2.0,
            ForwardKind::Ve => 1.0,
        }
    }

    /// Marginal scaling at forward time `t > 0`.
    pub fn scaling(&self, t: f64) -> Result<MarginalScaling> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::domain(format!(
                "forward marginal needs t > 0, got {t}"
            )));
        }
        let (f, g2) = self.scaling_sq(t);
        MarginalScaling::new(f, g2.sqrt())
    }

    /// `(f(t), g(t)²)`, defined for all `t ≥ 0`.
    pub fn scaling_sq(&self, t: f64) -> (f64, f64) {
        match self.kind {
            ForwardKind::Vp => ((-t).exp(), -(-2.0 * t).exp_m1()),
            ForwardKind::Ve => (1.0, t),
        }
    }
}

/// Reverse-time grid `0 = t₀ < … < t_N = T − δ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub delta: f64,
    pub eta: f64,
    pub nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn steps(&self) -> usize {
        self.nodes.len().saturating_sub(1)
    }

    pub fn step_size(&self, k: usize) -> f64 {
        self.nodes[k + 1] - self.nodes[k]
    }

    pub fn end(&self) -> f64 {
        *self.nodes.last().expect("grid has nodes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::input(format!("time grid json: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("grid serializes")
    }
}

/// Builds the two-stage schedule: uniform steps of `eta` on `[0, T − 1]` (the
/// last one shortened to land on `T − 1`), then steps shrinking by `1/(1+eta)`
/// down to `T − delta`, laid out backward from `T − delta`.
pub fn build_grid(horizon: f64, delta: f64, eta: f64) -> Result<TimeGrid> {
    if !(horizon > 1.0) || !horizon.is_finite() {
        return Err(Error::input(format!("horizon T = {horizon} must exceed 1")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::input(format!("cutoff delta = {delta} must lie in (0, 1)")));
    }
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::input(format!("eta = {eta} must be positive")));
    }
    let switch = horizon - 1.0;
    // A last step longer than η by under 1e−13 is absorbed rather than split.
    let n1 = ((switch - 1e-13) / eta).ceil().max(1.0) as usize;
    let mut nodes = Vec::with_capacity(n1 + 1);
    for k in 0..n1 {
        nodes.push(k as f64 * eta);
    }
    nodes.push(switch);

    // τ_j = δ(1+η)^j for j < m with τ_m ≥ 1; nodes T − τ_{m−1}, …, T − τ_0.
    let ratio = 1.0 + eta;
    let mut taus = vec![delta];
    loop {
        let next = taus.last().unwrap() * ratio;
        if next >= 1.0 * (1.0 - 1e-12) {
            break;
        }
        taus.push(next);
    }
    for &tau in taus.iter().rev() {
        nodes.push(horizon - tau);
    }
    Ok(TimeGrid {
        horizon,
        delta,
        eta,
        nodes,
    })
}

/// The two-stage grid whose step count is closest to `target`, found by
/// bisection on `η` (the count is monotone in `η` but may skip values).
pub fn grid_for_steps(horizon: f64, delta: f64, target: usize) -> Result<TimeGrid> {
    if target < 2 {
        return Err(Error::input(format!("target step count {target} must be at least 2")));
    }
    let steps = |eta: f64| build_grid(horizon, delta, eta).map(|g| g.steps());
    // The first stage alone exceeds the target at `lo`; both stages collapse
    // to a single step each at `hi`.
    let (mut lo, mut hi) = ((horizon - 1.0) / (target as f64 + 1.0), (horizon - 1.0).max(1.0 / delta) + 1.0);
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if steps(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-15 {
            break;
        }
    }
    let below = build_grid(horizon, delta, hi)?;
    let above = build_grid(horizon, delta, lo)?;
    if above.steps().abs_diff(target) < below.steps().abs_diff(target) {
        Ok(above)
    } else {
        Ok(below)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCheck {
    pub pass: bool,
    /// Index `k` of the first offending step `[t_k, t_{k+1}]`, or of the
    /// offending node for endpoint failures.
    pub first_violation: Option<usize>,
    pub reason: Option<String>,
}

impl GridCheck {
    fn fail(index: usize, reason: String) -> Self {
        GridCheck {
            pass: false,
            first_violation: Some(index),
            reason: Some(reason),
        }
    }
}

/// Checks `t_{k+1} − t_k ≤ η·min{1, T − t_{k+1}}` for every step together with
/// the endpoints `t₀ = 0` and `t_N = T − δ`.
pub fn validate_grid(grid: &TimeGrid, eta: f64) -> GridCheck {
    const TOL: f64 = 1e-12;
    let nodes = &grid.nodes;
    if nodes.is_empty() {
        return GridCheck::fail(0, "empty grid".into());
    }
    if nodes[0].abs() > TOL {
        return GridCheck::fail(0, format!("first node {} is not 0", nodes[0]));
    }
    for k in 0..nodes.len().saturating_sub(1) {
        let step = nodes[k + 1] - nodes[k];
        if !(step > 0.0) {
            return GridCheck::fail(k, format!("nodes not ascending at step {k}"));
        }
        let cap = eta * (grid.horizon - nodes[k + 1]).min(1.0);
        if step > cap + TOL {
            return GridCheck::fail(
                k,
                format!("step {k} has length {step} above the cap {cap}"),
            );
        }
    }
    let last = nodes.len() - 1;
    let target = grid.horizon - grid.delta;
    if (nodes[last] - target).abs() > TOL * target.abs().max(1.0) {
        return GridCheck::fail(
            last,
            format!("last node {} is not T - delta = {target}", nodes[last]),
        );
    }
    GridCheck {
        pass: true,
        first_violation: None,
        reason: None,
    }
}

/// Isotropic Gaussian `N(0, variance·I_d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub dim: usize,
    pub variance: f64,
}

impl GaussianSpec {
    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let d = self.dim as f64;
        -0.5 * x.norm_squared() / self.variance
            - 0.5 * d * (2.0 * std::f64::consts::PI * self.variance).ln()
    }

    pub fn density_1d(&self, x: f64) -> f64 {
        (-0.5 * x * x / self.variance).exp() / (2.0 * std::f64::consts::PI * self.variance).sqrt()
    }

    pub fn sample(&self, count: usize, seed: u64) -> Vec<DVector<f64>> {
        let sd = self.variance.sqrt();
        (0..count)
            .map(|i| {
                let mut r = rng::stream(seed, i as u64);
                DVector::from_fn(self.dim, |_, _| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    sd * z
                })
            })
            .collect()
    }
}

/// Reverse-process starting law: `N(0, I)` for VP, `N(0, T·I)` for VE.
pub fn prior(fs: &ForwardSpec, horizon: f64, dim: usize) -> GaussianSpec {
    GaussianSpec {
        dim,
        variance: match fs.kind {
            ForwardKind::Vp => 1.0,
            ForwardKind::Ve => horizon,
        },
    }
}

/// A bound value with a flag telling whether its constant is explicit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundValue {
    pub value: f64,
    pub exact_constant: bool,
}

/// Upper bound on `TV(q_T, prior)`.
///
/// VE uses Pinsker on `KL(q_T‖N(0,TI)) ≤ E‖X₀‖²/(2T)`. VP reports
/// `√(d/2)·e^{−T}`, whose constant is only order-correct.
pub fn prior_tv_bound(fs: &ForwardSpec, cloud: &AtomCloud, horizon: f64) -> BoundValue {
    let d = cloud.dim() as f64;
    match fs.kind {
        ForwardKind::Ve => BoundValue {
            value: (cloud.second_moment() / (4.0 * horizon)).sqrt(),
            exact_constant: true,
        },
        ForwardKind::Vp => BoundValue {
            value: (d / 2.0).sqrt() * (-horizon).exp(),
            exact_constant: false,
        },
    }
}

/// Bound on `E‖Y_t‖^order` where `Y_t` has the forward marginal at forward
/// time `s = T − t`.
pub fn moment_bound(fs: &ForwardSpec, cloud: &AtomCloud, s: f64, order: u32) -> Result<BoundValue> {
    if !(1..=4).contains(&order) {
        return Err(Error::input(format!("moment order {order} not in 1..=4")));
    }
    if !(s >= 0.0) {
        return Err(Error::input(format!("forward time {s} must be nonnegative")));
    }
    let r = cloud.radius();
    let d = cloud.dim() as f64;
    let scale = match fs.kind {
        ForwardKind::Vp => s.min(1.0),
        ForwardKind::Ve => s,
    };
    let value = match order {
        1 => r + (scale * d).sqrt(),
        2 => r * r + scale * d,
        3 => r.powi(3) + (scale * d).powf(1.5),
        _ => r.powi(4) + (scale * d).powi(2),
    };
    // Only the VE first and second moments come with explicit constants.
    let exact_constant = fs.kind == ForwardKind::Ve && order <= 2;
    Ok(BoundValue {
        value,
        exact_constant,
    })
}

/// `E‖∇log q_t(X_t)‖² ≤ d/g(t)²`.
pub fn tweedie_second_moment_bound(fs: &ForwardSpec, t: f64, dim: usize) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::input(format!("Tweedie bound needs t > 0, got {t}")));
    }
    let (_, g2) = fs.scaling_sq(t);
    Ok(dim as f64 / g2)
}

/// Draws `count` points from the forward marginal at time `t`.
pub fn sample_marginal(
    cloud: &AtomCloud,
    fs: &ForwardSpec,
    t: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    let ms = fs.scaling(t)?;
    sample_scaled(cloud, ms, count, seed)
}

pub fn sample_scaled(
    cloud: &AtomCloud,
    ms: MarginalScaling,
    count: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let index = WeightedIndex::new(cloud.weights())
        .map_err(|e| Error::input(format!("atom weights: {e}")))?;
    let d = cloud.dim();
    Ok((0..count)
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            let atom = &cloud.atoms()[index.sample(&mut r)];
            DVector::from_fn(d, |j, _| {
                let z: f64 = StandardNormal.sample(&mut r);
                ms.f * atom[j] + ms.g * z
            })
        })
        .collect())
}
