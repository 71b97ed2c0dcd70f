//! Experiment configuration.
//!
//! Configs are JSON documents validated against `schema/experiment.schema.json`.
//! Unknown keys are rejected; [`ExperimentConfig::validate`] then lists every
//! semantic violation at once.

use std::path::{Path, PathBuf};

use pflow_core::{AtomCloud, FieldSpec, ForwardKind, Scheme};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub const SCHEMA: &str = include_str!("../schema/experiment.schema.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Convergence,
    Counterexample,
    Bounds,
    Lemma1,
    Theorem3,
    PriorDecay,
    ScheduleInfo,
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = serde_json::to_value(self).map_err(|_| std::fmt::Error)?;
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud: Option<CloudSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterexample: Option<CounterexampleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundsConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lemma1: Option<Lemma1Config>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theorem3: Option<Theorem3Config>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_decay: Option<PriorDecayConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleConfig>,
}

/// Inline atoms or a JSON file holding `{atoms, weights}`; relative paths
/// resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CloudSource {
    Inline(InlineCloud),
    File(CloudFile),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineCloud {
    pub atoms: Vec<Vec<f64>>,
    /// Uniform when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudFile {
    pub file: PathBuf,
}

impl CloudSource {
    pub fn load(&self, base: &Path) -> Result<AtomCloud> {
        match self {
            CloudSource::Inline(c) => {
                let n = c.atoms.len();
                let weights = c.weights.clone().unwrap_or_else(|| vec![1.0 / n as f64; n]);
                Ok(AtomCloud::new(
                    c.atoms.iter().map(|a| nalgebra::DVector::from_column_slice(a)).collect(),
                    weights,
                )?)
            }
            CloudSource::File(f) => {
                let path = base.join(&f.file);
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| LabError::Config(vec![format!("cloud file {}: {e}", path.display())]))?;
                Ok(AtomCloud::from_json(&text)?)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartLaw {
    /// The forward marginal `q_T`, isolating discretization error.
    #[default]
    Exact,
    Prior,
}

fn default_field() -> FieldSpec {
    FieldSpec::Exact
}

fn default_cells() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub forward: ForwardKind,
    pub scheme: Scheme,
    #[serde(default = "default_field")]
    pub field: FieldSpec,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub delta: f64,
    /// Target step counts; each grid lands within one step of its target.
    pub steps: Vec<usize>,
    #[serde(default)]
    pub start: StartLaw,
    /// Quadrature cells in `d = 1`.
    #[serde(default = "default_cells")]
    pub cells: usize,
    /// Monte Carlo samples in `d = 2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceptance: Option<SlopeRule>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlopeRule {
    pub slope: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterexampleConfig {
    pub n: u32,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(default = "default_ode_samples")]
    pub ode_samples: usize,
    #[serde(default = "default_fp_nodes")]
    pub fp_nodes: usize,
    #[serde(default = "default_fp_max")]
    pub max_fp_residual: f64,
}

fn default_ode_samples() -> usize {
    2000
}

fn default_fp_nodes() -> usize {
    401
}

fn default_fp_max() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundCheck {
    /// Score, Hessian and trace-gradient bounds.
    Score,
    GaussianRatio,
    /// VE Pinsker bound on `TV(q_T, N(0, T))`.
    Prior,
    Tweedie,
    TimeDerivatives,
    Moments,
    /// Closed-form identities of the error operators.
    Operators,
    /// Analytic derivatives against finite differences, and inversion.
    Oracles,
    /// The continuous-time TV bound (`d = 1`, VP).
    Continuous,
}

/// Random clouds with the farthest atom at exactly radius `R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomClouds {
    pub dims: Vec<usize>,
    pub radii: Vec<f64>,
    pub atoms: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    pub checks: Vec<BoundCheck>,
    /// Clouds in addition to the top-level `cloud`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_clouds: Option<RandomClouds>,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default = "default_t_min")]
    pub t_min: f64,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    #[serde(default = "default_x_scale")]
    pub x_scale: f64,
    #[serde(default = "default_cap")]
    pub cap: f64,
    /// Lower probe-time limits for the order-only sweep, decreasing.
    #[serde(default = "default_t_min_sweep")]
    pub t_min_sweep: Vec<f64>,
    /// `(δ, h)` pairs for the Gaussian ratio lemma.
    #[serde(default = "default_ratio_pairs")]
    pub ratio_pairs: Vec<(f64, f64)>,
    #[serde(default = "default_horizons")]
    pub horizons: Vec<f64>,
    #[serde(default = "default_mc_samples")]
    pub samples: usize,
    /// Perturbation amplitudes for the continuous-time bound.
    #[serde(default = "default_amplitudes")]
    pub amplitudes: Vec<f64>,
    #[serde(rename = "continuous_T", default = "default_continuous_horizon")]
    pub continuous_horizon: f64,
    #[serde(default = "default_continuous_delta")]
    pub continuous_delta: f64,
}

fn default_probes() -> usize {
    10_000
}
fn default_t_min() -> f64 {
    0.02
}
fn default_t_max() -> f64 {
    5.0
}
fn default_x_scale() -> f64 {
    6.0
}
fn default_cap() -> f64 {
    10.0
}
fn default_t_min_sweep() -> Vec<f64> {
    vec![0.2, 0.1, 0.05, 0.02]
}
fn default_ratio_pairs() -> Vec<(f64, f64)> {
    vec![(1.0, 1.0), (0.5, 0.25), (0.1, 0.4)]
}
fn default_horizons() -> Vec<f64> {
    vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0]
}
fn default_mc_samples() -> usize {
    20_000
}
fn default_amplitudes() -> Vec<f64> {
    vec![0.0, 0.05, 0.1]
}
fn default_continuous_horizon() -> f64 {
    4.0
}
fn default_continuous_delta() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lemma1Config {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub amplitude: f64,
    pub wavenumber: u32,
    pub window: (f64, f64),
    pub points: usize,
    pub times: Vec<f64>,
    pub fd_step: f64,
    #[serde(default = "default_lemma_tol")]
    pub ode_tol: f64,
    #[serde(default = "default_max_residual")]
    pub max_residual: f64,
    #[serde(default = "default_min_ratio")]
    pub min_refinement_ratio: f64,
}

fn default_lemma_tol() -> f64 {
    1e-11
}
fn default_max_residual() -> f64 {
    0.05
}
fn default_min_ratio() -> f64 {
    1.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Theorem3Case {
    pub forward: ForwardKind,
    pub scheme: Scheme,
    #[serde(default = "default_field")]
    pub field: FieldSpec,
    /// Upper limit on the summed terms (I) and (II), when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_estimation_terms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Theorem3Config {
    pub cases: Vec<Theorem3Case>,
    #[serde(rename = "T_vp")]
    pub horizon_vp: f64,
    #[serde(rename = "T_ve")]
    pub horizon_ve: f64,
    pub delta: f64,
    /// Step scales, decreasing; consecutive pairs form the halving test.
    pub etas: Vec<f64>,
    #[serde(default = "default_cells")]
    pub cells: usize,
    /// Accepted range of the (III)+(IV) ratio between consecutive etas.
    #[serde(default = "default_halving")]
    pub halving_ratio: (f64, f64),
}

fn default_halving() -> (f64, f64) {
    (1.6, 2.4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorDecayCase {
    pub forward: ForwardKind,
    #[serde(rename = "T")]
    pub horizons: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceptance: Option<SlopeRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorDecayConfig {
    pub cases: Vec<PriorDecayCase>,
    #[serde(default = "default_prior_cells")]
    pub cells: usize,
}

fn default_prior_cells() -> usize {
    400
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub delta: f64,
    pub eta: f64,
}

fn strictly_ascending<T: PartialOrd>(v: &[T]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

fn strictly_descending<T: PartialOrd>(v: &[T]) -> bool {
    v.windows(2).all(|w| w[0] > w[1])
}

fn positive(errors: &mut Vec<String>, name: &str, v: f64) {
    if !(v > 0.0 && v.is_finite()) {
        errors.push(format!("{name} must be positive and finite, got {v}"));
    }
}

fn horizon_delta(errors: &mut Vec<String>, prefix: &str, horizon: f64, delta: f64) {
    positive(errors, &format!("{prefix}.delta"), delta);
    if !(horizon > 1.0 && horizon.is_finite()) {
        errors.push(format!("{prefix}.T must exceed 1, got {horizon}"));
    }
    if !(delta < 1.0) {
        errors.push(format!("{prefix}.delta must be below 1, got {delta}"));
    }
}

impl ExperimentConfig {
    /// Parses a config; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LabError::Config(vec![e.to_string()]))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(vec![format!("{}: {e}", path.display())]))?;
        Self::from_json(&text)
    }

    /// Lists every semantic violation; `base` resolves cloud files.
    pub fn validate(&self, base: &Path) -> Vec<String> {
        let mut errors = Vec::new();
        let kind = self.experiment;
        let sections = [
            ("convergence", self.convergence.is_some(), ExperimentKind::Convergence),
            ("counterexample", self.counterexample.is_some(), ExperimentKind::Counterexample),
            ("bounds", self.bounds.is_some(), ExperimentKind::Bounds),
            ("lemma1", self.lemma1.is_some(), ExperimentKind::Lemma1),
            ("theorem3", self.theorem3.is_some(), ExperimentKind::Theorem3),
            ("prior_decay", self.prior_decay.is_some(), ExperimentKind::PriorDecay),
            ("schedule", self.schedule.is_some(), ExperimentKind::ScheduleInfo),
        ];
        for (name, present, owner) in sections {
            if present && owner != kind {
                errors.push(format!("section `{name}` does not apply to a {kind} experiment"));
            }
            if !present && owner == kind {
                errors.push(format!("a {kind} experiment needs a `{name}` section"));
            }
        }
        let needs_cloud = !matches!(
            kind,
            ExperimentKind::Counterexample | ExperimentKind::ScheduleInfo | ExperimentKind::Bounds
        );
        let cloud = match &self.cloud {
            Some(src) => match src.load(base) {
                Ok(c) => Some(c),
                Err(e) => {
                    errors.push(format!("cloud: {e}"));
                    None
                }
            },
            None => {
                if needs_cloud {
                    errors.push(format!("a {kind} experiment needs a `cloud`"));
                }
                None
            }
        };
        let dim = cloud.as_ref().map(|c| c.dim());

        if let Some(c) = &self.convergence {
            horizon_delta(&mut errors, "convergence", c.horizon, c.delta);
            if c.steps.len() < 4 {
                errors.push("convergence.steps needs at least four entries for a slope fit".into());
            }
            if !strictly_ascending(&c.steps) {
                errors.push("convergence.steps must be strictly ascending".into());
            }
            if c.steps.first() == Some(&0) {
                errors.push("convergence.steps must be positive".into());
            }
            if c.scheme == Scheme::ExponentialIntegrator && c.forward != ForwardKind::Vp {
                errors.push("the exponential integrator needs the VP forward process".into());
            }
            match dim {
                Some(1) => {}
                Some(2) => {
                    if c.samples.unwrap_or(0) < 2 {
                        errors.push("convergence in d = 2 needs `samples` ≥ 2".into());
                    }
                }
                Some(d) => errors.push(format!("convergence studies support d = 1 or 2, got {d}")),
                None => {}
            }
            if c.cells == 0 {
                errors.push("convergence.cells must be positive".into());
            }
            if let Some(r) = &c.acceptance {
                positive(&mut errors, "convergence.acceptance.tolerance", r.tolerance);
            }
        }
        if let Some(c) = &self.counterexample {
            if c.n == 0 {
                errors.push("counterexample.n must be at least 1".into());
            }
            positive(&mut errors, "counterexample.T", c.horizon);
            if c.fp_nodes < 3 {
                errors.push("counterexample.fp_nodes must be at least 3".into());
            }
            if c.ode_samples < 2 {
                errors.push("counterexample.ode_samples must be at least 2".into());
            }
        }
        if let Some(b) = &self.bounds {
            if b.checks.is_empty() {
                errors.push("bounds.checks is empty".into());
            }
            if self.cloud.is_none() && b.random_clouds.is_none() {
                errors.push("bounds needs `cloud` or `bounds.random_clouds`".into());
            }
            if let Some(r) = &b.random_clouds {
                if r.dims.is_empty() || r.dims.iter().any(|d| !(1..=3).contains(d)) {
                    errors.push("bounds.random_clouds.dims must be a nonempty list within 1..=3".into());
                }
                if r.radii.is_empty() || r.radii.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                    errors.push("bounds.random_clouds.radii must be a nonempty list of nonnegative radii".into());
                }
                if r.atoms == 0 {
                    errors.push("bounds.random_clouds.atoms must be positive".into());
                }
            }
            if let Some(d) = dim {
                if d > 3 {
                    errors.push(format!("bound certificates support d ≤ 3, got {d}"));
                }
            }
            if b.probes == 0 {
                errors.push("bounds.probes must be positive".into());
            }
            positive(&mut errors, "bounds.t_min", b.t_min);
            if !(b.t_max >= b.t_min) {
                errors.push("bounds.t_max must be at least t_min".into());
            }
            positive(&mut errors, "bounds.x_scale", b.x_scale);
            positive(&mut errors, "bounds.cap", b.cap);
            if b.t_min_sweep.is_empty() || !strictly_descending(&b.t_min_sweep) {
                errors.push("bounds.t_min_sweep must be a nonempty strictly decreasing list".into());
            }
            for (i, (delta, h)) in b.ratio_pairs.iter().enumerate() {
                if !(*delta > 0.0 && *h >= 0.0) {
                    errors.push(format!("bounds.ratio_pairs[{i}] needs δ > 0 and h ≥ 0"));
                }
            }
            if b.horizons.is_empty() || !strictly_ascending(&b.horizons) {
                errors.push("bounds.horizons must be a nonempty ascending list".into());
            }
            if b.samples < 2 {
                errors.push("bounds.samples must be at least 2".into());
            }
            if b.amplitudes.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
                errors.push("bounds.amplitudes must be nonnegative".into());
            }
            if !(b.continuous_delta > 0.0 && b.continuous_delta < b.continuous_horizon) {
                errors.push("bounds needs 0 < continuous_delta < continuous_T".into());
            }
            if b.checks.contains(&BoundCheck::Continuous) && dim != Some(1) {
                errors.push("the continuous-time bound check needs a one-dimensional `cloud`".into());
            }
        }
        if let Some(l) = &self.lemma1 {
            positive(&mut errors, "lemma1.T", l.horizon);
            if dim.is_some_and(|d| d != 1) {
                errors.push("lemma1 needs a one-dimensional cloud".into());
            }
            if !(l.window.1 > l.window.0) {
                errors.push("lemma1.window must be increasing".into());
            }
            if l.points < 5 {
                errors.push("lemma1.points must be at least 5".into());
            }
            if l.times.is_empty() || !strictly_ascending(&l.times) {
                errors.push("lemma1.times must be a nonempty ascending list".into());
            }
            positive(&mut errors, "lemma1.fd_step", l.fd_step);
            if l.times.first().is_some_and(|t| *t - l.fd_step < 0.0)
                || l.times.last().is_some_and(|t| *t + l.fd_step >= l.horizon)
            {
                errors.push("lemma1.times ± fd_step must lie in [0, T)".into());
            }
            if l.wavenumber == 0 {
                errors.push("lemma1.wavenumber must be at least 1".into());
            }
        }
        if let Some(t) = &self.theorem3 {
            if t.cases.is_empty() {
                errors.push("theorem3.cases is empty".into());
            }
            if dim.is_some_and(|d| d != 1) {
                errors.push("theorem3 needs a one-dimensional cloud".into());
            }
            horizon_delta(&mut errors, "theorem3", t.horizon_vp, t.delta);
            horizon_delta(&mut errors, "theorem3", t.horizon_ve, t.delta);
            if t.etas.is_empty() || !strictly_descending(&t.etas) || t.etas.iter().any(|e| !(*e > 0.0)) {
                errors.push("theorem3.etas must be a nonempty strictly decreasing list of positive steps".into());
            }
            for (i, c) in t.cases.iter().enumerate() {
                if c.scheme == Scheme::ExponentialIntegrator && c.forward != ForwardKind::Vp {
                    errors.push(format!("theorem3.cases[{i}]: the exponential integrator needs VP"));
                }
            }
        }
        if let Some(p) = &self.prior_decay {
            if p.cases.is_empty() {
                errors.push("prior_decay.cases is empty".into());
            }
            if dim.is_some_and(|d| d > 2) {
                errors.push("prior decay uses quadrature and supports d ≤ 2".into());
            }
            for (i, c) in p.cases.iter().enumerate() {
                if c.horizons.len() < 4 || !strictly_ascending(&c.horizons) {
                    errors.push(format!("prior_decay.cases[{i}].T needs at least four ascending horizons"));
                }
                if c.horizons.iter().any(|t| !(*t > 0.0)) {
                    errors.push(format!("prior_decay.cases[{i}].T must be positive"));
                }
            }
        }
        if let Some(s) = &self.schedule {
            horizon_delta(&mut errors, "schedule", s.horizon, s.delta);
            positive(&mut errors, "schedule.eta", s.eta);
        }
        errors
    }
}
