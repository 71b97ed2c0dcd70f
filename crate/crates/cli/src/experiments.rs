//! Experiment runners behind `lab run`.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DVector;
use pflow_core::analytic_data::{log_marginal_density, marginal_density};
use pflow_core::forward::{grid_for_steps, prior, prior_tv_bound, sample_scaled};
use pflow_core::operators_bounds::{
    certificates_csv, certificates_json, certify_score_bounds, certify_time_derivative_bounds,
    gaussian_ratio_certificate, moment_certificates, operator_identity_check, oracle_check, prior_tv,
    prior_tv_certificate, theorem2_certificate, theorem3_terms, tweedie_certificate, BoundCertificate, ProbeSpec,
    Theorem2Spec, Theorem3Spec,
};
use pflow_core::rng::derive_seed;
use pflow_core::tv_metrics::{
    auto_window, counterexample_csv, counterexample_report, lemma1_refined, reverse_drift_1d, transport_tv_1d,
    transport_tv_mc, CounterexampleSpec, Lemma1Spec, Moments, QuadratureSpec,
};
use pflow_core::{build_grid, validate_grid, AtomCloud, FieldSpec, ForwardKind, ForwardSpec, Sampler, Scheme, TimeGrid};
use rand::Rng as _;

use crate::config::{
    BoundCheck, BoundsConfig, ConvergenceConfig, CounterexampleConfig, ExperimentConfig, ExperimentKind,
    Lemma1Config, PriorDecayConfig, RandomClouds, ScheduleConfig, SlopeRule, StartLaw, Theorem3Config,
};
use crate::error::{CaseContext, LabError, Result};
use crate::fit::{fit_line, fit_order, fit_order_weighted, SlopeFit};
use crate::plot::PlotSpec;
use crate::report::{Cell, NamedFit, Rule, RunOutput, RunReport, Table};

const IDENTITY_LIMIT: f64 = 1e-10;
const DERIVATIVE_LIMIT: f64 = 1e-5;
const ROUNDTRIP_LIMIT: f64 = 1e-10;
const EXACT_LIMIT: f64 = 1.0 + 1e-9;

#[derive(Default)]
struct Outcome {
    metrics: Table,
    fits: Vec<NamedFit>,
    rules: Vec<Rule>,
    extras: Vec<(String, String)>,
    plot: Option<PlotSpec>,
}

/// Validates `config` and runs it on a pool of `jobs` workers. Results do
/// not depend on `jobs`.
pub fn run_experiment(config: &ExperimentConfig, base: &Path, jobs: usize) -> Result<RunOutput> {
    let errors = config.validate(base);
    if !errors.is_empty() {
        return Err(LabError::Config(errors));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| LabError::Input(format!("thread pool: {e}")))?;
    let mut out = pool.install(|| dispatch(config, base))?;

    out.rules.push(finite_rule(&out.metrics, &out.fits));
    let pass = out.rules.iter().all(|r| r.pass);
    Ok(RunOutput {
        report: RunReport {
            config: config.clone(),
            pass,
            rules: out.rules,
            fits: out.fits,
            metrics: out.metrics,
            artifacts: out.extras.iter().map(|(n, _)| n.clone()).collect(),
        },
        extras: out.extras,
        plot: out.plot,
    })
}

/// Fails when any number in the table or the fits is NaN.
pub fn finite_rule(metrics: &Table, fits: &[NamedFit]) -> Rule {
    let in_table = metrics.numbers().any(f64::is_nan);
    let in_fits = fits.iter().any(|f| {
        let s = &f.fit;
        [s.slope, s.half_width, s.intercept, s.residual].iter().any(|v| v.is_nan())
    });
    let bad = in_table || in_fits;
    Rule::new("finite_numerics", !bad, if bad { "NaN in the results" } else { "no NaN" })
}

fn dispatch(config: &ExperimentConfig, base: &Path) -> Result<Outcome> {
    let cloud = config.cloud.as_ref().map(|c| c.load(base)).transpose()?;
    let need = |c: &Option<AtomCloud>| c.clone().ok_or_else(|| LabError::Input("missing cloud".into()));
    let seed = config.seed;
    match config.experiment {
        ExperimentKind::Convergence => convergence(seed, section(&config.convergence)?, &need(&cloud)?),
        ExperimentKind::Counterexample => counterexample(seed, section(&config.counterexample)?),
        ExperimentKind::Bounds => bounds(seed, section(&config.bounds)?, cloud.as_ref()),
        ExperimentKind::Lemma1 => lemma1(seed, section(&config.lemma1)?, &need(&cloud)?),
        ExperimentKind::Theorem3 => theorem3(seed, section(&config.theorem3)?, &need(&cloud)?),
        ExperimentKind::PriorDecay => prior_decay(seed, section(&config.prior_decay)?, &need(&cloud)?),
        ExperimentKind::ScheduleInfo => schedule(seed, section(&config.schedule)?),
    }
}

fn section<T>(s: &Option<T>) -> Result<&T> {
    s.as_ref().ok_or_else(|| LabError::Input("missing experiment section".into()))
}

fn slope_rule(name: &str, fit: &SlopeFit, rule: &SlopeRule) -> Rule {
    let pass = (fit.slope - rule.slope).abs() <= rule.tolerance;
    Rule::new(
        name,
        pass,
        format!(
            "slope {:.4} (SE {:.2e}, residual {:.2e}), required {} ± {}",
            fit.slope, fit.half_width, fit.residual, rule.slope, rule.tolerance
        ),
    )
}

fn field_label(field: &FieldSpec) -> String {
    match field {
        FieldSpec::Exact => "exact".into(),
        FieldSpec::Perturbed {
            amplitude,
            wavenumber,
        } => format!("perturbed(a={amplitude},k={wavenumber})"),
        FieldSpec::SineCounterexample { n, horizon } => format!("sine(n={n},T={horizon})"),
        FieldSpec::Zero => "zero".into(),
    }
}

fn max_step(grid: &TimeGrid) -> f64 {
    (0..grid.steps()).map(|k| grid.step_size(k)).fold(0.0, f64::max)
}

fn geometric(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count < 2 || hi <= lo {
        return vec![lo];
    }
    let r = (hi / lo).ln() / (count - 1) as f64;
    (0..count).map(|j| lo * (r * j as f64).exp()).collect()
}

fn convergence(seed: u64, c: &ConvergenceConfig, cloud: &AtomCloud) -> Result<Outcome> {
    let fs = ForwardSpec::new(c.forward);
    let field = c.field.build(cloud, &fs)?;
    let sampler = Sampler::new(c.scheme, fs, field.as_ref(), c.horizon)?;
    let start_ms = fs.scaling(c.horizon)?;
    let target_ms = fs.scaling(c.delta)?;
    let pi = prior(&fs, c.horizon, cloud.dim());
    let start_moments = match c.start {
        StartLaw::Exact => Moments::of_marginal(cloud, start_ms),
        StartLaw::Prior => Moments::of_gaussian(&pi),
    };
    let mut table = Table::new(&["seed", "forward", "scheme", "target_steps", "N", "eta", "tv", "tv_error"]);
    let mut pairs = Vec::new();
    let mut errors = Vec::new();

    // d = 2 shares one start sample across step counts.
    let starts = if cloud.dim() == 2 {
        let n = c.samples.unwrap_or(0);
        match c.start {
            StartLaw::Exact => sample_scaled(cloud, start_ms, n, seed)?,
            StartLaw::Prior => pi.sample(n, seed),
        }
    } else {
        Vec::new()
    };

    for &target in &c.steps {
        let grid = grid_for_steps(c.horizon, c.delta, target).case(|| format!("grid for {target} steps"))?;
        let context = || format!("{} {} with {} steps", c.forward, c.scheme, grid.steps());
        let (tv, err) = if cloud.dim() == 1 {
            let start = |z: f64| match c.start {
                StartLaw::Exact => marginal_density(cloud, start_ms, &DVector::from_element(1, z)).unwrap_or(f64::NAN),
                StartLaw::Prior => pi.density_1d(z),
            };
            let target_pdf =
                |x: f64| marginal_density(cloud, target_ms, &DVector::from_element(1, x)).unwrap_or(f64::NAN);
            let spec = QuadratureSpec::new(auto_window(std::slice::from_ref(&start_moments))?, c.cells);
            let est = transport_tv_1d(&sampler, &grid, start, target_pdf, &spec).case(context)?;
            (est.value, est.error)
        } else {
            let start_log = |z: &DVector<f64>| match c.start {
                StartLaw::Exact => log_marginal_density(cloud, start_ms, z),
                StartLaw::Prior => Ok(pi.log_density(z)),
            };
            let target_log = |x: &DVector<f64>| log_marginal_density(cloud, target_ms, x);
            let est = transport_tv_mc(&sampler, &grid, &starts, start_log, target_log).case(context)?;
            (est.value, est.stderr)
        };
        table.push(vec![
            seed.into(),
            c.forward.to_string().into(),
            c.scheme.to_string().into(),
            target.into(),
            grid.steps().into(),
            max_step(&grid).into(),
            tv.into(),
            err.into(),
        ]);
        pairs.push((grid.steps() as f64, tv));
        errors.push(err);
    }
    let fit = if cloud.dim() == 1 {
        fit_order(&pairs)?
    } else {
        fit_order_weighted(&pairs, &errors)?
    };
    let mut out = Outcome {
        metrics: table,
        plot: Some(PlotSpec {
            group: Some("scheme".into()),
            title: Some(format!("{} {} TV against N", c.forward, c.scheme)),
            ..PlotSpec::log_log("N", "tv")
        }),
        ..Outcome::default()
    };
    if let Some(rule) = &c.acceptance {
        out.rules.push(slope_rule("convergence_slope", &fit, rule));
    }
    out.fits.push(NamedFit {
        name: "log_tv_vs_log_N".into(),
        fit,
    });
    Ok(out)
}

fn counterexample(seed: u64, c: &CounterexampleConfig) -> Result<Outcome> {
    let spec = CounterexampleSpec {
        ode_samples: c.ode_samples,
        fp_nodes: c.fp_nodes,
        seed,
        ..CounterexampleSpec::default()
    };
    let r = counterexample_report(c.n, c.horizon, &spec)?;
    let mut table = Table::new(&[
        "seed",
        "n",
        "T",
        "sup_score_error",
        "score_error_bound",
        "tv_final",
        "tv_error",
        "tv_lower_bound",
        "fp_residual",
        "ode_density_error",
        "ode_tv",
        "ode_tv_stderr",
    ]);
    table.push(vec![
        seed.into(),
        (r.n as usize).into(),
        r.horizon.into(),
        r.sup_score_error.into(),
        r.score_error_bound.into(),
        r.tv_final.into(),
        r.tv_error.into(),
        r.tv_lower_bound.into(),
        r.fp_residual.into(),
        r.ode_density_error.into(),
        r.ode_tv.into(),
        r.ode_tv_stderr.into(),
    ]);
    let rules = vec![
        Rule::new(
            "score_error_small",
            r.sup_score_error <= r.score_error_bound,
            format!("sup error {:.4e} against {:.4e}", r.sup_score_error, r.score_error_bound),
        ),
        Rule::new(
            "tv_bounded_below",
            r.tv_final - r.tv_error >= r.tv_lower_bound,
            format!("TV {:.6} ± {:.1e} against {:.6}", r.tv_final, r.tv_error, r.tv_lower_bound),
        ),
        Rule::new(
            "continuity_residual",
            r.fp_residual <= c.max_fp_residual,
            format!("residual {:.3e} against {:.1e}", r.fp_residual, c.max_fp_residual),
        ),
    ];
    Ok(Outcome {
        metrics: table,
        rules,
        extras: vec![("counterexample.csv".into(), counterexample_csv(&r)?)],
        ..Outcome::default()
    })
}

/// Random atoms in the cube, scaled so the farthest sits at `radius`.
pub fn random_cloud(dim: usize, atoms: usize, radius: f64, seed: u64) -> Result<AtomCloud> {
    let mut rng = pflow_core::rng::seeded(seed);
    let mut points: Vec<DVector<f64>> =
        (0..atoms).map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0))).collect();
    let far = points.iter().map(|p| p.norm()).fold(0.0, f64::max);
    if far > 0.0 {
        for p in &mut points {
            *p *= radius / far;
        }
    }
    let raw: Vec<f64> = (0..atoms).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    Ok(AtomCloud::with_radius(
        points,
        raw.into_iter().map(|w| w / total).collect(),
        radius,
    )?)
}

fn bound_clouds(seed: u64, b: &BoundsConfig, cloud: Option<&AtomCloud>) -> Result<Vec<(String, AtomCloud)>> {
    let mut clouds = Vec::new();
    if let Some(c) = cloud {
        clouds.push(("config".to_string(), c.clone()));
    }
    if let Some(RandomClouds { dims, radii, atoms }) = &b.random_clouds {
        for &d in dims {
            for &r in radii {
                let i = clouds.len() as u64;
                clouds.push((format!("random-d{d}-R{r}"), random_cloud(d, *atoms, r, derive_seed(seed, i))?));
            }
        }
    }
    Ok(clouds)
}

struct BoundRows {
    table: Table,
    certs: Vec<BoundCertificate>,
}

impl BoundRows {
    fn new() -> Self {
        BoundRows {
            table: Table::new(&[
                "seed",
                "check",
                "name",
                "cloud",
                "d",
                "R",
                "forward",
                "params",
                "probes",
                "value",
                "limit",
                "exact_constant",
                "pass",
            ]),
            certs: Vec::new(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        seed: u64,
        check: &str,
        name: &str,
        cloud: (&str, &AtomCloud),
        forward: &str,
        params: &BTreeMap<String, String>,
        probes: usize,
        value: f64,
        limit: f64,
        exact: bool,
    ) {
        let params = params
            .iter()
            .filter(|(k, _)| !matches!(k.as_str(), "d" | "R" | "forward" | "cloud"))
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";");
        self.table.push(vec![
            seed.into(),
            check.into(),
            name.into(),
            cloud.0.into(),
            cloud.1.dim().into(),
            cloud.1.radius().into(),
            forward.into(),
            params.into(),
            probes.into(),
            value.into(),
            limit.into(),
            exact.into(),
            (value <= limit).into(),
        ]);
    }

    fn certificate(&mut self, seed: u64, check: &str, cloud: (&str, &AtomCloud), mut cert: BoundCertificate, cap: f64) {
        cert.params.insert("cloud".into(), cloud.0.into());
        let forward = cert.params.get("forward").cloned().unwrap_or_else(|| "-".into());
        let limit = if cert.exact_constant { EXACT_LIMIT } else { cap };
        self.push(
            seed,
            check,
            &cert.bound_name,
            cloud,
            &forward,
            &cert.params,
            cert.probes,
            cert.max_ratio,
            limit,
            cert.exact_constant,
        );
        self.certs.push(cert);
    }
}

fn check_name(check: BoundCheck) -> String {
    serde_json::to_value(check)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

fn sampler_pairs() -> [(ForwardSpec, Scheme, f64); 2] {
    [
        (ForwardSpec::vp(), Scheme::ExponentialIntegrator, 4.0),
        (ForwardSpec::ve(), Scheme::DdimType, 8.0),
    ]
}

fn bounds(seed: u64, b: &BoundsConfig, cloud: Option<&AtomCloud>) -> Result<Outcome> {
    let clouds = bound_clouds(seed, b, cloud)?;
    let mut rows = BoundRows::new();
    let both = [ForwardSpec::vp(), ForwardSpec::ve()];
    let probe = |tag: u64, t_min: f64| ProbeSpec {
        probes: b.probes,
        seed: derive_seed(seed, tag),
        t_min,
        t_max: b.t_max,
        x_scale: b.x_scale,
        cap: b.cap,
    };
    let mut rules = Vec::new();
    for &check in &b.checks {
        let name = check_name(check);
        let first_row = rows.table.rows.len();
        for (ci, (id, c)) in clouds.iter().enumerate() {
            let tag = derive_seed(ci as u64, check as u64);
            let at = (id.as_str(), c);
            let ctx = |what: &str| format!("{name} on cloud {id}: {what}");
            match check {
                BoundCheck::Score => {
                    for fs in &both {
                        for cert in certify_score_bounds(c, fs, &probe(tag, b.t_min)).case(|| ctx("score"))? {
                            rows.certificate(seed, &name, at, cert, b.cap);
                        }
                    }
                }
                BoundCheck::GaussianRatio => {
                    let d = c.dim() as f64;
                    let per_axis = ((b.probes as f64).powf(1.0 / d).ceil() as usize).max(3) | 1;
                    for &(delta, h) in &b.ratio_pairs {
                        let cert = gaussian_ratio_certificate(c, delta, h, per_axis).case(|| ctx("ratio"))?;
                        rows.certificate(seed, &name, at, cert, b.cap);
                    }
                }
                BoundCheck::Prior => {
                    let cells = if c.dim() == 1 { 400 } else { 100 };
                    let cert = prior_tv_certificate(c, &ForwardSpec::ve(), &b.horizons, cells, tag)
                        .case(|| ctx("prior"))?;
                    rows.certificate(seed, &name, at, cert, b.cap);
                }
                BoundCheck::Tweedie => {
                    let times = geometric(b.t_min, b.t_max, 6);
                    for fs in &both {
                        let cert = tweedie_certificate(c, fs, &times, b.samples, tag).case(|| ctx("tweedie"))?;
                        rows.certificate(seed, &name, at, cert, b.cap);
                    }
                }
                BoundCheck::TimeDerivatives => {
                    for &t_min in &b.t_min_sweep {
                        for fs in &both {
                            for cert in certify_time_derivative_bounds(c, fs, &probe(tag, t_min))
                                .case(|| ctx("time derivatives"))?
                            {
                                rows.certificate(seed, &name, at, cert, b.cap);
                            }
                        }
                    }
                }
                BoundCheck::Moments => {
                    for (j, &t_min) in b.t_min_sweep.iter().enumerate() {
                        let s = geometric(t_min, b.t_max, 6);
                        for fs in &both {
                            for mut cert in moment_certificates(c, fs, &s, b.samples, derive_seed(tag, j as u64), b.cap)
                                .case(|| ctx("moments"))?
                            {
                                cert.params.insert("t_min".into(), t_min.to_string());
                                rows.certificate(seed, &name, at, cert, b.cap);
                            }
                        }
                    }
                }
                BoundCheck::Operators => {
                    for (fs, scheme, horizon) in sampler_pairs() {
                        for field_spec in [
                            FieldSpec::Exact,
                            FieldSpec::Perturbed {
                                amplitude: 0.1,
                                wavenumber: 3,
                            },
                        ] {
                            let field = field_spec.build(c, &fs)?;
                            let sampler = Sampler::new(scheme, fs, field.as_ref(), horizon)?;
                            let grid = build_grid(horizon, 0.05, 0.25)?;
                            let r = operator_identity_check(&sampler, c, &grid, b.probes, tag)
                                .case(|| ctx("operators"))?;
                            let params = BTreeMap::from([
                                ("scheme".to_string(), scheme.to_string()),
                                ("field".to_string(), field_label(&field_spec)),
                            ]);
                            let fw = fs.kind.to_string();
                            for (n, v) in [
                                ("phi_closed_form", r.max_phi_error),
                                ("psi_closed_form", r.max_psi_error),
                                ("phi_time_invariance", r.max_phi_time_variation),
                            ] {
                                rows.push(seed, &name, n, at, &fw, &params, r.probes, v, IDENTITY_LIMIT, true);
                            }
                        }
                    }
                }
                BoundCheck::Oracles => {
                    for (fs, scheme, horizon) in sampler_pairs() {
                        let field = FieldSpec::Exact.build(c, &fs)?;
                        let sampler = Sampler::new(scheme, fs, field.as_ref(), horizon)?;
                        let grid = build_grid(horizon, 0.05, 0.05)?;
                        let r = oracle_check(c, &fs, &probe(tag, b.t_min), &sampler, &grid).case(|| ctx("oracles"))?;
                        let params = BTreeMap::from([("scheme".to_string(), scheme.to_string())]);
                        let fw = fs.kind.to_string();
                        for (n, v) in [
                            ("score_fd", r.max_score_error),
                            ("jacobian_fd", r.max_jacobian_error),
                            ("divergence_fd", r.max_divergence_error),
                            ("grad_trace_fd", r.max_grad_trace_error),
                        ] {
                            rows.push(seed, &name, n, at, &fw, &params, r.probes, v, DERIVATIVE_LIMIT, true);
                        }
                        // An empty round-trip sample must not pass.
                        let rt = if r.roundtrip_probes == 0 { f64::INFINITY } else { r.max_roundtrip_error };
                        rows.push(seed, &name, "inversion_roundtrip", at, &fw, &params, r.roundtrip_probes, rt, ROUNDTRIP_LIMIT, true);
                    }
                }
                BoundCheck::Continuous => {
                    if c.dim() != 1 {
                        continue;
                    }
                    let fs = ForwardSpec::vp();
                    let mut score_terms = Vec::new();
                    for &amp in &b.amplitudes {
                        let spec = if amp == 0.0 {
                            FieldSpec::Exact
                        } else {
                            FieldSpec::Perturbed {
                                amplitude: amp,
                                wavenumber: 3,
                            }
                        };
                        let field = spec.build(c, &fs)?;
                        let r = theorem2_certificate(c, field.as_ref(), b.continuous_horizon, b.continuous_delta, &Theorem2Spec::default())
                            .case(|| ctx("continuous bound"))?;
                        let params = BTreeMap::from([
                            ("field".to_string(), field_label(&spec)),
                            ("T".to_string(), r.horizon.to_string()),
                            ("delta".to_string(), r.delta.to_string()),
                            ("bound".to_string(), r.bound.to_string()),
                            ("tolerance".to_string(), r.tolerance.to_string()),
                            ("eps_score".to_string(), r.eps_score.to_string()),
                            ("eps_div".to_string(), r.eps_div.to_string()),
                        ]);
                        rows.push(seed, &name, "continuous_tv", at, "vp", &params, 1, r.measured_tv, r.bound + r.tolerance, true);
                        score_terms.push((amp, r.score_term));
                    }
                    // The score term is linear in the perturbation amplitude.
                    for &(a, s) in &score_terms {
                        if let Some(&(_, s2)) = score_terms.iter().find(|(a2, _)| a > 0.0 && (a2 - 2.0 * a).abs() <= 1e-12 * a) {
                            let params = BTreeMap::from([("amplitude".to_string(), a.to_string())]);
                            let gap = (s2 / s - 2.0).abs();
                            rows.push(seed, &name, "score_term_doubling", at, "vp", &params, 2, gap, 1e-6, true);
                        }
                    }
                }
            }
        }
        let mine = &rows.table.rows[first_row..];
        let pass_col = rows.table.columns.iter().position(|c| c == "pass").expect("pass column");
        let value_col = rows.table.columns.iter().position(|c| c == "value").expect("value column");
        let failed = mine.iter().filter(|r| r[pass_col] != Cell::Text("true".into())).count();
        let worst = mine
            .iter()
            .filter_map(|r| match (&r[2], &r[value_col]) {
                (Cell::Text(n), Cell::Num(v)) => Some((n.clone(), *v)),
                _ => None,
            })
            .max_by(|a, b| a.1.total_cmp(&b.1));
        let detail = match worst {
            Some((n, v)) => format!("{} of {} rows pass; largest value {v:.4e} ({n})", mine.len() - failed, mine.len()),
            None => "no rows".into(),
        };
        rules.push(Rule::new(format!("bounds_{name}"), failed == 0 && !mine.is_empty(), detail));
    }
    let mut extras = Vec::new();
    if !rows.certs.is_empty() {
        extras.push(("certificates.csv".to_string(), certificates_csv(&rows.certs)?));
        extras.push(("certificates.json".to_string(), certificates_json(&rows.certs)?));
    }
    Ok(Outcome {
        metrics: rows.table,
        rules,
        extras,
        ..Outcome::default()
    })
}

fn lemma1(seed: u64, l: &Lemma1Config, cloud: &AtomCloud) -> Result<Outcome> {
    let fs = ForwardSpec::vp();
    let exact = FieldSpec::Exact.build(cloud, &fs)?;
    let pert = FieldSpec::Perturbed {
        amplitude: l.amplitude,
        wavenumber: l.wavenumber,
    }
    .build(cloud, &fs)?;
    let b = reverse_drift_1d(fs, pert.as_ref(), l.horizon);
    let bs = reverse_drift_1d(fs, exact.as_ref(), l.horizon);
    let ms = fs.scaling(l.horizon)?;
    let l0 = |x: f64| log_marginal_density(cloud, ms, &DVector::from_element(1, x)).unwrap_or(f64::NAN);
    let spec = Lemma1Spec {
        window: l.window,
        points: l.points,
        t0: 0.0,
        times: l.times.clone(),
        fd_step: l.fd_step,
        ode_tol: l.ode_tol,
    };
    let r = lemma1_refined(&b, &bs, &l0, &l0, &spec).case(|| "TV derivative check".into())?;
    let mut table = Table::new(&["seed", "level", "t", "tv", "dtv_fd", "rhs", "residual"]);
    for (level, rows) in [("coarse", &r.coarse), ("fine", &r.fine)] {
        for row in rows {
            table.push(vec![
                seed.into(),
                level.into(),
                row.t.into(),
                row.tv.into(),
                row.dtv_fd.into(),
                row.rhs.into(),
                row.residual.into(),
            ]);
        }
    }
    let rules = vec![
        Rule::new(
            "refined_residual",
            r.max_residual_fine <= l.max_residual,
            format!("largest relative residual {:.4e} against {}", r.max_residual_fine, l.max_residual),
        ),
        Rule::new(
            "residual_shrinks",
            r.refinement_ratio >= l.min_refinement_ratio,
            format!(
                "coarse {:.4e} / fine {:.4e} = {:.3}, required ≥ {}",
                r.max_residual_coarse, r.max_residual_fine, r.refinement_ratio, l.min_refinement_ratio
            ),
        ),
    ];
    Ok(Outcome {
        metrics: table,
        rules,
        extras: vec![("lemma1.csv".into(), r.to_csv()?)],
        ..Outcome::default()
    })
}

fn theorem3(seed: u64, t: &Theorem3Config, cloud: &AtomCloud) -> Result<Outcome> {
    let mut table = Table::new(&[
        "seed", "case", "forward", "scheme", "field", "eta", "N", "I", "II", "III", "IV", "V", "prior_tv", "lhs", "rhs",
        "tolerance", "max_eta_l", "holds",
    ]);
    let mut rules = Vec::new();
    let mut extras = Vec::new();
    let spec = Theorem3Spec {
        cells: t.cells,
        tv_cells: t.cells,
    };
    for (i, case) in t.cases.iter().enumerate() {
        let fs = ForwardSpec::new(case.forward);
        let horizon = match case.forward {
            ForwardKind::Vp => t.horizon_vp,
            ForwardKind::Ve => t.horizon_ve,
        };
        let field = case.field.build(cloud, &fs)?;
        let sampler = Sampler::new(case.scheme, fs, field.as_ref(), horizon)?;
        let label = format!("case{i}_{}_{}", case.forward, case.scheme);
        let mut reports = Vec::new();
        for &eta in &t.etas {
            let grid = build_grid(horizon, t.delta, eta)?;
            let r = theorem3_terms(&sampler, cloud, &grid, &spec).case(|| format!("{label} at eta {eta}"))?;
            let mut row: Vec<Cell> = vec![
                seed.into(),
                i.into(),
                case.forward.to_string().into(),
                case.scheme.to_string().into(),
                field_label(&case.field).into(),
                eta.into(),
                grid.steps().into(),
            ];
            row.extend(r.totals.iter().map(|v| Cell::from(*v)));
            row.extend([
                r.prior_tv.into(),
                r.lhs.into(),
                r.rhs.into(),
                r.tolerance.into(),
                r.max_eta_l.into(),
                r.holds.into(),
            ]);
            table.push(row);
            extras.push((format!("theorem3_{label}_eta{eta}.csv"), r.to_csv()?));
            reports.push((eta, r));
        }
        let held = reports.iter().filter(|(_, r)| r.holds).count();
        rules.push(Rule::new(
            format!("{label}_bound_holds"),
            held == reports.len(),
            reports
                .iter()
                .map(|(e, r)| format!("eta {e}: lhs {:.4e} ≤ rhs {:.4e} + tol {:.1e}", r.lhs, r.rhs, r.tolerance))
                .collect::<Vec<_>>()
                .join("; "),
        ));
        let worst_l = reports.iter().map(|(_, r)| r.max_eta_l).fold(0.0, f64::max);
        rules.push(Rule::new(
            format!("{label}_step_condition"),
            worst_l < 0.5,
            format!("largest eta·L {worst_l:.4}, required below 0.5"),
        ));
        if let Some(limit) = case.max_estimation_terms {
            let worst = reports.iter().map(|(_, r)| r.totals[0] + r.totals[1]).fold(0.0, f64::max);
            rules.push(Rule::new(
                format!("{label}_estimation_terms"),
                worst <= limit,
                format!("largest (I)+(II) {worst:.3e} against {limit:.1e}"),
            ));
        }
        for w in reports.windows(2) {
            let ((e0, r0), (e1, r1)) = (&w[0], &w[1]);
            if ((e0 / e1) - 2.0).abs() > 1e-9 {
                continue;
            }
            let ratio = (r0.totals[2] + r0.totals[3]) / (r1.totals[2] + r1.totals[3]);
            let (lo, hi) = t.halving_ratio;
            rules.push(Rule::new(
                format!("{label}_halving_{e0}_{e1}"),
                ratio >= lo && ratio <= hi,
                format!("(III)+(IV) ratio {ratio:.4}, required in [{lo}, {hi}]"),
            ));
        }
    }
    Ok(Outcome {
        metrics: table,
        rules,
        extras,
        ..Outcome::default()
    })
}

fn prior_decay(seed: u64, p: &PriorDecayConfig, cloud: &AtomCloud) -> Result<Outcome> {
    let mut table = Table::new(&["seed", "forward", "T", "tv", "tv_error", "bound"]);
    let mut fits = Vec::new();
    let mut rules = Vec::new();
    for case in &p.cases {
        let fs = ForwardSpec::new(case.forward);
        let mut values = Vec::new();
        for &horizon in &case.horizons {
            let (tv, err) = prior_tv(cloud, &fs, horizon, p.cells, seed).case(|| format!("{} prior TV at T = {horizon}", case.forward))?;
            table.push(vec![
                seed.into(),
                case.forward.to_string().into(),
                horizon.into(),
                tv.into(),
                err.into(),
                prior_tv_bound(&fs, cloud, horizon).value.into(),
            ]);
            values.push((horizon, tv));
        }
        let (name, fit) = match case.forward {
            ForwardKind::Vp => {
                if values.iter().any(|(_, v)| !(*v > 0.0)) {
                    return Err(LabError::Input("prior TV must be positive for a log fit".into()));
                }
                let (x, y): (Vec<f64>, Vec<f64>) = values.iter().map(|(t, v)| (*t, v.ln())).unzip();
                ("vp_log_tv_vs_T", fit_line(&x, &y, None)?)
            }
            ForwardKind::Ve => ("ve_log_tv_vs_log_T", fit_order(&values)?),
        };
        if let Some(rule) = &case.acceptance {
            rules.push(slope_rule(&format!("{name}_slope"), &fit, rule));
        }
        fits.push(NamedFit {
            name: name.into(),
            fit,
        });
    }
    Ok(Outcome {
        metrics: table,
        fits,
        rules,
        plot: Some(PlotSpec {
            group: Some("forward".into()),
            title: Some("TV between the forward marginal and the prior".into()),
            ..PlotSpec::log_log("T", "tv")
        }),
        ..Outcome::default()
    })
}

fn schedule(seed: u64, s: &ScheduleConfig) -> Result<Outcome> {
    let grid = build_grid(s.horizon, s.delta, s.eta)?;
    let check = validate_grid(&grid, s.eta);
    let mut table = Table::new(&["seed", "k", "t_k", "t_next", "step", "remaining"]);
    for k in 0..grid.steps() {
        let (a, b) = (grid.nodes[k], grid.nodes[k + 1]);
        table.push(vec![seed.into(), k.into(), a.into(), b.into(), (b - a).into(), (s.horizon - a).into()]);
    }
    let detail = match (&check.first_violation, &check.reason) {
        (Some(k), Some(why)) => format!("step {k}: {why}"),
        _ => format!("{} steps, largest {:.4e}", grid.steps(), max_step(&grid)),
    };
    Ok(Outcome {
        metrics: table,
        rules: vec![Rule::new("grid_valid", check.pass, detail)],
        extras: vec![("grid.json".into(), grid.to_json())],
        ..Outcome::default()
    })
}
