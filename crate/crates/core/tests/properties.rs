use nalgebra::DVector;
use pflow_core::analytic_data::{log_marginal_density, Posterior};
use pflow_core::forward::grid_for_steps;
use pflow_core::operators_bounds::{certify_score_bounds, gaussian_ratio_certificate, ProbeSpec};
use pflow_core::score_models::{exact_field, perturbed_field};
use pflow_core::tv_metrics::{tv_quadrature, QuadratureSpec};
use pflow_core::*;
use proptest::prelude::*;

fn cloud_strategy(max_dim: usize) -> impl Strategy<Value = AtomCloud> {
    (1..=max_dim, 1usize..5).prop_flat_map(|(d, n)| {
        (
            prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), n),
            prop::collection::vec(0.1f64..1.0, n),
        )
            .prop_map(|(atoms, w)| {
                let total: f64 = w.iter().sum();
                AtomCloud::new(
                    atoms.into_iter().map(DVector::from_vec).collect(),
                    w.into_iter().map(|v| v / total).collect(),
                )
                .unwrap()
            })
    })
}

fn point(d: usize, seed: &[f64]) -> DVector<f64> {
    DVector::from_fn(d, |i, _| seed[i % seed.len()] * (1.0 + 0.3 * i as f64))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn score_is_gradient_of_log_density(
        cloud in cloud_strategy(3),
        f in 0.2f64..1.0,
        g in 0.4f64..2.0,
        seed in prop::collection::vec(-3.0f64..3.0, 3),
    ) {
        let ms = MarginalScaling::new(f, g).unwrap();
        let x = point(cloud.dim(), &seed);
        let post = Posterior::compute(&cloud, ms, &x).unwrap();
        let s = post.score();
        let h = 1e-5;
        for i in 0..cloud.dim() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (log_marginal_density(&cloud, ms, &xp).unwrap()
                - log_marginal_density(&cloud, ms, &xm).unwrap()) / (2.0 * h);
            prop_assert!((fd - s[i]).abs() <= 1e-6 * s.norm().max(1.0), "{fd} vs {}", s[i]);
        }
        let jac = post.score_jacobian();
        prop_assert!((&jac - jac.transpose()).amax() <= 1e-12 * jac.amax().max(1.0));
        prop_assert!((post.score_divergence() - jac.trace()).abs() <= 1e-12 * jac.amax().max(1.0));
    }

    #[test]
    fn responsibilities_ignore_common_shift(
        cloud in cloud_strategy(2),
        shift in -40.0f64..40.0,
        seed in prop::collection::vec(-3.0f64..3.0, 2),
    ) {
        // Translating the data and the point together shifts every exponent
        // by the same amount.
        let ms = MarginalScaling::new(1.0, 0.7).unwrap();
        let x = point(cloud.dim(), &seed);
        let offset = DVector::from_element(cloud.dim(), shift);
        let moved = AtomCloud::new(
            cloud.atoms().iter().map(|a| a + &offset).collect(),
            cloud.weights().to_vec(),
        ).unwrap();
        let a = Posterior::compute(&cloud, ms, &x).unwrap().resp;
        let b = Posterior::compute(&moved, ms, &(&x + &offset)).unwrap().resp;
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_atom_reduces_to_gaussian(
        atom in prop::collection::vec(-2.0f64..2.0, 1..4),
        f in 0.1f64..1.0,
        g in 0.2f64..3.0,
        seed in prop::collection::vec(-3.0f64..3.0, 3),
    ) {
        let y = DVector::from_vec(atom);
        let d = y.len();
        let cloud = AtomCloud::single(y.clone()).unwrap();
        let ms = MarginalScaling::new(f, g).unwrap();
        let x = point(d, &seed);
        let post = Posterior::compute(&cloud, ms, &x).unwrap();
        let expected = -(&x - &y * f) / (g * g);
        prop_assert!((post.score() - expected).amax() <= 1e-12 * (1.0 + x.amax()) / (g * g));
        let j = post.score_jacobian();
        for r in 0..d {
            for c in 0..d {
                let want = if r == c { -1.0 / (g * g) } else { 0.0 };
                prop_assert!((j[(r, c)] - want).abs() <= 1e-12 / (g * g));
            }
        }
        prop_assert_eq!(post.grad_trace_hessian().amax(), 0.0);
    }

    #[test]
    fn built_grids_validate(horizon in 1.2f64..20.0, log_delta in -6.0f64..-0.5, eta in 0.01f64..1.0) {
        let delta = log_delta.exp().min(0.5 * (horizon - 1.0)).min(0.9);
        let grid = build_grid(horizon, delta, eta).unwrap();
        let check = validate_grid(&grid, eta);
        prop_assert!(check.pass, "{check:?}");
        prop_assert_eq!(*grid.nodes.last().unwrap(), horizon - delta);
    }

    #[test]
    fn vp_scalings_are_complementary(t in 1e-6f64..30.0) {
        let ms = ForwardSpec::vp().scaling(t).unwrap();
        prop_assert!((ms.f * ms.f + ms.g * ms.g - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn field_divergence_is_trace(
        cloud in cloud_strategy(3),
        amp in 0.0f64..0.5,
        tau in 0.05f64..3.0,
        seed in prop::collection::vec(-3.0f64..3.0, 3),
    ) {
        for fs in [ForwardSpec::vp(), ForwardSpec::ve()] {
            let field = perturbed_field(Box::new(exact_field(&cloud, &fs)), amp, 2).unwrap();
            let x = point(cloud.dim(), &seed);
            let ev = field.eval(tau, &x).unwrap();
            let div = field.divergence(tau, &x).unwrap();
            prop_assert!((div - ev.jacobian.trace()).abs() <= 1e-10 * ev.jacobian.amax().max(1.0));
            let h = 1e-5 * (1.0 + x.amax());
            for i in 0..cloud.dim() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let col = (field.score(tau, &xp).unwrap() - field.score(tau, &xm).unwrap()) / (2.0 * h);
                let err = (&col - ev.jacobian.column(i)).amax();
                prop_assert!(err <= 1e-5 * ev.jacobian.amax().max(1.0), "column {i}: {err}");
            }
        }
    }

    #[test]
    fn interpolant_ends_at_step_and_inverts(
        cloud in cloud_strategy(2),
        scheme_ix in 0usize..3,
        frac in 0.0f64..1.0,
        seed in prop::collection::vec(-3.0f64..3.0, 2),
    ) {
        let (fs, scheme) = [
            (ForwardSpec::vp(), Scheme::Euler),
            (ForwardSpec::vp(), Scheme::ExponentialIntegrator),
            (ForwardSpec::ve(), Scheme::DdimType),
        ][scheme_ix];
        let field = exact_field(&cloud, &fs);
        let sampler = Sampler::new(scheme, fs, &field, 4.0).unwrap();
        // τ ≥ 1 keeps |∇s_θ| below 1/g² ≈ 1.2 plus a data term, so ηL < ½.
        let (t_k, t_next) = (2.5, 2.55);
        let z = point(cloud.dim(), &seed);
        let end = sampler.interpolant(t_k, t_next, t_next, &z).unwrap();
        let step = sampler.step(t_k, t_next, &z).unwrap();
        prop_assert!((&end - &step).amax() <= 1e-15 * step.amax().max(1.0));
        let t = t_k + frac * (t_next - t_k);
        let x = sampler.interpolant(t_k, t_next, t, &z).unwrap();
        let back = sampler.invert(t_k, t_next, t, &x).unwrap();
        prop_assert!((&back - &z).amax() <= 1e-10);
    }

    #[test]
    fn transport_logdet_is_sum_of_steps(cloud in cloud_strategy(2), seed in prop::collection::vec(-3.0f64..3.0, 2)) {
        let fs = ForwardSpec::vp();
        let field = exact_field(&cloud, &fs);
        let sampler = Sampler::new(Scheme::ExponentialIntegrator, fs, &field, 3.0).unwrap();
        let grid = grid_for_steps(3.0, 0.2, 24).unwrap();
        let x0 = point(cloud.dim(), &seed);
        let (_, total) = sampler.transport(&grid, &x0).unwrap();
        let mut x = x0;
        let mut sum = 0.0;
        for k in 0..grid.steps() {
            let (a, b) = (grid.nodes[k], grid.nodes[k + 1]);
            sum += sampler.step_logdet(a, b, b, &x).unwrap();
            x = sampler.step(a, b, &x).unwrap();
        }
        prop_assert!((total - sum).abs() <= 1e-12 * sum.abs().max(1.0));
    }

    #[test]
    fn tv_is_bounded_and_symmetric(mu in -4.0f64..4.0, s1 in 0.3f64..2.0, s2 in 0.3f64..2.0) {
        let p = move |x: &[f64]| Ok((-(x[0] * x[0]) / (2.0 * s1 * s1)).exp() / (s1 * (2.0 * std::f64::consts::PI).sqrt()));
        let q = move |x: &[f64]| {
            let u = x[0] - mu;
            Ok((-(u * u) / (2.0 * s2 * s2)).exp() / (s2 * (2.0 * std::f64::consts::PI).sqrt()))
        };
        let spec = QuadratureSpec::new(vec![(-30.0, 30.0)], 120);
        let a = tv_quadrature(p, q, &spec).unwrap();
        let b = tv_quadrature(q, p, &spec).unwrap();
        prop_assert!(a.value >= 0.0 && a.value <= 1.0 + a.error);
        prop_assert!((a.value - b.value).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn exact_constant_certificates_hold(cloud in cloud_strategy(3), seed in 0u64..1000) {
        let spec = ProbeSpec { probes: 300, seed, ..ProbeSpec::default() };
        for fs in [ForwardSpec::vp(), ForwardSpec::ve()] {
            for c in certify_score_bounds(&cloud, &fs, &spec).unwrap() {
                prop_assert!(c.pass && c.max_ratio <= 1.0 + 1e-9, "{c:?}");
            }
        }
        let points = if cloud.dim() == 3 { 15 } else { 41 };
        let c = gaussian_ratio_certificate(&cloud, 0.3, 0.2, points).unwrap();
        prop_assert!(c.pass, "{c:?}");
    }
}
