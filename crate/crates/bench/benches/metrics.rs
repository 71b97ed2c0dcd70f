use criterion::{criterion_group, criterion_main, Criterion};
use pflow_bench::two_atoms;
use pflow_core::operators_bounds::{certify_score_bounds, prior_tv, theorem3_terms, ProbeSpec, Theorem3Spec};
use pflow_core::score_models::exact_field;
use pflow_core::{build_grid, AtomCloud, ForwardSpec, Sampler, Scheme};

fn prior_mismatch(c: &mut Criterion) {
    let cloud = two_atoms();
    c.bench_function("prior_tv_vp_T4", |b| {
        b.iter(|| prior_tv(&cloud, &ForwardSpec::vp(), 4.0, 400, 0).unwrap())
    });
}

fn certificates(c: &mut Criterion) {
    let cloud = pflow_bench::ring(2, 6, 1.5);
    let spec = ProbeSpec {
        probes: 1000,
        ..ProbeSpec::default()
    };
    c.bench_function("score_certificates_1000_probes", |b| {
        b.iter(|| certify_score_bounds(&cloud, &ForwardSpec::vp(), &spec).unwrap())
    });
}

fn five_terms(c: &mut Criterion) {
    let cloud = AtomCloud::new(
        vec![nalgebra::dvector![-0.5], nalgebra::dvector![0.5]],
        vec![0.4, 0.6],
    )
    .unwrap();
    let fs = ForwardSpec::vp();
    let field = exact_field(&cloud, &fs);
    let sampler = Sampler::new(Scheme::ExponentialIntegrator, fs, &field, 4.0).unwrap();
    let grid = build_grid(4.0, 0.1, 0.2).unwrap();
    let spec = Theorem3Spec { cells: 50, tv_cells: 50 };
    let mut group = c.benchmark_group("five_terms");
    group.sample_size(10);
    group.bench_function("vp_ei_eta_0.2", |b| b.iter(|| theorem3_terms(&sampler, &cloud, &grid, &spec).unwrap()));
    group.finish();
}

criterion_group!(benches, prior_mismatch, certificates, five_terms);
criterion_main!(benches);
