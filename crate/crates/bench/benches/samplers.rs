use criterion::{black_box, criterion_group, criterion_main, Criterion};
use nalgebra::DVector;
use pflow_bench::{ring, two_atoms};
use pflow_core::analytic_data::Posterior;
use pflow_core::forward::grid_for_steps;
use pflow_core::score_models::exact_field;
use pflow_core::{ForwardSpec, Sampler, Scheme};

fn posterior(c: &mut Criterion) {
    let fs = ForwardSpec::vp();
    for (dim, atoms) in [(1, 2), (3, 16)] {
        let cloud = ring(dim, atoms, 1.0);
        let ms = fs.scaling(0.5).unwrap();
        let x = DVector::from_element(dim, 0.3);
        c.bench_function(&format!("posterior_jacobian_d{dim}_n{atoms}"), |b| {
            b.iter(|| Posterior::compute(&cloud, ms, black_box(&x)).unwrap().score_jacobian())
        });
    }
}

fn transport(c: &mut Criterion) {
    let cloud = two_atoms();
    for (fs, scheme, horizon) in [
        (ForwardSpec::vp(), Scheme::ExponentialIntegrator, 6.0),
        (ForwardSpec::ve(), Scheme::DdimType, 16.0),
    ] {
        let field = exact_field(&cloud, &fs);
        let sampler = Sampler::new(scheme, fs, &field, horizon).unwrap();
        let grid = grid_for_steps(horizon, 0.01, 256).unwrap();
        let x = DVector::from_element(1, 0.2);
        c.bench_function(&format!("transport_{scheme}_256_steps"), |b| {
            b.iter(|| sampler.transport(&grid, black_box(&x)).unwrap())
        });
        c.bench_function(&format!("invert_{scheme}"), |b| {
            let y = sampler.interpolant(1.0, 1.05, 1.03, &x).unwrap();
            b.iter(|| sampler.invert(1.0, 1.05, 1.03, black_box(&y)).unwrap())
        });
    }
}

criterion_group!(benches, posterior, transport);
criterion_main!(benches);
