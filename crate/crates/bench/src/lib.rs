//! Shared inputs for the benchmarks.

use nalgebra::DVector;
use pflow_core::AtomCloud;

/// The asymmetric two-atom cloud used by the convergence studies.
pub fn two_atoms() -> AtomCloud {
    AtomCloud::uniform_1d(&[-1.0, 1.5]).expect("valid cloud")
}

/// `atoms` points on a circle of the given radius in `dim` dimensions.
pub fn ring(dim: usize, atoms: usize, radius: f64) -> AtomCloud {
    let points = (0..atoms)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / atoms as f64;
            DVector::from_fn(dim, |j, _| match j {
                0 => radius * a.cos(),
                1 => radius * a.sin(),
                _ => 0.0,
            })
        })
        .collect();
    AtomCloud::new(points, vec![1.0 / atoms as f64; atoms]).expect("valid cloud")
}
