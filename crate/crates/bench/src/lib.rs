//! Fixtures shared by the benchmarks.

use multiway_core::data::{Conditioning, Mode, Observation, Treatment, TwoWaySample};
use multiway_core::estimator::{fit_full_sample, InjectedSignals};
use multiway_core::{BasisSpec, SieveFit};

/// An `n x n` fit with deterministic pseudo-random signals and a `p`-term polynomial basis.
pub fn fixture_fit(n: usize, p: usize) -> SieveFit {
    let cells: Vec<Observation> = (0..n * n)
        .map(|k| {
            let x = ((k as f64) * 0.618_033_988_7).fract() * 2.0 - 1.0;
            Observation { outcome: 0.0, treatment: Treatment::Binary(k % 2 == 0), covariates: vec![x], conditioning_value: x }
        })
        .collect();
    let values = (0..n * n).map(|k| ((k as f64) * 1.3).sin() + (k / n) as f64 * 0.01).collect();
    let sample = TwoWaySample::new(n, n, Mode::Cate, Conditioning::Covariate(0), cells).expect("valid fixture");
    let basis = BasisSpec::polynomial(p, -1.0, 1.0).expect("valid basis");
    fit_full_sample(&sample, &basis, &InjectedSignals { n_cols: n, values }, 0.0).expect("fixture fit")
}
