//! Neyman-orthogonal generated outcomes and the ATE.

use serde::{Deserialize, Serialize};

use crate::data::{CellAccess, Mode, Observation};
use crate::error::{Error, Result};
use crate::nuisance::NuisanceFit;

/// Which nuisance fit produced a cell's signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    FullSample,
    Block(usize, usize),
}

/// Generated outcomes on the full grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub values: Vec<f64>,
    pub mode: Mode,
    pub provenance: Vec<Provenance>,
}

impl SignalMatrix {
    pub fn full_sample(n_rows: usize, n_cols: usize, values: Vec<f64>, mode: Mode) -> Self {
        assert_eq!(values.len(), n_rows * n_cols);
        Self { n_rows, n_cols, provenance: vec![Provenance::FullSample; values.len()], values, mode }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_cols + j]
    }
}

/// `D(Y - mu1)/pi + mu1 - (1 - D)(Y - mu0)/(1 - pi) - mu0`.
pub fn cate_signal_from_parts(treated: bool, y: f64, pi: f64, mu1: f64, mu0: f64) -> f64 {
    if treated {
        (y - mu1) / pi + mu1 - mu0
    } else {
        mu1 - (y - mu0) / (1.0 - pi) - mu0
    }
}

pub fn cate_signal(obs: &Observation, fit: &NuisanceFit) -> f64 {
    match fit {
        NuisanceFit::Cate { propensity, mu0, mu1, .. } => {
            let w = &obs.covariates;
            cate_signal_from_parts(obs.treatment.is_treated(), obs.outcome, propensity.predict(w), mu1.predict(0.0, w), mu0.predict(0.0, w))
        }
        NuisanceFit::Cte { .. } => panic!("cate_signal called with a continuous-treatment fit"),
    }
}

// Residual ratio (Y - mu(X, W)) / f(X | W) and the plug-in average.
fn cte_parts(obs: &Observation, fit: &NuisanceFit) -> (f64, f64) {
    match fit {
        NuisanceFit::Cte { density, outcome, covariate_mean, .. } => {
            let x = obs.treatment.value();
            let resid = obs.outcome - outcome.predict(x, &obs.covariates);
            let f = density.density(x, &obs.covariates).value;
            // the surface is affine in w, so its average over the covariate
            // sample is its value at the covariate mean
            (resid / f, outcome.predict(x, covariate_mean))
        }
        NuisanceFit::Cate { .. } => panic!("cte_signal called with a binary-treatment fit"),
    }
}

/// `(Y - mu(X, W)) / f(X | W) * omega(X) + mean_w mu(X, w)`.
pub fn cte_signal(obs: &Observation, fit: &NuisanceFit) -> f64 {
    let (ratio, plug_in) = cte_parts(obs, fit);
    let omega = match fit {
        NuisanceFit::Cte { marginal, .. } => marginal.eval(obs.treatment.value()),
        NuisanceFit::Cate { .. } => unreachable!(),
    };
    ratio * omega + plug_in
}

/// Kernel-localized variant with `K_h(X - x)` in place of `omega(X)`.
pub fn cte_signal_local(obs: &Observation, fit: &NuisanceFit, x: f64, h: f64) -> Result<f64> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::config("h", format!("bandwidth must be positive and finite, got {h}")));
    }
    let (ratio, plug_in) = cte_parts(obs, fit);
    let kernel = match fit {
        NuisanceFit::Cte { density, .. } => density.kernel,
        NuisanceFit::Cate { .. } => unreachable!(),
    };
    Ok(ratio * kernel.k_h(obs.treatment.value() - x, h) + plug_in)
}

/// Signals for every cell of `target` under `fit`.
pub fn compute_signals(fit: &NuisanceFit, target: &impl CellAccess) -> Vec<f64> {
    match fit.mode() {
        Mode::Cate => target.iter().map(|o| cate_signal(o, fit)).collect(),
        Mode::Cte => target.iter().map(|o| cte_signal(o, fit)).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AteEstimate {
    pub point: f64,
    pub se: f64,
}

/// Grand mean of the signals with a two-way cluster-robust standard error.
///
/// With block provenance the point estimate is the average of block means and
/// residuals are taken around each block's own mean.
pub fn ate_estimate(signals: &SignalMatrix) -> AteEstimate {
    let (n, m) = (signals.n_rows, signals.n_cols);
    let mut centre = vec![0.0; signals.values.len()];
    let point = if signals.provenance.iter().all(|p| *p == Provenance::FullSample) {
        let mean = signals.values.iter().sum::<f64>() / signals.values.len() as f64;
        centre.fill(mean);
        mean
    } else {
        let mut blocks: std::collections::BTreeMap<Provenance, (f64, usize)> = Default::default();
        for (v, p) in signals.values.iter().zip(&signals.provenance) {
            let e = blocks.entry(*p).or_default();
            e.0 += v;
            e.1 += 1;
        }
        for (c, p) in centre.iter_mut().zip(&signals.provenance) {
            let (s, k) = blocks[p];
            *c = s / k as f64;
        }
        blocks.values().map(|(s, k)| s / *k as f64).sum::<f64>() / blocks.len() as f64
    };
    let mut row = vec![0.0; n];
    let mut col = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            let u = signals.values[i * m + j] - centre[i * m + j];
            row[i] += u / m as f64;
            col[j] += u / n as f64;
        }
    }
    let eff = n.min(m) as f64;
    let sigma = eff / (n * n) as f64 * row.iter().map(|g| g * g).sum::<f64>()
        + eff / (m * m) as f64 * col.iter().map(|g| g * g).sum::<f64>();
    AteEstimate { point, se: (sigma / eff).sqrt() }
}

impl PartialOrd for Provenance {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Provenance {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        let key = |p: &Provenance| match *p {
            Provenance::FullSample => (0, 0, 0),
            Provenance::Block(k, l) => (1, k, l),
        };
        key(self).cmp(&key(other))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Treatment;
    use crate::nuisance::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cate_fit(pi: f64, mu1: f64, mu0: f64) -> NuisanceFit {
        let model = |arm, c: f64| OutcomeModel { arm, features: Features::Covariates, coefficients: vec![c, 0.0], ridge: 0.0 };
        NuisanceFit::Cate {
            propensity: PropensityModel::constant(pi, 0.01),
            mu0: model(Arm::Control, mu0),
            mu1: model(Arm::Treated, mu1),
            arm_fit: ArmFit::Separate,
        }
    }

    fn obs(y: f64, t: Treatment, w: f64) -> Observation {
        Observation { outcome: y, treatment: t, covariates: vec![w], conditioning_value: w }
    }

    // Density model whose value at any (x, w) is `c` for x near 0.
    fn cte_fit(outcome: Vec<f64>, order: usize, floor: f64) -> NuisanceFit {
        let density = CondDensityModel {
            xs: vec![0.0],
            ws: vec![0.0],
            dim: 1,
            bandwidth_x: 1e6,
            bandwidth_w: vec![1.0],
            kernel: Kernel::Gaussian,
            floor,
        };
        let marginal = MarginalDensity::new(&density, [[0.0].as_slice()]).unwrap();
        NuisanceFit::Cte {
            density,
            outcome: OutcomeModel { arm: Arm::Continuous, features: Features::TreatmentPolynomial { order }, coefficients: outcome, ridge: 0.0 },
            marginal,
            covariate_mean: vec![0.25],
        }
    }

    #[test]
    fn cate_examples() {
        assert_eq!(cate_signal(&obs(1.0, Treatment::Binary(true), 0.0), &cate_fit(0.5, 0.0, 0.0)), 2.0);
        assert_eq!(cate_signal(&obs(2.0, Treatment::Binary(false), 0.0), &cate_fit(0.5, 0.0, 0.0)), -4.0);
        assert_eq!(cate_signal(&obs(3.0, Treatment::Binary(true), 0.0), &cate_fit(0.3, 3.0, 1.0)), 2.0);
    }

    #[test]
    fn cte_examples() {
        // floor 1 with a flat kernel: f = omega = 1, mu = 0
        let fit = cte_fit(vec![0.0, 0.0, 0.0], 1, 1.0);
        assert_eq!(cte_signal(&obs(2.0, Treatment::Continuous(0.4), 0.1), &fit), 2.0);
        // mu(x, w) = x and Y = mu(X, W)
        let fit = cte_fit(vec![0.0, 1.0, 0.0], 1, 0.05);
        assert!((cte_signal(&obs(0.4, Treatment::Continuous(0.4), 0.9), &fit) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn cte_local_kernel() {
        let fit = cte_fit(vec![0.5, 0.0, 0.0, 1.0], 2, 0.5);
        let o = obs(2.0, Treatment::Continuous(0.3), 0.1);
        // residual 2 - 0.5 - 0.1 = 1.4 over floor 0.5, plug-in 0.5 + 0.25
        let v = cte_signal_local(&o, &fit, 0.3, 0.2).unwrap();
        let expect = 1.4 / 0.5 / (0.2 * (2.0 * std::f64::consts::PI).sqrt()) + 0.75;
        assert!((v - expect).abs() < 1e-12);
        let far = cte_signal_local(&o, &fit, 50.0, 0.2).unwrap();
        assert!((far - 0.75).abs() < 1e-12);
        assert!(cte_signal_local(&o, &fit, 0.3, 0.0).is_err());
        assert!(cte_signal_local(&o, &fit, 0.3, f64::INFINITY).is_err());
    }

    #[test]
    fn ate_examples() {
        let s = SignalMatrix::full_sample(2, 2, vec![1.0, 2.0, 3.0, 4.0], Mode::Cate);
        assert_eq!(ate_estimate(&s).point, 2.5);
        let s = SignalMatrix::full_sample(3, 4, vec![7.5; 12], Mode::Cate);
        assert_eq!(ate_estimate(&s), AteEstimate { point: 7.5, se: 0.0 });
    }

    #[test]
    fn ate_se_matches_double_sums() {
        let (n, m) = (50, 50);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = (0..n * m).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let est = ate_estimate(&SignalMatrix::full_sample(n, m, v.clone(), Mode::Cate));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let u = |i: usize, j: usize| v[i * m + j] - mean;
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..m {
                for jj in 0..m {
                    s += u(i, j) * u(i, jj);
                }
            }
        }
        for j in 0..m {
            for i in 0..n {
                for ii in 0..n {
                    s += u(i, j) * u(ii, j);
                }
            }
        }
        let sigma = 50.0 / (n * n * m * m) as f64 * s;
        assert!((est.se - (sigma / 50.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ate_block_average() {
        let prov = vec![Provenance::Block(0, 0), Provenance::Block(0, 0), Provenance::Block(1, 1), Provenance::Block(0, 1)];
        let s = SignalMatrix { n_rows: 2, n_cols: 2, values: vec![1.0, 3.0, 4.0, 8.0], mode: Mode::Cate, provenance: prov };
        assert_eq!(ate_estimate(&s).point, (2.0 + 4.0 + 8.0) / 3.0);
    }

    #[test]
    fn cte_matches_term_by_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cells: Vec<Observation> = (0..40)
            .map(|_| Observation {
                outcome: rng.random_range(-2.0..2.0),
                treatment: Treatment::Continuous(rng.random()),
                covariates: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                conditioning_value: 0.0,
            })
            .map(|mut o| {
                o.conditioning_value = o.treatment.value();
                o
            })
            .collect();
        let s = crate::data::TwoWaySample::new(5, 8, Mode::Cte, crate::data::Conditioning::Treatment, cells).unwrap();
        let fit = fit_cte_nuisance(&s.full_view(), &NuisanceConfig::default()).unwrap();
        let NuisanceFit::Cte { density, outcome, .. } = &fit else { unreachable!() };
        for o in s.cells() {
            let x = o.treatment.value();
            let f = density.density(x, &o.covariates).value;
            let omega = (s.cells().iter().map(|c| {
                let a = density.weights(&c.covariates).unwrap();
                a.iter().zip(&density.xs).map(|(a, xt)| a * density.kernel.k_h(x - xt, density.bandwidth_x)).sum::<f64>()
            }).sum::<f64>() / 40.0).max(density.floor);
            let first = (o.outcome - outcome.predict(x, &o.covariates)) / f * omega;
            let second = s.cells().iter().map(|c| outcome.predict(x, &c.covariates)).sum::<f64>() / 40.0;
            let got = cte_signal(o, &fit);
            assert!((got - (first + second)).abs() < 1e-10 * (1.0 + got.abs()), "{got} vs {}", first + second);
        }
    }

    proptest! {
        #[test]
        fn ate_point_permutation_invariant(vals in prop::collection::vec(-10.0f64..10.0, 12), seed: u64) {
            let mut perm = vals.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let a = ate_estimate(&SignalMatrix::full_sample(3, 4, vals, Mode::Cate)).point;
            let b = ate_estimate(&SignalMatrix::full_sample(3, 4, perm, Mode::Cate)).point;
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}
