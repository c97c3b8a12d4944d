//! End-to-end estimation: basis and grid construction, fitting, and bands.

use serde::{Deserialize, Serialize};

use crate::bootstrap::{build_bands, BandConfig, BandResult};
use crate::data::{quantile_grid, GridSpec, Mode, TwoWaySample};
use crate::error::{Error, Result};
use crate::estimator::{fit_cross_fitted, fit_full_sample, PluginSignals, SieveFit};
use crate::nuisance::NuisanceConfig;
use crate::rng::{derive_seed, tag};
use crate::sieve::{BasisFamily, BasisSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    #[serde(alias = "full_sample")]
    Full,
    #[serde(alias = "cross_fit")]
    Crossfit,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Full => "full_sample",
            EstimatorKind::Crossfit => "cross_fit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnotRule {
    Quantile,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisConfig {
    pub family: BasisFamily,
    pub p: usize,
    pub degree: usize,
    pub knot_rule: KnotRule,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self { family: BasisFamily::Polynomial, p: 3, degree: 3, knot_rule: KnotRule::Quantile }
    }
}

impl BasisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::config("basis.p", "must be at least 1"));
        }
        if self.family == BasisFamily::BSpline && self.p < self.degree + 1 {
            return Err(Error::config("basis.p", format!("B-spline of degree {} needs p >= {}", self.degree, self.degree + 1)));
        }
        Ok(())
    }

    /// Builds the basis on the range of `values`.
    pub fn build(&self, values: &[f64]) -> Result<BasisSpec> {
        self.validate()?;
        if values.is_empty() {
            return Err(Error::EmptyInput("conditioning values"));
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (a, b) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        match (self.family, self.knot_rule) {
            (BasisFamily::Polynomial, _) => BasisSpec::polynomial(self.p, a, b),
            (BasisFamily::BSpline, KnotRule::Quantile) if hi > lo => BasisSpec::bspline_quantile_knots(values, self.p, self.degree),
            (BasisFamily::BSpline, _) => {
                let interior = self.p - self.degree - 1;
                let knots = (1..=interior).map(|s| a + (b - a) * s as f64 / (interior + 1) as f64).collect();
                BasisSpec::bspline(a, b, knots, self.degree)
            }
        }
    }
}

/// Evaluation grid: `count` points between the `lo` and `hi` empirical
/// quantiles of the conditioning variable. Unset bounds take the mode default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub count: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { lo: None, hi: None, count: 100 }
    }
}

impl GridConfig {
    pub fn bounds(&self, mode: Mode) -> (f64, f64) {
        let (lo, hi) = match mode {
            Mode::Cate => (0.01, 0.99),
            Mode::Cte => (0.20, 0.80),
        };
        (self.lo.unwrap_or(lo), self.hi.unwrap_or(hi))
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::config("grid.count", "must be at least 1"));
        }
        for (field, v) in [("grid.lo", self.lo), ("grid.hi", self.hi)] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::config(field, format!("quantile level {v} outside [0, 1]")));
                }
            }
        }
        if let (Some(lo), Some(hi)) = (self.lo, self.hi) {
            if lo > hi {
                return Err(Error::config("grid.lo", "must not exceed grid.hi"));
            }
        }
        Ok(())
    }

    pub fn build(&self, sample: &TwoWaySample) -> Result<GridSpec> {
        self.validate()?;
        let (lo, hi) = self.bounds(sample.mode());
        if lo > hi {
            return Err(Error::config("grid.lo", "must not exceed grid.hi"));
        }
        quantile_grid(&sample.conditioning_values(), lo, hi, self.count)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    pub estimators: Vec<EstimatorKind>,
    pub k_folds: usize,
    pub basis: BasisConfig,
    pub nuisance: NuisanceConfig,
    pub bootstrap: BandConfig,
    pub grid: GridConfig,
    /// Ridge added to the sieve Gram matrix; zero means only the automatic fallback.
    pub sieve_ridge: f64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            estimators: vec![EstimatorKind::Full, EstimatorKind::Crossfit],
            k_folds: 2,
            basis: BasisConfig::default(),
            nuisance: NuisanceConfig::default(),
            bootstrap: BandConfig::default(),
            grid: GridConfig::default(),
            sieve_ridge: 0.0,
        }
    }
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.estimators.is_empty() {
            return Err(Error::config("estimators", "list at least one estimator"));
        }
        if self.estimators.contains(&EstimatorKind::Crossfit) && self.k_folds < 2 {
            return Err(Error::config("k_folds", "cross-fitting needs at least 2 folds"));
        }
        if !(self.sieve_ridge >= 0.0 && self.sieve_ridge.is_finite()) {
            return Err(Error::config("sieve_ridge", "must be finite and non-negative"));
        }
        self.basis.validate()?;
        self.nuisance.validate()?;
        self.bootstrap.validate()?;
        self.grid.validate()
    }
}

#[derive(Debug, Clone)]
pub struct EstimatorResult {
    pub estimator: EstimatorKind,
    pub fit: SieveFit,
    pub bands: Vec<BandResult>,
}

#[derive(Debug, Clone)]
pub struct EstimationOutput {
    pub basis: BasisSpec,
    pub grid: GridSpec,
    pub results: Vec<EstimatorResult>,
}

/// Fits every configured estimator and builds its bands. Folds and
/// multipliers are keyed by `seed`.
pub fn run_estimation(sample: &TwoWaySample, cfg: &EstimationConfig, seed: u64) -> Result<EstimationOutput> {
    cfg.validate()?;
    if cfg.estimators.contains(&EstimatorKind::Crossfit) && cfg.k_folds > sample.effective_size() {
        return Err(Error::InvalidFoldCount { k: cfg.k_folds, max: sample.effective_size() });
    }
    let basis = cfg.basis.build(&sample.conditioning_values())?;
    let grid = cfg.grid.build(sample)?;
    let source = PluginSignals { config: cfg.nuisance.clone() };
    let results = cfg
        .estimators
        .iter()
        .enumerate()
        .map(|(idx, &estimator)| {
            let fit = match estimator {
                EstimatorKind::Full => fit_full_sample(sample, &basis, &source, cfg.sieve_ridge)?,
                EstimatorKind::Crossfit => {
                    let fold_seed = derive_seed(seed, &[tag::REPLICATION_FOLDS]);
                    fit_cross_fitted(sample, &basis, &source, cfg.k_folds, fold_seed, cfg.sieve_ridge)?
                }
            };
            let band_seed = derive_seed(seed, &[tag::REPLICATION_BANDS, idx as u64]);
            let bands = build_bands(&fit, &grid, &cfg.bootstrap, band_seed)?;
            Ok(EstimatorResult { estimator, fit, bands })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EstimationOutput { basis, grid, results })
}
