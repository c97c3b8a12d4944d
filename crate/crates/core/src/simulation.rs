//! Two-way clustered data generating processes and replicated coverage studies.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix};
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::BandMethod;
use crate::data::{Conditioning, Mode, Observation, Treatment, TwoWaySample};
use crate::error::{Error, Result};
use crate::nuisance::logistic;
use crate::pipeline::{run_estimation, EstimationConfig, EstimatorKind};
use crate::rng::{self, tag};

/// Shapes used for the outcome surfaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    X,
    Logistic,
    Logistic3,
    Cos,
    Sin,
    SinCos,
}

impl Shape {
    pub const ALL: [Shape; 6] = [Shape::X, Shape::Logistic, Shape::Logistic3, Shape::Cos, Shape::Sin, Shape::SinCos];

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Shape::X => x,
            Shape::Logistic => logistic(x),
            Shape::Logistic3 => logistic(3.0 * x),
            Shape::Cos => x.cos(),
            Shape::Sin => x.sin(),
            Shape::SinCos => x.sin() + x.cos(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Shape::X => "x",
            Shape::Logistic => "logistic(x)",
            Shape::Logistic3 => "logistic(3x)",
            Shape::Cos => "cos(x)",
            Shape::Sin => "sin(x)",
            Shape::SinCos => "sin(x)+cos(x)",
        }
    }
}

/// The target function of a simulated design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "shape")]
pub enum TrueCurve {
    /// `mu1(x) - x`.
    CateDifference(Shape),
    /// `g(x)`.
    Response(Shape),
}

impl TrueCurve {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            TrueCurve::CateDifference(s) => s.eval(x) - x,
            TrueCurve::Response(s) => s.eval(x),
        }
    }

    pub fn shape(&self) -> Shape {
        match *self {
            TrueCurve::CateDifference(s) | TrueCurve::Response(s) => s,
        }
    }
}

/// How the `0.1` in the idiosyncratic noise components is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScale {
    Variance,
    Sd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfigCate {
    pub n_rows: usize,
    pub n_cols: usize,
    pub d: usize,
    pub rho: f64,
    pub weights_w: (f64, f64),
    pub weights_eps: (f64, f64),
    pub weights_v: (f64, f64),
    pub mu1: Shape,
    /// Defaults to `(0.7, 0.7^2, ..., 0.7^d)`.
    pub zeta: Option<Vec<f64>>,
    pub component_noise: f64,
    pub noise_scale: NoiseScale,
    /// Standardize covariates before forming the selection index.
    pub standardize_index: bool,
}

impl Default for DgpConfigCate {
    fn default() -> Self {
        Self {
            n_rows: 25,
            n_cols: 25,
            d: 4,
            rho: 0.25,
            weights_w: (0.4, 0.4),
            weights_eps: (0.4, 0.4),
            weights_v: (0.4, 0.4),
            mu1: Shape::X,
            zeta: None,
            component_noise: 0.1,
            noise_scale: NoiseScale::Variance,
            standardize_index: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfigCte {
    pub n_rows: usize,
    pub n_cols: usize,
    pub d: usize,
    pub rho: f64,
    pub weights_w: (f64, f64),
    pub weights_eps: (f64, f64),
    pub g: Shape,
    /// Defaults to `(0.5, 0.5^2, ..., 0.5^d)`.
    pub gamma: Option<Vec<f64>>,
    /// Defaults to `(0.7, 0.7^2, ..., 0.7^d)`.
    pub zeta: Option<Vec<f64>>,
    pub component_noise: f64,
    pub noise_scale: NoiseScale,
}

impl Default for DgpConfigCte {
    fn default() -> Self {
        Self {
            n_rows: 25,
            n_cols: 25,
            d: 4,
            rho: 0.25,
            weights_w: (0.4, 0.4),
            weights_eps: (0.4, 0.4),
            g: Shape::X,
            gamma: None,
            zeta: None,
            component_noise: 0.1,
            noise_scale: NoiseScale::Variance,
        }
    }
}

fn powers(base: f64, d: usize) -> Vec<f64> {
    (1..=d as i32).map(|k| base.powi(k)).collect()
}

fn check_weights(field: &str, (r1, r2): (f64, f64)) -> Result<()> {
    if !(r1 >= 0.0 && r2 >= 0.0 && r1 + r2 <= 1.0) {
        return Err(Error::config(field, format!("need r1, r2 >= 0 and r1 + r2 <= 1, got ({r1}, {r2})")));
    }
    Ok(())
}

fn check_dims(n: usize, m: usize, d: usize) -> Result<()> {
    if n.min(m) < 2 {
        return Err(Error::config("dgp.n_rows", "need at least 2 rows and 2 columns"));
    }
    if d == 0 {
        return Err(Error::config("dgp.d", "need at least one covariate"));
    }
    Ok(())
}

fn check_vec(field: &str, v: &Option<Vec<f64>>, d: usize) -> Result<()> {
    if let Some(v) = v {
        if v.len() != d {
            return Err(Error::config(field, format!("length {} does not match d = {d}", v.len())));
        }
    }
    Ok(())
}

fn noise_variance(value: f64, scale: NoiseScale) -> Result<f64> {
    if !(value > 0.0 && value.is_finite()) {
        return Err(Error::config("dgp.component_noise", "must be positive"));
    }
    Ok(match scale {
        NoiseScale::Variance => value,
        NoiseScale::Sd => value * value,
    })
}

impl DgpConfigCate {
    pub fn validate(&self) -> Result<()> {
        check_dims(self.n_rows, self.n_cols, self.d)?;
        check_weights("dgp.weights_w", self.weights_w)?;
        check_weights("dgp.weights_eps", self.weights_eps)?;
        check_weights("dgp.weights_v", self.weights_v)?;
        check_vec("dgp.zeta", &self.zeta, self.d)?;
        noise_variance(self.component_noise, self.noise_scale)?;
        if self.rho.abs() >= 1.0 || !self.rho.is_finite() {
            return Err(Error::InvalidCorrelation { rho: self.rho });
        }
        Ok(())
    }

    pub fn zeta(&self) -> Vec<f64> {
        self.zeta.clone().unwrap_or_else(|| powers(0.7, self.d))
    }
}

impl DgpConfigCte {
    pub fn validate(&self) -> Result<()> {
        check_dims(self.n_rows, self.n_cols, self.d)?;
        check_weights("dgp.weights_w", self.weights_w)?;
        check_weights("dgp.weights_eps", self.weights_eps)?;
        check_vec("dgp.zeta", &self.zeta, self.d)?;
        check_vec("dgp.gamma", &self.gamma, self.d)?;
        noise_variance(self.component_noise, self.noise_scale)?;
        if self.rho.abs() >= 1.0 || !self.rho.is_finite() {
            return Err(Error::InvalidCorrelation { rho: self.rho });
        }
        Ok(())
    }

    pub fn zeta(&self) -> Vec<f64> {
        self.zeta.clone().unwrap_or_else(|| powers(0.7, self.d))
    }

    pub fn gamma(&self) -> Vec<f64> {
        self.gamma.clone().unwrap_or_else(|| powers(0.5, self.d))
    }
}

/// Either design, tagged by mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum DgpConfig {
    Cate(DgpConfigCate),
    Cte(DgpConfigCte),
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig::Cate(DgpConfigCate::default())
    }
}

impl DgpConfig {
    pub fn mode(&self) -> Mode {
        match self {
            DgpConfig::Cate(_) => Mode::Cate,
            DgpConfig::Cte(_) => Mode::Cte,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DgpConfig::Cate(c) => c.validate(),
            DgpConfig::Cte(c) => c.validate(),
        }
    }

    pub fn shape(&self) -> Shape {
        match self {
            DgpConfig::Cate(c) => c.mu1,
            DgpConfig::Cte(c) => c.g,
        }
    }

    pub fn with_shape(&self, shape: Shape) -> Self {
        match self {
            DgpConfig::Cate(c) => DgpConfig::Cate(DgpConfigCate { mu1: shape, ..c.clone() }),
            DgpConfig::Cte(c) => DgpConfig::Cte(DgpConfigCte { g: shape, ..c.clone() }),
        }
    }

    pub fn simulate(&self, seed: u64) -> Result<(TwoWaySample, TrueCurve)> {
        match self {
            DgpConfig::Cate(c) => simulate_cate(c, seed),
            DgpConfig::Cte(c) => simulate_cte(c, seed),
        }
    }
}

/// `(1 - r1 - r2) a_ij + r1 a_i + r2 a_j` with each component drawn from
/// `N(0, variance * R)`, `R_st = rho^|s - t|`. Returned row-major, `dim`
/// values per cell. Each row and column has its own keyed stream.
#[allow(clippy::too_many_arguments)]
pub fn gen_two_way_components(
    n_rows: usize,
    n_cols: usize,
    dim: usize,
    rho: f64,
    weights: (f64, f64),
    variance: f64,
    seed: u64,
    stream: u64,
) -> Result<Vec<f64>> {
    if rho.abs() >= 1.0 || !rho.is_finite() {
        return Err(Error::InvalidCorrelation { rho });
    }
    check_weights("weights", weights)?;
    let cov = DMatrix::from_fn(dim, dim, |s, t| variance * rho.powi((s as i32 - t as i32).abs()));
    let l = Cholesky::new(cov).ok_or(Error::InvalidCorrelation { rho })?.unpack();
    let draw = |path: &[u64], count: usize| -> Vec<f64> {
        let mut z = vec![0.0; count * dim];
        rng::fill_standard_normal(seed, path, &mut z);
        let mut out = vec![0.0; count * dim];
        for c in 0..count {
            for s in 0..dim {
                out[c * dim + s] = (0..=s).map(|t| l[(s, t)] * z[c * dim + t]).sum();
            }
        }
        out
    };
    let rows: Vec<Vec<f64>> = (0..n_rows).map(|i| draw(&[stream, tag::COMPONENT_ROW, i as u64], 1)).collect();
    let cols: Vec<Vec<f64>> = (0..n_cols).map(|j| draw(&[stream, tag::COMPONENT_COL, j as u64], 1)).collect();
    let (r1, r2) = weights;
    let r0 = 1.0 - r1 - r2;
    let mut out = Vec::with_capacity(n_rows * n_cols * dim);
    for (i, row) in rows.iter().enumerate() {
        let cells = draw(&[stream, tag::COMPONENT_CELL, i as u64], n_cols);
        for (j, col) in cols.iter().enumerate() {
            for s in 0..dim {
                out.push(r0 * cells[j * dim + s] + r1 * row[s] + r2 * col[s]);
            }
        }
    }
    Ok(out)
}

fn standardized(w: &[f64], d: usize) -> Vec<f64> {
    let n = w.len() / d;
    let mut out = w.to_vec();
    for s in 0..d {
        let mean = (0..n).map(|k| w[k * d + s]).sum::<f64>() / n as f64;
        let sd = ((0..n).map(|k| (w[k * d + s] - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
        for k in 0..n {
            out[k * d + s] = if sd > 0.0 { (w[k * d + s] - mean) / sd } else { 0.0 };
        }
    }
    out
}

/// Binary-treatment design: `D = 1{logistic(W zeta) >= v}`,
/// `Y = D mu1(x) + (1 - D) x + eps` with `x` the first covariate.
pub fn simulate_cate(cfg: &DgpConfigCate, seed: u64) -> Result<(TwoWaySample, TrueCurve)> {
    cfg.validate()?;
    let (n, m, d) = (cfg.n_rows, cfg.n_cols, cfg.d);
    let nv = noise_variance(cfg.component_noise, cfg.noise_scale)?;
    let w = gen_two_way_components(n, m, d, cfg.rho, cfg.weights_w, 1.0, seed, tag::DGP_COVARIATES)?;
    let eps = gen_two_way_components(n, m, 1, 0.0, cfg.weights_eps, nv, seed, tag::DGP_NOISE)?;
    let v = gen_two_way_components(n, m, 1, 0.0, cfg.weights_v, nv, seed, tag::DGP_SELECTION)?;
    let zeta = cfg.zeta();
    let index_w = if cfg.standardize_index { standardized(&w, d) } else { w.clone() };
    let cells = (0..n * m)
        .map(|k| {
            let wk = &w[k * d..(k + 1) * d];
            let idx: f64 = index_w[k * d..(k + 1) * d].iter().zip(&zeta).map(|(a, b)| a * b).sum();
            let treated = logistic(idx) >= v[k];
            let x = wk[0];
            let y = if treated { cfg.mu1.eval(x) } else { x } + eps[k];
            Observation { outcome: y, treatment: Treatment::Binary(treated), covariates: wk.to_vec(), conditioning_value: x }
        })
        .collect();
    let sample = TwoWaySample::new(n, m, Mode::Cate, Conditioning::Covariate(0), cells)?;
    Ok((sample, TrueCurve::CateDifference(cfg.mu1)))
}

pub const BETA_SHAPE_CLAMP: f64 = 1e-6;
const X_CLAMP: f64 = 1e-12;

/// Continuous-treatment design: covariates centred at their sample mean,
/// `X | W ~ Beta(L, 1 - L)` with `L = logistic(W zeta)`, `Y = g(X) + W gamma + eps`.
pub fn simulate_cte(cfg: &DgpConfigCte, seed: u64) -> Result<(TwoWaySample, TrueCurve)> {
    cfg.validate()?;
    let (n, m, d) = (cfg.n_rows, cfg.n_cols, cfg.d);
    let nv = noise_variance(cfg.component_noise, cfg.noise_scale)?;
    let mut w = gen_two_way_components(n, m, d, cfg.rho, cfg.weights_w, 1.0, seed, tag::DGP_COVARIATES)?;
    for s in 0..d {
        let mean = (0..n * m).map(|k| w[k * d + s]).sum::<f64>() / (n * m) as f64;
        (0..n * m).for_each(|k| w[k * d + s] -= mean);
    }
    let eps = gen_two_way_components(n, m, 1, 0.0, cfg.weights_eps, nv, seed, tag::DGP_NOISE)?;
    let (zeta, gamma) = (cfg.zeta(), cfg.gamma());
    let mut clamped = 0usize;
    let mut cells = Vec::with_capacity(n * m);
    for i in 0..n {
        let mut rng = rng::stream(seed, &[tag::DGP_TREATMENT, i as u64]);
        for j in 0..m {
            let k = i * m + j;
            let wk = &w[k * d..(k + 1) * d];
            let raw = logistic(wk.iter().zip(&zeta).map(|(a, b)| a * b).sum());
            let lam = raw.clamp(BETA_SHAPE_CLAMP, 1.0 - BETA_SHAPE_CLAMP);
            clamped += usize::from(lam != raw);
            let beta = Beta::new(lam, 1.0 - lam).map_err(|e| Error::NumericalInstability(format!("beta shape: {e}")))?;
            let x = beta.sample(&mut rng).clamp(X_CLAMP, 1.0 - X_CLAMP);
            let y = cfg.g.eval(x) + wk.iter().zip(&gamma).map(|(a, b)| a * b).sum::<f64>() + eps[k];
            cells.push(Observation { outcome: y, treatment: Treatment::Continuous(x), covariates: wk.to_vec(), conditioning_value: x });
        }
    }
    if clamped > 0 {
        log::debug!("clamped {clamped} beta shape parameters into [{BETA_SHAPE_CLAMP}, {}]", 1.0 - BETA_SHAPE_CLAMP);
    }
    let sample = TwoWaySample::new(n, m, Mode::Cte, Conditioning::Treatment, cells)?;
    Ok((sample, TrueCurve::Response(cfg.g)))
}

/// Outcome of one replication: for each (estimator, method), whether the band covered.
pub type ReplicationOutcome = Vec<(EstimatorKind, BandMethod, bool)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCell {
    pub estimator: EstimatorKind,
    pub method: BandMethod,
    pub covered: usize,
    pub rate: f64,
    pub mc_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationFailure {
    pub replication: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub seconds: f64,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub shape: Option<Shape>,
    pub replications: usize,
    /// Replications that contribute to the rates.
    pub completed: usize,
    pub seed: u64,
    pub cells: Vec<CoverageCell>,
    pub failures: Vec<ReplicationFailure>,
    #[serde(skip)]
    pub runtime: Option<RuntimeStats>,
}

impl CoverageReport {
    pub fn rate(&self, estimator: EstimatorKind, method: BandMethod) -> Option<&CoverageCell> {
        self.cells.iter().find(|c| c.estimator == estimator && c.method == method)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Tab-separated table: one row per report (shape), one column per
/// (estimator, method) pair.
pub fn coverage_tsv(reports: &[CoverageReport]) -> String {
    let mut keys: Vec<(EstimatorKind, BandMethod)> = Vec::new();
    for r in reports {
        for c in &r.cells {
            if !keys.contains(&(c.estimator, c.method)) {
                keys.push((c.estimator, c.method));
            }
        }
    }
    let mut out = String::from("shape");
    for (e, m) in &keys {
        out.push_str(&format!("\t{}/{}", e.name(), m.name()));
    }
    out.push('\n');
    for r in reports {
        out.push_str(r.shape.map(Shape::label).unwrap_or("-"));
        for (e, m) in &keys {
            match r.rate(*e, *m) {
                Some(c) => out.push_str(&format!("\t{:.3}", c.rate)),
                None => out.push_str("\t-"),
            }
        }
        out.push('\n');
    }
    out
}

/// Runs `replicate(r, seed_r)` for `r = 0..replications` in parallel and
/// aggregates the coverage indicators. `seed_r` is keyed by `(seed, r)`.
pub fn run_coverage_with<F>(replications: usize, seed: u64, skip_failures: bool, replicate: F) -> Result<CoverageReport>
where
    F: Fn(usize, u64) -> Result<ReplicationOutcome> + Sync,
{
    if replications == 0 {
        return Err(Error::config("replications", "need at least one replication"));
    }
    let start = Instant::now();
    let results: Vec<Result<ReplicationOutcome>> = (0..replications)
        .into_par_iter()
        .map(|r| replicate(r, rng::derive_seed(seed, &[tag::REPLICATION, r as u64])))
        .collect();
    let mut tally: BTreeMap<(u8, u8), (EstimatorKind, BandMethod, usize)> = BTreeMap::new();
    let mut failures = Vec::new();
    let mut completed = 0;
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(outcome) => {
                completed += 1;
                for (e, m, hit) in outcome {
                    let key = (e as u8, m as u8);
                    tally.entry(key).or_insert((e, m, 0)).2 += usize::from(hit);
                }
            }
            Err(e) if skip_failures => failures.push(ReplicationFailure { replication: r, error: e.to_string() }),
            Err(e) => return Err(Error::Replication { replication: r, source: Box::new(e) }),
        }
    }
    let denom = completed.max(1) as f64;
    let cells = tally
        .into_values()
        .map(|(estimator, method, covered)| {
            let rate = covered as f64 / denom;
            CoverageCell { estimator, method, covered, rate, mc_se: (rate * (1.0 - rate) / denom).sqrt() }
        })
        .collect();
    Ok(CoverageReport {
        shape: None,
        replications,
        completed,
        seed,
        cells,
        failures,
        runtime: Some(RuntimeStats { seconds: start.elapsed().as_secs_f64(), threads: rayon::current_num_threads() }),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageConfig {
    pub dgp: DgpConfig,
    pub estimation: EstimationConfig,
    pub replications: usize,
    pub skip_failures: bool,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self { dgp: DgpConfig::default(), estimation: EstimationConfig::default(), replications: 500, skip_failures: false }
    }
}

/// Simulate, fit and band `replications` times; record uniform coverage of the true curve.
pub fn run_coverage(cfg: &CoverageConfig, seed: u64) -> Result<CoverageReport> {
    cfg.dgp.validate()?;
    cfg.estimation.validate()?;
    let mut report = run_coverage_with(cfg.replications, seed, cfg.skip_failures, |_, rseed| {
        let (sample, truth) = cfg.dgp.simulate(rseed)?;
        let out = run_estimation(&sample, &cfg.estimation, rseed)?;
        Ok(out
            .results
            .iter()
            .flat_map(|r| r.bands.iter().map(move |b| (r.estimator, b.method, b.covers(|x| truth.eval(x)))))
            .collect())
    })?;
    report.shape = Some(cfg.dgp.shape());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    fn cov(a: &[f64], b: &[f64]) -> f64 {
        let (ma, mb) = (mean(a), mean(b));
        a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() as f64 - 1.0)
    }

    #[test]
    fn zero_weights_give_idiosyncratic_draws() {
        let a = gen_two_way_components(3, 4, 2, 0.25, (0.0, 0.0), 1.0, 9, 1).unwrap();
        let b = gen_two_way_components(3, 4, 2, 0.25, (0.0, 0.0), 1.0, 9, 1).unwrap();
        assert_eq!(a, b);
        // cell (1, 2) only depends on its own row stream
        let mut z = vec![0.0; 8];
        rng::fill_standard_normal(9, &[1, tag::COMPONENT_CELL, 1], &mut z);
        assert_eq!(a[(4 + 2) * 2], z[4]);
    }

    #[test]
    fn invalid_correlation() {
        assert!(matches!(gen_two_way_components(2, 2, 2, 1.0, (0.4, 0.4), 1.0, 0, 0), Err(Error::InvalidCorrelation { .. })));
        assert!(matches!(gen_two_way_components(2, 2, 2, -1.5, (0.4, 0.4), 1.0, 0, 0), Err(Error::InvalidCorrelation { .. })));
        assert!(gen_two_way_components(2, 2, 2, 0.5, (0.7, 0.4), 1.0, 0, 0).is_err());
    }

    #[test]
    fn identity_covariance_when_rho_zero() {
        let v = gen_two_way_components(100, 100, 2, 0.0, (0.0, 0.0), 1.0, 3, 2).unwrap();
        let a: Vec<f64> = v.iter().step_by(2).copied().collect();
        let b: Vec<f64> = v.iter().skip(1).step_by(2).copied().collect();
        let c = cov(&a, &b);
        assert!(c.abs() < 4.0 / 100.0, "{c}");
    }

    #[test]
    fn within_row_correlation_matches_decomposition() {
        // Cov(W_11, W_12) = r1^2, Var(W) = r0^2 + r1^2 + r2^2 for unit-variance components
        let (r1, r2) = (0.4, 0.4);
        let r0: f64 = 0.2;
        let var = r0 * r0 + r1 * r1 + r2 * r2;
        let target = r1 * r1 / var;
        let reps = 4000;
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for s in 0..reps {
            let v = gen_two_way_components(2, 2, 4, 0.25, (r1, r2), 1.0, s, 7).unwrap();
            a.push(v[0]);
            b.push(v[4]);
        }
        let corr = cov(&a, &b) / (cov(&a, &a) * cov(&b, &b)).sqrt();
        let se = (1.0 - target * target) / (reps as f64).sqrt();
        assert!((corr - target).abs() < 4.0 * se, "{corr} vs {target}");
    }

    #[test]
    fn cate_examples() {
        let (s, tau) = simulate_cate(&DgpConfigCate::default(), 1).unwrap();
        assert_eq!((s.n_rows(), s.n_cols(), s.covariate_dim()), (25, 25, 4));
        assert_eq!(tau.eval(0.7), 0.0);
        let tau = TrueCurve::CateDifference(Shape::SinCos);
        assert_eq!(tau.eval(0.3), 0.3f64.sin() + 0.3f64.cos() - 0.3);
        assert!(s.cells().iter().all(|o| o.conditioning_value == o.covariates[0]));
    }

    #[test]
    fn treated_fraction_matches_direct_simulation() {
        // P(D = 1 | W) = Phi(logistic(W zeta) / sd_v) with Var(v) = 0.1 (0.04 + 0.16 + 0.16)
        let cfg = DgpConfigCate { n_rows: 100, n_cols: 100, standardize_index: true, ..Default::default() };
        let (s, _) = simulate_cate(&cfg, 4).unwrap();
        let w: Vec<f64> = s.cells().iter().flat_map(|o| o.covariates.clone()).collect();
        let z = standardized(&w, 4);
        let sd_v = (0.1f64 * 0.36).sqrt();
        let zeta = cfg.zeta();
        let normal = statrs::distribution::Normal::standard();
        use statrs::distribution::ContinuousCDF;
        let oracle = mean(
            &z.chunks(4).map(|c| normal.cdf(logistic(c.iter().zip(&zeta).map(|(a, b)| a * b).sum()) / sd_v)).collect::<Vec<_>>(),
        );
        let got = mean(&s.cells().iter().map(|o| o.treatment.value()).collect::<Vec<_>>());
        assert!((got - oracle).abs() < 0.02, "{got} vs {oracle}");
    }

    #[test]
    fn cte_examples() {
        let cfg = DgpConfigCte { gamma: Some(vec![0.0; 4]), ..Default::default() };
        let (s, tau) = simulate_cte(&cfg, 5).unwrap();
        assert_eq!(tau.eval(0.42), 0.42);
        assert!(s.cells().iter().all(|o| {
            let x = o.treatment.value();
            x > 0.0 && x < 1.0
        }));
        for c in 0..4 {
            assert!(mean(&s.cells().iter().map(|o| o.covariates[c]).collect::<Vec<_>>()).abs() < 1e-12);
        }
    }

    #[test]
    fn beta_mean_matches_shape() {
        let mut r = rng::stream(1, &[0]);
        let b = Beta::new(0.3, 0.7).unwrap();
        let v: Vec<f64> = (0..40_000).map(|_| b.sample(&mut r)).collect();
        // Var = ab / ((a + b)^2 (a + b + 1)) = 0.105
        let se = (0.105f64 / 40_000.0).sqrt();
        assert!((mean(&v) - 0.3).abs() < 4.0 * se);
    }

    #[test]
    fn injected_band_oracles() {
        let all = |_: usize, _: u64| Ok(vec![(EstimatorKind::Crossfit, BandMethod::MultiwayBoot, true)]);
        let none = |_: usize, _: u64| Ok(vec![(EstimatorKind::Crossfit, BandMethod::MultiwayBoot, false)]);
        assert_eq!(run_coverage_with(20, 1, false, all).unwrap().cells[0].rate, 1.0);
        assert_eq!(run_coverage_with(20, 1, false, none).unwrap().cells[0].rate, 0.0);
    }

    #[test]
    fn failures_abort_or_skip() {
        let f = |r: usize, _: u64| {
            if r == 3 {
                Err(Error::SingularGram { ridge: 0.0 })
            } else {
                Ok(vec![(EstimatorKind::Full, BandMethod::IidBoot, r % 2 == 0)])
            }
        };
        assert!(matches!(run_coverage_with(6, 0, false, f), Err(Error::Replication { replication: 3, .. })));
        let rep = run_coverage_with(6, 0, true, f).unwrap();
        assert_eq!((rep.completed, rep.failures.len()), (5, 1));
        assert_eq!(rep.cells[0].covered, 3);
        assert!((rep.cells[0].rate - 0.6).abs() < 1e-15);
    }

    #[test]
    fn dissociated_cells_are_uncorrelated() {
        let reps = 3000;
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for s in 0..reps {
            let v = gen_two_way_components(2, 2, 1, 0.0, (0.4, 0.4), 1.0, s, 3).unwrap();
            a.push(v[0]);
            b.push(v[3]);
        }
        let corr = cov(&a, &b) / (cov(&a, &a) * cov(&b, &b)).sqrt();
        assert!(corr.abs() < 4.0 / (reps as f64).sqrt(), "{corr}");
    }
}
