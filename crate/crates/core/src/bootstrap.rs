//! Multiplier score bootstraps and confidence band assembly.
//!
//! A [`ScoreProcess`] describes a Gaussian multiplier score `S = sum_g c_g L_g' w_g`
//! where each group `g` has a loading matrix `L_g` (one row per unit) and
//! independent standard-normal multipliers `w_g`. The multiway process uses
//! row and column Hajek aggregates as units, the iid process uses cells.
//! Conditional on the data, `S` is exactly `N(0, Sigma)`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::GridSpec;
use crate::error::{Error, Result};
use crate::estimator::{blockwise_covariance, cluster_covariance, evaluate_tau, iid_covariance, sigma_tau_with, ClusterCovariance, Flavor, SieveFit};
use crate::rng::{self, tag};
use crate::sieve::{evaluate_basis, BasisSpec, SpdFactor};

/// Row averages `g_i0` (N x p) and column averages `g_0j` (M x p) of `p_ij u_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct HajekScores {
    pub row_scores: DMatrix<f64>,
    pub col_scores: DMatrix<f64>,
}

pub fn hajek_scores(fit: &SieveFit) -> HajekScores {
    let (n, m, p) = (fit.n_rows, fit.n_cols, fit.p());
    let mut row_scores = DMatrix::zeros(n, p);
    let mut col_scores = DMatrix::zeros(m, p);
    for i in 0..n {
        for j in 0..m {
            let k = i * m + j;
            let u = fit.residuals[k];
            for c in 0..p {
                let s = fit.design[(k, c)] * u;
                row_scores[(i, c)] += s;
                col_scores[(j, c)] += s;
            }
        }
    }
    row_scores /= m as f64;
    col_scores /= n as f64;
    HajekScores { row_scores, col_scores }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandMethod {
    PointwiseGaussian,
    IidBoot,
    MultiwayBoot,
}

impl BandMethod {
    pub const ALL: [BandMethod; 3] = [BandMethod::PointwiseGaussian, BandMethod::IidBoot, BandMethod::MultiwayBoot];

    pub fn name(self) -> &'static str {
        match self {
            BandMethod::PointwiseGaussian => "pointwise",
            BandMethod::IidBoot => "iid_boot",
            BandMethod::MultiwayBoot => "multiway_boot",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// How the averaged cross-fit estimator's variance is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// Average block Gram matrices and block covariances; block-level
    /// multipliers; scaled by the smallest block dimension.
    Blockwise,
    /// Treat the pooled cross-fit residuals as a full-sample fit.
    Pooled,
}

/// Covariance behind the pointwise Gaussian intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointwiseVariance {
    Iid,
    Multiway,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessKind {
    Multiway,
    Iid,
}

#[derive(Debug, Clone)]
pub struct MultiplierGroup {
    pub coefficient: f64,
    pub loadings: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct ScoreProcess {
    pub kind: ProcessKind,
    /// Factor of the Gram matrix whose inverse maps scores to coefficients.
    pub bread: SpdFactor,
    pub basis: BasisSpec,
    pub sigma: DMatrix<f64>,
    /// Effective sample size; band radii are `cv * sigma_tau / sqrt(scale)`.
    pub scale: f64,
    pub groups: Vec<MultiplierGroup>,
    pub variance_mode: Option<VarianceMode>,
}

fn cell_scores(fit: &SieveFit) -> DMatrix<f64> {
    DMatrix::from_fn(fit.design.nrows(), fit.p(), |r, c| fit.design[(r, c)] * fit.residuals[r])
}

fn blockwise(fit: &SieveFit, mode: VarianceMode) -> bool {
    fit.flavor == Flavor::AveragedCrossFit && mode == VarianceMode::Blockwise && !fit.blocks.is_empty()
}

impl ScoreProcess {
    /// Multiway cluster-robust process with row and column multipliers.
    pub fn multiway(fit: &SieveFit, mode: VarianceMode) -> Result<Self> {
        if blockwise(fit, mode) {
            let m = fit.blocks.iter().map(|b| b.rows.len().min(b.cols.len())).min().unwrap_or(1);
            let k = (fit.blocks.len() as f64).sqrt();
            let groups = fit
                .blocks
                .iter()
                .flat_map(|b| {
                    let h = hajek_scores(&b.fit);
                    let (ni, nj) = (b.rows.len() as f64, b.cols.len() as f64);
                    [
                        MultiplierGroup { coefficient: (m as f64).sqrt() / (ni * k), loadings: h.row_scores },
                        MultiplierGroup { coefficient: (m as f64).sqrt() / (nj * k), loadings: h.col_scores },
                    ]
                })
                .collect();
            let (_, bread) = fit.block_average_gram()?;
            let ClusterCovariance { sigma, .. } = blockwise_covariance(fit, m);
            return Ok(Self {
                kind: ProcessKind::Multiway,
                bread,
                basis: fit.basis.clone(),
                sigma,
                scale: m as f64,
                groups,
                variance_mode: Some(mode),
            });
        }
        let h = hajek_scores(fit);
        let e = fit.scale_n as f64;
        let groups = vec![
            MultiplierGroup { coefficient: e.sqrt() / fit.n_rows as f64, loadings: h.row_scores },
            MultiplierGroup { coefficient: e.sqrt() / fit.n_cols as f64, loadings: h.col_scores },
        ];
        Ok(Self {
            kind: ProcessKind::Multiway,
            bread: fit.factor.clone(),
            basis: fit.basis.clone(),
            sigma: cluster_covariance(fit).sigma,
            scale: e,
            groups,
            variance_mode: (fit.flavor == Flavor::AveragedCrossFit).then_some(mode),
        })
    }

    /// Cell-level multipliers paired with the heteroskedasticity-only covariance.
    pub fn iid(fit: &SieveFit, mode: VarianceMode) -> Result<Self> {
        if blockwise(fit, mode) {
            let c = fit.blocks.iter().map(|b| b.rows.len()).min().unwrap_or(1) * fit.blocks.iter().map(|b| b.cols.len()).min().unwrap_or(1);
            let k = (fit.blocks.len() as f64).sqrt();
            let p = fit.p();
            let mut sigma = DMatrix::zeros(p, p);
            let groups = fit
                .blocks
                .iter()
                .map(|b| {
                    sigma += iid_covariance(&b.fit);
                    MultiplierGroup { coefficient: 1.0 / (k * (b.fit.residuals.len() as f64).sqrt()), loadings: cell_scores(&b.fit) }
                })
                .collect();
            sigma /= fit.blocks.len() as f64;
            let (_, bread) = fit.block_average_gram()?;
            return Ok(Self { kind: ProcessKind::Iid, bread, basis: fit.basis.clone(), sigma, scale: c as f64, groups, variance_mode: Some(mode) });
        }
        let cells = fit.residuals.len() as f64;
        Ok(Self {
            kind: ProcessKind::Iid,
            bread: fit.factor.clone(),
            basis: fit.basis.clone(),
            sigma: iid_covariance(fit),
            scale: cells,
            groups: vec![MultiplierGroup { coefficient: 1.0 / cells.sqrt(), loadings: cell_scores(fit) }],
            variance_mode: (fit.flavor == Flavor::AveragedCrossFit).then_some(mode),
        })
    }

    pub fn sigma_tau(&self, x: f64) -> Result<f64> {
        sigma_tau_with(&self.bread, &self.basis, &self.sigma, x)
    }

    pub fn se(&self, x: f64) -> Result<f64> {
        Ok(self.sigma_tau(x)? / self.scale.sqrt())
    }

    fn kind_tag(&self) -> u64 {
        match self.kind {
            ProcessKind::Multiway => 1,
            ProcessKind::Iid => 2,
        }
    }

    /// The `b`-th multiplier score draw.
    pub fn draw(&self, seed: u64, b: u64) -> DVector<f64> {
        let p = self.sigma.nrows();
        let mut s = DVector::zeros(p);
        let mut w = Vec::new();
        for (g, group) in self.groups.iter().enumerate() {
            w.resize(group.loadings.nrows(), 0.0);
            rng::fill_standard_normal(seed, &[tag::BOOTSTRAP, self.kind_tag(), b, tag::MULTIPLIER_GROUP, g as u64], &mut w);
            let wv = DVector::from_column_slice(&w);
            s += group.loadings.tr_mul(&wv) * group.coefficient;
        }
        s
    }

    /// Rows `p(x_l)' Q^{-1} / sigma_tau(x_l)`.
    fn studentizer(&self, grid: &GridSpec) -> Result<DMatrix<f64>> {
        let p = self.sigma.nrows();
        let mut a = DMatrix::zeros(grid.len(), p);
        for (l, &x) in grid.points.iter().enumerate() {
            let sd = self.sigma_tau(x)?;
            if !(sd > 1e-12) {
                return Err(Error::DegenerateVariance { x });
            }
            let row = self.bread.solve(&DVector::from_vec(evaluate_basis(&self.basis, x))) / sd;
            a.set_row(l, &row.transpose());
        }
        Ok(a)
    }
}

pub const MIN_DRAWS: usize = 100;

/// `sup_l |t^b(x_l)|` for `b = 0..draws`. Draws are keyed by index, so the
/// result does not depend on the thread pool.
pub fn bootstrap_sup_stats(process: &ScoreProcess, grid: &GridSpec, draws: usize, seed: u64) -> Result<Vec<f64>> {
    if draws < MIN_DRAWS {
        return Err(Error::config("bootstrap.draws", format!("need at least {MIN_DRAWS} draws, got {draws}")));
    }
    let a = process.studentizer(grid)?;
    Ok((0..draws as u64).into_par_iter().map(|b| (&a * process.draw(seed, b)).amax()).collect())
}

/// The `ceil((1 - alpha) B)`-th smallest statistic.
pub fn critical_value(sup_stats: &[f64], alpha: f64) -> f64 {
    assert!(!sup_stats.is_empty(), "critical value of an empty draw set");
    let mut s = sup_stats.to_vec();
    s.sort_by(f64::total_cmp);
    let b = s.len();
    // the small offset keeps exact products such as 0.75 * 4 from rounding up
    let idx = (((1.0 - alpha) * b as f64 - 1e-9).ceil() as usize).clamp(1, b);
    s[idx - 1]
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandResult {
    pub method: BandMethod,
    pub grid: GridSpec,
    pub tau_hat: Vec<f64>,
    pub se: Vec<f64>,
    pub critical_value: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub alpha: f64,
    pub draws: usize,
    pub seed: u64,
    /// Standard errors are `sigma_tau / sqrt(scale_n)`.
    pub scale_n: f64,
    pub variance: ProcessKind,
    pub variance_mode: Option<VarianceMode>,
}

impl BandResult {
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        method: BandMethod,
        grid: GridSpec,
        tau_hat: Vec<f64>,
        se: Vec<f64>,
        critical_value: f64,
        alpha: f64,
        draws: usize,
        seed: u64,
        scale_n: f64,
        variance: ProcessKind,
        variance_mode: Option<VarianceMode>,
    ) -> Self {
        let lower = tau_hat.iter().zip(&se).map(|(t, s)| t - critical_value * s).collect();
        let upper = tau_hat.iter().zip(&se).map(|(t, s)| t + critical_value * s).collect();
        Self { method, grid, tau_hat, se, critical_value, lower, upper, alpha, draws, seed, scale_n, variance, variance_mode }
    }

    /// Whether `f(x_l)` lies in the band at every grid point.
    pub fn covers(&self, f: impl Fn(f64) -> f64) -> bool {
        self.grid.points.iter().zip(self.lower.iter().zip(&self.upper)).all(|(&x, (lo, hi))| {
            let v = f(x);
            *lo <= v && v <= *hi
        })
    }
}

fn tau_on_grid(fit: &SieveFit, grid: &GridSpec) -> Vec<f64> {
    grid.points.iter().map(|&x| evaluate_tau(fit, x)).collect()
}

fn se_on_grid(process: &ScoreProcess, grid: &GridSpec) -> Result<Vec<f64>> {
    grid.points.iter().map(|&x| process.se(x)).collect()
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config("bootstrap.alpha", format!("must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// Uniform band from the bootstrap critical value of `process`.
pub fn uniform_band(fit: &SieveFit, process: &ScoreProcess, grid: &GridSpec, alpha: f64, draws: usize, seed: u64) -> Result<BandResult> {
    check_alpha(alpha)?;
    let stats = bootstrap_sup_stats(process, grid, draws, seed)?;
    let cv = critical_value(&stats, alpha);
    let method = match process.kind {
        ProcessKind::Multiway => BandMethod::MultiwayBoot,
        ProcessKind::Iid => BandMethod::IidBoot,
    };
    Ok(BandResult::assemble(
        method,
        grid.clone(),
        tau_on_grid(fit, grid),
        se_on_grid(process, grid)?,
        cv,
        alpha,
        draws,
        seed,
        process.scale,
        process.kind,
        process.variance_mode,
    ))
}

/// Uniform band from cell-level multipliers.
pub fn iid_band(fit: &SieveFit, process_iid: &ScoreProcess, grid: &GridSpec, alpha: f64, draws: usize, seed: u64) -> Result<BandResult> {
    debug_assert_eq!(process_iid.kind, ProcessKind::Iid);
    uniform_band(fit, process_iid, grid, alpha, draws, seed)
}

/// Pointwise intervals with the Gaussian `z_{1 - alpha / 2}` multiplier.
pub fn pointwise_band(fit: &SieveFit, process: &ScoreProcess, grid: &GridSpec, alpha: f64) -> Result<BandResult> {
    check_alpha(alpha)?;
    Ok(BandResult::assemble(
        BandMethod::PointwiseGaussian,
        grid.clone(),
        tau_on_grid(fit, grid),
        se_on_grid(process, grid)?,
        normal_quantile(1.0 - alpha / 2.0),
        alpha,
        0,
        0,
        process.scale,
        process.kind,
        process.variance_mode,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BandConfig {
    pub alpha: f64,
    pub draws: usize,
    pub methods: Vec<BandMethod>,
    pub variance_mode: VarianceMode,
    pub pointwise_variance: PointwiseVariance,
}

impl Default for BandConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            draws: 500,
            methods: BandMethod::ALL.to_vec(),
            variance_mode: VarianceMode::Blockwise,
            pointwise_variance: PointwiseVariance::Iid,
        }
    }
}

impl BandConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if self.draws < MIN_DRAWS {
            return Err(Error::config("bootstrap.draws", format!("need at least {MIN_DRAWS}")));
        }
        if self.methods.is_empty() {
            return Err(Error::config("bootstrap.methods", "list at least one method"));
        }
        Ok(())
    }
}

/// Every configured band for one fit, in the configured method order.
pub fn build_bands(fit: &SieveFit, grid: &GridSpec, cfg: &BandConfig, seed: u64) -> Result<Vec<BandResult>> {
    let needs_iid = cfg.methods.contains(&BandMethod::IidBoot)
        || (cfg.methods.contains(&BandMethod::PointwiseGaussian) && cfg.pointwise_variance == PointwiseVariance::Iid);
    let needs_mw = cfg.methods.contains(&BandMethod::MultiwayBoot)
        || (cfg.methods.contains(&BandMethod::PointwiseGaussian) && cfg.pointwise_variance == PointwiseVariance::Multiway);
    let mw = needs_mw.then(|| ScoreProcess::multiway(fit, cfg.variance_mode)).transpose()?;
    let iid = needs_iid.then(|| ScoreProcess::iid(fit, cfg.variance_mode)).transpose()?;
    cfg.methods
        .iter()
        .map(|m| match m {
            BandMethod::MultiwayBoot => uniform_band(fit, mw.as_ref().unwrap(), grid, cfg.alpha, cfg.draws, seed),
            BandMethod::IidBoot => iid_band(fit, iid.as_ref().unwrap(), grid, cfg.alpha, cfg.draws, seed),
            BandMethod::PointwiseGaussian => {
                let proc = match cfg.pointwise_variance {
                    PointwiseVariance::Iid => iid.as_ref().unwrap(),
                    PointwiseVariance::Multiway => mw.as_ref().unwrap(),
                };
                pointwise_band(fit, proc, grid, cfg.alpha)
            }
        })
        .collect()
}

/// Writes `estimator,method,x,tau_hat,se,lower,upper` rows for each labelled band.
pub fn write_bands_csv<W: Write>(bands: &[(&str, &BandResult)], mut out: W, comment: Option<&str>) -> Result<()> {
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(out, "# {line}")?;
        }
    }
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["estimator", "method", "x", "tau_hat", "se", "lower", "upper"])?;
    for (label, b) in bands {
        for l in 0..b.grid.len() {
            wtr.write_record([
                label.to_string(),
                b.method.name().to_owned(),
                b.grid.points[l].to_string(),
                b.tau_hat[l].to_string(),
                b.se[l].to_string(),
                b.lower[l].to_string(),
                b.upper[l].to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// One parsed `bands.csv` row.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct BandRow {
    pub estimator: String,
    pub method: String,
    pub x: f64,
    pub tau_hat: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
}

pub fn read_bands_csv<R: std::io::Read>(reader: R) -> Result<Vec<BandRow>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}
