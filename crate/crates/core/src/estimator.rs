//! Second-step sieve regression, full-sample and multiway cross-fitted, with
//! the two-way cluster-robust covariance and the variance function.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::hajek_scores;
use crate::data::{partition_folds, CellAccess, FoldPartition, Observation, SubsampleView, TwoWaySample};
use crate::error::{Error, Result};
use crate::nuisance::{fit_nuisance, NuisanceConfig, NuisanceFit};
use crate::sieve::{design_matrix, evaluate_basis, BasisSpec, GramMatrix, SpdFactor};
use crate::signals::{compute_signals, Provenance, SignalMatrix};

/// Produces generated outcomes for `target` using only what it learns from `train`.
pub trait SignalSource: Sync {
    fn signals(&self, train: &SubsampleView<'_>, target: &SubsampleView<'_>) -> Result<Vec<f64>>;
}

/// Fits nuisances on the training cells and evaluates the orthogonal signal.
#[derive(Debug, Clone, Default)]
pub struct PluginSignals {
    pub config: NuisanceConfig,
}

impl SignalSource for PluginSignals {
    fn signals(&self, train: &SubsampleView<'_>, target: &SubsampleView<'_>) -> Result<Vec<f64>> {
        let fit = fit_nuisance(train, train.sample().mode(), &self.config)?;
        Ok(compute_signals(&fit, target))
    }
}

/// Evaluates the signal under one fixed nuisance fit, ignoring the training cells.
#[derive(Debug, Clone)]
pub struct FixedNuisance(pub NuisanceFit);

impl SignalSource for FixedNuisance {
    fn signals(&self, _train: &SubsampleView<'_>, target: &SubsampleView<'_>) -> Result<Vec<f64>> {
        Ok(compute_signals(&self.0, target))
    }
}

/// Precomputed signals on the full grid, row-major.
#[derive(Debug, Clone)]
pub struct InjectedSignals {
    pub n_cols: usize,
    pub values: Vec<f64>,
}

impl SignalSource for InjectedSignals {
    fn signals(&self, _train: &SubsampleView<'_>, target: &SubsampleView<'_>) -> Result<Vec<f64>> {
        Ok((0..target.n_cells())
            .map(|k| {
                let (i, j) = target.position(k);
                self.values[i * self.n_cols + j]
            })
            .collect())
    }
}

/// Signal computed cell by cell from a closure, e.g. with known nuisances.
pub struct OracleSignals<F>(pub F);

impl<F: Fn(&Observation) -> f64 + Sync> SignalSource for OracleSignals<F> {
    fn signals(&self, _train: &SubsampleView<'_>, target: &SubsampleView<'_>) -> Result<Vec<f64>> {
        Ok(target.iter().map(&self.0).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    FullSample,
    PerBlock(usize, usize),
    AveragedCrossFit,
}

/// A second-step regression over a rectangular array of cells.
///
/// For the averaged cross-fit flavor, `design`, `gram` and `factor` describe
/// the full sample, `beta` is the mean of the block coefficients, and
/// `residuals` are pooled from the blocks (each cell uses its own block's
/// coefficients).
#[derive(Debug, Clone)]
pub struct SieveFit {
    pub beta: DVector<f64>,
    pub gram: GramMatrix,
    pub factor: SpdFactor,
    pub basis: BasisSpec,
    pub n_rows: usize,
    pub n_cols: usize,
    /// Row-major `p(X_ij)'` rows.
    pub design: DMatrix<f64>,
    pub signals: Vec<f64>,
    pub residuals: Vec<f64>,
    pub provenance: Vec<Provenance>,
    pub scale_n: usize,
    pub flavor: Flavor,
    pub blocks: Vec<BlockFit>,
}

#[derive(Debug, Clone)]
pub struct BlockFit {
    pub k: usize,
    pub l: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub fit: SieveFit,
}

impl SieveFit {
    /// Regresses `signals` on `p(xs)` for an `n_rows x n_cols` array.
    /// `ridge = 0` retries with the automatic fallback ridge if `Q` is singular.
    pub fn from_parts(basis: &BasisSpec, n_rows: usize, n_cols: usize, xs: &[f64], signals: Vec<f64>, ridge: f64) -> Result<Self> {
        if xs.len() != n_rows * n_cols || signals.len() != xs.len() {
            return Err(Error::schema("signal and conditioning lengths must match the array shape", None));
        }
        if xs.is_empty() {
            return Err(Error::EmptyInput("sieve regression cells"));
        }
        if let Some(k) = signals.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericalInstability(format!("non-finite signal at cell {k}")));
        }
        let design = design_matrix(basis, xs);
        let gram = GramMatrix::from_design(&design);
        let factor = if ridge > 0.0 { SpdFactor::new(&gram.matrix, ridge)? } else { SpdFactor::with_fallback(&gram)? };
        let moment = design.tr_mul(&DVector::from_column_slice(&signals)) / xs.len() as f64;
        let beta = factor.solve(&moment);
        let fitted = &design * &beta;
        let residuals = signals.iter().zip(fitted.iter()).map(|(s, f)| s - f).collect();
        Ok(Self {
            beta,
            gram,
            factor,
            basis: basis.clone(),
            n_rows,
            n_cols,
            design,
            signals,
            residuals,
            provenance: vec![Provenance::FullSample; xs.len()],
            scale_n: n_rows.min(n_cols),
            flavor: Flavor::FullSample,
            blocks: Vec::new(),
        })
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }

    pub fn ridge(&self) -> f64 {
        self.factor.ridge
    }

    pub fn signal_matrix(&self, mode: crate::data::Mode) -> SignalMatrix {
        SignalMatrix {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            values: self.signals.clone(),
            mode,
            provenance: self.provenance.clone(),
        }
    }

    /// `E_n[p_ij u_ij]`.
    pub fn mean_score(&self) -> DVector<f64> {
        self.design.tr_mul(&DVector::from_column_slice(&self.residuals)) / self.residuals.len() as f64
    }

    /// Average of the block Gram matrices, factorized with the usual fallback.
    pub fn block_average_gram(&self) -> Result<(GramMatrix, SpdFactor)> {
        if self.blocks.is_empty() {
            return Ok((self.gram.clone(), self.factor.clone()));
        }
        let p = self.p();
        let mut q = DMatrix::zeros(p, p);
        for b in &self.blocks {
            q += &b.fit.gram.matrix;
        }
        q /= self.blocks.len() as f64;
        let g = GramMatrix { matrix: q, sample_size: self.gram.sample_size, rank_deficiency_risk: false };
        let f = SpdFactor::with_fallback(&g)?;
        Ok((g, f))
    }

    /// Line-oriented summary: one `key value...` record per line.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let nums = |v: &DVector<f64>| v.iter().map(|b| format!("{b:.17e}")).collect::<Vec<_>>().join(" ");
        let flavor = match self.flavor {
            Flavor::FullSample => "full_sample".to_owned(),
            Flavor::PerBlock(k, l) => format!("per_block {k} {l}"),
            Flavor::AveragedCrossFit => "averaged_cross_fit".to_owned(),
        };
        let _ = writeln!(s, "flavor {flavor}");
        let _ = writeln!(s, "shape {} {}", self.n_rows, self.n_cols);
        let _ = writeln!(s, "p {}", self.p());
        let _ = writeln!(s, "beta {}", nums(&self.beta));
        let _ = writeln!(s, "trace_q {:.17e}", self.gram.trace());
        let _ = writeln!(s, "ridge {:e}", self.ridge());
        for b in &self.blocks {
            let _ = writeln!(
                s,
                "block {} {} rows {} cols {} trace_q {:.17e} ridge {:e} beta {}",
                b.k,
                b.l,
                b.rows.len(),
                b.cols.len(),
                b.fit.gram.trace(),
                b.fit.ridge(),
                nums(&b.fit.beta)
            );
        }
        s
    }
}

pub fn fit_full_sample(sample: &TwoWaySample, basis: &BasisSpec, source: &impl SignalSource, ridge: f64) -> Result<SieveFit> {
    let view = sample.full_view();
    let signals = source.signals(&view, &view)?;
    SieveFit::from_parts(basis, sample.n_rows(), sample.n_cols(), &sample.conditioning_values(), signals, ridge)
}

fn tag_block(e: Error, k: usize, l: usize) -> Error {
    match e {
        Error::DegenerateTreatment { block: None } => Error::DegenerateTreatment { block: Some((k, l)) },
        other => other,
    }
}

/// Multiway cross-fitting over a random `K x K` fold grid.
pub fn fit_cross_fitted(
    sample: &TwoWaySample,
    basis: &BasisSpec,
    source: &impl SignalSource,
    k_folds: usize,
    seed: u64,
    ridge: f64,
) -> Result<SieveFit> {
    let folds = partition_folds(sample, k_folds, seed)?;
    fit_cross_fitted_with(sample, basis, source, &folds, ridge)
}

pub fn fit_cross_fitted_with(
    sample: &TwoWaySample,
    basis: &BasisSpec,
    source: &impl SignalSource,
    folds: &FoldPartition,
    ridge: f64,
) -> Result<SieveFit> {
    let kf = folds.k_folds;
    let pairs: Vec<(usize, usize)> = (0..kf).flat_map(|k| (0..kf).map(move |l| (k, l))).collect();
    let blocks: Vec<BlockFit> = pairs
        .par_iter()
        .map(|&(k, l)| {
            let train = SubsampleView::new(sample, folds.complement_rows(k), folds.complement_cols(l));
            let rows = folds.row_folds[k].clone();
            let cols = folds.col_folds[l].clone();
            let target = SubsampleView::new(sample, rows.clone(), cols.clone());
            let signals = source.signals(&train, &target).map_err(|e| tag_block(e, k, l))?;
            let xs: Vec<f64> = target.iter().map(|o| o.conditioning_value).collect();
            let mut fit = SieveFit::from_parts(basis, rows.len(), cols.len(), &xs, signals, ridge).map_err(|e| tag_block(e, k, l))?;
            fit.flavor = Flavor::PerBlock(k, l);
            fit.provenance.fill(Provenance::Block(k, l));
            Ok(BlockFit { k, l, rows, cols, fit })
        })
        .collect::<Result<_>>()?;

    let (n, m) = (sample.n_rows(), sample.n_cols());
    let p = basis.p();
    let mut beta = DVector::zeros(p);
    let mut signals = vec![0.0; n * m];
    let mut residuals = vec![0.0; n * m];
    let mut provenance = vec![Provenance::FullSample; n * m];
    for b in &blocks {
        beta += &b.fit.beta;
        for (a, &i) in b.rows.iter().enumerate() {
            for (c, &j) in b.cols.iter().enumerate() {
                let src = a * b.cols.len() + c;
                signals[i * m + j] = b.fit.signals[src];
                residuals[i * m + j] = b.fit.residuals[src];
                provenance[i * m + j] = Provenance::Block(b.k, b.l);
            }
        }
    }
    beta /= blocks.len() as f64;
    let design = design_matrix(basis, &sample.conditioning_values());
    let gram = GramMatrix::from_design(&design);
    let factor = if ridge > 0.0 { SpdFactor::new(&gram.matrix, ridge)? } else { SpdFactor::with_fallback(&gram)? };
    Ok(SieveFit {
        beta,
        gram,
        factor,
        basis: basis.clone(),
        n_rows: n,
        n_cols: m,
        design,
        signals,
        residuals,
        provenance,
        scale_n: n.min(m),
        flavor: Flavor::AveragedCrossFit,
        blocks,
    })
}

/// A `p x p` score covariance together with the effective size it is scaled by.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterCovariance {
    pub sigma: DMatrix<f64>,
    pub scale_n: usize,
}

/// Two-way cluster-robust covariance of the fit's scores, computed from the
/// row and column averages of `p_ij u_ij`.
pub fn cluster_covariance(fit: &SieveFit) -> ClusterCovariance {
    cluster_covariance_scaled(fit, fit.scale_n)
}

pub fn cluster_covariance_scaled(fit: &SieveFit, scale_n: usize) -> ClusterCovariance {
    let h = hajek_scores(fit);
    let (n, m, e) = (fit.n_rows as f64, fit.n_cols as f64, scale_n as f64);
    let sigma = h.row_scores.tr_mul(&h.row_scores) * (e / (n * n)) + h.col_scores.tr_mul(&h.col_scores) * (e / (m * m));
    ClusterCovariance { sigma, scale_n }
}

/// Average of the per-block covariances, all scaled by one common effective size.
pub fn blockwise_covariance(fit: &SieveFit, scale_n: usize) -> ClusterCovariance {
    let p = fit.p();
    let mut sigma = DMatrix::zeros(p, p);
    for b in &fit.blocks {
        sigma += cluster_covariance_scaled(&b.fit, scale_n).sigma;
    }
    sigma /= fit.blocks.len().max(1) as f64;
    ClusterCovariance { sigma, scale_n }
}

/// Heteroskedasticity-only covariance `E_n[p p' u^2]`.
pub fn iid_covariance(fit: &SieveFit) -> DMatrix<f64> {
    let scores = DMatrix::from_fn(fit.design.nrows(), fit.p(), |r, c| fit.design[(r, c)] * fit.residuals[r]);
    scores.tr_mul(&scores) / fit.residuals.len() as f64
}

/// `sqrt(p(x)' Q^{-1} Sigma Q^{-1} p(x))` with `Q^{-1}` from the fit's own factorization.
pub fn sigma_tau(fit: &SieveFit, cov: &ClusterCovariance, x: f64) -> Result<f64> {
    sigma_tau_with(&fit.factor, &fit.basis, &cov.sigma, x)
}

pub fn sigma_tau_with(bread: &SpdFactor, basis: &BasisSpec, sigma: &DMatrix<f64>, x: f64) -> Result<f64> {
    let a = bread.solve(&DVector::from_vec(evaluate_basis(basis, x)));
    let v = a.dot(&(sigma * &a));
    if v < -1e-10 * sigma.norm() {
        return Err(Error::NumericalInstability(format!("negative variance {v:e} at x = {x}")));
    }
    Ok(v.max(0.0).sqrt())
}

pub fn evaluate_tau(fit: &SieveFit, x: f64) -> f64 {
    evaluate_basis(&fit.basis, x).iter().zip(fit.beta.iter()).map(|(a, b)| a * b).sum()
}
