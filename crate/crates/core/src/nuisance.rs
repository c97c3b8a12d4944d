//! First-step nuisance learners: logistic propensity, ridge outcome
//! regressions, Nadaraya-Watson conditional density and the marginal
//! treatment density.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{CellAccess, Mode};
use crate::error::{Error, Result};
use crate::sieve::SpdFactor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Gaussian,
    Epanechnikov,
}

impl Kernel {
    /// Standardized kernel `k(u)`.
    pub fn k(self, u: f64) -> f64 {
        match self {
            Kernel::Gaussian => (-0.5 * u * u).exp() * std::f64::consts::FRAC_1_SQRT_2 * 0.5 * std::f64::consts::FRAC_2_SQRT_PI,
            Kernel::Epanechnikov => {
                if u.abs() <= 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
        }
    }

    /// `K_h(u) = k(u / h) / h`.
    pub fn k_h(self, u: f64, h: f64) -> f64 {
        self.k(u / h) / h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum BandwidthRule {
    /// `1.06 * sd * n^{-1/5}` per coordinate.
    Silverman,
    Fixed { x: f64, w: f64 },
}

/// What to do when a training subsample has too few units in one treatment arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparseArmPolicy {
    /// Fall back to simpler models (see [`fit_cate_nuisance`]).
    Adaptive,
    /// Propagate `DegenerateTreatment` / `InsufficientArmData`.
    Strict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NuisanceConfig {
    pub trim: f64,
    pub ridge: f64,
    pub density_floor: f64,
    pub bandwidth_rule: BandwidthRule,
    pub kernel: Kernel,
    pub cte_poly_order: usize,
    pub sparse_arm_policy: SparseArmPolicy,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self {
            trim: 0.001,
            ridge: 0.0,
            density_floor: 0.05,
            bandwidth_rule: BandwidthRule::Silverman,
            kernel: Kernel::Gaussian,
            cte_poly_order: 2,
            sparse_arm_policy: SparseArmPolicy::Adaptive,
            max_iter: 100,
            tol: 1e-8,
        }
    }
}

impl NuisanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.trim > 0.0 && self.trim < 0.5) {
            return Err(Error::config("nuisance.trim", "must lie in (0, 0.5)"));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::config("nuisance.ridge", "must be finite and nonnegative"));
        }
        if !(self.density_floor > 0.0 && self.density_floor.is_finite()) {
            return Err(Error::config("nuisance.density_floor", "must be positive"));
        }
        if let BandwidthRule::Fixed { x, w } = self.bandwidth_rule {
            if !(x > 0.0 && w > 0.0 && x.is_finite() && w.is_finite()) {
                return Err(Error::config("nuisance.bandwidth_rule", "fixed bandwidths must be positive"));
            }
        }
        if self.max_iter == 0 || !(self.tol > 0.0) {
            return Err(Error::config("nuisance.max_iter", "need max_iter >= 1 and tol > 0"));
        }
        Ok(())
    }
}

pub fn logistic(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

fn with_intercept(w: &[f64]) -> impl Iterator<Item = f64> + '_ {
    std::iter::once(1.0).chain(w.iter().copied())
}

fn dot_affine(coef: &[f64], w: &[f64]) -> f64 {
    coef.iter().zip(with_intercept(w)).map(|(b, v)| b * v).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    /// Intercept first. Empty for a constant model.
    pub coefficients: Vec<f64>,
    /// Used when `coefficients` is empty.
    pub constant: Option<f64>,
    pub trim: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl PropensityModel {
    pub fn constant(p: f64, trim: f64) -> Self {
        Self { coefficients: Vec::new(), constant: Some(p), trim, converged: true, iterations: 0 }
    }

    pub fn predict_raw(&self, w: &[f64]) -> f64 {
        match self.constant {
            Some(p) => p,
            None => logistic(dot_affine(&self.coefficients, w)),
        }
    }

    /// Trimmed into `[trim, 1 - trim]`.
    pub fn predict(&self, w: &[f64]) -> f64 {
        self.predict_raw(w).clamp(self.trim, 1.0 - self.trim)
    }
}

const P_CLIP: f64 = 1e-12;

/// Logistic regression of `D` on `(1, W)` by iteratively reweighted least squares.
pub fn fit_propensity(obs: &impl CellAccess, trim: f64, max_iter: usize, tol: f64) -> Result<PropensityModel> {
    let n = obs.n_cells();
    let d = obs.covariate_dim();
    let mut x = DMatrix::zeros(n, d + 1);
    let mut t = DVector::zeros(n);
    let mut n1 = 0;
    for (k, o) in obs.iter().enumerate() {
        for (c, v) in with_intercept(&o.covariates).enumerate() {
            x[(k, c)] = v;
        }
        t[k] = o.treatment.value();
        n1 += usize::from(o.treatment.is_treated());
    }
    if n1 == 0 || n1 == n {
        return Err(Error::DegenerateTreatment { block: None });
    }
    let mut beta = DVector::zeros(d + 1);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let eta = &x * &beta;
        let p = eta.map(|e| logistic(e).clamp(P_CLIP, 1.0 - P_CLIP));
        let wts = p.map(|v| v * (1.0 - v));
        let xw = DMatrix::from_fn(n, d + 1, |r, c| x[(r, c)] * wts[r]);
        let hess = x.tr_mul(&xw);
        let grad = x.tr_mul(&(&t - &p));
        let h = crate::sieve::GramMatrix { matrix: hess, sample_size: n, rank_deficiency_risk: false };
        let step = SpdFactor::with_fallback(&h)?.solve(&grad);
        beta += &step;
        if !beta.iter().all(|b| b.is_finite()) {
            return Err(Error::NumericalInstability("logistic coefficients diverged".into()));
        }
        if step.amax() < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::debug!("propensity IRLS stopped after {iterations} iterations without converging");
    }
    Ok(PropensityModel { coefficients: beta.iter().copied().collect(), constant: None, trim, converged, iterations })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Control,
    Treated,
    Continuous,
}

/// Regressors an outcome model is affine in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Features {
    /// `(1, w)`.
    Covariates,
    /// `(1, x, ..., x^order, w)`.
    TreatmentPolynomial { order: usize },
}

impl Features {
    pub fn width(self, d: usize) -> usize {
        match self {
            Features::Covariates => d + 1,
            Features::TreatmentPolynomial { order } => order + 1 + d,
        }
    }

    pub fn fill(self, x: f64, w: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.push(1.0);
        if let Features::TreatmentPolynomial { order } = self {
            let mut pow = 1.0;
            for _ in 0..order {
                pow *= x;
                out.push(pow);
            }
        }
        out.extend_from_slice(w);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub arm: Arm,
    pub features: Features,
    pub coefficients: Vec<f64>,
    pub ridge: f64,
}

impl OutcomeModel {
    pub fn predict(&self, x: f64, w: &[f64]) -> f64 {
        let mut f = Vec::with_capacity(self.coefficients.len());
        self.features.fill(x, w, &mut f);
        f.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum()
    }
}

/// Ridge least squares with an unpenalized intercept (first column).
pub fn ridge_regression(x: &DMatrix<f64>, y: &DVector<f64>, ridge: f64) -> Result<DVector<f64>> {
    let q = x.ncols();
    let mut a = x.tr_mul(x);
    for c in 1..q {
        a[(c, c)] += ridge;
    }
    let rhs = x.tr_mul(y);
    let factor = match SpdFactor::new(&a, 0.0) {
        Ok(f) => f,
        Err(Error::SingularGram { .. }) => {
            let g = crate::sieve::GramMatrix { matrix: a, sample_size: x.nrows(), rank_deficiency_risk: false };
            SpdFactor::new(&g.matrix, crate::sieve::fallback_ridge(&g))?
        }
        Err(e) => return Err(e),
    };
    Ok(factor.solve(&rhs))
}

fn regress<'a>(
    rows: impl Iterator<Item = (f64, &'a [f64], f64)>,
    n: usize,
    d: usize,
    features: Features,
    ridge: f64,
) -> Result<DVector<f64>> {
    let q = features.width(d);
    let mut x = DMatrix::zeros(n, q);
    let mut y = DVector::zeros(n);
    let mut f = Vec::with_capacity(q);
    for (k, (xv, w, yv)) in rows.enumerate() {
        features.fill(xv, w, &mut f);
        for (c, v) in f.iter().enumerate() {
            x[(k, c)] = *v;
        }
        y[k] = yv;
    }
    ridge_regression(&x, &y, ridge)
}

/// Ridge regression of `Y` on `(1, W)` among cells in one arm.
pub fn fit_outcome_arm(obs: &impl CellAccess, arm: Arm, ridge: f64) -> Result<OutcomeModel> {
    let d = obs.covariate_dim();
    let keep = |o: &&crate::data::Observation| match arm {
        Arm::Treated => o.treatment.is_treated(),
        Arm::Control => !o.treatment.is_treated(),
        Arm::Continuous => true,
    };
    let have = obs.iter().filter(keep).count();
    if have < d + 2 {
        let code = match arm {
            Arm::Control => 0,
            Arm::Treated => 1,
            Arm::Continuous => 2,
        };
        return Err(Error::InsufficientArmData { arm: code, have, need: d + 2 });
    }
    let rows = obs.iter().filter(keep).map(|o| (0.0, o.covariates.as_slice(), o.outcome));
    let coef = regress(rows, have, d, Features::Covariates, ridge)?;
    Ok(OutcomeModel { arm, features: Features::Covariates, coefficients: coef.iter().copied().collect(), ridge })
}

/// Outcome surface `mu(x, w)` polynomial in the treatment and affine in `w`.
pub fn fit_outcome_surface(obs: &impl CellAccess, poly_order: usize, ridge: f64) -> Result<OutcomeModel> {
    let d = obs.covariate_dim();
    let features = Features::TreatmentPolynomial { order: poly_order };
    let need = features.width(d) + 1;
    if obs.n_cells() < need {
        return Err(Error::InsufficientArmData { arm: 2, have: obs.n_cells(), need });
    }
    let rows = obs.iter().map(|o| (o.treatment.value(), o.covariates.as_slice(), o.outcome));
    let coef = regress(rows, obs.n_cells(), d, features, ridge)?;
    Ok(OutcomeModel { arm: Arm::Continuous, features, coefficients: coef.iter().copied().collect(), ridge })
}

fn silverman(values: impl Iterator<Item = f64> + Clone, n: usize) -> f64 {
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
    let h = 1.06 * var.sqrt() * (n as f64).powf(-0.2);
    if h > 0.0 {
        h
    } else {
        1.0
    }
}

/// Nadaraya-Watson estimate of `f(x | w)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondDensityModel {
    pub xs: Vec<f64>,
    /// Training covariates, row-major `n x d`.
    pub ws: Vec<f64>,
    pub dim: usize,
    pub bandwidth_x: f64,
    pub bandwidth_w: Vec<f64>,
    pub kernel: Kernel,
    pub floor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityEval {
    pub value: f64,
    /// No kernel mass at the query covariates; `value` is the floor.
    pub sparse: bool,
}

impl CondDensityModel {
    pub fn n_train(&self) -> usize {
        self.xs.len()
    }

    fn w_weight(&self, t: usize, w: &[f64]) -> f64 {
        let row = &self.ws[t * self.dim..(t + 1) * self.dim];
        match self.kernel {
            Kernel::Gaussian => {
                let q: f64 = row.iter().zip(w).zip(&self.bandwidth_w).map(|((a, b), h)| ((b - a) / h).powi(2)).sum();
                (-0.5 * q).exp()
            }
            Kernel::Epanechnikov => {
                row.iter().zip(w).zip(&self.bandwidth_w).map(|((a, b), h)| self.kernel.k((b - a) / h)).product()
            }
        }
    }

    /// Normalized Nadaraya-Watson weights at `w`, or `None` without kernel mass.
    pub fn weights(&self, w: &[f64]) -> Option<Vec<f64>> {
        let mut a: Vec<f64> = (0..self.n_train()).map(|t| self.w_weight(t, w)).collect();
        let den: f64 = a.iter().sum();
        if !(den > 0.0) {
            return None;
        }
        a.iter_mut().for_each(|v| *v /= den);
        Some(a)
    }

    pub fn density(&self, x: f64, w: &[f64]) -> DensityEval {
        match self.weights(w) {
            None => DensityEval { value: self.floor, sparse: true },
            Some(a) => {
                let num: f64 = a.iter().zip(&self.xs).map(|(a, xt)| a * self.kernel.k_h(x - xt, self.bandwidth_x)).sum();
                DensityEval { value: num.max(self.floor), sparse: false }
            }
        }
    }
}

pub fn fit_conditional_density(
    obs: &impl CellAccess,
    bandwidth_rule: BandwidthRule,
    kernel: Kernel,
    floor: f64,
) -> Result<CondDensityModel> {
    let n = obs.n_cells();
    if n < 10 {
        return Err(Error::schema(format!("conditional density needs at least 10 observations, got {n}"), None));
    }
    let dim = obs.covariate_dim();
    let xs: Vec<f64> = obs.iter().map(|o| o.treatment.value()).collect();
    let ws: Vec<f64> = obs.iter().flat_map(|o| o.covariates.iter().copied()).collect();
    let (bandwidth_x, bandwidth_w) = match bandwidth_rule {
        BandwidthRule::Silverman => (
            silverman(xs.iter().copied(), n),
            (0..dim).map(|c| silverman(ws.iter().skip(c).step_by(dim.max(1)).copied(), n)).collect(),
        ),
        BandwidthRule::Fixed { x, w } => (x, vec![w; dim]),
    };
    Ok(CondDensityModel { xs, ws, dim, bandwidth_x, bandwidth_w, kernel, floor })
}

/// `omega(x) = mean_w f(x | w)` over a fixed covariate sample. The
/// Nadaraya-Watson weights are averaged once, so each evaluation costs one
/// pass over the training treatments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalDensity {
    xs: Vec<f64>,
    mixing: Vec<f64>,
    bandwidth_x: f64,
    kernel: Kernel,
    floor: f64,
}

impl MarginalDensity {
    pub fn new<'a>(model: &CondDensityModel, covariate_sample: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut mixing = vec![0.0; model.n_train()];
        let mut count = 0usize;
        let mut seen = 0usize;
        for w in covariate_sample {
            seen += 1;
            if let Some(a) = model.weights(w) {
                count += 1;
                mixing.iter_mut().zip(&a).for_each(|(m, v)| *m += v);
            }
        }
        if seen == 0 {
            return Err(Error::EmptyInput("marginal density covariate sample"));
        }
        if count > 0 {
            mixing.iter_mut().for_each(|m| *m /= count as f64);
        }
        Ok(Self { xs: model.xs.clone(), mixing, bandwidth_x: model.bandwidth_x, kernel: model.kernel, floor: model.floor })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let v: f64 = self.mixing.iter().zip(&self.xs).map(|(c, xt)| c * self.kernel.k_h(x - xt, self.bandwidth_x)).sum();
        v.max(self.floor)
    }
}

pub fn marginal_density<'a>(
    model: &CondDensityModel,
    covariate_sample: impl IntoIterator<Item = &'a [f64]>,
    x: f64,
) -> Result<f64> {
    Ok(MarginalDensity::new(model, covariate_sample)?.eval(x))
}

/// Which outcome models a binary-treatment fit ended up with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmFit {
    Separate,
    /// Shared slopes, arm-specific intercepts.
    SharedSlopes,
    /// One surface for both arms.
    Common,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NuisanceFit {
    Cate { propensity: PropensityModel, mu0: OutcomeModel, mu1: OutcomeModel, arm_fit: ArmFit },
    Cte { density: CondDensityModel, outcome: OutcomeModel, marginal: MarginalDensity, covariate_mean: Vec<f64> },
}

impl NuisanceFit {
    pub fn mode(&self) -> Mode {
        match self {
            NuisanceFit::Cate { .. } => Mode::Cate,
            NuisanceFit::Cte { .. } => Mode::Cte,
        }
    }
}

pub fn fit_nuisance(obs: &impl CellAccess, mode: Mode, cfg: &NuisanceConfig) -> Result<NuisanceFit> {
    match mode {
        Mode::Cate => fit_cate_nuisance(obs, cfg),
        Mode::Cte => fit_cte_nuisance(obs, cfg),
    }
}

/// Propensity and arm-wise outcome models.
///
/// Under [`SparseArmPolicy::Adaptive`], a single-class subsample gets the
/// constant propensity `(n1 + 0.5) / (n + 1)`, and an arm with fewer than
/// `d + 2` units is handled by a pooled regression on `(1, W, D)` (or on
/// `(1, W)` when one arm is empty).
pub fn fit_cate_nuisance(obs: &impl CellAccess, cfg: &NuisanceConfig) -> Result<NuisanceFit> {
    let n = obs.n_cells();
    let d = obs.covariate_dim();
    let n1 = obs.iter().filter(|o| o.treatment.is_treated()).count();
    let n0 = n - n1;
    let strict = cfg.sparse_arm_policy == SparseArmPolicy::Strict;

    let propensity = match fit_propensity(obs, cfg.trim, cfg.max_iter, cfg.tol) {
        Err(Error::DegenerateTreatment { .. }) if !strict => {
            PropensityModel::constant((n1 as f64 + 0.5) / (n as f64 + 1.0), cfg.trim)
        }
        other => other?,
    };

    if strict || (n1 >= d + 2 && n0 >= d + 2) {
        let mu1 = fit_outcome_arm(obs, Arm::Treated, cfg.ridge)?;
        let mu0 = fit_outcome_arm(obs, Arm::Control, cfg.ridge)?;
        return Ok(NuisanceFit::Cate { propensity, mu0, mu1, arm_fit: ArmFit::Separate });
    }

    let mk = |arm, coefficients: Vec<f64>| OutcomeModel { arm, features: Features::Covariates, coefficients, ridge: cfg.ridge };
    if n1 >= 1 && n0 >= 1 {
        let mut x = DMatrix::zeros(n, d + 2);
        let mut y = DVector::zeros(n);
        for (k, o) in obs.iter().enumerate() {
            for (c, v) in with_intercept(&o.covariates).enumerate() {
                x[(k, c)] = v;
            }
            x[(k, d + 1)] = o.treatment.value();
            y[k] = o.outcome;
        }
        let b = ridge_regression(&x, &y, cfg.ridge)?;
        let base: Vec<f64> = b.iter().take(d + 1).copied().collect();
        let mut shifted = base.clone();
        shifted[0] += b[d + 1];
        Ok(NuisanceFit::Cate {
            propensity,
            mu0: mk(Arm::Control, base),
            mu1: mk(Arm::Treated, shifted),
            arm_fit: ArmFit::SharedSlopes,
        })
    } else {
        let rows = obs.iter().map(|o| (0.0, o.covariates.as_slice(), o.outcome));
        let b: Vec<f64> = regress(rows, n, d, Features::Covariates, cfg.ridge)?.iter().copied().collect();
        Ok(NuisanceFit::Cate { propensity, mu0: mk(Arm::Control, b.clone()), mu1: mk(Arm::Treated, b), arm_fit: ArmFit::Common })
    }
}

pub fn fit_cte_nuisance(obs: &impl CellAccess, cfg: &NuisanceConfig) -> Result<NuisanceFit> {
    let density = fit_conditional_density(obs, cfg.bandwidth_rule, cfg.kernel, cfg.density_floor)?;
    let outcome = fit_outcome_surface(obs, cfg.cte_poly_order, cfg.ridge)?;
    let marginal = MarginalDensity::new(&density, obs.iter().map(|o| o.covariates.as_slice()))?;
    let d = obs.covariate_dim();
    let mut covariate_mean = vec![0.0; d];
    for o in obs.iter() {
        covariate_mean.iter_mut().zip(&o.covariates).for_each(|(m, v)| *m += v);
    }
    covariate_mean.iter_mut().for_each(|m| *m /= obs.n_cells() as f64);
    Ok(NuisanceFit::Cte { density, outcome, marginal, covariate_mean })
}
