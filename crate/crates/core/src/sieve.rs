//! Sieve bases, Gram matrices and the SPD solver for the second-step regression.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::data::quantile_sorted;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisFamily {
    Polynomial,
    BSpline,
}

/// A fixed dictionary `p(x)` of `dimension` functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub family: BasisFamily,
    pub dimension: usize,
    /// Closed interval the basis lives on. Inputs are clamped to it. A
    /// polynomial basis without a domain uses raw, unclamped powers.
    pub domain: Option<(f64, f64)>,
    /// Interior knots (B-spline only).
    pub knots: Vec<f64>,
    /// Polynomial degree of the spline pieces (B-spline only).
    pub degree: usize,
}

impl BasisSpec {
    /// Powers of `x` after mapping `[a, b]` affinely onto `[-1, 1]`.
    pub fn polynomial(dimension: usize, a: f64, b: f64) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::config("basis.p", "must be at least 1"));
        }
        check_domain(a, b)?;
        Ok(Self { family: BasisFamily::Polynomial, dimension, domain: Some((a, b)), knots: Vec::new(), degree: 0 })
    }

    /// `(1, x, ..., x^{p-1})` with no rescaling.
    pub fn raw_polynomial(dimension: usize) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::config("basis.p", "must be at least 1"));
        }
        Ok(Self { family: BasisFamily::Polynomial, dimension, domain: None, knots: Vec::new(), degree: 0 })
    }

    pub fn bspline(a: f64, b: f64, knots: Vec<f64>, degree: usize) -> Result<Self> {
        check_domain(a, b)?;
        if knots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("basis.knots", "interior knots must be strictly increasing"));
        }
        if knots.iter().any(|&k| k <= a || k >= b) {
            return Err(Error::config("basis.knots", "knots must lie strictly inside the domain"));
        }
        Ok(Self {
            family: BasisFamily::BSpline,
            dimension: knots.len() + degree + 1,
            domain: Some((a, b)),
            knots,
            degree,
        })
    }

    /// B-spline of dimension `p` with interior knots at equally spaced
    /// empirical quantiles of `values`; the domain is the sample range.
    pub fn bspline_quantile_knots(values: &[f64], dimension: usize, degree: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("basis values"));
        }
        if dimension < degree + 1 {
            return Err(Error::config("basis.p", format!("B-spline of degree {degree} needs p >= {}", degree + 1)));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let interior = dimension - degree - 1;
        let knots = (1..=interior).map(|s| quantile_sorted(&sorted, s as f64 / (interior + 1) as f64)).collect();
        Self::bspline(sorted[0], sorted[sorted.len() - 1], knots, degree)
    }

    pub fn p(&self) -> usize {
        self.dimension
    }
}

fn check_domain(a: f64, b: f64) -> Result<()> {
    if !(a.is_finite() && b.is_finite() && a < b) {
        return Err(Error::config("basis.domain", format!("need a finite interval with a < b, got [{a}, {b}]")));
    }
    Ok(())
}

/// Writes `p(x)` into `out` (length `p`).
pub fn evaluate_basis_into(spec: &BasisSpec, x: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), spec.dimension);
    let x = match spec.domain {
        Some((a, b)) => x.clamp(a, b),
        None => x,
    };
    match spec.family {
        BasisFamily::Polynomial => {
            let t = match spec.domain {
                Some((a, b)) => (2.0 * x - a - b) / (b - a),
                None => x,
            };
            let mut pow = 1.0;
            for v in out.iter_mut() {
                *v = pow;
                pow *= t;
            }
        }
        BasisFamily::BSpline => {
            let (a, b) = spec.domain.expect("B-spline basis has a domain");
            bspline_values(a, b, &spec.knots, spec.degree, x, out);
        }
    }
}

pub fn evaluate_basis(spec: &BasisSpec, x: f64) -> Vec<f64> {
    let mut out = vec![0.0; spec.dimension];
    evaluate_basis_into(spec, x, &mut out);
    out
}

/// Row `k` of the result is `p(xs[k])'`.
pub fn design_matrix(spec: &BasisSpec, xs: &[f64]) -> DMatrix<f64> {
    let p = spec.dimension;
    let mut buf = vec![0.0; p];
    let mut m = DMatrix::zeros(xs.len(), p);
    for (k, &x) in xs.iter().enumerate() {
        evaluate_basis_into(spec, x, &mut buf);
        for (c, &v) in buf.iter().enumerate() {
            m[(k, c)] = v;
        }
    }
    m
}

// Cox-de Boor recursion on the clamped knot vector.
fn bspline_values(a: f64, b: f64, interior: &[f64], degree: usize, x: f64, out: &mut [f64]) {
    let mut t = Vec::with_capacity(interior.len() + 2 * degree + 2);
    t.extend(std::iter::repeat_n(a, degree + 1));
    t.extend_from_slice(interior);
    t.extend(std::iter::repeat_n(b, degree + 1));
    let n_spans = t.len() - 1;
    // degree-0 indicator functions; the right endpoint belongs to the last non-empty span
    let mut n: Vec<f64> = (0..n_spans)
        .map(|s| {
            let inside = t[s] <= x && x < t[s + 1];
            let at_end = x == b && t[s] < t[s + 1] && t[s + 1] == b;
            f64::from(u8::from(inside || at_end))
        })
        .collect();
    for d in 1..=degree {
        for s in 0..n_spans - d {
            let left = if t[s + d] > t[s] { (x - t[s]) / (t[s + d] - t[s]) * n[s] } else { 0.0 };
            let right = if t[s + d + 1] > t[s + 1] {
                (t[s + d + 1] - x) / (t[s + d + 1] - t[s + 1]) * n[s + 1]
            } else {
                0.0
            };
            n[s] = left + right;
        }
    }
    out.copy_from_slice(&n[..out.len()]);
}

/// `E_n[p p']` over a set of cells.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub matrix: DMatrix<f64>,
    pub sample_size: usize,
    /// Fewer observations than basis functions; the matrix is singular and
    /// solving it needs a ridge.
    pub rank_deficiency_risk: bool,
}

impl GramMatrix {
    pub fn from_design(design: &DMatrix<f64>) -> Self {
        let n = design.nrows();
        let matrix = if n == 0 { DMatrix::zeros(design.ncols(), design.ncols()) } else { design.tr_mul(design) / n as f64 };
        Self { matrix, sample_size: n, rank_deficiency_risk: n < design.ncols() }
    }

    pub fn p(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }
}

pub fn gram_matrix(spec: &BasisSpec, conditioning_values: &[f64]) -> GramMatrix {
    let g = GramMatrix::from_design(&design_matrix(spec, conditioning_values));
    if g.rank_deficiency_risk {
        log::warn!("gram matrix from {} values for p = {}: rank deficiency risk", g.sample_size, spec.dimension);
    }
    g
}

/// Cholesky factor of `Q + ridge * I`.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    pub ridge: f64,
}

// Relative pivot size below which a factorization is treated as singular.
const PIVOT_TOL: f64 = 1e-13;

impl SpdFactor {
    pub fn new(q: &DMatrix<f64>, ridge: f64) -> Result<Self> {
        let p = q.nrows();
        let shifted = q + DMatrix::identity(p, p) * ridge;
        let scale = shifted.diagonal().max().max(f64::MIN_POSITIVE);
        let chol = Cholesky::new(shifted).ok_or(Error::SingularGram { ridge })?;
        let l = chol.l_dirty();
        if (0..p).any(|k| l[(k, k)] * l[(k, k)] <= PIVOT_TOL * scale || !l[(k, k)].is_finite()) {
            return Err(Error::SingularGram { ridge });
        }
        Ok(Self { chol, ridge })
    }

    /// Factorizes with no ridge, falling back to `1e-8 * tr(Q) / p`.
    pub fn with_fallback(q: &GramMatrix) -> Result<Self> {
        match Self::new(&q.matrix, 0.0) {
            Ok(f) => Ok(f),
            Err(Error::SingularGram { .. }) => {
                let ridge = fallback_ridge(q);
                log::debug!("gram factorization failed, retrying with ridge {ridge:e}");
                Self::new(&q.matrix, ridge)
            }
            Err(e) => Err(e),
        }
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn p(&self) -> usize {
        self.chol.l_dirty().nrows()
    }
}

pub fn fallback_ridge(q: &GramMatrix) -> f64 {
    let r = 1e-8 * q.trace() / q.p() as f64;
    if r > 0.0 {
        r
    } else {
        1e-8
    }
}

/// `(Q + ridge * I)^{-1} moment`.
pub fn solve_least_squares(q: &GramMatrix, moment: &DVector<f64>, ridge: f64) -> Result<DVector<f64>> {
    if moment.len() != q.p() {
        return Err(Error::schema(format!("moment length {} does not match p = {}", moment.len(), q.p()), None));
    }
    if ridge < 0.0 || !ridge.is_finite() {
        return Err(Error::config("ridge", "must be finite and nonnegative"));
    }
    Ok(SpdFactor::new(&q.matrix, ridge)?.solve(moment))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    // Gaussian elimination with partial pivoting.
    fn eliminate(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
        let n = b.len();
        let mut m: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| a[(i, j)]).chain([b[i]]).collect()).collect();
        for c in 0..n {
            let piv = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
            m.swap(c, piv);
            for r in c + 1..n {
                let f = m[r][c] / m[c][c];
                for k in c..=n {
                    m[r][k] -= f * m[c][k];
                }
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let s: f64 = (r + 1..n).map(|k| m[r][k] * x[k]).sum();
            x[r] = (m[r][n] - s) / m[r][r];
        }
        DVector::from_vec(x)
    }

    #[test]
    fn polynomial_examples() {
        let s = BasisSpec::polynomial(3, -1.0, 1.0).unwrap();
        assert_eq!(evaluate_basis(&s, 0.0), [1.0, 0.0, 0.0]);
        assert_eq!(evaluate_basis(&s, 1.0), [1.0, 1.0, 1.0]);
        // clamped outside the domain
        assert_eq!(evaluate_basis(&s, 7.0), [1.0, 1.0, 1.0]);
        let s = BasisSpec::polynomial(2, 0.0, 4.0).unwrap();
        assert_eq!(evaluate_basis(&s, 1.0), [1.0, -0.5]);
    }

    #[test]
    fn bspline_partition_of_unity_at_knots_and_ends() {
        let s = BasisSpec::bspline(0.0, 1.0, vec![0.25, 0.5, 0.75], 3).unwrap();
        assert_eq!(s.p(), 7);
        for x in [0.0, 0.25, 0.5, 0.75, 1.0, 0.1, 0.99] {
            let v = evaluate_basis(&s, x);
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12, "x={x}: {v:?}");
            assert!(v.iter().all(|&c| c >= 0.0));
        }
        assert_eq!(evaluate_basis(&s, 0.0)[0], 1.0);
        assert_eq!(evaluate_basis(&s, 1.0)[6], 1.0);
    }

    #[test]
    fn bspline_knot_validation() {
        assert!(BasisSpec::bspline(0.0, 1.0, vec![0.5, 0.5], 3).is_err());
        assert!(BasisSpec::bspline(0.0, 1.0, vec![1.5], 3).is_err());
        let s = BasisSpec::bspline_quantile_knots(&(0..=100).map(f64::from).collect::<Vec<_>>(), 6, 3).unwrap();
        assert!((s.knots[0] - 100.0 / 3.0).abs() < 1e-12 && (s.knots[1] - 200.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn gram_examples() {
        let raw = BasisSpec::raw_polynomial(2).unwrap();
        let g = gram_matrix(&raw, &[0.0, 1.0]);
        assert_eq!(g.matrix, dmatrix![1.0, 0.5; 0.5, 0.5]);

        let g = gram_matrix(&raw, &[3.0; 5]);
        assert_eq!(g.matrix, dmatrix![1.0, 3.0; 3.0, 9.0]);
        assert!(SpdFactor::new(&g.matrix, 0.0).is_err());
        assert!(SpdFactor::with_fallback(&g).unwrap().ridge > 0.0);

        assert!(gram_matrix(&BasisSpec::raw_polynomial(3).unwrap(), &[1.0, 2.0]).rank_deficiency_risk);
    }

    #[test]
    fn gram_matches_double_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let xs: Vec<f64> = (0..200).map(|_| rng.random_range(-2.0..3.0)).collect();
        let spec = BasisSpec::polynomial(4, -2.0, 3.0).unwrap();
        let g = gram_matrix(&spec, &xs);
        for r in 0..4 {
            for c in 0..4 {
                let mut s = 0.0;
                for &x in &xs {
                    let t = (2.0 * x - 1.0) / 5.0;
                    s += t.powi(r as i32) * t.powi(c as i32);
                }
                s /= xs.len() as f64;
                assert!((g.matrix[(r, c)] - s).abs() <= 1e-12 * s.abs().max(1.0));
            }
        }
    }

    #[test]
    fn solver_examples() {
        let id = GramMatrix { matrix: DMatrix::identity(3, 3), sample_size: 3, rank_deficiency_risk: false };
        let m = DVector::from_vec(vec![1.0, -2.0, 3.5]);
        assert_eq!(solve_least_squares(&id, &m, 0.0).unwrap(), m);

        let q = GramMatrix { matrix: dmatrix![2.0, 0.0; 0.0, 4.0], sample_size: 2, rank_deficiency_risk: false };
        let b = solve_least_squares(&q, &DVector::from_vec(vec![2.0, 8.0]), 0.0).unwrap();
        assert!((b[0] - 1.0).abs() < 1e-14 && (b[1] - 2.0).abs() < 1e-14);

        let sing = GramMatrix { matrix: dmatrix![1.0, 1.0; 1.0, 1.0], sample_size: 2, rank_deficiency_risk: false };
        assert!(matches!(solve_least_squares(&sing, &DVector::zeros(2), 0.0), Err(Error::SingularGram { .. })));
        assert!(solve_least_squares(&sing, &DVector::zeros(2), 1e-3).is_ok());
    }

    proptest! {
        #[test]
        fn solver_matches_elimination(seed: u64) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
            let q = a.tr_mul(&a) + DMatrix::identity(5, 5);
            let m = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
            let g = GramMatrix { matrix: q.clone(), sample_size: 5, rank_deficiency_risk: false };
            let beta = solve_least_squares(&g, &m, 0.0).unwrap();
            let oracle = eliminate(&q, &m);
            prop_assert!((&beta - &oracle).norm() <= 1e-10 * oracle.norm());
            prop_assert!((&q * &beta - &m).norm() <= 1e-8 * m.norm());
        }

        #[test]
        fn bspline_partition_of_unity(seed: u64, degree in 0usize..4, n_knots in 0usize..6) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut knots: Vec<f64> = (0..n_knots).map(|_| rng.random_range(0.01..0.99)).collect();
            knots.sort_by(f64::total_cmp);
            knots.dedup();
            let s = BasisSpec::bspline(0.0, 1.0, knots, degree).unwrap();
            for _ in 0..1000 {
                let v = evaluate_basis(&s, rng.random_range(0.0..=1.0));
                prop_assert!((v.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(v.iter().all(|&c| c >= 0.0));
            }
        }

        #[test]
        fn exact_interpolation(seed: u64, p in 1usize..5) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let spec = BasisSpec::polynomial(p, -1.0, 2.0).unwrap();
            let xs: Vec<f64> = (0..60).map(|_| rng.random_range(-1.0..2.0)).collect();
            let beta_star = DVector::from_fn(p, |_, _| rng.random_range(-3.0..3.0));
            let x = design_matrix(&spec, &xs);
            let psi = &x * &beta_star;
            let g = GramMatrix::from_design(&x);
            let beta = solve_least_squares(&g, &(x.tr_mul(&psi) / 60.0), 0.0).unwrap();
            prop_assert!((&beta - &beta_star).norm() <= 1e-8 * beta_star.norm().max(1.0));
        }

        #[test]
        fn gram_is_psd(seed: u64, p in 1usize..6, n in 1usize..40) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let g = gram_matrix(&BasisSpec::polynomial(p, -5.0, 5.0).unwrap(), &xs);
            let eig = g.matrix.clone().symmetric_eigenvalues();
            prop_assert!(eig.min() >= -1e-10 * g.matrix.norm());
        }
    }
}
