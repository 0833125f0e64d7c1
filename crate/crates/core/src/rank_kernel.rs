//! Phenotype ranks, covariate projection and the standardized score vector
//! behind the cross-product rank kernel `h(R_i, R_j) = S_i * S_j`.

use crate::error::{HwuError, Result};
use crate::matrix::{dot, Matrix};

/// Minimum number of subjects for any test.
pub const MIN_SUBJECTS: usize = 3;

/// Raw phenotype values, one per subject. Binary traits are coded 0/1,
/// ordinal traits as integers.
#[derive(Debug, Clone, PartialEq)]
pub struct PhenotypeVector(Vec<f64>);

impl PhenotypeVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < MIN_SUBJECTS {
            return Err(HwuError::InvalidInput(format!(
                "need at least {MIN_SUBJECTS} subjects, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(HwuError::InvalidInput(format!(
                "phenotype value for subject {i} is not finite"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_binary(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

/// Mid-ranks of a phenotype vector (1-based, ties averaged).
#[derive(Debug, Clone, PartialEq)]
pub struct RankVector {
    ranks: Vec<f64>,
    degenerate: bool,
}

impl RankVector {
    pub fn ranks(&self) -> &[f64] {
        &self.ranks
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    /// Set when every subject shares the same phenotype value.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }
}

/// Assigns mid-ranks: tied values share the average of the positions they span.
pub fn average_ranks(y: &PhenotypeVector) -> RankVector {
    let values = y.values();
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));

    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end (1-based); the sum of the endpoints is an
        // integer so the halving is exact
        let mid = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = mid;
        }
        start = end;
    }
    let degenerate = n > 0 && values.iter().all(|&v| v == values[0]);
    RankVector { ranks, degenerate }
}

/// Design matrix `Z = (1, z_1, ..., z_p)` together with an orthonormal basis
/// of its column span, so that `P v = Q Q' v` without forming `P`.
#[derive(Debug, Clone)]
pub struct CovariateMatrix {
    design: Matrix,
    // n x (p + 1), orthonormal columns, row-major
    basis: Matrix,
}

impl CovariateMatrix {
    /// Intercept-only design; its projection is the averaging matrix `J`.
    pub fn intercept_only(n: usize) -> Result<Self> {
        Self::with_covariates(n, &[])
    }

    /// Intercept plus the given covariate columns.
    pub fn with_covariates(n: usize, covariates: &[Vec<f64>]) -> Result<Self> {
        let mut columns = Vec::with_capacity(covariates.len() + 1);
        columns.push(vec![1.0; n]);
        for c in covariates {
            if c.len() != n {
                return Err(HwuError::DimensionMismatch {
                    expected: n,
                    found: c.len(),
                });
            }
            columns.push(c.clone());
        }
        Self::from_design(Matrix::from_columns(&columns)?)
    }

    /// Uses `design` as given. The first column is expected to be the intercept.
    pub fn from_design(design: Matrix) -> Result<Self> {
        let n = design.nrows();
        let k = design.ncols();
        if k == 0 {
            return Err(HwuError::InvalidInput("design matrix has no columns".into()));
        }
        if n <= k {
            return Err(HwuError::InvalidInput(format!(
                "need more subjects ({n}) than covariate columns ({k})"
            )));
        }
        if !design.is_finite() {
            return Err(HwuError::InvalidInput("covariates must be finite".into()));
        }
        let basis = orthonormal_basis(&design)?;
        Ok(Self { design, basis })
    }

    pub fn n(&self) -> usize {
        self.design.nrows()
    }

    /// Number of columns including the intercept (`p + 1`).
    pub fn n_columns(&self) -> usize {
        self.design.ncols()
    }

    /// Residual degrees of freedom `n - p - 1`.
    pub fn residual_dof(&self) -> usize {
        self.n() - self.n_columns()
    }

    pub fn design(&self) -> &Matrix {
        &self.design
    }

    /// Orthonormal basis `Q` with `P = Q Q'`.
    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    /// `P v`.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.n());
        let coef = self.basis_coefficients(v);
        (0..self.n())
            .map(|i| dot(self.basis.row(i), &coef))
            .collect()
    }

    /// `(I - P) v`.
    pub fn residualize(&self, v: &[f64]) -> Vec<f64> {
        let fitted = self.project(v);
        v.iter().zip(fitted).map(|(a, b)| a - b).collect()
    }

    /// `Q' v`.
    pub(crate) fn basis_coefficients(&self, v: &[f64]) -> Vec<f64> {
        let k = self.basis.ncols();
        let mut coef = vec![0.0; k];
        for (i, &vi) in v.iter().enumerate() {
            for (c, &q) in coef.iter_mut().zip(self.basis.row(i)) {
                *c += q * vi;
            }
        }
        coef
    }

    /// Returns a copy with rows reordered so that row `i` is old row `perm[i]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Self> {
        let d = &self.design;
        Self::from_design(Matrix::from_fn(d.nrows(), d.ncols(), |i, j| d[(perm[i], j)]))
    }
}

/// Modified Gram-Schmidt with one reorthogonalization pass.
fn orthonormal_basis(design: &Matrix) -> Result<Matrix> {
    let n = design.nrows();
    let k = design.ncols();
    let mut q_cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let mut v = design.column(j);
        let norm0 = dot(&v, &v).sqrt();
        for _ in 0..2 {
            for q in &q_cols {
                let c = dot(q, &v);
                v.iter_mut().zip(q).for_each(|(vi, qi)| *vi -= c * qi);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm0 == 0.0 || norm <= 1e-10 * norm0 {
            return Err(HwuError::SingularCovariates { column: j });
        }
        v.iter_mut().for_each(|vi| *vi /= norm);
        q_cols.push(v);
    }
    Ok(Matrix::from_fn(n, k, |i, j| q_cols[j][i]))
}

/// Residualized, variance-normalized rank scores `(R - P R) / sigma_R`.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedScores {
    scores: Vec<f64>,
    dof_used: usize,
}

impl StandardizedScores {
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Residual degrees of freedom used as the variance divisor.
    pub fn dof_used(&self) -> usize {
        self.dof_used
    }

    /// Reorders subjects: entry `i` of the result is entry `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            scores: perm.iter().map(|&p| self.scores[p]).collect(),
            dof_used: self.dof_used,
        }
    }

    /// Full phenotype similarity matrix `S = s s'`.
    pub fn similarity_matrix(&self) -> Matrix {
        let s = &self.scores;
        Matrix::from_fn(s.len(), s.len(), |i, j| s[i] * s[j])
    }
}

/// Residualizes the ranks on the covariate span and scales by the residual
/// standard deviation with divisor `n - p - 1`.
pub fn standardize_ranks(ranks: &RankVector, z: &CovariateMatrix) -> Result<StandardizedScores> {
    let n = ranks.len();
    if z.n() != n {
        return Err(HwuError::DimensionMismatch {
            expected: n,
            found: z.n(),
        });
    }
    if ranks.is_degenerate() {
        return Err(HwuError::DegeneratePhenotype);
    }
    let resid = z.residualize(ranks.ranks());
    let ss: f64 = resid.iter().map(|r| r * r).sum();
    let scale: f64 = ranks.ranks().iter().map(|r| r * r).sum();
    // relative cut: a perfect fit leaves only rounding noise
    if !(ss > 1e-20 * scale) {
        return Err(HwuError::DegeneratePhenotype);
    }
    let dof = z.residual_dof();
    let sigma = (ss / dof as f64).sqrt();
    Ok(StandardizedScores {
        scores: resid.into_iter().map(|r| r / sigma).collect(),
        dof_used: dof,
    })
}

/// `S_ij = s_i * s_j`.
pub fn phenotype_similarity(scores: &StandardizedScores, i: usize, j: usize) -> f64 {
    scores.scores[i] * scores.scores[j]
}
