//! Background similarity (kappa), genetic similarity (f) and the composed
//! zero-diagonal weight matrix `w_ij = kappa_ij * f(G_i, G_j)`.

use std::fmt;
use std::path::Path;

use crate::error::{HwuError, Result};
use crate::matrix::{dot, Matrix};
use crate::quadform::sym_eigenvalues;

const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KappaKind {
    Euclidean,
    CrossProduct,
    Ibs,
    Constant,
    Precomputed,
}

/// Symmetric `n x n` latent-structure similarity between subjects.
#[derive(Debug, Clone, PartialEq)]
pub struct KappaMatrix {
    entries: Matrix,
    kind: KappaKind,
}

impl KappaMatrix {
    pub fn new(entries: Matrix, kind: KappaKind) -> Result<Self> {
        if !entries.is_square() {
            return Err(HwuError::InvalidInput(format!(
                "kappa must be square, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        if !entries.is_finite() {
            return Err(HwuError::InvalidInput("kappa has non-finite entries".into()));
        }
        let asym = entries.asymmetry();
        if asym > SYMMETRY_TOL * entries.max_abs().max(1.0) {
            return Err(HwuError::InvalidInput(format!(
                "kappa is not symmetric (max asymmetry {asym:e})"
            )));
        }
        Ok(Self { entries, kind })
    }

    /// `kappa_ij = c` for every pair.
    pub fn constant(n: usize, c: f64) -> Self {
        Self {
            entries: Matrix::from_fn(n, n, |_, _| c),
            kind: KappaKind::Constant,
        }
    }

    /// Parses a whitespace-delimited square matrix.
    pub fn parse_text(text: &str, source: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|_| HwuError::Parse {
                        path: source.to_string(),
                        line: lineno + 1,
                        message: format!("not a number: {tok:?}"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            if let Some(first) = rows.first().map(Vec::len) {
                if row.len() != first {
                    return Err(HwuError::Parse {
                        path: source.to_string(),
                        line: lineno + 1,
                        message: format!("expected {first} columns, found {}", row.len()),
                    });
                }
            }
            rows.push(row);
        }
        Self::new(Matrix::from_rows(&rows)?, KappaKind::Precomputed)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HwuError::io(path, e))?;
        Self::parse_text(&text, &path.display().to_string())
    }

    pub fn entries(&self) -> &Matrix {
        &self.entries
    }

    pub fn kind(&self) -> KappaKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    /// Mean over all `n^2` entries, diagonal included.
    pub fn mean(&self) -> f64 {
        let n = self.n() as f64;
        self.entries.as_slice().iter().sum::<f64>() / (n * n)
    }

    /// Restricts to the listed subjects, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            entries: self.entries.select_symmetric(idx),
            kind: self.kind,
        }
    }
}

/// Choice of the positive semidefinite matrix `R` in
/// `kappa_ij = exp(-(x_i - x_j) R (x_i - x_j)')`.
#[derive(Debug, Clone, PartialEq)]
pub enum DistanceMetric {
    /// `R = I / D`.
    ScaledIdentity,
    /// `R = I`.
    Identity,
    /// `R = diag(w)` with user-supplied importance weights.
    Importance(Vec<f64>),
    /// `R = (X'X / n)^{-1}` on the standardized covariates.
    InverseCorrelation,
    /// Any user-supplied PSD matrix.
    Custom(Matrix),
}

/// Covariates standardized to mean 0 and (population) sd 1.
#[derive(Debug, Clone)]
pub struct StandardizedCovariates {
    pub values: Matrix,
    /// Columns with zero variance, left out of `values`.
    pub dropped: Vec<usize>,
    pub kept: Vec<usize>,
}

/// Standardizes each column; zero-variance columns are dropped.
pub fn standardize_columns(x: &Matrix) -> Result<StandardizedCovariates> {
    if !x.is_finite() {
        return Err(HwuError::InvalidInput("covariates must be finite".into()));
    }
    let n = x.nrows();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut cols = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j);
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let scale = col.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
        if var.sqrt() <= 1e-12 * scale {
            dropped.push(j);
            continue;
        }
        let sd = var.sqrt();
        cols.push(col.iter().map(|v| (v - mean) / sd).collect::<Vec<f64>>());
        kept.push(j);
    }
    let values = if cols.is_empty() {
        Matrix::zeros(n, 0)
    } else {
        Matrix::from_columns(&cols)?
    };
    Ok(StandardizedCovariates {
        values,
        dropped,
        kept,
    })
}

fn resolve_metric(metric: &DistanceMetric, xs: &StandardizedCovariates, d_raw: usize) -> Result<Matrix> {
    let d = xs.kept.len();
    let r = match metric {
        DistanceMetric::ScaledIdentity => {
            let mut m = Matrix::identity(d);
            m.scale(1.0 / d as f64);
            m
        }
        DistanceMetric::Identity => Matrix::identity(d),
        DistanceMetric::Importance(w) => {
            if w.len() != d_raw {
                return Err(HwuError::DimensionMismatch {
                    expected: d_raw,
                    found: w.len(),
                });
            }
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(HwuError::InvalidParameter(
                    "importance weights must be finite and non-negative".into(),
                ));
            }
            Matrix::from_fn(d, d, |i, j| if i == j { w[xs.kept[i]] } else { 0.0 })
        }
        DistanceMetric::InverseCorrelation => {
            let x = &xs.values;
            let n = x.nrows() as f64;
            let corr = Matrix::from_fn(d, d, |a, b| {
                (0..x.nrows()).map(|i| x[(i, a)] * x[(i, b)]).sum::<f64>() / n
            });
            invert_spd(&corr)?
        }
        DistanceMetric::Custom(m) => {
            if m.nrows() != d_raw || m.ncols() != d_raw {
                return Err(HwuError::DimensionMismatch {
                    expected: d_raw,
                    found: m.nrows(),
                });
            }
            m.select_symmetric(&xs.kept)
        }
    };
    check_psd(&r)?;
    Ok(r)
}

fn check_psd(r: &Matrix) -> Result<()> {
    if r.nrows() == 0 {
        return Ok(());
    }
    if !r.is_finite() || !r.is_symmetric(1e-10 * r.max_abs().max(1.0)) {
        return Err(HwuError::InvalidParameter(
            "distance matrix must be finite and symmetric".into(),
        ));
    }
    let ev = sym_eigenvalues(r)?;
    let top = ev.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if ev.iter().any(|&v| v < -1e-10 * top.max(1e-300)) {
        return Err(HwuError::InvalidParameter(
            "distance matrix is not positive semidefinite".into(),
        ));
    }
    Ok(())
}

fn invert_spd(m: &Matrix) -> Result<Matrix> {
    use faer::linalg::solvers::DenseSolveCore;
    let llt = m
        .to_faer()
        .llt(faer::Side::Lower)
        .map_err(|_| HwuError::InvalidParameter("covariate correlation matrix is singular".into()))?;
    let inv = llt.inverse();
    Ok(Matrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        0.5 * (inv[(i, j)] + inv[(j, i)])
    }))
}

/// `kappa_ij = exp(-(x_i - x_j) R (x_i - x_j)')` on covariates that are
/// already standardized. `rmat` must be `D x D` PSD.
pub fn euclidean_kernel(x: &Matrix, rmat: &Matrix) -> Result<KappaMatrix> {
    let n = x.nrows();
    let d = x.ncols();
    if rmat.nrows() != d || rmat.ncols() != d {
        return Err(HwuError::DimensionMismatch {
            expected: d,
            found: rmat.nrows(),
        });
    }
    check_psd(rmat)?;
    // x_i R x_j' = (X R)_i . x_j
    let xr = x.matmul(rmat)?;
    let self_terms: Vec<f64> = (0..n).map(|i| dot(xr.row(i), x.row(i))).collect();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = 1.0;
        for j in 0..i {
            let dist = (self_terms[i] + self_terms[j] - 2.0 * dot(xr.row(i), x.row(j))).max(0.0);
            let v = (-dist).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    KappaMatrix::new(k, KappaKind::Euclidean)
}

/// Euclidean-distance background similarity from raw covariates
/// (`n x D`). Columns are standardized first; constant columns are dropped.
pub fn kappa_euclidean(x: &Matrix, metric: &DistanceMetric) -> Result<KappaMatrix> {
    let xs = standardize_columns(x)?;
    if !xs.dropped.is_empty() {
        log::warn!(
            "dropping zero-variance covariate column(s) {:?} from the euclidean kernel",
            xs.dropped
        );
    }
    if xs.kept.is_empty() {
        return Err(HwuError::InvalidInput(
            "no covariate with non-zero variance for the euclidean kernel".into(),
        ));
    }
    let r = resolve_metric(metric, &xs, x.ncols())?;
    let mut kappa = euclidean_kernel(&xs.values, &r)?;
    kappa.kind = KappaKind::Euclidean;
    Ok(kappa)
}

/// Cross-product background similarity `kappa = X X' / D` on standardized
/// covariates. A constant column cannot be standardized and is used as given.
pub fn kappa_crossprod(x: &Matrix) -> Result<KappaMatrix> {
    let n = x.nrows();
    let d = x.ncols();
    if d == 0 || n == 0 {
        return Err(HwuError::InvalidInput("cross-product kernel needs D >= 1".into()));
    }
    let xs = standardize_columns(x)?;
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut next_kept = 0;
    for j in 0..d {
        if xs.kept.get(next_kept) == Some(&j) {
            cols.push(xs.values.column(next_kept));
            next_kept += 1;
        } else {
            cols.push(x.column(j));
        }
    }
    let xm = Matrix::from_columns(&cols)?;
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = dot(xm.row(i), xm.row(j)) / d as f64;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    KappaMatrix::new(k, KappaKind::CrossProduct)
}

/// Genome-wide average identity-by-state similarity,
/// `kappa_ij = (1 / 2Q) sum_q (2 - |g_qi - g_qj|)`.
///
/// `markers` is marker-major: `markers[q][i]` is the dosage of subject `i`.
pub fn kappa_ibs(markers: &[Vec<f64>]) -> Result<KappaMatrix> {
    let q = markers.len();
    if q == 0 {
        return Err(HwuError::InvalidInput("IBS kernel needs at least one marker".into()));
    }
    let n = markers[0].len();
    for (mi, m) in markers.iter().enumerate() {
        if m.len() != n {
            return Err(HwuError::DimensionMismatch {
                expected: n,
                found: m.len(),
            });
        }
        if let Some(bad) = m.iter().find(|v| !(0.0..=2.0).contains(*v)) {
            return Err(HwuError::InvalidInput(format!(
                "marker {mi}: dosage {bad} is missing or outside [0, 2]; impute first"
            )));
        }
    }
    let mut shared = Matrix::zeros(n, n);
    for m in markers {
        for i in 0..n {
            let gi = m[i];
            let row = shared.row_mut(i);
            for j in 0..i {
                row[j] += 2.0 - (gi - m[j]).abs();
            }
        }
    }
    let denom = 2.0 * q as f64;
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = 1.0;
        for j in 0..i {
            let v = shared[(i, j)] / denom;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    KappaMatrix::new(k, KappaKind::Ibs)
}

/// Replaces missing (NaN) dosages by the mean of the observed ones and
/// returns how many were filled. An all-missing vector becomes all zero.
pub fn impute_mean(dosages: &mut [f64]) -> usize {
    let (sum, count) = dosages
        .iter()
        .filter(|v| !v.is_nan())
        .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    let fill = if count == 0 { 0.0 } else { sum / count as f64 };
    let mut filled = 0;
    for v in dosages.iter_mut().filter(|v| v.is_nan()) {
        *v = fill;
        filled += 1;
    }
    filled
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityKind {
    /// `f = g_i g_j` (single marker, additive).
    CrossProduct,
    /// `f = 1(g_i = g_j)` (single marker, any mode of inheritance).
    Match,
    /// `f = sum_q g_qi g_qj`.
    MultiLocus,
}

impl std::str::FromStr for SimilarityKind {
    type Err = HwuError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "crossprod" | "cross-product" | "cross_product" => Ok(Self::CrossProduct),
            "match" | "ibs-match" => Ok(Self::Match),
            "multilocus" | "multi-locus" => Ok(Self::MultiLocus),
            other => Err(HwuError::InvalidParameter(format!(
                "unknown genetic similarity {other:?}"
            ))),
        }
    }
}

/// Genotypes of the markers under test and the similarity function on them.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneticSimilarity {
    // marker-major: markers[q][i]
    markers: Vec<Vec<f64>>,
    kind: SimilarityKind,
}

impl GeneticSimilarity {
    pub fn new(markers: Vec<Vec<f64>>, kind: SimilarityKind) -> Result<Self> {
        if markers.is_empty() {
            return Err(HwuError::InvalidInput("need at least one marker".into()));
        }
        if kind != SimilarityKind::MultiLocus && markers.len() != 1 {
            return Err(HwuError::InvalidParameter(format!(
                "{kind:?} similarity takes a single marker, got {}",
                markers.len()
            )));
        }
        let n = markers[0].len();
        for m in &markers {
            if m.len() != n {
                return Err(HwuError::DimensionMismatch {
                    expected: n,
                    found: m.len(),
                });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(HwuError::InvalidInput(
                    "dosages must be imputed before computing similarity".into(),
                ));
            }
        }
        Ok(Self { markers, kind })
    }

    pub fn crossprod(g: Vec<f64>) -> Result<Self> {
        Self::new(vec![g], SimilarityKind::CrossProduct)
    }

    pub fn matching(g: Vec<f64>) -> Result<Self> {
        Self::new(vec![g], SimilarityKind::Match)
    }

    pub fn multilocus(markers: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(markers, SimilarityKind::MultiLocus)
    }

    pub fn kind(&self) -> SimilarityKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.markers[0].len()
    }

    pub fn markers(&self) -> &[Vec<f64>] {
        &self.markers
    }

    /// `f(G_i, G_j)`.
    #[inline]
    pub fn value(&self, i: usize, j: usize) -> f64 {
        match self.kind {
            SimilarityKind::CrossProduct => self.markers[0][i] * self.markers[0][j],
            SimilarityKind::Match => {
                if self.markers[0][i] == self.markers[0][j] {
                    1.0
                } else {
                    0.0
                }
            }
            SimilarityKind::MultiLocus => self.markers.iter().map(|m| m[i] * m[j]).sum(),
        }
    }

    /// True when every marker takes a single value across subjects.
    pub fn is_monomorphic(&self) -> bool {
        self.markers
            .iter()
            .all(|m| m.iter().all(|&v| v == m[0]))
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            markers: self
                .markers
                .iter()
                .map(|m| perm.iter().map(|&p| m[p]).collect())
                .collect(),
            kind: self.kind,
        }
    }
}

/// `f(G_i, G_j)`.
pub fn genetic_similarity(gs: &GeneticSimilarity, i: usize, j: usize) -> f64 {
    gs.value(i, j)
}

/// Weighting scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WeightMode {
    /// `w_ij = kappa_ij f_ij`.
    Hwu,
    /// `w_ij = f_ij` (no background similarity).
    Nhwu,
    /// `w_ij = (kappa_ij - mean(kappa)) f_ij`.
    Phwu,
}

impl WeightMode {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightMode::Hwu => "hwu",
            WeightMode::Nhwu => "nhwu",
            WeightMode::Phwu => "phwu",
        }
    }
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for WeightMode {
    type Err = HwuError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hwu" => Ok(Self::Hwu),
            "nhwu" => Ok(Self::Nhwu),
            "phwu" => Ok(Self::Phwu),
            other => Err(HwuError::InvalidParameter(format!("unknown mode {other:?}"))),
        }
    }
}

/// Symmetric weight matrix with an exactly zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    entries: Matrix,
    mode: WeightMode,
}

impl WeightMatrix {
    /// Wraps an explicit matrix; the diagonal is zeroed.
    pub fn from_matrix(mut entries: Matrix, mode: WeightMode) -> Result<Self> {
        if !entries.is_square() || !entries.is_finite() {
            return Err(HwuError::InvalidInput(
                "weight matrix must be square and finite".into(),
            ));
        }
        if entries.asymmetry() > SYMMETRY_TOL * entries.max_abs().max(1.0) {
            return Err(HwuError::InvalidInput("weight matrix is not symmetric".into()));
        }
        for i in 0..entries.nrows() {
            entries[(i, i)] = 0.0;
        }
        Ok(Self { entries, mode })
    }

    pub fn entries(&self) -> &Matrix {
        &self.entries
    }

    pub fn mode(&self) -> WeightMode {
        self.mode
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            entries: self.entries.permute_symmetric(perm),
            mode: self.mode,
        }
    }
}

/// Builds the weight matrix for `mode`. The diagonal is set to zero after
/// composition.
pub fn compose_weight(
    kappa: &KappaMatrix,
    gs: &GeneticSimilarity,
    mode: WeightMode,
) -> Result<WeightMatrix> {
    let n = gs.n();
    if kappa.n() != n {
        return Err(HwuError::DimensionMismatch {
            expected: n,
            found: kappa.n(),
        });
    }
    let kbar = if mode == WeightMode::Phwu { kappa.mean() } else { 0.0 };
    let background = |i: usize, j: usize| match mode {
        WeightMode::Hwu => kappa.get(i, j),
        WeightMode::Nhwu => 1.0,
        WeightMode::Phwu => kappa.get(i, j) - kbar,
    };

    let mut w = Matrix::zeros(n, n);
    let mut max_w = 0.0_f64;
    let mut max_f = 0.0_f64;
    match gs.kind() {
        SimilarityKind::CrossProduct => {
            let g = &gs.markers()[0];
            for i in 0..n {
                for j in 0..i {
                    let f = g[i] * g[j];
                    let v = background(i, j) * f;
                    w[(i, j)] = v;
                    w[(j, i)] = v;
                    max_w = max_w.max(v.abs());
                    max_f = max_f.max(f.abs());
                }
            }
        }
        _ => {
            for i in 0..n {
                for j in 0..i {
                    let f = gs.value(i, j);
                    let v = background(i, j) * f;
                    w[(i, j)] = v;
                    w[(j, i)] = v;
                    max_w = max_w.max(v.abs());
                    max_f = max_f.max(f.abs());
                }
            }
        }
    }
    let max_k = match mode {
        WeightMode::Nhwu => 1.0,
        _ => kappa.entries().max_abs(),
    };
    // kappa - mean(kappa) for a constant kappa is rounding noise, not signal
    if !(max_w > 1e-12 * max_f * max_k) {
        return Err(HwuError::DegenerateWeight(format!(
            "all {mode} weights are zero"
        )));
    }
    Ok(WeightMatrix { entries: w, mode })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dosages(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(0..3) as f64).collect()
    }

    fn random_kappa(rng: &mut ChaCha8Rng, n: usize) -> KappaMatrix {
        let x = Matrix::from_fn(n, 3, |_, _| rng.random::<f64>());
        kappa_euclidean(&x, &DistanceMetric::ScaledIdentity).unwrap()
    }

    #[test]
    fn identical_rows_have_unit_similarity() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap();
        let k = kappa_euclidean(&x, &DistanceMetric::ScaledIdentity).unwrap();
        assert_eq!(k.get(0, 1), 1.0);
        assert!(k.get(0, 2) < 1.0 && k.get(0, 2) > 0.0);
        for i in 0..3 {
            assert_eq!(k.get(i, i), 1.0);
        }
    }

    #[test]
    fn unit_distance_gives_exp_minus_one() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let k = euclidean_kernel(&x, &Matrix::identity(1)).unwrap();
        assert!((k.get(0, 1) - (-1.0_f64).exp()).abs() < 1e-15);
        assert!((k.get(0, 1) - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn euclidean_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 30;
        let x = Matrix::from_fn(n, 3, |_, _| rng.random::<f64>() * 5.0);
        let xs = standardize_columns(&x).unwrap().values;
        // inner correlation metric
        let corr = Matrix::from_fn(3, 3, |a, b| {
            (0..n).map(|i| xs[(i, a)] * xs[(i, b)]).sum::<f64>() / n as f64
        });
        let r = invert_spd(&corr).unwrap();
        let k = kappa_euclidean(&x, &DistanceMetric::InverseCorrelation).unwrap();
        for i in 0..n {
            for j in 0..n {
                let d: Vec<f64> = (0..3).map(|c| xs[(i, c)] - xs[(j, c)]).collect();
                let mut q = 0.0;
                for a in 0..3 {
                    for b in 0..3 {
                        q += d[a] * r[(a, b)] * d[b];
                    }
                }
                assert!((k.get(i, j) - (-q).exp()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_psd_metric_rejected() {
        let x = Matrix::from_fn(5, 2, |i, j| (i * (j + 1)) as f64 + (j as f64) * 0.3 * (i % 2) as f64);
        let bad = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(
            kappa_euclidean(&x, &DistanceMetric::Custom(bad)),
            Err(HwuError::InvalidParameter(_))
        ));
        assert!(kappa_euclidean(&x, &DistanceMetric::Importance(vec![1.0, -0.5])).is_err());
    }

    #[test]
    fn constant_covariate_is_dropped() {
        let x = Matrix::from_rows(&[vec![1.0, 7.0], vec![2.0, 7.0], vec![4.0, 7.0]]).unwrap();
        let k = kappa_euclidean(&x, &DistanceMetric::ScaledIdentity).unwrap();
        let only = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![4.0]]).unwrap();
        let k1 = kappa_euclidean(&only, &DistanceMetric::ScaledIdentity).unwrap();
        assert_eq!(k.entries(), k1.entries());
    }

    #[test]
    fn zero_metric_gives_constant_kappa() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Matrix::from_fn(10, 2, |_, _| rng.random::<f64>());
        let k = kappa_euclidean(&x, &DistanceMetric::Custom(Matrix::zeros(2, 2))).unwrap();
        assert!(k.entries().as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn crossprod_examples() {
        let ones = Matrix::from_fn(4, 1, |_, _| 1.0);
        let k = kappa_crossprod(&ones).unwrap();
        assert!(k.entries().as_slice().iter().all(|&v| v == 1.0));

        let x = Matrix::from_rows(&[vec![-1.0], vec![1.0]]).unwrap();
        let k = kappa_crossprod(&x).unwrap();
        assert_eq!(k.entries().as_slice(), &[1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn crossprod_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Matrix::from_fn(40, 4, |_, _| rng.random::<f64>());
        let k = kappa_crossprod(&x).unwrap();
        let ev = sym_eigenvalues(k.entries()).unwrap();
        assert!(ev.iter().all(|&v| v >= -1e-10));
    }

    #[test]
    fn ibs_examples() {
        let k = kappa_ibs(&[vec![1.0, 1.0, 0.0], vec![2.0, 2.0, 2.0]]).unwrap();
        assert_eq!(k.get(0, 1), 1.0);
        let k = kappa_ibs(&[vec![0.0, 2.0], vec![0.0, 2.0]]).unwrap();
        assert_eq!(k.get(0, 1), 0.0);
        assert!(kappa_ibs(&[vec![0.0, f64::NAN, 1.0]]).is_err());
    }

    #[test]
    fn ibs_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (n, q) = (20, 50);
        let markers: Vec<Vec<f64>> = (0..q).map(|_| random_dosages(&mut rng, n)).collect();
        let k = kappa_ibs(&markers).unwrap();
        for i in 0..n {
            for j in 0..n {
                let shared: f64 = markers.iter().map(|m| 2.0 - (m[i] - m[j]).abs()).sum();
                assert_eq!(k.get(i, j), shared / (2.0 * q as f64));
            }
        }
    }

    #[test]
    fn genetic_similarity_examples() {
        let cp = GeneticSimilarity::crossprod(vec![2.0, 2.0, 0.0, 1.0]).unwrap();
        assert_eq!(genetic_similarity(&cp, 0, 1), 4.0);
        assert_eq!(genetic_similarity(&cp, 2, 3), 0.0);
        let m = GeneticSimilarity::matching(vec![1.0, 1.0, 0.0, 2.0]).unwrap();
        assert_eq!(genetic_similarity(&m, 0, 1), 1.0);
        assert_eq!(genetic_similarity(&m, 2, 3), 0.0);
        let ml = GeneticSimilarity::multilocus(vec![
            vec![1.0, 2.0],
            vec![0.0, 1.0],
            vec![2.0, 1.0],
        ])
        .unwrap();
        assert_eq!(genetic_similarity(&ml, 0, 1), 4.0);
        assert!(GeneticSimilarity::new(vec![vec![1.0], vec![2.0]], SimilarityKind::CrossProduct).is_err());
    }

    #[test]
    fn constant_kappa_hwu_equals_nhwu() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = GeneticSimilarity::crossprod(random_dosages(&mut rng, 15)).unwrap();
        let k = KappaMatrix::constant(15, 1.0);
        let a = compose_weight(&k, &g, WeightMode::Hwu).unwrap();
        let b = compose_weight(&k, &g, WeightMode::Nhwu).unwrap();
        assert_eq!(a.entries(), b.entries());
    }

    #[test]
    fn constant_kappa_phwu_is_degenerate() {
        let g = GeneticSimilarity::crossprod(vec![0.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let k = KappaMatrix::constant(5, 0.3);
        assert!(matches!(
            compose_weight(&k, &g, WeightMode::Phwu),
            Err(HwuError::DegenerateWeight(_))
        ));
    }

    #[test]
    fn all_zero_dosage_is_degenerate() {
        let g = GeneticSimilarity::crossprod(vec![0.0; 6]).unwrap();
        let k = KappaMatrix::constant(6, 1.0);
        assert!(compose_weight(&k, &g, WeightMode::Hwu).is_err());
    }

    #[test]
    fn composition_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 25;
        let k = random_kappa(&mut rng, n);
        for kind in [SimilarityKind::CrossProduct, SimilarityKind::Match] {
            let g = GeneticSimilarity::new(vec![random_dosages(&mut rng, n)], kind).unwrap();
            let kbar: f64 = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .map(|(i, j)| k.get(i, j))
                .sum::<f64>()
                / (n * n) as f64;
            for mode in [WeightMode::Hwu, WeightMode::Nhwu, WeightMode::Phwu] {
                let w = compose_weight(&k, &g, mode).unwrap();
                for i in 0..n {
                    assert_eq!(w.entries()[(i, i)], 0.0);
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let f = g.value(i, j);
                        let expect = match mode {
                            WeightMode::Hwu => k.get(i, j) * f,
                            WeightMode::Nhwu => f,
                            WeightMode::Phwu => (k.get(i, j) - kbar) * f,
                        };
                        assert!((w.entries()[(i, j)] - expect).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn kappa_text_round_trip_and_validation() {
        let k = KappaMatrix::parse_text("1 0.5\n0.5 1\n", "mem").unwrap();
        assert_eq!(k.kind(), KappaKind::Precomputed);
        assert_eq!(k.get(0, 1), 0.5);
        assert!(KappaMatrix::parse_text("1 0.5\n0.4 1\n", "mem").is_err());
        let err = KappaMatrix::parse_text("1 0.5\n0.5 x\n", "mem").unwrap_err();
        assert!(matches!(err, HwuError::Parse { line: 2, .. }));
        assert!(KappaMatrix::parse_text("1 0.5 2\n0.5 1\n", "mem").is_err());
    }

    #[test]
    fn mean_imputation_fills_missing() {
        let mut g = vec![0.0, f64::NAN, 2.0, 1.0];
        assert_eq!(impute_mean(&mut g), 1);
        assert_eq!(g[1], 1.0);
    }
}
