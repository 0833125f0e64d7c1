//! Null distribution of the weighted U statistic: a weighted sum of
//! independent chi-square(1) variables whose weights are the eigenvalues of
//! the covariate-projected weight matrix.

mod davies;
mod moments;

use std::fmt;

pub use davies::{davies_cdf, DaviesFault, DaviesOutput};
pub use moments::{mixture_cumulants, moment_match_tail};

use crate::error::{HwuError, Result};
use crate::matrix::{dot, Matrix};
use crate::rank_kernel::CovariateMatrix;
use crate::weights::WeightMatrix;

/// Target absolute accuracy of the characteristic-function inversion.
pub const DAVIES_ACCURACY: f64 = 1e-9;
/// Upper bound on integration terms (and error-bound evaluations).
pub const DAVIES_TERM_LIMIT: usize = 10_000_000;
/// Smallest reportable p-value.
pub const P_FLOOR: f64 = 1e-16;
/// Eigenvalues below this fraction of the largest magnitude are discarded.
pub const EIGEN_REL_CUTOFF: f64 = 1e-10;

/// Coefficients `lambda_s` of `sum_s lambda_s chi2_1`, sorted descending.
#[derive(Debug, Clone, PartialEq)]
pub struct ChiSquareMixture {
    lambdas: Vec<f64>,
}

impl ChiSquareMixture {
    pub fn new(mut lambdas: Vec<f64>) -> Result<Self> {
        if lambdas.iter().any(|l| !l.is_finite()) {
            return Err(HwuError::InvalidInput("mixture coefficients must be finite".into()));
        }
        if lambdas.iter().all(|&l| l == 0.0) {
            return Err(HwuError::DegenerateWeight(
                "mixture has no non-zero coefficient".into(),
            ));
        }
        lambdas.sort_by(|a, b| b.total_cmp(a));
        Ok(Self { lambdas })
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    /// Mixture with every coefficient multiplied by `c > 0`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            lambdas: self.lambdas.iter().map(|l| l * c).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.lambdas.iter().sum()
    }

    pub fn variance(&self) -> f64 {
        2.0 * self.lambdas.iter().map(|l| l * l).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PValueMethod {
    Davies,
    MomentMatch,
    Permutation,
    /// Closed form (likelihood-ratio chi-square, or a degenerate statistic).
    Analytic,
}

impl PValueMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            PValueMethod::Davies => "davies",
            PValueMethod::MomentMatch => "moment_match",
            PValueMethod::Permutation => "permutation",
            PValueMethod::Analytic => "analytic",
        }
    }
}

impl fmt::Display for PValueMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Why an inversion result was not trusted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PValueFault {
    Integration(DaviesFault),
    /// The raw tail probability left `[0, 1]` by more than `1e-6`.
    OutOfRange(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PValue {
    pub value: f64,
    pub method: PValueMethod,
    pub fault: Option<PValueFault>,
}

impl PValue {
    pub fn new(value: f64, method: PValueMethod) -> Self {
        Self {
            value,
            method,
            fault: None,
        }
    }
}

/// All eigenvalues of a symmetric matrix, in descending order. The input is
/// symmetrized as `(M + M') / 2` first.
pub fn sym_eigenvalues(m: &Matrix) -> Result<Vec<f64>> {
    if !m.is_square() {
        return Err(HwuError::InvalidInput("eigenvalues need a square matrix".into()));
    }
    if !m.is_finite() {
        return Err(HwuError::InvalidInput("matrix has non-finite entries".into()));
    }
    let n = m.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let a = faer::Mat::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    let mut ev = a
        .self_adjoint_eigenvalues(faer::Side::Lower)
        .map_err(|e| HwuError::Numerical(format!("eigensolver failed: {e:?}")))?;
    ev.reverse();

    let sum: f64 = ev.iter().sum();
    let abs_sum: f64 = ev.iter().map(|v| v.abs()).sum();
    if (sum - m.trace()).abs() > 1e-8 * abs_sum.max(1.0) {
        return Err(HwuError::Numerical(format!(
            "eigenvalue sum {sum} disagrees with trace {}",
            m.trace()
        )));
    }
    Ok(ev)
}

/// `(I - P) W (I - P)` formed through the orthonormal basis `Q` of the
/// covariate span: `W - Q M' - M Q' + Q (Q'M) Q'` with `M = W Q`.
pub fn project_weight(w: &Matrix, z: &CovariateMatrix) -> Result<Matrix> {
    let n = w.nrows();
    if z.n() != n {
        return Err(HwuError::DimensionMismatch {
            expected: n,
            found: z.n(),
        });
    }
    let q = z.basis();
    let m = w.matmul(q)?;
    let c = q.transpose().matmul(&m)?;
    let qc = q.matmul(&c)?;
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        let qi = q.row(i);
        let mi = m.row(i);
        let qci = qc.row(i);
        let wi = w.row(i);
        let ai = a.row_mut(i);
        for j in 0..n {
            ai[j] = wi[j] - dot(qi, m.row(j)) - dot(mi, q.row(j)) + dot(qci, q.row(j));
        }
    }
    // exact symmetry for the eigensolver
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    Ok(a)
}

/// Drops eigenvalues whose magnitude is below `EIGEN_REL_CUTOFF` times the
/// largest one.
pub fn truncate_eigenvalues(ev: &[f64]) -> Vec<f64> {
    let top = ev.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if top == 0.0 {
        return Vec::new();
    }
    ev.iter()
        .copied()
        .filter(|v| v.abs() >= EIGEN_REL_CUTOFF * top)
        .collect()
}

/// Eigenvalue mixture of an already projected symmetric matrix.
pub fn mixture_from_projected(a: &Matrix) -> Result<ChiSquareMixture> {
    let ev = truncate_eigenvalues(&sym_eigenvalues(a)?);
    if ev.is_empty() {
        return Err(HwuError::DegenerateWeight(
            "projected weight matrix has no non-negligible eigenvalue".into(),
        ));
    }
    ChiSquareMixture::new(ev)
}

/// Indices of rows of `w` holding at least one nonzero entry.
fn support(w: &Matrix) -> Vec<usize> {
    (0..w.nrows())
        .filter(|&i| w.row(i).iter().any(|&v| v != 0.0))
        .collect()
}

/// A symmetric matrix with the same nonzero spectrum as `(I - P) W (I - P)`,
/// of the size of the support `S` of `W`.
///
/// The nonzero eigenvalues of `(I - P) W (I - P)` are those of `W_SS M` with
/// `M = I - Q_S Q_S'`, hence of `M^(1/2) W_SS M^(1/2)`. Writing
/// `Q_S'Q_S = V diag(s) V'`, the root is `I - Q_S H Q_S'` with
/// `H = V diag(1 / (1 + sqrt(1 - s))) V'`.
pub fn reduced_projection(w: &Matrix, z: &CovariateMatrix) -> Result<Matrix> {
    let n = w.nrows();
    if !w.is_square() || z.n() != n {
        return Err(HwuError::DimensionMismatch {
            expected: n,
            found: z.n(),
        });
    }
    let idx = support(w);
    let m = idx.len();
    let k = z.n_columns();
    let basis = z.basis();
    let qs = Matrix::from_fn(m, k, |i, j| basis[(idx[i], j)]);
    let gram = qs.transpose().matmul(&qs)?;
    let evd = gram
        .to_faer()
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| HwuError::Numerical(format!("eigensolver failed: {e:?}")))?;
    let (v, sv) = (evd.U(), evd.S().column_vector());
    let h = Matrix::from_fn(k, k, |a, b| {
        (0..k)
            .map(|c| {
                let s = sv[c].clamp(0.0, 1.0);
                v[(a, c)] * v[(b, c)] / (1.0 + (1.0 - s).sqrt())
            })
            .sum()
    });
    let t = qs.matmul(&h)?;

    let wss = w.select_symmetric(&idx);
    let mq = wss.matmul(&qs)?;
    let c = qs.transpose().matmul(&mq)?;
    let tc = t.matmul(&c)?;
    let mut a = Matrix::zeros(m, m);
    for i in 0..m {
        let (ti, mi, tci, wi) = (t.row(i), mq.row(i), tc.row(i), wss.row(i));
        let ai = a.row_mut(i);
        for j in 0..m {
            ai[j] = wi[j] - dot(ti, mq.row(j)) - dot(mi, t.row(j)) + dot(tci, t.row(j));
        }
    }
    for i in 0..m {
        for j in 0..i {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    Ok(a)
}

/// Null mixture of the weighted U: nonzero eigenvalues of
/// `(I - P) W (I - P)`, computed on the support of `W`.
pub fn null_mixture(w: &WeightMatrix, z: &CovariateMatrix) -> Result<ChiSquareMixture> {
    mixture_from_projected(&reduced_projection(w.entries(), z)?)
}

/// `P(Q > q)` by characteristic-function inversion. Faults are reported,
/// not corrected; see [`tail_pvalue`] for the fallback.
pub fn davies_pvalue(mix: &ChiSquareMixture, q: f64) -> PValue {
    let out = davies_cdf(mix.lambdas(), q, DAVIES_TERM_LIMIT, DAVIES_ACCURACY);
    let raw = 1.0 - out.cdf;
    let fault = match out.fault {
        Some(f) => Some(PValueFault::Integration(f)),
        None if !(-1e-6..=1.0 + 1e-6).contains(&raw) => Some(PValueFault::OutOfRange(raw)),
        None => None,
    };
    PValue {
        value: raw.clamp(P_FLOOR, 1.0),
        method: PValueMethod::Davies,
        fault,
    }
}

/// Three-cumulant scaled chi-square approximation of `P(Q > q)`.
pub fn moment_match_pvalue(mix: &ChiSquareMixture, q: f64) -> Result<PValue> {
    let p = moment_match_tail(mix.lambdas(), q)?;
    Ok(PValue::new(p.clamp(P_FLOOR, 1.0), PValueMethod::MomentMatch))
}

/// Davies inversion, falling back to moment matching when the inversion
/// reports a fault. The fallback result keeps the original fault for
/// diagnostics.
pub fn tail_pvalue(mix: &ChiSquareMixture, q: f64) -> Result<PValue> {
    let p = davies_pvalue(mix, q);
    match p.fault {
        None => Ok(p),
        Some(fault) => {
            let mut mm = moment_match_pvalue(mix, q)?;
            mm.fault = Some(fault);
            Ok(mm)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn mix(l: &[f64]) -> ChiSquareMixture {
        ChiSquareMixture::new(l.to_vec()).unwrap()
    }

    /// Cyclic Jacobi rotations: an eigenvalue path independent of faer.
    fn jacobi_eigenvalues(m: &Matrix) -> Vec<f64> {
        let n = m.nrows();
        let mut a = m.clone();
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[(i, j)] * a[(i, j)])
                .sum();
            if off < 1e-26 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }

    fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v: f64 = rng.random::<f64>() * 2.0 - 1.0;
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    #[test]
    fn eigenvalue_closed_forms() {
        let ev = sym_eigenvalues(&Matrix::identity(3)).unwrap();
        for v in ev {
            assert!((v - 1.0).abs() < 1e-14);
        }
        let m = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let ev = sym_eigenvalues(&m).unwrap();
        assert!((ev[0] - 1.0).abs() < 1e-14 && (ev[1] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn eigenvalue_trace_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let m = random_symmetric(&mut rng, 50);
        let ev = sym_eigenvalues(&m).unwrap();
        assert!(ev.windows(2).all(|w| w[0] >= w[1]));
        let s1: f64 = ev.iter().sum();
        let s2: f64 = ev.iter().map(|v| v * v).sum();
        assert!((s1 - m.trace()).abs() < 1e-8 * m.trace().abs().max(1.0));
        assert!((s2 - m.frobenius_norm_sq()).abs() < 1e-8 * m.frobenius_norm_sq());
    }

    #[test]
    fn non_finite_matrix_rejected() {
        let m = Matrix::from_rows(&[vec![1.0, f64::NAN], vec![f64::NAN, 1.0]]).unwrap();
        assert!(matches!(sym_eigenvalues(&m), Err(HwuError::InvalidInput(_))));
    }

    #[test]
    fn constant_weight_gives_repeated_negative_eigenvalue() {
        let n = 8;
        let c = 0.7;
        let w = WeightMatrix::from_matrix(
            Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { c }),
            crate::weights::WeightMode::Nhwu,
        )
        .unwrap();
        let z = CovariateMatrix::intercept_only(n).unwrap();
        let m = null_mixture(&w, &z).unwrap();
        assert_eq!(m.len(), n - 1);
        for l in m.lambdas() {
            assert!((l + c).abs() < 1e-12);
        }
    }

    #[test]
    fn projected_mixture_matches_jacobi_on_explicit_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 30;
        let mut wm = random_symmetric(&mut rng, n);
        for i in 0..n {
            wm[(i, i)] = 0.0;
        }
        let w = WeightMatrix::from_matrix(wm.clone(), crate::weights::WeightMode::Hwu).unwrap();
        let covs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..n).map(|_| rng.random::<f64>()).collect())
            .collect();
        let z = CovariateMatrix::with_covariates(n, &covs).unwrap();
        let mix = null_mixture(&w, &z).unwrap();

        // explicit P = Z (Z'Z)^{-1} Z' via the design's own normal equations
        let zd = z.design();
        let ztz = zd.transpose().matmul(zd).unwrap();
        let inv = {
            let k = ztz.nrows();
            use faer::linalg::solvers::DenseSolveCore;
            let f = ztz.to_faer();
            let inv = f.llt(faer::Side::Lower).unwrap().inverse();
            Matrix::from_fn(k, k, |i, j| inv[(i, j)])
        };
        let p = zd.matmul(&inv).unwrap().matmul(&zd.transpose()).unwrap();
        let i_p = Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } - p[(i, j)]);
        let a = i_p.matmul(&wm).unwrap().matmul(&i_p).unwrap();
        let oracle = truncate_eigenvalues(&jacobi_eigenvalues(&a));
        assert_eq!(oracle.len(), mix.len());
        for (x, y) in oracle.iter().zip(mix.lambdas()) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
        // sum lambda = -trace(P W)
        let ptr = p.matmul(&wm).unwrap().trace();
        assert!((mix.mean() + ptr).abs() < 1e-8);
    }

    #[test]
    fn support_reduction_keeps_the_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 40;
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(0..3) as f64).collect();
        let base = random_symmetric(&mut rng, n);
        let wm = Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { base[(i, j)] * g[i] * g[j] });
        let covs: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..n).map(|_| rng.random::<f64>()).collect())
            .collect();
        for z in [
            CovariateMatrix::intercept_only(n).unwrap(),
            CovariateMatrix::with_covariates(n, &covs).unwrap(),
        ] {
            let reduced = reduced_projection(&wm, &z).unwrap();
            assert_eq!(reduced.nrows(), g.iter().filter(|&&v| v != 0.0).count());
            let full = truncate_eigenvalues(&jacobi_eigenvalues(&project_weight(&wm, &z).unwrap()));
            let small = truncate_eigenvalues(&jacobi_eigenvalues(&reduced));
            assert_eq!(full.len(), small.len());
            for (x, y) in full.iter().zip(&small) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn closed_form_tails() {
        let p = davies_pvalue(&mix(&[1.0]), 3.841459);
        assert!((p.value - 0.05).abs() < 1e-4);
        assert_eq!(p.method, PValueMethod::Davies);
        let p = davies_pvalue(&mix(&[0.5, 0.5]), 3.0);
        assert!((p.value - 0.0497871).abs() < 1e-6);
        let p = davies_pvalue(&mix(&[1.0, -1.0]), 0.0);
        assert!((p.value - 0.5).abs() < 1e-6);
    }

    #[test]
    fn davies_matches_monte_carlo() {
        let lambdas = [2.3, 1.1, 0.4, -0.2];
        let q = 5.0;
        let draws = 10_000_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut hits = 0usize;
        for _ in 0..draws {
            let s: f64 = lambdas
                .iter()
                .map(|l| {
                    let z: f64 = rng.sample(StandardNormal);
                    l * z * z
                })
                .sum();
            if s > q {
                hits += 1;
            }
        }
        let p_mc = hits as f64 / draws as f64;
        let se = (p_mc * (1.0 - p_mc) / draws as f64).sqrt();
        let p = davies_pvalue(&mix(&lambdas), q);
        assert!(p.fault.is_none());
        assert!((p.value - p_mc).abs() < 3.0 * se, "{} vs {p_mc} (se {se})", p.value);
    }

    #[test]
    fn moment_match_close_to_exponential() {
        let p = moment_match_pvalue(&mix(&[0.5, 0.5]), 3.0).unwrap();
        assert!((p.value - (-3.0f64).exp()).abs() < 5e-3);
        assert_eq!(p.method, PValueMethod::MomentMatch);
    }

    #[test]
    fn moment_match_near_nominal_at_simulated_quantile() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let lambdas: Vec<f64> = (0..20).map(|_| rng.random::<f64>() * 2.0 + 0.05).collect();
        let draws = 200_000;
        let mut sims: Vec<f64> = (0..draws)
            .map(|_| {
                lambdas
                    .iter()
                    .map(|l| {
                        let z: f64 = rng.sample(StandardNormal);
                        l * z * z
                    })
                    .sum()
            })
            .collect();
        sims.sort_by(|a, b| a.total_cmp(b));
        let q95 = sims[(0.95 * draws as f64) as usize];
        let p = moment_match_pvalue(&mix(&lambdas), q95).unwrap();
        assert!((0.03..=0.07).contains(&p.value), "{}", p.value);
    }

    #[test]
    fn tail_is_monotone_and_scale_invariant() {
        let m = mix(&[3.0, 1.5, 0.7, 0.2, -0.4]);
        let mut last = 1.0;
        for k in 0..60 {
            let q = -2.0 + k as f64 * 0.5;
            let p = davies_pvalue(&m, q).value;
            assert!(p <= last + 1e-9, "q={q}: {p} > {last}");
            last = p;
            let scaled = davies_pvalue(&m.scaled(3.7), 3.7 * q).value;
            assert!((scaled - p).abs() < 1e-8);
        }
    }

    #[test]
    fn positive_mixture_limits() {
        let m = mix(&[1.0, 0.5, 0.25]);
        assert!(davies_pvalue(&m, 1e-6).value > 0.999);
        assert!(davies_pvalue(&m, 200.0).value < 1e-12);
    }

    #[test]
    fn davies_and_moment_match_agree_on_positive_mixtures() {
        // the three-cumulant fit is tight in the upper tail but drifts by a
        // few hundredths in the body and lower tail
        let mut worst_tail = 0.0_f64;
        let mut worst_all = 0.0_f64;
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..20 {
                let m = mix(&(0..10).map(|_| rng.random::<f64>() + 0.01).collect::<Vec<_>>());
                for k in 1..40 {
                    let q = m.mean() * k as f64 / 10.0;
                    let p = davies_pvalue(&m, q).value;
                    if (0.01..=0.99).contains(&p) {
                        let d = (p - moment_match_pvalue(&m, q).unwrap().value).abs();
                        worst_all = worst_all.max(d);
                        if p <= 0.10 {
                            worst_tail = worst_tail.max(d);
                        }
                    }
                }
            }
        }
        assert!(worst_tail < 0.01, "upper tail {worst_tail}");
        assert!(worst_all < 0.06, "overall {worst_all}");
    }

    #[test]
    fn zero_mixture_rejected() {
        assert!(ChiSquareMixture::new(vec![0.0, 0.0]).is_err());
        let m = mix(&[0.1, 2.0, -1.0]);
        assert_eq!(m.lambdas(), &[2.0, 0.1, -1.0]);
    }
}
