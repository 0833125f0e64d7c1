//! Reference tests: GLM likelihood-ratio tests and the variance-component
//! score test.

use faer::linalg::solvers::Solve;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{HwuError, Result};
use crate::matrix::{dot, Matrix};
use crate::quadform::{mixture_from_projected, reduced_projection, tail_pvalue, PValue, PValueMethod, P_FLOOR};
use crate::rank_kernel::{CovariateMatrix, PhenotypeVector};
use crate::weights::KappaMatrix;

pub const IRLS_TOLERANCE: f64 = 1e-8;
pub const IRLS_MAX_ITERATIONS: usize = 50;
/// Linear predictors beyond this magnitude are taken as a sign of separation.
const SEPARATION_ETA: f64 = 15.0;
/// `g` is collinear with `Z` when its residual keeps less than this fraction
/// of its squared norm.
const COLLINEAR_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlmFamily {
    Linear,
    Logistic,
}

impl GlmFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Logistic => "logistic",
        }
    }

    /// Logistic for 0/1 phenotypes, linear otherwise.
    pub fn for_phenotype(y: &PhenotypeVector) -> Self {
        if y.is_binary() {
            Self::Logistic
        } else {
            Self::Linear
        }
    }
}

impl std::str::FromStr for GlmFamily {
    type Err = HwuError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" | "gaussian" => Ok(Self::Linear),
            "logistic" | "binomial" => Ok(Self::Logistic),
            other => Err(HwuError::InvalidParameter(format!("unknown GLM family {other:?}"))),
        }
    }
}

/// Fit summary of one model. For the linear family `deviance` is the
/// residual sum of squares.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    pub coefficients: Vec<f64>,
    pub deviance: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmLrt {
    pub statistic: f64,
    pub p: PValue,
    pub null: GlmFit,
    pub full: Option<GlmFit>,
}

fn chi2_1_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    ChiSquared::new(1.0).expect("df = 1 is valid").sf(x)
}

fn check_lengths(n: usize, found: usize) -> Result<()> {
    if n != found {
        return Err(HwuError::DimensionMismatch { expected: n, found });
    }
    Ok(())
}

fn solve_spd(a: &Matrix, b: &[f64]) -> Option<Vec<f64>> {
    let llt = a.to_faer().llt(faer::Side::Lower).ok()?;
    let rhs = faer::Mat::from_fn(b.len(), 1, |i, _| b[i]);
    let x = llt.solve(&rhs);
    let out: Vec<f64> = (0..b.len()).map(|i| x[(i, 0)]).collect();
    out.iter().all(|v| v.is_finite()).then_some(out)
}

fn with_column(design: &Matrix, g: &[f64]) -> Matrix {
    let k = design.ncols();
    Matrix::from_fn(design.nrows(), k + 1, |i, j| if j < k { design[(i, j)] } else { g[i] })
}

/// Ordinary least squares via the normal equations on the design.
pub fn fit_linear(y: &[f64], x: &Matrix) -> Result<GlmFit> {
    check_lengths(x.nrows(), y.len())?;
    let xt = x.transpose();
    let xtx = xt.matmul(x)?;
    let beta = solve_spd(&xtx, &xt.mul_vec(y))
        .ok_or_else(|| HwuError::SingularFit("design matrix is rank deficient".into()))?;
    let fitted = x.mul_vec(&beta);
    let rss = y.iter().zip(&fitted).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(GlmFit {
        coefficients: beta,
        deviance: rss,
        iterations: 1,
    })
}

fn bernoulli_deviance(y: &[f64], eta: &[f64]) -> f64 {
    // -2 log-likelihood written with log1p(exp(.)) to stay finite for large |eta|
    let ll: f64 = y
        .iter()
        .zip(eta)
        .map(|(&yi, &e)| {
            let log1pexp = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            yi * e - log1pexp
        })
        .sum();
    -2.0 * ll
}

/// Logistic regression by iteratively reweighted least squares.
pub fn fit_logistic(y: &[f64], x: &Matrix) -> Result<GlmFit> {
    check_lengths(x.nrows(), y.len())?;
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(HwuError::InvalidInput("logistic family needs a 0/1 phenotype".into()));
    }
    let (n, p) = (x.nrows(), x.ncols());
    let mut beta = vec![0.0; p];
    let mut eta = vec![0.0; n];
    let mut dev = bernoulli_deviance(y, &eta);
    for it in 1..=IRLS_MAX_ITERATIONS {
        let mut xtwx = Matrix::zeros(p, p);
        let mut xtwz = vec![0.0; p];
        for i in 0..n {
            let mu = 1.0 / (1.0 + (-eta[i]).exp());
            let w = (mu * (1.0 - mu)).max(1e-300);
            let zi = eta[i] + (y[i] - mu) / w;
            let xi = x.row(i);
            for a in 0..p {
                xtwz[a] += w * xi[a] * zi;
                for b in 0..=a {
                    xtwx[(a, b)] += w * xi[a] * xi[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                xtwx[(b, a)] = xtwx[(a, b)];
            }
        }
        beta = solve_spd(&xtwx, &xtwz)
            .ok_or_else(|| HwuError::SingularFit("weighted normal equations are singular".into()))?;
        eta = x.mul_vec(&beta);
        let next = bernoulli_deviance(y, &eta);
        if !next.is_finite() {
            return Err(HwuError::Numerical("deviance became non-finite".into()));
        }
        let delta = (next - dev).abs();
        dev = next;
        if delta < IRLS_TOLERANCE {
            let top = eta.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            if top > SEPARATION_ETA {
                return Err(HwuError::NonConvergence {
                    iterations: it,
                    reason: format!("linear predictor reached {top:.1}; the outcome is separated"),
                });
            }
            return Ok(GlmFit {
                coefficients: beta,
                deviance: dev,
                iterations: it,
            });
        }
    }
    Err(HwuError::NonConvergence {
        iterations: IRLS_MAX_ITERATIONS,
        reason: format!("deviance still changing after {IRLS_MAX_ITERATIONS} iterations"),
    })
}

fn fit(y: &[f64], x: &Matrix, family: GlmFamily) -> Result<GlmFit> {
    match family {
        GlmFamily::Linear => fit_linear(y, x),
        GlmFamily::Logistic => fit_logistic(y, x),
    }
}

/// Likelihood-ratio test of `g` given `Z`, with the fits.
pub fn glm_lrt_detail(
    y: &PhenotypeVector,
    g: &[f64],
    z: &CovariateMatrix,
    family: GlmFamily,
) -> Result<GlmLrt> {
    let n = y.len();
    check_lengths(n, g.len())?;
    check_lengths(n, z.n())?;
    let yv = y.values();
    let null = fit(yv, z.design(), family)?;
    if g.iter().all(|&v| v == 0.0) {
        return Ok(GlmLrt {
            statistic: 0.0,
            p: PValue::new(1.0, PValueMethod::Analytic),
            null,
            full: None,
        });
    }
    let g_norm: f64 = dot(g, g);
    let g_res = z.residualize(g);
    if dot(&g_res, &g_res) <= COLLINEAR_TOL * g_norm {
        return Err(HwuError::SingularFit(
            "genotype is collinear with the covariates".into(),
        ));
    }
    let full = fit(yv, &with_column(z.design(), g), family)?;
    let statistic = match family {
        GlmFamily::Linear => {
            if !(full.deviance > 0.0) {
                return Err(HwuError::DegeneratePhenotype);
            }
            n as f64 * (null.deviance / full.deviance).ln()
        }
        GlmFamily::Logistic => null.deviance - full.deviance,
    }
    .max(0.0);
    Ok(GlmLrt {
        statistic,
        p: PValue::new(chi2_1_sf(statistic).clamp(P_FLOOR, 1.0), PValueMethod::Analytic),
        null,
        full: Some(full),
    })
}

pub fn glm_lrt(y: &PhenotypeVector, g: &[f64], z: &CovariateMatrix, family: GlmFamily) -> Result<PValue> {
    Ok(glm_lrt_detail(y, g, z, family)?.p)
}

/// `T = Y'GKGY` on residuals of the Gaussian null fit scaled to unit
/// variance, referred to the mixture of `(I - P) GKG (I - P)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VcScore {
    pub statistic: f64,
    pub p: PValue,
}

pub fn vc_score_detail(
    y: &PhenotypeVector,
    g: &[f64],
    z: &CovariateMatrix,
    kappa: &KappaMatrix,
) -> Result<VcScore> {
    let n = y.len();
    check_lengths(n, g.len())?;
    check_lengths(n, z.n())?;
    check_lengths(n, kappa.n())?;
    if g.iter().all(|&v| v == 0.0) {
        return Ok(VcScore {
            statistic: 0.0,
            p: PValue::new(1.0, PValueMethod::Analytic),
        });
    }
    let resid = z.residualize(y.values());
    let rss: f64 = dot(&resid, &resid);
    let dof = z.residual_dof();
    let ss_y: f64 = dot(y.values(), y.values());
    if dof == 0 || !(rss > 1e-20 * ss_y.max(f64::MIN_POSITIVE)) {
        return Err(HwuError::DegeneratePhenotype);
    }
    let sigma = (rss / dof as f64).sqrt();
    let yt: Vec<f64> = resid.iter().map(|r| r / sigma).collect();

    let k = kappa.entries();
    let a = Matrix::from_fn(n, n, |i, j| g[i] * k[(i, j)] * g[j]);
    if a.max_abs() == 0.0 {
        return Err(HwuError::DegenerateWeight("G K G is identically zero".into()));
    }
    let gy: Vec<f64> = g.iter().zip(&yt).map(|(a, b)| a * b).collect();
    let statistic = k.quadratic_form(&gy);
    let mix = mixture_from_projected(&reduced_projection(&a, z)?)?;
    Ok(VcScore {
        statistic,
        p: tail_pvalue(&mix, statistic)?,
    })
}

pub fn vc_score_test(
    y: &PhenotypeVector,
    g: &[f64],
    z: &CovariateMatrix,
    kappa: &KappaMatrix,
) -> Result<PValue> {
    Ok(vc_score_detail(y, g, z, kappa)?.p)
}
