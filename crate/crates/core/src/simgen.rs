//! Simulated datasets with latent subpopulation structure, and Monte Carlo
//! rejection-rate estimation for HWU and the reference tests.
//!
//! Constants the generators need but that are not pinned down elsewhere are
//! fixed here: minor allele frequency 0.3, intercept 0 (prevalence 0.5 for
//! binary phenotypes), covariate noise sd 0.5, two-population centers -1 and
//! +1, twenty-population centers drawn once from N(0, 1) with
//! [`DEFAULT_CENTER_SEED`], and covariate effect 0.5 for the observed
//! covariate of the non-normal scenario.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Cauchy, Distribution, StandardNormal, StudentT};
use rayon::prelude::*;

use crate::comparators::{glm_lrt, vc_score_test, GlmFamily};
use crate::engine::{asymptotic_test_scores, prepare_phenotype};
use crate::error::{HwuError, Result};
use crate::matrix::Matrix;
use crate::rank_kernel::{CovariateMatrix, PhenotypeVector, StandardizedScores};
use crate::weights::{
    compose_weight, kappa_crossprod, kappa_euclidean, DistanceMetric, GeneticSimilarity,
    KappaMatrix, WeightMode,
};

pub const DEFAULT_MAF: f64 = 0.3;
pub const DEFAULT_SIGMA_C: f64 = 0.5;
pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_CENTER_SEED: u64 = 0x4857_5500_0000_0014;
pub const TWO_POP_CENTERS: [f64; 2] = [-1.0, 1.0];
pub const MULTI_POP_SUBPOPS: usize = 20;
pub const MULTI_POP_COVARIATES: usize = 25;
pub const MIN_REPLICATES: usize = 100;

/// Dosages drawn independently as Binomial(2, maf).
pub fn gen_genotypes(n: usize, maf: f64, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_genotypes(&mut rng, n, maf)
}

fn sample_genotypes<R: Rng>(rng: &mut R, n: usize, maf: f64) -> Result<Vec<f64>> {
    if !(maf > 0.0 && maf <= 0.5) {
        return Err(HwuError::InvalidParameter(format!("maf {maf} outside (0, 0.5]")));
    }
    let b = Binomial::new(2, maf).map_err(|e| HwuError::InvalidParameter(e.to_string()))?;
    Ok((0..n).map(|_| b.sample(rng) as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Two subpopulations, one noisy covariate marking membership.
    TwoPop,
    /// Twenty subpopulations, 25 covariates, effects uniform per subpopulation.
    MultiPop,
    /// Heavy-tailed or skewed errors and an observed covariate that may be
    /// correlated with the genotype.
    NonNormal,
    /// Per-subject effects correlated through a background kernel.
    RandomEffect,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::TwoPop => "two_pop",
            Self::MultiPop => "multi_pop",
            Self::NonNormal => "nonnormal",
            Self::RandomEffect => "random_effect",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = HwuError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "two_pop" | "twopop" | "1" | "i" => Ok(Self::TwoPop),
            "multi_pop" | "multipop" | "2" | "ii" => Ok(Self::MultiPop),
            "nonnormal" | "non_normal" | "3" | "iii" => Ok(Self::NonNormal),
            "random_effect" | "randomeffect" => Ok(Self::RandomEffect),
            other => Err(HwuError::InvalidParameter(format!("unknown scenario {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhenotypeKind {
    Binary,
    Continuous,
}

impl FromStr for PhenotypeKind {
    type Err = HwuError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "binary" => Ok(Self::Binary),
            "continuous" => Ok(Self::Continuous),
            other => Err(HwuError::InvalidParameter(format!("unknown phenotype kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ErrorDist {
    Normal,
    StudentT(f64),
    Cauchy,
    /// `a * chi2_1 + (1 - a) * N(5, 1)` with `a ~ Bernoulli(0.6)`.
    NormalChisqMixture,
}

impl ErrorDist {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::Normal => rng.sample(StandardNormal),
            Self::StudentT(df) => StudentT::new(df).expect("validated df").sample(rng),
            Self::Cauchy => Cauchy::new(0.0, 1.0).expect("unit scale").sample(rng),
            Self::NormalChisqMixture => {
                if rng.random_bool(0.6) {
                    let z: f64 = rng.sample(StandardNormal);
                    z * z
                } else {
                    5.0 + rng.sample::<f64, _>(StandardNormal)
                }
            }
        }
    }
}

impl fmt::Display for ErrorDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Normal => f.write_str("normal"),
            Self::StudentT(df) => write!(f, "t{df}"),
            Self::Cauchy => f.write_str("cauchy"),
            Self::NormalChisqMixture => f.write_str("mixture"),
        }
    }
}

impl FromStr for ErrorDist {
    type Err = HwuError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "normal" => Ok(Self::Normal),
            "cauchy" => Ok(Self::Cauchy),
            "mixture" | "normal_chisq_mixture" => Ok(Self::NormalChisqMixture),
            _ => {
                let df = s
                    .strip_prefix("t(")
                    .and_then(|r| r.strip_suffix(')'))
                    .or_else(|| s.strip_prefix('t'))
                    .and_then(|d| d.parse::<f64>().ok())
                    .ok_or_else(|| HwuError::InvalidParameter(format!("unknown error distribution {s:?}")))?;
                if !(df > 0.0) {
                    return Err(HwuError::InvalidParameter("t degrees of freedom must be positive".into()));
                }
                Ok(Self::StudentT(df))
            }
        }
    }
}

/// Genetic effects.
#[derive(Debug, Clone, PartialEq)]
pub enum BetaSpec {
    /// One effect per subpopulation.
    Fixed(Vec<f64>),
    /// Per-subpopulation effects from a uniform with this mean and sd,
    /// redrawn for every replicate.
    Uniform { mu: f64, sigma: f64 },
    /// Per-subject effects `N(mu, sigma^2 kappa)` with the true background
    /// kernel as correlation.
    Kernel { mu: f64, sigma: f64 },
}

impl BetaSpec {
    pub fn is_null(&self) -> bool {
        match self {
            Self::Fixed(b) => b.iter().all(|&v| v == 0.0),
            Self::Uniform { mu, sigma } | Self::Kernel { mu, sigma } => *mu == 0.0 && *sigma == 0.0,
        }
    }
}

impl fmt::Display for BetaSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Fixed(b) => {
                let parts: Vec<String> = b.iter().map(|v| v.to_string()).collect();
                write!(f, "fixed:{}", parts.join(","))
            }
            Self::Uniform { mu, sigma } => write!(f, "uniform:{mu},{sigma}"),
            Self::Kernel { mu, sigma } => write!(f, "kernel:{mu},{sigma}"),
        }
    }
}

impl FromStr for BetaSpec {
    type Err = HwuError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || HwuError::InvalidParameter(format!("cannot parse beta spec {s:?}"));
        let (kind, rest) = s.trim().split_once(':').ok_or_else(bad)?;
        let values: Vec<f64> = rest
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        match kind.trim().to_ascii_lowercase().as_str() {
            "fixed" => Ok(Self::Fixed(values)),
            "uniform" | "kernel" if values.len() == 2 => {
                let (mu, sigma) = (values[0], values[1]);
                if !(sigma >= 0.0) {
                    return Err(HwuError::InvalidParameter("sigma_beta must be >= 0".into()));
                }
                Ok(if kind.trim().eq_ignore_ascii_case("uniform") {
                    Self::Uniform { mu, sigma }
                } else {
                    Self::Kernel { mu, sigma }
                })
            }
            _ => Err(bad()),
        }
    }
}

/// Background kernel family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelChoice {
    Euclidean,
    CrossProduct,
}

impl KernelChoice {
    pub fn other(self) -> Self {
        match self {
            Self::Euclidean => Self::CrossProduct,
            Self::CrossProduct => Self::Euclidean,
        }
    }

    pub fn build(self, x: &Matrix) -> Result<KappaMatrix> {
        match self {
            Self::Euclidean => kappa_euclidean(x, &DistanceMetric::ScaledIdentity),
            Self::CrossProduct => kappa_crossprod(x),
        }
    }
}

impl FromStr for KernelChoice {
    type Err = HwuError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "euclidean" => Ok(Self::Euclidean),
            "crossprod" | "cross_product" => Ok(Self::CrossProduct),
            other => Err(HwuError::InvalidParameter(format!("unknown kernel {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub n_subpop: usize,
    pub betas: BetaSpec,
    pub maf: f64,
    pub phenotype_kind: PhenotypeKind,
    pub error_dist: ErrorDist,
    pub sigma_c: f64,
    pub n_covariates: usize,
    pub confounding: bool,
    /// Intercept `mu` of the linear predictor.
    pub intercept: f64,
    /// Effect of the observed covariate (non-normal scenario).
    pub alpha: f64,
    /// Kernel through which per-subject effects are correlated, and the one
    /// HWU uses by default.
    pub true_kernel: KernelChoice,
    pub center_seed: u64,
    pub seed: u64,
}

impl SimulationConfig {
    fn base(scenario: Scenario, n: usize, n_subpop: usize, n_covariates: usize, betas: BetaSpec) -> Self {
        Self {
            scenario,
            n,
            n_subpop,
            betas,
            maf: DEFAULT_MAF,
            phenotype_kind: PhenotypeKind::Continuous,
            error_dist: ErrorDist::Normal,
            sigma_c: DEFAULT_SIGMA_C,
            n_covariates,
            confounding: false,
            intercept: 0.0,
            alpha: DEFAULT_ALPHA,
            true_kernel: KernelChoice::Euclidean,
            center_seed: DEFAULT_CENTER_SEED,
            seed: 1,
        }
    }

    /// Two equal subpopulations with effects `(b1, b2)`.
    pub fn two_pop(kind: PhenotypeKind, b1: f64, b2: f64) -> Self {
        Self {
            phenotype_kind: kind,
            ..Self::base(Scenario::TwoPop, 1000, 2, 1, BetaSpec::Fixed(vec![b1, b2]))
        }
    }

    /// Twenty subpopulations with uniform effects.
    pub fn multi_pop(kind: PhenotypeKind, mu_beta: f64, sigma_beta: f64) -> Self {
        Self {
            phenotype_kind: kind,
            ..Self::base(
                Scenario::MultiPop,
                1000,
                MULTI_POP_SUBPOPS,
                MULTI_POP_COVARIATES,
                BetaSpec::Uniform {
                    mu: mu_beta,
                    sigma: sigma_beta,
                },
            )
        }
    }

    /// Null data with non-normal errors, optional
    /// confounding through the observed covariate.
    pub fn nonnormal(error_dist: ErrorDist, confounding: bool) -> Self {
        Self {
            error_dist,
            confounding,
            ..Self::base(
                Scenario::NonNormal,
                500,
                MULTI_POP_SUBPOPS,
                MULTI_POP_COVARIATES,
                BetaSpec::Fixed(vec![0.0; MULTI_POP_SUBPOPS]),
            )
        }
    }

    /// Per-subject effects correlated through `true_kernel`, t(2) errors.
    pub fn random_effect(true_kernel: KernelChoice, mu_beta: f64, sigma_beta: f64) -> Self {
        Self {
            true_kernel,
            error_dist: ErrorDist::StudentT(2.0),
            ..Self::base(
                Scenario::RandomEffect,
                500,
                MULTI_POP_SUBPOPS,
                MULTI_POP_COVARIATES,
                BetaSpec::Kernel {
                    mu: mu_beta,
                    sigma: sigma_beta,
                },
            )
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn with_n(self, n: usize) -> Self {
        Self { n, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HwuError::InvalidParameter(m));
        if self.n < 10 {
            return bad(format!("n = {} is below 10", self.n));
        }
        if !(self.maf > 0.0 && self.maf <= 0.5) {
            return bad(format!("maf {} outside (0, 0.5]", self.maf));
        }
        if !(self.sigma_c > 0.0) {
            return bad("sigma_c must be positive".into());
        }
        if self.n_subpop == 0 || self.n_subpop > self.n {
            return bad(format!("cannot split {} subjects into {} subpopulations", self.n, self.n_subpop));
        }
        if self.n_covariates == 0 {
            return bad("need at least one latent covariate".into());
        }
        if let BetaSpec::Fixed(b) = &self.betas {
            if b.len() != self.n_subpop {
                return bad(format!("{} effects for {} subpopulations", b.len(), self.n_subpop));
            }
        }
        match (self.scenario, &self.betas) {
            (Scenario::TwoPop, BetaSpec::Fixed(_)) if self.n_subpop == 2 => {}
            (Scenario::TwoPop, _) => return bad("two_pop needs two fixed effects".into()),
            (Scenario::RandomEffect, BetaSpec::Kernel { .. }) => {}
            (Scenario::RandomEffect, _) | (_, BetaSpec::Kernel { .. }) => {
                return bad("kernel effects go with the random_effect scenario".into())
            }
            _ => {}
        }
        if let ErrorDist::StudentT(df) = self.error_dist {
            if !(df > 0.0) {
                return bad("t degrees of freedom must be positive".into());
            }
        }
        if self.phenotype_kind == PhenotypeKind::Binary
            && matches!(self.scenario, Scenario::NonNormal | Scenario::RandomEffect)
        {
            return bad(format!("{} scenario is continuous only", self.scenario));
        }
        Ok(())
    }

    /// Latent subpopulation centers, `n_subpop x n_covariates`.
    pub fn centers(&self) -> Matrix {
        if self.scenario == Scenario::TwoPop && self.n_covariates == 1 && self.n_subpop == 2 {
            return Matrix::from_fn(2, 1, |i, _| TWO_POP_CENTERS[i]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.center_seed);
        Matrix::from_fn(self.n_subpop, self.n_covariates, |_, _| rng.sample(StandardNormal))
    }

    /// Random stream of replicate `r`.
    pub fn replicate_rng(&self, r: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(r);
        rng
    }
}

/// One simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: PhenotypeVector,
    pub g: Vec<f64>,
    /// Latent-structure covariates, `n x n_covariates`.
    pub x: Matrix,
    /// Observed covariate adjusted for in the analysis (non-normal scenario).
    pub z: Option<Vec<f64>>,
    pub subpop: Vec<usize>,
    /// Effect applied to each subject.
    pub beta: Vec<f64>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.g.len()
    }

    /// Adjustment covariates used when analyzing this dataset.
    pub fn covariates(&self) -> Result<CovariateMatrix> {
        match &self.z {
            Some(z) => CovariateMatrix::with_covariates(self.n(), std::slice::from_ref(z)),
            None => CovariateMatrix::intercept_only(self.n()),
        }
    }
}

fn subpopulations(n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|i| i * k / n).collect()
}

fn latent_covariates<R: Rng>(rng: &mut R, cfg: &SimulationConfig, subpop: &[usize]) -> Matrix {
    let centers = cfg.centers();
    Matrix::from_fn(subpop.len(), cfg.n_covariates, |i, d| {
        centers[(subpop[i], d)] + cfg.sigma_c * rng.sample::<f64, _>(StandardNormal)
    })
}

fn uniform_betas<R: Rng>(rng: &mut R, k: usize, mu: f64, sigma: f64) -> Vec<f64> {
    let half = 3f64.sqrt() * sigma;
    (0..k)
        .map(|_| if half == 0.0 { mu } else { rng.random_range(mu - half..=mu + half) })
        .collect()
}

/// `mu + sigma L e`, with `L L' = kappa` (a small ridge is added when the
/// factorization needs it).
fn kernel_betas<R: Rng>(rng: &mut R, kappa: &KappaMatrix, mu: f64, sigma: f64) -> Result<Vec<f64>> {
    let n = kappa.n();
    if sigma == 0.0 {
        return Ok(vec![mu; n]);
    }
    let base = kappa.entries().to_faer();
    let scale = kappa.entries().max_abs().max(1.0);
    let mut ridge = 0.0;
    let llt = loop {
        let mut a = base.clone();
        for i in 0..n {
            a[(i, i)] += ridge;
        }
        match a.llt(faer::Side::Lower) {
            Ok(f) => break f,
            Err(_) if ridge < 1e-3 * scale => {
                ridge = if ridge == 0.0 { 1e-10 * scale } else { ridge * 10.0 };
            }
            Err(_) => {
                return Err(HwuError::Numerical(
                    "background kernel is not positive semidefinite".into(),
                ))
            }
        }
    };
    let l = llt.L();
    let e: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok((0..n)
        .map(|i| mu + sigma * (0..=i).map(|j| l[(i, j)] * e[j]).sum::<f64>())
        .collect())
}

fn phenotype<R: Rng>(rng: &mut R, cfg: &SimulationConfig, eta: &[f64]) -> Result<PhenotypeVector> {
    let y = match cfg.phenotype_kind {
        PhenotypeKind::Binary => eta
            .iter()
            .map(|&e| {
                let p = 1.0 / (1.0 + (-e).exp());
                if rng.random_bool(p) { 1.0 } else { 0.0 }
            })
            .collect(),
        PhenotypeKind::Continuous => eta.iter().map(|&e| e + cfg.error_dist.sample(rng)).collect(),
    };
    PhenotypeVector::new(y)
}

/// Draws replicate `r` of the scenario in `cfg`.
pub fn simulate(cfg: &SimulationConfig, r: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = cfg.replicate_rng(r);
    let n = cfg.n;
    let subpop = subpopulations(n, cfg.n_subpop);
    let x = latent_covariates(&mut rng, cfg, &subpop);
    let g = sample_genotypes(&mut rng, n, cfg.maf)?;
    let beta: Vec<f64> = match &cfg.betas {
        BetaSpec::Fixed(b) => subpop.iter().map(|&s| b[s]).collect(),
        BetaSpec::Uniform { mu, sigma } => {
            let b = uniform_betas(&mut rng, cfg.n_subpop, *mu, *sigma);
            subpop.iter().map(|&s| b[s]).collect()
        }
        BetaSpec::Kernel { mu, sigma } => {
            kernel_betas(&mut rng, &cfg.true_kernel.build(&x)?, *mu, *sigma)?
        }
    };
    let z = (cfg.scenario == Scenario::NonNormal).then(|| {
        g.iter()
            .map(|&gi| {
                let noise: f64 = rng.sample(StandardNormal);
                if cfg.confounding { gi + noise } else { noise }
            })
            .collect::<Vec<f64>>()
    });
    let eta: Vec<f64> = (0..n)
        .map(|i| {
            let cov = z.as_ref().map_or(0.0, |z| cfg.alpha * z[i]);
            cfg.intercept + cov + g[i] * beta[i]
        })
        .collect();
    let y = phenotype(&mut rng, cfg, &eta)?;
    Ok(Dataset { y, g, x, z, subpop, beta })
}

/// Two-population dataset.
pub fn sim_two_pop(cfg: &SimulationConfig, r: u64) -> Result<Dataset> {
    expect_scenario(cfg, Scenario::TwoPop)?;
    simulate(cfg, r)
}

/// Twenty-population dataset.
pub fn sim_multi_pop(cfg: &SimulationConfig, r: u64) -> Result<Dataset> {
    expect_scenario(cfg, Scenario::MultiPop)?;
    simulate(cfg, r)
}

/// Non-normal-error dataset.
pub fn sim_nonnormal(cfg: &SimulationConfig, r: u64) -> Result<Dataset> {
    expect_scenario(cfg, Scenario::NonNormal)?;
    simulate(cfg, r)
}

fn expect_scenario(cfg: &SimulationConfig, s: Scenario) -> Result<()> {
    if cfg.scenario != s {
        return Err(HwuError::InvalidParameter(format!(
            "expected a {s} config, got {}",
            cfg.scenario
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Hwu,
    Nhwu,
    Phwu,
    Glm,
    VcScore,
    /// HWU with the other kernel family than the generating one.
    HwuMisspecified,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Hwu => "hwu",
            Self::Nhwu => "nhwu",
            Self::Phwu => "phwu",
            Self::Glm => "glm",
            Self::VcScore => "vcscore",
            Self::HwuMisspecified => "hwu_mis",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = HwuError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hwu" => Ok(Self::Hwu),
            "nhwu" => Ok(Self::Nhwu),
            "phwu" => Ok(Self::Phwu),
            "glm" => Ok(Self::Glm),
            "vcscore" | "vc" => Ok(Self::VcScore),
            "hwu_mis" | "hwu-mis" => Ok(Self::HwuMisspecified),
            other => Err(HwuError::InvalidParameter(format!("unknown method {other:?}"))),
        }
    }
}

/// Shared per-dataset work for several methods.
pub struct Analysis<'a> {
    cfg: &'a SimulationConfig,
    data: &'a Dataset,
    z: CovariateMatrix,
    scores: OnceLock<Result<StandardizedScores>>,
    kappa_true: OnceLock<Result<KappaMatrix>>,
    kappa_other: OnceLock<Result<KappaMatrix>>,
}

impl<'a> Analysis<'a> {
    pub fn new(cfg: &'a SimulationConfig, data: &'a Dataset) -> Result<Self> {
        Ok(Self {
            cfg,
            data,
            z: data.covariates()?,
            scores: OnceLock::new(),
            kappa_true: OnceLock::new(),
            kappa_other: OnceLock::new(),
        })
    }

    fn scores(&self) -> Result<&StandardizedScores> {
        self.scores
            .get_or_init(|| prepare_phenotype(&self.data.y, &self.z))
            .as_ref()
            .map_err(Clone::clone)
    }

    fn kappa(&self, misspecified: bool) -> Result<&KappaMatrix> {
        let (cell, choice) = if misspecified {
            (&self.kappa_other, self.cfg.true_kernel.other())
        } else {
            (&self.kappa_true, self.cfg.true_kernel)
        };
        cell.get_or_init(|| choice.build(&self.data.x))
            .as_ref()
            .map_err(Clone::clone)
    }

    fn hwu(&self, mode: WeightMode, misspecified: bool) -> Result<f64> {
        let kappa = match mode {
            WeightMode::Nhwu => None,
            _ => Some(self.kappa(misspecified)?),
        };
        let gs = GeneticSimilarity::crossprod(self.data.g.clone())?;
        let constant;
        let kappa = match kappa {
            Some(k) => k,
            None => {
                constant = KappaMatrix::constant(self.data.n(), 1.0);
                &constant
            }
        };
        let w = compose_weight(kappa, &gs, mode)?;
        Ok(asymptotic_test_scores(self.scores()?, &self.z, &w)?.p_asymptotic.value)
    }

    /// p-value of `method`; a test without information (monomorphic
    /// genotype, degenerate weight or phenotype) counts as p = 1.
    pub fn pvalue(&self, method: Method) -> Result<f64> {
        let out = match method {
            Method::Hwu => self.hwu(WeightMode::Hwu, false),
            Method::HwuMisspecified => self.hwu(WeightMode::Hwu, true),
            Method::Nhwu => self.hwu(WeightMode::Nhwu, false),
            Method::Phwu => self.hwu(WeightMode::Phwu, false),
            Method::Glm => glm_lrt(
                &self.data.y,
                &self.data.g,
                &self.z,
                GlmFamily::for_phenotype(&self.data.y),
            )
            .map(|p| p.value),
            Method::VcScore => {
                vc_score_test(&self.data.y, &self.data.g, &self.z, self.kappa(false)?).map(|p| p.value)
            }
        };
        match out {
            Err(e) if e.is_degenerate() => Ok(1.0),
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerEstimate {
    pub method: String,
    pub rejection_rate: f64,
    pub replicates: usize,
    pub alpha: f64,
    pub mc_stderr: f64,
}

impl PowerEstimate {
    pub fn from_pvalues(method: impl Into<String>, pvalues: &[f64], alpha: f64) -> Self {
        let replicates = pvalues.len();
        let hits = pvalues.iter().filter(|&&p| p <= alpha).count();
        let r = if replicates == 0 { 0.0 } else { hits as f64 / replicates as f64 };
        Self {
            method: method.into(),
            rejection_rate: r,
            replicates,
            alpha,
            mc_stderr: if replicates == 0 { 0.0 } else { (r * (1.0 - r) / replicates as f64).sqrt() },
        }
    }
}

fn check_power_args(replicates: usize, alpha: f64) -> Result<()> {
    if replicates < MIN_REPLICATES {
        return Err(HwuError::InvalidParameter(format!(
            "need at least {MIN_REPLICATES} replicates, got {replicates}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(HwuError::InvalidParameter(format!("alpha {alpha} outside (0, 1)")));
    }
    Ok(())
}

/// Runs `test` on replicates `0..replicates` in parallel; the result only
/// depends on `test`, not on scheduling.
pub fn rejection_rate<F>(label: &str, replicates: usize, alpha: f64, test: F) -> Result<PowerEstimate>
where
    F: Fn(u64) -> Result<f64> + Sync,
{
    check_power_args(replicates, alpha)?;
    let p: Vec<f64> = (0..replicates as u64)
        .into_par_iter()
        .map(|r| {
            test(r).map_err(|e| HwuError::Replicate {
                replicate: r as usize,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    Ok(PowerEstimate::from_pvalues(label, &p, alpha))
}

/// Rejection rate of one method.
pub fn power_estimate(
    method: Method,
    cfg: &SimulationConfig,
    replicates: usize,
    alpha: f64,
) -> Result<PowerEstimate> {
    Ok(power_study(&[method], cfg, replicates, alpha)?.remove(0))
}

/// Rejection rates of several methods evaluated on the same datasets.
pub fn power_study(
    methods: &[Method],
    cfg: &SimulationConfig,
    replicates: usize,
    alpha: f64,
) -> Result<Vec<PowerEstimate>> {
    check_power_args(replicates, alpha)?;
    cfg.validate()?;
    if methods.is_empty() {
        return Err(HwuError::InvalidParameter("no method requested".into()));
    }
    let per_rep: Vec<Vec<f64>> = (0..replicates as u64)
        .into_par_iter()
        .map(|r| {
            let run = || -> Result<Vec<f64>> {
                let data = simulate(cfg, r)?;
                let analysis = Analysis::new(cfg, &data)?;
                methods.iter().map(|&m| analysis.pvalue(m)).collect()
            };
            run().map_err(|e| HwuError::Replicate {
                replicate: r as usize,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    Ok(methods
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let p: Vec<f64> = per_rep.iter().map(|row| row[k]).collect();
            PowerEstimate::from_pvalues(m.as_str(), &p, alpha)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn genotypes_are_reproducible_and_in_range() {
        let a = gen_genotypes(100, 0.01, 5).unwrap();
        assert_eq!(a, gen_genotypes(100, 0.01, 5).unwrap());
        assert!(a.iter().all(|v| [0.0, 1.0, 2.0].contains(v)));
        assert!(gen_genotypes(10, 0.0, 1).is_err());
        assert!(gen_genotypes(10, 0.6, 1).is_err());
    }

    #[test]
    fn parse_round_trips() {
        for s in ["fixed:-0.5,0.5", "uniform:0.3,0.5", "kernel:0,0.7071"] {
            let b: BetaSpec = s.parse().unwrap();
            assert_eq!(b.to_string(), s);
        }
        assert_eq!("t2".parse::<ErrorDist>().unwrap(), ErrorDist::StudentT(2.0));
        assert_eq!("t(3)".parse::<ErrorDist>().unwrap(), ErrorDist::StudentT(3.0));
        assert_eq!("cauchy".parse::<ErrorDist>().unwrap(), ErrorDist::Cauchy);
        assert!("uniform:1".parse::<BetaSpec>().is_err());
        assert_eq!("hwu_mis".parse::<Method>().unwrap(), Method::HwuMisspecified);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = SimulationConfig::two_pop(PhenotypeKind::Binary, 0.0, 0.0);
        c.n = 5;
        assert!(c.validate().is_err());
        let mut c = SimulationConfig::two_pop(PhenotypeKind::Binary, 0.0, 0.0);
        c.sigma_c = 0.0;
        assert!(c.validate().is_err());
        let mut c = SimulationConfig::two_pop(PhenotypeKind::Binary, 0.0, 0.0);
        c.betas = BetaSpec::Fixed(vec![0.0; 3]);
        assert!(c.validate().is_err());
        let c = SimulationConfig::two_pop(PhenotypeKind::Binary, 0.0, 0.0);
        assert!(sim_multi_pop(&c, 0).is_err());
    }

    #[test]
    fn stub_methods() {
        let zero = rejection_rate("never", 200, 0.05, |_| Ok(1.0)).unwrap();
        assert_eq!(zero.rejection_rate, 0.0);
        assert_eq!(zero.mc_stderr, 0.0);
        let err = rejection_rate("fails", 200, 0.05, |r| {
            if r == 17 { Err(HwuError::Numerical("boom".into())) } else { Ok(0.5) }
        })
        .unwrap_err();
        assert!(matches!(err, HwuError::Replicate { replicate: 17, .. }));
        assert!(rejection_rate("few", 50, 0.05, |_| Ok(1.0)).is_err());
    }

    #[test]
    fn uniform_betas_have_requested_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = uniform_betas(&mut rng, 200_000, 0.3, 0.5);
        let m = b.iter().sum::<f64>() / b.len() as f64;
        let v = b.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / b.len() as f64;
        assert!((m - 0.3).abs() < 0.01);
        assert!((v - 0.25).abs() < 0.01);
        assert!(uniform_betas(&mut rng, 5, 0.3, 0.0).iter().all(|&x| x == 0.3));
    }
}
