//! The weighted U statistic, its asymptotic test and a permutation test.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{HwuError, Result};
use crate::quadform::{null_mixture, tail_pvalue, PValue, PValueMethod};
use crate::rank_kernel::{
    average_ranks, standardize_ranks, CovariateMatrix, PhenotypeVector, StandardizedScores,
};
use crate::weights::{WeightMatrix, WeightMode};

pub const MIN_PERMUTATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct AssociationResult {
    pub u_stat: f64,
    pub p_asymptotic: PValue,
    pub p_permutation: Option<PValue>,
    pub n_used: usize,
    pub mode: WeightMode,
    /// Number of mixture components kept after truncation.
    pub eigen_count: usize,
    /// True when the inversion faulted and moment matching was used.
    pub fallback: bool,
}

/// Permutation count and random stream. Two configs with the same seed and
/// stream replay the same permutations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PermutationConfig {
    permutations: usize,
    seed: u64,
    stream: u64,
}

impl PermutationConfig {
    pub fn new(permutations: usize, seed: u64) -> Result<Self> {
        if permutations < MIN_PERMUTATIONS {
            return Err(HwuError::InvalidParameter(format!(
                "need at least {MIN_PERMUTATIONS} permutations, got {permutations}"
            )));
        }
        Ok(Self {
            permutations,
            seed,
            stream: 0,
        })
    }

    /// Same seed, independent stream (one per variant in a scan).
    pub fn with_stream(self, stream: u64) -> Self {
        Self { stream, ..self }
    }

    pub fn permutations(&self) -> usize {
        self.permutations
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// `U = S'WS`; with the zero diagonal this is `2 sum_{i<j} w_ij S_i S_j`.
pub fn u_statistic(scores: &StandardizedScores, w: &WeightMatrix) -> Result<f64> {
    if scores.len() != w.n() {
        return Err(HwuError::DimensionMismatch {
            expected: w.n(),
            found: scores.len(),
        });
    }
    Ok(w.entries().quadratic_form(scores.scores()))
}

/// Ranks and standardizes `y` against `z`.
pub fn prepare_phenotype(y: &PhenotypeVector, z: &CovariateMatrix) -> Result<StandardizedScores> {
    if y.len() != z.n() {
        return Err(HwuError::DimensionMismatch {
            expected: z.n(),
            found: y.len(),
        });
    }
    standardize_ranks(&average_ranks(y), z)
}

pub fn asymptotic_test(
    y: &PhenotypeVector,
    z: &CovariateMatrix,
    w: &WeightMatrix,
) -> Result<AssociationResult> {
    let scores = prepare_phenotype(y, z)?;
    asymptotic_test_scores(&scores, z, w)
}

/// Asymptotic test on scores already standardized against `z`, so the
/// phenotype work can be shared across variants.
pub fn asymptotic_test_scores(
    scores: &StandardizedScores,
    z: &CovariateMatrix,
    w: &WeightMatrix,
) -> Result<AssociationResult> {
    if z.n() != w.n() {
        return Err(HwuError::DimensionMismatch {
            expected: w.n(),
            found: z.n(),
        });
    }
    let u = u_statistic(scores, w)?;
    let mix = null_mixture(w, z)?;
    let p = tail_pvalue(&mix, u)?;
    Ok(AssociationResult {
        u_stat: u,
        p_asymptotic: p,
        p_permutation: None,
        n_used: scores.len(),
        mode: w.mode(),
        eigen_count: mix.len(),
        fallback: p.method == PValueMethod::MomentMatch,
    })
}

pub fn permutation_test(
    y: &PhenotypeVector,
    z: &CovariateMatrix,
    w: &WeightMatrix,
    cfg: &PermutationConfig,
) -> Result<PValue> {
    let scores = prepare_phenotype(y, z)?;
    permutation_pvalue_scores(&scores, w, cfg)
}

/// `(1 + #{U_b >= U_obs}) / (B + 1)` over uniform permutations of the
/// residualized scores, with `W` held fixed.
pub fn permutation_pvalue_scores(
    scores: &StandardizedScores,
    w: &WeightMatrix,
    cfg: &PermutationConfig,
) -> Result<PValue> {
    let observed = u_statistic(scores, w)?;
    let s = scores.scores();
    let ss: f64 = s.iter().map(|v| v * v).sum();
    // permutations that reproduce the observed arrangement up to rounding count as ties
    let tol = 1e-12 * w.entries().max_abs() * ss;
    let m = w.entries();
    let mut rng = cfg.rng();
    let mut perm: Vec<f64> = s.to_vec();
    let mut hits = 0usize;
    for _ in 0..cfg.permutations {
        perm.shuffle(&mut rng);
        if m.quadratic_form(&perm) >= observed - tol {
            hits += 1;
        }
    }
    Ok(PValue::new(
        (1 + hits) as f64 / (cfg.permutations + 1) as f64,
        PValueMethod::Permutation,
    ))
}
