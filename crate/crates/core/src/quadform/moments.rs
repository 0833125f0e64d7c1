//! Three-cumulant approximation by a scaled, shifted chi-square.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{HwuError, Result};

/// Cumulants `k_r = 2^(r-1) (r-1)! sum lambda^r` for r = 1, 2, 3.
pub fn mixture_cumulants(lambdas: &[f64]) -> [f64; 3] {
    let (s1, s2, s3) = lambdas.iter().fold((0.0, 0.0, 0.0), |(a, b, c), &l| {
        (a + l, b + l * l, c + l * l * l)
    });
    [s1, 2.0 * s2, 8.0 * s3]
}

/// Upper tail `P(Q > q)` of `Q ~ a * chi2_d + b`, with `(a, d, b)` chosen so
/// the first three cumulants match those of the mixture. When the third
/// cumulant is negative the reflected variable `-Q` is matched instead;
/// a vanishing third cumulant falls back to the normal approximation.
pub fn moment_match_tail(lambdas: &[f64], q: f64) -> Result<f64> {
    let [k1, k2, k3] = mixture_cumulants(lambdas);
    if !(k2 > 0.0) {
        return Err(HwuError::DegenerateWeight(
            "mixture has zero variance".into(),
        ));
    }
    let skew = k3 / k2.powf(1.5);
    if skew.abs() < 1e-12 {
        let normal = Normal::new(k1, k2.sqrt()).map_err(|e| HwuError::Numerical(e.to_string()))?;
        return Ok(normal.sf(q));
    }
    let (k1, k3, q, upper) = if k3 > 0.0 {
        (k1, k3, q, true)
    } else {
        (-k1, -k3, -q, false)
    };
    let df = 8.0 * k2.powi(3) / (k3 * k3);
    let scale = k3 / (4.0 * k2);
    let shift = k1 - scale * df;
    let chi = ChiSquared::new(df).map_err(|e| HwuError::Numerical(e.to_string()))?;
    let x = (q - shift) / scale;
    let p = if upper {
        if x <= 0.0 {
            1.0
        } else {
            chi.sf(x)
        }
    } else if x <= 0.0 {
        0.0
    } else {
        // P(Q > q) = P(-Q < -q)
        chi.cdf(x)
    };
    Ok(p)
}
