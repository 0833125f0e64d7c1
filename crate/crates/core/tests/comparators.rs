use hwu_core::comparators::{glm_lrt, glm_lrt_detail, vc_score_test, GlmFamily};
use hwu_core::rank_kernel::{CovariateMatrix, PhenotypeVector};
use hwu_core::weights::{kappa_euclidean, DistanceMetric, KappaMatrix};
use hwu_core::Matrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Logistic maximum likelihood by cyclic one-coordinate Newton steps.
fn coordinate_logistic_deviance(y: &[f64], x: &[Vec<f64>]) -> f64 {
    let p = x[0].len();
    let mut beta = vec![0.0; p];
    let eta = |beta: &[f64], row: &[f64]| row.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>();
    for _ in 0..5000 {
        let mut moved = 0.0_f64;
        for j in 0..p {
            let (mut grad, mut hess) = (0.0, 0.0);
            for (row, &yi) in x.iter().zip(y) {
                let mu = 1.0 / (1.0 + (-eta(&beta, row)).exp());
                grad += (yi - mu) * row[j];
                hess += mu * (1.0 - mu) * row[j] * row[j];
            }
            let step = grad / hess;
            beta[j] += step;
            moved = moved.max(step.abs());
        }
        if moved < 1e-13 {
            break;
        }
    }
    -2.0 * x
        .iter()
        .zip(y)
        .map(|(row, &yi)| {
            let mu = 1.0 / (1.0 + (-eta(&beta, row)).exp());
            yi * mu.ln() + (1.0 - yi) * (1.0 - mu).ln()
        })
        .sum::<f64>()
}

#[test]
fn logistic_deviance_matches_reference_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let n = 300;
    let g: Vec<f64> = (0..n).map(|_| rng.random_range(0..3) as f64).collect();
    let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let p = 1.0 / (1.0 + (-(-0.3 + 0.4 * g[i] + 0.5 * x[i])).exp());
            if rng.random_bool(p) { 1.0 } else { 0.0 }
        })
        .collect();
    let z = CovariateMatrix::with_covariates(n, std::slice::from_ref(&x)).unwrap();
    let r = glm_lrt_detail(&PhenotypeVector::new(y.clone()).unwrap(), &g, &z, GlmFamily::Logistic).unwrap();

    let null_rows: Vec<Vec<f64>> = (0..n).map(|i| vec![1.0, x[i]]).collect();
    let full_rows: Vec<Vec<f64>> = (0..n).map(|i| vec![1.0, x[i], g[i]]).collect();
    let d0 = coordinate_logistic_deviance(&y, &null_rows);
    let d1 = coordinate_logistic_deviance(&y, &full_rows);
    assert!((r.null.deviance - d0).abs() < 1e-6, "{} vs {d0}", r.null.deviance);
    assert!((r.full.as_ref().unwrap().deviance - d1).abs() < 1e-6);
    assert!(r.full.as_ref().unwrap().iterations <= 50);
}

#[test]
fn comparators_ignore_subject_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    let n = 120;
    let g: Vec<f64> = (0..n).map(|_| rng.random_range(0..3) as f64).collect();
    let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let y: Vec<f64> = (0..n).map(|i| 0.2 * g[i] + rng.sample::<f64, _>(StandardNormal)).collect();
    let yb: Vec<f64> = y.iter().map(|v| if *v > 0.0 { 1.0 } else { 0.0 }).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let pick = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<f64>>();

    let z = CovariateMatrix::with_covariates(n, std::slice::from_ref(&x)).unwrap();
    let zp = CovariateMatrix::with_covariates(n, &[pick(&x)]).unwrap();
    for (yy, fam) in [(&y, GlmFamily::Linear), (&yb, GlmFamily::Logistic)] {
        let a = glm_lrt(&PhenotypeVector::new(yy.clone()).unwrap(), &g, &z, fam).unwrap().value;
        let b = glm_lrt(&PhenotypeVector::new(pick(yy)).unwrap(), &pick(&g), &zp, fam).unwrap().value;
        assert!((a - b).abs() < 1e-9, "{fam:?}: {a} vs {b}");
    }
    let xm = Matrix::from_fn(n, 1, |i, _| x[i]);
    let k = kappa_euclidean(&xm, &DistanceMetric::ScaledIdentity).unwrap();
    let kp = KappaMatrix::new(k.entries().permute_symmetric(&perm), k.kind()).unwrap();
    let a = vc_score_test(&PhenotypeVector::new(y.clone()).unwrap(), &g, &z, &k).unwrap().value;
    let b = vc_score_test(&PhenotypeVector::new(pick(&y)).unwrap(), &pick(&g), &zp, &kp).unwrap().value;
    assert!((a - b).abs() < 1e-9);
}

/// Gaussian null data: the score test holds its size.
#[test]
fn vc_score_is_calibrated_on_gaussian_null() {
    let n = 500;
    let reps = 1000;
    let mut rejections = 0;
    for r in 0..reps {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + r);
        let g: Vec<f64> = (0..n)
            .map(|_| (rng.random_bool(0.3) as u8 + rng.random_bool(0.3) as u8) as f64)
            .collect();
        let x = Matrix::from_fn(n, 2, |_, _| rng.sample(StandardNormal));
        let y: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let k = kappa_euclidean(&x, &DistanceMetric::ScaledIdentity).unwrap();
        let z = CovariateMatrix::intercept_only(n).unwrap();
        let p = vc_score_test(&PhenotypeVector::new(y).unwrap(), &g, &z, &k).unwrap().value;
        if p <= 0.05 {
            rejections += 1;
        }
    }
    let rate = rejections as f64 / reps as f64;
    assert!((0.032..=0.068).contains(&rate), "rate {rate}");
}
