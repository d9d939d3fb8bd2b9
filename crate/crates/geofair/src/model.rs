//! Ridge regression with an unpenalized intercept, k-fold cross-validated
//! penalty selection, and a ridge scorer for the urban indicator.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A fitted ridge model. Prediction is affine:
/// yhat = intercept + (x - feature_means) . weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub feature_means: Vec<f64>,
    pub label_mean: f64,
}

impl RidgeFit {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }
}

/// Default penalty grid: 9 points log-spaced over 1e-4..1e4.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..9).map(|i| 10f64.powi(i - 4)).collect()
}

fn column_means(x: &[Vec<f64>]) -> Vec<f64> {
    let d = x[0].len();
    let mut means = vec![0.0; d];
    for row in x {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in means.iter_mut() {
        *m /= x.len() as f64;
    }
    means
}

/// Solve min sum (y_i - b - x_i.beta)^2 + lambda ||beta||^2 via the
/// centered normal equations. The intercept is not penalized. For d > n
/// with lambda > 0 the equivalent dual (Gram) system is solved instead.
pub fn fit_ridge(x: &[Vec<f64>], y: &[f64], lambda: f64) -> Result<RidgeFit> {
    let n = x.len();
    if n != y.len() || n < 2 {
        return Err(Error::Argument(format!(
            "need matching rows(X)=len(y) >= 2, got {n} and {}",
            y.len()
        )));
    }
    if lambda < 0.0 {
        return Err(Error::Argument("lambda must be nonnegative".into()));
    }
    let d = x[0].len();
    let feature_means = column_means(x);
    let label_mean = y.iter().sum::<f64>() / n as f64;
    let xc = DMatrix::from_fn(n, d, |i, j| x[i][j] - feature_means[j]);
    let yc = DVector::from_fn(n, |i, _| y[i] - label_mean);

    let beta: DVector<f64> = if d > n && lambda > 0.0 {
        // beta = Xc^T (Xc Xc^T + lambda I)^-1 yc
        let mut gram = &xc * xc.transpose();
        for i in 0..n {
            gram[(i, i)] += lambda;
        }
        let chol = gram.cholesky().ok_or(Error::Singular)?;
        xc.transpose() * chol.solve(&yc)
    } else {
        let mut gram = xc.transpose() * &xc;
        for i in 0..d {
            gram[(i, i)] += lambda;
        }
        let rhs = xc.transpose() * &yc;
        let chol = match gram.clone().cholesky() {
            Some(c) => c,
            None => return Err(Error::Singular),
        };
        // a consistent rank-deficient system still solves cleanly, so
        // rank deficiency is detected from the pivot ratio directly
        let l = chol.l();
        let max_pivot = (0..d).map(|i| l[(i, i)]).fold(0.0f64, f64::max);
        let min_pivot = (0..d).map(|i| l[(i, i)]).fold(f64::INFINITY, f64::min);
        // pivots are square roots of Schur complements, so exact rank
        // deficiency surfaces at about sqrt(machine epsilon)
        if !(min_pivot > 1e-7 * max_pivot) {
            return Err(Error::Singular);
        }
        let mut beta = chol.solve(&rhs);
        // One step of iterative refinement keeps the normal-equation
        // residual within the contract on ill-conditioned inputs.
        let resid = &rhs - &gram * &beta;
        beta += chol.solve(&resid);
        beta
    };

    // Normal-equation residual check, relative to the right-hand side.
    // Written so that NaN weights (zero Cholesky pivot) also fail it.
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular);
    }
    let gram_beta = xc.transpose() * (&xc * &beta) + lambda * &beta;
    let rhs = xc.transpose() * &yc;
    let rhs_norm = rhs.norm();
    let resid = (gram_beta - &rhs).norm();
    if rhs_norm > 0.0 && !(resid / rhs_norm <= 1e-8) {
        return Err(Error::Singular);
    }

    Ok(RidgeFit {
        weights: beta.iter().copied().collect(),
        intercept: label_mean,
        lambda,
        feature_means,
        label_mean,
    })
}

pub fn predict(fit: &RidgeFit, x: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = fit.dim();
    x.iter()
        .map(|row| {
            if row.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    actual: row.len(),
                });
            }
            Ok(fit.intercept
                + row
                    .iter()
                    .zip(&fit.feature_means)
                    .zip(&fit.weights)
                    .map(|((v, m), w)| (v - m) * w)
                    .sum::<f64>())
        })
        .collect()
}

/// Per-lambda mean validation MSE table.
#[derive(Debug, Clone, PartialEq)]
pub struct CvTable {
    pub rows: Vec<(f64, f64)>,
}

/// Seeded k-fold cross-validation over a penalty grid. Ties break toward
/// the larger lambda.
pub fn cross_validate(
    x: &[Vec<f64>],
    y: &[f64],
    lambda_grid: &[f64],
    k: usize,
    seed: u64,
) -> Result<(f64, CvTable)> {
    if k < 2 {
        return Err(Error::Argument(format!("k must be >= 2, got {k}")));
    }
    if lambda_grid.is_empty() {
        return Err(Error::Argument("empty lambda grid".into()));
    }
    if lambda_grid.iter().any(|&l| l < 0.0) {
        return Err(Error::Argument("lambda grid values must be >= 0".into()));
    }
    let n = x.len();
    if n < k {
        return Err(Error::Size(format!("n={n} too small for {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let folds: Vec<Vec<usize>> = (0..k)
        .map(|f| order.iter().copied().skip(f).step_by(k).collect())
        .collect();
    if folds.iter().any(|f| f.is_empty()) {
        return Err(Error::Size("fold with no rows".into()));
    }

    let mut rows = Vec::with_capacity(lambda_grid.len());
    for &lambda in lambda_grid {
        let mut total_se = 0.0;
        let mut total_n = 0usize;
        let mut failed = false;
        for fold in &folds {
            let in_fold: std::collections::BTreeSet<usize> = fold.iter().copied().collect();
            let (mut xt, mut yt) = (Vec::new(), Vec::new());
            for i in 0..n {
                if !in_fold.contains(&i) {
                    xt.push(x[i].clone());
                    yt.push(y[i]);
                }
            }
            match fit_ridge(&xt, &yt, lambda) {
                Ok(fit) => {
                    for &i in fold {
                        let p = predict(&fit, std::slice::from_ref(&x[i]))?[0];
                        total_se += (p - y[i]).powi(2);
                        total_n += 1;
                    }
                }
                Err(Error::Singular) => {
                    failed = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let mse = if failed {
            f64::INFINITY
        } else {
            total_se / total_n as f64
        };
        rows.push((lambda, mse));
    }

    let mut best = rows[0];
    for &(lambda, mse) in &rows[1..] {
        if mse < best.1 || (mse == best.1 && lambda > best.0) {
            best = (lambda, mse);
        }
    }
    if best.1.is_infinite() {
        return Err(Error::Singular);
    }
    Ok((best.0, CvTable { rows }))
}

/// Ridge on the 0/1 urban indicator with the same CV machinery. Raw
/// scores are kept for ranking metrics; clip for reporting only.
pub fn fit_urban_scorer(
    x: &[Vec<f64>],
    urban: &[bool],
    lambda_grid: &[f64],
    k: usize,
    seed: u64,
) -> Result<RidgeFit> {
    let n_pos = urban.iter().filter(|&&u| u).count();
    if n_pos == 0 || n_pos == urban.len() {
        return Err(Error::Class(
            "both classes required to fit the urban scorer".into(),
        ));
    }
    let y: Vec<f64> = urban.iter().map(|&u| f64::from(u as u8)).collect();
    let (best, _) = cross_validate(x, &y, lambda_grid, k, seed)?;
    fit_ridge(x, &y, best)
}

/// Clipped-to-[0,1] view of raw urban scores, for reporting.
pub fn clip01(scores: &[f64]) -> Vec<f64> {
    scores.iter().map(|s| s.clamp(0.0, 1.0)).collect()
}
