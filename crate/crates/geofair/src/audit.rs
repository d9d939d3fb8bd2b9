//! Accuracy, bias, and driver metrics: R², Pearson, Spearman, AUC,
//! per-group metric sets, signed/rank errors, and driver statistics.

use std::fmt;

use crate::data::pop_stddev;
use crate::error::{Error, Result};

/// Evaluation scope for a metric set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Scope {
    Overall,
    Urban,
    Rural,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Overall => write!(f, "overall"),
            Scope::Urban => write!(f, "urban"),
            Scope::Rural => write!(f, "rural"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSet {
    pub r2: f64,
    pub pearson: f64,
    pub spearman: f64,
    pub n: usize,
    pub scope: Scope,
}

/// A scope either yields a metric set or a degenerate flag; a single bad
/// group never aborts a sweep.
#[derive(Debug, Clone, PartialEq)]
pub enum ScopeOutcome {
    Computed(MetricSet),
    Degenerate { scope: Scope, reason: String },
}

impl ScopeOutcome {
    pub fn metrics(&self) -> Option<&MetricSet> {
        match self {
            ScopeOutcome::Computed(m) => Some(m),
            ScopeOutcome::Degenerate { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMetrics {
    pub overall: ScopeOutcome,
    pub urban: ScopeOutcome,
    pub rural: ScopeOutcome,
}

/// Mean signed and rank errors per group. Signed errors are in
/// standardized wealth units; rank errors in normalized rank units with
/// positive meaning over-ranked (predicted richer than true).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasMetrics {
    pub mean_signed_error_urban: f64,
    pub mean_signed_error_rural: f64,
    pub mean_rank_error_urban: f64,
    pub mean_rank_error_rural: f64,
    pub n_urban: usize,
    pub n_rural: usize,
}

/// Summary statistics for the two drivers of allocative bias:
/// p1 = stddev(predictions) - stddev(truth) (reversion to the mean),
/// p2 = Spearman between wealth predictions and raw urban scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriverStats {
    pub p1: f64,
    pub p2: f64,
}

fn check_len(y: &[f64], yhat: &[f64]) -> Result<usize> {
    if y.len() != yhat.len() {
        return Err(Error::Dimension {
            expected: y.len(),
            actual: yhat.len(),
        });
    }
    if y.len() < 2 {
        return Err(Error::Degenerate(format!("need n >= 2, got {}", y.len())));
    }
    Ok(y.len())
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Fractional (average-tie) ranks, 1-based ascending.
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j are tied; all receive the average rank.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn r2_score(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_len(y, yhat)?;
    let my = mean(y);
    let ss_tot: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if ss_tot <= 0.0 {
        return Err(Error::Degenerate("zero variance in y".into()));
    }
    let ss_res: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn pearson(y: &[f64], yhat: &[f64]) -> Result<f64> {
    let n = check_len(y, yhat)? as f64;
    let my = mean(y);
    let mz = mean(yhat);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in y.iter().zip(yhat) {
        sxy += (a - my) * (b - mz);
        sxx += (a - my).powi(2);
        syy += (b - mz).powi(2);
    }
    let _ = n;
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::Degenerate("constant input to pearson".into()));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Spearman's rho: Pearson on fractional ranks.
pub fn spearman(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_len(y, yhat)?;
    pearson(&fractional_ranks(y), &fractional_ranks(yhat))
}

/// Mann-Whitney AUC with the half-credit tie rule, computed from
/// fractional ranks of the scores.
pub fn auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Dimension {
            expected: labels.len(),
            actual: scores.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Class("both classes required for AUC".into()));
    }
    let ranks = fractional_ranks(scores);
    let rank_sum_pos: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&l, _)| l)
        .map(|(_, r)| r)
        .sum();
    let u = rank_sum_pos - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

fn scoped(y: &[f64], yhat: &[f64], scope: Scope) -> ScopeOutcome {
    let set = (|| -> Result<MetricSet> {
        Ok(MetricSet {
            r2: r2_score(y, yhat)?,
            pearson: pearson(y, yhat)?,
            spearman: spearman(y, yhat)?,
            n: y.len(),
            scope,
        })
    })();
    match set {
        Ok(m) => ScopeOutcome::Computed(m),
        Err(e) => ScopeOutcome::Degenerate {
            scope,
            reason: e.to_string(),
        },
    }
}

/// Metric sets for the whole vector and for the urban / rural subsets.
pub fn group_metrics(y: &[f64], yhat: &[f64], urban: &[bool]) -> Result<GroupMetrics> {
    check_len(y, yhat)?;
    if urban.len() != y.len() {
        return Err(Error::Dimension {
            expected: y.len(),
            actual: urban.len(),
        });
    }
    let filter = |want: bool| -> (Vec<f64>, Vec<f64>) {
        y.iter()
            .zip(yhat)
            .zip(urban)
            .filter(|(_, &u)| u == want)
            .map(|((a, b), _)| (*a, *b))
            .unzip()
    };
    let (yu, zu) = filter(true);
    let (yr, zr) = filter(false);
    Ok(GroupMetrics {
        overall: scoped(y, yhat, Scope::Overall),
        urban: scoped(&yu, &zu, Scope::Urban),
        rural: scoped(&yr, &zr, Scope::Rural),
    })
}

/// Per-group mean of (prediction - truth).
pub fn signed_errors(y: &[f64], yhat: &[f64], urban: &[bool]) -> Result<(f64, f64)> {
    check_len(y, yhat)?;
    let mut sums = [0.0, 0.0];
    let mut counts = [0usize, 0usize];
    for ((a, b), &u) in y.iter().zip(yhat).zip(urban) {
        let g = usize::from(u);
        sums[g] += b - a;
        counts[g] += 1;
    }
    if counts[0] == 0 || counts[1] == 0 {
        return Err(Error::Class("both groups required".into()));
    }
    Ok((sums[1] / counts[1] as f64, sums[0] / counts[0] as f64))
}

/// Per-group mean of (rank(prediction) - rank(truth)) / n, with ranks over
/// the whole test set ascending in wealth.
pub fn rank_errors(y: &[f64], yhat: &[f64], urban: &[bool]) -> Result<(f64, f64)> {
    let n = check_len(y, yhat)?;
    let ry = fractional_ranks(y);
    let rz = fractional_ranks(yhat);
    let mut sums = [0.0, 0.0];
    let mut counts = [0usize, 0usize];
    for i in 0..n {
        let g = usize::from(urban[i]);
        sums[g] += (rz[i] - ry[i]) / n as f64;
        counts[g] += 1;
    }
    if counts[0] == 0 || counts[1] == 0 {
        return Err(Error::Class("both groups required".into()));
    }
    Ok((sums[1] / counts[1] as f64, sums[0] / counts[0] as f64))
}

pub fn bias_metrics(y: &[f64], yhat: &[f64], urban: &[bool]) -> Result<BiasMetrics> {
    let (mse_u, mse_r) = signed_errors(y, yhat, urban)?;
    let (mre_u, mre_r) = rank_errors(y, yhat, urban)?;
    let n_urban = urban.iter().filter(|&&u| u).count();
    Ok(BiasMetrics {
        mean_signed_error_urban: mse_u,
        mean_signed_error_rural: mse_r,
        mean_rank_error_urban: mre_u,
        mean_rank_error_rural: mre_r,
        n_urban,
        n_rural: urban.len() - n_urban,
    })
}

/// p1 and p2 over the test set. Urban scores are the raw (unclipped)
/// ridge outputs so Spearman sees no clip-induced ties.
pub fn driver_stats(y: &[f64], yhat: &[f64], urban_scores: &[f64]) -> Result<DriverStats> {
    check_len(y, yhat)?;
    Ok(DriverStats {
        p1: pop_stddev(yhat) - pop_stddev(y),
        p2: spearman(yhat, urban_scores)?,
    })
}

/// Cross-run Pearson correlations of the allocation gap with each driver
/// statistic. Returns (r(delta_b, p1), r(delta_b, p2)).
pub fn driver_correlations(delta_b: &[f64], p1: &[f64], p2: &[f64]) -> Result<(f64, f64)> {
    if delta_b.len() < 3 {
        return Err(Error::Argument(format!(
            "need at least 3 runs, got {}",
            delta_b.len()
        )));
    }
    Ok((pearson(delta_b, p1)?, pearson(delta_b, p2)?))
}
