//! Targeting simulations, the noised-wealth baseline, allocation-share
//! accounting, and the two recalibration schemes.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audit::Scope;
use crate::data::round_half_up;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ScoreSource {
    Truth,
    Prediction,
    Noised,
    CalibratedMean,
    CalibratedThreshold,
}

impl fmt::Display for ScoreSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreSource::Truth => write!(f, "truth"),
            ScoreSource::Prediction => write!(f, "prediction"),
            ScoreSource::Noised => write!(f, "noised"),
            ScoreSource::CalibratedMean => write!(f, "calibrated-mean"),
            ScoreSource::CalibratedThreshold => write!(f, "calibrated-threshold"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum GroupSource {
    Truth,
    Predicted,
}

impl fmt::Display for GroupSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupSource::Truth => write!(f, "truth"),
            GroupSource::Predicted => write!(f, "predicted"),
        }
    }
}

/// Descriptor of one selection rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyRule {
    pub scope: Scope,
    pub budget_fraction: f64,
    pub score_source: ScoreSource,
    pub group_source: GroupSource,
}

/// Outcome of one selection rule: the selected set, targeting accuracy
/// against the truth-based selection, rural allocation share (percent),
/// and the threshold sensitivity curve.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutcome {
    pub rule: PolicyRule,
    pub selected_ids: BTreeSet<String>,
    /// Precision = recall: both selections have the same size.
    pub precision: f64,
    pub rural_share: f64,
    pub curve: Vec<(f64, f64)>,
    pub curve_auc: f64,
}

/// Additive per-group offsets aligning predicted group means with true
/// group means, learned on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanCalibration {
    pub offset_urban: f64,
    pub offset_rural: f64,
    pub group_source: GroupSource,
    pub learned_on: BTreeSet<String>,
}

/// Per-group selection quotas matching the group composition of a
/// truth-based selection on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdCalibration {
    pub rural_quota_share: f64,
    pub budget_fraction: f64,
    pub group_source: GroupSource,
    pub learned_on: BTreeSet<String>,
}

/// Ground-truth wealth plus Gaussian noise with variance `target_mse`.
pub fn noised_baseline(w: &[f64], target_mse: f64, seed: u64) -> Result<Vec<f64>> {
    if target_mse < 0.0 {
        return Err(Error::Argument("target_mse must be nonnegative".into()));
    }
    let sd = target_mse.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(w.iter()
        .map(|&v| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen::<f64>();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            v + sd * z
        })
        .collect())
}

/// The round(budget * |scope|) ids with lowest scores; ties broken by
/// ascending id.
pub fn select_poorest(
    ids: &[String],
    scores: &[f64],
    scope: &BTreeSet<String>,
    budget_fraction: f64,
) -> Result<BTreeSet<String>> {
    if !(budget_fraction > 0.0 && budget_fraction <= 1.0) {
        return Err(Error::Argument(format!(
            "budget_fraction must be in (0,1], got {budget_fraction}"
        )));
    }
    if scope.is_empty() {
        return Err(Error::Argument("empty selection scope".into()));
    }
    let mut pool: Vec<(&String, f64)> = ids
        .iter()
        .zip(scores)
        .filter(|(id, _)| scope.contains(*id))
        .map(|(id, &s)| (id, s))
        .collect();
    pool.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| a.0.cmp(b.0)));
    let k = round_half_up(budget_fraction * pool.len() as f64).min(pool.len());
    Ok(pool[..k].iter().map(|(id, _)| (*id).clone()).collect())
}

/// |intersection| / |truth|; precision equals recall at equal budget.
pub fn targeting_accuracy(
    pred_selected: &BTreeSet<String>,
    truth_selected: &BTreeSet<String>,
) -> Result<f64> {
    if pred_selected.len() != truth_selected.len() {
        return Err(Error::Contract(format!(
            "selection sizes differ: {} vs {}",
            pred_selected.len(),
            truth_selected.len()
        )));
    }
    Ok(pred_selected.intersection(truth_selected).count() as f64 / truth_selected.len() as f64)
}

/// Percent of selected regions that are rural.
pub fn allocation_share(selected: &BTreeSet<String>, ids: &[String], urban: &[bool]) -> f64 {
    let rural: usize = ids
        .iter()
        .zip(urban)
        .filter(|(id, &u)| !u && selected.contains(*id))
        .count();
    100.0 * rural as f64 / selected.len() as f64
}

/// Rural allocation share as a function of the selection threshold, plus
/// the trapezoid area under the curve divided by 100.
pub fn targeting_curve(
    ids: &[String],
    scores: &[f64],
    urban: &[bool],
    thresholds: &[f64],
) -> Result<(Vec<(f64, f64)>, f64)> {
    if thresholds.is_empty() {
        return Err(Error::Argument("empty threshold grid".into()));
    }
    if thresholds
        .iter()
        .any(|&t| !(t > 0.0 && t <= 1.0))
    {
        return Err(Error::Argument("thresholds must lie in (0,1]".into()));
    }
    if thresholds.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Argument("thresholds must be ascending".into()));
    }
    let scope: BTreeSet<String> = ids.iter().cloned().collect();
    let mut curve = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let sel = select_poorest(ids, scores, &scope, t)?;
        if sel.is_empty() {
            // threshold too small to select anyone at this n; the share
            // is undefined, so the point is dropped
            continue;
        }
        curve.push((t, allocation_share(&sel, ids, urban)));
    }
    let mut auc = 0.0;
    for w in curve.windows(2) {
        auc += 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1);
    }
    Ok((curve, auc / 100.0))
}

/// Default threshold grid: 0.01..=1.00 step 0.01.
pub fn default_threshold_grid() -> Vec<f64> {
    (1..=100).map(|i| i as f64 / 100.0).collect()
}

pub fn learn_mean_calibration(
    ids: &[String],
    yhat: &[f64],
    y: &[f64],
    urban: &[bool],
    group_source: GroupSource,
) -> Result<MeanCalibration> {
    let mut sums = [(0.0, 0.0); 2];
    let mut counts = [0usize; 2];
    for ((&p, &t), &u) in yhat.iter().zip(y).zip(urban) {
        let g = usize::from(u);
        sums[g].0 += t;
        sums[g].1 += p;
        counts[g] += 1;
    }
    if counts[0] == 0 || counts[1] == 0 {
        return Err(Error::Class("both groups required in training data".into()));
    }
    let offset = |g: usize| (sums[g].0 - sums[g].1) / counts[g] as f64;
    Ok(MeanCalibration {
        offset_urban: offset(1),
        offset_rural: offset(0),
        group_source,
        learned_on: ids.iter().cloned().collect(),
    })
}

pub fn apply_mean_calibration(
    params: &MeanCalibration,
    yhat: &[f64],
    urban: &[bool],
) -> Vec<f64> {
    yhat.iter()
        .zip(urban)
        .map(|(&p, &u)| {
            p + if u {
                params.offset_urban
            } else {
                params.offset_rural
            }
        })
        .collect()
}

pub fn learn_threshold_calibration(
    ids: &[String],
    y: &[f64],
    urban: &[bool],
    budget_fraction: f64,
    group_source: GroupSource,
) -> Result<ThresholdCalibration> {
    let scope: BTreeSet<String> = ids.iter().cloned().collect();
    let sel = select_poorest(ids, y, &scope, budget_fraction)?;
    let rural_quota_share = allocation_share(&sel, ids, urban) / 100.0;
    Ok(ThresholdCalibration {
        rural_quota_share,
        budget_fraction,
        group_source,
        learned_on: scope,
    })
}

/// Per-group poorest-by-prediction selection up to integer quotas derived
/// from the learned shares by largest-remainder rounding.
pub fn apply_threshold_calibration(
    params: &ThresholdCalibration,
    ids: &[String],
    yhat: &[f64],
    urban: &[bool],
) -> Result<BTreeSet<String>> {
    let n = ids.len();
    let total = round_half_up(params.budget_fraction * n as f64).min(n);
    if total == n {
        return Ok(ids.iter().cloned().collect());
    }
    let shares = [1.0 - params.rural_quota_share, params.rural_quota_share];
    let exact = [shares[0] * total as f64, shares[1] * total as f64];
    let mut quotas = [exact[0].floor() as usize, exact[1].floor() as usize];
    let mut leftover = total - quotas[0] - quotas[1];
    // Largest remainder; ties go to the rural group.
    let rem = [exact[0] - quotas[0] as f64, exact[1] - quotas[1] as f64];
    let order: [usize; 2] = if rem[0] > rem[1] { [0, 1] } else { [1, 0] };
    for g in order {
        if leftover == 0 {
            break;
        }
        quotas[g] += 1;
        leftover -= 1;
    }
    let group_size = [
        urban.iter().filter(|&&u| !u).count(),
        urban.iter().filter(|&&u| u).count(),
    ];
    // quotas indexed urban=1: quotas[0] urban? Keep explicit: quotas[0] is
    // urban share, quotas[1] rural share per `shares` above.
    let (quota_urban, quota_rural) = (quotas[0], quotas[1]);
    if quota_rural > group_size[0] {
        return Err(Error::Feasibility(format!(
            "rural quota {} exceeds rural group size {} by {}",
            quota_rural,
            group_size[0],
            quota_rural - group_size[0]
        )));
    }
    if quota_urban > group_size[1] {
        return Err(Error::Feasibility(format!(
            "urban quota {} exceeds urban group size {} by {}",
            quota_urban,
            group_size[1],
            quota_urban - group_size[1]
        )));
    }
    let mut selected = BTreeSet::new();
    for (want_urban, quota) in [(true, quota_urban), (false, quota_rural)] {
        if quota == 0 {
            continue;
        }
        let mut members: Vec<(&String, f64)> = ids
            .iter()
            .zip(yhat)
            .zip(urban)
            .filter(|(_, &u)| u == want_urban)
            .map(|((id, &s), _)| (id, s))
            .collect();
        members.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| a.0.cmp(b.0)));
        selected.extend(members[..quota].iter().map(|(id, _)| (*id).clone()));
    }
    Ok(selected)
}

/// Predicted urban/rural labels from raw urban scores: threshold at the
/// quantile that matches the training composition, ties by ascending id.
pub fn predicted_group_labels(
    ids: &[String],
    urban_scores: &[f64],
    train_rural_share: f64,
) -> Vec<bool> {
    let n = ids.len();
    let n_urban = n - round_half_up(train_rural_share * n as f64).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        urban_scores[b]
            .partial_cmp(&urban_scores[a])
            .unwrap()
            .then_with(|| ids[a].cmp(&ids[b]))
    });
    let mut labels = vec![false; n];
    for &i in &order[..n_urban] {
        labels[i] = true;
    }
    labels
}
