//! The seeded train/test experiment runner: split, cross-validate, fit,
//! predict, audit, and run the policy suite; plus repeated-run summaries.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::audit::{
    auc, bias_metrics, driver_correlations, driver_stats, group_metrics, BiasMetrics,
    DriverStats, GroupMetrics, Scope, ScopeOutcome,
};
use crate::data::{split_dataset, RegionDataset, Split};
use crate::error::{Error, Result};
use crate::featurize::FeatureMatrix;
use crate::model::{cross_validate, fit_ridge, fit_urban_scorer, predict, RidgeFit};
use crate::policy::{
    allocation_share, apply_mean_calibration, apply_threshold_calibration,
    learn_mean_calibration, learn_threshold_calibration, noised_baseline,
    predicted_group_labels, select_poorest, targeting_accuracy, targeting_curve, GroupSource,
    PolicyOutcome, PolicyRule, ScoreSource,
};

/// Stable seed derivation for independent RNG streams (FNV-1a).
pub fn derive_seed(base: u64, salt: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in base.to_le_bytes().iter().chain(salt.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train_fraction: f64,
    pub lambda_grid: Vec<f64>,
    pub cv_folds: usize,
    pub budget_fraction: f64,
    pub threshold_grid: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train_fraction: 0.75,
            lambda_grid: crate::model::default_lambda_grid(),
            cv_folds: 3,
            budget_fraction: 0.2,
            threshold_grid: crate::policy::default_threshold_grid(),
        }
    }
}

/// Everything produced by one seeded train/test experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub split: Split,
    pub lambda_wealth: f64,
    pub lambda_urban: f64,
    pub test_ids: Vec<String>,
    pub truth_wealth: Vec<f64>,
    pub predicted_wealth: Vec<f64>,
    pub urban_scores: Vec<f64>,
    pub test_urban: Vec<bool>,
    pub noised_scores: Vec<f64>,
    pub metrics: GroupMetrics,
    pub urban_auc: f64,
    pub bias: BiasMetrics,
    pub bias_noised: BiasMetrics,
    pub policies: Vec<PolicyOutcome>,
    pub drivers: DriverStats,
}

impl RunResult {
    /// Rural allocation share for a given rule, when present.
    pub fn rural_share(
        &self,
        scope: Scope,
        source: ScoreSource,
        groups: GroupSource,
    ) -> Option<f64> {
        self.policies
            .iter()
            .find(|p| {
                p.rule.scope == scope
                    && p.rule.score_source == source
                    && p.rule.group_source == groups
            })
            .map(|p| p.rural_share)
    }

    /// b-hat - b at the run's budget fraction for a prediction-side source.
    pub fn delta_b(&self, source: ScoreSource, groups: GroupSource) -> Option<f64> {
        let b = self.rural_share(Scope::Overall, ScoreSource::Truth, GroupSource::Truth)?;
        Some(self.rural_share(Scope::Overall, source, groups)? - b)
    }

    /// Flatten every stored metric into (name, value) rows.
    pub fn metric_map(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        let mut scope_metrics = |outcome: &ScopeOutcome| {
            if let ScopeOutcome::Computed(s) = outcome {
                m.insert(format!("r2_{}", s.scope), s.r2);
                m.insert(format!("pearson_{}", s.scope), s.pearson);
                m.insert(format!("spearman_{}", s.scope), s.spearman);
            }
        };
        scope_metrics(&self.metrics.overall);
        scope_metrics(&self.metrics.urban);
        scope_metrics(&self.metrics.rural);
        m.insert("auc_urban".into(), self.urban_auc);
        m.insert("lambda_wealth".into(), self.lambda_wealth);
        m.insert("lambda_urban".into(), self.lambda_urban);
        m.insert("signed_error_urban".into(), self.bias.mean_signed_error_urban);
        m.insert("signed_error_rural".into(), self.bias.mean_signed_error_rural);
        m.insert("rank_error_urban".into(), self.bias.mean_rank_error_urban);
        m.insert("rank_error_rural".into(), self.bias.mean_rank_error_rural);
        m.insert(
            "signed_error_urban_noised".into(),
            self.bias_noised.mean_signed_error_urban,
        );
        m.insert(
            "signed_error_rural_noised".into(),
            self.bias_noised.mean_signed_error_rural,
        );
        m.insert(
            "rank_error_urban_noised".into(),
            self.bias_noised.mean_rank_error_urban,
        );
        m.insert(
            "rank_error_rural_noised".into(),
            self.bias_noised.mean_rank_error_rural,
        );
        m.insert("p1".into(), self.drivers.p1);
        m.insert("p1_abs".into(), self.drivers.p1.abs());
        m.insert("p2".into(), self.drivers.p2);
        for p in &self.policies {
            let key = format!(
                "{}/{}/{}",
                p.rule.scope, p.rule.score_source, p.rule.group_source
            );
            m.insert(format!("precision/{key}"), p.precision);
            m.insert(format!("rural_share/{key}"), p.rural_share);
            if !p.curve.is_empty() {
                m.insert(format!("curve_auc/{key}"), p.curve_auc);
            }
        }
        for (source, groups) in [
            (ScoreSource::Prediction, GroupSource::Truth),
            (ScoreSource::Noised, GroupSource::Truth),
            (ScoreSource::CalibratedMean, GroupSource::Truth),
            (ScoreSource::CalibratedMean, GroupSource::Predicted),
            (ScoreSource::CalibratedThreshold, GroupSource::Truth),
            (ScoreSource::CalibratedThreshold, GroupSource::Predicted),
        ] {
            if let Some(d) = self.delta_b(source, groups) {
                m.insert(format!("delta_b/{source}/{groups}"), d);
            }
        }
        m
    }
}

fn gather_rows(
    dataset: &RegionDataset,
    features: &FeatureMatrix,
    ids: &BTreeSet<String>,
) -> Result<(Vec<String>, Vec<Vec<f64>>, Vec<f64>, Vec<bool>)> {
    let index: BTreeMap<&str, usize> = features
        .region_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut out_ids = Vec::new();
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut u = Vec::new();
    for r in &dataset.regions {
        if !ids.contains(&r.id) {
            continue;
        }
        let row = index
            .get(r.id.as_str())
            .ok_or_else(|| Error::Data(format!("no features for region '{}'", r.id)))?;
        out_ids.push(r.id.clone());
        x.push(features.rows[*row].clone());
        y.push(r.wealth);
        u.push(r.urban);
    }
    Ok((out_ids, x, y, u))
}

struct ScoreSet<'a> {
    source: ScoreSource,
    groups: GroupSource,
    scores: &'a [f64],
}

/// One full experiment for a single seed: split, CV, fit wealth and urban
/// models, audit the test set, and evaluate the policy suite.
pub fn run_experiment(
    dataset: &RegionDataset,
    features: &FeatureMatrix,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<RunResult> {
    run_inner(dataset, features, cfg, seed).map_err(|e| Error::Run {
        seed,
        source: Box::new(e),
    })
}

fn run_inner(
    dataset: &RegionDataset,
    features: &FeatureMatrix,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<RunResult> {
    if dataset.label_transform.is_none() {
        return Err(Error::Argument(
            "dataset must be standardized before experiments".into(),
        ));
    }
    // derive a fresh stream: the raw run seed may coincide with the
    // dataset generation seed, which would replay its shuffle exactly
    let split = split_dataset(dataset, cfg.train_fraction, derive_seed(seed, "split"))?;
    let (_, x_train, y_train, u_train) = gather_rows(dataset, features, &split.train_ids)?;
    let (test_ids, x_test, y_test, u_test) = gather_rows(dataset, features, &split.test_ids)?;

    let (lambda_wealth, _) = cross_validate(
        &x_train,
        &y_train,
        &cfg.lambda_grid,
        cfg.cv_folds,
        derive_seed(seed, "cv-wealth"),
    )?;
    let wealth_fit: RidgeFit = fit_ridge(&x_train, &y_train, lambda_wealth)?;
    let urban_fit = fit_urban_scorer(
        &x_train,
        &u_train,
        &cfg.lambda_grid,
        cfg.cv_folds,
        derive_seed(seed, "cv-urban"),
    )?;

    let predicted_wealth = predict(&wealth_fit, &x_test)?;
    let urban_scores = predict(&urban_fit, &x_test)?;
    let train_pred_wealth = predict(&wealth_fit, &x_train)?;

    let metrics = group_metrics(&y_test, &predicted_wealth, &u_test)?;
    let urban_auc = auc(&u_test, &urban_scores)?;
    let bias = bias_metrics(&y_test, &predicted_wealth, &u_test)?;

    let test_mse = y_test
        .iter()
        .zip(&predicted_wealth)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / y_test.len() as f64;
    let noised_scores = noised_baseline(&y_test, test_mse, derive_seed(seed, "noise"))?;
    let bias_noised = bias_metrics(&y_test, &noised_scores, &u_test)?;

    let drivers = driver_stats(&y_test, &predicted_wealth, &urban_scores)?;

    // Calibrations are learned per run on the training split, with
    // ground-truth train groups; the group source only varies at
    // application time.
    let train_ids_vec: Vec<String> = split.train_ids.iter().cloned().collect();
    let mean_cal = learn_mean_calibration(
        &train_ids_vec,
        &train_pred_wealth,
        &y_train,
        &u_train,
        GroupSource::Truth,
    );
    let thresh_cal = learn_threshold_calibration(
        &train_ids_vec,
        &y_train,
        &u_train,
        cfg.budget_fraction,
        GroupSource::Truth,
    );
    let train_rural_share =
        u_train.iter().filter(|&&u| !u).count() as f64 / u_train.len() as f64;
    let predicted_groups = predicted_group_labels(&test_ids, &urban_scores, train_rural_share);

    let mean_cal_truth = mean_cal
        .as_ref()
        .map(|c| apply_mean_calibration(c, &predicted_wealth, &u_test))
        .ok();
    let mean_cal_pred = mean_cal
        .as_ref()
        .map(|c| apply_mean_calibration(c, &predicted_wealth, &predicted_groups))
        .ok();

    let mut policies = Vec::new();

    // Score-based rules per scope.
    let score_sets: Vec<ScoreSet> = {
        let mut v = vec![
            ScoreSet {
                source: ScoreSource::Truth,
                groups: GroupSource::Truth,
                scores: &y_test,
            },
            ScoreSet {
                source: ScoreSource::Prediction,
                groups: GroupSource::Truth,
                scores: &predicted_wealth,
            },
            ScoreSet {
                source: ScoreSource::Noised,
                groups: GroupSource::Truth,
                scores: &noised_scores,
            },
        ];
        if let Some(s) = mean_cal_truth.as_ref() {
            v.push(ScoreSet {
                source: ScoreSource::CalibratedMean,
                groups: GroupSource::Truth,
                scores: s,
            });
        }
        if let Some(s) = mean_cal_pred.as_ref() {
            v.push(ScoreSet {
                source: ScoreSource::CalibratedMean,
                groups: GroupSource::Predicted,
                scores: s,
            });
        }
        v
    };

    for scope in [Scope::Overall, Scope::Urban, Scope::Rural] {
        let scope_ids: BTreeSet<String> = test_ids
            .iter()
            .zip(&u_test)
            .filter(|(_, &u)| match scope {
                Scope::Overall => true,
                Scope::Urban => u,
                Scope::Rural => !u,
            })
            .map(|(id, _)| id.clone())
            .collect();
        if scope_ids.len() < 2 {
            continue;
        }
        let truth_sel = select_poorest(&test_ids, &y_test, &scope_ids, cfg.budget_fraction)?;
        for set in &score_sets {
            if scope != Scope::Overall && set.source != ScoreSource::Prediction {
                // Within-group programs are evaluated for the satellite
                // predictions; national programs for every source.
                if set.source != ScoreSource::Truth {
                    continue;
                }
            }
            let selected =
                select_poorest(&test_ids, set.scores, &scope_ids, cfg.budget_fraction)?;
            let precision = targeting_accuracy(&selected, &truth_sel)?;
            let rural_share = allocation_share(&selected, &test_ids, &u_test);
            let (curve, curve_auc) = if scope == Scope::Overall {
                let scoped_ids: Vec<String> = scope_ids.iter().cloned().collect();
                let scoped_scores: Vec<f64> = test_ids
                    .iter()
                    .zip(set.scores)
                    .filter(|(id, _)| scope_ids.contains(*id))
                    .map(|(_, &s)| s)
                    .collect();
                let scoped_urban: Vec<bool> = test_ids
                    .iter()
                    .zip(&u_test)
                    .filter(|(id, _)| scope_ids.contains(*id))
                    .map(|(_, &u)| u)
                    .collect();
                targeting_curve(&scoped_ids, &scoped_scores, &scoped_urban, &cfg.threshold_grid)?
            } else {
                (Vec::new(), 0.0)
            };
            policies.push(PolicyOutcome {
                rule: PolicyRule {
                    scope,
                    budget_fraction: cfg.budget_fraction,
                    score_source: set.source,
                    group_source: set.groups,
                },
                selected_ids: selected,
                precision,
                rural_share,
                curve,
                curve_auc,
            });
        }
    }

    // Threshold calibration: selection is quota-based rather than
    // score-based; its curve re-learns the quota at each threshold.
    if let Ok(cal) = thresh_cal {
        let overall_scope: BTreeSet<String> = test_ids.iter().cloned().collect();
        let truth_sel = select_poorest(&test_ids, &y_test, &overall_scope, cfg.budget_fraction)?;
        for (groups, labels) in [
            (GroupSource::Truth, &u_test),
            (GroupSource::Predicted, &predicted_groups),
        ] {
            let selected =
                match apply_threshold_calibration(&cal, &test_ids, &predicted_wealth, labels) {
                    Ok(s) => s,
                    Err(Error::Feasibility(_)) => continue,
                    Err(e) => return Err(e),
                };
            let precision = if selected.len() == truth_sel.len() {
                targeting_accuracy(&selected, &truth_sel)?
            } else {
                // largest-remainder rounding can move the total by one
                selected.intersection(&truth_sel).count() as f64 / truth_sel.len() as f64
            };
            let rural_share = allocation_share(&selected, &test_ids, &u_test);
            let mut curve = Vec::with_capacity(cfg.threshold_grid.len());
            for &t in &cfg.threshold_grid {
                let cal_t = learn_threshold_calibration(
                    &train_ids_vec,
                    &y_train,
                    &u_train,
                    t,
                    GroupSource::Truth,
                )?;
                match apply_threshold_calibration(&cal_t, &test_ids, &predicted_wealth, labels) {
                    Ok(sel) if sel.is_empty() => continue,
                    Ok(sel) => curve.push((t, allocation_share(&sel, &test_ids, &u_test))),
                    Err(Error::Feasibility(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
            let mut curve_auc = 0.0;
            for w in curve.windows(2) {
                curve_auc += 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1);
            }
            curve_auc /= 100.0;
            policies.push(PolicyOutcome {
                rule: PolicyRule {
                    scope: Scope::Overall,
                    budget_fraction: cfg.budget_fraction,
                    score_source: ScoreSource::CalibratedThreshold,
                    group_source: groups,
                },
                selected_ids: selected,
                precision,
                rural_share,
                curve,
                curve_auc,
            });
        }
    }

    Ok(RunResult {
        seed,
        split,
        lambda_wealth,
        lambda_urban: urban_fit.lambda,
        test_ids,
        truth_wealth: y_test,
        predicted_wealth,
        urban_scores,
        test_urban: u_test,
        noised_scores,
        metrics,
        urban_auc,
        bias,
        bias_noised,
        policies,
        drivers,
    })
}

/// Per-metric mean and two standard errors over repeated runs.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub metric: String,
    pub mean: f64,
    pub two_se: f64,
    pub n_runs: usize,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub runs: Vec<RunResult>,
    pub table: Vec<SummaryRow>,
}

pub fn summarize_runs(runs: &[RunResult]) -> Vec<SummaryRow> {
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for run in runs {
        for (k, v) in run.metric_map() {
            values.entry(k).or_default().push(v);
        }
    }
    values
        .into_iter()
        .map(|(metric, vs)| {
            let n = vs.len();
            let mean = vs.iter().sum::<f64>() / n as f64;
            let var = if n > 1 {
                vs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            SummaryRow {
                metric,
                mean,
                two_se: 2.0 * (var.sqrt() / (n as f64).sqrt()),
                n_runs: n,
            }
        })
        .collect()
}

/// Repeat the experiment with seeds base_seed + run index. Runs are
/// independent given their seeds, so parallel execution matches
/// sequential output exactly.
pub fn repeat_experiments(
    dataset: &RegionDataset,
    features: &FeatureMatrix,
    cfg: &ExperimentConfig,
    n_runs: usize,
    base_seed: u64,
    parallel: bool,
) -> Result<RunSummary> {
    if n_runs == 0 {
        return Err(Error::Argument("n_runs must be >= 1".into()));
    }
    let seeds: Vec<u64> = (0..n_runs as u64).map(|i| base_seed + i).collect();
    let runs: Vec<RunResult> = if parallel {
        seeds
            .par_iter()
            .map(|&s| run_experiment(dataset, features, cfg, s))
            .collect::<Result<_>>()?
    } else {
        seeds
            .iter()
            .map(|&s| run_experiment(dataset, features, cfg, s))
            .collect::<Result<_>>()?
    };
    let table = summarize_runs(&runs);
    Ok(RunSummary { runs, table })
}

/// Cross-run correlations of the allocation gap with the driver stats,
/// for either the 20%-threshold gap or the curve-area gap.
pub fn driver_correlation_summary(
    runs: &[RunResult],
    use_curve_auc: bool,
) -> Result<(f64, f64)> {
    let mut delta_b = Vec::with_capacity(runs.len());
    let mut p1 = Vec::with_capacity(runs.len());
    let mut p2 = Vec::with_capacity(runs.len());
    for r in runs {
        let d = if use_curve_auc {
            let pred = r
                .policies
                .iter()
                .find(|p| {
                    p.rule.scope == Scope::Overall
                        && p.rule.score_source == ScoreSource::Prediction
                })
                .map(|p| p.curve_auc);
            let truth = r
                .policies
                .iter()
                .find(|p| {
                    p.rule.scope == Scope::Overall && p.rule.score_source == ScoreSource::Truth
                })
                .map(|p| p.curve_auc);
            match (pred, truth) {
                (Some(a), Some(b)) => a - b,
                _ => continue,
            }
        } else {
            match r.delta_b(ScoreSource::Prediction, GroupSource::Truth) {
                Some(d) => d,
                None => continue,
            }
        };
        delta_b.push(d);
        p1.push(r.drivers.p1);
        p2.push(r.drivers.p2);
    }
    driver_correlations(&delta_b, &p1, &p2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize::{aggregate_region_features, featurize_raster, make_filter_bank};
    use crate::synth::{generate_country, suite_config, SynthConfig};

    fn pipeline_inputs(cfg: &SynthConfig) -> (RegionDataset, FeatureMatrix) {
        let (dataset, raster) = generate_country(cfg).unwrap();
        let bank = make_filter_bank(derive_seed(cfg.seed, "bank"), 16, 3).unwrap();
        let tile_features = featurize_raster(&raster, &bank).unwrap();
        let features = aggregate_region_features(&tile_features, &dataset, 100, cfg.seed).unwrap();
        (dataset, features)
    }

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_regions: 120,
            tile_grid: (30, 30),
            tiles_per_region: (1, 2),
            ..suite_config("high-visibility").unwrap()
        }
    }

    #[test]
    fn same_seed_gives_identical_run_result() {
        let (dataset, features) = pipeline_inputs(&small_cfg());
        let cfg = ExperimentConfig::default();
        let a = run_experiment(&dataset, &features, &cfg, 5).unwrap();
        let b = run_experiment(&dataset, &features, &cfg, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn predictions_cover_exactly_the_test_ids() {
        let (dataset, features) = pipeline_inputs(&small_cfg());
        let cfg = ExperimentConfig::default();
        let r = run_experiment(&dataset, &features, &cfg, 1).unwrap();
        let got: BTreeSet<String> = r.test_ids.iter().cloned().collect();
        assert_eq!(got, r.split.test_ids);
        assert_eq!(r.predicted_wealth.len(), r.test_ids.len());
    }

    #[test]
    fn noiseless_high_visibility_recovers_wealth_order() {
        let cfg = SynthConfig {
            n_regions: 400,
            within_visibility: 1.0,
            pixel_noise: 0.0,
            tile_grid: (40, 40),
            tiles_per_region: (1, 3),
            ..suite_config("high-visibility").unwrap()
        };
        let (dataset, features) = pipeline_inputs(&cfg);
        let r = run_experiment(&dataset, &features, &ExperimentConfig::default(), 0).unwrap();
        let rho = r.metrics.overall.metrics().unwrap().spearman;
        assert!(rho >= 0.9, "overall spearman = {rho}");
    }

    #[test]
    fn repeat_uses_distinct_seeds_and_consistent_means() {
        let (dataset, features) = pipeline_inputs(&small_cfg());
        let cfg = ExperimentConfig::default();
        let summary = repeat_experiments(&dataset, &features, &cfg, 5, 100, false).unwrap();
        let seeds: BTreeSet<u64> = summary.runs.iter().map(|r| r.seed).collect();
        assert_eq!(seeds.len(), 5);
        let row = summary
            .table
            .iter()
            .find(|r| r.metric == "r2_overall")
            .unwrap();
        let direct: f64 = summary
            .runs
            .iter()
            .map(|r| r.metrics.overall.metrics().unwrap().r2)
            .sum::<f64>()
            / 5.0;
        assert!((row.mean - direct).abs() < 1e-12);
        assert!(row.two_se.is_finite() && row.two_se >= 0.0);
    }

    #[test]
    fn parallel_and_sequential_runs_agree() {
        let (dataset, features) = pipeline_inputs(&small_cfg());
        let cfg = ExperimentConfig::default();
        let seq = repeat_experiments(&dataset, &features, &cfg, 4, 7, false).unwrap();
        let par = repeat_experiments(&dataset, &features, &cfg, 4, 7, true).unwrap();
        assert_eq!(seq.runs, par.runs);
        assert_eq!(seq.table, par.table);
    }
}
