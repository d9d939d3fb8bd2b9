//! Audit orchestration and emission of every table and plot-data file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::audit::spearman;
use crate::config::PipelineConfig;
use crate::data::{load_dataset, standardize_labels, RegionDataset, Schema};
use crate::error::{Error, Result};
use crate::experiment::{
    derive_seed, driver_correlation_summary, repeat_experiments, RunSummary,
};
use crate::featurize::{
    aggregate_region_features, featurize_raster, make_filter_bank, FeatureMatrix,
};
use crate::geoprep::{
    feature_distance_report, pca_project_2d, single_tile_distance_report, RepresentationReport,
};
use crate::synth::{generate_country, suite_config, TileRaster};

/// Everything the audit needs in memory: standardized labels, per-region
/// features, per-tile features, and the label/urbanization correlation.
pub struct AuditInputs {
    pub dataset: RegionDataset,
    pub features: FeatureMatrix,
    pub tile_features: BTreeMap<u64, Vec<f64>>,
    pub rho_wu: f64,
}

/// Build the audit inputs from a pipeline config: either a named
/// synthetic country or a dataset + raster pair on disk.
pub fn prepare_inputs(cfg: &PipelineConfig) -> Result<AuditInputs> {
    let (dataset, raster) = if let Some(name) = &cfg.synth {
        generate_country(&suite_config(name)?)?
    } else {
        let data_path = cfg.dataset_path.as_ref().expect("validated");
        let raster_path = cfg
            .raster_path
            .as_ref()
            .ok_or_else(|| Error::MissingInput("raster_path (required with dataset_path)".into()))?;
        let raw = load_dataset(data_path, cfg.overlaps_path.as_deref(), &Schema::default())?;
        let dataset = standardize_labels(&raw, cfg.apply_log)?;
        let index_path = raster_path.with_extension("idx");
        (dataset, TileRaster::load(raster_path, &index_path)?)
    };
    let bank = make_filter_bank(derive_seed(cfg.base_seed, "bank"), cfg.n_filters, cfg.patch_size)?;
    let tile_features = featurize_raster(&raster, &bank)?;
    let features = aggregate_region_features(
        &tile_features,
        &dataset,
        cfg.max_tiles,
        derive_seed(cfg.base_seed, "aggregate"),
    )?;
    let w: Vec<f64> = dataset.regions.iter().map(|r| r.wealth).collect();
    let u: Vec<f64> = dataset
        .regions
        .iter()
        .map(|r| f64::from(r.urban as u8))
        .collect();
    let rho_wu = spearman(&w, &u)?;
    Ok(AuditInputs {
        dataset,
        features,
        tile_features,
        rho_wu,
    })
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Run the repeated experiments and write the full audit result
/// directory: manifest, per-run metrics, summary, curves, driver
/// correlations, and representation tables.
pub fn run_audit(cfg: &PipelineConfig, out_dir: &Path, parallel: bool) -> Result<RunSummary> {
    let inputs = prepare_inputs(cfg)?;
    fs::create_dir_all(out_dir)?;

    let summary = repeat_experiments(
        &inputs.dataset,
        &inputs.features,
        &cfg.experiment,
        cfg.n_runs,
        cfg.base_seed,
        parallel,
    )?;

    let mut manifest = String::new();
    writeln!(manifest, "config_name = {}", cfg.source_name()).unwrap();
    for (k, v) in cfg.manifest() {
        writeln!(manifest, "{k} = {v}").unwrap();
    }
    write_atomic(&out_dir.join("manifest.txt"), &manifest)?;

    let mut runs = String::from("run_seed,metric,value\n");
    for run in &summary.runs {
        for (metric, value) in run.metric_map() {
            writeln!(runs, "{},{metric},{value}", run.seed).unwrap();
        }
    }
    write_atomic(&out_dir.join("runs.csv"), &runs)?;

    let mut table = String::from("metric,mean,two_se,n_runs\n");
    for row in &summary.table {
        writeln!(table, "{},{},{},{}", row.metric, row.mean, row.two_se, row.n_runs).unwrap();
    }
    write_atomic(&out_dir.join("summary.csv"), &table)?;

    let mut curves = String::from("run_seed,score_source,group_source,threshold,rural_share\n");
    for run in &summary.runs {
        for p in &run.policies {
            for (t, share) in &p.curve {
                writeln!(
                    curves,
                    "{},{},{},{t},{share}",
                    run.seed, p.rule.score_source, p.rule.group_source
                )
                .unwrap();
            }
        }
    }
    write_atomic(&out_dir.join("curves.csv"), &curves)?;

    let mut drivers = String::from("gap,r1_p1,r2_p2\n");
    if summary.runs.len() >= 3 {
        if let Ok((r1, r2)) = driver_correlation_summary(&summary.runs, false) {
            writeln!(drivers, "threshold20,{r1},{r2}").unwrap();
        }
        if let Ok((r1, r2)) = driver_correlation_summary(&summary.runs, true) {
            writeln!(drivers, "curve,{r1},{r2}").unwrap();
        }
    }
    write_atomic(&out_dir.join("drivers.csv"), &drivers)?;

    let urban: Vec<bool> = inputs.dataset.regions.iter().map(|r| r.urban).collect();
    let rep_seed = derive_seed(cfg.base_seed, "representation");
    let agg_rep = feature_distance_report(&inputs.features, &urban, 2000, rep_seed)?;
    let single_rep =
        single_tile_distance_report(&inputs.tile_features, &inputs.dataset, 2000, rep_seed)?;
    let pca = pca_project_2d(&inputs.features)?;
    write_representation(out_dir, &agg_rep, &single_rep, &pca, inputs.rho_wu)?;

    let mut pca_rows = String::from("region_id,urban,pc1,pc2\n");
    for (region, proj) in inputs.dataset.regions.iter().zip(&pca.pca_projections) {
        writeln!(pca_rows, "{},{},{},{}", region.id, region.urban, proj[0], proj[1]).unwrap();
    }
    write_atomic(&out_dir.join("pca.csv"), &pca_rows)?;

    let rho_row = summary
        .table
        .iter()
        .find(|r| r.metric == "spearman_overall")
        .ok_or_else(|| Error::Degenerate("no overall spearman across runs".into()))?;
    let mut perf = String::from("config,rho_wu,spearman_overall_mean,spearman_overall_2se\n");
    writeln!(
        perf,
        "{},{},{},{}",
        cfg.source_name(),
        inputs.rho_wu,
        rho_row.mean,
        rho_row.two_se
    )
    .unwrap();
    write_atomic(&out_dir.join("rho_performance.csv"), &perf)?;

    Ok(summary)
}

fn write_representation(
    out_dir: &Path,
    agg: &RepresentationReport,
    single: &RepresentationReport,
    pca: &RepresentationReport,
    rho_wu: f64,
) -> Result<()> {
    let mut rep = String::from("statistic,value\n");
    let rows = [
        ("dist_rural_rural", agg.mean_dist_rural_rural),
        ("dist_urban_urban", agg.mean_dist_urban_urban),
        ("dist_urban_rural", agg.mean_dist_urban_rural),
        ("single_dist_rural_rural", single.mean_dist_rural_rural),
        ("single_dist_urban_urban", single.mean_dist_urban_urban),
        ("single_dist_urban_rural", single.mean_dist_urban_rural),
        ("pca_top2_share", pca.explained_variance_share),
        ("rho_wu", rho_wu),
    ];
    for (k, v) in rows {
        writeln!(rep, "{k},{v}").unwrap();
    }
    write_atomic(&out_dir.join("representation.csv"), &rep)
}

fn read_table(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect())
}

fn read_manifest_name(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path)?;
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            if k.trim() == "config_name" {
                return Ok(v.trim().to_string());
            }
        }
    }
    Err(Error::Data("manifest has no config_name".into()))
}

/// Turn an audit result directory into one long-format CSV per figure
/// panel. No rendering; the data series are the contract.
pub fn write_figure_data(result_dir: &Path, out_dir: &Path) -> Result<()> {
    let required = [
        "manifest.txt",
        "summary.csv",
        "representation.csv",
        "pca.csv",
        "curves.csv",
        "rho_performance.csv",
    ];
    let missing: Vec<String> = required
        .iter()
        .filter(|f| !result_dir.join(f).exists())
        .map(|f| f.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingInput(missing.join(", ")));
    }
    fs::create_dir_all(out_dir)?;

    let config = read_manifest_name(&result_dir.join("manifest.txt"))?;
    let summary = read_table(&result_dir.join("summary.csv"))?;
    let summary_map: BTreeMap<&str, (&str, &str)> = summary
        .iter()
        .map(|row| (row[0].as_str(), (row[1].as_str(), row[2].as_str())))
        .collect();

    let scope_panel = |metric_prefix: &str, value_name: &str| -> String {
        let mut out = format!("config,scope,{value_name}_mean,{value_name}_2se\n");
        for scope in ["overall", "urban", "rural"] {
            if let Some((mean, se)) = summary_map.get(format!("{metric_prefix}_{scope}").as_str())
            {
                writeln!(out, "{config},{scope},{mean},{se}").unwrap();
            }
        }
        out
    };
    write_atomic(&out_dir.join("fig1a.csv"), &scope_panel("spearman", "rho"))?;
    write_atomic(&out_dir.join("fig1b.csv"), &scope_panel("r2", "r2"))?;

    let rep = read_table(&result_dir.join("representation.csv"))?;
    let rep_map: BTreeMap<&str, &str> = rep
        .iter()
        .map(|row| (row[0].as_str(), row[1].as_str()))
        .collect();
    let mut fig2a = String::from("config,pair_type,mean_distance\n");
    for (pair, key) in [
        ("rural-rural", "dist_rural_rural"),
        ("urban-urban", "dist_urban_urban"),
        ("urban-rural", "dist_urban_rural"),
    ] {
        writeln!(fig2a, "{config},{pair},{}", rep_map[key]).unwrap();
    }
    write_atomic(&out_dir.join("fig2a.csv"), &fig2a)?;

    let share = rep_map["pca_top2_share"];
    let mut fig2b = String::from("config,region_id,urban,pc1,pc2,explained_share\n");
    for row in read_table(&result_dir.join("pca.csv"))? {
        writeln!(fig2b, "{config},{},{},{},{},{share}", row[0], row[1], row[2], row[3]).unwrap();
    }
    write_atomic(&out_dir.join("fig2b.csv"), &fig2b)?;

    let mut fig3 = String::from("config,score_source,group_source,delta_b_mean,delta_b_2se\n");
    for (metric, (mean, se)) in &summary_map {
        if let Some(rest) = metric.strip_prefix("delta_b/") {
            if let Some((source, groups)) = rest.split_once('/') {
                writeln!(fig3, "{config},{source},{groups},{mean},{se}").unwrap();
            }
        }
    }
    write_atomic(&out_dir.join("fig3.csv"), &fig3)?;

    let mut figs1 = String::from("config,pair_type,single_tile_mean,aggregated_mean\n");
    for (pair, single_key, agg_key) in [
        ("rural-rural", "single_dist_rural_rural", "dist_rural_rural"),
        ("urban-urban", "single_dist_urban_urban", "dist_urban_urban"),
        ("urban-rural", "single_dist_urban_rural", "dist_urban_rural"),
    ] {
        writeln!(figs1, "{config},{pair},{},{}", rep_map[single_key], rep_map[agg_key]).unwrap();
    }
    write_atomic(&out_dir.join("figS1.csv"), &figs1)?;

    // Fig S3 panel D is the targeting curve verbatim.
    let curves = fs::read_to_string(result_dir.join("curves.csv"))?;
    write_atomic(&out_dir.join("figS3.csv"), &curves)?;

    let perf = fs::read_to_string(result_dir.join("rho_performance.csv"))?;
    write_atomic(&out_dir.join("figS4.csv"), &perf)?;

    Ok(())
}

/// Recursively hash a directory's file names and contents (FNV-1a);
/// used to check byte-identical reruns.
pub fn hash_dir(dir: &Path) -> Result<u64> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for path in entries {
        eat(path.file_name().unwrap().to_string_lossy().as_bytes());
        if path.is_dir() {
            eat(&hash_dir(&path)?.to_le_bytes());
        } else {
            eat(&fs::read(&path)?);
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn toy_config() -> PipelineConfig {
        let mut cfg = PipelineConfig::parse("synth = high-visibility\n").unwrap();
        cfg.n_runs = 2;
        cfg.n_filters = 8;
        cfg
    }

    #[test]
    fn audit_writes_all_tables_and_reruns_identically() {
        let dir = tempdir().unwrap();
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        let cfg = toy_config();
        run_audit(&cfg, &out_a, false).unwrap();
        run_audit(&cfg, &out_b, true).unwrap();
        for f in [
            "manifest.txt",
            "runs.csv",
            "summary.csv",
            "curves.csv",
            "drivers.csv",
            "representation.csv",
            "pca.csv",
            "rho_performance.csv",
        ] {
            assert!(out_a.join(f).exists(), "missing {f}");
        }
        assert_eq!(hash_dir(&out_a).unwrap(), hash_dir(&out_b).unwrap());
    }

    #[test]
    fn summary_means_match_per_run_recomputation() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("out");
        let summary = run_audit(&toy_config(), &out, false).unwrap();
        let runs = read_table(&out.join("runs.csv")).unwrap();
        for row in &summary.table {
            let values: Vec<f64> = runs
                .iter()
                .filter(|r| r[1] == row.metric)
                .map(|r| r[2].parse().unwrap())
                .collect();
            assert_eq!(values.len(), row.n_runs);
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            assert!((mean - row.mean).abs() <= 1e-12 * row.mean.abs().max(1.0));
        }
    }

    #[test]
    fn figure_data_is_emitted_per_panel() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("out");
        run_audit(&toy_config(), &out, false).unwrap();
        let figs = dir.path().join("figs");
        write_figure_data(&out, &figs).unwrap();
        let fig1a = fs::read_to_string(figs.join("fig1a.csv")).unwrap();
        assert!(fig1a.starts_with("config,scope,rho_mean,rho_2se"));
        assert!(fig1a.contains("high-visibility,overall"));
        let fig3 = fs::read_to_string(figs.join("fig3.csv")).unwrap();
        assert!(fig3.contains("calibrated-mean"));
        // panel D is a verbatim copy of the curves table
        let curves = fs::read_to_string(out.join("curves.csv")).unwrap();
        assert_eq!(fs::read_to_string(figs.join("figS3.csv")).unwrap(), curves);
    }

    #[test]
    fn missing_tables_are_listed() {
        let dir = tempdir().unwrap();
        let err = write_figure_data(dir.path(), &dir.path().join("figs")).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::MissingInput(_)));
        assert!(msg.contains("summary.csv") && msg.contains("curves.csv"));
    }
}
