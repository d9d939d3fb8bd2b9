use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use geofair::config::PipelineConfig;
use geofair::data::save_dataset;
use geofair::error::{Error, Result};
use geofair::geoprep::{aggregate_rural_units, load_geo_units, rural_summary, save_aggregation};
use geofair::report::{prepare_inputs, run_audit, write_figure_data};
use geofair::synth::{generate_country, suite_config};

#[derive(Parser)]
#[command(
    name = "geofair",
    version,
    about = "Audit urban/rural fairness of satellite-feature poverty maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic country: region table, tile raster, manifest
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "GEOFAIR_OUT")]
        out: PathBuf,
        /// Override the generation seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Featurize tiles and write the per-region feature matrix
    Featurize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "GEOFAIR_OUT")]
        out: PathBuf,
        /// Override the base seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run repeated train/test audits and write result tables
    Audit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "GEOFAIR_OUT")]
        out: PathBuf,
        /// Override the base seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of repeated runs
        #[arg(long)]
        runs: Option<usize>,
        /// Worker threads (1 forces sequential execution)
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Merge small rural units under area/constituent rules
    Aggregate {
        /// Unit table (id, area, constituent_count, consumption, population, urban)
        units: PathBuf,
        /// Adjacency table (unit_id, neighbor_id, shared_length)
        adjacency: PathBuf,
        #[arg(long, env = "GEOFAIR_OUT")]
        out: PathBuf,
        #[arg(long, default_value_t = 25.0)]
        area_threshold: f64,
        #[arg(long, default_value_t = 25)]
        max_constituents: usize,
    },
    /// Emit per-figure plot-data CSVs from an audit result directory
    Report {
        /// Audit result directory
        results: PathBuf,
        #[arg(long, env = "GEOFAIR_OUT")]
        out: PathBuf,
    },
}

fn load_config(path: &Path, seed: Option<u64>, runs: Option<usize>) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::from_file(path)?;
    if let Some(s) = seed {
        cfg.base_seed = s;
    }
    if let Some(r) = runs {
        cfg.n_runs = r;
    }
    Ok(cfg)
}

fn cmd_synth(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed, None)?;
    let name = cfg.synth.as_ref().ok_or_else(|| {
        Error::Config("synth requires a 'synth = <name>' config".into())
    })?;
    let mut synth_cfg = suite_config(name)?;
    if let Some(s) = seed {
        synth_cfg.seed = s;
    }
    let (dataset, raster) = generate_country(&synth_cfg)?;
    fs::create_dir_all(out)?;
    save_dataset(&dataset, out.join("regions.csv"), Some(&out.join("overlaps.csv")))?;
    raster.save(&out.join("raster.bin"), &out.join("raster.idx"))?;
    let mut manifest = format!("config_name = {name}\nseed = {}\n", synth_cfg.seed);
    for (k, v) in cfg.manifest() {
        manifest.push_str(&format!("{k} = {v}\n"));
    }
    fs::write(out.join("manifest.txt"), manifest)?;
    println!(
        "wrote {} regions ({} urban / {} rural) and {} tiles to {}",
        dataset.len(),
        dataset.n_urban(),
        dataset.n_rural(),
        raster.tiles.len(),
        out.display()
    );
    Ok(())
}

fn cmd_featurize(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed, None)?;
    let inputs = prepare_inputs(&cfg)?;
    fs::create_dir_all(out)?;
    inputs.features.save(&out.join("features.csv"))?;
    println!(
        "wrote {} x {} feature matrix to {}",
        inputs.features.rows.len(),
        inputs.features.d,
        out.join("features.csv").display()
    );
    Ok(())
}

fn cmd_audit(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    runs: Option<usize>,
    jobs: Option<usize>,
) -> Result<()> {
    let cfg = load_config(config, seed, runs)?;
    let jobs = jobs.or(cfg.jobs);
    if let Some(j) = jobs {
        // ignore failure: the global pool may already exist in tests
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global();
    }
    let parallel = jobs != Some(1);
    let summary = run_audit(&cfg, out, parallel)?;
    println!(
        "audit complete: {} runs, {} summary metrics, results in {}",
        summary.runs.len(),
        summary.table.len(),
        out.display()
    );
    Ok(())
}

fn cmd_aggregate(
    units_path: &Path,
    adjacency_path: &Path,
    out: &Path,
    area_threshold: f64,
    max_constituents: usize,
) -> Result<()> {
    let units = load_geo_units(units_path, adjacency_path)?;
    if units.iter().all(|u| u.urban) {
        eprintln!("warning: no rural units; output equals input");
    }
    let (n_before, median_before) = rural_summary(&units);
    let agg = aggregate_rural_units(&units, area_threshold, max_constituents)?;
    let (n_after, median_after) = rural_summary(&agg.units);
    fs::create_dir_all(out)?;
    save_aggregation(&agg, &out.join("merged.csv"), &out.join("lineage.csv"))?;
    println!(
        "before: {n_before} (median {median_before} km²) after: {n_after} (median {median_after} km²)"
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out, seed } => cmd_synth(&config, &out, seed),
        Command::Featurize { config, out, seed } => cmd_featurize(&config, &out, seed),
        Command::Audit {
            config,
            out,
            seed,
            runs,
            jobs,
        } => cmd_audit(&config, &out, seed, runs, jobs),
        Command::Aggregate {
            units,
            adjacency,
            out,
            area_threshold,
            max_constituents,
        } => cmd_aggregate(&units, &adjacency, &out, area_threshold, max_constituents),
        Command::Report { results, out } => write_figure_data(&results, &out),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
