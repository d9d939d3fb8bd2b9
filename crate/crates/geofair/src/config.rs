//! Key-value pipeline configuration files and the output manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;

/// Everything one audit run needs: data source, featurization, model,
/// policy, and runner parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Built-in synthetic config name; exclusive with `dataset_path`.
    pub synth: Option<String>,
    pub dataset_path: Option<PathBuf>,
    pub overlaps_path: Option<PathBuf>,
    pub raster_path: Option<PathBuf>,
    pub n_filters: usize,
    pub patch_size: usize,
    pub max_tiles: usize,
    pub experiment: ExperimentConfig,
    pub n_runs: usize,
    pub base_seed: u64,
    pub out_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub apply_log: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            synth: None,
            dataset_path: None,
            overlaps_path: None,
            raster_path: None,
            n_filters: 64,
            patch_size: 3,
            max_tiles: 100,
            experiment: ExperimentConfig::default(),
            n_runs: 10,
            base_seed: 20230801,
            out_dir: None,
            jobs: None,
            apply_log: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for key '{key}'")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|s| parse_num(key, s.trim()))
        .collect()
}

impl PipelineConfig {
    /// Parse a `key = value` file; `#` starts a comment, unknown keys
    /// are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "synth" => cfg.synth = Some(value.to_string()),
                "dataset_path" => cfg.dataset_path = Some(PathBuf::from(value)),
                "overlaps_path" => cfg.overlaps_path = Some(PathBuf::from(value)),
                "raster_path" => cfg.raster_path = Some(PathBuf::from(value)),
                "n_filters" => cfg.n_filters = parse_num(key, value)?,
                "patch_size" => cfg.patch_size = parse_num(key, value)?,
                "max_tiles" => cfg.max_tiles = parse_num(key, value)?,
                "train_fraction" => cfg.experiment.train_fraction = parse_num(key, value)?,
                "cv_folds" => cfg.experiment.cv_folds = parse_num(key, value)?,
                "budget_fraction" => cfg.experiment.budget_fraction = parse_num(key, value)?,
                "lambda_grid" => cfg.experiment.lambda_grid = parse_list(key, value)?,
                "threshold_grid" => cfg.experiment.threshold_grid = parse_list(key, value)?,
                "n_runs" => cfg.n_runs = parse_num(key, value)?,
                "base_seed" => cfg.base_seed = parse_num(key, value)?,
                "out_dir" => cfg.out_dir = Some(PathBuf::from(value)),
                "jobs" => cfg.jobs = Some(parse_num(key, value)?),
                "apply_log" => cfg.apply_log = parse_num(key, value)?,
                _ => return Err(Error::Config(format!("unknown key '{key}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|_| {
            Error::MissingInput(format!("config file '{}'", path.display()))
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.synth.is_some() && self.dataset_path.is_some() {
            return Err(Error::Config(
                "set either 'synth' or 'dataset_path', not both".into(),
            ));
        }
        if self.synth.is_none() && self.dataset_path.is_none() {
            return Err(Error::Config(
                "one of 'synth' or 'dataset_path' is required".into(),
            ));
        }
        if self.n_runs < 1 {
            return Err(Error::Config("n_runs must be >= 1".into()));
        }
        if self.n_filters == 0 || self.patch_size == 0 || self.max_tiles == 0 {
            return Err(Error::Config(
                "n_filters, patch_size, and max_tiles must be positive".into(),
            ));
        }
        if !(self.experiment.train_fraction > 0.0 && self.experiment.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must be in (0, 1)".into()));
        }
        if !(self.experiment.budget_fraction > 0.0 && self.experiment.budget_fraction <= 1.0) {
            return Err(Error::Config("budget_fraction must be in (0, 1]".into()));
        }
        if self.experiment.cv_folds < 2 {
            return Err(Error::Config("cv_folds must be >= 2".into()));
        }
        if self.experiment.lambda_grid.is_empty() {
            return Err(Error::Config("lambda_grid must be non-empty".into()));
        }
        for p in [&self.dataset_path, &self.overlaps_path, &self.raster_path]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(Error::MissingInput(format!("'{}'", p.display())));
            }
        }
        Ok(())
    }

    /// Every effective setting, defaults included, for the output
    /// manifest. Deterministic ordering.
    pub fn manifest(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let path_str = |p: &Option<PathBuf>| {
            p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
        };
        m.insert("synth".into(), self.synth.clone().unwrap_or_default());
        m.insert("dataset_path".into(), path_str(&self.dataset_path));
        m.insert("overlaps_path".into(), path_str(&self.overlaps_path));
        m.insert("raster_path".into(), path_str(&self.raster_path));
        m.insert("n_filters".into(), self.n_filters.to_string());
        m.insert("patch_size".into(), self.patch_size.to_string());
        m.insert("max_tiles".into(), self.max_tiles.to_string());
        m.insert(
            "train_fraction".into(),
            format!("{:?}", self.experiment.train_fraction),
        );
        m.insert("cv_folds".into(), self.experiment.cv_folds.to_string());
        m.insert(
            "budget_fraction".into(),
            format!("{:?}", self.experiment.budget_fraction),
        );
        m.insert(
            "lambda_grid".into(),
            self.experiment
                .lambda_grid
                .iter()
                .map(|v| format!("{v:?}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        m.insert(
            "threshold_grid".into(),
            format!(
                "{:?}..{:?} ({} points)",
                self.experiment.threshold_grid.first().unwrap_or(&0.0),
                self.experiment.threshold_grid.last().unwrap_or(&0.0),
                self.experiment.threshold_grid.len()
            ),
        );
        m.insert("n_runs".into(), self.n_runs.to_string());
        m.insert("base_seed".into(), self.base_seed.to_string());
        m.insert("apply_log".into(), self.apply_log.to_string());
        m
    }

    /// The dataset label used in report tables.
    pub fn source_name(&self) -> String {
        if let Some(s) = &self.synth {
            s.clone()
        } else if let Some(p) = &self.dataset_path {
            p.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into())
        } else {
            "dataset".into()
        }
    }
}
