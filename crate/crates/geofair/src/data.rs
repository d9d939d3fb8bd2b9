//! Domain types, dataset ingestion, label standardization, and seeded
//! train/test splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One observation unit: a survey cluster, municipality, or aggregated
/// geographic unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub id: String,
    /// (tile_id, overlap weight). Weights sum to 1 when nonempty.
    pub tile_overlaps: Vec<(u64, f64)>,
    pub urban: bool,
    /// Standardized wealth. Zero until `standardize_labels` runs.
    pub wealth: f64,
    /// Pre-standardization wealth in survey units.
    pub raw_wealth: f64,
    pub population: f64,
    /// Optional grid-cell footprint, used only by geometry preparation.
    pub cells: Vec<(i64, i64)>,
}

/// Parameters of the label transform, kept so it can be inverted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelTransform {
    pub log_applied: bool,
    pub mean: f64,
    pub stddev: f64,
}

impl LabelTransform {
    pub fn apply(&self, raw: f64) -> f64 {
        let t = if self.log_applied { raw.ln() } else { raw };
        (t - self.mean) / self.stddev
    }

    pub fn invert(&self, w: f64) -> f64 {
        let t = w * self.stddev + self.mean;
        if self.log_applied {
            t.exp()
        } else {
            t
        }
    }
}

/// A collection of regions plus provenance metadata; the unit of ingestion,
/// splitting, and audit. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionDataset {
    pub regions: Vec<Region>,
    pub label_transform: Option<LabelTransform>,
    pub name: String,
}

impl RegionDataset {
    pub fn new(name: impl Into<String>, regions: Vec<Region>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &regions {
            if !seen.insert(r.id.clone()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            if r.population < 0.0 {
                return Err(Error::Data(format!("negative population for '{}'", r.id)));
            }
            if !r.tile_overlaps.is_empty() {
                let s: f64 = r.tile_overlaps.iter().map(|(_, w)| w).sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(Error::Data(format!(
                        "overlap weights for '{}' sum to {s}, expected 1",
                        r.id
                    )));
                }
            }
        }
        Ok(RegionDataset {
            regions,
            label_transform: None,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn region(&self, id: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.id == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.regions.iter().map(|r| r.id.clone()).collect()
    }

    pub fn n_urban(&self) -> usize {
        self.regions.iter().filter(|r| r.urban).count()
    }

    pub fn n_rural(&self) -> usize {
        self.len() - self.n_urban()
    }

    pub fn rural_share_percent(&self) -> f64 {
        100.0 * self.n_rural() as f64 / self.len() as f64
    }
}

/// Column-name mapping for region tables.
#[derive(Debug, Clone)]
pub struct Schema {
    pub id: String,
    pub urban: String,
    pub wealth: String,
    pub population: String,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            id: "id".into(),
            urban: "urban".into(),
            wealth: "wealth".into(),
            population: "population".into(),
        }
    }
}

/// A seeded train/test partition of a dataset's region ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
    pub seed: u64,
    pub train_fraction: f64,
}

/// Round-half-up, used for budget and split sizes.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Population standard deviation.
pub fn pop_stddev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Load a region table (delimited text with a header row) and an optional
/// tile-overlap sidecar with rows (region_id, tile_id, weight).
pub fn load_dataset(
    path: impl AsRef<Path>,
    overlaps_path: Option<&Path>,
    schema: &Schema,
) -> Result<RegionDataset> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingInput(path.display().to_string()));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let id_col = col(&schema.id)?;
    let urban_col = col(&schema.urban)?;
    let wealth_col = col(&schema.wealth)?;
    let pop_col = col(&schema.population)?;
    let cells_col = headers.iter().position(|h| h == "cells");

    let mut overlaps: BTreeMap<String, Vec<(u64, f64)>> = BTreeMap::new();
    if let Some(op) = overlaps_path {
        if !op.exists() {
            return Err(Error::MissingInput(op.display().to_string()));
        }
        let mut or = csv::Reader::from_path(op)?;
        for (i, rec) in or.records().enumerate() {
            let rec = rec?;
            let parse = |field: usize, what: &str| -> Result<f64> {
                rec.get(field)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::Parse {
                        row: i + 1,
                        message: format!("non-numeric {what} in overlap sidecar"),
                    })
            };
            let rid = rec.get(0).unwrap_or("").to_string();
            let tid = parse(1, "tile_id")? as u64;
            let w = parse(2, "weight")?;
            if w < 0.0 {
                return Err(Error::Data(format!("negative overlap weight for '{rid}'")));
            }
            overlaps.entry(rid).or_default().push((tid, w));
        }
        // Overlaps arrive pre-normalized in principle; normalize and warn
        // when the input sums stray by more than 1e-6.
        for (rid, ov) in overlaps.iter_mut() {
            let s: f64 = ov.iter().map(|(_, w)| w).sum();
            if s <= 0.0 {
                return Err(Error::Data(format!("zero total overlap for '{rid}'")));
            }
            if (s - 1.0).abs() > 1e-6 {
                eprintln!("warning: overlap weights for '{rid}' sum to {s}; renormalizing");
            }
            for (_, w) in ov.iter_mut() {
                *w /= s;
            }
        }
    }

    let mut regions = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let id = rec
            .get(id_col)
            .ok_or_else(|| Error::Parse {
                row: i + 1,
                message: "missing id field".into(),
            })?
            .to_string();
        let parse_f = |c: usize, what: &str| -> Result<f64> {
            rec.get(c)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Parse {
                    row: i + 1,
                    message: format!("non-numeric {what}"),
                })
        };
        let urban = match rec.get(urban_col).map(str::trim) {
            Some("0") => false,
            Some("1") => true,
            _ => {
                return Err(Error::Parse {
                    row: i + 1,
                    message: "urban flag must be 0 or 1".into(),
                })
            }
        };
        let raw_wealth = parse_f(wealth_col, "wealth")?;
        let population = parse_f(pop_col, "population")?;
        let cells = match cells_col.and_then(|c| rec.get(c)) {
            Some(s) if !s.is_empty() => parse_cells(s, i + 1)?,
            _ => Vec::new(),
        };
        regions.push(Region {
            tile_overlaps: overlaps.remove(&id).unwrap_or_default(),
            id,
            urban,
            wealth: 0.0,
            raw_wealth,
            population,
            cells,
        });
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    RegionDataset::new(name, regions)
}

fn parse_cells(s: &str, row: usize) -> Result<Vec<(i64, i64)>> {
    s.split(';')
        .filter(|p| !p.is_empty())
        .map(|p| {
            let (x, y) = p.split_once(':').ok_or_else(|| Error::Parse {
                row,
                message: format!("bad cell '{p}'"),
            })?;
            let parse = |v: &str| {
                v.parse::<i64>().map_err(|_| Error::Parse {
                    row,
                    message: format!("bad cell coordinate '{v}'"),
                })
            };
            Ok((parse(x)?, parse(y)?))
        })
        .collect()
}

/// Write the region table and (when any region has overlaps) the sidecar.
/// Reals are serialized with full round-trip precision.
pub fn save_dataset(
    dataset: &RegionDataset,
    path: impl AsRef<Path>,
    overlaps_path: Option<&Path>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["id", "urban", "wealth", "population", "cells"])?;
    for r in &dataset.regions {
        let cells = r
            .cells
            .iter()
            .map(|(x, y)| format!("{x}:{y}"))
            .collect::<Vec<_>>()
            .join(";");
        w.write_record([
            r.id.as_str(),
            if r.urban { "1" } else { "0" },
            &format!("{}", r.raw_wealth),
            &format!("{}", r.population),
            &cells,
        ])?;
    }
    w.flush()?;
    if let Some(op) = overlaps_path {
        let mut f = std::io::BufWriter::new(std::fs::File::create(op)?);
        writeln!(f, "region_id,tile_id,weight")?;
        for r in &dataset.regions {
            for (tid, wt) in &r.tile_overlaps {
                writeln!(f, "{},{},{}", r.id, tid, wt)?;
            }
        }
        f.flush()?;
    }
    Ok(())
}

/// Standardize labels to zero mean and unit (population) variance, with an
/// optional log transform first.
pub fn standardize_labels(d: &RegionDataset, apply_log: bool) -> Result<RegionDataset> {
    if apply_log {
        if let Some(r) = d.regions.iter().find(|r| r.raw_wealth <= 0.0) {
            return Err(Error::Domain(format!(
                "log transform requires positive wealth; region '{}' has {}",
                r.id, r.raw_wealth
            )));
        }
    }
    let t: Vec<f64> = d
        .regions
        .iter()
        .map(|r| {
            if apply_log {
                r.raw_wealth.ln()
            } else {
                r.raw_wealth
            }
        })
        .collect();
    let mean = t.iter().sum::<f64>() / t.len() as f64;
    let stddev = pop_stddev(&t);
    if stddev <= 0.0 {
        return Err(Error::Degenerate("labels have zero variance".into()));
    }
    let transform = LabelTransform {
        log_applied: apply_log,
        mean,
        stddev,
    };
    let mut out = d.clone();
    for (r, ti) in out.regions.iter_mut().zip(&t) {
        r.wealth = (ti - mean) / stddev;
    }
    out.label_transform = Some(transform);
    Ok(out)
}

/// Uniform random train/test assignment, deterministic given the seed.
/// |train| = round-half-up(train_fraction * n), no stratification.
pub fn split_dataset(d: &RegionDataset, train_fraction: f64, seed: u64) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "train_fraction must be in (0,1), got {train_fraction}"
        )));
    }
    let n = d.len();
    if n < 4 {
        return Err(Error::Argument(format!("need at least 4 regions, got {n}")));
    }
    let mut ids = d.ids();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = round_half_up(train_fraction * n as f64).clamp(1, n - 1);
    let train_ids: BTreeSet<String> = ids[..n_train].iter().cloned().collect();
    let test_ids: BTreeSet<String> = ids[n_train..].iter().cloned().collect();
    Ok(Split {
        train_ids,
        test_ids,
        seed,
        train_fraction,
    })
}
