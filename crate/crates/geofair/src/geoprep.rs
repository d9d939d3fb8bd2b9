//! Geographic preprocessing: iterative rural-unit aggregation, the PCA
//! asset index, and feature-space representation reports.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::RegionDataset;
use crate::error::{Error, Result};
use crate::featurize::FeatureMatrix;

/// One geographic unit in the aggregation graph. Geometry is reduced to
/// area, adjacency, and shared boundary lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoUnit {
    pub id: String,
    pub area: f64,
    pub constituent_count: usize,
    pub neighbors: BTreeSet<String>,
    pub consumption: f64,
    pub population: f64,
    pub urban: bool,
    /// Shared boundary length per neighbor, same units everywhere.
    pub boundary_shared: BTreeMap<String, f64>,
}

/// A single merge step, kept for auditability of the eligibility rule.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeEvent {
    pub source: String,
    pub target: String,
    pub target_constituents_at_selection: usize,
    pub merged_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregation {
    pub units: Vec<GeoUnit>,
    /// merged id -> original constituent ids
    pub lineage: BTreeMap<String, Vec<String>>,
    pub merges: Vec<MergeEvent>,
    pub unmergeable: BTreeSet<String>,
}

fn validate_units(units: &[GeoUnit]) -> Result<BTreeMap<String, GeoUnit>> {
    let mut pool = BTreeMap::new();
    for u in units {
        if u.area <= 0.0 || !u.area.is_finite() {
            return Err(Error::Data(format!(
                "unit '{}' has non-positive area {}",
                u.id, u.area
            )));
        }
        if u.constituent_count == 0 {
            return Err(Error::Data(format!(
                "unit '{}' has constituent_count 0",
                u.id
            )));
        }
        if pool.insert(u.id.clone(), u.clone()).is_some() {
            return Err(Error::DuplicateId(u.id.clone()));
        }
    }
    for u in pool.values() {
        for n in &u.neighbors {
            let back = pool
                .get(n)
                .ok_or_else(|| Error::Data(format!("unknown neighbor '{n}' of '{}'", u.id)))?;
            if !back.neighbors.contains(&u.id) {
                return Err(Error::Data(format!(
                    "asymmetric adjacency: '{}' lists '{n}' but not vice versa",
                    u.id
                )));
            }
            let a = u.boundary_shared.get(n).copied().unwrap_or(0.0);
            let b = back.boundary_shared.get(&u.id).copied().unwrap_or(0.0);
            if (a - b).abs() > 1e-9 * a.abs().max(b.abs()).max(1.0) {
                return Err(Error::Data(format!(
                    "asymmetric boundary length between '{}' and '{n}'",
                    u.id
                )));
            }
        }
    }
    Ok(pool)
}

/// Iteratively merge small rural units into adjacent rural units.
///
/// At each step the smallest-area rural unit below `area_threshold` is
/// merged into its rural neighbor with the longest shared boundary,
/// skipping neighbors that already hold `max_constituents` constituents.
/// Units with no eligible neighbor are marked unmergeable and left alone.
/// Urban units pass through untouched.
pub fn aggregate_rural_units(
    units: &[GeoUnit],
    area_threshold: f64,
    max_constituents: usize,
) -> Result<Aggregation> {
    let mut pool = validate_units(units)?;
    let mut lineage: BTreeMap<String, Vec<String>> =
        pool.keys().map(|id| (id.clone(), vec![id.clone()])).collect();
    let mut unmergeable: BTreeSet<String> = BTreeSet::new();
    let mut merges = Vec::new();

    loop {
        let candidate = pool
            .values()
            .filter(|u| !u.urban && u.area < area_threshold && !unmergeable.contains(&u.id))
            .min_by(|a, b| {
                a.area
                    .partial_cmp(&b.area)
                    .unwrap()
                    .then_with(|| a.id.cmp(&b.id))
            })
            .map(|u| u.id.clone());
        let Some(cand_id) = candidate else { break };
        let cand = pool[&cand_id].clone();

        let target = cand
            .neighbors
            .iter()
            .filter_map(|n| pool.get(n))
            .filter(|n| !n.urban && n.constituent_count < max_constituents)
            .max_by(|a, b| {
                let ba = cand.boundary_shared.get(&a.id).copied().unwrap_or(0.0);
                let bb = cand.boundary_shared.get(&b.id).copied().unwrap_or(0.0);
                // ties go to the smaller id, so it must win the max
                ba.partial_cmp(&bb).unwrap().then_with(|| b.id.cmp(&a.id))
            })
            .map(|u| u.id.clone());
        let Some(target_id) = target else {
            unmergeable.insert(cand_id);
            continue;
        };
        let target = pool[&target_id].clone();
        merges.push(MergeEvent {
            source: cand_id.clone(),
            target: target_id.clone(),
            target_constituents_at_selection: target.constituent_count,
            merged_id: String::new(),
        });

        // the merged unit keeps the id of the larger-area constituent
        let keep = if target.area > cand.area
            || (target.area == cand.area && target.id < cand.id)
        {
            target.clone()
        } else {
            cand.clone()
        };
        merges.last_mut().unwrap().merged_id = keep.id.clone();

        let population = cand.population + target.population;
        let consumption = if population > 0.0 {
            (cand.consumption * cand.population + target.consumption * target.population)
                / population
        } else {
            0.5 * (cand.consumption + target.consumption)
        };
        let mut neighbors: BTreeSet<String> =
            cand.neighbors.union(&target.neighbors).cloned().collect();
        neighbors.remove(&cand.id);
        neighbors.remove(&target.id);
        let mut boundary_shared: BTreeMap<String, f64> = BTreeMap::new();
        for src in [&cand.boundary_shared, &target.boundary_shared] {
            for (n, len) in src {
                if neighbors.contains(n) {
                    *boundary_shared.entry(n.clone()).or_insert(0.0) += len;
                }
            }
        }
        let merged = GeoUnit {
            id: keep.id.clone(),
            area: cand.area + target.area,
            constituent_count: cand.constituent_count + target.constituent_count,
            neighbors: neighbors.clone(),
            consumption,
            population,
            urban: false,
            boundary_shared,
        };

        let mut line = lineage.remove(&cand.id).unwrap_or_default();
        line.extend(lineage.remove(&target.id).unwrap_or_default());
        line.sort();
        lineage.insert(keep.id.clone(), line);

        pool.remove(&cand.id);
        pool.remove(&target.id);
        for n in &neighbors {
            let nb = pool.get_mut(n).expect("neighbor present");
            let len = nb.boundary_shared.remove(&cand.id).unwrap_or(0.0)
                + nb.boundary_shared.remove(&target.id).unwrap_or(0.0);
            nb.neighbors.remove(&cand.id);
            nb.neighbors.remove(&target.id);
            nb.neighbors.insert(keep.id.clone());
            *nb.boundary_shared.entry(keep.id.clone()).or_insert(0.0) += len;
        }
        // the merged unit is a fresh candidate; its circumstances changed
        unmergeable.remove(&cand.id);
        unmergeable.remove(&target.id);
        pool.insert(keep.id.clone(), merged);
    }

    Ok(Aggregation {
        units: pool.into_values().collect(),
        lineage,
        merges,
        unmergeable,
    })
}

/// Median area over rural units, with the unit count: the before/after
/// summary quoted for the aggregation step.
pub fn rural_summary(units: &[GeoUnit]) -> (usize, f64) {
    let mut areas: Vec<f64> = units.iter().filter(|u| !u.urban).map(|u| u.area).collect();
    areas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = areas.len();
    if n == 0 {
        return (0, 0.0);
    }
    let median = if n % 2 == 1 {
        areas[n / 2]
    } else {
        0.5 * (areas[n / 2 - 1] + areas[n / 2])
    };
    (n, median)
}

/// Load a unit table (id, area, constituent_count, consumption,
/// population, urban) plus an adjacency file (unit_id, neighbor_id,
/// shared_length). Each undirected edge may appear once or twice;
/// conflicting duplicate lengths are rejected.
pub fn load_geo_units(
    units_path: &std::path::Path,
    adjacency_path: &std::path::Path,
) -> Result<Vec<GeoUnit>> {
    for p in [units_path, adjacency_path] {
        if !p.exists() {
            return Err(Error::MissingInput(p.display().to_string()));
        }
    }
    let mut units: BTreeMap<String, GeoUnit> = BTreeMap::new();
    let mut reader = csv::Reader::from_path(units_path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let cols = (
        col("id")?,
        col("area")?,
        col("constituent_count")?,
        col("consumption")?,
        col("population")?,
        col("urban")?,
    );
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let field = |c: usize| record.get(c).unwrap_or("").trim();
        let parse = |c: usize| -> Result<f64> {
            field(c).parse().map_err(|_| Error::Parse {
                row: i + 1,
                message: format!("invalid number '{}'", field(c)),
            })
        };
        let unit = GeoUnit {
            id: field(cols.0).to_string(),
            area: parse(cols.1)?,
            constituent_count: parse(cols.2)? as usize,
            neighbors: BTreeSet::new(),
            consumption: parse(cols.3)?,
            population: parse(cols.4)?,
            urban: matches!(field(cols.5), "true" | "1"),
            boundary_shared: BTreeMap::new(),
        };
        if units.insert(unit.id.clone(), unit).is_some() {
            return Err(Error::DuplicateId(field(cols.0).to_string()));
        }
    }
    let mut reader = csv::Reader::from_path(adjacency_path)?;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let a = record.get(0).unwrap_or("").trim().to_string();
        let b = record.get(1).unwrap_or("").trim().to_string();
        let len: f64 = record.get(2).unwrap_or("").trim().parse().map_err(|_| {
            Error::Parse {
                row: i + 1,
                message: "invalid shared_length".into(),
            }
        })?;
        for (x, y) in [(&a, &b), (&b, &a)] {
            let unit = units
                .get_mut(x)
                .ok_or_else(|| Error::Data(format!("adjacency references unknown unit '{x}'")))?;
            unit.neighbors.insert(y.clone());
            if let Some(prev) = unit.boundary_shared.insert(y.clone(), len) {
                if (prev - len).abs() > 1e-9 * prev.abs().max(len.abs()).max(1.0) {
                    return Err(Error::Data(format!(
                        "conflicting boundary lengths for edge {a}-{b}"
                    )));
                }
            }
        }
    }
    Ok(units.into_values().collect())
}

/// Write merged units and the lineage map produced by
/// [`aggregate_rural_units`].
pub fn save_aggregation(
    agg: &Aggregation,
    units_path: &std::path::Path,
    lineage_path: &std::path::Path,
) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::from("id,area,constituent_count,consumption,population,urban\n");
    for u in &agg.units {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            u.id, u.area, u.constituent_count, u.consumption, u.population, u.urban
        )
        .unwrap();
    }
    std::fs::write(units_path, out)?;
    let mut lin = String::from("merged_id,constituent_id\n");
    for (merged, constituents) in &agg.lineage {
        for c in constituents {
            writeln!(lin, "{merged},{c}").unwrap();
        }
    }
    std::fs::write(lineage_path, lin)?;
    Ok(())
}

fn pearson_sign(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
}

/// First-principal-component asset index over a binary indicator table.
///
/// Returns per-row scores and the explained variance share of the first
/// component; the score sign is chosen to correlate positively with the
/// raw asset count.
pub fn asset_index(table: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    let n = table.len();
    if n < 2 {
        return Err(Error::Size(format!("need at least 2 rows, got {n}")));
    }
    let k = table[0].len();
    if k < 2 {
        return Err(Error::Size(format!("need at least 2 asset columns, got {k}")));
    }
    if table.iter().any(|r| r.len() != k) {
        return Err(Error::Dimension {
            expected: k,
            actual: table.iter().map(|r| r.len()).find(|&l| l != k).unwrap(),
        });
    }
    let means: Vec<f64> = (0..k)
        .map(|j| table.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let variances: Vec<f64> = (0..k)
        .map(|j| table.iter().map(|r| (r[j] - means[j]).powi(2)).sum::<f64>() / n as f64)
        .collect();
    let kept: Vec<usize> = (0..k).filter(|&j| variances[j] > 0.0).collect();
    if kept.is_empty() {
        return Err(Error::Degenerate("asset table has no varying columns".into()));
    }
    if kept.len() < k {
        eprintln!(
            "warning: dropping {} constant asset column(s)",
            k - kept.len()
        );
    }
    let centered = DMatrix::from_fn(n, kept.len(), |i, j| table[i][kept[j]] - means[kept[j]]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..kept.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let total: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0)).sum();
    let top = order[0];
    let explained = eig.eigenvalues[top].max(0.0) / total;
    let v = eig.eigenvectors.column(top);
    let scores_m = &centered * v;
    let mut scores: Vec<f64> = scores_m.iter().copied().collect();
    let row_sums: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    if pearson_sign(&scores, &row_sums) < 0.0 {
        for s in &mut scores {
            *s = -*s;
        }
    }
    Ok((scores, explained))
}

/// Distance and PCA summaries of a feature matrix. Either part may be
/// absent depending on which report produced it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RepresentationReport {
    pub mean_dist_rural_rural: f64,
    pub mean_dist_urban_urban: f64,
    pub mean_dist_urban_rural: f64,
    pub pca_projections: Vec<[f64; 2]>,
    pub explained_variance_share: f64,
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn mean_within(rows: &[&Vec<f64>]) -> f64 {
    let n = rows.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += l2(rows[i], rows[j]);
        }
    }
    total / (n * (n - 1) / 2) as f64
}

fn mean_cross(a: &[&Vec<f64>], b: &[&Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for x in a {
        for y in b {
            total += l2(x, y);
        }
    }
    total / (a.len() * b.len()) as f64
}

fn subsample<'a>(
    rows: &[&'a Vec<f64>],
    max: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<&'a Vec<f64>> {
    if rows.len() <= max {
        rows.to_vec()
    } else {
        sample(rng, rows.len(), max).into_iter().map(|i| rows[i]).collect()
    }
}

/// Mean pairwise L2 feature distances within and across the urban/rural
/// groups, with a seeded subsample cap per group.
pub fn feature_distance_report(
    features: &FeatureMatrix,
    urban: &[bool],
    max_per_group: usize,
    seed: u64,
) -> Result<RepresentationReport> {
    if urban.len() != features.rows.len() {
        return Err(Error::Dimension {
            expected: features.rows.len(),
            actual: urban.len(),
        });
    }
    let rural: Vec<&Vec<f64>> = features
        .rows
        .iter()
        .zip(urban)
        .filter(|(_, &u)| !u)
        .map(|(r, _)| r)
        .collect();
    let urb: Vec<&Vec<f64>> = features
        .rows
        .iter()
        .zip(urban)
        .filter(|(_, &u)| u)
        .map(|(r, _)| r)
        .collect();
    if rural.len() < 2 || urb.len() < 2 {
        return Err(Error::Size(format!(
            "need at least 2 per group, got {} rural / {} urban",
            rural.len(),
            urb.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rural = subsample(&rural, max_per_group, &mut rng);
    let urb = subsample(&urb, max_per_group, &mut rng);
    Ok(RepresentationReport {
        mean_dist_rural_rural: mean_within(&rural),
        mean_dist_urban_urban: mean_within(&urb),
        mean_dist_urban_rural: mean_cross(&urb, &rural),
        ..RepresentationReport::default()
    })
}

/// As [`feature_distance_report`], but on one seeded tile per region
/// instead of the overlap-weighted region average.
pub fn single_tile_distance_report(
    tile_features: &BTreeMap<u64, Vec<f64>>,
    dataset: &RegionDataset,
    max_per_group: usize,
    seed: u64,
) -> Result<RepresentationReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_711e);
    let mut rows = Vec::with_capacity(dataset.len());
    let mut urban = Vec::with_capacity(dataset.len());
    let mut uncovered = Vec::new();
    for region in &dataset.regions {
        let present: Vec<u64> = region
            .tile_overlaps
            .iter()
            .map(|(tid, _)| *tid)
            .filter(|tid| tile_features.contains_key(tid))
            .collect();
        if present.is_empty() {
            uncovered.push(region.id.clone());
            continue;
        }
        let pick = present[sample(&mut rng, present.len(), 1).index(0)];
        rows.push(tile_features[&pick].clone());
        urban.push(region.urban);
    }
    if !uncovered.is_empty() {
        return Err(Error::Coverage(uncovered));
    }
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    let matrix = FeatureMatrix {
        region_ids: dataset.ids(),
        rows,
        bank_seed: seed,
        d,
    };
    feature_distance_report(&matrix, &urban, max_per_group, seed)
}

/// Project centered features onto the top two principal components.
/// Uses the Gram-matrix route when d > n; degenerate spectra fall back
/// to a zero second component.
pub fn pca_project_2d(features: &FeatureMatrix) -> Result<RepresentationReport> {
    let n = features.rows.len();
    let d = features.d;
    if n < 3 {
        return Err(Error::Size(format!("need at least 3 rows, got {n}")));
    }
    if d < 2 {
        return Err(Error::Size(format!("need at least 2 features, got {d}")));
    }
    let means: Vec<f64> = (0..d)
        .map(|j| features.rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let centered = DMatrix::from_fn(n, d, |i, j| features.rows[i][j] - means[j]);
    let denom = n as f64 - 1.0;
    let total_var: f64 = centered.iter().map(|v| v * v).sum::<f64>() / denom;
    if total_var <= 0.0 {
        return Err(Error::Degenerate("all feature rows identical".into()));
    }

    let tol = 1e-12 * total_var;
    let (mut scores, lambdas) = if d <= n {
        let cov = centered.transpose() * &centered / denom;
        let eig = cov.symmetric_eigen();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        let mut scores = vec![[0.0; 2]; n];
        let mut lambdas = [0.0; 2];
        for c in 0..2 {
            let lam = eig.eigenvalues[order[c]].max(0.0);
            lambdas[c] = lam;
            if lam <= tol {
                continue;
            }
            let proj = &centered * eig.eigenvectors.column(order[c]);
            for (i, s) in proj.iter().enumerate() {
                scores[i][c] = *s;
            }
        }
        (scores, lambdas)
    } else {
        let gram = &centered * centered.transpose() / denom;
        let eig = gram.symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        let mut scores = vec![[0.0; 2]; n];
        let mut lambdas = [0.0; 2];
        for c in 0..2 {
            let lam = eig.eigenvalues[order[c]].max(0.0);
            lambdas[c] = lam;
            if lam <= tol {
                continue;
            }
            // Gram eigenvector u scaled by sqrt(lambda * (n-1)) equals
            // the principal score vector of the covariance route.
            let scale = (lam * denom).sqrt();
            for (i, u) in eig.eigenvectors.column(order[c]).iter().enumerate() {
                scores[i][c] = u * scale;
            }
        }
        (scores, lambdas)
    };

    // canonical sign: the largest-magnitude score of each component is
    // positive, so both eigen routes agree
    for c in 0..2 {
        let extreme = scores
            .iter()
            .map(|s| s[c])
            .max_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap())
            .unwrap_or(0.0);
        if extreme < 0.0 {
            for s in &mut scores {
                s[c] = -s[c];
            }
        }
    }

    Ok(RepresentationReport {
        pca_projections: scores,
        explained_variance_share: (lambdas[0] + lambdas[1]) / total_var,
        ..RepresentationReport::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Region;

    fn unit(id: &str, area: f64, pop: f64, cons: f64, urban: bool) -> GeoUnit {
        GeoUnit {
            id: id.into(),
            area,
            constituent_count: 1,
            neighbors: BTreeSet::new(),
            consumption: cons,
            population: pop,
            urban,
            boundary_shared: BTreeMap::new(),
        }
    }

    fn connect(units: &mut [GeoUnit], a: &str, b: &str, len: f64) {
        for u in units.iter_mut() {
            if u.id == a {
                u.neighbors.insert(b.into());
                u.boundary_shared.insert(b.into(), len);
            }
            if u.id == b {
                u.neighbors.insert(a.into());
                u.boundary_shared.insert(a.into(), len);
            }
        }
    }

    #[test]
    fn three_small_cells_collapse_into_one() {
        let mut units = vec![
            unit("a", 10.0, 100.0, 1.0, false),
            unit("b", 10.0, 300.0, 2.0, false),
            unit("c", 10.0, 100.0, 4.0, false),
        ];
        connect(&mut units, "a", "b", 1.0);
        connect(&mut units, "a", "c", 1.0);
        connect(&mut units, "b", "c", 1.0);
        let agg = aggregate_rural_units(&units, 25.0, 25).unwrap();
        assert_eq!(agg.units.len(), 1);
        let merged = &agg.units[0];
        assert_eq!(merged.area, 30.0);
        assert_eq!(merged.constituent_count, 3);
        let expected = (100.0 * 1.0 + 300.0 * 2.0 + 100.0 * 4.0) / 500.0;
        assert!((merged.consumption - expected).abs() < 1e-12);
        assert_eq!(merged.population, 500.0);
        assert_eq!(agg.lineage[&merged.id], vec!["a", "b", "c"]);
    }

    #[test]
    fn isolated_small_unit_is_unmergeable_and_unchanged() {
        let units = vec![unit("solo", 5.0, 50.0, 1.0, false)];
        let agg = aggregate_rural_units(&units, 25.0, 25).unwrap();
        assert_eq!(agg.units, units);
        assert!(agg.unmergeable.contains("solo"));
        assert!(agg.merges.is_empty());
    }

    #[test]
    fn unit_at_threshold_never_initiates() {
        let mut units = vec![
            unit("a", 30.0, 100.0, 1.0, false),
            unit("b", 40.0, 100.0, 2.0, false),
        ];
        connect(&mut units, "a", "b", 3.0);
        let agg = aggregate_rural_units(&units, 25.0, 25).unwrap();
        assert_eq!(agg.units.len(), 2);
        assert!(agg.merges.is_empty());
    }

    #[test]
    fn urban_units_pass_through_and_are_never_targets() {
        let mut units = vec![
            unit("town", 2.0, 900.0, 3.0, true),
            unit("farm", 2.0, 100.0, 1.0, false),
        ];
        connect(&mut units, "town", "farm", 5.0);
        let agg = aggregate_rural_units(&units, 25.0, 25).unwrap();
        assert_eq!(agg.units.len(), 2);
        assert!(agg.unmergeable.contains("farm"));
        assert!(agg.units.iter().any(|u| u.id == "town" && u.area == 2.0));
    }

    #[test]
    fn asymmetric_adjacency_is_rejected() {
        let mut units = vec![
            unit("a", 10.0, 1.0, 1.0, false),
            unit("b", 10.0, 1.0, 1.0, false),
        ];
        units[0].neighbors.insert("b".into());
        units[0].boundary_shared.insert("b".into(), 1.0);
        let err = aggregate_rural_units(&units, 25.0, 25).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn negative_area_is_rejected() {
        let units = vec![unit("a", -1.0, 1.0, 1.0, false)];
        assert!(matches!(
            aggregate_rural_units(&units, 25.0, 25),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn boundary_ties_go_to_the_smaller_id() {
        let mut units = vec![
            unit("m", 1.0, 10.0, 0.0, false),
            unit("x", 30.0, 10.0, 1.0, false),
            unit("w", 30.0, 10.0, 2.0, false),
        ];
        connect(&mut units, "m", "x", 2.0);
        connect(&mut units, "m", "w", 2.0);
        let agg = aggregate_rural_units(&units, 25.0, 25).unwrap();
        assert_eq!(agg.merges.len(), 1);
        assert_eq!(agg.merges[0].target, "w");
    }

    #[test]
    fn aggregation_conserves_population_and_consumption_mass() {
        // a random-ish chain of many small units
        let mut units: Vec<GeoUnit> = (0..40)
            .map(|i| {
                unit(
                    &format!("u{i:02}"),
                    1.0 + (i % 7) as f64,
                    50.0 + (i * 13 % 97) as f64,
                    (i as f64 * 0.37).sin(),
                    i % 9 == 0,
                )
            })
            .collect();
        let ids: Vec<String> = units.iter().map(|u| u.id.clone()).collect();
        for i in 0..39 {
            connect(&mut units, &ids[i], &ids[i + 1], 1.0 + (i % 3) as f64);
        }
        let before_pop: f64 = units.iter().map(|u| u.population).sum();
        let before_mass: f64 = units.iter().map(|u| u.population * u.consumption).sum();
        let agg = aggregate_rural_units(&units, 25.0, 25).unwrap();
        let after_pop: f64 = agg.units.iter().map(|u| u.population).sum();
        let after_mass: f64 = agg.units.iter().map(|u| u.population * u.consumption).sum();
        assert!((before_pop - after_pop).abs() <= 1e-9 * before_pop.abs());
        assert!((before_mass - after_mass).abs() <= 1e-9 * before_mass.abs().max(1.0));
    }

    #[test]
    fn full_targets_are_never_selected() {
        let mut units = vec![
            unit("tiny", 1.0, 10.0, 0.0, false),
            unit("full", 50.0, 10.0, 1.0, false),
            unit("open", 50.0, 10.0, 2.0, false),
        ];
        units[1].constituent_count = 25;
        connect(&mut units, "tiny", "full", 10.0);
        connect(&mut units, "tiny", "open", 1.0);
        let agg = aggregate_rural_units(&units, 25.0, 25).unwrap();
        assert_eq!(agg.merges.len(), 1);
        assert_eq!(agg.merges[0].target, "open");
        assert!(agg
            .merges
            .iter()
            .all(|m| m.target_constituents_at_selection < 25));
    }

    #[test]
    fn rural_summary_reports_count_and_median() {
        let units = vec![
            unit("a", 1.0, 1.0, 0.0, false),
            unit("b", 3.0, 1.0, 0.0, false),
            unit("c", 10.0, 1.0, 0.0, false),
            unit("t", 99.0, 1.0, 0.0, true),
        ];
        assert_eq!(rural_summary(&units), (3, 3.0));
    }

    #[test]
    fn perfectly_correlated_assets_explain_everything() {
        let table: Vec<Vec<f64>> = (0..50)
            .map(|i| {
                let v = (i % 2) as f64;
                vec![v, v]
            })
            .collect();
        let (scores, share) = asset_index(&table).unwrap();
        assert!((share - 1.0).abs() <= 1e-12);
        // sign convention: richer in assets scores higher
        assert!(scores[1] > scores[0]);
    }

    #[test]
    fn independent_assets_split_the_variance() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let table: Vec<Vec<f64>> = (0..10000)
            .map(|_| vec![f64::from(rng.gen::<bool>()), f64::from(rng.gen::<bool>())])
            .collect();
        let (_, share) = asset_index(&table).unwrap();
        assert!((share - 0.5).abs() <= 0.05, "share = {share}");
    }

    #[test]
    fn constant_asset_table_is_degenerate() {
        let table = vec![vec![1.0, 0.0]; 20];
        assert!(matches!(asset_index(&table), Err(Error::Degenerate(_))));
    }

    fn matrix(rows: Vec<Vec<f64>>) -> FeatureMatrix {
        let d = rows[0].len();
        FeatureMatrix {
            region_ids: (0..rows.len()).map(|i| format!("r{i}")).collect(),
            rows,
            bank_seed: 0,
            d,
        }
    }

    #[test]
    fn identical_rows_have_zero_distances() {
        let m = matrix(vec![vec![1.0, 2.0]; 6]);
        let urban = vec![true, true, true, false, false, false];
        let r = feature_distance_report(&m, &urban, 2000, 0).unwrap();
        assert_eq!(r.mean_dist_rural_rural, 0.0);
        assert_eq!(r.mean_dist_urban_urban, 0.0);
        assert_eq!(r.mean_dist_urban_rural, 0.0);
    }

    #[test]
    fn two_point_clusters_report_their_separation() {
        let m = matrix(vec![
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![3.0, 4.0],
            vec![3.0, 4.0],
        ]);
        let urban = vec![true, true, false, false];
        let r = feature_distance_report(&m, &urban, 2000, 0).unwrap();
        assert_eq!(r.mean_dist_urban_urban, 0.0);
        assert_eq!(r.mean_dist_rural_rural, 0.0);
        assert!((r.mean_dist_urban_rural - 5.0).abs() < 1e-12);
    }

    #[test]
    fn undersized_group_is_an_error() {
        let m = matrix(vec![vec![0.0], vec![1.0], vec![2.0]]);
        let urban = vec![true, false, false];
        assert!(matches!(
            feature_distance_report(&m, &urban, 2000, 0),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn subsampling_is_deterministic() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..60).map(|_| vec![rng.gen(), rng.gen()]).collect();
        let urban: Vec<bool> = (0..60).map(|i| i % 2 == 0).collect();
        let m = matrix(rows);
        let a = feature_distance_report(&m, &urban, 10, 42).unwrap();
        let b = feature_distance_report(&m, &urban, 10, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_tile_report_matches_aggregated_when_one_tile_each() {
        let mut tile_features = BTreeMap::new();
        let mut regions = Vec::new();
        for i in 0..8u64 {
            tile_features.insert(i, vec![i as f64, (i * i) as f64]);
            regions.push(Region {
                id: format!("r{i}"),
                tile_overlaps: vec![(i, 1.0)],
                urban: i % 2 == 0,
                wealth: 0.0,
                raw_wealth: 0.0,
                population: 1.0,
                cells: Vec::new(),
            });
        }
        let dataset = RegionDataset::new("t", regions).unwrap();
        let urban: Vec<bool> = dataset.regions.iter().map(|r| r.urban).collect();
        let rows: Vec<Vec<f64>> = dataset
            .regions
            .iter()
            .map(|r| tile_features[&r.tile_overlaps[0].0].clone())
            .collect();
        let aggregated = feature_distance_report(&matrix(rows), &urban, 2000, 9).unwrap();
        let single = single_tile_distance_report(&tile_features, &dataset, 2000, 9).unwrap();
        assert_eq!(single, aggregated);
    }

    #[test]
    fn rank_one_data_projects_onto_a_line() {
        let m = matrix((0..5).map(|i| vec![i as f64, 2.0 * i as f64]).collect());
        let r = pca_project_2d(&m).unwrap();
        assert!((r.explained_variance_share - 1.0).abs() < 1e-9);
        assert!(r.pca_projections.iter().all(|p| p[1].abs() < 1e-9));
    }

    #[test]
    fn isotropic_gaussian_top2_share_is_two_thirds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..10000)
            .map(|_| {
                (0..3)
                    .map(|_| crate::synth::standard_normal(&mut rng))
                    .collect()
            })
            .collect();
        let r = pca_project_2d(&matrix(rows)).unwrap();
        assert!(
            (r.explained_variance_share - 2.0 / 3.0).abs() <= 0.05,
            "share = {}",
            r.explained_variance_share
        );
    }

    #[test]
    fn gram_route_matches_covariance_shares_and_centering() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // d > n triggers the Gram route
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..20).map(|_| rng.gen::<f64>()).collect())
            .collect();
        let wide = pca_project_2d(&matrix(rows.clone())).unwrap();
        // covariance route on the same data via explicit eigen
        let n = rows.len();
        let d = rows[0].len();
        let means: Vec<f64> = (0..d)
            .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
            .collect();
        let centered = DMatrix::from_fn(n, d, |i, j| rows[i][j] - means[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        let mut lambdas: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
        lambdas.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let total: f64 = lambdas.iter().map(|l| l.max(0.0)).sum();
        let expected = (lambdas[0] + lambdas[1]) / total;
        assert!((wide.explained_variance_share - expected).abs() <= 1e-9);
        for c in 0..2 {
            let mean: f64 =
                wide.pca_projections.iter().map(|p| p[c]).sum::<f64>() / n as f64;
            assert!(mean.abs() <= 1e-9);
        }
    }
}
