//! Random convolutional featurization of tiles and overlap-weighted
//! region-level aggregation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::RegionDataset;
use crate::error::{Error, Result};
use crate::synth::TileRaster;

/// A fixed bank of random convolutional filters. Filters are i.i.d.
/// Gaussian patches normalized to unit Frobenius norm; the feature
/// dimension is 2 * n_filters (paired-sign ReLU pooling).
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub seed: u64,
    pub n_filters: usize,
    pub patch_size: usize,
    pub filters: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

impl FilterBank {
    pub fn dim(&self) -> usize {
        2 * self.n_filters
    }
}

/// Per-region feature vectors, rows aligned with `region_ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub region_ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub bank_seed: u64,
    pub d: usize,
}

impl FeatureMatrix {
    pub fn row(&self, id: &str) -> Option<&[f64]> {
        self.region_ids
            .iter()
            .position(|r| r == id)
            .map(|i| self.rows[i].as_slice())
    }

    /// Delimited text with header (region_id, f0..f{d-1}).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header: Vec<String> = std::iter::once("region_id".to_string())
            .chain((0..self.d).map(|i| format!("f{i}")))
            .collect();
        writeln!(f, "{}", header.join(","))?;
        for (id, row) in self.region_ids.iter().zip(&self.rows) {
            write!(f, "{id}")?;
            for v in row {
                write!(f, ",{v}")?;
            }
            writeln!(f)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, bank_seed: u64) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.display().to_string()));
        }
        let mut reader = csv::Reader::from_path(path)?;
        let d = reader.headers()?.len() - 1;
        let mut region_ids = Vec::new();
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            region_ids.push(rec.get(0).unwrap_or("").to_string());
            let row: Vec<f64> = (1..rec.len())
                .map(|j| {
                    rec.get(j)
                        .and_then(|s| s.parse::<f64>().ok())
                        .ok_or_else(|| Error::Parse {
                            row: i + 1,
                            message: "non-numeric feature value".into(),
                        })
                })
                .collect::<Result<_>>()?;
            if row.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    actual: row.len(),
                });
            }
            rows.push(row);
        }
        Ok(FeatureMatrix {
            region_ids,
            rows,
            bank_seed,
            d,
        })
    }
}

fn standard_normal(rng: &mut impl rand::Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn make_filter_bank(seed: u64, n_filters: usize, patch_size: usize) -> Result<FilterBank> {
    if n_filters < 1 {
        return Err(Error::Argument("n_filters must be >= 1".into()));
    }
    if patch_size < 1 {
        return Err(Error::Argument("patch_size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut filters = Vec::with_capacity(n_filters);
    for _ in 0..n_filters {
        let mut patch: Vec<f64> = (0..patch_size * patch_size)
            .map(|_| standard_normal(&mut rng))
            .collect();
        let norm = patch.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in patch.iter_mut() {
                *v /= norm;
            }
        }
        filters.push(patch);
    }
    Ok(FilterBank {
        seed,
        n_filters,
        patch_size,
        filters,
        biases: vec![0.0; n_filters],
    })
}

/// Featurize one tile: valid-mode stride-1 convolution per filter, then
/// average-pool ReLU(conv) into component 2k and ReLU(-conv) into 2k+1.
pub fn featurize_tile(tile: &[f32], side: usize, bank: &FilterBank) -> Result<Vec<f64>> {
    let m = bank.patch_size;
    if side < m {
        return Err(Error::Dimension {
            expected: m,
            actual: side,
        });
    }
    if tile.len() != side * side {
        return Err(Error::Dimension {
            expected: side * side,
            actual: tile.len(),
        });
    }
    if tile.iter().any(|p| !p.is_finite()) {
        return Err(Error::Data("non-finite pixel in tile".into()));
    }
    let out_side = side - m + 1;
    let n_windows = (out_side * out_side) as f64;
    let mut features = vec![0.0; bank.dim()];
    for (k, filter) in bank.filters.iter().enumerate() {
        let bias = bank.biases[k];
        let mut pos = 0.0;
        let mut neg = 0.0;
        for oy in 0..out_side {
            for ox in 0..out_side {
                let mut acc = bias;
                for fy in 0..m {
                    let row = (oy + fy) * side + ox;
                    for fx in 0..m {
                        acc += filter[fy * m + fx] * tile[row + fx] as f64;
                    }
                }
                if acc > 0.0 {
                    pos += acc;
                } else {
                    neg -= acc;
                }
            }
        }
        features[2 * k] = pos / n_windows;
        features[2 * k + 1] = neg / n_windows;
    }
    Ok(features)
}

/// Featurize every tile of a raster. Tiles are independent, so the map is
/// evaluated in parallel and merged by tile id.
pub fn featurize_raster(raster: &TileRaster, bank: &FilterBank) -> Result<BTreeMap<u64, Vec<f64>>> {
    let entries: Vec<(&u64, &Vec<f32>)> = raster.tiles.iter().collect();
    let rows: Vec<(u64, Vec<f64>)> = entries
        .par_iter()
        .map(|(tid, pixels)| {
            featurize_tile(pixels, raster.side_length, bank).map(|f| (**tid, f))
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().collect())
}

/// Overlap-weighted per-region averaging of tile features. Regions with
/// more than `max_tiles` overlaps are first reduced to a seeded uniform
/// without-replacement subsample; weights are renormalized over the tiles
/// actually used.
pub fn aggregate_region_features(
    tile_features: &BTreeMap<u64, Vec<f64>>,
    regions: &RegionDataset,
    max_tiles: usize,
    seed: u64,
) -> Result<FeatureMatrix> {
    let d = tile_features
        .values()
        .next()
        .map(|v| v.len())
        .ok_or_else(|| Error::Data("no featurized tiles".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut region_ids = Vec::with_capacity(regions.len());
    let mut rows = Vec::with_capacity(regions.len());
    let mut uncovered = Vec::new();
    for region in &regions.regions {
        let present: Vec<(u64, f64)> = region
            .tile_overlaps
            .iter()
            .filter(|(tid, _)| tile_features.contains_key(tid))
            .cloned()
            .collect();
        if present.is_empty() {
            uncovered.push(region.id.clone());
            continue;
        }
        let chosen: Vec<(u64, f64)> = if present.len() > max_tiles {
            let picks = sample(&mut rng, present.len(), max_tiles);
            picks.into_iter().map(|i| present[i].clone()).collect()
        } else {
            present
        };
        let total: f64 = chosen.iter().map(|(_, w)| w).sum();
        let mut row = vec![0.0; d];
        for (tid, w) in &chosen {
            let f = &tile_features[tid];
            for (acc, v) in row.iter_mut().zip(f) {
                *acc += (w / total) * v;
            }
        }
        region_ids.push(region.id.clone());
        rows.push(row);
    }
    if !uncovered.is_empty() {
        return Err(Error::Coverage(uncovered));
    }
    Ok(FeatureMatrix {
        region_ids,
        rows,
        bank_seed: seed,
        d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Region, RegionDataset};

    fn region_with_tiles(id: &str, overlaps: Vec<(u64, f64)>) -> Region {
        Region {
            id: id.into(),
            tile_overlaps: overlaps,
            urban: false,
            wealth: 0.0,
            raw_wealth: 0.0,
            population: 1.0,
            cells: vec![],
        }
    }

    #[test]
    fn bank_is_seed_deterministic() {
        let a = make_filter_bank(7, 16, 3).unwrap();
        let b = make_filter_bank(7, 16, 3).unwrap();
        assert_eq!(a, b);
        let c = make_filter_bank(8, 16, 3).unwrap();
        assert_ne!(a.filters, c.filters);
    }

    #[test]
    fn feature_dimension_is_twice_filter_count() {
        let bank = make_filter_bank(0, 2000, 3).unwrap();
        assert_eq!(bank.dim(), 4000);
    }

    #[test]
    fn filters_have_unit_frobenius_norm() {
        let bank = make_filter_bank(3, 32, 4).unwrap();
        for f in &bank.filters {
            let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_tile_gives_zero_vector() {
        let bank = make_filter_bank(1, 8, 2).unwrap();
        let tile = vec![0.0f32; 16];
        let f = featurize_tile(&tile, 4, &bank).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn negated_tile_swaps_sign_components() {
        let bank = make_filter_bank(5, 8, 2).unwrap();
        let tile: Vec<f32> = (0..16).map(|i| (i as f32 - 7.5) * 0.3).collect();
        let neg: Vec<f32> = tile.iter().map(|v| -v).collect();
        let a = featurize_tile(&tile, 4, &bank).unwrap();
        let b = featurize_tile(&neg, 4, &bank).unwrap();
        for k in 0..bank.n_filters {
            assert!((a[2 * k] - b[2 * k + 1]).abs() < 1e-12);
            assert!((a[2 * k + 1] - b[2 * k]).abs() < 1e-12);
        }
    }

    #[test]
    fn ones_filter_hand_computed() {
        // 4x4 tile, one 2x2 all-ones filter: positive component is the mean
        // of the nine valid window sums clipped at zero.
        let tile: Vec<f32> = (0..16).map(|i| i as f32 - 5.0).collect();
        let bank = FilterBank {
            seed: 0,
            n_filters: 1,
            patch_size: 2,
            filters: vec![vec![1.0; 4]],
            biases: vec![0.0],
        };
        let f = featurize_tile(&tile, 4, &bank).unwrap();
        let mut expect = 0.0;
        for oy in 0..3 {
            for ox in 0..3 {
                let s: f32 = [0, 1, 4, 5]
                    .iter()
                    .map(|&off| tile[oy * 4 + ox + off])
                    .sum();
                expect += f64::from(s).max(0.0);
            }
        }
        expect /= 9.0;
        assert!((f[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn nonfinite_pixel_rejected() {
        let bank = make_filter_bank(1, 2, 2).unwrap();
        let mut tile = vec![0.0f32; 16];
        tile[3] = f32::NAN;
        assert!(matches!(
            featurize_tile(&tile, 4, &bank),
            Err(Error::Data(_))
        ));
    }

    fn toy_tile_features() -> BTreeMap<u64, Vec<f64>> {
        let mut m = BTreeMap::new();
        m.insert(0, vec![1.0, 2.0]);
        m.insert(1, vec![3.0, 6.0]);
        m
    }

    #[test]
    fn single_tile_region_is_identity() {
        let tf = toy_tile_features();
        let ds =
            RegionDataset::new("t", vec![region_with_tiles("a", vec![(0, 1.0)])]).unwrap();
        let fm = aggregate_region_features(&tf, &ds, 100, 0).unwrap();
        assert_eq!(fm.rows[0], vec![1.0, 2.0]);
    }

    #[test]
    fn weighted_mean_of_two_tiles() {
        let tf = toy_tile_features();
        let ds = RegionDataset::new(
            "t",
            vec![region_with_tiles("a", vec![(0, 0.25), (1, 0.75)])],
        )
        .unwrap();
        let fm = aggregate_region_features(&tf, &ds, 100, 0).unwrap();
        assert!((fm.rows[0][0] - (0.25 + 2.25)).abs() < 1e-12);
        assert!((fm.rows[0][1] - (0.5 + 4.5)).abs() < 1e-12);
    }

    #[test]
    fn subsample_of_identical_tiles_is_identity() {
        let mut tf = BTreeMap::new();
        let n = 150;
        for t in 0..n {
            tf.insert(t as u64, vec![4.0, 5.0]);
        }
        let overlaps: Vec<(u64, f64)> = (0..n).map(|t| (t as u64, 1.0 / n as f64)).collect();
        let ds = RegionDataset::new("t", vec![region_with_tiles("a", overlaps)]).unwrap();
        let fm = aggregate_region_features(&tf, &ds, 100, 9).unwrap();
        assert!((fm.rows[0][0] - 4.0).abs() < 1e-12);
        assert!((fm.rows[0][1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn aggregation_permutation_invariant() {
        let tf = toy_tile_features();
        let a = RegionDataset::new(
            "t",
            vec![region_with_tiles("a", vec![(0, 0.25), (1, 0.75)])],
        )
        .unwrap();
        let b = RegionDataset::new(
            "t",
            vec![region_with_tiles("a", vec![(1, 0.75), (0, 0.25)])],
        )
        .unwrap();
        let fa = aggregate_region_features(&tf, &a, 100, 0).unwrap();
        let fb = aggregate_region_features(&tf, &b, 100, 0).unwrap();
        for (x, y) in fa.rows[0].iter().zip(&fb.rows[0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_coverage_lists_region() {
        let tf = toy_tile_features();
        let ds = RegionDataset::new(
            "t",
            vec![
                region_with_tiles("a", vec![(0, 1.0)]),
                region_with_tiles("b", vec![(99, 1.0)]),
            ],
        )
        .unwrap();
        match aggregate_region_features(&tf, &ds, 100, 0) {
            Err(Error::Coverage(ids)) => assert_eq!(ids, vec!["b"]),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn features_nonnegative_and_finite() {
        let bank = make_filter_bank(11, 16, 3).unwrap();
        let tile: Vec<f32> = (0..64).map(|i| ((i * 37) % 13) as f32 - 6.0).collect();
        let f = featurize_tile(&tile, 8, &bank).unwrap();
        assert!(f.iter().all(|&v| v >= 0.0 && v.is_finite()));
    }
}
