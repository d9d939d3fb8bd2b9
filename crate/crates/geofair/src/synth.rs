//! Synthetic country generation: tile rasters plus region datasets with a
//! controllable wealth-urbanization correlation and controllable visibility
//! of within-group wealth in the imagery.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audit::spearman;
use crate::data::{round_half_up, standardize_labels, Region, RegionDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub name: String,
    pub n_regions: usize,
    pub rural_share: f64,
    /// Desired Spearman correlation between wealth and the urban flag.
    pub target_rho: f64,
    /// Fraction of within-group wealth variation expressed in tile texture.
    pub within_visibility: f64,
    /// Zero out visibility for the poorest quartile of urban regions, so
    /// urban poverty is invisible in the imagery.
    pub mask_urban_poor: bool,
    pub tile_grid: (usize, usize),
    pub tiles_per_region: (usize, usize),
    pub tile_side: usize,
    pub pixel_noise: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_regions < 8 {
            return Err(Error::Config(format!(
                "n_regions must be >= 8, got {}",
                self.n_regions
            )));
        }
        if !(self.rural_share > 0.0 && self.rural_share < 1.0) {
            return Err(Error::Config(format!(
                "rural_share must be in (0,1), got {}",
                self.rural_share
            )));
        }
        let n = self.n_regions as f64;
        if self.rural_share * n < 2.0 || (1.0 - self.rural_share) * n < 2.0 {
            return Err(Error::Config(
                "need at least 2 urban and 2 rural regions".into(),
            ));
        }
        if !(-1.0..=1.0).contains(&self.target_rho) {
            return Err(Error::Config(format!(
                "target_rho must be in [-1,1], got {}",
                self.target_rho
            )));
        }
        if !(0.0..=1.0).contains(&self.within_visibility) {
            return Err(Error::Config(format!(
                "within_visibility must be in [0,1], got {}",
                self.within_visibility
            )));
        }
        if self.pixel_noise < 0.0 {
            return Err(Error::Config("pixel_noise must be nonnegative".into()));
        }
        let (min_t, max_t) = self.tiles_per_region;
        if min_t < 1 || max_t < min_t {
            return Err(Error::Config(format!(
                "tiles_per_region must satisfy 1 <= min <= max, got ({min_t},{max_t})"
            )));
        }
        if self.tile_grid.0 * self.tile_grid.1 < self.n_regions * max_t {
            return Err(Error::Config(format!(
                "tile grid {}x{} cannot host {} regions with up to {max_t} tiles each",
                self.tile_grid.0, self.tile_grid.1, self.n_regions
            )));
        }
        if self.tile_side < 2 {
            return Err(Error::Config("tile_side must be >= 2".into()));
        }
        Ok(())
    }
}

/// Single-channel tiles, all sharing one side length.
#[derive(Debug, Clone, PartialEq)]
pub struct TileRaster {
    pub side_length: usize,
    pub tiles: BTreeMap<u64, Vec<f32>>,
}

const RASTER_MAGIC: &[u8; 4] = b"GFRT";

impl TileRaster {
    /// Flat binary format: magic "GFRT", u32 side, u32 tile count, then
    /// side*side little-endian f32 per tile in ascending tile id order.
    pub fn write_binary(&self, mut w: impl Write) -> Result<()> {
        w.write_all(RASTER_MAGIC)?;
        w.write_all(&(self.side_length as u32).to_le_bytes())?;
        w.write_all(&(self.tiles.len() as u32).to_le_bytes())?;
        for pixels in self.tiles.values() {
            for p in pixels {
                w.write_all(&p.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary(mut r: impl Read, index: &[u64]) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != RASTER_MAGIC {
            return Err(Error::Data("bad raster magic".into()));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        let side = u32::from_le_bytes(buf4) as usize;
        r.read_exact(&mut buf4)?;
        let count = u32::from_le_bytes(buf4) as usize;
        if index.len() != count {
            return Err(Error::Data(format!(
                "raster index lists {} tiles, binary holds {count}",
                index.len()
            )));
        }
        let mut tiles = BTreeMap::new();
        for &tid in index {
            let mut pixels = vec![0f32; side * side];
            for p in pixels.iter_mut() {
                r.read_exact(&mut buf4)?;
                *p = f32::from_le_bytes(buf4);
            }
            tiles.insert(tid, pixels);
        }
        Ok(TileRaster {
            side_length: side,
            tiles,
        })
    }

    pub fn save(&self, binary_path: &Path, index_path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(binary_path)?);
        self.write_binary(f)?;
        let mut idx = std::io::BufWriter::new(std::fs::File::create(index_path)?);
        writeln!(idx, "tile_id")?;
        for tid in self.tiles.keys() {
            writeln!(idx, "{tid}")?;
        }
        idx.flush()?;
        Ok(())
    }

    pub fn load(binary_path: &Path, index_path: &Path) -> Result<Self> {
        if !binary_path.exists() {
            return Err(Error::MissingInput(binary_path.display().to_string()));
        }
        if !index_path.exists() {
            return Err(Error::MissingInput(index_path.display().to_string()));
        }
        let text = std::fs::read_to_string(index_path)?;
        let index: Vec<u64> = text
            .lines()
            .skip(1)
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.trim().parse::<u64>().map_err(|_| Error::Parse {
                    row: 0,
                    message: format!("bad tile id '{l}' in raster index"),
                })
            })
            .collect::<Result<_>>()?;
        let f = std::io::BufReader::new(std::fs::File::open(binary_path)?);
        Self::read_binary(f, &index)
    }
}

/// Tile texture: base intensity equal to buildup, a checkerboard whose
/// spatial frequency rises with buildup (so convolutional features see
/// more than the mean), and i.i.d. Gaussian pixel noise on top.
fn texture_pixel(buildup: f64, x: usize, y: usize, side: usize) -> f64 {
    let freq = 1.0 + (2.0 * buildup).clamp(0.0, 6.0);
    let cx = (x as f64 * freq / side as f64).floor() as i64;
    let cy = (y as f64 * freq / side as f64).floor() as i64;
    let checker = if (cx + cy) % 2 == 0 { 0.25 } else { -0.25 };
    buildup + checker
}

pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn achieved_rho(alpha: f64, latent: &[f64], urban: &[bool]) -> f64 {
    let w: Vec<f64> = latent
        .iter()
        .zip(urban)
        .map(|(&l, &u)| alpha * f64::from(u as u8) + l)
        .collect();
    let u: Vec<f64> = urban.iter().map(|&u| f64::from(u as u8)).collect();
    spearman(&w, &u).unwrap_or(0.0)
}

/// Generate one synthetic country. Deterministic given the config seed.
pub fn generate_country(cfg: &SynthConfig) -> Result<(RegionDataset, TileRaster)> {
    cfg.validate()?;
    let n = cfg.n_regions;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Urban flags: a seeded random subset of the right size.
    let n_urban = round_half_up((1.0 - cfg.rural_share) * n as f64).clamp(2, n - 2);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let mut urban = vec![false; n];
    for &i in &idx[..n_urban] {
        urban[i] = true;
    }

    let latent: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();

    // Calibrate the urban wealth premium by bisection so the empirical
    // Spearman rho(w, u) hits the target within +-0.03.
    let (mut lo, mut hi) = (-10.0f64, 10.0f64);
    let rho_lo = achieved_rho(lo, &latent, &urban);
    let rho_hi = achieved_rho(hi, &latent, &urban);
    if cfg.target_rho < rho_lo - 0.03 || cfg.target_rho > rho_hi + 0.03 {
        return Err(Error::Config(format!(
            "target_rho {} unreachable; achievable range is [{rho_lo:.3}, {rho_hi:.3}]",
            cfg.target_rho
        )));
    }
    let mut alpha = 0.0;
    let mut rho = achieved_rho(alpha, &latent, &urban);
    for _ in 0..60 {
        if (rho - cfg.target_rho).abs() <= 0.005 {
            break;
        }
        if rho < cfg.target_rho {
            lo = alpha;
        } else {
            hi = alpha;
        }
        alpha = 0.5 * (lo + hi);
        rho = achieved_rho(alpha, &latent, &urban);
    }
    if (rho - cfg.target_rho).abs() > 0.03 {
        return Err(Error::Config(format!(
            "bisection failed to reach target_rho {}; best achieved {rho:.3} \
             (achievable range [{rho_lo:.3}, {rho_hi:.3}])",
            cfg.target_rho
        )));
    }

    let wealth: Vec<f64> = latent
        .iter()
        .zip(&urban)
        .map(|(&l, &u)| alpha * f64::from(u as u8) + l)
        .collect();

    // Per-region visibility of the latent in imagery.
    let gamma = cfg.within_visibility;
    let mut visibility = vec![gamma; n];
    if cfg.mask_urban_poor {
        let mut urban_idx: Vec<usize> = (0..n).filter(|&i| urban[i]).collect();
        urban_idx.sort_by(|&a, &b| wealth[a].partial_cmp(&wealth[b]).unwrap());
        let quartile = (urban_idx.len() + 3) / 4;
        for &i in &urban_idx[..quartile] {
            visibility[i] = 0.0;
        }
    }

    // Disjoint contiguous tile blocks, assigned in region order.
    let (min_t, max_t) = cfg.tiles_per_region;
    let side = cfg.tile_side;
    let mut tiles = BTreeMap::new();
    let mut next_tile: u64 = 0;
    let mut regions = Vec::with_capacity(n);
    for i in 0..n {
        let k = rng.gen_range(min_t..=max_t);
        let raw_weights: Vec<f64> = (0..k).map(|_| rng.gen_range(0.5..1.5)).collect();
        let total: f64 = raw_weights.iter().sum();
        let buildup = if urban[i] {
            1.0 + visibility[i] * latent[i]
        } else {
            visibility[i] * latent[i]
        };
        let mut overlaps = Vec::with_capacity(k);
        for w in raw_weights {
            let tid = next_tile;
            next_tile += 1;
            let mut pixels = Vec::with_capacity(side * side);
            for y in 0..side {
                for x in 0..side {
                    let noise = cfg.pixel_noise * standard_normal(&mut rng);
                    pixels.push((texture_pixel(buildup, x, y, side) + noise) as f32);
                }
            }
            tiles.insert(tid, pixels);
            overlaps.push((tid, w / total));
        }
        regions.push(Region {
            id: format!("r{i:05}"),
            tile_overlaps: overlaps,
            urban: urban[i],
            wealth: 0.0,
            raw_wealth: wealth[i],
            population: rng.gen_range(100.0..10_000.0),
            cells: vec![],
        });
    }

    let dataset = RegionDataset::new(cfg.name.clone(), regions)?;
    let dataset = standardize_labels(&dataset, false)?;
    Ok((
        dataset,
        TileRaster {
            side_length: side,
            tiles,
        },
    ))
}

fn base_config(name: &str) -> SynthConfig {
    SynthConfig {
        name: name.into(),
        n_regions: 800,
        rural_share: 0.5,
        target_rho: 0.5,
        within_visibility: 0.5,
        mask_urban_poor: false,
        tile_grid: (80, 80),
        tiles_per_region: (2, 6),
        tile_side: 8,
        pixel_noise: 4.0,
        seed: 20230801,
    }
}

/// The canonical config suite used by the acceptance tests.
pub fn describe_config_suite() -> Vec<SynthConfig> {
    vec![
        SynthConfig {
            target_rho: 0.7,
            rural_share: 0.56,
            within_visibility: 0.3,
            pixel_noise: 5.0,
            ..base_config("rural-poverty")
        },
        SynthConfig {
            target_rho: 0.3,
            within_visibility: 0.2,
            mask_urban_poor: true,
            pixel_noise: 1.0,
            ..base_config("hidden-urban-poor")
        },
        SynthConfig {
            target_rho: 0.6,
            within_visibility: 0.9,
            pixel_noise: 1.0,
            ..base_config("high-visibility")
        },
    ]
}

pub fn suite_config(name: &str) -> Result<SynthConfig> {
    describe_config_suite()
        .into_iter()
        .find(|c| c.name == name)
        .ok_or_else(|| Error::Config(format!("unknown synth config '{name}'")))
}
