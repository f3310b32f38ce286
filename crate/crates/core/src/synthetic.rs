//! Deterministic miniature survey for tests, demos and benchmarks.
//!
//! Two 128 m optical locations side by side, each imaged in four years at
//! 0.25 m and covered by four 64 m LiDAR tiles. A ninth LiDAR tile straddles
//! the two locations and must never be matched. Ground sits at 100 m.
//!
//! Location A: canopy block at 110 m (NW), grass with a water void partly
//! under canopy (NE), bare soil with no vegetation returns (SW), grass with a
//! round 10 m crown (SE). Location B: grass with a canopy stripe; its SE
//! quadrant has no imagery in 2012 and 2015.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pointcloud::{write_cloud, CloudWriteOptions, PointBatch};
use crate::raster::{write_geotiff, AffineTransform, BBox, ByteRaster};

pub const ORIGIN_X: f64 = 400_000.0;
pub const ORIGIN_Y: f64 = 6_300_000.0;
pub const LOCATION_SIZE: f64 = 128.0;
pub const CLOUD_TILE_SIZE: f64 = 64.0;
pub const GROUND_Z: f64 = 100.0;
pub const CANOPY_Z: f64 = 110.0;
pub const GRASS_Z: f64 = 100.3;
pub const OPTICAL_CELL: f64 = 0.25;
pub const OPTICAL_YEARS: [f64; 4] = [2012.0, 2015.0, 2018.0, 2020.0];
pub const GAP_YEARS: [f64; 2] = [2012.0, 2015.0];
pub const FIXTURE_TILE_PX: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cover {
    Bare,
    Grass,
    Canopy,
    /// No ground returns.
    Water,
    /// No ground returns, canopy overhead.
    WaterUnderCanopy,
}

impl Cover {
    fn has_ground(self) -> bool {
        matches!(self, Cover::Bare | Cover::Grass | Cover::Canopy)
    }

    fn vegetation_z(self) -> Option<f64> {
        match self {
            Cover::Grass => Some(GRASS_Z),
            Cover::Canopy | Cover::WaterUnderCanopy => Some(CANOPY_Z),
            Cover::Bare | Cover::Water => None,
        }
    }

    fn reflectance(self) -> [u8; 4] {
        // R, G, B, NIR
        match self {
            Cover::Bare => [150, 130, 110, 120],
            Cover::Grass => [90, 130, 70, 160],
            Cover::Canopy | Cover::WaterUnderCanopy => [40, 90, 40, 200],
            Cover::Water => [20, 40, 60, 10],
        }
    }
}

fn rect(u: f64, v: f64, u0: f64, v0: f64, u1: f64, v1: f64) -> bool {
    u >= u0 && u < u1 && v >= v0 && v < v1
}

pub fn location_bbox(index: usize) -> BBox {
    let x = ORIGIN_X + index as f64 * LOCATION_SIZE;
    BBox::new(x, ORIGIN_Y, x + LOCATION_SIZE, ORIGIN_Y + LOCATION_SIZE).expect("valid")
}

/// Footprint of location A's canopy block.
pub fn canopy_block() -> BBox {
    BBox::new(ORIGIN_X + 8.0, ORIGIN_Y + 72.0, ORIGIN_X + 56.0, ORIGIN_Y + 120.0).expect("valid")
}

/// Footprint of location A's water void.
pub fn water_void() -> BBox {
    BBox::new(ORIGIN_X + 84.0, ORIGIN_Y + 84.0, ORIGIN_X + 92.0, ORIGIN_Y + 92.0).expect("valid")
}

/// Location A's bare quadrant: valid DTM, no vegetation, so no CHM.
pub fn bare_quadrant() -> BBox {
    BBox::new(ORIGIN_X, ORIGIN_Y, ORIGIN_X + 64.0, ORIGIN_Y + 64.0).expect("valid")
}

/// Location B's quadrant without imagery in [`GAP_YEARS`].
pub fn imagery_gap() -> BBox {
    let b = location_bbox(1);
    BBox::new(b.min_x + 64.0, b.min_y, b.max_x, b.min_y + 64.0).expect("valid")
}

pub fn cover_at(x: f64, y: f64) -> Cover {
    let (u, v) = (x - ORIGIN_X, y - ORIGIN_Y);
    if u < LOCATION_SIZE {
        if rect(u, v, 84.0, 84.0, 88.0, 92.0) {
            Cover::WaterUnderCanopy
        } else if rect(u, v, 88.0, 84.0, 92.0, 92.0) {
            Cover::Water
        } else if rect(u, v, 8.0, 72.0, 56.0, 120.0) {
            Cover::Canopy
        } else if u < 64.0 && v < 64.0 {
            Cover::Bare
        } else if (u - 96.0).powi(2) + (v - 32.0).powi(2) < 144.0 {
            Cover::Canopy
        } else {
            Cover::Grass
        }
    } else {
        let u = u - LOCATION_SIZE;
        if rect(u, v, 16.0, 0.0, 48.0, LOCATION_SIZE) {
            Cover::Canopy
        } else {
            Cover::Grass
        }
    }
}

#[derive(Debug, Clone)]
pub struct CloudTile {
    pub id: String,
    pub bbox: BBox,
    pub year: f64,
    /// The straddler is filled with tall canopy so any wrongful match shows.
    pub decoy: bool,
}

pub fn cloud_tiles() -> Vec<CloudTile> {
    let mut out = Vec::new();
    for loc in 0..2 {
        let b = location_bbox(loc);
        for (i, j) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            let x = b.min_x + i as f64 * CLOUD_TILE_SIZE;
            let y = b.min_y + j as f64 * CLOUD_TILE_SIZE;
            let name = ["a", "b"][loc];
            // Location A's NE tile is one year newer.
            let year = if loc == 0 && (i, j) == (1, 1) { 2022.0 } else { 2021.0 };
            out.push(CloudTile {
                id: format!("lidar_{name}_{i}_{j}.laz"),
                bbox: BBox::new(x, y, x + CLOUD_TILE_SIZE, y + CLOUD_TILE_SIZE).expect("valid"),
                year,
                decoy: false,
            });
        }
    }
    let x = ORIGIN_X + 96.0;
    let y = ORIGIN_Y + 32.0;
    out.push(CloudTile {
        id: "lidar_straddle.laz".into(),
        bbox: BBox::new(x, y, x + CLOUD_TILE_SIZE, y + CLOUD_TILE_SIZE).expect("valid"),
        year: 2023.0,
        decoy: true,
    });
    out
}

/// Two ground and two vegetation returns per 0.5 m cell, jittered away
/// from cell edges.
pub fn cloud_points(tile: &CloudTile, seed: u64) -> PointBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ hash_id(&tile.id));
    let cell = 0.5;
    let nx = (tile.bbox.width() / cell).round() as usize;
    let ny = (tile.bbox.height() / cell).round() as usize;
    let mut batch = PointBatch::with_capacity(nx * ny * 4);
    for j in 0..ny {
        for i in 0..nx {
            let x0 = tile.bbox.min_x + i as f64 * cell;
            let y0 = tile.bbox.min_y + j as f64 * cell;
            let cover = cover_at(x0 + 0.25, y0 + 0.25);
            for _ in 0..2 {
                let x = x0 + rng.random_range(0.05..0.45);
                let y = y0 + rng.random_range(0.05..0.45);
                if cover.has_ground() {
                    batch.push(x, y, GROUND_Z, 2);
                }
                let veg = if tile.decoy { Some(CANOPY_Z + 20.0) } else { cover.vegetation_z() };
                if let Some(z) = veg {
                    let class = if z > GRASS_Z { 5 } else { 3 };
                    batch.push(x + 0.01, y + 0.01, z, class);
                }
            }
        }
    }
    // A roof return that must be ignored.
    batch.push(tile.bbox.min_x + 1.0, tile.bbox.min_y + 1.0, GROUND_Z + 50.0, 6);
    batch
}

fn hash_id(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// RGB and NIR-R-G rasters for one location and year.
pub fn optical_pair(location: usize, year: f64, seed: u64) -> (ByteRaster, ByteRaster) {
    let b = location_bbox(location);
    let n = (LOCATION_SIZE / OPTICAL_CELL).round() as usize;
    let transform = AffineTransform::north_up(b.min_x, b.max_y, OPTICAL_CELL).expect("valid");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (location as u64) << 32 ^ year.to_bits());
    let shift = ((year - 2012.0) * 2.0) as i32;
    let gap = imagery_gap();
    let in_gap = GAP_YEARS.contains(&year);
    let mut planes = vec![vec![0u8; n * n]; 4];
    for row in 0..n {
        for col in 0..n {
            let (x, y) = transform.pixel_center(col, row);
            if in_gap && gap.contains_point(x, y) {
                continue;
            }
            let base = cover_at(x, y).reflectance();
            for (p, v) in planes.iter_mut().zip(base) {
                let noisy = v as i32 + shift + rng.random_range(-4..=4);
                p[row * n + col] = noisy.clamp(1, 255) as u8;
            }
        }
    }
    let rgb = ByteRaster::new(transform, n, n, 2154, planes[..3].to_vec()).expect("shape");
    let nirrg = ByteRaster::new(
        transform,
        n,
        n,
        2154,
        vec![planes[3].clone(), planes[0].clone(), planes[1].clone()],
    )
    .expect("shape");
    (rgb, nirrg)
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub root: PathBuf,
    pub catalog: PathBuf,
    pub config: PathBuf,
    pub department: String,
}

impl Fixture {
    pub fn cloud_path(&self, id: &str) -> PathBuf {
        self.root.join("lidar").join(id)
    }
}

/// Writes LAZ tiles, GeoTIFF orthophotos, `catalog.jsonl` and a
/// `pipeline.toml` (work directory `work/`, 128 px tiles) under `root`.
pub fn write_fixture(root: &Path, seed: u64) -> Result<Fixture> {
    let department = "33".to_string();
    let lidar = root.join("lidar");
    let optical = root.join("optical");
    for d in [&lidar, &optical] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut lines = Vec::new();
    let mut row = |id: &str, kind: &str, b: &BBox, year: f64, url: String| {
        lines.push(serde_json::json!({
            "id": id, "kind": kind,
            "minx": b.min_x, "miny": b.min_y, "maxx": b.max_x, "maxy": b.max_y,
            "year": year, "url": url, "department": department,
        }).to_string());
    };

    for tile in cloud_tiles() {
        let opts = CloudWriteOptions {
            acquisition_year: Some(tile.year + 0.5),
            ..CloudWriteOptions::default()
        };
        write_cloud(lidar.join(&tile.id), &cloud_points(&tile, seed), &opts)?;
        row(&tile.id, "PointCloud", &tile.bbox, tile.year, format!("lidar/{}", tile.id));
    }
    let none = BTreeMap::new();
    for loc in 0..2 {
        let name = ["a", "b"][loc];
        for year in OPTICAL_YEARS {
            let (rgb, nirrg) = optical_pair(loc, year, seed);
            for (kind, raster) in [("RGB", &rgb), ("NIRRG", &nirrg)] {
                let id = format!("{}_{name}_{year:.0}.tif", kind.to_lowercase());
                write_geotiff(raster, optical.join(&id), &none)?;
                row(&id, kind, &location_bbox(loc), year, format!("optical/{id}"));
            }
        }
    }
    let catalog = root.join("catalog.jsonl");
    let mut f = fs::File::create(&catalog).map_err(|e| Error::io(&catalog, e))?;
    for l in &lines {
        writeln!(f, "{l}").map_err(|e| Error::io(&catalog, e))?;
    }

    let config = root.join("pipeline.toml");
    let toml = format!(
        "catalog = \"catalog.jsonl\"\nwork_dir = \"work\"\ntile_px = {FIXTURE_TILE_PX}\nseed = {seed}\n\n[fetch]\nbackoff_base_ms = 10\n"
    );
    fs::write(&config, toml).map_err(|e| Error::io(&config, e))?;
    Ok(Fixture {
        root: root.to_path_buf(),
        catalog,
        config,
        department,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::bbox_contains;

    #[test]
    fn layout_is_consistent() {
        let tiles = cloud_tiles();
        assert_eq!(tiles.len(), 9);
        let straddler = tiles.iter().find(|t| t.decoy).unwrap();
        assert!(!bbox_contains(&location_bbox(0), &straddler.bbox));
        assert!(!bbox_contains(&location_bbox(1), &straddler.bbox));
        assert_eq!(cover_at(ORIGIN_X + 10.0, ORIGIN_Y + 10.0), Cover::Bare);
        assert_eq!(cover_at(ORIGIN_X + 20.0, ORIGIN_Y + 100.0), Cover::Canopy);
        assert_eq!(cover_at(ORIGIN_X + 90.0, ORIGIN_Y + 88.0), Cover::Water);
    }

    #[test]
    fn points_are_deterministic() {
        let t = &cloud_tiles()[0];
        assert_eq!(cloud_points(t, 3), cloud_points(t, 3));
        let (a, _) = optical_pair(1, 2012.0, 3);
        let (b, _) = optical_pair(1, 2012.0, 3);
        assert_eq!(a, b);
        // The gap is zero in every band.
        let idx = a.width * (a.height - 1) + a.width - 1;
        assert!(a.bands.iter().all(|p| p[idx] == 0));
    }
}
