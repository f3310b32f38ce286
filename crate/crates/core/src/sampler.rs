//! Timestamp selection, validity masks and fixed-size training tiles.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mosaic::Mosaic;
use crate::raster::{metadata_keys, write_geotiff, BBox, Grid, MultiSpectralImage};

pub const INPUT_TIMESTAMPS: usize = 3;
/// Images per sample: three inputs plus the target.
pub const IMAGES_PER_SAMPLE: usize = INPUT_TIMESTAMPS + 1;

fn rng_for(seed: u64, department: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(department.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Picks 3 of the available acquisitions, uniformly and reproducibly for a
/// given `(seed, department)`. Returns indices into `available`, ordered by
/// ascending year.
pub fn select_timestamps(available: &[f64], seed: u64, department: &str) -> Result<[usize; 3]> {
    if available.len() < INPUT_TIMESTAMPS {
        return Err(Error::InsufficientTimestamps {
            found: available.len(),
        });
    }
    let mut order: Vec<usize> = (0..available.len()).collect();
    order.sort_by(|&a, &b| available[a].total_cmp(&available[b]).then(a.cmp(&b)));
    let mut picked: Vec<usize> = if order.len() == INPUT_TIMESTAMPS {
        order.clone()
    } else {
        let mut rng = rng_for(seed, department);
        rand::seq::index::sample(&mut rng, order.len(), INPUT_TIMESTAMPS)
            .into_iter()
            .map(|k| order[k])
            .collect()
    };
    picked.sort_by(|&a, &b| available[a].total_cmp(&available[b]).then(a.cmp(&b)));
    Ok([picked[0], picked[1], picked[2]])
}

pub fn compute_delta_t(target_year: f64, selected: [f64; 3]) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for (o, year) in out.iter_mut().zip(selected) {
        if year >= target_year {
            return Err(Error::NonCausalTimestamp { year, target_year });
        }
        *o = target_year - year;
    }
    Ok(out)
}

/// CHM valid AND no input image is zero imagery at the pixel.
pub fn make_mask(chm: &Grid, inputs: [&MultiSpectralImage; 3]) -> Result<Vec<bool>> {
    for img in inputs {
        if img.width != chm.width || img.height != chm.height {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} vs chm {}x{}",
                img.width, img.height, chm.width, chm.height
            )));
        }
    }
    Ok((0..chm.width * chm.height)
        .map(|i| chm.is_valid_index(i) && inputs.iter().all(|img| !img.is_empty_pixel(i)))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileParams {
    pub tile_px: usize,
    pub min_valid_fraction: f64,
    pub seed: u64,
}

impl Default for TileParams {
    fn default() -> Self {
        Self {
            tile_px: 256,
            min_valid_fraction: 0.5,
            seed: 0,
        }
    }
}

impl TileParams {
    pub fn validate(&self) -> Result<()> {
        if self.tile_px == 0 {
            return Err(Error::InvalidArgument("tile_px must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.min_valid_fraction) {
            return Err(Error::InvalidArgument(format!(
                "min_valid_fraction {} outside [0, 1]",
                self.min_valid_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub tile_id: String,
    pub origin: BBox,
    pub department: String,
    pub inputs: [MultiSpectralImage; 3],
    pub chm: Grid,
    pub mask: Vec<bool>,
    pub delta_t: [f64; 3],
    pub valid_fraction: f64,
    pub mean_year: f64,
    pub source_count: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilingStats {
    pub candidates: usize,
    pub kept: usize,
    pub rejected: usize,
}

impl TilingStats {
    pub fn merge(&mut self, other: TilingStats) {
        self.candidates += other.candidates;
        self.kept += other.kept;
        self.rejected += other.rejected;
    }
}

/// Global lattice coordinates of the tile's upper-left corner, so ids stay
/// unique across optical tiles.
pub fn tile_id(department: &str, grid: &Grid, col: usize, row: usize) -> String {
    let (x, y) = grid.transform.pixel_to_world(col as f64, row as f64);
    let gc = (x / grid.transform.cell_width()).round() as i64;
    let gr = (y / grid.transform.cell_height()).round() as i64;
    format!("{department}_{gc}_{gr}")
}

/// Selects three causal acquisitions, cuts `tile_px` windows anchored at
/// the raster origin (ragged edges dropped) and hands every window whose
/// valid fraction reaches the threshold to `sink`.
pub fn for_each_sample<F>(
    stacks: &[MultiSpectralImage],
    chm: &Mosaic,
    department: &str,
    params: &TileParams,
    mut sink: F,
) -> Result<TilingStats>
where
    F: FnMut(Sample) -> Result<()>,
{
    params.validate()?;
    let target_year = chm.mean_year;
    let causal: Vec<&MultiSpectralImage> = stacks
        .iter()
        .filter(|s| s.acquisition_year < target_year)
        .collect();
    let years: Vec<f64> = causal.iter().map(|s| s.acquisition_year).collect();
    let picked = select_timestamps(&years, params.seed, department)?;
    let inputs = picked.map(|i| causal[i]);
    let delta_t = compute_delta_t(target_year, inputs.map(|s| s.acquisition_year))?;

    let grid = &chm.grid;
    let tol = 1e-6 * grid.transform.cell_width();
    for img in inputs {
        if img.width != grid.width
            || img.height != grid.height
            || !img.transform.approx_eq(&grid.transform, tol)
        {
            return Err(Error::AlignmentMismatch(format!(
                "image {}x{} at {:?} vs chm {}x{} at {:?}",
                img.width, img.height, img.transform, grid.width, grid.height, grid.transform
            )));
        }
    }
    let mask = make_mask(grid, inputs)?;

    let n = params.tile_px;
    let mut stats = TilingStats::default();
    for tr in 0..grid.height / n {
        for tc in 0..grid.width / n {
            stats.candidates += 1;
            let (col, row) = (tc * n, tr * n);
            let mut tile_mask = Vec::with_capacity(n * n);
            for r in row..row + n {
                tile_mask.extend_from_slice(&mask[r * grid.width + col..r * grid.width + col + n]);
            }
            let valid = tile_mask.iter().filter(|&&m| m).count();
            let valid_fraction = valid as f64 / (n * n) as f64;
            if valid_fraction < params.min_valid_fraction {
                stats.rejected += 1;
                continue;
            }
            stats.kept += 1;
            let cut = |img: &MultiSpectralImage| img.window(col, row, n, n);
            let chm_tile = grid.window(col, row, n, n)?;
            sink(Sample {
                tile_id: tile_id(department, grid, col, row),
                origin: chm_tile.bbox(),
                department: department.to_string(),
                inputs: [cut(inputs[0])?, cut(inputs[1])?, cut(inputs[2])?],
                chm: chm_tile,
                mask: tile_mask,
                delta_t,
                valid_fraction,
                mean_year: chm.mean_year,
                source_count: chm.source_count,
            })?;
        }
    }
    Ok(stats)
}

pub fn tile_and_filter(
    stacks: &[MultiSpectralImage],
    chm: &Mosaic,
    department: &str,
    params: &TileParams,
) -> Result<(Vec<Sample>, TilingStats)> {
    let mut samples = Vec::new();
    let stats = for_each_sample(stacks, chm, department, params, |s| {
        samples.push(s);
        Ok(())
    })?;
    Ok((samples, stats))
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub tile_id: String,
    pub input_paths: [PathBuf; 3],
    pub chm_path: PathBuf,
    pub delta_t: [f64; 3],
    pub valid_fraction: f64,
    pub department: String,
    pub mean_year: f64,
}

/// Writes the three inputs and the target as GeoTIFFs under `dir`.
pub fn write_sample(sample: &Sample, dir: &Path) -> Result<ManifestEntry> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let none = BTreeMap::new();
    let mut input_paths: [PathBuf; 3] = Default::default();
    for (k, img) in sample.inputs.iter().enumerate() {
        let name = PathBuf::from(format!("{}_t{k}.tif", sample.tile_id));
        write_geotiff(img, dir.join(&name), &none)?;
        input_paths[k] = name;
    }
    let chm_path = PathBuf::from(format!("{}_chm.tif", sample.tile_id));
    let meta = BTreeMap::from([
        (
            metadata_keys::ACQUISITION_YEAR_MEAN.to_string(),
            format!("{:?}", sample.mean_year),
        ),
        (
            metadata_keys::SOURCE_TILE_COUNT.to_string(),
            sample.source_count.to_string(),
        ),
    ]);
    write_geotiff(&sample.chm, dir.join(&chm_path), &meta)?;
    Ok(ManifestEntry {
        tile_id: sample.tile_id.clone(),
        input_paths,
        chm_path,
        delta_t: sample.delta_t,
        valid_fraction: sample.valid_fraction,
        department: sample.department.clone(),
        mean_year: sample.mean_year,
    })
}

/// Writes entries as JSON lines sorted by tile id.
pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut sorted: Vec<&ManifestEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.tile_id.cmp(&b.tile_id));
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for e in sorted {
        let line = serde_json::to_string(e).expect("manifest entries serialize");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line)
            .map_err(|e| Error::malformed(path, format!("line {}: {e}", i + 1)))?;
        entries.push(entry);
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{AffineTransform, DEFAULT_NODATA};
    use proptest::prelude::*;

    fn image(w: usize, h: usize, fill: u8, year: f64) -> MultiSpectralImage {
        let t = AffineTransform::north_up(0.0, h as f64 * 0.5, 0.5).unwrap();
        MultiSpectralImage::new(t, w, h, 2154, vec![vec![fill; w * h]; 5], year).unwrap()
    }

    fn chm(w: usize, h: usize, values: Vec<f32>, year: f64) -> Mosaic {
        let t = AffineTransform::north_up(0.0, h as f64 * 0.5, 0.5).unwrap();
        Mosaic {
            grid: Grid::new(t, w, h, values, DEFAULT_NODATA, 2154).unwrap(),
            mean_year: year,
            source_count: 1,
        }
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_timestamps(&[2018.0, 2015.0, 2012.0], 7, "33").unwrap(), [2, 1, 0]);
        assert!(matches!(
            select_timestamps(&[2018.0, 2015.0], 7, "33"),
            Err(Error::InsufficientTimestamps { found: 2 })
        ));
        let years = [2010.0, 2012.0, 2014.0, 2016.0, 2018.0];
        let a = select_timestamps(&years, 42, "33").unwrap();
        assert_eq!(a, select_timestamps(&years, 42, "33").unwrap());
    }

    #[test]
    fn selection_covers_all_subsets() {
        let years = [2010.0, 2012.0, 2014.0, 2016.0, 2018.0];
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..400 {
            seen.insert(select_timestamps(&years, seed, "40").unwrap());
        }
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn delta_t_examples() {
        assert_eq!(compute_delta_t(2021.0, [2015.0, 2018.0, 2020.0]).unwrap(), [6.0, 3.0, 1.0]);
        assert!(matches!(
            compute_delta_t(2021.0, [2015.0, 2018.0, 2021.0]),
            Err(Error::NonCausalTimestamp { .. })
        ));
    }

    #[test]
    fn mask_combines_chm_and_imagery() {
        let c = chm(2, 1, vec![1.0, DEFAULT_NODATA], 2020.0);
        let a = image(2, 1, 9, 2010.0);
        let mut empty = image(2, 1, 9, 2011.0);
        empty = MultiSpectralImage::new(empty.transform, 2, 1, 2154, vec![vec![0, 9]; 5], 2011.0).unwrap();
        assert_eq!(make_mask(&c.grid, [&a, &a, &a]).unwrap(), vec![true, false]);
        assert_eq!(make_mask(&c.grid, [&a, &empty, &a]).unwrap(), vec![false, false]);
        // A zero in only some bands is still imagery.
        let partial = MultiSpectralImage::new(a.transform, 2, 1, 2154, vec![vec![0, 0], vec![0, 0], vec![0, 0], vec![1, 1], vec![255, 255]], 2012.0).unwrap();
        assert_eq!(make_mask(&c.grid, [&partial, &a, &a]).unwrap(), vec![true, false]);
        // Stacked zero imagery carries NDVI 128 and is still empty.
        let zero = MultiSpectralImage::new(a.transform, 2, 1, 2154, vec![vec![0, 0], vec![0, 0], vec![0, 0], vec![0, 0], vec![128, 128]], 2012.0).unwrap();
        assert_eq!(make_mask(&c.grid, [&zero, &a, &a]).unwrap(), vec![false, false]);
    }

    #[test]
    fn tiling_drops_ragged_edges_and_thresholds() {
        // 5x4 raster, 2 px tiles: 2x2 candidates, column 4 discarded.
        let mut values = vec![1.0; 20];
        for v in values.iter_mut().take(10) {
            *v = DEFAULT_NODATA;
        }
        values[0] = 1.0;
        let c = chm(5, 4, values, 2021.0);
        let stacks = vec![image(5, 4, 9, 2012.0), image(5, 4, 9, 2015.0), image(5, 4, 9, 2018.0)];
        let params = TileParams {
            tile_px: 2,
            min_valid_fraction: 0.5,
            seed: 1,
        };
        let (samples, stats) = tile_and_filter(&stacks, &c, "33", &params).unwrap();
        assert_eq!(stats, TilingStats { candidates: 4, kept: 2, rejected: 2 });
        assert_eq!(samples.len(), 2);
        for s in &samples {
            assert_eq!(s.valid_fraction, 1.0);
            assert_eq!(s.delta_t, [9.0, 6.0, 3.0]);
            assert_eq!(s.chm.width, 2);
            assert!(s.tile_id.starts_with("33_"));
        }
        assert_ne!(samples[0].tile_id, samples[1].tile_id);
    }

    #[test]
    fn tiling_ignores_future_stacks() {
        let c = chm(2, 2, vec![1.0; 4], 2016.0);
        let stacks = vec![image(2, 2, 9, 2012.0), image(2, 2, 9, 2015.0), image(2, 2, 9, 2018.0)];
        let params = TileParams { tile_px: 2, ..TileParams::default() };
        assert!(matches!(
            tile_and_filter(&stacks, &c, "33", &params),
            Err(Error::InsufficientTimestamps { found: 2 })
        ));
    }

    #[test]
    fn tile_id_uses_global_lattice() {
        let t = AffineTransform::north_up(1000.0, 2000.0, 0.5).unwrap();
        let g = Grid::new(t, 4, 4, vec![0.0; 16], DEFAULT_NODATA, 2154).unwrap();
        assert_eq!(tile_id("33", &g, 0, 0), "33_2000_4000");
        assert_eq!(tile_id("33", &g, 2, 2), "33_2002_3998");
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = chm(2, 2, vec![1.0, 2.0, 3.0, 4.0], 2021.0);
        let stacks = vec![image(2, 2, 9, 2012.0), image(2, 2, 9, 2015.0), image(2, 2, 9, 2018.0)];
        let params = TileParams { tile_px: 2, ..TileParams::default() };
        let (samples, _) = tile_and_filter(&stacks, &c, "33", &params).unwrap();
        let entries: Vec<_> = samples.iter().map(|s| write_sample(s, dir.path()).unwrap()).collect();
        let path = dir.path().join("manifest.jsonl");
        write_manifest(&entries, &path).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, entries);
        for p in back[0].input_paths.iter().chain([&back[0].chm_path]) {
            assert!(dir.path().join(p).exists());
        }
    }

    proptest! {
        #[test]
        fn selection_is_a_reproducible_subset(
            years in proptest::collection::vec(2000.0f64..2030.0, 3..12),
            seed in any::<u64>(),
        ) {
            let a = select_timestamps(&years, seed, "d").unwrap();
            prop_assert_eq!(a, select_timestamps(&years, seed, "d").unwrap());
            prop_assert!(a[0] != a[1] && a[1] != a[2] && a[0] != a[2]);
            prop_assert!(a.iter().all(|&i| i < years.len()));
            prop_assert!(years[a[0]] <= years[a[1]] && years[a[1]] <= years[a[2]]);
        }

        #[test]
        fn kept_tiles_meet_threshold(
            valid in proptest::collection::vec(any::<bool>(), 64),
            threshold in 0.0f64..1.0,
        ) {
            let values = valid.iter().map(|&v| if v { 1.0 } else { DEFAULT_NODATA }).collect();
            let c = chm(8, 8, values, 2021.0);
            let stacks = vec![image(8, 8, 9, 2012.0), image(8, 8, 9, 2015.0), image(8, 8, 9, 2018.0)];
            let params = TileParams { tile_px: 4, min_valid_fraction: threshold, seed: 0 };
            let (samples, stats) = tile_and_filter(&stacks, &c, "33", &params).unwrap();
            prop_assert_eq!(stats.candidates, 4);
            prop_assert_eq!(stats.kept + stats.rejected, 4);
            for s in samples {
                let m = s.mask.iter().filter(|&&v| v).count() as f64 / 16.0;
                prop_assert_eq!(m, s.valid_fraction);
                prop_assert!(s.valid_fraction >= threshold);
            }
        }
    }
}
