//! Merging dated CHM tiles onto an optical tile's lattice.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::raster::{BBox, Grid, GridSpec, DEFAULT_NODATA};

const MIN_YEAR: f64 = 2000.0;
const MAX_YEAR: f64 = 2100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DatedGrid {
    /// Tie-breaker when two tiles share a year.
    pub id: String,
    pub grid: Grid,
    pub acquisition_year: f64,
}

impl DatedGrid {
    pub fn new(id: impl Into<String>, grid: Grid, acquisition_year: f64) -> Result<Self> {
        if !(MIN_YEAR..=MAX_YEAR).contains(&acquisition_year) {
            return Err(Error::InvalidArgument(format!(
                "acquisition year {acquisition_year} outside [{MIN_YEAR}, {MAX_YEAR}]"
            )));
        }
        Ok(Self {
            id: id.into(),
            grid,
            acquisition_year,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mosaic {
    pub grid: Grid,
    pub mean_year: f64,
    pub source_count: usize,
}

/// Plain mean of the input years, summed in ascending order so the result
/// does not depend on input order.
pub fn mean_year(years: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut years: Vec<f64> = years.into_iter().collect();
    if years.is_empty() {
        return None;
    }
    years.sort_by(f64::total_cmp);
    Some(years.iter().sum::<f64>() / years.len() as f64)
}

fn priority(a: &DatedGrid, b: &DatedGrid) -> Ordering {
    b.acquisition_year
        .total_cmp(&a.acquisition_year)
        .then_with(|| a.id.cmp(&b.id))
}

/// Resolves each target cell to the most recent tile holding a valid value at
/// the cell center. A newer tile's nodata never hides an older measurement.
pub fn merge(tiles: &[DatedGrid], target: GridSpec, crs_code: u32) -> Result<Mosaic> {
    if tiles.is_empty() {
        return Err(Error::EmptyInput);
    }
    let tw = target.transform.cell_width();
    let th = target.transform.cell_height();
    for t in tiles {
        let (cw, ch) = (t.grid.transform.cell_width(), t.grid.transform.cell_height());
        for (expected, found) in [(tw, cw), (th, ch)] {
            if (expected - found).abs() > 1e-9 * expected.max(1.0) {
                return Err(Error::CellSizeMismatch { expected, found });
            }
        }
    }

    let mut order: Vec<&DatedGrid> = tiles.iter().collect();
    order.sort_by(|a, b| priority(a, b));

    let mut values = vec![DEFAULT_NODATA; target.len()];
    let mut filled = vec![false; target.len()];
    let mut remaining = target.len();
    for tile in order {
        if remaining == 0 {
            break;
        }
        let g = &tile.grid;
        let Some(overlap) = g.bbox().intersection(&target.bbox()) else {
            continue;
        };
        // Target cells whose centers may fall inside this tile.
        let (c0, r0) = target
            .transform
            .world_to_pixel(overlap.min_x, overlap.max_y);
        let (c1, r1) = target
            .transform
            .world_to_pixel(overlap.max_x, overlap.min_y);
        let c0 = c0.max(0) as usize;
        let r0 = r0.max(0) as usize;
        let c1 = (c1.max(0) as usize).min(target.width - 1);
        let r1 = (r1.max(0) as usize).min(target.height - 1);
        for row in r0..=r1 {
            for col in c0..=c1 {
                let idx = row * target.width + col;
                if filled[idx] {
                    continue;
                }
                let (x, y) = target.transform.pixel_center(col, row);
                let (sc, sr) = g.transform.world_to_pixel(x, y);
                if sc < 0 || sr < 0 {
                    continue;
                }
                if let Some(v) = g.get(sc as usize, sr as usize) {
                    values[idx] = v;
                    filled[idx] = true;
                    remaining -= 1;
                }
            }
        }
    }

    let grid = Grid::new(
        target.transform,
        target.width,
        target.height,
        values,
        DEFAULT_NODATA,
        crs_code,
    )?;
    Ok(Mosaic {
        grid,
        mean_year: mean_year(tiles.iter().map(|t| t.acquisition_year)).expect("non-empty"),
        source_count: tiles.len(),
    })
}

/// Sub-grid covering `bbox`, snapped outward to the grid's lattice. Cells
/// outside the source are nodata.
pub fn crop_to(grid: &Grid, bbox: &BBox) -> Result<Grid> {
    if grid.bbox().intersection(bbox).is_none() {
        return Err(Error::DisjointExtent);
    }
    let t = &grid.transform;
    let eps = 1e-9;
    let fx0 = (bbox.min_x - t.origin_x) / t.pixel_size_x;
    let fx1 = (bbox.max_x - t.origin_x) / t.pixel_size_x;
    let fy0 = (bbox.max_y - t.origin_y) / t.pixel_size_y;
    let fy1 = (bbox.min_y - t.origin_y) / t.pixel_size_y;
    let (fy0, fy1) = if fy0 <= fy1 { (fy0, fy1) } else { (fy1, fy0) };
    let col0 = (fx0 + eps).floor() as i64;
    let col1 = (fx1 - eps).ceil() as i64;
    let row0 = (fy0 + eps).floor() as i64;
    let row1 = (fy1 - eps).ceil() as i64;
    let width = (col1 - col0).max(1) as usize;
    let height = (row1 - row0).max(1) as usize;

    let mut values = vec![grid.nodata; width * height];
    for r in 0..height {
        let sr = row0 + r as i64;
        if sr < 0 || sr >= grid.height as i64 {
            continue;
        }
        for c in 0..width {
            let sc = col0 + c as i64;
            if sc < 0 || sc >= grid.width as i64 {
                continue;
            }
            values[r * width + c] = grid.values()[sr as usize * grid.width + sc as usize];
        }
    }
    let (ox, oy) = t.pixel_to_world(col0 as f64, row0 as f64);
    let transform = crate::raster::AffineTransform {
        origin_x: ox,
        origin_y: oy,
        ..*t
    };
    Grid::new(transform, width, height, values, grid.nodata, grid.crs_code)
}
