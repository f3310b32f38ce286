//! DTM/DSM rasterization, square-window DTM smoothing and CHM derivation.

use std::borrow::Borrow;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{open_cloud, split_by_class, ClassFilter, PointBatch};
use crate::raster::{BBox, Grid, GridSpec, DEFAULT_CRS, DEFAULT_NODATA};

const STREAM_BATCH: usize = 1 << 16;

/// Per-cell reduction applied to point elevations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Mean,
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterizerConfig {
    pub cell_size: f64,
    pub dtm_statistic: Statistic,
    pub dsm_statistic: Statistic,
    pub smoothing_window: f64,
    pub crs_code: u32,
    pub classes: ClassFilterConfig,
}

/// Serializable form of [`ClassFilter`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassFilterConfig {
    pub ground: Vec<u8>,
    pub vegetation: Vec<u8>,
}

impl Default for ClassFilterConfig {
    fn default() -> Self {
        let f = ClassFilter::default();
        Self {
            ground: f.ground().iter().copied().collect(),
            vegetation: f.vegetation().iter().copied().collect(),
        }
    }
}

impl ClassFilterConfig {
    pub fn to_filter(&self) -> Result<ClassFilter> {
        ClassFilter::new(self.ground.iter().copied(), self.vegetation.iter().copied())
    }
}

impl Default for RasterizerConfig {
    fn default() -> Self {
        Self {
            cell_size: 0.5,
            dtm_statistic: Statistic::Mean,
            dsm_statistic: Statistic::Max,
            smoothing_window: 10.0,
            crs_code: DEFAULT_CRS,
            classes: ClassFilterConfig::default(),
        }
    }
}

impl RasterizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(Error::InvalidArgument("cell_size must be positive".into()));
        }
        if !(self.smoothing_window >= self.cell_size) {
            return Err(Error::InvalidArgument(
                "smoothing_window must be at least cell_size".into(),
            ));
        }
        if self.dtm_statistic == Statistic::Max {
            return Err(Error::InvalidArgument(
                "dtm_statistic must be mean or min".into(),
            ));
        }
        self.classes.to_filter()?;
        Ok(())
    }
}

/// Streaming per-cell accumulator. Sum/count merging and min/max are order
/// independent, so partial accumulators can be merged in any order.
#[derive(Debug, Clone)]
pub struct CellAccumulator {
    spec: GridSpec,
    statistic: Statistic,
    sums: Vec<f64>,
    counts: Vec<u32>,
}

impl CellAccumulator {
    pub fn new(spec: GridSpec, statistic: Statistic) -> Self {
        let init = match statistic {
            Statistic::Mean => 0.0,
            Statistic::Min => f64::INFINITY,
            Statistic::Max => f64::NEG_INFINITY,
        };
        Self {
            spec,
            statistic,
            sums: vec![init; spec.len()],
            counts: vec![0; spec.len()],
        }
    }

    /// Cell index for a point, or `None` when it lies outside the raster.
    /// Floor rule inside; points exactly on the far (east/south) border are
    /// kept in the last column/row.
    #[inline]
    fn cell_of(&self, x: f64, y: f64) -> Option<usize> {
        let t = &self.spec.transform;
        let fc = (x - t.origin_x) / t.pixel_size_x;
        let fr = (y - t.origin_y) / t.pixel_size_y;
        let (w, h) = (self.spec.width as f64, self.spec.height as f64);
        if !(fc >= 0.0 && fc <= w && fr >= 0.0 && fr <= h) {
            return None;
        }
        let col = (fc.floor() as usize).min(self.spec.width - 1);
        let row = (fr.floor() as usize).min(self.spec.height - 1);
        Some(row * self.spec.width + col)
    }

    pub fn add_batch(&mut self, batch: &PointBatch) {
        for i in 0..batch.count() {
            let Some(idx) = self.cell_of(batch.xs[i], batch.ys[i]) else {
                continue;
            };
            let z = batch.zs[i];
            let acc = &mut self.sums[idx];
            match self.statistic {
                Statistic::Mean => *acc += z,
                Statistic::Min => *acc = acc.min(z),
                Statistic::Max => *acc = acc.max(z),
            }
            self.counts[idx] += 1;
        }
    }

    pub fn merge(&mut self, other: &CellAccumulator) -> Result<()> {
        if other.spec != self.spec || other.statistic != self.statistic {
            return Err(Error::GridMismatch("accumulators differ".into()));
        }
        for i in 0..self.sums.len() {
            self.sums[i] = match self.statistic {
                Statistic::Mean => self.sums[i] + other.sums[i],
                Statistic::Min => self.sums[i].min(other.sums[i]),
                Statistic::Max => self.sums[i].max(other.sums[i]),
            };
            self.counts[i] += other.counts[i];
        }
        Ok(())
    }

    pub fn finish(self, crs_code: u32) -> Grid {
        let values = self
            .sums
            .iter()
            .zip(&self.counts)
            .map(|(&s, &n)| match (n, self.statistic) {
                (0, _) => DEFAULT_NODATA,
                (n, Statistic::Mean) => (s / f64::from(n)) as f32,
                (_, _) => s as f32,
            })
            .collect();
        Grid::new(
            self.spec.transform,
            self.spec.width,
            self.spec.height,
            values,
            DEFAULT_NODATA,
            crs_code,
        )
        .expect("accumulator shape matches spec")
    }
}

/// Rasterizes point elevations over `bbox` with `ceil(extent / cell)` cells
/// per axis. Cells without points are nodata.
pub fn rasterize<I, B>(
    points: I,
    bbox: &BBox,
    cfg: &RasterizerConfig,
    statistic: Statistic,
) -> Result<Grid>
where
    I: IntoIterator<Item = B>,
    B: Borrow<PointBatch>,
{
    let spec = GridSpec::covering(bbox, cfg.cell_size)?;
    let mut acc = CellAccumulator::new(spec, statistic);
    for batch in points {
        acc.add_batch(batch.borrow());
    }
    Ok(acc.finish(cfg.crs_code))
}

/// Mean of the valid cells in a centered square window of side `window`
/// meters (radius `floor(window / (2 · cell))` cells). Applied to every cell,
/// so valid cells are smoothed and gaps with a valid neighbour are filled.
///
/// Runs in O(width · height) using summed-area tables of value and count.
pub fn smooth_square(grid: &Grid, window: f64) -> Result<Grid> {
    let cw = grid.transform.cell_width();
    let ch = grid.transform.cell_height();
    if !(window >= cw.max(ch) - 1e-12) {
        return Err(Error::InvalidArgument(format!(
            "window {window} m is smaller than the cell size"
        )));
    }
    let rx = (window / (2.0 * cw) + 1e-9).floor() as usize;
    let ry = (window / (2.0 * ch) + 1e-9).floor() as usize;
    let (w, h) = (grid.width, grid.height);
    let values = grid.values();

    // Center on an arbitrary valid sample to keep table magnitudes small, and
    // clamp output to the input range to absorb cancellation error.
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in values.iter().filter(|&&v| grid.is_valid_value(v)) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return Ok(grid.clone());
    }
    let offset = f64::from(lo);

    let stride = w + 1;
    let mut sum = vec![0.0f64; stride * (h + 1)];
    let mut cnt = vec![0u32; stride * (h + 1)];
    for r in 0..h {
        let mut row_sum = 0.0f64;
        let mut row_cnt = 0u32;
        for c in 0..w {
            let v = values[r * w + c];
            if grid.is_valid_value(v) {
                row_sum += f64::from(v) - offset;
                row_cnt += 1;
            }
            let i = (r + 1) * stride + c + 1;
            sum[i] = sum[i - stride] + row_sum;
            cnt[i] = cnt[i - stride] + row_cnt;
        }
    }

    let mut out = vec![grid.nodata; w * h];
    for r in 0..h {
        let r0 = r.saturating_sub(ry);
        let r1 = (r + ry + 1).min(h);
        for c in 0..w {
            let c0 = c.saturating_sub(rx);
            let c1 = (c + rx + 1).min(w);
            let (a, b, d, e) = (
                r1 * stride + c1,
                r0 * stride + c1,
                r1 * stride + c0,
                r0 * stride + c0,
            );
            let n = cnt[a] + cnt[e] - cnt[b] - cnt[d];
            if n > 0 {
                let s = sum[a] - sum[b] - sum[d] + sum[e];
                let mean = (s / f64::from(n) + offset) as f32;
                out[r * w + c] = mean.clamp(lo, hi);
            }
        }
    }
    Grid::new(grid.transform, w, h, out, grid.nodata, grid.crs_code)
}

/// `max(0, dsm − dtm)` where both are valid, nodata elsewhere.
pub fn derive_chm(dsm: &Grid, dtm_smoothed: &Grid) -> Result<Grid> {
    if dsm.width != dtm_smoothed.width || dsm.height != dtm_smoothed.height {
        return Err(Error::GridMismatch(format!(
            "dsm is {}x{}, dtm is {}x{}",
            dsm.width, dsm.height, dtm_smoothed.width, dtm_smoothed.height
        )));
    }
    if !dsm.transform.approx_eq(&dtm_smoothed.transform, 1e-9) {
        return Err(Error::GridMismatch("transforms differ".into()));
    }
    let values = dsm
        .values()
        .iter()
        .zip(dtm_smoothed.values())
        .map(|(&s, &t)| {
            if dsm.is_valid_value(s) && dtm_smoothed.is_valid_value(t) {
                (s - t).max(0.0)
            } else {
                DEFAULT_NODATA
            }
        })
        .collect();
    Grid::new(
        dsm.transform,
        dsm.width,
        dsm.height,
        values,
        DEFAULT_NODATA,
        dsm.crs_code,
    )
}

/// Intermediate and final rasters for one point-cloud tile.
#[derive(Debug, Clone)]
pub struct ChmProduct {
    pub dtm: Grid,
    pub dtm_smoothed: Grid,
    pub dsm: Grid,
    pub chm: Grid,
    /// Override if supplied, else derived from GPS time when present.
    pub acquisition_year: Option<f64>,
}

/// Open → stream → split → rasterize DTM/DSM → smooth DTM → CHM.
///
/// The raster covers `extent` when given, otherwise the header bounds; in
/// both cases snapped outward to multiples of the cell size so tiles from
/// the same survey share one lattice.
pub fn process_cloud_tile(
    path: impl AsRef<Path>,
    cfg: &RasterizerConfig,
    extent: Option<BBox>,
    year_override: Option<f64>,
) -> Result<ChmProduct> {
    cfg.validate()?;
    let path = path.as_ref();
    let filter = cfg.classes.to_filter()?;
    let handle = open_cloud(path)?;
    let raw = extent.unwrap_or(handle.bbox);
    let mut bbox = raw.snap_outward(cfg.cell_size);
    if !(bbox.max_x > bbox.min_x) {
        bbox.max_x = bbox.min_x + cfg.cell_size;
    }
    if !(bbox.max_y > bbox.min_y) {
        bbox.max_y = bbox.min_y + cfg.cell_size;
    }
    if !bbox.min_x.is_finite() || !bbox.max_y.is_finite() {
        return Err(Error::NoGroundPoints(path.to_path_buf()));
    }
    let acquisition_year = year_override.or(handle.acquisition_year);
    let spec = GridSpec::covering(&bbox, cfg.cell_size)?;

    let mut ground_acc = CellAccumulator::new(spec, cfg.dtm_statistic);
    let mut veg_acc = CellAccumulator::new(spec, cfg.dsm_statistic);
    let mut ground_seen = false;
    for batch in handle.stream_batches(STREAM_BATCH) {
        let (ground, vegetation) = split_by_class(&batch?, &filter);
        if let Some(g) = ground {
            ground_seen = true;
            ground_acc.add_batch(&g);
        }
        if let Some(v) = vegetation {
            veg_acc.add_batch(&v);
        }
    }
    if !ground_seen {
        return Err(Error::NoGroundPoints(path.to_path_buf()));
    }

    let dtm = ground_acc.finish(cfg.crs_code);
    let dsm = veg_acc.finish(cfg.crs_code);
    let dtm_smoothed = smooth_square(&dtm, cfg.smoothing_window)?;
    let chm = derive_chm(&dsm, &dtm_smoothed)?;
    Ok(ChmProduct {
        dtm,
        dtm_smoothed,
        dsm,
        chm,
        acquisition_year,
    })
}
