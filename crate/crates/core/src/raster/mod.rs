//! Georeferenced raster model shared by every pipeline stage.
//!
//! Rasters are north-up, axis-aligned and row-major. Float grids carry a
//! finite nodata sentinel; any non-finite value handed to a constructor is
//! folded into that sentinel so downstream code only has one notion of
//! "invalid".

mod geotiff;

pub use geotiff::{read_geotiff, write_geotiff, GeoTiff, Raster, RasterRef};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nodata sentinel used on disk for DTM/DSM/CHM products.
pub const DEFAULT_NODATA: f32 = -9999.0;

/// Lambert-93.
pub const DEFAULT_CRS: u32 = 2154;

pub const BAND_COUNT: usize = 5;

pub mod metadata_keys {
    pub const ACQUISITION_YEAR: &str = "ACQUISITION_YEAR";
    pub const ACQUISITION_YEAR_MEAN: &str = "ACQUISITION_YEAR_MEAN";
    pub const SOURCE_TILE_COUNT: &str = "SOURCE_TILE_COUNT";
}

/// Axis-aligned pixel-to-world mapping. `origin_*` is the outer corner of
/// pixel (0, 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_size_x: f64,
    pub pixel_size_y: f64,
}

impl AffineTransform {
    pub fn new(origin_x: f64, origin_y: f64, pixel_size_x: f64, pixel_size_y: f64) -> Result<Self> {
        if !(pixel_size_x > 0.0 && pixel_size_x.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "pixel_size_x must be positive, got {pixel_size_x}"
            )));
        }
        if pixel_size_y == 0.0 || !pixel_size_y.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "pixel_size_y must be non-zero, got {pixel_size_y}"
            )));
        }
        if !origin_x.is_finite() || !origin_y.is_finite() {
            return Err(Error::InvalidArgument("non-finite origin".into()));
        }
        Ok(Self {
            origin_x,
            origin_y,
            pixel_size_x,
            pixel_size_y,
        })
    }

    /// North-up transform with square cells whose upper-left corner is
    /// `(min_x, max_y)`.
    pub fn north_up(min_x: f64, max_y: f64, cell_size: f64) -> Result<Self> {
        Self::new(min_x, max_y, cell_size, -cell_size)
    }

    /// Pixel indices containing `(x, y)`. Indices may be out of range.
    pub fn world_to_pixel(&self, x: f64, y: f64) -> (i64, i64) {
        let col = ((x - self.origin_x) / self.pixel_size_x).floor() as i64;
        let row = ((y - self.origin_y) / self.pixel_size_y).floor() as i64;
        (col, row)
    }

    /// Outer corner of pixel `(col, row)`.
    pub fn pixel_to_world(&self, col: f64, row: f64) -> (f64, f64) {
        (
            self.origin_x + col * self.pixel_size_x,
            self.origin_y + row * self.pixel_size_y,
        )
    }

    pub fn pixel_center(&self, col: usize, row: usize) -> (f64, f64) {
        self.pixel_to_world(col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Footprint of a `width × height` raster.
    pub fn bbox(&self, width: usize, height: usize) -> BBox {
        let (x0, y0) = self.pixel_to_world(0.0, 0.0);
        let (x1, y1) = self.pixel_to_world(width as f64, height as f64);
        BBox {
            min_x: x0.min(x1),
            min_y: y0.min(y1),
            max_x: x0.max(x1),
            max_y: y0.max(y1),
        }
    }

    pub fn cell_width(&self) -> f64 {
        self.pixel_size_x
    }

    pub fn cell_height(&self) -> f64 {
        self.pixel_size_y.abs()
    }

    /// True when both transforms describe the same lattice within
    /// `tolerance` (in meters) on the origin and pixel sizes.
    pub fn approx_eq(&self, other: &Self, tolerance: f64) -> bool {
        (self.origin_x - other.origin_x).abs() <= tolerance
            && (self.origin_y - other.origin_y).abs() <= tolerance
            && (self.pixel_size_x - other.pixel_size_x).abs() <= 1e-9
            && (self.pixel_size_y - other.pixel_size_y).abs() <= 1e-9
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BBox {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Result<Self> {
        let finite = [min_x, min_y, max_x, max_y].iter().all(|v| v.is_finite());
        if !finite || min_x >= max_x || min_y >= max_y {
            return Err(Error::InvalidArgument(format!(
                "invalid bbox ({min_x}, {min_y}, {max_x}, {max_y})"
            )));
        }
        Ok(Self {
            min_x,
            min_y,
            max_x,
            max_y,
        })
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn contains(&self, inner: &BBox) -> bool {
        bbox_contains(self, inner)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.min_x && x <= self.max_x && y >= self.min_y && y <= self.max_y
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let min_x = self.min_x.max(other.min_x);
        let min_y = self.min_y.max(other.min_y);
        let max_x = self.max_x.min(other.max_x);
        let max_y = self.max_y.min(other.max_y);
        (min_x < max_x && min_y < max_y).then_some(BBox {
            min_x,
            min_y,
            max_x,
            max_y,
        })
    }

    /// Grows the box outward so every edge sits on a multiple of `cell`.
    pub fn snap_outward(&self, cell: f64) -> BBox {
        BBox {
            min_x: (self.min_x / cell).floor() * cell,
            min_y: (self.min_y / cell).floor() * cell,
            max_x: (self.max_x / cell).ceil() * cell,
            max_y: (self.max_y / cell).ceil() * cell,
        }
    }
}

/// Closed containment: `inner ⊆ outer` on all four edges.
pub fn bbox_contains(outer: &BBox, inner: &BBox) -> bool {
    inner.min_x >= outer.min_x
        && inner.min_y >= outer.min_y
        && inner.max_x <= outer.max_x
        && inner.max_y <= outer.max_y
}

/// Lattice description without pixel data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub transform: AffineTransform,
    pub width: usize,
    pub height: usize,
}

impl GridSpec {
    pub fn new(transform: AffineTransform, width: usize, height: usize) -> Self {
        Self {
            transform,
            width,
            height,
        }
    }

    /// North-up lattice covering `bbox` with `ceil(extent / cell)` cells per axis.
    pub fn covering(bbox: &BBox, cell_size: f64) -> Result<Self> {
        if bbox.width() <= 0.0 || bbox.height() <= 0.0 {
            return Err(Error::EmptyExtent);
        }
        let transform = AffineTransform::north_up(bbox.min_x, bbox.max_y, cell_size)?;
        let width = cells_for(bbox.width(), cell_size);
        let height = cells_for(bbox.height(), cell_size);
        Ok(Self::new(transform, width, height))
    }

    pub fn bbox(&self) -> BBox {
        self.transform.bbox(self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `ceil(extent / cell)`, tolerant of floating noise that would otherwise add
/// a sliver column.
pub(crate) fn cells_for(extent: f64, cell: f64) -> usize {
    let ratio = extent / cell;
    let rounded = ratio.round();
    if (ratio - rounded).abs() < 1e-9 {
        rounded.max(1.0) as usize
    } else {
        ratio.ceil().max(1.0) as usize
    }
}

/// Single-band float raster (DTM, DSM, CHM).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub transform: AffineTransform,
    pub width: usize,
    pub height: usize,
    values: Vec<f32>,
    pub nodata: f32,
    pub crs_code: u32,
}

impl Grid {
    /// Takes ownership of row-major `values`. Non-finite cells become `nodata`.
    pub fn new(
        transform: AffineTransform,
        width: usize,
        height: usize,
        mut values: Vec<f32>,
        nodata: f32,
        crs_code: u32,
    ) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height} grid",
                values.len()
            )));
        }
        let nodata = if nodata.is_finite() { nodata } else { DEFAULT_NODATA };
        for v in &mut values {
            if !v.is_finite() {
                *v = nodata;
            }
        }
        Ok(Self {
            transform,
            width,
            height,
            values,
            nodata,
            crs_code,
        })
    }

    pub fn filled(spec: GridSpec, value: f32, nodata: f32, crs_code: u32) -> Result<Self> {
        Self::new(
            spec.transform,
            spec.width,
            spec.height,
            vec![value; spec.len()],
            nodata,
            crs_code,
        )
    }

    pub fn nodata_like(spec: GridSpec, crs_code: u32) -> Self {
        Self {
            transform: spec.transform,
            width: spec.width,
            height: spec.height,
            values: vec![DEFAULT_NODATA; spec.len()],
            nodata: DEFAULT_NODATA,
            crs_code,
        }
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec::new(self.transform, self.width, self.height)
    }

    pub fn bbox(&self) -> BBox {
        self.spec().bbox()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn is_valid_value(&self, v: f32) -> bool {
        v != self.nodata
    }

    #[inline]
    pub fn is_valid_index(&self, idx: usize) -> bool {
        self.is_valid_value(self.values[idx])
    }

    /// Value at `(col, row)` or `None` when out of range or nodata.
    pub fn get(&self, col: usize, row: usize) -> Option<f32> {
        if col >= self.width || row >= self.height {
            return None;
        }
        let v = self.values[row * self.width + col];
        self.is_valid_value(v).then_some(v)
    }

    /// Stores `value`; non-finite values mark the cell invalid.
    pub fn set(&mut self, col: usize, row: usize, value: f32) {
        let idx = row * self.width + col;
        self.values[idx] = if value.is_finite() { value } else { self.nodata };
    }

    pub fn set_invalid(&mut self, col: usize, row: usize) {
        let idx = row * self.width + col;
        self.values[idx] = self.nodata;
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&v| self.is_valid_value(v)).count()
    }

    pub fn validity_mask(&self) -> Vec<bool> {
        self.values.iter().map(|&v| self.is_valid_value(v)).collect()
    }
}

/// Unsigned 8-bit raster with an arbitrary number of bands (RGB, NIR-R-G).
#[derive(Debug, Clone, PartialEq)]
pub struct ByteRaster {
    pub transform: AffineTransform,
    pub width: usize,
    pub height: usize,
    pub crs_code: u32,
    pub bands: Vec<Vec<u8>>,
}

impl ByteRaster {
    pub fn new(
        transform: AffineTransform,
        width: usize,
        height: usize,
        crs_code: u32,
        bands: Vec<Vec<u8>>,
    ) -> Result<Self> {
        if bands.is_empty() {
            return Err(Error::ShapeMismatch("raster without bands".into()));
        }
        if let Some(bad) = bands.iter().find(|b| b.len() != width * height) {
            return Err(Error::ShapeMismatch(format!(
                "band of {} values for a {width}x{height} raster",
                bad.len()
            )));
        }
        Ok(Self {
            transform,
            width,
            height,
            crs_code,
            bands,
        })
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec::new(self.transform, self.width, self.height)
    }
}

/// Five-band uint8 stack ordered `[R, G, B, NIR, NDVI]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiSpectralImage {
    pub transform: AffineTransform,
    pub width: usize,
    pub height: usize,
    pub crs_code: u32,
    bands: [Vec<u8>; BAND_COUNT],
    pub acquisition_year: f64,
}

impl MultiSpectralImage {
    pub const RED: usize = 0;
    pub const GREEN: usize = 1;
    pub const BLUE: usize = 2;
    pub const NIR: usize = 3;
    pub const NDVI: usize = 4;

    pub fn new(
        transform: AffineTransform,
        width: usize,
        height: usize,
        crs_code: u32,
        bands: Vec<Vec<u8>>,
        acquisition_year: f64,
    ) -> Result<Self> {
        let bands: [Vec<u8>; BAND_COUNT] = bands.try_into().map_err(|b: Vec<Vec<u8>>| {
            Error::ShapeMismatch(format!("expected {BAND_COUNT} bands, got {}", b.len()))
        })?;
        if bands.iter().any(|b| b.len() != width * height) {
            return Err(Error::ShapeMismatch(format!(
                "all bands must hold {width}x{height} values"
            )));
        }
        Ok(Self {
            transform,
            width,
            height,
            crs_code,
            bands,
            acquisition_year,
        })
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec::new(self.transform, self.width, self.height)
    }

    pub fn bbox(&self) -> BBox {
        self.spec().bbox()
    }

    pub fn band(&self, index: usize) -> &[u8] {
        &self.bands[index]
    }

    pub fn bands(&self) -> &[Vec<u8>; BAND_COUNT] {
        &self.bands
    }

    /// True when R, G, B and NIR are all zero at `idx`. NDVI is ignored: a
    /// zero pixel encodes to 128 there, so it can never be zero itself.
    pub fn is_empty_pixel(&self, idx: usize) -> bool {
        self.bands[..Self::NDVI].iter().all(|b| b[idx] == 0)
    }

    /// Copies the `width × height` window whose upper-left pixel is `(col, row)`.
    pub fn window(&self, col: usize, row: usize, width: usize, height: usize) -> Result<Self> {
        if col + width > self.width || row + height > self.height {
            return Err(Error::ShapeMismatch("window exceeds image".into()));
        }
        let bands = self
            .bands
            .iter()
            .map(|band| {
                let mut out = Vec::with_capacity(width * height);
                for r in row..row + height {
                    let start = r * self.width + col;
                    out.extend_from_slice(&band[start..start + width]);
                }
                out
            })
            .collect();
        let (ox, oy) = self.transform.pixel_to_world(col as f64, row as f64);
        let transform = AffineTransform {
            origin_x: ox,
            origin_y: oy,
            ..self.transform
        };
        Self::new(transform, width, height, self.crs_code, bands, self.acquisition_year)
    }
}

impl Grid {
    /// Copies the `width × height` window whose upper-left pixel is `(col, row)`.
    pub fn window(&self, col: usize, row: usize, width: usize, height: usize) -> Result<Self> {
        if col + width > self.width || row + height > self.height {
            return Err(Error::ShapeMismatch("window exceeds grid".into()));
        }
        let mut out = Vec::with_capacity(width * height);
        for r in row..row + height {
            let start = r * self.width + col;
            out.extend_from_slice(&self.values[start..start + width]);
        }
        let (ox, oy) = self.transform.pixel_to_world(col as f64, row as f64);
        let transform = AffineTransform {
            origin_x: ox,
            origin_y: oy,
            ..self.transform
        };
        Grid::new(transform, width, height, out, self.nodata, self.crs_code)
    }
}
