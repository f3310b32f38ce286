//! Streaming access to classified LAS/LAZ/COPC point clouds.
//!
//! COPC files are valid LAZ 1.4 files, so they are read sequentially through
//! the same path; the octree hierarchy is not used.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read as _, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Datelike, TimeZone, Utc};
use las::GpsTimeType;

use crate::error::{Error, Result};
use crate::raster::BBox;

pub const GROUND_CLASS: u8 = 2;
pub const VEGETATION_CLASSES: [u8; 3] = [3, 4, 5];

/// Offset between adjusted standard GPS time and GPS seconds since the epoch.
const ADJUSTED_GPS_OFFSET: f64 = 1.0e9;

const READ_CHUNK: u64 = 65_536;

/// A chunk of points as parallel arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointBatch {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub zs: Vec<f64>,
    pub class_codes: Vec<u8>,
}

impl PointBatch {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>, zs: Vec<f64>, class_codes: Vec<u8>) -> Result<Self> {
        let n = xs.len();
        if ys.len() != n || zs.len() != n || class_codes.len() != n {
            return Err(Error::ShapeMismatch(
                "point batch arrays differ in length".into(),
            ));
        }
        Ok(Self {
            xs,
            ys,
            zs,
            class_codes,
        })
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            xs: Vec::with_capacity(n),
            ys: Vec::with_capacity(n),
            zs: Vec::with_capacity(n),
            class_codes: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, x: f64, y: f64, z: f64, class: u8) {
        self.xs.push(x);
        self.ys.push(y);
        self.zs.push(z);
        self.class_codes.push(class);
    }

    pub fn count(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn extend(&mut self, other: &PointBatch) {
        self.xs.extend_from_slice(&other.xs);
        self.ys.extend_from_slice(&other.ys);
        self.zs.extend_from_slice(&other.zs);
        self.class_codes.extend_from_slice(&other.class_codes);
    }
}

/// Which ASPRS class codes count as ground and as vegetation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassFilter {
    ground: BTreeSet<u8>,
    vegetation: BTreeSet<u8>,
}

impl Default for ClassFilter {
    fn default() -> Self {
        Self {
            ground: BTreeSet::from([GROUND_CLASS]),
            vegetation: BTreeSet::from(VEGETATION_CLASSES),
        }
    }
}

impl ClassFilter {
    pub fn new(
        ground: impl IntoIterator<Item = u8>,
        vegetation: impl IntoIterator<Item = u8>,
    ) -> Result<Self> {
        let ground: BTreeSet<u8> = ground.into_iter().collect();
        let vegetation: BTreeSet<u8> = vegetation.into_iter().collect();
        if let Some(shared) = ground.intersection(&vegetation).next() {
            return Err(Error::InvalidArgument(format!(
                "class {shared} is both ground and vegetation"
            )));
        }
        Ok(Self { ground, vegetation })
    }

    pub fn ground(&self) -> &BTreeSet<u8> {
        &self.ground
    }

    pub fn vegetation(&self) -> &BTreeSet<u8> {
        &self.vegetation
    }
}

/// Partitions a batch into ground and vegetation points. Points in neither
/// class set are dropped; an empty partition is returned as `None`.
pub fn split_by_class(
    batch: &PointBatch,
    filter: &ClassFilter,
) -> (Option<PointBatch>, Option<PointBatch>) {
    // Lookup table avoids two set probes per point.
    let mut lut = [0u8; 256];
    for &c in &filter.ground {
        lut[c as usize] = 1;
    }
    for &c in &filter.vegetation {
        lut[c as usize] = 2;
    }
    let mut ground = PointBatch::default();
    let mut vegetation = PointBatch::default();
    for i in 0..batch.count() {
        let target = match lut[batch.class_codes[i] as usize] {
            1 => &mut ground,
            2 => &mut vegetation,
            _ => continue,
        };
        target.push(batch.xs[i], batch.ys[i], batch.zs[i], batch.class_codes[i]);
    }
    (
        (!ground.is_empty()).then_some(ground),
        (!vegetation.is_empty()).then_some(vegetation),
    )
}

/// An opened point-cloud file, positioned at its first point.
pub struct CloudHandle {
    path: PathBuf,
    reader: las::Reader,
    /// Header bounds. May be degenerate for empty or single-point files.
    pub bbox: BBox,
    pub point_count: u64,
    /// Mean GPS time as a fractional calendar year, when the file carries
    /// adjusted standard GPS time.
    pub acquisition_year: Option<f64>,
}

impl std::fmt::Debug for CloudHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CloudHandle")
            .field("path", &self.path)
            .field("bbox", &self.bbox)
            .field("point_count", &self.point_count)
            .field("acquisition_year", &self.acquisition_year)
            .finish()
    }
}

fn las_err(path: &Path, err: las::Error) -> Error {
    match err {
        las::Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => Error::io(path, e),
        other => Error::malformed(path, other),
    }
}

fn open_reader(path: &Path) -> Result<las::Reader> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    las::Reader::new(BufReader::new(file)).map_err(|e| las_err(path, e))
}

/// Checks that the point data region declared by the raw header fits in the
/// file. Catches uncompressed files cut short; for LAZ the decompressor's
/// chunk table lookup covers the same case.
fn check_declared_size(path: &Path, header: &las::Header) -> Result<()> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.seek(SeekFrom::End(0)).map_err(|e| Error::io(path, e))?;
    file.seek(SeekFrom::Start(0)).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    file.take(375)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    let raw = las::raw::Header::read_from(std::io::Cursor::new(&buf)).map_err(|e| las_err(path, e))?;
    if !header.point_format().is_compressed {
        let needed = u64::from(raw.offset_to_point_data)
            + header.number_of_points() * u64::from(raw.point_data_record_length);
        if len < needed {
            return Err(Error::malformed(
                path,
                format!("file is {len} bytes but point data needs {needed}"),
            ));
        }
    } else if len <= u64::from(raw.offset_to_point_data) && header.number_of_points() > 0 {
        return Err(Error::malformed(path, "point data missing"));
    }
    Ok(())
}

/// Opens a LAS/LAZ/COPC file and reads its header. When points carry
/// standard GPS time, one pass over the file computes the mean acquisition
/// time.
pub fn open_cloud(path: impl AsRef<Path>) -> Result<CloudHandle> {
    let path = path.as_ref();
    let reader = open_reader(path)?;
    let header = reader.header().clone();
    let version = header.version();
    if version.major != 1 || !(2..=4).contains(&version.minor) {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            major: version.major,
            minor: version.minor,
        });
    }
    check_declared_size(path, &header)?;

    let bounds = header.bounds();
    let bbox = BBox {
        min_x: bounds.min.x,
        min_y: bounds.min.y,
        max_x: bounds.max.x,
        max_y: bounds.max.y,
    };
    let point_count = header.number_of_points();

    let acquisition_year = if header.point_format().has_gps_time
        && header.gps_time_type() == GpsTimeType::Standard
        && point_count > 0
    {
        let mut scan = open_reader(path)?;
        let mut sum = 0.0f64;
        let mut n = 0u64;
        let mut points = Vec::with_capacity(READ_CHUNK as usize);
        loop {
            points.clear();
            let got = scan
                .read_points_into(READ_CHUNK, &mut points)
                .map_err(|e| las_err(path, e))?;
            if got == 0 {
                break;
            }
            for p in &points {
                if let Some(t) = p.gps_time {
                    sum += t;
                    n += 1;
                }
            }
        }
        if n != point_count {
            return Err(Error::malformed(
                path,
                format!("header declares {point_count} points, read {n}"),
            ));
        }
        Some(adjusted_gps_to_year(sum / n as f64))
    } else {
        None
    };

    Ok(CloudHandle {
        path: path.to_path_buf(),
        reader,
        bbox,
        point_count,
        acquisition_year,
    })
}

/// Converts adjusted standard GPS time (GPS seconds − 10⁹) to a fractional
/// calendar year. Leap seconds are ignored.
pub fn adjusted_gps_to_year(adjusted: f64) -> f64 {
    let epoch = Utc.with_ymd_and_hms(1980, 1, 6, 0, 0, 0).unwrap();
    let secs = adjusted + ADJUSTED_GPS_OFFSET;
    let instant = epoch + chrono::Duration::milliseconds((secs * 1000.0).round() as i64);
    fractional_year(instant)
}

pub fn fractional_year(instant: DateTime<Utc>) -> f64 {
    let year = instant.year();
    let start = Utc.with_ymd_and_hms(year, 1, 1, 0, 0, 0).unwrap();
    let end = Utc.with_ymd_and_hms(year + 1, 1, 1, 0, 0, 0).unwrap();
    let elapsed = (instant - start).num_milliseconds() as f64;
    let total = (end - start).num_milliseconds() as f64;
    f64::from(year) + elapsed / total
}

/// Inverse of [`adjusted_gps_to_year`], used when writing synthetic clouds.
pub fn year_to_adjusted_gps(year: f64) -> f64 {
    let whole = year.floor() as i32;
    let start = Utc.with_ymd_and_hms(whole, 1, 1, 0, 0, 0).unwrap();
    let end = Utc.with_ymd_and_hms(whole + 1, 1, 1, 0, 0, 0).unwrap();
    let total = (end - start).num_milliseconds() as f64;
    let instant = start + chrono::Duration::milliseconds(((year - f64::from(whole)) * total) as i64);
    let epoch = Utc.with_ymd_and_hms(1980, 1, 6, 0, 0, 0).unwrap();
    (instant - epoch).num_milliseconds() as f64 / 1000.0 - ADJUSTED_GPS_OFFSET
}

impl CloudHandle {
    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Consumes the handle and yields batches of at most `batch_size` points
    /// in file order. A decoding error ends the sequence after being yielded.
    pub fn stream_batches(self, batch_size: usize) -> BatchStream {
        BatchStream {
            handle: self,
            batch_size: batch_size.max(1) as u64,
            read: 0,
            buffer: Vec::new(),
            failed: false,
        }
    }
}

pub struct BatchStream {
    handle: CloudHandle,
    batch_size: u64,
    read: u64,
    buffer: Vec<las::Point>,
    failed: bool,
}

impl Iterator for BatchStream {
    type Item = Result<PointBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.read >= self.handle.point_count {
            return None;
        }
        let want = self.batch_size.min(self.handle.point_count - self.read);
        self.buffer.clear();
        match self
            .handle
            .reader
            .read_points_into(want, &mut self.buffer)
        {
            Ok(got) if got == want => {}
            Ok(got) => {
                self.failed = true;
                return Some(Err(Error::malformed(
                    &self.handle.path,
                    format!(
                        "expected {} points, stream ended after {}",
                        self.handle.point_count,
                        self.read + got
                    ),
                )));
            }
            Err(e) => {
                self.failed = true;
                return Some(Err(las_err(&self.handle.path, e)));
            }
        }
        self.read += want;
        let mut batch = PointBatch::with_capacity(self.buffer.len());
        for p in &self.buffer {
            batch.push(p.x, p.y, p.z, u8::from(p.classification));
        }
        Some(Ok(batch))
    }
}

/// Options for [`write_cloud`].
#[derive(Debug, Clone)]
pub struct CloudWriteOptions {
    pub compressed: bool,
    /// Fractional year written as constant adjusted GPS time; `None` writes a
    /// point format without GPS time.
    pub acquisition_year: Option<f64>,
    pub scale: f64,
}

impl Default for CloudWriteOptions {
    fn default() -> Self {
        Self {
            compressed: true,
            acquisition_year: None,
            scale: 0.001,
        }
    }
}

/// Writes a LAS 1.4 file (LAZ when `compressed`) containing `points`.
pub fn write_cloud(
    path: impl AsRef<Path>,
    points: &PointBatch,
    options: &CloudWriteOptions,
) -> Result<()> {
    let path = path.as_ref();
    let mut builder = las::Builder::from((1, 4));
    let mut format = las::point::Format::new(if options.acquisition_year.is_some() { 1 } else { 0 })
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    format.is_compressed = options.compressed;
    builder.point_format = format;
    builder.generating_software = "canopy-forge".into();
    if options.acquisition_year.is_some() {
        builder.gps_time_type = GpsTimeType::Standard;
    }
    // Offsets near the data keep scaled coordinates inside i32 range.
    let offset = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        if lo.is_finite() {
            (lo / 1000.0).floor() * 1000.0
        } else {
            0.0
        }
    };
    let axis = |v: &[f64]| las::Transform {
        scale: options.scale,
        offset: offset(v),
    };
    builder.transforms = las::Vector {
        x: axis(&points.xs),
        y: axis(&points.ys),
        z: axis(&points.zs),
    };
    let header = builder
        .into_header()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let wrap = |e: las::Error| match e {
        las::Error::Io(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    };
    let mut writer = las::Writer::new(BufWriter::new(file), header).map_err(wrap)?;
    let gps = options.acquisition_year.map(year_to_adjusted_gps);
    for i in 0..points.count() {
        let point = las::Point {
            x: points.xs[i],
            y: points.ys[i],
            z: points.zs[i],
            classification: las::point::Classification::new(points.class_codes[i])
                .map_err(|e| Error::InvalidArgument(e.to_string()))?,
            gps_time: gps,
            ..Default::default()
        };
        writer.write_point(point).map_err(wrap)?;
    }
    writer.close().map_err(wrap)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid_points(n: usize) -> PointBatch {
        // 1000 points on a lattice spanning exactly (0,0)-(10,10).
        let mut b = PointBatch::with_capacity(n);
        let side = (n as f64).sqrt().ceil() as usize;
        for i in 0..n {
            let (c, r) = (i % side, i / side);
            let x = 10.0 * c as f64 / (side - 1) as f64;
            let y = 10.0 * r as f64 / (side - 1) as f64;
            b.push(x, y, 100.0 + (i % 7) as f64, [2, 3, 5, 6][i % 4]);
        }
        // Pin the extremes explicitly.
        b.xs[0] = 0.0;
        b.ys[0] = 0.0;
        b.xs[n - 1] = 10.0;
        b.ys[n - 1] = 10.0;
        b
    }

    #[test]
    fn open_reports_bbox_and_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.laz");
        write_cloud(&path, &grid_points(1000), &CloudWriteOptions::default()).unwrap();
        let h = open_cloud(&path).unwrap();
        assert_eq!(h.point_count, 1000);
        assert_eq!(h.bbox, BBox::new(0.0, 0.0, 10.0, 10.0).unwrap());
        assert_eq!(h.acquisition_year, None);
    }

    #[test]
    fn projected_coordinates_survive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l93.laz");
        let mut b = grid_points(100);
        for (x, y) in b.xs.iter_mut().zip(b.ys.iter_mut()) {
            *x += 652_000.0;
            *y += 6_862_000.0;
        }
        write_cloud(&path, &b, &CloudWriteOptions::default()).unwrap();
        let back: Vec<PointBatch> = open_cloud(&path).unwrap().stream_batches(1000).map(|r| r.unwrap()).collect();
        for (got, want) in back[0].xs.iter().chain(&back[0].ys).zip(b.xs.iter().chain(&b.ys)) {
            assert!((got - want).abs() <= 0.0005 + 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn gps_time_gives_year() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.laz");
        let opts = CloudWriteOptions {
            acquisition_year: Some(2021.5),
            ..Default::default()
        };
        write_cloud(&path, &grid_points(50), &opts).unwrap();
        let year = open_cloud(&path).unwrap().acquisition_year.unwrap();
        assert!((year - 2021.5).abs() < 1e-6, "{year}");
    }

    #[test]
    fn gps_year_conversion_round_trips() {
        for y in [2015.0, 2018.25, 2021.999, 2024.5] {
            let back = adjusted_gps_to_year(year_to_adjusted_gps(y));
            assert!((back - y).abs() < 1e-7, "{y} -> {back}");
        }
    }

    #[test]
    fn truncated_file_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        for (name, compressed) in [("t.laz", true), ("t.las", false)] {
            let path = dir.path().join(name);
            write_cloud(
                &path,
                &grid_points(1000),
                &CloudWriteOptions {
                    compressed,
                    ..Default::default()
                },
            )
            .unwrap();
            let bytes = std::fs::read(&path).unwrap();
            std::fs::write(&path, &bytes[..bytes.len() * 2 / 3]).unwrap();
            let opened = open_cloud(&path);
            let err = match opened {
                Err(e) => e,
                Ok(h) => h
                    .stream_batches(300)
                    .find_map(|b| b.err())
                    .expect("truncated stream must error"),
            };
            assert!(matches!(err, Error::MalformedFile { .. }), "{name}: {err:?}");
        }
    }

    #[test]
    fn garbage_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.laz");
        std::fs::write(&path, vec![7u8; 4096]).unwrap();
        assert!(matches!(open_cloud(&path), Err(Error::MalformedFile { .. })));
    }

    #[test]
    fn batches_follow_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.laz");
        let pts = grid_points(1000);
        write_cloud(&path, &pts, &CloudWriteOptions::default()).unwrap();

        let sizes: Vec<usize> = open_cloud(&path)
            .unwrap()
            .stream_batches(300)
            .map(|b| b.unwrap().count())
            .collect();
        assert_eq!(sizes, vec![300, 300, 300, 100]);

        let single: Vec<_> = open_cloud(&path).unwrap().stream_batches(5000).collect();
        assert_eq!(single.len(), 1);

        let mut all = PointBatch::default();
        for b in open_cloud(&path).unwrap().stream_batches(77) {
            all.extend(&b.unwrap());
        }
        assert_eq!(all.class_codes, pts.class_codes);
        for i in 0..pts.count() {
            assert!((all.xs[i] - pts.xs[i]).abs() < 1e-3);
            assert!((all.zs[i] - pts.zs[i]).abs() < 1e-3);
        }
    }

    #[test]
    fn empty_file_streams_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.laz");
        write_cloud(&path, &PointBatch::default(), &CloudWriteOptions::default()).unwrap();
        let h = open_cloud(&path).unwrap();
        assert_eq!(h.point_count, 0);
        assert_eq!(h.stream_batches(10).count(), 0);
    }

    fn batch_of(classes: &[u8]) -> PointBatch {
        let mut b = PointBatch::default();
        for (i, &c) in classes.iter().enumerate() {
            b.push(i as f64, 0.0, 0.0, c);
        }
        b
    }

    #[test]
    fn split_examples() {
        let f = ClassFilter::default();
        let (g, v) = split_by_class(&batch_of(&[2, 3, 5, 6]), &f);
        assert_eq!(g.unwrap().class_codes, vec![2]);
        assert_eq!(v.unwrap().class_codes, vec![3, 5]);

        let (g, v) = split_by_class(&batch_of(&[2, 2, 2]), &f);
        assert_eq!(g.unwrap().count(), 3);
        assert!(v.is_none());

        let (g, v) = split_by_class(&batch_of(&[9, 9]), &f);
        assert!(g.is_none() && v.is_none());
    }

    #[test]
    fn overlapping_filter_rejected() {
        assert!(ClassFilter::new([2, 3], [3, 4]).is_err());
    }

    proptest! {
        #[test]
        fn split_partitions_input(classes in proptest::collection::vec(0u8..20, 0..200)) {
            let batch = batch_of(&classes);
            let f = ClassFilter::default();
            let (g, v) = split_by_class(&batch, &f);
            let g = g.unwrap_or_default();
            let v = v.unwrap_or_default();
            let dropped = classes.iter().filter(|c| !f.ground().contains(c) && !f.vegetation().contains(c)).count();
            prop_assert_eq!(g.count() + v.count() + dropped, classes.len());
            prop_assert!(g.class_codes.iter().all(|c| f.ground().contains(c)));
            prop_assert!(v.class_codes.iter().all(|c| f.vegetation().contains(c)));
            // Order within each partition follows input order (x encodes index).
            prop_assert!(g.xs.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(v.xs.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
