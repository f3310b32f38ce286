//! Stage orchestration: index → fetch → chm → mosaic → harmonize → tile.
//!
//! Every stage reads the listing written by its predecessor under the work
//! directory and writes its own, then drops a marker carrying a fingerprint
//! of the inputs that shaped it. A rerun with the same fingerprint skips the
//! stage. Stages with tile-level failures write no marker, so a rerun
//! retries them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::{info, warn};

use crate::config::PipelineConfig;
use crate::elevation::process_cloud_tile;
use crate::error::{Error, Result};
use crate::harmonize::{resample_to, stack_bands, OpticalPair};
use crate::ingest::{build_index, fetch, match_tiles, Fetched, TileKind, TileRecord};
use crate::mosaic::{merge, DatedGrid, Mosaic};
use crate::raster::{metadata_keys, read_geotiff, write_geotiff, BBox, GridSpec};
use crate::sampler::{for_each_sample, write_manifest, write_sample, ManifestEntry, TilingStats, IMAGES_PER_SAMPLE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Index,
    Fetch,
    Chm,
    Mosaic,
    Harmonize,
    Tile,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Index,
        Stage::Fetch,
        Stage::Chm,
        Stage::Mosaic,
        Stage::Harmonize,
        Stage::Tile,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Index => "index",
            Stage::Fetch => "fetch",
            Stage::Chm => "chm",
            Stage::Mosaic => "mosaic",
            Stage::Harmonize => "harmonize",
            Stage::Tile => "tile",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage {s:?}")))
    }
}

/// File locations under the work directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn index(&self) -> PathBuf {
        self.root.join("index.jsonl")
    }
    pub fn raw(&self) -> PathBuf {
        self.root.join("raw")
    }
    fn listing(&self, stage: Stage) -> PathBuf {
        self.root.join("listings").join(format!("{stage}.jsonl"))
    }
    pub fn chm_dir(&self) -> PathBuf {
        self.root.join("chm")
    }
    pub fn mosaic_dir(&self) -> PathBuf {
        self.root.join("mosaic")
    }
    pub fn stack_dir(&self) -> PathBuf {
        self.root.join("stack")
    }
    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }
    pub fn manifest(&self) -> PathBuf {
        self.samples().join("manifest.jsonl")
    }
    pub fn marker(&self, stage: Stage) -> PathBuf {
        self.root.join("markers").join(format!("{stage}.json"))
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("listing serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::malformed(path, format!("line {}: {e}", i + 1)))?,
            );
        }
    }
    Ok(out)
}

/// A tile-level error, recorded without stopping the stage.
#[derive(Debug)]
pub struct TileFailure {
    pub tile: String,
    /// Always [`Error::StageFailure`].
    pub error: Error,
}

impl TileFailure {
    fn new(stage: Stage, tile: impl Into<String>, cause: Error) -> Self {
        Self {
            tile: tile.into(),
            error: Error::StageFailure {
                stage: stage.name().to_string(),
                source: Box::new(cause),
            },
        }
    }

    pub fn stage(&self) -> &str {
        match &self.error {
            Error::StageFailure { stage, .. } => stage,
            _ => "",
        }
    }

    pub fn cause(&self) -> &Error {
        match &self.error {
            Error::StageFailure { source, .. } => source,
            other => other,
        }
    }
}

impl Serialize for TileFailure {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("TileFailure", 4)?;
        st.serialize_field("stage", self.stage())?;
        st.serialize_field("tile", &self.tile)?;
        st.serialize_field("kind", self.cause().kind())?;
        st.serialize_field("message", &self.cause().to_string())?;
        st.end()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub inputs: usize,
    pub produced: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub skipped: bool,
    pub counts: StageCounts,
    pub failed: usize,
    pub wall_ms: u64,
}

#[derive(Debug, Default, Serialize)]
pub struct RunSummary {
    pub stages: Vec<StageReport>,
    pub failures: Vec<TileFailure>,
    pub tiling: Option<TilingStats>,
    pub samples: usize,
    pub images: usize,
    pub manifest: Option<PathBuf>,
}

impl RunSummary {
    pub fn stage(&self, stage: Stage) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    pub fn all_skipped(&self) -> bool {
        self.stages.iter().all(|s| s.skipped)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Marker {
    stage: Stage,
    fingerprint: String,
    counts: StageCounts,
    #[serde(default)]
    tiling: Option<TilingStats>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ChmEntry {
    id: String,
    department: String,
    bbox: BBox,
    year: f64,
    path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LocationEntry {
    key: String,
    department: String,
    bbox: BBox,
    path: PathBuf,
    mean_year: f64,
    source_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StackEntry {
    location: String,
    year: f64,
    path: PathBuf,
}

fn coord(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}").replace('.', "p")
    }
}

/// An optical footprint with its per-year RGB/NIRRG records.
#[derive(Debug, Clone)]
struct Location {
    key: String,
    department: String,
    bbox: BBox,
    rgb: BTreeMap<u64, TileRecord>,
    nirrg: BTreeMap<u64, TileRecord>,
}

fn locations(index: &[TileRecord]) -> Vec<Location> {
    let mut by_key: BTreeMap<String, Location> = BTreeMap::new();
    for r in index.iter().filter(|r| r.kind.is_optical()) {
        let key = format!("{}_{}_{}", r.department, coord(r.bbox.min_x), coord(r.bbox.max_y));
        let loc = by_key.entry(key.clone()).or_insert_with(|| Location {
            key,
            department: r.department.clone(),
            bbox: r.bbox,
            rgb: BTreeMap::new(),
            nirrg: BTreeMap::new(),
        });
        let slot = if r.kind == TileKind::Rgb { &mut loc.rgb } else { &mut loc.nirrg };
        slot.insert(r.acquisition_year.to_bits(), r.clone());
    }
    by_key.into_values().collect()
}

fn location_record(loc: &Location) -> TileRecord {
    TileRecord {
        id: loc.key.clone(),
        kind: TileKind::Rgb,
        bbox: loc.bbox,
        url_or_path: String::new(),
        acquisition_year: 2000.0,
        department: loc.department.clone(),
    }
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    layout: Layout,
    pool: rayon::ThreadPool,
}

struct Outcome {
    counts: StageCounts,
    failures: Vec<TileFailure>,
    tiling: Option<TilingStats>,
}

impl Outcome {
    fn new(inputs: usize, produced: usize, rejected: usize, failures: Vec<TileFailure>) -> Self {
        Self {
            counts: StageCounts {
                inputs,
                produced,
                rejected,
            },
            failures,
            tiling: None,
        }
    }
}

fn split_results<T>(results: Vec<std::result::Result<T, TileFailure>>) -> (Vec<T>, Vec<TileFailure>) {
    let mut ok = Vec::new();
    let mut bad = Vec::new();
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(f) => {
                warn!(stage = f.stage(), tile = %f.tile, kind = f.cause().kind(), error = %f.cause(), "tile failed");
                bad.push(f);
            }
        }
    }
    (ok, bad)
}

fn stage_index(ctx: &Ctx) -> Result<Outcome> {
    let all = build_index(&ctx.cfg.catalog)?;
    let wanted: BTreeSet<&String> = ctx.cfg.departments.iter().collect();
    let records: Vec<TileRecord> = all
        .iter()
        .filter(|r| wanted.is_empty() || wanted.contains(&r.department))
        .cloned()
        .collect();
    write_jsonl(&ctx.layout.index(), &records)?;
    info!(stage = "index", records = records.len(), "indexed catalog");
    Ok(Outcome::new(all.len(), records.len(), all.len() - records.len(), Vec::new()))
}

fn stage_fetch(ctx: &Ctx) -> Result<Outcome> {
    let index: Vec<TileRecord> = read_jsonl(&ctx.layout.index())?;
    let report = fetch(&index, ctx.layout.raw(), &ctx.cfg.fetch)?;
    write_jsonl(&ctx.layout.listing(Stage::Fetch), &report.fetched)?;
    let failures: Vec<TileFailure> = report
        .failures
        .into_iter()
        .map(|e| {
            let id = match &e {
                Error::FetchFailure { id, .. } => id.clone(),
                _ => String::new(),
            };
            TileFailure::new(Stage::Fetch, id, e)
        })
        .collect();
    for f in &failures {
        warn!(stage = "fetch", tile = %f.tile, error = %f.cause(), "fetch failed");
    }
    let produced = report.fetched.len();
    Ok(Outcome::new(index.len(), produced, 0, failures))
}

fn fetched_paths(ctx: &Ctx) -> Result<BTreeMap<(TileKind, String), PathBuf>> {
    let fetched: Vec<Fetched> = read_jsonl(&ctx.layout.listing(Stage::Fetch))?;
    Ok(fetched.into_iter().map(|f| ((f.kind, f.id), f.path)).collect())
}

fn stage_chm(ctx: &Ctx) -> Result<Outcome> {
    let index: Vec<TileRecord> = read_jsonl(&ctx.layout.index())?;
    let paths = fetched_paths(ctx)?;
    let locs: Vec<TileRecord> = locations(&index).iter().map(location_record).collect();
    let clouds: Vec<TileRecord> = index
        .iter()
        .filter(|r| r.kind == TileKind::PointCloud && paths.contains_key(&(r.kind, r.id.clone())))
        .cloned()
        .collect();
    // Only clouds that some optical footprint fully contains are worth rasterizing.
    let mut wanted: BTreeMap<String, TileRecord> = BTreeMap::new();
    for m in match_tiles(&locs, &clouds) {
        for c in m.pointcloud_tiles.into_iter().filter(|c| c.department == m.optical.department) {
            wanted.insert(c.id.clone(), c);
        }
    }
    let unmatched = clouds.len() - wanted.len();
    let raster_cfg = ctx.cfg.rasterizer();
    let dir = ctx.layout.chm_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let jobs: Vec<&TileRecord> = wanted.values().collect();
    let results: Vec<std::result::Result<ChmEntry, TileFailure>> = ctx.pool.install(|| {
        jobs.par_iter()
            .map(|rec| {
                let src = &paths[&(rec.kind, rec.id.clone())];
                let run = || -> Result<ChmEntry> {
                    let product = process_cloud_tile(src, &raster_cfg, Some(rec.bbox), Some(rec.acquisition_year))?;
                    let path = dir.join(format!("{}.tif", rec.id));
                    let meta = BTreeMap::from([(
                        metadata_keys::ACQUISITION_YEAR.to_string(),
                        format!("{:?}", rec.acquisition_year),
                    )]);
                    write_geotiff(&product.chm, &path, &meta)?;
                    info!(stage = "chm", tile = %rec.id, valid = product.chm.valid_count(), "chm written");
                    Ok(ChmEntry {
                        id: rec.id.clone(),
                        department: rec.department.clone(),
                        bbox: rec.bbox,
                        year: rec.acquisition_year,
                        path,
                    })
                };
                run().map_err(|e| TileFailure::new(Stage::Chm, rec.id.clone(), e))
            })
            .collect()
    });
    let (entries, failures) = split_results(results);
    write_jsonl(&ctx.layout.listing(Stage::Chm), &entries)?;
    Ok(Outcome::new(clouds.len(), entries.len(), unmatched, failures))
}

fn stage_mosaic(ctx: &Ctx) -> Result<Outcome> {
    let index: Vec<TileRecord> = read_jsonl(&ctx.layout.index())?;
    let chms: Vec<ChmEntry> = read_jsonl(&ctx.layout.listing(Stage::Chm))?;
    let by_id: BTreeMap<&str, &ChmEntry> = chms.iter().map(|c| (c.id.as_str(), c)).collect();
    let as_records: Vec<TileRecord> = chms
        .iter()
        .map(|c| TileRecord {
            id: c.id.clone(),
            kind: TileKind::PointCloud,
            bbox: c.bbox,
            url_or_path: c.path.to_string_lossy().into_owned(),
            acquisition_year: c.year,
            department: c.department.clone(),
        })
        .collect();
    let locs = locations(&index);
    let loc_records: Vec<TileRecord> = locs.iter().map(location_record).collect();
    let matches = match_tiles(&loc_records, &as_records);
    let dir = ctx.layout.mosaic_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let cell = ctx.cfg.cell_size;
    let crs = ctx.cfg.crs_code;
    let results: Vec<std::result::Result<Option<LocationEntry>, TileFailure>> = ctx.pool.install(|| {
        matches
            .par_iter()
            .map(|m| {
                let key = m.optical.id.clone();
                let run = || -> Result<Option<LocationEntry>> {
                    let mut tiles = Vec::new();
                    for c in m.pointcloud_tiles.iter().filter(|c| c.department == m.optical.department) {
                        let entry = by_id[c.id.as_str()];
                        let grid = read_geotiff(&entry.path)?
                            .into_grid()
                            .ok_or_else(|| Error::malformed(&entry.path, "expected a single-band grid"))?;
                        tiles.push(DatedGrid::new(entry.id.clone(), grid, entry.year)?);
                    }
                    if tiles.is_empty() {
                        return Ok(None);
                    }
                    let spec = GridSpec::covering(&m.optical.bbox, cell)?;
                    let mosaic = merge(&tiles, spec, crs)?;
                    let path = dir.join(format!("{key}.tif"));
                    let meta = BTreeMap::from([
                        (metadata_keys::ACQUISITION_YEAR_MEAN.to_string(), format!("{:?}", mosaic.mean_year)),
                        (metadata_keys::SOURCE_TILE_COUNT.to_string(), mosaic.source_count.to_string()),
                    ]);
                    write_geotiff(&mosaic.grid, &path, &meta)?;
                    info!(stage = "mosaic", tile = %key, sources = mosaic.source_count, mean_year = mosaic.mean_year, "mosaic written");
                    Ok(Some(LocationEntry {
                        key: key.clone(),
                        department: m.optical.department.clone(),
                        bbox: m.optical.bbox,
                        path,
                        mean_year: mosaic.mean_year,
                        source_count: mosaic.source_count,
                    }))
                };
                run().map_err(|e| TileFailure::new(Stage::Mosaic, key.clone(), e))
            })
            .collect()
    });
    let (entries, failures) = split_results(results);
    let entries: Vec<LocationEntry> = entries.into_iter().flatten().collect();
    write_jsonl(&ctx.layout.listing(Stage::Mosaic), &entries)?;
    Ok(Outcome::new(locs.len(), entries.len(), locs.len() - entries.len() - failures.len(), failures))
}

fn stage_harmonize(ctx: &Ctx) -> Result<Outcome> {
    let index: Vec<TileRecord> = read_jsonl(&ctx.layout.index())?;
    let paths = fetched_paths(ctx)?;
    let mosaics: Vec<LocationEntry> = read_jsonl(&ctx.layout.listing(Stage::Mosaic))?;
    let locs: BTreeMap<String, Location> = locations(&index).into_iter().map(|l| (l.key.clone(), l)).collect();
    let dir = ctx.layout.stack_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let mut jobs = Vec::new();
    let mut failures = Vec::new();
    for m in &mosaics {
        let loc = &locs[&m.key];
        let years: BTreeSet<u64> = loc.rgb.keys().chain(loc.nirrg.keys()).copied().collect();
        for y in years {
            let rgb = loc.rgb.get(&y).and_then(|r| paths.get(&(r.kind, r.id.clone())).map(|p| (r, p)));
            let nir = loc.nirrg.get(&y).and_then(|r| paths.get(&(r.kind, r.id.clone())).map(|p| (r, p)));
            match (rgb, nir) {
                (Some(a), Some(b)) => jobs.push((m, f64::from_bits(y), a, b)),
                (a, b) => {
                    let have = a.or(b).map(|(r, _)| r.id.clone()).unwrap_or_default();
                    failures.push(TileFailure::new(
                        Stage::Harmonize,
                        have,
                        Error::InvalidArgument(format!(
                            "{} {}: RGB and NIRRG not both available",
                            m.key,
                            f64::from_bits(y)
                        )),
                    ));
                }
            }
        }
    }
    let cell = ctx.cfg.cell_size;
    let results: Vec<std::result::Result<StackEntry, TileFailure>> = ctx.pool.install(|| {
        jobs.par_iter()
            .map(|(m, year, (rgb_rec, rgb_path), (_, nir_path))| {
                let run = || -> Result<StackEntry> {
                    let load = |p: &Path| -> Result<crate::raster::ByteRaster> {
                        read_geotiff(p)?
                            .into_bands()
                            .ok_or_else(|| Error::malformed(p, "expected a 3-band uint8 raster"))
                    };
                    let pair = OpticalPair {
                        rgb: load(rgb_path)?,
                        nirrg: load(nir_path)?,
                        acquisition_year: *year,
                    };
                    let stacked = stack_bands(&pair)?;
                    let spec = GridSpec::covering(&m.bbox, cell)?;
                    let image = resample_to(&stacked, spec)?;
                    let path = dir.join(format!("{}_{}.tif", m.key, coord(*year)));
                    write_geotiff(&image, &path, &BTreeMap::new())?;
                    info!(stage = "harmonize", tile = %m.key, year, "stack written");
                    Ok(StackEntry {
                        location: m.key.clone(),
                        year: *year,
                        path,
                    })
                };
                run().map_err(|e| TileFailure::new(Stage::Harmonize, rgb_rec.id.clone(), e))
            })
            .collect()
    });
    let (entries, more) = split_results(results);
    failures.extend(more);
    write_jsonl(&ctx.layout.listing(Stage::Harmonize), &entries)?;
    Ok(Outcome::new(jobs.len(), entries.len(), 0, failures))
}

fn stage_tile(ctx: &Ctx) -> Result<Outcome> {
    let mosaics: Vec<LocationEntry> = read_jsonl(&ctx.layout.listing(Stage::Mosaic))?;
    let stacks: Vec<StackEntry> = read_jsonl(&ctx.layout.listing(Stage::Harmonize))?;
    let samples = ctx.layout.samples();
    if samples.exists() {
        fs::remove_dir_all(&samples).map_err(|e| Error::io(&samples, e))?;
    }
    fs::create_dir_all(&samples).map_err(|e| Error::io(&samples, e))?;
    let params = ctx.cfg.tile_params();
    type TileResult = std::result::Result<(Vec<ManifestEntry>, TilingStats), TileFailure>;
    let results: Vec<TileResult> = ctx.pool.install(|| {
        mosaics
            .par_iter()
            .map(|m| {
                let run = || -> Result<(Vec<ManifestEntry>, TilingStats)> {
                    let grid = read_geotiff(&m.path)?
                        .into_grid()
                        .ok_or_else(|| Error::malformed(&m.path, "expected a grid"))?;
                    let mosaic = Mosaic {
                        grid,
                        mean_year: m.mean_year,
                        source_count: m.source_count,
                    };
                    let mut images = Vec::new();
                    for s in stacks.iter().filter(|s| s.location == m.key) {
                        images.push(
                            read_geotiff(&s.path)?
                                .into_image()
                                .ok_or_else(|| Error::malformed(&s.path, "expected a 5-band image"))?,
                        );
                    }
                    let mut entries = Vec::new();
                    let stats = for_each_sample(&images, &mosaic, &m.department, &params, |sample| {
                        entries.push(write_sample(&sample, &samples)?);
                        Ok(())
                    })?;
                    info!(stage = "tile", tile = %m.key, kept = stats.kept, rejected = stats.rejected, "tiled");
                    Ok((entries, stats))
                };
                run().map_err(|e| TileFailure::new(Stage::Tile, m.key.clone(), e))
            })
            .collect()
    });
    let (ok, failures) = split_results(results);
    let mut entries = Vec::new();
    let mut stats = TilingStats::default();
    for (e, s) in ok {
        entries.extend(e);
        stats.merge(s);
    }
    write_manifest(&entries, &ctx.layout.manifest())?;
    let mut out = Outcome::new(stats.candidates, stats.kept, stats.rejected, failures);
    out.tiling = Some(stats);
    Ok(out)
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

/// Fingerprints chain: each covers its predecessor plus the settings that
/// shape its own output.
fn fingerprints(cfg: &PipelineConfig) -> Result<BTreeMap<Stage, String>> {
    let catalog = if cfg.catalog.is_dir() {
        cfg.catalog.to_string_lossy().into_owned()
    } else {
        file_digest(&cfg.catalog)?
    };
    let mut out = BTreeMap::new();
    let mut prev = String::new();
    for stage in Stage::ALL {
        let own = match stage {
            Stage::Index => serde_json::json!({ "catalog": catalog, "departments": cfg.departments }),
            Stage::Fetch => serde_json::json!({}),
            Stage::Chm => serde_json::to_value(cfg.rasterizer()).expect("serializes"),
            Stage::Mosaic => serde_json::json!({ "cell_size": cfg.cell_size, "crs": cfg.crs_code }),
            Stage::Harmonize => serde_json::json!({}),
            Stage::Tile => serde_json::to_value(cfg.tile_params()).expect("serializes"),
        };
        let mut h = Sha256::new();
        h.update(prev.as_bytes());
        h.update(stage.name().as_bytes());
        h.update(own.to_string().as_bytes());
        prev = format!("{:x}", h.finalize());
        out.insert(stage, prev.clone());
    }
    Ok(out)
}

fn read_marker(layout: &Layout, stage: Stage) -> Option<Marker> {
    let text = fs::read_to_string(layout.marker(stage)).ok()?;
    serde_json::from_str(&text).ok()
}

#[derive(Debug, Clone, Serialize)]
pub struct PlannedStage {
    pub stage: Stage,
    pub run: bool,
    pub fingerprint: String,
}

/// What a run up to `last` would do, without doing it.
pub fn plan(cfg: &PipelineConfig, last: Stage) -> Result<Vec<PlannedStage>> {
    let layout = Layout::new(&cfg.work_dir);
    let fps = fingerprints(cfg)?;
    let mut dirty = false;
    Ok(Stage::ALL
        .into_iter()
        .filter(|s| *s <= last)
        .map(|stage| {
            let fp = fps[&stage].clone();
            let done = read_marker(&layout, stage).is_some_and(|m| m.fingerprint == fp);
            dirty |= !done;
            PlannedStage {
                stage,
                run: dirty,
                fingerprint: fp,
            }
        })
        .collect())
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunSummary> {
    run_until(cfg, Stage::Tile)
}

/// Runs every stage up to and including `last`, skipping completed ones.
pub fn run_until(cfg: &PipelineConfig, last: Stage) -> Result<RunSummary> {
    cfg.check()?;
    let layout = Layout::new(&cfg.work_dir);
    fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.worker_count())
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let ctx = Ctx {
        cfg,
        layout: layout.clone(),
        pool,
    };
    let fps = fingerprints(cfg)?;
    let mut summary = RunSummary::default();
    let mut upstream_ran = false;
    for stage in Stage::ALL.into_iter().filter(|s| *s <= last) {
        let fp = &fps[&stage];
        if !upstream_ran {
            if let Some(m) = read_marker(&layout, stage).filter(|m| &m.fingerprint == fp) {
                info!(stage = stage.name(), "skipped: already complete");
                summary.stages.push(StageReport {
                    stage,
                    skipped: true,
                    counts: m.counts,
                    failed: 0,
                    wall_ms: 0,
                });
                if m.tiling.is_some() {
                    summary.tiling = m.tiling;
                }
                continue;
            }
        }
        upstream_ran = true;
        for later in Stage::ALL.into_iter().filter(|s| *s >= stage) {
            let _ = fs::remove_file(layout.marker(later));
        }
        let start = Instant::now();
        info!(stage = stage.name(), "stage started");
        let outcome = match stage {
            Stage::Index => stage_index(&ctx),
            Stage::Fetch => stage_fetch(&ctx),
            Stage::Chm => stage_chm(&ctx),
            Stage::Mosaic => stage_mosaic(&ctx),
            Stage::Harmonize => stage_harmonize(&ctx),
            Stage::Tile => stage_tile(&ctx),
        }
        .map_err(|e| Error::StageFailure {
            stage: stage.name().to_string(),
            source: Box::new(e),
        })?;
        let wall_ms = start.elapsed().as_millis() as u64;
        info!(
            stage = stage.name(),
            inputs = outcome.counts.inputs,
            produced = outcome.counts.produced,
            rejected = outcome.counts.rejected,
            failed = outcome.failures.len(),
            wall_ms,
            "stage finished"
        );
        if outcome.failures.is_empty() {
            let marker = Marker {
                stage,
                fingerprint: fp.clone(),
                counts: outcome.counts,
                tiling: outcome.tiling,
            };
            let path = layout.marker(stage);
            fs::create_dir_all(path.parent().expect("markers dir")).map_err(|e| Error::io(&path, e))?;
            fs::write(&path, serde_json::to_string_pretty(&marker).expect("serializes"))
                .map_err(|e| Error::io(&path, e))?;
        }
        summary.stages.push(StageReport {
            stage,
            skipped: false,
            counts: outcome.counts,
            failed: outcome.failures.len(),
            wall_ms,
        });
        if outcome.tiling.is_some() {
            summary.tiling = outcome.tiling;
        }
        summary.failures.extend(outcome.failures);
    }
    if last == Stage::Tile {
        let manifest = layout.manifest();
        let n = crate::sampler::read_manifest(&manifest)?.len();
        summary.samples = n;
        summary.images = n * IMAGES_PER_SAMPLE;
        summary.manifest = Some(manifest);
    }
    let path = layout.summary();
    fs::write(&path, serde_json::to_string_pretty(&summary).expect("serializes"))
        .map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("nope".parse::<Stage>().is_err());
    }

    #[test]
    fn coords_make_safe_keys() {
        assert_eq!(coord(400000.0), "400000");
        assert_eq!(coord(12.5), "12p5");
    }

    #[test]
    fn locations_group_by_footprint() {
        let mk = |id: &str, kind, year| TileRecord {
            id: id.into(),
            kind,
            bbox: BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            url_or_path: id.into(),
            acquisition_year: year,
            department: "33".into(),
        };
        let locs = locations(&[
            mk("r1", TileKind::Rgb, 2015.0),
            mk("n1", TileKind::NirRg, 2015.0),
            mk("r2", TileKind::Rgb, 2018.0),
            mk("c", TileKind::PointCloud, 2021.0),
        ]);
        assert_eq!(locs.len(), 1);
        assert_eq!(locs[0].key, "33_0_10");
        assert_eq!((locs[0].rgb.len(), locs[0].nirrg.len()), (2, 1));
    }
}
