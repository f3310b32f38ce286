//! Tile catalogs, cloud-to-optical matching and resumable fetching.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::thread;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::error::{Error, Result};
use crate::raster::{bbox_contains, BBox};

pub const DEFAULT_DEPARTMENT: &str = "00";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TileKind {
    PointCloud,
    #[serde(rename = "RGB")]
    Rgb,
    #[serde(rename = "NIRRG")]
    NirRg,
}

impl TileKind {
    pub fn dir_name(self) -> &'static str {
        match self {
            TileKind::PointCloud => "pointcloud",
            TileKind::Rgb => "rgb",
            TileKind::NirRg => "nirrg",
        }
    }

    pub fn is_optical(self) -> bool {
        self != TileKind::PointCloud
    }
}

impl fmt::Display for TileKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TileKind::PointCloud => "PointCloud",
            TileKind::Rgb => "RGB",
            TileKind::NirRg => "NIRRG",
        })
    }
}

impl FromStr for TileKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "pointcloud" | "point_cloud" | "laz" | "lidar" => Ok(TileKind::PointCloud),
            "rgb" => Ok(TileKind::Rgb),
            "nirrg" | "nir_rg" | "irc" => Ok(TileKind::NirRg),
            other => Err(format!("unknown tile kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub id: String,
    pub kind: TileKind,
    pub bbox: BBox,
    pub url_or_path: String,
    pub acquisition_year: f64,
    pub department: String,
}

impl TileRecord {
    /// Where `fetch` places this tile under `dest`.
    pub fn local_path(&self, dest: &Path) -> PathBuf {
        dest.join(self.kind.dir_name()).join(&self.id)
    }

    fn sort_key(&self) -> (&str, TileKind, &str) {
        (&self.department, self.kind, &self.id)
    }
}

/// One catalog row before validation. Every field is optional so missing
/// ones can be reported by name.
#[derive(Debug, Default, Deserialize)]
struct RawRow {
    id: Option<String>,
    kind: Option<String>,
    minx: Option<f64>,
    miny: Option<f64>,
    maxx: Option<f64>,
    maxy: Option<f64>,
    year: Option<f64>,
    url: Option<String>,
    department: Option<String>,
}

fn is_remote(locator: &str) -> bool {
    locator.contains("://") && !locator.starts_with("file://")
}

impl RawRow {
    fn into_record(self, line: usize, base: &Path) -> Result<TileRecord> {
        let bad = |reason: String| Error::MalformedCatalog { line, reason };
        let missing = |name: &str| bad(format!("missing field `{name}`"));
        let id = self.id.filter(|s| !s.is_empty()).ok_or_else(|| missing("id"))?;
        let kind: TileKind = self.kind.ok_or_else(|| missing("kind"))?.parse().map_err(bad)?;
        let bbox = BBox::new(
            self.minx.ok_or_else(|| missing("minx"))?,
            self.miny.ok_or_else(|| missing("miny"))?,
            self.maxx.ok_or_else(|| missing("maxx"))?,
            self.maxy.ok_or_else(|| missing("maxy"))?,
        )
        .map_err(|e| bad(format!("bad bbox: {e}")))?;
        let year = self.year.ok_or_else(|| missing("year"))?;
        if !(2000.0..=2100.0).contains(&year) {
            return Err(bad(format!("year {year} outside [2000, 2100]")));
        }
        let url = self.url.filter(|s| !s.is_empty()).ok_or_else(|| missing("url"))?;
        if id.contains(['/', '\\']) || id == "." || id == ".." {
            return Err(bad(format!("id {id:?} is not a plain file name")));
        }
        // Relative local paths are taken relative to the catalog.
        let url_or_path = if is_remote(&url) || url.starts_with("file://") || Path::new(&url).is_absolute() {
            url
        } else {
            base.join(&url).to_string_lossy().into_owned()
        };
        Ok(TileRecord {
            id,
            kind,
            bbox,
            url_or_path,
            acquisition_year: year,
            department: self.department.unwrap_or_else(|| DEFAULT_DEPARTMENT.to_string()),
        })
    }
}

fn read_jsonl(path: &Path, base: &Path) -> Result<Vec<(usize, TileRecord)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let n = i + 1;
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let raw: RawRow = serde_json::from_str(&line).map_err(|e| Error::MalformedCatalog {
            line: n,
            reason: e.to_string(),
        })?;
        out.push((n, raw.into_record(n, base)?));
    }
    Ok(out)
}

fn read_csv(path: &Path, base: &Path) -> Result<Vec<(usize, TileRecord)>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::io(path, io::Error::other(e)))?;
    let mut out = Vec::new();
    for row in reader.deserialize::<RawRow>() {
        let row = row.map_err(|e| Error::MalformedCatalog {
            line: e.position().map_or(0, |p| p.line() as usize),
            reason: e.to_string(),
        })?;
        let n = out.len() + 2;
        out.push((n, row.into_record(n, base)?));
    }
    Ok(out)
}

fn read_catalog_file(path: &Path) -> Result<Vec<(usize, TileRecord)>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let is_csv = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        read_csv(path, base)
    } else {
        read_jsonl(path, base)
    }
}

/// Reads a catalog (JSON lines, or CSV when the extension says so), or every
/// `*.jsonl` / `*.csv` file in a directory. Records come back ordered by
/// `(department, kind, id)` with identical duplicates collapsed.
pub fn build_index(source: impl AsRef<Path>) -> Result<Vec<TileRecord>> {
    let source = source.as_ref();
    let mut rows = Vec::new();
    if source.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(source)
            .map_err(|e| Error::io(source, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("jsonl" | "json" | "csv")
                )
            })
            .collect();
        files.sort();
        for f in files {
            rows.extend(read_catalog_file(&f)?);
        }
    } else {
        rows = read_catalog_file(source)?;
    }

    let mut by_key: BTreeMap<(String, TileKind, String), TileRecord> = BTreeMap::new();
    for (line, rec) in rows {
        let key = (rec.department.clone(), rec.kind, rec.id.clone());
        match by_key.get(&key) {
            Some(existing) if *existing == rec => {}
            Some(_) => {
                return Err(Error::MalformedCatalog {
                    line,
                    reason: format!("conflicting duplicate of {} {}", rec.kind, rec.id),
                })
            }
            None => {
                by_key.insert(key, rec);
            }
        }
    }
    let records: Vec<TileRecord> = by_key.into_values().collect();
    debug_assert!(records.windows(2).all(|w| w[0].sort_key() < w[1].sort_key()));
    Ok(records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    pub optical: TileRecord,
    pub pointcloud_tiles: Vec<TileRecord>,
}

/// Pairs each optical tile with the point-cloud tiles it fully contains.
pub fn match_tiles(optical: &[TileRecord], clouds: &[TileRecord]) -> Vec<MatchSet> {
    optical
        .iter()
        .filter_map(|o| {
            let inside: Vec<TileRecord> = clouds
                .iter()
                .filter(|c| bbox_contains(&o.bbox, &c.bbox))
                .cloned()
                .collect();
            (!inside.is_empty()).then(|| MatchSet {
                optical: o.clone(),
                pointcloud_tiles: inside,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FetchOptions {
    pub max_parallel: usize,
    pub retries: u32,
    /// Delay before the first retry; doubles on each further attempt.
    pub backoff_base_ms: u64,
    pub timeout_s: u64,
}

impl Default for FetchOptions {
    fn default() -> Self {
        Self {
            max_parallel: 4,
            retries: 3,
            backoff_base_ms: 1000,
            timeout_s: 300,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FetchStatus {
    Cached,
    Copied,
    Downloaded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fetched {
    pub id: String,
    pub kind: TileKind,
    pub path: PathBuf,
    pub status: FetchStatus,
    pub attempts: u32,
}

#[derive(Debug, Default)]
pub struct FetchReport {
    /// In input order.
    pub fetched: Vec<Fetched>,
    pub failures: Vec<Error>,
}

impl FetchReport {
    pub fn paths(&self) -> Vec<PathBuf> {
        self.fetched.iter().map(|f| f.path.clone()).collect()
    }

    pub fn count(&self, status: FetchStatus) -> usize {
        self.fetched.iter().filter(|f| f.status == status).count()
    }
}

fn local_source(locator: &str) -> Option<PathBuf> {
    if let Some(rest) = locator.strip_prefix("file://") {
        Some(PathBuf::from(rest))
    } else if is_remote(locator) {
        None
    } else {
        Some(PathBuf::from(locator))
    }
}

fn remote_size(agent: &ureq::Agent, url: &str) -> Option<u64> {
    let resp = agent.head(url).call().ok()?;
    resp.headers()
        .get("content-length")?
        .to_str()
        .ok()?
        .parse()
        .ok()
}

fn transfer(agent: &ureq::Agent, rec: &TileRecord, part: &Path) -> std::result::Result<FetchStatus, String> {
    let mut out = fs::File::create(part).map_err(|e| e.to_string())?;
    match local_source(&rec.url_or_path) {
        Some(src) => {
            let mut f = fs::File::open(&src).map_err(|e| format!("{}: {e}", src.display()))?;
            io::copy(&mut f, &mut out).map_err(|e| e.to_string())?;
            out.sync_all().map_err(|e| e.to_string())?;
            Ok(FetchStatus::Copied)
        }
        None => {
            let resp = agent.get(&rec.url_or_path).call().map_err(|e| e.to_string())?;
            let expected = resp
                .headers()
                .get("content-length")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.parse::<u64>().ok());
            let mut body = resp.into_body().into_reader();
            let n = io::copy(&mut body, &mut out).map_err(|e| e.to_string())?;
            if let Some(len) = expected.filter(|&len| len != n) {
                return Err(format!("short body: {n} of {len} bytes"));
            }
            out.sync_all().map_err(|e| e.to_string())?;
            Ok(FetchStatus::Downloaded)
        }
    }
}

fn fetch_one(agent: &ureq::Agent, rec: &TileRecord, dest: &Path, opts: &FetchOptions) -> Result<Fetched> {
    let path = rec.local_path(dest);
    let done = |status, attempts| Fetched {
        id: rec.id.clone(),
        kind: rec.kind,
        path: path.clone(),
        status,
        attempts,
    };
    if let Ok(meta) = fs::metadata(&path) {
        let expected = match local_source(&rec.url_or_path) {
            Some(src) => fs::metadata(src).ok().map(|m| m.len()),
            None => remote_size(agent, &rec.url_or_path),
        };
        if expected == Some(meta.len()) {
            debug!(id = %rec.id, "cached");
            return Ok(done(FetchStatus::Cached, 0));
        }
    }
    let parent = path.parent().expect("kind directory");
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let part = path.with_file_name(format!("{}.part", rec.id));

    let attempts = opts.retries + 1;
    let mut last = String::new();
    for attempt in 1..=attempts {
        match transfer(agent, rec, &part) {
            Ok(status) => {
                fs::rename(&part, &path).map_err(|e| Error::io(&path, e))?;
                return Ok(done(status, attempt));
            }
            Err(reason) => {
                let _ = fs::remove_file(&part);
                warn!(id = %rec.id, attempt, %reason, "fetch attempt failed");
                last = reason;
                if attempt < attempts {
                    let delay = opts.backoff_base_ms.saturating_mul(1u64 << (attempt - 1).min(20));
                    thread::sleep(Duration::from_millis(delay));
                }
            }
        }
    }
    Err(Error::FetchFailure {
        id: rec.id.clone(),
        attempts,
        reason: last,
    })
}

/// Copies or downloads every record to `dest/<kind>/<id>`, at most
/// `max_parallel` at a time. Files already present with the source's size
/// are left alone. Failures are collected, not fatal.
pub fn fetch(records: &[TileRecord], dest: impl AsRef<Path>, opts: &FetchOptions) -> Result<FetchReport> {
    let dest = dest.as_ref();
    if opts.max_parallel == 0 {
        return Err(Error::InvalidArgument("max_parallel must be positive".into()));
    }
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(opts.timeout_s.max(1))))
        .build()
        .into();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.max_parallel)
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let results: Vec<Result<Fetched>> =
        pool.install(|| records.par_iter().map(|r| fetch_one(&agent, r, dest, opts)).collect());
    let mut report = FetchReport::default();
    for r in results {
        match r {
            Ok(f) => report.fetched.push(f),
            Err(e) => report.failures.push(e),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    fn rec(id: &str, kind: TileKind, b: (f64, f64, f64, f64)) -> TileRecord {
        TileRecord {
            id: id.into(),
            kind,
            bbox: BBox::new(b.0, b.1, b.2, b.3).unwrap(),
            url_or_path: format!("/nowhere/{id}"),
            acquisition_year: 2020.0,
            department: "33".into(),
        }
    }

    fn line(id: &str, kind: &str, url: &str) -> String {
        format!(r#"{{"id":"{id}","kind":"{kind}","minx":0,"miny":0,"maxx":1000,"maxy":1000,"year":2021,"url":"{url}"}}"#)
    }

    #[test]
    fn index_orders_and_dedups() {
        let dir = tempfile::tempdir().unwrap();
        let cat = dir.path().join("catalog.jsonl");
        let body = [
            line("b", "laz", "b.laz"),
            line("a", "laz", "a.laz"),
            line("a", "laz", "a.laz"),
            line("z", "RGB", "http://example.org/z.tif"),
        ]
        .join("\n");
        fs::write(&cat, body).unwrap();
        let idx = build_index(&cat).unwrap();
        let ids: Vec<_> = idx.iter().map(|r| (r.kind, r.id.as_str())).collect();
        assert_eq!(ids, vec![(TileKind::PointCloud, "a"), (TileKind::PointCloud, "b"), (TileKind::Rgb, "z")]);
        assert_eq!(idx[0].url_or_path, dir.path().join("a.laz").to_string_lossy());
        assert_eq!(idx[2].url_or_path, "http://example.org/z.tif");
        assert_eq!(idx[0].department, DEFAULT_DEPARTMENT);
    }

    #[test]
    fn index_reports_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let cat = dir.path().join("catalog.jsonl");
        fs::write(
            &cat,
            format!("{}\n{}\n", line("a", "laz", "a"), r#"{"id":"b","kind":"laz","year":2020,"url":"b"}"#),
        )
        .unwrap();
        match build_index(&cat) {
            Err(Error::MalformedCatalog { line, reason }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("minx"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
        fs::write(&cat, format!("{}\n{}\n", line("a", "laz", "a"), line("a", "laz", "other"))).unwrap();
        assert!(matches!(build_index(&cat), Err(Error::MalformedCatalog { line: 2, .. })));
        fs::write(&cat, line("a", "laz", "a").replace("1000,\"maxy\"", "-5,\"maxy\"")).unwrap();
        assert!(matches!(build_index(&cat), Err(Error::MalformedCatalog { line: 1, .. })));
    }

    #[test]
    fn index_reads_csv() {
        let dir = tempfile::tempdir().unwrap();
        let cat = dir.path().join("catalog.csv");
        fs::write(
            &cat,
            "id,kind,minx,miny,maxx,maxy,year,url,department\nr1,NIRRG,0,0,5000,5000,2019.5,r1.tif,40\nr0,RGB,0,0,5000,5000,2019.5,r0.tif,40\n",
        )
        .unwrap();
        let idx = build_index(&cat).unwrap();
        assert_eq!(idx.len(), 2);
        assert_eq!((idx[0].kind, idx[0].department.as_str()), (TileKind::Rgb, "40"));
        assert_eq!(idx[1].acquisition_year, 2019.5);
        fs::write(&cat, "id,kind,minx,miny,maxx,maxy,year,url\nr1,NIRRG,0,0,5000,5000,2019,\n").unwrap();
        assert!(matches!(build_index(&cat), Err(Error::MalformedCatalog { line: 2, .. })));
    }

    #[test]
    fn match_examples() {
        let o = rec("o", TileKind::Rgb, (0.0, 0.0, 5000.0, 5000.0));
        let inside = rec("c1", TileKind::PointCloud, (0.0, 0.0, 1000.0, 1000.0));
        let outside = rec("c2", TileKind::PointCloud, (6000.0, 0.0, 7000.0, 1000.0));
        let straddle = rec("c3", TileKind::PointCloud, (4500.0, 0.0, 5500.0, 1000.0));
        let m = match_tiles(std::slice::from_ref(&o), &[inside.clone(), outside, straddle]);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].pointcloud_tiles, vec![inside]);
        assert!(match_tiles(&[o], &[]).is_empty());
    }

    proptest! {
        #[test]
        fn match_equals_brute_force(
            opt in proptest::collection::vec((0u8..6, 0u8..6, 1u8..4, 1u8..4), 0..6),
            cl in proptest::collection::vec((0u8..9, 0u8..9, 1u8..3, 1u8..3), 0..12),
        ) {
            let mk = |p: &[(u8, u8, u8, u8)], kind| -> Vec<TileRecord> {
                p.iter().enumerate().map(|(i, &(x, y, w, h))| {
                    let (x, y) = (x as f64 * 1000.0, y as f64 * 1000.0);
                    rec(&format!("t{i}"), kind, (x, y, x + w as f64 * 1000.0, y + h as f64 * 1000.0))
                }).collect()
            };
            let (o, c) = (mk(&opt, TileKind::Rgb), mk(&cl, TileKind::PointCloud));
            let got = match_tiles(&o, &c);
            let mut expected = Vec::new();
            for a in &o {
                let hits: Vec<_> = c.iter().filter(|b| {
                    a.bbox.min_x <= b.bbox.min_x && a.bbox.min_y <= b.bbox.min_y
                        && b.bbox.max_x <= a.bbox.max_x && b.bbox.max_y <= a.bbox.max_y
                }).cloned().collect();
                if !hits.is_empty() {
                    expected.push(MatchSet { optical: a.clone(), pointcloud_tiles: hits });
                }
            }
            prop_assert_eq!(got, expected);
        }
    }

    fn fast() -> FetchOptions {
        FetchOptions {
            backoff_base_ms: 1,
            ..FetchOptions::default()
        }
    }

    #[test]
    fn fetch_local_then_cached() {
        let src = tempfile::tempdir().unwrap();
        let dest = tempfile::tempdir().unwrap();
        let mut recs = Vec::new();
        for i in 0..3 {
            let p = src.path().join(format!("f{i}"));
            fs::write(&p, vec![i as u8; 100 + i]).unwrap();
            let mut r = rec(&format!("f{i}.laz"), TileKind::PointCloud, (0.0, 0.0, 1.0, 1.0));
            r.url_or_path = if i == 0 {
                format!("file://{}", p.display())
            } else {
                p.to_string_lossy().into_owned()
            };
            recs.push(r);
        }
        let first = fetch(&recs, dest.path(), &fast()).unwrap();
        assert!(first.failures.is_empty());
        assert_eq!(first.count(FetchStatus::Copied), 3);
        let target = dest.path().join("pointcloud").join("f2.laz");
        assert_eq!(fs::read(&target).unwrap(), vec![2u8; 102]);

        let second = fetch(&recs, dest.path(), &fast()).unwrap();
        assert_eq!(second.count(FetchStatus::Cached), 3);
        assert_eq!(second.paths(), first.paths());

        // Size mismatch means a stale or partial file: fetch again.
        fs::write(&target, b"short").unwrap();
        let third = fetch(&recs, dest.path(), &fast()).unwrap();
        assert_eq!(third.count(FetchStatus::Copied), 1);
    }

    #[test]
    fn fetch_failure_counts_attempts() {
        let dest = tempfile::tempdir().unwrap();
        let mut r = rec("gone", TileKind::Rgb, (0.0, 0.0, 1.0, 1.0));
        r.url_or_path = "http://127.0.0.1:1/gone.tif".into();
        let mut missing = rec("missing", TileKind::Rgb, (0.0, 0.0, 1.0, 1.0));
        missing.url_or_path = "/definitely/not/here".into();
        let opts = FetchOptions { retries: 2, ..fast() };
        let report = fetch(&[r, missing], dest.path(), &opts).unwrap();
        assert_eq!(report.failures.len(), 2);
        for f in &report.failures {
            assert!(matches!(f, Error::FetchFailure { attempts: 3, .. }), "{f:?}");
        }
        let rgb = dest.path().join("rgb");
        assert_eq!(fs::read_dir(&rgb).map(|d| d.count()).unwrap_or(0), 0);
    }

    #[test]
    fn fetch_over_http() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let port = listener.local_addr().unwrap().port();
        let body = b"0123456789abcdef".to_vec();
        let served = body.clone();
        thread::spawn(move || {
            for stream in listener.incoming().take(3) {
                let mut s = stream.unwrap();
                let mut buf = [0u8; 2048];
                let n = s.read(&mut buf).unwrap();
                let head = String::from_utf8_lossy(&buf[..n]).starts_with("HEAD");
                let mut resp = format!(
                    "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                    served.len()
                )
                .into_bytes();
                if !head {
                    resp.extend_from_slice(&served);
                }
                s.write_all(&resp).unwrap();
            }
        });
        let dest = tempfile::tempdir().unwrap();
        let mut r = rec("remote.tif", TileKind::NirRg, (0.0, 0.0, 1.0, 1.0));
        r.url_or_path = format!("http://127.0.0.1:{port}/remote.tif");
        let report = fetch(std::slice::from_ref(&r), dest.path(), &fast()).unwrap();
        assert!(report.failures.is_empty(), "{:?}", report.failures);
        assert_eq!(report.fetched[0].status, FetchStatus::Downloaded);
        assert_eq!(fs::read(r.local_path(dest.path())).unwrap(), body);
        let again = fetch(&[r], dest.path(), &fast()).unwrap();
        assert_eq!(again.fetched[0].status, FetchStatus::Cached);
    }
}
