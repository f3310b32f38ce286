//! Pipeline configuration: a strict TOML tree plus dotted-key overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::elevation::{ClassFilterConfig, RasterizerConfig, Statistic};
use crate::error::{Error, Result};
use crate::ingest::FetchOptions;
use crate::metrics::{LossParams, DEFAULT_TREE_THRESHOLD, DEFAULT_TREE_WEIGHT};
use crate::raster::DEFAULT_CRS;
use crate::sampler::TileParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub catalog: PathBuf,
    /// Root for fetched tiles, intermediates, samples and the manifest.
    pub work_dir: PathBuf,
    /// Empty means every department in the catalog.
    pub departments: Vec<String>,
    pub cell_size: f64,
    pub smoothing_window: f64,
    pub dtm_statistic: Statistic,
    pub dsm_statistic: Statistic,
    pub crs_code: u32,
    pub classes: ClassFilterConfig,
    pub tile_px: usize,
    pub min_valid_fraction: f64,
    pub seed: u64,
    /// 0 uses one worker per CPU.
    pub workers: usize,
    pub fetch: FetchOptions,
    pub tree_weight: f64,
    pub tree_threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let r = RasterizerConfig::default();
        let t = TileParams::default();
        Self {
            catalog: PathBuf::new(),
            work_dir: PathBuf::from("work"),
            departments: Vec::new(),
            cell_size: r.cell_size,
            smoothing_window: r.smoothing_window,
            dtm_statistic: r.dtm_statistic,
            dsm_statistic: r.dsm_statistic,
            crs_code: DEFAULT_CRS,
            classes: r.classes,
            tile_px: t.tile_px,
            min_valid_fraction: t.min_valid_fraction,
            seed: t.seed,
            workers: 0,
            fetch: FetchOptions::default(),
            tree_weight: DEFAULT_TREE_WEIGHT,
            tree_threshold: DEFAULT_TREE_THRESHOLD,
        }
    }
}

impl PipelineConfig {
    pub fn rasterizer(&self) -> RasterizerConfig {
        RasterizerConfig {
            cell_size: self.cell_size,
            dtm_statistic: self.dtm_statistic,
            dsm_statistic: self.dsm_statistic,
            smoothing_window: self.smoothing_window,
            crs_code: self.crs_code,
            classes: self.classes.clone(),
        }
    }

    pub fn tile_params(&self) -> TileParams {
        TileParams {
            tile_px: self.tile_px,
            min_valid_fraction: self.min_valid_fraction,
            seed: self.seed,
        }
    }

    pub fn loss_params(&self) -> LossParams {
        LossParams {
            tree_weight: self.tree_weight,
            tree_threshold: self.tree_threshold,
        }
    }

    pub fn worker_count(&self) -> usize {
        if self.workers == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            self.workers
        }
    }

    /// Cross-field checks. Relative paths must already be resolved.
    pub fn check(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be positive, got {v}")))
            }
        };
        positive("cell_size", self.cell_size)?;
        positive("smoothing_window", self.smoothing_window)?;
        if self.smoothing_window < self.cell_size {
            return Err(Error::config("smoothing_window", "must be at least cell_size"));
        }
        if self.dtm_statistic == Statistic::Max {
            return Err(Error::config("dtm_statistic", "must be mean or min"));
        }
        if self.tile_px == 0 {
            return Err(Error::config("tile_px", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.min_valid_fraction) {
            return Err(Error::config("min_valid_fraction", "must lie in [0, 1]"));
        }
        if !(self.tree_weight >= 0.0 && self.tree_weight.is_finite()) {
            return Err(Error::config("tree_weight", "must be non-negative"));
        }
        if !self.tree_threshold.is_finite() {
            return Err(Error::config("tree_threshold", "must be finite"));
        }
        if self.fetch.max_parallel == 0 {
            return Err(Error::config("fetch.max_parallel", "must be positive"));
        }
        self.classes
            .to_filter()
            .map_err(|e| Error::config("classes", e.to_string()))?;
        if self.catalog.as_os_str().is_empty() {
            return Err(Error::config("catalog", "missing"));
        }
        if !self.catalog.exists() {
            return Err(Error::config(
                "catalog",
                format!("{} does not exist", self.catalog.display()),
            ));
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.catalog, &mut self.work_dir] {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Sets `dotted.key = value` in a TOML tree. The value is parsed as TOML
/// when possible, otherwise kept as a string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::config(key, "empty key"))?;
    let mut node = table;
    for part in parts {
        node = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{part}` is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn field_of(path: &str, message: &str) -> String {
    let unknown = message
        .strip_prefix("unknown field `")
        .and_then(|rest| rest.split('`').next());
    match (path, unknown) {
        (".", Some(k)) => k.to_string(),
        (p, Some(k)) if !p.rsplit('.').next().is_some_and(|last| last == k) => format!("{p}.{k}"),
        (p, _) => p.to_string(),
    }
}

/// Builds a config from a TOML tree. Relative paths resolve against `base`.
pub fn config_from_table(table: toml::Table, base: &Path) -> Result<PipelineConfig> {
    let mut cfg: PipelineConfig = serde_path_to_error::deserialize(toml::Value::Table(table))
        .map_err(|e| {
            let path = e.path().to_string();
            let message = e.inner().to_string();
            Error::config(field_of(&path, &message), message)
        })?;
    cfg.resolve_paths(base);
    cfg.check()?;
    Ok(cfg)
}

pub fn load_table(path: &Path) -> Result<toml::Table> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.parse::<toml::Table>()
        .map_err(|e| Error::config("<file>", e.to_string()))
}

/// Parses, applies defaults and validates a config file.
pub fn validate_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    validate_config_with(path, &[])
}

pub fn validate_config_with(path: impl AsRef<Path>, overrides: &[String]) -> Result<PipelineConfig> {
    let path = path.as_ref();
    let mut table = load_table(path)?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    config_from_table(table, path.parent().unwrap_or(Path::new(".")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> PathBuf {
        fs::write(dir.join("catalog.jsonl"), "").unwrap();
        let p = dir.join("pipeline.toml");
        fs::write(&p, body).unwrap();
        p
    }

    fn field_error(r: Result<PipelineConfig>) -> String {
        match r {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = validate_config(write(dir.path(), "catalog = \"catalog.jsonl\"\n")).unwrap();
        assert_eq!(cfg.cell_size, 0.5);
        assert_eq!(cfg.smoothing_window, 10.0);
        assert_eq!(cfg.min_valid_fraction, 0.5);
        assert_eq!(cfg.tree_weight, 10.0);
        assert_eq!(cfg.tree_threshold, 0.5);
        assert_eq!(cfg.tile_px, 256);
        assert_eq!(cfg.classes.ground, vec![2]);
        assert_eq!(cfg.catalog, dir.path().join("catalog.jsonl"));
        assert_eq!(cfg.work_dir, dir.path().join("work"));
    }

    #[test]
    fn errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let base = "catalog = \"catalog.jsonl\"\n";
        assert_eq!(field_error(validate_config(write(dir.path(), &format!("{base}cell_size = -0.5\n")))), "cell_size");
        assert_eq!(field_error(validate_config(write(dir.path(), &format!("{base}colour = 1\n")))), "colour");
        assert_eq!(
            field_error(validate_config(write(dir.path(), &format!("{base}[fetch]\nretries = \"many\"\n")))),
            "fetch.retries"
        );
        assert_eq!(
            field_error(validate_config(write(dir.path(), &format!("{base}[fetch]\nspeed = 3\n")))),
            "fetch.speed"
        );
        assert_eq!(field_error(validate_config(write(dir.path(), "seed = 3\n"))), "catalog");
        assert_eq!(
            field_error(validate_config(write(dir.path(), &format!("{base}[classes]\nground = [2]\nvegetation = [2, 3]\n")))),
            "classes"
        );
    }

    #[test]
    fn overrides_apply() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "catalog = \"catalog.jsonl\"\n");
        let cfg = validate_config_with(
            &p,
            &["seed=42".into(), "fetch.retries = 0".into(), "departments=[\"33\"]".into(), "work_dir=out".into()],
        )
        .unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.fetch.retries, 0);
        assert_eq!(cfg.departments, vec!["33"]);
        assert_eq!(cfg.work_dir, dir.path().join("out"));
        assert_eq!(field_error(validate_config_with(&p, &["nonsense".into()])), "nonsense");
    }
}
