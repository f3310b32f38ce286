//! Scoring predicted height maps against manifest targets.
//!
//! A prediction for tile `id` is a single-band float GeoTIFF named
//! `<id>_pred.tif`, on the same grid as the tile's CHM.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::error::{Error, Result};
use crate::metrics::{
    confusion_map, render_confusion_png, ConfusionCounts, LossParams, MetricAccumulator, MetricSummary,
};
use crate::raster::{read_geotiff, write_geotiff, Grid};
use crate::sampler::{make_mask, read_manifest, ManifestEntry};

pub fn prediction_path(pred_dir: &Path, tile_id: &str) -> PathBuf {
    pred_dir.join(format!("{tile_id}_pred.tif"))
}

/// Writes a prediction where [`evaluate`] will look for it.
pub fn write_prediction(pred: &Grid, pred_dir: &Path, tile_id: &str) -> Result<PathBuf> {
    fs::create_dir_all(pred_dir).map_err(|e| Error::io(pred_dir, e))?;
    let path = prediction_path(pred_dir, tile_id);
    write_geotiff(pred, &path, &Default::default())?;
    Ok(path)
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub params: LossParams,
    /// Confusion maps are written here when set.
    pub png_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileEvaluation {
    pub tile_id: String,
    pub department: String,
    pub metrics: MetricSummary,
    pub confusion: ConfusionCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedTile {
    pub tile_id: String,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tree_weight: f64,
    pub tree_threshold: f64,
    /// Errors are in the units of the target rasters (meters).
    pub units: String,
    pub aggregate: MetricSummary,
    pub confusion: ConfusionCounts,
    pub tiles: Vec<TileEvaluation>,
    pub skipped: Vec<SkippedTile>,
}

struct Scored {
    eval: TileEvaluation,
    acc: MetricAccumulator,
}

fn load_grid(path: &Path) -> Result<Grid> {
    read_geotiff(path)?
        .into_grid()
        .ok_or_else(|| Error::malformed(path, "expected a single-band grid"))
}

fn score_tile(entry: &ManifestEntry, base: &Path, pred_dir: &Path, opts: &EvalOptions) -> Result<Scored> {
    let chm = load_grid(&base.join(&entry.chm_path))?;
    let mut inputs = Vec::with_capacity(3);
    for p in &entry.input_paths {
        let path = base.join(p);
        inputs.push(
            read_geotiff(&path)?
                .into_image()
                .ok_or_else(|| Error::malformed(&path, "expected a 5-band image"))?,
        );
    }
    let pred = load_grid(&prediction_path(pred_dir, &entry.tile_id))?;
    if pred.width != chm.width || pred.height != chm.height {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs target {}x{}",
            pred.width, pred.height, chm.width, chm.height
        )));
    }
    let mut mask = make_mask(&chm, [&inputs[0], &inputs[1], &inputs[2]])?;
    for (m, &v) in mask.iter_mut().zip(pred.values()) {
        *m &= pred.is_valid_value(v) && v.is_finite();
    }
    let mut acc = MetricAccumulator::default();
    acc.add(pred.values(), chm.values(), &mask, &opts.params)?;
    let map = confusion_map(pred.values(), chm.values(), &mask, chm.width, opts.params.tree_threshold)?;
    if let Some(dir) = &opts.png_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        render_confusion_png(&map, &dir.join(format!("{}_confusion.png", entry.tile_id)))?;
    }
    Ok(Scored {
        eval: TileEvaluation {
            tile_id: entry.tile_id.clone(),
            department: entry.department.clone(),
            metrics: acc.summary(),
            confusion: map.counts,
        },
        acc,
    })
}

/// Scores every manifest tile that has a prediction. Tiles without one, or
/// with an unusable one, are listed in `skipped`.
pub fn evaluate(manifest: &Path, pred_dir: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let mut entries = read_manifest(manifest)?;
    entries.sort_by(|a, b| a.tile_id.cmp(&b.tile_id));
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut total = MetricAccumulator::default();
    let mut confusion = ConfusionCounts::default();
    let mut tiles = Vec::new();
    let mut skipped = Vec::new();
    for entry in &entries {
        match score_tile(entry, base, pred_dir, opts) {
            Ok(s) => {
                total.merge(&s.acc);
                confusion.merge(&s.eval.confusion);
                tiles.push(s.eval);
            }
            Err(e) => {
                warn!(tile = %entry.tile_id, kind = e.kind(), error = %e, "tile not scored");
                skipped.push(SkippedTile {
                    tile_id: entry.tile_id.clone(),
                    kind: e.kind().to_string(),
                    message: e.to_string(),
                });
            }
        }
    }
    info!(scored = tiles.len(), skipped = skipped.len(), "evaluation finished");
    Ok(EvalReport {
        tree_weight: opts.params.tree_weight,
        tree_threshold: opts.params.tree_threshold,
        units: "m".into(),
        aggregate: total.summary(),
        confusion,
        tiles,
        skipped,
    })
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{AffineTransform, MultiSpectralImage};
    use crate::sampler::{write_manifest, write_sample, Sample};

    fn tiny_sample(dir: &Path) -> PathBuf {
        let t = AffineTransform::north_up(0.0, 1.0, 0.5).unwrap();
        let chm = Grid::new(t, 4, 1, vec![2.0, 0.2, -9999.0, 1.0], -9999.0, 2154).unwrap();
        let mut bands = vec![vec![10u8; 4]; 5];
        // Pixel 3 is blank imagery in the first input.
        for b in bands.iter_mut().take(4) {
            b[3] = 0;
        }
        let blank = MultiSpectralImage::new(t, 4, 1, 2154, bands, 2015.0).unwrap();
        let full = MultiSpectralImage::new(t, 4, 1, 2154, vec![vec![10u8; 4]; 5], 2018.0).unwrap();
        let sample = Sample {
            tile_id: "33_0_2".into(),
            origin: chm.bbox(),
            department: "33".into(),
            inputs: [blank, full.clone(), full],
            chm,
            mask: vec![true, true, false, false],
            delta_t: [6.0, 3.0, 1.0],
            valid_fraction: 0.5,
            mean_year: 2021.0,
            source_count: 1,
        };
        let entry = write_sample(&sample, dir).unwrap();
        let manifest = dir.join("manifest.jsonl");
        write_manifest(&[entry], &manifest).unwrap();
        manifest
    }

    #[test]
    fn mask_excludes_nodata_blank_imagery_and_invalid_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_sample(dir.path());
        let t = AffineTransform::north_up(0.0, 1.0, 0.5).unwrap();
        let preds = dir.path().join("pred");
        let pred = Grid::new(t, 4, 1, vec![1.0, 0.2, 5.0, 0.0], -9999.0, 2154).unwrap();
        write_prediction(&pred, &preds, "33_0_2").unwrap();
        let report = evaluate(&manifest, &preds, &EvalOptions::default()).unwrap();
        // Only pixels 0 and 1 count: 11 * 1^2 / 2.
        assert_eq!(report.aggregate.valid_pixels, 2);
        assert_eq!(report.aggregate.wmse, Some(5.5));
        assert_eq!(report.aggregate.mmae, Some(1.0));
        assert_eq!(report.confusion.invalid, 2);
        assert_eq!(report.confusion.tp, 1);

        let nan = Grid::new(t, 4, 1, vec![f32::NAN, 0.2, 5.0, 0.0], -9999.0, 2154).unwrap();
        write_prediction(&nan, &preds, "33_0_2").unwrap();
        let report = evaluate(&manifest, &preds, &EvalOptions::default()).unwrap();
        assert_eq!(report.aggregate.valid_pixels, 1);
    }

    #[test]
    fn missing_prediction_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_sample(dir.path());
        let report = evaluate(&manifest, &dir.path().join("none"), &EvalOptions::default()).unwrap();
        assert!(report.tiles.is_empty());
        assert_eq!(report.skipped[0].kind, "IoFailure");
        assert_eq!(report.aggregate.wmse, None);
        assert_eq!(prediction_path(Path::new("p"), "x"), Path::new("p/x_pred.tif"));
    }
}
