//! Masked regression metrics and tree/non-tree confusion maps.
//!
//! All sums run in f64. Threshold tests are strict: a pixel is "tree" when
//! its height is `> theta`.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TREE_WEIGHT: f64 = 10.0;
pub const DEFAULT_TREE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossParams {
    /// Extra weight `k` on tree pixels; total weight is `1 + k`.
    pub tree_weight: f64,
    /// Height threshold `theta` in meters.
    pub tree_threshold: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            tree_weight: DEFAULT_TREE_WEIGHT,
            tree_threshold: DEFAULT_TREE_THRESHOLD,
        }
    }
}

impl LossParams {
    pub fn weight(&self, target: f64) -> f64 {
        if target > self.tree_threshold {
            1.0 + self.tree_weight
        } else {
            1.0
        }
    }
}

fn check_shapes<T>(pred: &[T], target: &[T], mask: &[bool]) -> Result<()> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "pred {}, target {}, mask {}",
            pred.len(),
            target.len(),
            mask.len()
        )));
    }
    Ok(())
}

/// Running numerators and denominators. Merging is plain addition so
/// per-tile accumulators combine into dataset-level metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricAccumulator {
    pub weighted_sq_err: f64,
    pub sq_err: f64,
    pub mask_count: f64,
    pub tree_abs_err: f64,
    pub tree_count: f64,
}

impl MetricAccumulator {
    pub fn add<T: Copy + Into<f64>>(&mut self, pred: &[T], target: &[T], mask: &[bool], params: &LossParams) -> Result<()> {
        check_shapes(pred, target, mask)?;
        for ((&p, &y), &m) in pred.iter().zip(target).zip(mask) {
            if !m {
                continue;
            }
            let (p, y): (f64, f64) = (p.into(), y.into());
            let e = p - y;
            self.mask_count += 1.0;
            self.sq_err += e * e;
            self.weighted_sq_err += params.weight(y) * e * e;
            if y > params.tree_threshold {
                self.tree_count += 1.0;
                self.tree_abs_err += e.abs();
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.weighted_sq_err += other.weighted_sq_err;
        self.sq_err += other.sq_err;
        self.mask_count += other.mask_count;
        self.tree_abs_err += other.tree_abs_err;
        self.tree_count += other.tree_count;
    }

    pub fn wmse(&self) -> Result<f64> {
        if self.mask_count == 0.0 {
            return Err(Error::EmptyMask);
        }
        Ok(self.weighted_sq_err / self.mask_count)
    }

    pub fn mmse(&self) -> Result<f64> {
        if self.mask_count == 0.0 {
            return Err(Error::EmptyMask);
        }
        Ok(self.sq_err / self.mask_count)
    }

    pub fn mmae(&self) -> Result<f64> {
        if self.tree_count == 0.0 {
            return Err(Error::EmptyMask);
        }
        Ok(self.tree_abs_err / self.tree_count)
    }

    pub fn summary(&self) -> MetricSummary {
        MetricSummary {
            wmse: self.wmse().ok(),
            mmse: self.mmse().ok(),
            mmae: self.mmae().ok(),
            valid_pixels: self.mask_count as u64,
            tree_pixels: self.tree_count as u64,
        }
    }
}

/// Metric values; `None` where the relevant mask is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub wmse: Option<f64>,
    pub mmse: Option<f64>,
    pub mmae: Option<f64>,
    pub valid_pixels: u64,
    pub tree_pixels: u64,
}

fn accumulate<T: Copy + Into<f64>>(pred: &[T], target: &[T], mask: &[bool], params: &LossParams) -> Result<MetricAccumulator> {
    let mut acc = MetricAccumulator::default();
    acc.add(pred, target, mask, params)?;
    Ok(acc)
}

/// `sum(m * w * (pred - target)^2) / sum(m)` with `w = 1 + k * [target > theta]`.
pub fn weighted_masked_mse<T: Copy + Into<f64>>(pred: &[T], target: &[T], mask: &[bool], params: &LossParams) -> Result<f64> {
    accumulate(pred, target, mask, params)?.wmse()
}

pub fn masked_mse<T: Copy + Into<f64>>(pred: &[T], target: &[T], mask: &[bool]) -> Result<f64> {
    let params = LossParams {
        tree_weight: 0.0,
        ..LossParams::default()
    };
    accumulate(pred, target, mask, &params)?.mmse()
}

/// Mean absolute error over masked pixels whose target exceeds `theta`.
pub fn masked_mae<T: Copy + Into<f64>>(pred: &[T], target: &[T], mask: &[bool], theta: f64) -> Result<f64> {
    let params = LossParams {
        tree_weight: 0.0,
        tree_threshold: theta,
    };
    accumulate(pred, target, mask, &params)?.mmae()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Confusion {
    TruePositive,
    FalsePositive,
    FalseNegative,
    TrueNegative,
    Invalid,
}

impl Confusion {
    pub fn color(self) -> [u8; 3] {
        match self {
            Confusion::TruePositive => [0, 255, 0],
            Confusion::FalsePositive => [255, 0, 0],
            Confusion::FalseNegative => [0, 0, 255],
            Confusion::TrueNegative => [0, 0, 0],
            Confusion::Invalid => [128, 128, 128],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub invalid: u64,
}

impl ConfusionCounts {
    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
        self.invalid += other.invalid;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMap {
    pub width: usize,
    pub height: usize,
    pub classes: Vec<Confusion>,
    pub counts: ConfusionCounts,
}

pub fn confusion_map<T: Copy + Into<f64>>(
    pred: &[T],
    target: &[T],
    mask: &[bool],
    width: usize,
    theta: f64,
) -> Result<ConfusionMap> {
    check_shapes(pred, target, mask)?;
    if width == 0 || !pred.len().is_multiple_of(width) {
        return Err(Error::ShapeMismatch(format!(
            "{} pixels do not form rows of {width}",
            pred.len()
        )));
    }
    let mut counts = ConfusionCounts::default();
    let classes = pred
        .iter()
        .zip(target)
        .zip(mask)
        .map(|((&p, &y), &m)| {
            if !m {
                counts.invalid += 1;
                Confusion::Invalid
            } else {
                match (p.into() > theta, y.into() > theta) {
                    (true, true) => {
                        counts.tp += 1;
                        Confusion::TruePositive
                    }
                    (true, false) => {
                        counts.fp += 1;
                        Confusion::FalsePositive
                    }
                    (false, true) => {
                        counts.fn_ += 1;
                        Confusion::FalseNegative
                    }
                    (false, false) => {
                        counts.tn += 1;
                        Confusion::TrueNegative
                    }
                }
            }
        })
        .collect();
    Ok(ConfusionMap {
        width,
        height: pred.len() / width,
        classes,
        counts,
    })
}

pub fn render_confusion_png(map: &ConfusionMap, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), map.width as u32, map.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    let data: Vec<u8> = map.classes.iter().flat_map(|c| c.color()).collect();
    writer.write_image_data(&data).map_err(to_io)?;
    writer.finish().map_err(to_io)
}
