//! Candidate boxes, overlap, per-image detection and non-maximum suppression.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::detector::{DetectorError, LinearModel};
use crate::features::Featurizer;
use crate::raster::RgbImage;

pub const DEFAULT_NMS_THRESHOLD: f64 = 0.3;
pub const DEFAULT_SCORE_FLOOR: f64 = -1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image: String,
    pub category: String,
    pub bbox: BBox,
    pub score: f64,
}

/// Intersection over union of two half-open boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    inter as f64 / (a.area() + b.area() - inter) as f64
}

/// Sliding-window layout used in place of an external proposal method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub scales: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
    pub stride_fraction: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            scales: vec![32.0, 48.0, 64.0, 80.0, 96.0],
            aspect_ratios: vec![0.5, 1.0, 2.0],
            stride_fraction: 0.25,
        }
    }
}

/// Windows of size `(scale*sqrt(r), scale/sqrt(r))` placed every
/// `stride_fraction * scale` pixels. Windows that would cross the border are
/// dropped. Order: scale, ratio, y, x.
pub fn grid_proposals(width: usize, height: usize, spec: &GridSpec) -> Vec<BBox> {
    let mut out = Vec::new();
    for &scale in &spec.scales {
        let stride = spec.stride_fraction * scale;
        if !(scale > 0.0 && stride > 0.0) {
            log::warn!("ignoring non-positive proposal scale {scale} / stride {stride}");
            continue;
        }
        if scale > width.min(height) as f64 {
            log::warn!("proposal scale {scale} exceeds image {width}x{height}; skipped");
            continue;
        }
        for &ratio in &spec.aspect_ratios {
            let bw = (scale * ratio.sqrt()).round() as i64;
            let bh = (scale / ratio.sqrt()).round() as i64;
            if bw < 1 || bh < 1 || bw > width as i64 || bh > height as i64 {
                continue;
            }
            let (free_x, free_y) = ((width as i64 - bw) as f64, (height as i64 - bh) as f64);
            let mut ky = 0usize;
            while ky as f64 * stride <= free_y {
                let y = (ky as f64 * stride).floor() as i32;
                let mut kx = 0usize;
                while kx as f64 * stride <= free_x {
                    let x = (kx as f64 * stride).floor() as i32;
                    out.push(BBox {
                        xmin: x,
                        ymin: y,
                        xmax: x + bw as i32,
                        ymax: y + bh as i32,
                    });
                    kx += 1;
                }
                ky += 1;
            }
        }
    }
    out
}

/// Where candidate regions come from.
#[derive(Clone, Debug)]
pub enum ProposalSource {
    Grid(GridSpec),
    /// Boxes keyed by image id, e.g. imported from a proposals CSV. Images
    /// missing from the map fall back to the grid when one is given.
    External {
        boxes: BTreeMap<String, Vec<BBox>>,
        fallback: Option<GridSpec>,
    },
}

impl ProposalSource {
    pub fn proposals(&self, image_id: &str, width: usize, height: usize) -> Vec<BBox> {
        match self {
            ProposalSource::Grid(spec) => grid_proposals(width, height, spec),
            ProposalSource::External { boxes, fallback } => match (boxes.get(image_id), fallback) {
                (Some(v), _) => v.iter().copied().filter(|b| b.fits(width, height)).collect(),
                (None, Some(spec)) => grid_proposals(width, height, spec),
                (None, None) => Vec::new(),
            },
        }
    }
}

fn rank(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.xmin.cmp(&b.bbox.xmin))
        .then(a.bbox.ymin.cmp(&b.bbox.ymin))
        .then(a.bbox.xmax.cmp(&b.bbox.xmax))
        .then(a.bbox.ymax.cmp(&b.bbox.ymax))
        .then_with(|| a.image.cmp(&b.image))
}

/// Greedy suppression within one category: keep the best remaining box and
/// drop every box overlapping it by more than `threshold`.
pub fn nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut sorted: Vec<&Detection> = dets.iter().collect();
    sorted.sort_by(|a, b| rank(a, b));
    let mut keep: Vec<Detection> = Vec::new();
    for d in sorted {
        if keep.iter().all(|k| iou(&k.bbox, &d.bbox) <= threshold) {
            keep.push(d.clone());
        }
    }
    keep
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectParams {
    pub nms_threshold: f64,
    pub score_floor: f64,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            nms_threshold: DEFAULT_NMS_THRESHOLD,
            score_floor: DEFAULT_SCORE_FLOOR,
        }
    }
}

/// Scores every proposal with every model, keeps scores above the floor and
/// applies NMS per category. Output is grouped by model order, each group
/// sorted by descending score.
pub fn detect_image(
    image_id: &str,
    image: &RgbImage,
    models: &[LinearModel],
    featurizer: &dyn Featurizer,
    proposals: &[BBox],
    params: &DetectParams,
) -> Result<Vec<Detection>, DetectorError> {
    let space = featurizer.space_id();
    if let Some(m) = models.iter().find(|m| m.space_id != space) {
        return Err(DetectorError::SpaceMismatch {
            model: m.space_id.clone(),
            features: space,
        });
    }
    let mut boxes = proposals.to_vec();
    boxes.sort();
    boxes.dedup();
    boxes.retain(|b| b.fits(image.width(), image.height()));

    let scores: Vec<Vec<f64>> = boxes
        .par_iter()
        .map(|b| {
            let v = featurizer.featurize(image_id, image, b)?;
            Ok(models.iter().map(|m| m.decision(&v.values)).collect())
        })
        .collect::<Result<_, DetectorError>>()?;

    let mut out = Vec::new();
    for (mi, model) in models.iter().enumerate() {
        let raw: Vec<Detection> = boxes
            .iter()
            .zip(&scores)
            .filter(|(_, s)| s[mi] > params.score_floor)
            .map(|(b, s)| Detection {
                image: image_id.to_string(),
                category: model.category.clone(),
                bbox: *b,
                score: s[mi],
            })
            .collect();
        out.extend(nms(&raw, params.nms_threshold));
    }
    Ok(out)
}

#[derive(Debug, thiserror::Error)]
pub enum CsvError {
    #[error("line {line}: {reason}")]
    BadRow { line: usize, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn parse_box(line: usize, fields: &[&str]) -> Result<BBox, CsvError> {
    let mut v = [0i32; 4];
    for (slot, f) in v.iter_mut().zip(fields) {
        *slot = f.trim().parse().map_err(|_| CsvError::BadRow {
            line,
            reason: format!("non-integer coordinate {f:?}"),
        })?;
    }
    BBox::new(v[0], v[1], v[2], v[3]).ok_or_else(|| CsvError::BadRow {
        line,
        reason: format!("invalid box {v:?}"),
    })
}

/// Reads `image,xmin,ymin,xmax,ymax` rows (with header) into per-image lists.
pub fn read_proposals_csv(reader: impl Read) -> Result<BTreeMap<String, Vec<BBox>>, CsvError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut out: BTreeMap<String, Vec<BBox>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != 5 {
            return Err(CsvError::BadRow {
                line,
                reason: format!("expected 5 fields, got {}", rec.len()),
            });
        }
        let fields: Vec<&str> = rec.iter().collect();
        out.entry(fields[0].to_string()).or_default().push(parse_box(line, &fields[1..])?);
    }
    Ok(out)
}

/// Writes `image,category,xmin,ymin,xmax,ymax,score` with six-decimal scores.
pub fn write_detections_csv(mut w: impl Write, dets: &[Detection]) -> std::io::Result<()> {
    writeln!(w, "image,category,xmin,ymin,xmax,ymax,score")?;
    for d in dets {
        writeln!(
            w,
            "{},{},{},{},{},{},{:.6}",
            d.image, d.category, d.bbox.xmin, d.bbox.ymin, d.bbox.xmax, d.bbox.ymax, d.score
        )?;
    }
    Ok(())
}

pub fn read_detections_csv(reader: impl Read) -> Result<Vec<Detection>, CsvError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != 7 {
            return Err(CsvError::BadRow {
                line,
                reason: format!("expected 7 fields, got {}", rec.len()),
            });
        }
        let fields: Vec<&str> = rec.iter().collect();
        let score = fields[6].trim().parse::<f64>().map_err(|_| CsvError::BadRow {
            line,
            reason: format!("bad score {:?}", fields[6]),
        })?;
        out.push(Detection {
            image: fields[0].to_string(),
            category: fields[1].to_string(),
            bbox: parse_box(line, &fields[2..6])?,
            score,
        });
    }
    Ok(out)
}
