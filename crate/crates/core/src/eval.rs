//! VOC2007-style evaluation: greedy matching at IoU 0.5, 11-point
//! interpolated average precision, and the mean over categories.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BBox;
use crate::detect::{iou, Detection};

pub const PROTOCOL: &str = "voc2007-11pt";
pub const DEFAULT_IOU: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("category has no ground-truth boxes")]
    NoGroundTruth,
    #[error("no category could be evaluated")]
    NoCategories,
}

/// Ground truth boxes: category -> image -> boxes.
pub type GroundTruth = BTreeMap<String, BTreeMap<String, Vec<BBox>>>;

pub fn ground_truth<'a>(boxes: impl IntoIterator<Item = (&'a str, &'a str, BBox)>) -> GroundTruth {
    let mut gt = GroundTruth::new();
    for (image, category, b) in boxes {
        gt.entry(category.to_string())
            .or_default()
            .entry(image.to_string())
            .or_default()
            .push(b);
    }
    gt
}

/// Evaluation order: score descending, then image, then box.
pub fn sort_for_eval(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.image.cmp(&b.image))
            .then(a.bbox.cmp(&b.bbox))
    });
}

/// Labels each detection (already in evaluation order) as true (TP) or false
/// (FP). A detection is compared with the best-overlapping ground-truth box in
/// its image; it is a TP when that overlap reaches the threshold and the box
/// has not been claimed yet. Later hits on a claimed box are duplicates (FP).
pub fn match_detections(dets: &[Detection], gts: &BTreeMap<String, Vec<BBox>>, iou_threshold: f64) -> Vec<bool> {
    let mut claimed: BTreeMap<&str, Vec<bool>> = gts.iter().map(|(k, v)| (k.as_str(), vec![false; v.len()])).collect();
    dets.iter()
        .map(|d| {
            let Some(boxes) = gts.get(&d.image) else {
                return false;
            };
            let best = boxes
                .iter()
                .enumerate()
                .map(|(i, g)| (i, iou(&d.bbox, g)))
                .fold(None, |acc: Option<(usize, f64)>, (i, o)| match acc {
                    Some((_, bo)) if bo >= o => acc,
                    _ => Some((i, o)),
                });
            match best {
                Some((i, o)) if o >= iou_threshold => {
                    let flags = claimed.get_mut(d.image.as_str()).unwrap();
                    if flags[i] {
                        false
                    } else {
                        flags[i] = true;
                        true
                    }
                }
                _ => false,
            }
        })
        .collect()
}

/// Mean over recall levels 0, 0.1, ..., 1 of the highest precision reached at
/// or beyond that recall (zero when the level is never reached).
pub fn average_precision_11pt(tp: &[bool], n_gt: usize) -> Result<f64, EvalError> {
    if n_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let mut points = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &is_tp) in tp.iter().enumerate() {
        hits += is_tp as usize;
        points.push((hits as f64 / n_gt as f64, hits as f64 / (k + 1) as f64));
    }
    let total: f64 = (0..=10)
        .map(|i| {
            let level = i as f64 / 10.0;
            points
                .iter()
                .filter(|(recall, _)| *recall >= level)
                .map(|&(_, precision)| precision)
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(total / 11.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub category: String,
    pub ap: f64,
    pub n_gt: usize,
    pub n_det: usize,
    pub n_tp: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub categories: Vec<CategoryResult>,
    pub map: f64,
    pub iou_threshold: f64,
    pub protocol: String,
}

impl EvalReport {
    pub fn ap(&self, category: &str) -> Option<f64> {
        self.categories.iter().find(|c| c.category == category).map(|c| c.ap)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,AP,n_gt,n_det,n_tp\n");
        for c in &self.categories {
            writeln!(out, "{},{},{},{},{}", c.category, fmt4(c.ap), c.n_gt, c.n_det, c.n_tp).unwrap();
        }
        writeln!(out, "mAP,{}", fmt4(self.map)).unwrap();
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Averages per-category APs.
pub fn compute_map(categories: Vec<CategoryResult>, iou_threshold: f64) -> Result<EvalReport, EvalError> {
    if categories.is_empty() {
        return Err(EvalError::NoCategories);
    }
    let map = categories.iter().map(|c| c.ap).sum::<f64>() / categories.len() as f64;
    Ok(EvalReport {
        categories,
        map,
        iou_threshold,
        protocol: PROTOCOL.to_string(),
    })
}

/// Full evaluation of a detection list against ground truth, in the given
/// category order. Categories without ground truth are skipped with a warning.
pub fn evaluate(
    detections: &[Detection],
    gt: &GroundTruth,
    categories: &[String],
    iou_threshold: f64,
) -> Result<EvalReport, EvalError> {
    let empty = BTreeMap::new();
    let mut results = Vec::new();
    for cat in categories {
        let boxes = gt.get(cat).unwrap_or(&empty);
        let n_gt: usize = boxes.values().map(Vec::len).sum();
        let mut dets: Vec<Detection> = detections.iter().filter(|d| &d.category == cat).cloned().collect();
        sort_for_eval(&mut dets);
        let flags = match_detections(&dets, boxes, iou_threshold);
        match average_precision_11pt(&flags, n_gt) {
            Ok(ap) => results.push(CategoryResult {
                category: cat.clone(),
                ap,
                n_gt,
                n_det: dets.len(),
                n_tp: flags.iter().filter(|&&t| t).count(),
            }),
            Err(EvalError::NoGroundTruth) => {
                log::warn!("category {cat:?} has no ground truth; excluded from mAP");
            }
            Err(e) => return Err(e),
        }
    }
    compute_map(results, iou_threshold)
}

/// Four decimals. `format!` rounds the exact binary value with ties to even.
pub fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}
