//! VOC-protocol evaluation: IoU, greedy matching, average precision, reports.

mod detfile;
mod report;

pub use detfile::{parse_detections, write_detections};
pub use report::{build_report, format_comparison, DetectionReport, ReportCounts};

use std::cmp::Ordering;
use std::collections::BTreeMap;

use num_traits::Float;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::voc::{BoundingBox, CategoryId, DatasetIndex};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("report needs at least one category with a defined AP")]
    Empty,
    #[error("detections line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Intersection over union with exclusive max coordinates.
pub fn iou<T: Float + std::fmt::Debug>(a: &BoundingBox<T>, b: &BoundingBox<T>) -> T {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        T::zero()
    } else {
        inter / union
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub category: CategoryId,
    pub confidence: f64,
    pub bbox: BoundingBox,
}

/// Ground-truth boxes of one category for one image: `(box, difficult)`.
pub type GroundTruth = BTreeMap<String, Vec<(BoundingBox, bool)>>;

pub fn ground_truth_for(dataset: &DatasetIndex, category: CategoryId) -> GroundTruth {
    dataset
        .records()
        .iter()
        .map(|r| {
            let boxes = r
                .annotations
                .iter()
                .filter(|a| a.category == category)
                .map(|a| (a.bbox, a.ignored))
                .collect();
            (r.id.clone(), boxes)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchOutcome {
    TruePositive {
        gt_index: usize,
    },
    FalsePositive,
    /// Matched a difficult box; counts as neither.
    Ignored,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchedDetection {
    pub image_id: String,
    pub confidence: f64,
    pub bbox: BoundingBox,
    pub outcome: MatchOutcome,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// In processing order (descending confidence).
    pub detections: Vec<MatchedDetection>,
    /// Non-difficult ground-truth boxes.
    pub gt_count: usize,
}

/// Descending confidence, then box lexicographic order, then image id.
pub fn ranking_order(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .partial_cmp(&a.confidence)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.bbox.lex_cmp(&b.bbox))
        .then_with(|| a.image_id.cmp(&b.image_id))
}

/// Greedy VOC matching for one category. Each detection takes the
/// highest-IoU unmatched non-difficult box at or above `threshold`; failing
/// that, overlap with a difficult box makes it ignored, otherwise it is a
/// false positive.
pub fn match_detections(detections: &[Detection], ground_truth: &GroundTruth, threshold: f64) -> MatchResult {
    let mut sorted: Vec<&Detection> = detections.iter().collect();
    sorted.sort_by(|a, b| ranking_order(a, b));
    let mut taken: BTreeMap<&str, Vec<bool>> = ground_truth
        .iter()
        .map(|(id, boxes)| (id.as_str(), vec![false; boxes.len()]))
        .collect();
    let empty = Vec::new();
    let out = sorted
        .into_iter()
        .map(|d| {
            let gts = ground_truth.get(&d.image_id).unwrap_or(&empty);
            let mut best: Option<(usize, f64)> = None;
            let mut hits_difficult = false;
            for (j, (g, difficult)) in gts.iter().enumerate() {
                let o = iou(&d.bbox, g);
                if o < threshold {
                    continue;
                }
                if *difficult {
                    hits_difficult = true;
                } else if !taken[d.image_id.as_str()][j] && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            let outcome = match best {
                Some((j, _)) => {
                    taken.get_mut(d.image_id.as_str()).unwrap()[j] = true;
                    MatchOutcome::TruePositive { gt_index: j }
                }
                None if hits_difficult => MatchOutcome::Ignored,
                None => MatchOutcome::FalsePositive,
            };
            MatchedDetection {
                image_id: d.image_id.clone(),
                confidence: d.confidence,
                bbox: d.bbox,
                outcome,
            }
        })
        .collect();
    MatchResult {
        detections: out,
        gt_count: ground_truth
            .values()
            .flatten()
            .filter(|(_, difficult)| !difficult)
            .count(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    Voc07ElevenPoint,
    AllPoint,
}

impl ApMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "voc07" | "voc07_11point" | "11point" => Some(Self::Voc07ElevenPoint),
            "all_point" | "allpoint" => Some(Self::AllPoint),
            _ => None,
        }
    }
}

/// Precision/recall after each counted detection.
pub fn pr_curve(result: &MatchResult) -> Vec<(f64, f64)> {
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut out = Vec::new();
    for d in &result.detections {
        match d.outcome {
            MatchOutcome::TruePositive { .. } => tp += 1,
            MatchOutcome::FalsePositive => fp += 1,
            MatchOutcome::Ignored => continue,
        }
        out.push((tp as f64 / result.gt_count as f64, tp as f64 / (tp + fp) as f64));
    }
    out
}

/// `None` when the category has no non-difficult ground truth.
pub fn average_precision(result: &MatchResult, mode: ApMode) -> Option<f64> {
    if result.gt_count == 0 {
        return None;
    }
    let curve = pr_curve(result);
    Some(match mode {
        ApMode::Voc07ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let r = t as f64 / 10.0;
                    curve
                        .iter()
                        .filter(|(rec, _)| *rec >= r)
                        .map(|&(_, p)| p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
        ApMode::AllPoint => {
            let mut rec = vec![0.0];
            let mut prec = vec![0.0];
            for &(r, p) in &curve {
                rec.push(r);
                prec.push(p);
            }
            rec.push(1.0);
            prec.push(0.0);
            for i in (0..prec.len() - 1).rev() {
                prec[i] = prec[i].max(prec[i + 1]);
            }
            (1..rec.len()).map(|i| (rec[i] - rec[i - 1]) * prec[i]).sum()
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryAp {
    pub category: CategoryId,
    pub ap: Option<f64>,
    pub gt_count: usize,
    pub detections: usize,
}

/// Per-category AP over the records of `ground_truth`; detections on images
/// outside it are dropped.
pub fn evaluate(
    ground_truth: &DatasetIndex,
    detections: &[Detection],
    categories: &[CategoryId],
    mode: ApMode,
    iou_threshold: f64,
) -> Vec<CategoryAp> {
    categories
        .par_iter()
        .map(|&c| {
            let gt = ground_truth_for(ground_truth, c);
            let dets: Vec<Detection> = detections
                .iter()
                .filter(|d| d.category == c && gt.contains_key(&d.image_id))
                .cloned()
                .collect();
            let m = match_detections(&dets, &gt, iou_threshold);
            CategoryAp {
                category: c,
                ap: average_precision(&m, mode),
                gt_count: m.gt_count,
                detections: dets.len(),
            }
        })
        .collect()
}
