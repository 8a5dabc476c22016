//! Base training, fine-tuning and evaluation chained into one run.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{Detector, DetectorConfig, DetectorError};
use crate::episodic::{CategorySplit, KShotSubset};
use crate::eval::{build_report, evaluate, ApMode, CategoryAp, Detection, DetectionReport, ReportCounts};
use crate::trainer::{
    class_vectors, finetune, train_base, FinetuneOutcome, TrainError, TrainOptions, TrainOutcome, TrainerConfig,
};
use crate::voc::{generate_synthetic_dataset, shape_palette, CategoryId, DatasetIndex, SyntheticSpec, VocError};

/// Evaluation settings shared by every run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: ApMode,
    pub iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: ApMode::Voc07ElevenPoint,
            iou_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub base: TrainOutcome,
    pub finetune: FinetuneOutcome,
    pub detections: Vec<Detection>,
    /// Per novel category.
    pub aps: Vec<CategoryAp>,
    pub report: DetectionReport,
}

impl PipelineRun {
    /// Mean AP over novel categories with a defined AP, as a fraction.
    pub fn novel_map(&self) -> f64 {
        self.report.map / 100.0
    }
}

/// Detections on every record of `dataset`, in record order.
pub fn detect_all(
    detector: &Detector<f32>,
    classes: &[(CategoryId, crate::nn::Tensor<f32>)],
    dataset: &DatasetIndex,
) -> Result<Vec<Detection>, DetectorError> {
    let per_image = dataset
        .records()
        .par_iter()
        .map(|r| detector.detect(r, classes))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

/// Hex sha256 over the resolved configs, the seed and the datasets' ids.
pub fn run_fingerprint(
    detector: &DetectorConfig,
    trainer: &TrainerConfig,
    eval: &EvalConfig,
    seed: u64,
    datasets: &[&DatasetIndex],
) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_string(detector).expect("serializes"));
    h.update(serde_json::to_string(trainer).expect("serializes"));
    h.update(serde_json::to_string(eval).expect("serializes"));
    h.update(seed.to_le_bytes());
    for d in datasets {
        for r in d.records() {
            h.update(r.id.as_bytes());
            h.update([0]);
        }
        h.update([1]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Detects every category of `split` on `test` using class vectors from
/// `subset` and reports AP per novel category.
pub fn evaluate_novel(
    detector: &Detector<f32>,
    subset: &KShotSubset,
    split: &CategorySplit,
    test: &DatasetIndex,
    method: &str,
    fingerprint: &str,
    eval_cfg: &EvalConfig,
) -> Result<(Vec<Detection>, Vec<CategoryAp>, DetectionReport), TrainError> {
    let classes = class_vectors(detector, subset, &split.all())?;
    let detections = detect_all(detector, &classes, test)?;
    let aps = evaluate(test, &detections, &split.novel, eval_cfg.mode, eval_cfg.iou_threshold);
    let named: Vec<(String, Option<f64>)> = aps
        .iter()
        .map(|a| (test.categories().name(a.category).to_string(), a.ap))
        .collect();
    let counts = ReportCounts {
        images: test.len(),
        gt_boxes: aps.iter().map(|a| a.gt_count).sum(),
        detections: detections.iter().filter(|d| split.is_novel(d.category)).count(),
    };
    let report = build_report(method, &named, fingerprint, counts)?;
    Ok((detections, aps, report))
}

/// Trains on `train`, fine-tunes on a k-shot subset of it and reports AP
/// per novel category on `test`.
#[allow(clippy::too_many_arguments)]
pub fn run_pipeline(
    method: &str,
    train: &DatasetIndex,
    test: &DatasetIndex,
    split: &CategorySplit,
    detector_cfg: &DetectorConfig,
    trainer_cfg: &TrainerConfig,
    eval_cfg: &EvalConfig,
    seed: u64,
) -> Result<PipelineRun, TrainError> {
    let opts = TrainOptions::default();
    let base = train_base(train, split, detector_cfg, trainer_cfg, seed, &opts)?;
    let ft = finetune(&base.checkpoint, train, split, detector_cfg, trainer_cfg, seed, &opts)?;
    let fingerprint = run_fingerprint(detector_cfg, trainer_cfg, eval_cfg, seed, &[train, test]);
    let (detections, aps, report) = evaluate_novel(
        &ft.outcome.detector,
        &ft.subset,
        split,
        test,
        method,
        &fingerprint,
        eval_cfg,
    )?;
    Ok(PipelineRun {
        base,
        finetune: ft,
        detections,
        aps,
        report,
    })
}

pub const DESK_CATEGORIES: [&str; 3] = ["circle", "square", "triangle"];
pub const DESK_NOVEL: &str = "triangle";

/// Two base shapes and one novel shape on plain backgrounds; training and
/// held-out test sets come from independent seeds.
pub fn desk_corpus(
    train_images: usize,
    test_images: usize,
    seed: u64,
) -> Result<(DatasetIndex, DatasetIndex), VocError> {
    let palette = shape_palette(&DESK_CATEGORIES);
    let train = generate_synthetic_dataset(
        &SyntheticSpec::simple(palette.clone(), train_images),
        crate::seed::derive_named(seed, "train"),
    )?;
    let mut test_spec = SyntheticSpec::simple(palette, test_images);
    test_spec.id_prefix = "test_".into();
    let test = generate_synthetic_dataset(&test_spec, crate::seed::derive_named(seed, "test"))?;
    Ok((train, test))
}
