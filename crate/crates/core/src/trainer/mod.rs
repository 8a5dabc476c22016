//! Two-stage training: episodic base training on base categories, then
//! fine-tuning on a k-shot subset of all categories.

mod checkpoint;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::detector::{build_targets, image_tensor, support_tensor, Detector, DetectorConfig, DetectorError, Targets};
use crate::episodic::{build_kshot_subset, CategorySplit, EpisodicError, KShotSubset, TaskSampler};
use crate::nn::{clip_grad_norm, NnError, Sgd, Tape, Tensor};
use crate::seed::{derive, derive_named};
use crate::voc::{BoundingBox, CategoryId, DatasetIndex, ImageRecord};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint was written for {what} {found}, expected {expected}")]
    Mismatch {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("non-finite value in {stage} iteration {iteration}; batch manifest:\n{manifest}")]
    NonFinite {
        stage: Stage,
        iteration: u64,
        manifest: String,
    },
    #[error(transparent)]
    Episodic(#[from] EpisodicError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("evaluation: {0}")]
    Eval(#[from] crate::eval::EvalError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Base = 0,
    Finetune = 1,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Base => "base",
            Stage::Finetune => "finetune",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub base_iterations: u64,
    pub finetune_iterations: u64,
    #[serde(rename = "lr")]
    pub learning_rate: f64,
    #[serde(rename = "finetune_lr")]
    pub finetune_learning_rate: f64,
    pub momentum: f64,
    /// Query images per step.
    pub batch_size: usize,
    /// Categories per base task; 0 uses every base category.
    pub categories_per_task: usize,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
    pub k: usize,
    /// Exemplars per category embedded at each fine-tuning step; 0 uses all.
    pub exemplars_per_step: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            base_iterations: 2000,
            finetune_iterations: 400,
            learning_rate: 2e-3,
            finetune_learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 4,
            categories_per_task: 0,
            grad_clip: 10.0,
            k: 10,
            exemplars_per_step: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.batch_size == 0 || self.k == 0 {
            return bad("batch_size and k must be positive");
        }
        if self.finetune_iterations >= self.base_iterations && self.base_iterations > 0 {
            return bad("finetune_iterations must be below base_iterations");
        }
        for v in [
            self.learning_rate,
            self.finetune_learning_rate,
            self.momentum,
            self.grad_clip,
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad("rates, momentum and grad_clip must be finite and nonnegative");
            }
        }
        if self.momentum >= 1.0 {
            return bad("momentum must be below 1");
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: u64,
    pub total: f64,
    pub class_ce: f64,
    pub box_reg: f64,
    pub objectness: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("iteration,total,class_ce,box_reg,objectness\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.iteration, r.total, r.class_ce, r.box_reg, r.objectness
        )
        .unwrap();
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from a checkpoint of the same stage.
    pub resume: Option<Checkpoint>,
    /// Stop after this many completed iterations of the stage.
    pub stop_after: Option<u64>,
    pub checkpoint_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub detector: Detector<f32>,
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
}

/// Records holding at least one usable base box and no novel box.
pub fn base_training_set(dataset: &DatasetIndex, split: &CategorySplit) -> DatasetIndex {
    dataset.filter(|r| {
        split.base.iter().any(|&c| r.has_category(c)) && !r.annotations.iter().any(|a| split.is_novel(a.category))
    })
}

struct Trainer<'a> {
    stage: Stage,
    seed: u64,
    detector: Detector<f32>,
    sgd: Sgd<f32>,
    cfg: &'a TrainerConfig,
    start: u64,
    end: u64,
    opts: &'a TrainOptions,
    trace: Vec<TraceRow>,
}

impl<'a> Trainer<'a> {
    fn new(
        stage: Stage,
        detector: Detector<f32>,
        cfg: &'a TrainerConfig,
        seed: u64,
        opts: &'a TrainOptions,
    ) -> Result<Self, TrainError> {
        let (lr, total) = match stage {
            Stage::Base => (cfg.learning_rate, cfg.base_iterations),
            Stage::Finetune => (cfg.finetune_learning_rate, cfg.finetune_iterations),
        };
        let mut t = Self {
            stage,
            seed,
            sgd: Sgd::new(lr as f32, cfg.momentum as f32),
            detector,
            cfg,
            start: 0,
            end: total,
            opts,
            trace: Vec::new(),
        };
        if let Some(ck) = &opts.resume {
            t.check(ck, stage)?;
            if ck.trainer_hash != cfg.hash() {
                return Err(TrainError::Mismatch {
                    what: "trainer config",
                    expected: cfg.hash(),
                    found: ck.trainer_hash.clone(),
                });
            }
            if ck.seed != seed {
                return Err(TrainError::Mismatch {
                    what: "seed",
                    expected: seed.to_string(),
                    found: ck.seed.to_string(),
                });
            }
            t.detector = Detector::from_params(t.detector.config().clone(), ck.params.clone())?;
            if let Some(v) = &ck.velocity {
                t.sgd.set_velocity(v.clone());
            }
            t.start = ck.iteration.min(total);
        }
        if let Some(stop) = opts.stop_after {
            t.end = t.end.min(stop.max(t.start));
        }
        Ok(t)
    }

    fn check(&self, ck: &Checkpoint, stage: Stage) -> Result<(), TrainError> {
        if ck.stage != stage {
            return Err(TrainError::Mismatch {
                what: "stage",
                expected: stage.to_string(),
                found: ck.stage.to_string(),
            });
        }
        let hash = self.detector.config().hash();
        if ck.detector_hash != hash {
            return Err(TrainError::Mismatch {
                what: "detector config",
                expected: hash,
                found: ck.detector_hash.clone(),
            });
        }
        Ok(())
    }

    fn step(
        &mut self,
        iteration: u64,
        supports: &[Vec<Tensor<f32>>],
        queries: &[(Tensor<f32>, Targets<f32>)],
        manifest: impl FnOnce() -> String,
    ) -> Result<(), TrainError> {
        let result = (|| -> Result<[f64; 4], DetectorError> {
            let mut tape = Tape::new();
            let bound = self.detector.bind(&mut tape)?;
            let l = self.detector.episode_loss(&mut tape, &bound, supports, queries)?;
            let scalar = |v| tape.value(v).item().map_or(f64::NAN, |x: f32| x as f64);
            let values = [
                scalar(l.total),
                scalar(l.class_ce),
                scalar(l.box_reg),
                scalar(l.objectness),
            ];
            tape.backward(l.total, self.detector.params_mut())?;
            Ok(values)
        })();
        let values = match result {
            Ok(v) => v,
            Err(DetectorError::Nn(NnError::NonFinite { .. })) => {
                return Err(TrainError::NonFinite {
                    stage: self.stage,
                    iteration,
                    manifest: manifest(),
                })
            }
            Err(e) => return Err(e.into()),
        };
        if self.cfg.grad_clip > 0.0 {
            let norm = clip_grad_norm(self.detector.params_mut(), self.cfg.grad_clip as f32);
            if !norm.is_finite() {
                return Err(TrainError::NonFinite {
                    stage: self.stage,
                    iteration,
                    manifest: manifest(),
                });
            }
        }
        self.sgd.step(self.detector.params_mut());
        self.trace.push(TraceRow {
            iteration,
            total: values[0],
            class_ce: values[1],
            box_reg: values[2],
            objectness: values[3],
        });
        let done = iteration + 1;
        if self.opts.checkpoint_every > 0 && done.is_multiple_of(self.opts.checkpoint_every) {
            if let Some(dir) = &self.opts.checkpoint_dir {
                std::fs::create_dir_all(dir).map_err(NnError::from)?;
                self.checkpoint(done)
                    .save(&dir.join(format!("{}_{done:06}.ckpt", self.stage)))?;
            }
        }
        Ok(())
    }

    fn checkpoint(&self, iteration: u64) -> Checkpoint {
        Checkpoint {
            stage: self.stage,
            iteration,
            seed: self.seed,
            detector_hash: self.detector.config().hash(),
            trainer_hash: self.cfg.hash(),
            params: self.detector.params().clone(),
            velocity: (!self.sgd.velocity().is_empty()).then(|| self.sgd.velocity().to_vec()),
        }
    }

    fn finish(self) -> TrainOutcome {
        let checkpoint = self.checkpoint(self.end);
        TrainOutcome {
            detector: self.detector,
            checkpoint,
            trace: self.trace,
        }
    }
}

fn annotated_box(record: &ImageRecord, index: usize) -> BoundingBox {
    record.annotations[index].bbox
}

/// Episodic base training over the base categories. Each iteration samples
/// a task from a stream keyed by `(seed, iteration)`, so a resumed run sees
/// the same tasks as an uninterrupted one.
pub fn train_base(
    dataset: &DatasetIndex,
    split: &CategorySplit,
    detector_cfg: &DetectorConfig,
    cfg: &TrainerConfig,
    seed: u64,
    opts: &TrainOptions,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let base = base_training_set(dataset, split);
    let sampler = TaskSampler::new(&base, &split.base)?;
    let per_task = match cfg.categories_per_task {
        0 => split.base.len(),
        n => n.min(split.base.len()),
    };
    let detector = Detector::new(detector_cfg.clone(), derive_named(seed, "init"))?;
    let mut t = Trainer::new(Stage::Base, detector, cfg, seed, opts)?;
    let stream = derive_named(seed, "base");
    let size = detector_cfg.input_size;
    for it in t.start..t.end {
        let task = sampler.sample(per_task, cfg.batch_size, derive(stream, it))?;
        let supports = task
            .support
            .iter()
            .map(|s| {
                Ok(vec![support_tensor(
                    &s.record,
                    &annotated_box(&s.record, s.box_index),
                    size,
                )?])
            })
            .collect::<Result<Vec<_>, DetectorError>>()?;
        let queries = task
            .query
            .iter()
            .map(|q| Ok((image_tensor(q, size), build_targets(q, &task.categories, detector_cfg)?)))
            .collect::<Result<Vec<_>, DetectorError>>()?;
        t.step(it, &supports, &queries, || task.manifest(&base).unwrap_or_default())?;
    }
    Ok(t.finish())
}

/// Usable boxes of `category` in a k-shot subset, as `(record, box)`.
pub fn exemplars(subset: &KShotSubset, category: CategoryId) -> Vec<(Arc<ImageRecord>, BoundingBox)> {
    subset
        .records
        .iter()
        .flat_map(|r| {
            r.annotations
                .iter()
                .filter(move |a| a.category == category && !a.ignored)
                .map(move |a| (Arc::clone(r), a.bbox))
        })
        .collect()
}

/// Mean reweighting vector per category over its k-shot exemplars.
pub fn class_vectors(
    detector: &Detector<f32>,
    subset: &KShotSubset,
    categories: &[CategoryId],
) -> Result<Vec<(CategoryId, Tensor<f32>)>, TrainError> {
    categories
        .iter()
        .map(|&c| {
            let ex = exemplars(subset, c);
            let refs: Vec<(&ImageRecord, BoundingBox)> = ex.iter().map(|(r, b)| (r.as_ref(), *b)).collect();
            Ok((c, detector.class_vector(&refs)?))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub outcome: TrainOutcome,
    pub subset: KShotSubset,
}

/// Fine-tunes a base checkpoint on a k-shot subset over base + novel
/// categories. Reweighting vectors are recomputed at every step from the
/// exemplars of each category.
pub fn finetune(
    base: &Checkpoint,
    dataset: &DatasetIndex,
    split: &CategorySplit,
    detector_cfg: &DetectorConfig,
    cfg: &TrainerConfig,
    seed: u64,
    opts: &TrainOptions,
) -> Result<FinetuneOutcome, TrainError> {
    cfg.validate()?;
    let detector = Detector::from_params(detector_cfg.clone(), base.params.clone())?;
    let mut t = Trainer::new(Stage::Finetune, detector, cfg, seed, opts)?;
    t.check(base, Stage::Base)?;

    let categories = split.all();
    let subset = build_kshot_subset(dataset, &categories, cfg.k, derive_named(seed, "kshot"))?;
    if !subset.is_exact() {
        return Err(TrainError::InvalidConfig(format!(
            "k-shot subset is not exactly {}-shot",
            cfg.k
        )));
    }
    let size = detector_cfg.input_size;
    let support_pool = categories
        .iter()
        .map(|&c| {
            exemplars(&subset, c)
                .iter()
                .map(|(r, b)| support_tensor(r, b, size))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, DetectorError>>()?;
    let query_pool = subset
        .records
        .iter()
        .map(|r| Ok((image_tensor(r, size), build_targets(r, &categories, detector_cfg)?)))
        .collect::<Result<Vec<_>, DetectorError>>()?;

    let stream = derive_named(seed, "finetune");
    for it in t.start..t.end {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(stream, it));
        let supports: Vec<Vec<Tensor<f32>>> = if cfg.exemplars_per_step == 0 {
            support_pool.clone()
        } else {
            support_pool
                .iter()
                .map(|p| {
                    p.choose_multiple(&mut rng, cfg.exemplars_per_step.min(p.len()))
                        .cloned()
                        .collect()
                })
                .collect()
        };
        let picks: Vec<usize> =
            rand::seq::index::sample(&mut rng, query_pool.len(), cfg.batch_size.min(query_pool.len()))
                .into_iter()
                .collect();
        let queries: Vec<_> = picks.iter().map(|&i| query_pool[i].clone()).collect();
        let manifest = || {
            let mut m = format!("finetune iteration {it}\n");
            for &i in &picks {
                writeln!(m, "query {}", subset.records[i].id).unwrap();
            }
            m
        };
        t.step(it, &supports, &queries, manifest)?;
    }
    Ok(FinetuneOutcome {
        outcome: t.finish(),
        subset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodic::{make_split, SplitMode};
    use crate::voc::{generate_synthetic_dataset, shape_palette, SyntheticSpec};

    fn small() -> (DatasetIndex, CategorySplit, DetectorConfig) {
        let mut spec = SyntheticSpec::simple(shape_palette(&["a", "b", "c"]), 30);
        spec.width = 32;
        spec.height = 32;
        spec.object_size = [8, 14];
        let ds = generate_synthetic_dataset(&spec, 1).unwrap();
        let split = make_split(ds.categories(), &SplitMode::Novel(vec!["c".into()]), 0).unwrap();
        let det = DetectorConfig {
            input_size: 32,
            widths: vec![4, 8],
            meta_channels: 8,
            ..DetectorConfig::default()
        };
        (ds, split, det)
    }

    fn cfg(base: u64, ft: u64) -> TrainerConfig {
        TrainerConfig {
            base_iterations: base,
            finetune_iterations: ft,
            batch_size: 2,
            k: 2,
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn zero_lr_keeps_init() {
        let (ds, split, det) = small();
        let c = TrainerConfig {
            learning_rate: 0.0,
            ..cfg(10, 1)
        };
        let out = train_base(&ds, &split, &det, &c, 3, &TrainOptions::default()).unwrap();
        let init = Detector::<f32>::new(det, derive_named(3, "init")).unwrap();
        assert_eq!(out.detector.params().to_bytes(), init.params().to_bytes());
        assert_eq!(out.trace.len(), 10);
        assert!(out
            .trace
            .iter()
            .all(|r| r.class_ce >= 0.0 && r.box_reg >= 0.0 && r.objectness >= 0.0));
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (ds, split, det) = small();
        let c = cfg(8, 4);
        let full = train_base(&ds, &split, &det, &c, 5, &TrainOptions::default()).unwrap();
        let half = train_base(
            &ds,
            &split,
            &det,
            &c,
            5,
            &TrainOptions {
                stop_after: Some(3),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(half.checkpoint.iteration, 3);
        let bytes = half.checkpoint.to_bytes();
        let resumed = train_base(
            &ds,
            &split,
            &det,
            &c,
            5,
            &TrainOptions {
                resume: Some(Checkpoint::from_bytes(&bytes).unwrap()),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(resumed.checkpoint.to_bytes(), full.checkpoint.to_bytes());
        assert_eq!(&full.trace[3..], &resumed.trace[..]);

        let ft = finetune(&full.checkpoint, &ds, &split, &det, &c, 5, &TrainOptions::default()).unwrap();
        assert!(ft.subset.is_exact());
        assert_eq!(ft.outcome.checkpoint.stage, Stage::Finetune);
        // a finetune checkpoint is not a valid base for finetuning
        assert!(matches!(
            finetune(
                &ft.outcome.checkpoint,
                &ds,
                &split,
                &det,
                &c,
                5,
                &TrainOptions::default()
            ),
            Err(TrainError::Mismatch { what: "stage", .. })
        ));
    }

    #[test]
    fn zero_finetune_iterations_keep_params() {
        let (ds, split, det) = small();
        let c = cfg(2, 0);
        let base = train_base(&ds, &split, &det, &c, 1, &TrainOptions::default()).unwrap();
        let ft = finetune(&base.checkpoint, &ds, &split, &det, &c, 1, &TrainOptions::default()).unwrap();
        assert_eq!(
            ft.outcome.detector.params().to_bytes(),
            base.checkpoint.params.to_bytes()
        );
    }

    #[test]
    fn hash_mismatch_rejected() {
        let (ds, split, det) = small();
        let c = cfg(2, 1);
        let base = train_base(&ds, &split, &det, &c, 1, &TrainOptions::default()).unwrap();
        let other = DetectorConfig { nms_iou: 0.3, ..det };
        assert!(matches!(
            finetune(&base.checkpoint, &ds, &split, &other, &c, 1, &TrainOptions::default()),
            Err(TrainError::Mismatch {
                what: "detector config",
                ..
            })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(cfg(10, 10).validate().is_err());
        assert!(TrainerConfig {
            batch_size: 0,
            ..TrainerConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainerConfig::default().validate().is_ok());
    }
}
