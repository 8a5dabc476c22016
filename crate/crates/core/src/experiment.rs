//! Strategy comparisons: every augmentation strategy run through the full
//! pipeline on the same data and seeds, consolidated into one table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::augment::{
    apply_strategy, AugmentError, AugmentInputs, AugmentationKind, AugmentationStrategy, RegionRecord,
};
use crate::detector::DetectorConfig;
use crate::episodic::{make_split, CategorySplit, EpisodicError, SplitMode};
use crate::eval::{format_comparison, write_detections};
use crate::pipeline::{run_pipeline, EvalConfig, PipelineRun};
use crate::seed::derive_named;
use crate::trainer::{trace_csv, TrainError, TrainerConfig};
use crate::voc::{
    generate_synthetic_dataset, load_dataset, shape_palette, BackgroundStyle, ClutterStyle, DatasetIndex, ImageRecord,
    LayoutConfig, SyntheticSpec, VocError,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error("{strategy} seed {seed}: {source}")]
    Cell {
        strategy: String,
        seed: u64,
        #[source]
        source: Box<ExperimentError>,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Episodic(#[from] EpisodicError),
    #[error(transparent)]
    Voc(#[from] VocError),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Synthetic context gap: base categories on a plain source background,
/// novel categories only in a cluttered target scene with unannotated
/// distractor shapes. Test images come from the target scene.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftScenario {
    pub categories: Vec<String>,
    pub novel: Vec<String>,
    pub source_images: usize,
    pub target_images: usize,
    pub test_images: usize,
    /// Object-free target-scene images, used as replacement backgrounds and
    /// as target-background regions.
    pub background_images: usize,
    pub source_background: [u8; 3],
    pub target_background: [u8; 3],
    pub distractors: [usize; 2],
    pub seed: u64,
}

impl Default for ShiftScenario {
    fn default() -> Self {
        Self {
            categories: ["red-circle", "blue-square", "yellow-triangle", "green-circle"]
                .map(String::from)
                .to_vec(),
            novel: vec!["green-circle".into()],
            source_images: 200,
            target_images: 40,
            test_images: 60,
            background_images: 40,
            source_background: [110, 110, 110],
            target_background: [70, 115, 60],
            distractors: [2, 4],
            seed: 0,
        }
    }
}

/// The data a strategy comparison runs on.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: DatasetIndex,
    pub test: DatasetIndex,
    pub split: CategorySplit,
    pub backgrounds: Vec<Arc<ImageRecord>>,
    pub regions: Vec<RegionRecord>,
}

impl ShiftScenario {
    fn clutter(&self) -> ClutterStyle {
        ClutterStyle {
            distractors: self.distractors,
            scale: 1.0,
            fade: 0.45,
        }
    }

    fn spec(&self, images: usize, active: &[String], target: bool, prefix: &str) -> SyntheticSpec {
        let mut s = SyntheticSpec::simple(shape_palette(&self.categories), images);
        s.active = active.to_vec();
        s.id_prefix = prefix.into();
        if target {
            s.background = BackgroundStyle {
                color: self.target_background,
                noise: 16,
            };
            s.clutter = Some(self.clutter());
        } else {
            s.background.color = self.source_background;
        }
        s
    }

    pub fn build(&self) -> Result<ExperimentData, ExperimentError> {
        if self.novel.is_empty() || self.novel.iter().any(|n| !self.categories.contains(n)) {
            return Err(ExperimentError::Invalid(
                "novel categories must be a nonempty subset of categories".into(),
            ));
        }
        let base: Vec<String> = self
            .categories
            .iter()
            .filter(|c| !self.novel.contains(c))
            .cloned()
            .collect();
        let seed = |label| derive_named(self.seed, label);
        let source =
            generate_synthetic_dataset(&self.spec(self.source_images, &base, false, "source_"), seed("source"))?;
        let target = generate_synthetic_dataset(
            &self.spec(self.target_images, &self.novel, true, "target_"),
            seed("target"),
        )?;
        let test = generate_synthetic_dataset(&self.spec(self.test_images, &[], true, "test_"), seed("test"))?;

        let mut empty = self.spec(self.background_images, &[], true, "scene_");
        empty.objects_per_image = [0, 0];
        let backgrounds = generate_synthetic_dataset(&empty, seed("scene"))?.records().to_vec();

        // Region boxes sit on shapes drawn like the distractors.
        let clutter = self.clutter();
        let mut regions_spec = self.spec(self.background_images, &[], true, "region_");
        for c in &mut regions_spec.categories {
            for (v, bg) in c.color.iter_mut().zip(self.target_background) {
                *v = (*v as f64 * (1.0 - clutter.fade) + bg as f64 * clutter.fade).round() as u8;
            }
        }
        let regions = generate_synthetic_dataset(&regions_spec, seed("region"))?
            .records()
            .iter()
            .map(|r| RegionRecord::from_annotated(r))
            .collect();

        let train = source.merge(&target)?;
        let split = make_split(train.categories(), &SplitMode::Novel(self.novel.clone()), 0)?;
        Ok(ExperimentData {
            train,
            test,
            split,
            backgrounds,
            regions,
        })
    }
}

/// On-disk data in the VOC layout. Background records are object-free
/// images; their annotation boxes, if any, serve as target-background regions.
#[derive(Clone, Debug, PartialEq)]
pub struct DiskSource {
    pub train: PathBuf,
    pub test: PathBuf,
    pub backgrounds: Option<PathBuf>,
    pub split: SplitMode,
    pub layout: LayoutConfig,
}

impl DiskSource {
    pub fn build(&self, seed: u64) -> Result<ExperimentData, ExperimentError> {
        let train = load_dataset(&self.train, &self.layout)?.index;
        let layout = LayoutConfig {
            registry: Some(train.categories().clone()),
            ..self.layout.clone()
        };
        let test = load_dataset(&self.test, &layout)?.index;
        let (backgrounds, regions) = match &self.backgrounds {
            None => (Vec::new(), Vec::new()),
            Some(p) => {
                let bg = load_dataset(p, &layout)?.index;
                let regions = bg
                    .records()
                    .iter()
                    .filter(|r| !r.annotations.is_empty())
                    .map(|r| RegionRecord::from_annotated(r))
                    .collect();
                (bg.records().to_vec(), regions)
            }
        };
        let split = make_split(train.categories(), &self.split, seed)?;
        Ok(ExperimentData {
            train,
            test,
            split,
            backgrounds,
            regions,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Shift(ShiftScenario),
    Disk(DiskSource),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub source: DataSource,
    pub strategies: Vec<AugmentationKind>,
    /// Parameters shared by all strategies; `kind` is ignored.
    pub strategy: AugmentationStrategy,
    pub seeds: Vec<u64>,
    pub detector: DetectorConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
}

impl ExperimentSpec {
    /// The desk-scale shift scenario over all five strategies, with the
    /// novel category excluded from photometric changes.
    pub fn shift_default() -> Self {
        let scenario = ShiftScenario::default();
        let strategy = AugmentationStrategy {
            exclude_categories: scenario.novel.clone(),
            replaced_category: "yellow-triangle".into(),
            ..AugmentationStrategy::default()
        };
        Self {
            source: DataSource::Shift(scenario),
            strategies: AugmentationKind::ALL.to_vec(),
            strategy,
            seeds: vec![0],
            detector: DetectorConfig::default(),
            trainer: TrainerConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.strategies.is_empty() {
            return Err(ExperimentError::Invalid("strategy list is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(ExperimentError::Invalid("at least one seed is required".into()));
        }
        self.strategy.validate()?;
        self.detector.validate().map_err(TrainError::from)?;
        self.trainer.validate()?;
        Ok(())
    }
}

/// Row label in the comparison table.
pub fn row_label(kind: AugmentationKind) -> String {
    match kind {
        AugmentationKind::None => "FS-FRW".into(),
        k => format!("+{}", k.label().to_uppercase()),
    }
}

#[derive(Clone, Debug)]
pub struct Cell {
    pub strategy: AugmentationKind,
    pub seed: u64,
    pub run: PipelineRun,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub cells: Vec<Cell>,
    /// `(row label, mean novel mAP % over seeds)` in strategy order.
    pub rows: Vec<(String, f64)>,
    pub data: ExperimentData,
}

impl ExperimentResult {
    pub fn table(&self) -> String {
        format_comparison(&self.rows)
    }

    /// Observed ordering of the rows next to the reference ordering
    /// ATB > BR > baseline > CA > IA. Informational only.
    pub fn observation(&self) -> String {
        let mut sorted = self.rows.clone();
        sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let order: Vec<&str> = sorted.iter().map(|(l, _)| l.as_str()).collect();
        let mut out = format!("observed ordering: {}\n", order.join(" > "));
        out.push_str("reference ordering: +ATB > +BR > FS-FRW > +CA > +IA\n");
        let get = |l: &str| self.rows.iter().find(|(r, _)| r == l).map(|(_, v)| *v);
        if let (Some(atb), Some(base)) = (get("+ATB"), get("FS-FRW")) {
            let verdict = if atb > base {
                "above"
            } else if atb < base {
                "below"
            } else {
                "equal to"
            };
            writeln!(out, "+ATB vs FS-FRW: {:+.2} mAP ({verdict} baseline)", atb - base).unwrap();
        }
        out
    }

    /// Writes per-cell artifacts and the consolidated table under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), ExperimentError> {
        let write = |path: PathBuf, contents: &[u8]| {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|source| ExperimentError::Io {
                    path: parent.to_path_buf(),
                    source,
                })?;
            }
            std::fs::write(&path, contents).map_err(|source| ExperimentError::Io { path, source })
        };
        let registry = self.data.train.categories();
        for cell in &self.cells {
            let d = dir.join(format!("{}_seed{}", cell.strategy.label(), cell.seed));
            let run = &cell.run;
            write(d.join("base.ckpt"), &run.base.checkpoint.to_bytes())?;
            write(d.join("finetune.ckpt"), &run.finetune.outcome.checkpoint.to_bytes())?;
            write(d.join("base_trace.csv"), trace_csv(&run.base.trace).as_bytes())?;
            write(
                d.join("finetune_trace.csv"),
                trace_csv(&run.finetune.outcome.trace).as_bytes(),
            )?;
            write(
                d.join("detections.txt"),
                write_detections(&run.detections, registry).as_bytes(),
            )?;
            write(d.join("report.txt"), run.report.to_text().as_bytes())?;
            write(d.join("report.csv"), run.report.to_csv().as_bytes())?;
        }
        write(
            dir.join("comparison.txt"),
            format!("{}\n{}", self.table(), self.observation()).as_bytes(),
        )
    }
}

fn run_cell(
    spec: &ExperimentSpec,
    data: &ExperimentData,
    kind: AugmentationKind,
    seed: u64,
) -> Result<PipelineRun, ExperimentError> {
    let strategy = AugmentationStrategy {
        kind,
        ..spec.strategy.clone()
    };
    let inputs = AugmentInputs {
        backgrounds: &data.backgrounds,
        regions: &data.regions,
    };
    let train = apply_strategy(&data.train, &strategy, &inputs, derive_named(seed, "augment"))?;
    Ok(run_pipeline(
        &row_label(kind),
        &train,
        &data.test,
        &data.split,
        &spec.detector,
        &spec.trainer,
        &spec.eval,
        seed,
    )?)
}

/// Runs every (strategy, seed) cell; cells are independent and may run in
/// parallel, results are merged in spec order.
pub fn run_comparison(spec: &ExperimentSpec) -> Result<ExperimentResult, ExperimentError> {
    spec.validate()?;
    let data = match &spec.source {
        DataSource::Shift(s) => s.build()?,
        DataSource::Disk(d) => d.build(spec.seeds[0])?,
    };
    let jobs: Vec<(AugmentationKind, u64)> = spec
        .strategies
        .iter()
        .flat_map(|&k| spec.seeds.iter().map(move |&s| (k, s)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(strategy, seed)| {
            log::info!("experiment cell {} seed {seed}", strategy.label());
            run_cell(spec, &data, strategy, seed)
                .map(|run| Cell { strategy, seed, run })
                .map_err(|e| ExperimentError::Cell {
                    strategy: strategy.label().into(),
                    seed,
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let rows = spec
        .strategies
        .iter()
        .map(|&k| {
            let maps: Vec<f64> = cells
                .iter()
                .filter(|c| c.strategy == k)
                .map(|c| c.run.report.map)
                .collect();
            (row_label(k), maps.iter().sum::<f64>() / maps.len() as f64)
        })
        .collect();
    Ok(ExperimentResult { cells, rows, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentSpec {
        let mut spec = ExperimentSpec::shift_default();
        if let DataSource::Shift(s) = &mut spec.source {
            s.source_images = 24;
            s.target_images = 12;
            s.test_images = 8;
            s.background_images = 4;
        }
        spec.detector = DetectorConfig {
            input_size: 32,
            widths: vec![4, 8],
            meta_channels: 8,
            ..DetectorConfig::default()
        };
        spec.trainer = TrainerConfig {
            base_iterations: 3,
            finetune_iterations: 1,
            k: 2,
            batch_size: 2,
            ..TrainerConfig::default()
        };
        spec
    }

    #[test]
    fn scenario_shapes_context_gap() {
        let data = ShiftScenario::default().build().unwrap();
        let novel = data.split.novel[0];
        for r in data.train.records() {
            let target = r.id.starts_with("target_");
            assert!(r.annotations.iter().all(|a| (a.category == novel) == target));
        }
        assert!(data.backgrounds.iter().all(|b| b.annotations.is_empty()));
        assert!(data.regions.iter().all(|r| !r.regions.is_empty()));
        assert_eq!(data.split.base.len(), 3);
    }

    #[test]
    fn five_rows_and_deterministic() {
        let spec = tiny();
        let a = run_comparison(&spec).unwrap();
        assert_eq!(a.rows.len(), 5);
        let labels: Vec<&str> = a.rows.iter().map(|(l, _)| l.as_str()).collect();
        assert_eq!(labels, ["FS-FRW", "+BR", "+ATB", "+IA", "+CA"]);
        assert_eq!(a.table().lines().count(), 7);
        assert!(a.observation().contains("+ATB vs FS-FRW"));
        let b = run_comparison(&spec).unwrap();
        assert_eq!(a.table(), b.table());
    }

    #[test]
    fn empty_lists_rejected() {
        let mut s = tiny();
        s.seeds.clear();
        assert!(matches!(run_comparison(&s), Err(ExperimentError::Invalid(_))));
        let mut s = tiny();
        s.strategies.clear();
        assert!(matches!(run_comparison(&s), Err(ExperimentError::Invalid(_))));
    }
}
