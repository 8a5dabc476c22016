//! Run configuration: one TOML file of namespaced keys (`trainer.lr`,
//! `detector.anchors`, `augment.kind`, ...) plus `key=value` overrides.
//! Every key is checked against the defaults; unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::augment::{AugmentationKind, AugmentationStrategy};
use crate::detector::DetectorConfig;
use crate::episodic::SplitMode;
use crate::experiment::{DataSource, DiskSource, ExperimentSpec, ShiftScenario};
use crate::pipeline::EvalConfig;
use crate::seed::derive_named;
use crate::trainer::TrainerConfig;
use crate::voc::{
    generate_synthetic_dataset, load_dataset, shape_palette, CategoryRegistry, ClutterStyle, DatasetIndex,
    LayoutConfig, SyntheticSpec, VocError,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("override `{0}` is not of the form key=value")]
    BadOverride(String),
    #[error("config value: {0}")]
    Value(String),
    #[error(transparent)]
    Data(#[from] VocError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    /// Single-threaded execution everywhere.
    pub deterministic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// `synthetic` renders data from the `synth` keys; `disk` loads `root`.
    pub source: String,
    pub root: String,
    /// Held-out evaluation set for `disk`.
    pub test_root: String,
    pub images_dir: String,
    pub annotations_dir: String,
    pub masks_dir: String,
    pub strict: bool,
    /// `voc_cucumber`, or `discover` to take names from the files.
    pub registry: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub images: usize,
    pub test_images: usize,
    pub width: usize,
    pub height: usize,
    pub categories: Vec<String>,
    pub objects_per_image: [usize; 2],
    pub object_size: [usize; 2],
    pub background: [u8; 3],
    pub noise: u8,
    /// Unannotated distractors per image; `[0, 0]` for none.
    pub distractors: [usize; 2],
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    /// `fixed`, `seeded` or `novel`.
    pub mode: String,
    pub novel: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSection {
    #[serde(flatten)]
    pub strategy: AugmentationStrategy,
    /// Dataset root of replacement backgrounds / target-background regions.
    pub backgrounds: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    /// `shift` for the synthetic context-gap scenario, `disk` for the
    /// `dataset` roots.
    pub source: String,
    pub strategies: Vec<String>,
    pub seeds: Vec<u64>,
    pub categories: Vec<String>,
    pub novel: Vec<String>,
    pub source_images: usize,
    pub target_images: usize,
    pub test_images: usize,
    pub background_images: usize,
    pub source_background: [u8; 3],
    pub target_background: [u8; 3],
    pub distractors: [usize; 2],
    pub data_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub dataset: DatasetSection,
    pub synth: SynthSection,
    pub split: SplitSection,
    pub augment: AugmentSection,
    pub detector: DetectorConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
    pub experiment: ExperimentSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let shift = ShiftScenario::default();
        let exp = ExperimentSpec::shift_default();
        Self {
            run: RunSection {
                seed: 0,
                deterministic: false,
            },
            dataset: DatasetSection {
                source: "synthetic".into(),
                root: String::new(),
                test_root: String::new(),
                images_dir: "images".into(),
                annotations_dir: "annotations".into(),
                masks_dir: "masks".into(),
                strict: false,
                registry: "discover".into(),
            },
            synth: SynthSection {
                images: 200,
                test_images: 60,
                width: 64,
                height: 64,
                categories: crate::pipeline::DESK_CATEGORIES.map(String::from).to_vec(),
                objects_per_image: [1, 2],
                object_size: [14, 24],
                background: [110, 110, 110],
                noise: 12,
                distractors: [0, 0],
                seed: 0,
            },
            split: SplitSection {
                mode: "novel".into(),
                novel: vec![crate::pipeline::DESK_NOVEL.into()],
            },
            augment: AugmentSection {
                strategy: exp.strategy.clone(),
                backgrounds: String::new(),
            },
            detector: exp.detector.clone(),
            trainer: exp.trainer.clone(),
            eval: exp.eval,
            experiment: ExperimentSection {
                source: "shift".into(),
                strategies: exp.strategies.iter().map(|k| k.label().to_string()).collect(),
                seeds: exp.seeds.clone(),
                categories: shift.categories.clone(),
                novel: shift.novel.clone(),
                source_images: shift.source_images,
                target_images: shift.target_images,
                test_images: shift.test_images,
                background_images: shift.background_images,
                source_background: shift.source_background,
                target_background: shift.target_background,
                distractors: shift.distractors,
                data_seed: shift.seed,
            },
        }
    }
}

fn flatten(prefix: &str, table: &Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Table {
    let mut root = Table::new();
    for (key, v) in flat {
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().expect("nonempty key");
        let mut t = &mut root;
        for p in parts {
            t = t
                .entry(p)
                .or_insert_with(|| Value::Table(Table::new()))
                .as_table_mut()
                .expect("schema keys nest consistently");
        }
        t.insert(last.to_string(), v.clone());
    }
    root
}

/// Parses an override value as a TOML value, falling back to a bare string.
fn parse_value(text: &str) -> Value {
    format!("v = {text}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(text.to_string()))
}

impl RunConfig {
    pub fn flat(&self) -> BTreeMap<String, Value> {
        let table = Table::try_from(self).expect("config serializes");
        let mut out = BTreeMap::new();
        flatten("", &table, &mut out);
        out
    }

    /// Defaults, then the file's keys, then `overrides` (`key=value`).
    pub fn resolve(file: Option<&str>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut flat = Self::default().flat();
        let mut set = |key: String, v: Value| -> Result<(), ConfigError> {
            match flat.get_mut(&key) {
                Some(slot) => {
                    *slot = v;
                    Ok(())
                }
                None => Err(ConfigError::UnknownKey(key)),
            }
        };
        if let Some(text) = file {
            let table: Table = text
                .parse()
                .map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
            let mut given = BTreeMap::new();
            flatten("", &table, &mut given);
            for (k, v) in given {
                set(k, v)?;
            }
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::BadOverride(o.clone()))?;
            set(k.trim().to_string(), parse_value(v.trim()))?;
        }
        let cfg: RunConfig = Value::Table(unflatten(&flat))
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Value(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), ConfigError> {
        let v = |m: String| Err(ConfigError::Value(m));
        self.detector
            .validate()
            .map_err(|e| ConfigError::Value(e.to_string()))?;
        self.trainer.validate().map_err(|e| ConfigError::Value(e.to_string()))?;
        self.augment
            .strategy
            .validate()
            .map_err(|e| ConfigError::Value(e.to_string()))?;
        self.split_mode()?;
        self.strategies()?;
        if !["synthetic", "disk"].contains(&self.dataset.source.as_str()) {
            return v(format!(
                "dataset.source must be synthetic or disk, got `{}`",
                self.dataset.source
            ));
        }
        if !["discover", "voc_cucumber"].contains(&self.dataset.registry.as_str()) {
            return v(format!(
                "dataset.registry must be discover or voc_cucumber, got `{}`",
                self.dataset.registry
            ));
        }
        if !["shift", "disk"].contains(&self.experiment.source.as_str()) {
            return v(format!(
                "experiment.source must be shift or disk, got `{}`",
                self.experiment.source
            ));
        }
        if self.experiment.seeds.is_empty() {
            return v("experiment.seeds is empty".into());
        }
        if !(self.eval.iou_threshold > 0.0 && self.eval.iou_threshold <= 1.0) {
            return v("eval.iou_threshold must lie in (0, 1]".into());
        }
        Ok(())
    }

    /// The fully resolved configuration; resolving it again gives the same
    /// config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn split_mode(&self) -> Result<SplitMode, ConfigError> {
        match self.split.mode.as_str() {
            "fixed" => Ok(SplitMode::Fixed),
            "seeded" => Ok(SplitMode::Seeded),
            "novel" if !self.split.novel.is_empty() => Ok(SplitMode::Novel(self.split.novel.clone())),
            "novel" => Err(ConfigError::Value("split.novel is empty".into())),
            m => Err(ConfigError::Value(format!(
                "split.mode must be fixed, seeded or novel, got `{m}`"
            ))),
        }
    }

    pub fn strategies(&self) -> Result<Vec<AugmentationKind>, ConfigError> {
        self.experiment
            .strategies
            .iter()
            .map(|s| AugmentationKind::parse(s).ok_or_else(|| ConfigError::Value(format!("unknown strategy `{s}`"))))
            .collect()
    }

    pub fn layout(&self) -> LayoutConfig {
        LayoutConfig {
            images_dir: self.dataset.images_dir.clone(),
            annotations_dir: self.dataset.annotations_dir.clone(),
            masks_dir: self.dataset.masks_dir.clone(),
            strict: self.dataset.strict,
            registry: (self.dataset.registry == "voc_cucumber").then(CategoryRegistry::voc_cucumber),
        }
    }

    pub fn synthetic_spec(&self, images: usize, prefix: &str) -> SyntheticSpec {
        let s = &self.synth;
        let mut spec = SyntheticSpec::simple(shape_palette(&s.categories), images);
        spec.width = s.width;
        spec.height = s.height;
        spec.objects_per_image = s.objects_per_image;
        spec.object_size = s.object_size;
        spec.background.color = s.background;
        spec.background.noise = s.noise;
        spec.id_prefix = prefix.into();
        if s.distractors[1] > 0 {
            spec.clutter = Some(ClutterStyle {
                distractors: s.distractors,
                scale: 1.0,
                fade: 0.45,
            });
        }
        spec
    }

    /// Training and held-out test sets: rendered from the `synth` keys, or
    /// loaded from `dataset.root` and `dataset.test_root`.
    pub fn datasets(&self) -> Result<(DatasetIndex, DatasetIndex), ConfigError> {
        if self.dataset.source == "synthetic" {
            let seed = self.synth.seed;
            let train = generate_synthetic_dataset(
                &self.synthetic_spec(self.synth.images, "synth_"),
                derive_named(seed, "train"),
            )?;
            let test = generate_synthetic_dataset(
                &self.synthetic_spec(self.synth.test_images, "test_"),
                derive_named(seed, "test"),
            )?;
            return Ok((train, test));
        }
        for (v, key) in [
            (&self.dataset.root, "dataset.root"),
            (&self.dataset.test_root, "dataset.test_root"),
        ] {
            if v.is_empty() {
                return Err(ConfigError::Value(format!(
                    "{key} is required when dataset.source = \"disk\""
                )));
            }
        }
        let train = load_dataset(self.dataset.root.as_ref(), &self.layout())?.index;
        let layout = LayoutConfig {
            registry: Some(train.categories().clone()),
            ..self.layout()
        };
        let test = load_dataset(self.dataset.test_root.as_ref(), &layout)?.index;
        Ok((train, test))
    }

    pub fn experiment_spec(&self) -> Result<ExperimentSpec, ConfigError> {
        let e = &self.experiment;
        let source = if e.source == "shift" {
            DataSource::Shift(ShiftScenario {
                categories: e.categories.clone(),
                novel: e.novel.clone(),
                source_images: e.source_images,
                target_images: e.target_images,
                test_images: e.test_images,
                background_images: e.background_images,
                source_background: e.source_background,
                target_background: e.target_background,
                distractors: e.distractors,
                seed: e.data_seed,
            })
        } else {
            let path = |s: &str, what: &str| {
                if s.is_empty() {
                    Err(ConfigError::Value(format!("{what} is required for a disk experiment")))
                } else {
                    Ok(PathBuf::from(s))
                }
            };
            DataSource::Disk(DiskSource {
                train: path(&self.dataset.root, "dataset.root")?,
                test: path(&self.dataset.test_root, "dataset.test_root")?,
                backgrounds: (!self.augment.backgrounds.is_empty()).then(|| PathBuf::from(&self.augment.backgrounds)),
                split: self.split_mode()?,
                layout: self.layout(),
            })
        };
        Ok(ExperimentSpec {
            source,
            strategies: self.strategies()?,
            strategy: self.augment.strategy.clone(),
            seeds: e.seeds.clone(),
            detector: self.detector.clone(),
            trainer: self.trainer.clone(),
            eval: self.eval,
        })
    }
}
