//! VOC-style annotations, dataset indexing and synthetic shape corpora.

mod layout;
mod synth;
mod types;
mod xml;

pub use layout::{load_dataset, save_dataset, validate_dataset, LayoutConfig, LoadOutcome, Skipped, ValidationSummary};
pub use synth::{
    generate_synthetic_dataset, rendered_shape_count, shape_palette, BackgroundStyle, ClutterStyle, ShapeCategory,
    ShapeKind, SyntheticSpec,
};
pub use types::{
    Annotation, BoundingBox, CategoryId, CategoryRegistry, DatasetIndex, ImageRecord, Provenance, VOC_CUCUMBER_NAMES,
};
pub use xml::{parse_voc_annotation, write_voc_annotation, VocAnnotation};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VocError {
    #[error("XML error at line {line}, column {column}: {message}\n  | {context}")]
    Xml {
        line: usize,
        column: usize,
        message: String,
        context: String,
    },
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("category registry: {0}")]
    Registry(String),
    #[error("record `{id}`: {reason}")]
    Record { id: String, reason: String },
    #[error("no records found under {}", .0.display())]
    Empty(PathBuf),
    #[error("{}: {reason}", path.display())]
    Skipped { path: PathBuf, reason: String },
    #[error("synthetic spec: {0}")]
    Synthetic(String),
    #[error("image codec: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
