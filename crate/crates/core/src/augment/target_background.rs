use std::sync::Arc;

use crate::voc::{Annotation, BoundingBox, DatasetIndex, ImageRecord, Provenance};

use super::AugmentError;

/// Name given to the category slot taken over by background regions.
pub const TARGET_BACKGROUND: &str = "target-background";

/// A background image of the target scene with operator-provided region
/// boxes (e.g. leaves and branches without any target object).
#[derive(Clone, Debug, PartialEq)]
pub struct RegionRecord {
    pub image: Arc<ImageRecord>,
    pub regions: Vec<BoundingBox>,
}

impl RegionRecord {
    /// Takes a record's annotation boxes as its regions.
    pub fn from_annotated(record: &ImageRecord) -> Self {
        Self {
            regions: record.annotations.iter().map(|a| a.bbox).collect(),
            image: Arc::new(ImageRecord {
                annotations: Vec::new(),
                mask: None,
                ..record.clone()
            }),
        }
    }
}

/// Swaps `replaced_category` for a `target-background` category in the same
/// registry slot: records using the replaced category are dropped and the
/// background records are added with their regions as annotations.
pub fn build_target_background_category(
    base: &DatasetIndex,
    background_records: &[RegionRecord],
    replaced_category: &str,
) -> Result<DatasetIndex, AugmentError> {
    let slot = base
        .categories()
        .lookup(replaced_category)
        .ok_or_else(|| AugmentError::UnknownCategory(replaced_category.to_string()))?;
    let mut registry = base.categories().clone();
    registry.rename(slot, TARGET_BACKGROUND)?;

    let mut records: Vec<Arc<ImageRecord>> = base
        .records()
        .iter()
        .filter(|r| r.annotations.iter().all(|a| a.category != slot))
        .cloned()
        .collect();
    for bg in background_records {
        if bg.regions.is_empty() {
            return Err(AugmentError::NoRegions(bg.image.id.clone()));
        }
        let annotations = bg.regions.iter().map(|&b| Annotation::new(slot, b)).collect();
        let rec = ImageRecord::new(
            bg.image.id.clone(),
            bg.image.width,
            bg.image.height,
            bg.image.pixels.clone(),
            annotations,
            None,
        )?;
        records.push(Arc::new(rec));
    }
    Ok(DatasetIndex::new(
        records,
        registry,
        Provenance::Derived(format!("atb(replace={replaced_category},{})", base.provenance)),
    )?)
}
