//! Dataset augmentations: background replacement, target-background
//! category, illuminance and contrast.

mod background;
mod photometric;
mod target_background;

use std::sync::Arc;

pub use background::{apply_br_to_dataset, replace_background, resize_nearest};
pub use photometric::{adjust_contrast, adjust_illuminance, apply_lut, contrast_lut, gamma_lut, Lut};
pub use target_background::{build_target_background_category, RegionRecord, TARGET_BACKGROUND};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::voc::{DatasetIndex, ImageRecord, Provenance, VocError};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("record `{0}` has no mask; background replacement requires masks")]
    MissingMask(String),
    #[error("background pool is empty")]
    EmptyBackgroundPool,
    #[error("invalid augmentation parameter: {0}")]
    InvalidParameter(String),
    #[error("category `{0}` is not in the registry")]
    UnknownCategory(String),
    #[error("background record `{0}` has no region boxes")]
    NoRegions(String),
    #[error(transparent)]
    Voc(#[from] VocError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationKind {
    None,
    BackgroundReplace,
    AddTargetBackground,
    Illuminance,
    Contrast,
}

impl AugmentationKind {
    pub const ALL: [AugmentationKind; 5] = [
        AugmentationKind::None,
        AugmentationKind::BackgroundReplace,
        AugmentationKind::AddTargetBackground,
        AugmentationKind::Illuminance,
        AugmentationKind::Contrast,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AugmentationKind::None => "none",
            AugmentationKind::BackgroundReplace => "br",
            AugmentationKind::AddTargetBackground => "atb",
            AugmentationKind::Illuminance => "ia",
            AugmentationKind::Contrast => "ca",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Some(Self::None),
            "br" | "background_replace" => Some(Self::BackgroundReplace),
            "atb" | "add_target_background" => Some(Self::AddTargetBackground),
            "ia" | "illuminance" => Some(Self::Illuminance),
            "ca" | "contrast" => Some(Self::Contrast),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationStrategy {
    pub kind: AugmentationKind,
    pub gamma_factor: f64,
    pub gamma_brightens: bool,
    pub contrast_factor: f64,
    pub replacement_probability: f64,
    /// IA and CA leave records containing any of these categories untouched.
    pub exclude_categories: Vec<String>,
    /// Category slot reused by ATB.
    pub replaced_category: String,
}

impl Default for AugmentationStrategy {
    fn default() -> Self {
        Self {
            kind: AugmentationKind::None,
            gamma_factor: 1.5,
            gamma_brightens: true,
            contrast_factor: 2.0,
            replacement_probability: 1.0,
            exclude_categories: vec!["cucumber".into()],
            replaced_category: "aeroplane".into(),
        }
    }
}

impl AugmentationStrategy {
    pub fn of(kind: AugmentationKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let positive = |v: f64, what: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(AugmentError::InvalidParameter(format!(
                    "{what} must be positive, got {v}"
                )))
            }
        };
        positive(self.gamma_factor, "gamma factor")?;
        positive(self.contrast_factor, "contrast factor")?;
        if !(0.0..=1.0).contains(&self.replacement_probability) {
            return Err(AugmentError::InvalidParameter(format!(
                "replacement probability must lie in [0, 1], got {}",
                self.replacement_probability
            )));
        }
        Ok(())
    }
}

/// Inputs only some augmentations need.
#[derive(Clone, Debug, Default)]
pub struct AugmentInputs<'a> {
    pub backgrounds: &'a [Arc<ImageRecord>],
    pub regions: &'a [RegionRecord],
}

/// Applies `lut` to every record without a box of an excluded category.
pub fn map_dataset_pixels(
    base: &DatasetIndex,
    lut: &Lut,
    exclude: &[String],
    tag: &str,
) -> Result<DatasetIndex, AugmentError> {
    let excluded: Vec<_> = exclude.iter().filter_map(|n| base.categories().lookup(n)).collect();
    let records = base
        .records()
        .iter()
        .map(|r| {
            if excluded.iter().any(|&c| r.has_category(c)) {
                Arc::clone(r)
            } else {
                Arc::new(apply_lut(r, lut))
            }
        })
        .collect();
    Ok(DatasetIndex::new(
        records,
        base.categories().clone(),
        Provenance::Derived(format!("{tag}({})", base.provenance)),
    )?)
}

/// Applies one strategy to a dataset.
pub fn apply_strategy(
    base: &DatasetIndex,
    strategy: &AugmentationStrategy,
    inputs: &AugmentInputs<'_>,
    seed: u64,
) -> Result<DatasetIndex, AugmentError> {
    strategy.validate()?;
    match strategy.kind {
        AugmentationKind::None => Ok(base.clone()),
        AugmentationKind::BackgroundReplace => {
            apply_br_to_dataset(base, inputs.backgrounds, strategy.replacement_probability, seed)
        }
        AugmentationKind::AddTargetBackground => {
            build_target_background_category(base, inputs.regions, &strategy.replaced_category)
        }
        AugmentationKind::Illuminance => map_dataset_pixels(
            base,
            &gamma_lut(strategy.gamma_factor, strategy.gamma_brightens),
            &strategy.exclude_categories,
            &format!("ia(gamma={})", strategy.gamma_factor),
        ),
        AugmentationKind::Contrast => map_dataset_pixels(
            base,
            &contrast_lut(strategy.contrast_factor),
            &strategy.exclude_categories,
            &format!("ca(factor={})", strategy.contrast_factor),
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voc::{Annotation, BoundingBox, CategoryId, CategoryRegistry};
    use proptest::prelude::*;

    fn dataset() -> DatasetIndex {
        let reg = CategoryRegistry::new(["aeroplane", "cucumber"]).unwrap();
        let bx = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let a = ImageRecord::new("a", 2, 1, vec![100; 6], vec![Annotation::new(CategoryId(0), bx)], None).unwrap();
        let b = ImageRecord::new("b", 2, 1, vec![100; 6], vec![Annotation::new(CategoryId(1), bx)], None).unwrap();
        DatasetIndex::new(vec![Arc::new(a), Arc::new(b)], reg, Provenance::Synthetic { seed: 0 }).unwrap()
    }

    #[test]
    fn excluded_category_untouched() {
        let ds = dataset();
        let out = apply_strategy(
            &ds,
            &AugmentationStrategy::of(AugmentationKind::Contrast),
            &Default::default(),
            0,
        )
        .unwrap();
        assert_eq!(out.get("a").unwrap().pixels, vec![72; 6]);
        assert_eq!(out.get("b").unwrap().pixels, vec![100; 6]);
    }

    #[test]
    fn none_is_identity_and_params_validated() {
        let ds = dataset();
        let out = apply_strategy(&ds, &AugmentationStrategy::default(), &Default::default(), 0).unwrap();
        assert_eq!(out.records(), ds.records());
        let bad = AugmentationStrategy {
            gamma_factor: 0.0,
            ..AugmentationStrategy::of(AugmentationKind::Illuminance)
        };
        assert!(matches!(
            apply_strategy(&ds, &bad, &Default::default(), 0),
            Err(AugmentError::InvalidParameter(_))
        ));
    }

    #[test]
    fn br_without_pool_fails() {
        let s = AugmentationStrategy::of(AugmentationKind::BackgroundReplace);
        assert!(matches!(
            apply_strategy(&dataset(), &s, &Default::default(), 0),
            Err(AugmentError::EmptyBackgroundPool)
        ));
    }

    #[test]
    fn kind_labels_round_trip() {
        for k in AugmentationKind::ALL {
            assert_eq!(AugmentationKind::parse(k.label()), Some(k));
        }
    }

    fn crop(pixels: &[u8], w: usize, x0: usize, y0: usize, cw: usize, ch: usize) -> Vec<u8> {
        let mut out = Vec::new();
        for y in y0..y0 + ch {
            out.extend_from_slice(&pixels[(y * w + x0) * 3..(y * w + x0 + cw) * 3]);
        }
        out
    }

    proptest! {
        #[test]
        fn pixel_maps_commute_with_crop(
            pixels in proptest::collection::vec(any::<u8>(), 6 * 5 * 3),
            gamma in 0.2f64..4.0,
            factor in 0.2f64..4.0,
            x0 in 0usize..3, y0 in 0usize..3,
        ) {
            let rec = ImageRecord::new("p", 6, 5, pixels.clone(), vec![], None).unwrap();
            let c = crop(&pixels, 6, x0, y0, 3, 2);
            let crec = ImageRecord::new("c", 3, 2, c, vec![], None).unwrap();
            let ia = adjust_illuminance(&rec, gamma);
            prop_assert_eq!(crop(&ia.pixels, 6, x0, y0, 3, 2), adjust_illuminance(&crec, gamma).pixels);
            let ca = adjust_contrast(&rec, factor);
            prop_assert_eq!(crop(&ca.pixels, 6, x0, y0, 3, 2), adjust_contrast(&crec, factor).pixels);
        }

        #[test]
        fn gamma_lut_is_monotone(g in 0.1f64..5.0) {
            let lut = gamma_lut(g, true);
            prop_assert!(lut.windows(2).all(|p| p[0] <= p[1]));
        }
    }
}
