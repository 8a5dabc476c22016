//! On-disk dataset layout: `images/<stem>.png|jpg`, `annotations/<stem>.xml`
//! and optional `masks/<stem>.png`, paired by file stem.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use super::xml::{parse_voc_annotation, write_voc_annotation};
use super::{CategoryRegistry, DatasetIndex, ImageRecord, Provenance, VocError};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutConfig {
    pub images_dir: String,
    pub annotations_dir: String,
    pub masks_dir: String,
    /// Escalate skipped files to errors.
    pub strict: bool,
    /// Registry to resolve names against; discovered from the files when
    /// absent (sorted by name).
    pub registry: Option<CategoryRegistry>,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            images_dir: "images".into(),
            annotations_dir: "annotations".into(),
            masks_dir: "masks".into(),
            strict: false,
            registry: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Skipped {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct LoadOutcome {
    pub index: DatasetIndex,
    pub skipped: Vec<Skipped>,
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>, VocError> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        if !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

fn discover_registry(root: &Path, layout: &LayoutConfig, stems: &[String]) -> Result<CategoryRegistry, VocError> {
    let mut names = BTreeSet::new();
    for stem in stems {
        let path = root.join(&layout.annotations_dir).join(format!("{stem}.xml"));
        let Ok(text) = std::fs::read_to_string(&path) else {
            continue;
        };
        let Ok(doc) = roxmltree::Document::parse(&text) else {
            continue;
        };
        for n in doc.descendants().filter(|n| n.has_tag_name("name")) {
            if n.parent().is_some_and(|p| p.has_tag_name("object")) {
                if let Some(t) = n.text() {
                    names.insert(t.trim().to_string());
                }
            }
        }
    }
    CategoryRegistry::new(names)
}

fn load_one(
    root: &Path,
    layout: &LayoutConfig,
    registry: &CategoryRegistry,
    stem: &str,
    image_path: &Path,
) -> Result<ImageRecord, Skipped> {
    let skip = |path: &Path, reason: String| Skipped {
        path: path.to_path_buf(),
        reason,
    };
    let ann_path = root.join(&layout.annotations_dir).join(format!("{stem}.xml"));
    let text = std::fs::read_to_string(&ann_path).map_err(|e| skip(&ann_path, format!("missing annotation: {e}")))?;
    let parsed = parse_voc_annotation(&text, registry).map_err(|e| skip(&ann_path, e.to_string()))?;
    let img = image::open(image_path)
        .map_err(|e| skip(image_path, e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if (w, h) != (parsed.width, parsed.height) {
        return Err(skip(
            &ann_path,
            format!(
                "annotation size {}x{} but image is {w}x{h}",
                parsed.width, parsed.height
            ),
        ));
    }
    let mask_path = root.join(&layout.masks_dir).join(format!("{stem}.png"));
    let mask = if mask_path.is_file() {
        let m = image::open(&mask_path)
            .map_err(|e| skip(&mask_path, e.to_string()))?
            .to_luma8();
        if (m.width() as usize, m.height() as usize) != (w, h) {
            return Err(skip(&mask_path, "mask size differs from image".into()));
        }
        Some(m.into_raw())
    } else {
        None
    };
    ImageRecord::new(stem, w, h, img.into_raw(), parsed.annotations, mask).map_err(|e| skip(&ann_path, e.to_string()))
}

/// Loads every parseable record under `root`. Unparseable or unpaired files
/// are reported in [`LoadOutcome::skipped`] (or fail in strict mode).
pub fn load_dataset(root: &Path, layout: &LayoutConfig) -> Result<LoadOutcome, VocError> {
    let images = list_images(&root.join(&layout.images_dir))?;
    let stems: Vec<String> = images.keys().cloned().collect();
    let registry = match &layout.registry {
        Some(r) => r.clone(),
        None => discover_registry(root, layout, &stems)?,
    };
    let results: Vec<Result<ImageRecord, Skipped>> = images
        .par_iter()
        .map(|(stem, path)| load_one(root, layout, &registry, stem, path))
        .collect();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(rec) => records.push(Arc::new(rec)),
            Err(s) if layout.strict => {
                return Err(VocError::Skipped {
                    path: s.path,
                    reason: s.reason,
                })
            }
            Err(s) => skipped.push(s),
        }
    }
    if records.is_empty() {
        return Err(VocError::Empty(root.to_path_buf()));
    }
    for s in &skipped {
        log::warn!("skipped {}: {}", s.path.display(), s.reason);
    }
    let index = DatasetIndex::new(records, registry, Provenance::Path(root.to_path_buf()))?;
    Ok(LoadOutcome { index, skipped })
}

/// Header-only pass over a dataset directory.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationSummary {
    pub images: usize,
    pub sizes: BTreeMap<(usize, usize), usize>,
    pub annotations: usize,
    pub per_category: BTreeMap<String, usize>,
    pub annotations_per_image: (usize, usize),
    pub skipped: Vec<Skipped>,
}

impl fmt::Display for ValidationSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} images, ", self.images)?;
        if self.sizes.len() == 1 {
            let (w, h) = self.sizes.keys().next().unwrap();
            write!(f, "{w}x{h}")?;
        } else {
            write!(f, "{} distinct sizes", self.sizes.len())?;
        }
        write!(
            f,
            "\n{} annotations ({}-{} per image)",
            self.annotations, self.annotations_per_image.0, self.annotations_per_image.1
        )?;
        for (name, n) in &self.per_category {
            write!(f, "\n  {name}: {n}")?;
        }
        if !self.skipped.is_empty() {
            write!(f, "\n{} skipped", self.skipped.len())?;
        }
        Ok(())
    }
}

/// Parses annotations and reads image headers without decoding pixels.
pub fn validate_dataset(root: &Path, layout: &LayoutConfig) -> Result<ValidationSummary, VocError> {
    let images = list_images(&root.join(&layout.images_dir))?;
    let stems: Vec<String> = images.keys().cloned().collect();
    let registry = match &layout.registry {
        Some(r) => r.clone(),
        None => discover_registry(root, layout, &stems)?,
    };
    let mut summary = ValidationSummary {
        annotations_per_image: (usize::MAX, 0),
        ..Default::default()
    };
    for (stem, path) in &images {
        let ann_path = root.join(&layout.annotations_dir).join(format!("{stem}.xml"));
        let outcome = std::fs::read_to_string(&ann_path)
            .map_err(|e| format!("missing annotation: {e}"))
            .and_then(|t| parse_voc_annotation(&t, &registry).map_err(|e| e.to_string()))
            .and_then(|p| {
                let (w, h) = image::image_dimensions(path).map_err(|e| e.to_string())?;
                if (w as usize, h as usize) != (p.width, p.height) {
                    return Err(format!("annotation size {}x{} but image is {w}x{h}", p.width, p.height));
                }
                Ok(p)
            });
        match outcome {
            Ok(p) => {
                summary.images += 1;
                *summary.sizes.entry((p.width, p.height)).or_default() += 1;
                summary.annotations += p.annotations.len();
                let n = p.annotations.len();
                summary.annotations_per_image.0 = summary.annotations_per_image.0.min(n);
                summary.annotations_per_image.1 = summary.annotations_per_image.1.max(n);
                for a in &p.annotations {
                    *summary
                        .per_category
                        .entry(registry.name(a.category).to_string())
                        .or_default() += 1;
                }
            }
            Err(reason) if layout.strict => return Err(VocError::Skipped { path: ann_path, reason }),
            Err(reason) => summary.skipped.push(Skipped { path: ann_path, reason }),
        }
    }
    if summary.images == 0 {
        return Err(VocError::Empty(root.to_path_buf()));
    }
    Ok(summary)
}

/// Writes a dataset in the layout `load_dataset` reads (PNG images).
pub fn save_dataset(index: &DatasetIndex, root: &Path, layout: &LayoutConfig) -> Result<(), VocError> {
    let img_dir = root.join(&layout.images_dir);
    let ann_dir = root.join(&layout.annotations_dir);
    let mask_dir = root.join(&layout.masks_dir);
    std::fs::create_dir_all(&img_dir)?;
    std::fs::create_dir_all(&ann_dir)?;
    if index.records().iter().any(|r| r.mask.is_some()) {
        std::fs::create_dir_all(&mask_dir)?;
    }
    index.records().par_iter().try_for_each(|r| -> Result<(), VocError> {
        let file = format!("{}.png", r.id);
        let xml = write_voc_annotation(Some(&file), (r.width, r.height), &r.annotations, index.categories())?;
        std::fs::write(ann_dir.join(format!("{}.xml", r.id)), xml)?;
        let img = image::RgbImage::from_raw(r.width as u32, r.height as u32, r.pixels.clone()).ok_or_else(|| {
            VocError::Record {
                id: r.id.clone(),
                reason: "pixel buffer size".into(),
            }
        })?;
        img.save(img_dir.join(&file))
            .map_err(|e| VocError::Image(e.to_string()))?;
        if let Some(mask) = &r.mask {
            let m = image::GrayImage::from_raw(r.width as u32, r.height as u32, mask.clone()).ok_or_else(|| {
                VocError::Record {
                    id: r.id.clone(),
                    reason: "mask size".into(),
                }
            })?;
            m.save(mask_dir.join(&file))
                .map_err(|e| VocError::Image(e.to_string()))?;
        }
        Ok(())
    })
}
