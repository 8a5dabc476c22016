use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::VocError;

/// Axis-aligned box in continuous pixel coordinates, origin top-left,
/// `x_max`/`y_max` exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox<T = f64> {
    pub x_min: T,
    pub y_min: T,
    pub x_max: T,
    pub y_max: T,
}

impl<T: Float + fmt::Debug> BoundingBox<T> {
    /// Builds a box, rejecting non-finite, negative or empty extents.
    pub fn new(x_min: T, y_min: T, x_max: T, y_max: T) -> Result<Self, VocError> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite || x_min < T::zero() || y_min < T::zero() || x_min >= x_max || y_min >= y_max {
            return Err(VocError::InvalidBox(format!("{b:?}")));
        }
        Ok(b)
    }

    pub fn width(&self) -> T {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> T {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn center(&self) -> (T, T) {
        let two = T::one() + T::one();
        ((self.x_min + self.x_max) / two, (self.y_min + self.y_max) / two)
    }

    pub fn intersection_area(&self, other: &Self) -> T {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= T::zero() || h <= T::zero() {
            T::zero()
        } else {
            w * h
        }
    }

    /// Clamps to `[0, width] x [0, height]`; `None` if nothing remains.
    pub fn clamp_to(&self, width: T, height: T) -> Option<Self> {
        let x_min = self.x_min.max(T::zero()).min(width);
        let y_min = self.y_min.max(T::zero()).min(height);
        let x_max = self.x_max.max(T::zero()).min(width);
        let y_max = self.y_max.max(T::zero()).min(height);
        (x_min < x_max && y_min < y_max).then_some(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn within(&self, width: T, height: T) -> bool {
        self.x_min >= T::zero() && self.y_min >= T::zero() && self.x_max <= width && self.y_max <= height
    }

    /// Total lexicographic order on (x_min, y_min, x_max, y_max).
    pub fn lex_cmp(&self, other: &Self) -> Ordering {
        let a = [self.x_min, self.y_min, self.x_max, self.y_max];
        let b = [other.x_min, other.y_min, other.x_max, other.y_max];
        for (x, y) in a.iter().zip(&b) {
            match x.partial_cmp(y).unwrap_or(Ordering::Equal) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        Ordering::Equal
    }

    pub fn scale(&self, sx: T, sy: T) -> Self {
        Self {
            x_min: self.x_min * sx,
            y_min: self.y_min * sy,
            x_max: self.x_max * sx,
            y_max: self.y_max * sy,
        }
    }
}

/// Index into a [`CategoryRegistry`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CategoryId(pub usize);

/// Ordered list of category names; a category's id is its slot.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct CategoryRegistry {
    names: Vec<String>,
    aliases: BTreeMap<String, usize>,
}

impl CategoryRegistry {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self, VocError> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() {
                return Err(VocError::Registry("empty category name".into()));
            }
            if !seen.insert(n.as_str()) {
                return Err(VocError::Registry(format!("duplicate category `{n}`")));
            }
        }
        Ok(Self {
            names,
            aliases: BTreeMap::new(),
        })
    }

    /// Nineteen VOC categories plus `cucumber` (which takes the slot of the
    /// VOC `sofa` novel category), spelled as in the published split table.
    /// Standard VOC spellings such as `motorbike` resolve through aliases.
    pub fn voc_cucumber() -> Self {
        let mut reg = Self::new(VOC_CUCUMBER_NAMES).expect("static names are unique");
        for (alias, name) in VOC_ALIASES {
            let id = reg.lookup(name).expect("alias target exists");
            reg.aliases.insert(alias.to_string(), id.0);
        }
        reg
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: CategoryId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = CategoryId> {
        (0..self.names.len()).map(CategoryId)
    }

    pub fn lookup(&self, name: &str) -> Option<CategoryId> {
        self.names
            .iter()
            .position(|n| n == name)
            .or_else(|| self.aliases.get(name).copied())
            .map(CategoryId)
    }

    pub fn require(&self, name: &str) -> Result<CategoryId, VocError> {
        self.lookup(name)
            .ok_or_else(|| VocError::UnknownCategory(name.to_string()))
    }

    /// Renames a slot in place; ids stay stable.
    pub fn rename(&mut self, id: CategoryId, name: &str) -> Result<(), VocError> {
        if let Some(other) = self.lookup(name) {
            if other != id {
                return Err(VocError::Registry(format!("duplicate category `{name}`")));
            }
        }
        self.aliases.retain(|_, v| *v != id.0);
        self.names[id.0] = name.to_string();
        Ok(())
    }
}

/// Category names of the VOC + cucumber registry, in split-table order
/// (fifteen base categories, then five novel ones).
pub const VOC_CUCUMBER_NAMES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "boat",
    "bottle",
    "car",
    "cat",
    "chair",
    "dining-table",
    "dog",
    "horse",
    "person",
    "potted-plant",
    "sheep",
    "train",
    "tv-monitor",
    "bird",
    "bus",
    "cow",
    "motobike",
    "cucumber",
];

const VOC_ALIASES: [(&str, &str); 5] = [
    ("diningtable", "dining-table"),
    ("pottedplant", "potted-plant"),
    ("tvmonitor", "tv-monitor"),
    ("motorbike", "motobike"),
    ("airplane", "aeroplane"),
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub category: CategoryId,
    pub bbox: BoundingBox,
    /// Kept for bookkeeping but excluded from the loss (VOC `difficult`).
    pub ignored: bool,
}

impl Annotation {
    pub fn new(category: CategoryId, bbox: BoundingBox) -> Self {
        Self {
            category,
            bbox,
            ignored: false,
        }
    }
}

/// One RGB image with its annotations and optional foreground label map.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub width: usize,
    pub height: usize,
    /// Row-major RGB, 8 bits per channel.
    pub pixels: Vec<u8>,
    pub annotations: Vec<Annotation>,
    /// Row-major per-pixel labels, nonzero = foreground object.
    pub mask: Option<Vec<u8>>,
}

impl ImageRecord {
    pub fn new(
        id: impl Into<String>,
        width: usize,
        height: usize,
        pixels: Vec<u8>,
        annotations: Vec<Annotation>,
        mask: Option<Vec<u8>>,
    ) -> Result<Self, VocError> {
        let rec = Self {
            id: id.into(),
            width,
            height,
            pixels,
            annotations,
            mask,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<(), VocError> {
        let n = self.width * self.height;
        if self.pixels.len() != n * 3 {
            return Err(VocError::Record {
                id: self.id.clone(),
                reason: format!(
                    "pixel buffer has {} bytes, expected {}x{}x3",
                    self.pixels.len(),
                    self.width,
                    self.height
                ),
            });
        }
        if let Some(mask) = &self.mask {
            if mask.len() != n {
                return Err(VocError::Record {
                    id: self.id.clone(),
                    reason: format!("mask has {} entries, expected {n}", mask.len()),
                });
            }
        }
        for a in &self.annotations {
            if !a.bbox.within(self.width as f64, self.height as f64) {
                return Err(VocError::Record {
                    id: self.id.clone(),
                    reason: format!("box {:?} outside {}x{}", a.bbox, self.width, self.height),
                });
            }
        }
        Ok(())
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn has_category(&self, c: CategoryId) -> bool {
        self.annotations.iter().any(|a| a.category == c && !a.ignored)
    }

    pub fn count_category(&self, c: CategoryId) -> usize {
        self.annotations
            .iter()
            .filter(|a| a.category == c && !a.ignored)
            .count()
    }
}

/// Where a dataset came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Provenance {
    Path(PathBuf),
    Synthetic { seed: u64 },
    Derived(String),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Path(p) => write!(f, "path:{}", p.display()),
            Provenance::Synthetic { seed } => write!(f, "synthetic:seed={seed}"),
            Provenance::Derived(s) => write!(f, "derived:{s}"),
        }
    }
}

/// Records ordered lexicographically by id, plus their category registry.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    records: Vec<Arc<ImageRecord>>,
    categories: CategoryRegistry,
    pub provenance: Provenance,
}

impl DatasetIndex {
    pub fn new(
        mut records: Vec<Arc<ImageRecord>>,
        categories: CategoryRegistry,
        provenance: Provenance,
    ) -> Result<Self, VocError> {
        records.sort_by(|a, b| a.id.cmp(&b.id));
        for pair in records.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(VocError::Registry(format!("duplicate record id `{}`", pair[0].id)));
            }
        }
        for r in &records {
            for a in &r.annotations {
                if a.category.0 >= categories.len() {
                    return Err(VocError::Record {
                        id: r.id.clone(),
                        reason: format!("category id {} not in registry", a.category.0),
                    });
                }
            }
        }
        Ok(Self {
            records,
            categories,
            provenance,
        })
    }

    pub fn records(&self) -> &[Arc<ImageRecord>] {
        &self.records
    }

    pub fn categories(&self) -> &CategoryRegistry {
        &self.categories
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Arc<ImageRecord>> {
        self.records
            .binary_search_by(|r| r.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.records[i])
    }

    pub fn annotation_count(&self) -> usize {
        self.records.iter().map(|r| r.annotations.len()).sum()
    }

    /// Non-ignored boxes per category.
    pub fn box_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.categories.len()];
        for r in &self.records {
            for a in r.annotations.iter().filter(|a| !a.ignored) {
                counts[a.category.0] += 1;
            }
        }
        counts
    }

    /// Union of two datasets over the same registry.
    pub fn merge(&self, other: &DatasetIndex) -> Result<DatasetIndex, VocError> {
        if self.categories != other.categories {
            return Err(VocError::Registry(
                "cannot merge datasets with different registries".into(),
            ));
        }
        let records = self.records.iter().chain(&other.records).cloned().collect();
        DatasetIndex::new(
            records,
            self.categories.clone(),
            Provenance::Derived(format!("merge({}, {})", self.provenance, other.provenance)),
        )
    }

    /// Keeps records satisfying `keep`.
    pub fn filter(&self, keep: impl Fn(&ImageRecord) -> bool) -> DatasetIndex {
        DatasetIndex {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            categories: self.categories.clone(),
            provenance: self.provenance.clone(),
        }
    }
}
