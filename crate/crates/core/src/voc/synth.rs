//! Deterministic flat-shaded shape datasets with exact boxes and masks.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Annotation, BoundingBox, CategoryId, CategoryRegistry, DatasetIndex, ImageRecord, Provenance, VocError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeCategory {
    pub name: String,
    pub shape: ShapeKind,
    pub color: [u8; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundStyle {
    pub color: [u8; 3],
    /// Per-channel uniform noise amplitude.
    pub noise: u8,
}

/// Unannotated shapes painted behind the annotated objects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClutterStyle {
    /// Inclusive range of distractor count per image.
    pub distractors: [usize; 2],
    /// Distractor size relative to the object size range.
    pub scale: f64,
    /// Blend of the distractor color toward the background color, in [0, 1].
    pub fade: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub images: usize,
    /// Full registry, in id order.
    pub categories: Vec<ShapeCategory>,
    /// Names of the categories actually drawn; all when empty.
    #[serde(default)]
    pub active: Vec<String>,
    /// Inclusive range of annotated objects per image.
    pub objects_per_image: [usize; 2],
    /// Inclusive range of object side length in pixels.
    pub object_size: [usize; 2],
    pub background: BackgroundStyle,
    #[serde(default)]
    pub clutter: Option<ClutterStyle>,
    pub id_prefix: String,
}

impl SyntheticSpec {
    /// Small-image spec over the given categories, plain backgrounds.
    pub fn simple(categories: Vec<ShapeCategory>, images: usize) -> Self {
        Self {
            width: 64,
            height: 64,
            images,
            categories,
            active: Vec::new(),
            objects_per_image: [1, 2],
            object_size: [14, 24],
            background: BackgroundStyle {
                color: [110, 110, 110],
                noise: 12,
            },
            clutter: None,
            id_prefix: "synth_".into(),
        }
    }

    pub fn registry(&self) -> Result<CategoryRegistry, VocError> {
        CategoryRegistry::new(self.categories.iter().map(|c| c.name.clone()))
    }

    fn validate(&self) -> Result<Vec<usize>, VocError> {
        let bad = |m: String| Err(VocError::Synthetic(m));
        if self.categories.is_empty() {
            return bad("at least one category is required".into());
        }
        if self.width < 32 || self.height < 32 {
            return bad(format!("image size {}x{} is below 32x32", self.width, self.height));
        }
        if self.images == 0 {
            return bad("image count must be positive".into());
        }
        let [lo, hi] = self.object_size;
        if lo == 0 || lo > hi {
            return bad(format!("object size range {lo}..={hi} is empty"));
        }
        if hi > self.width.min(self.height) {
            return bad(format!(
                "shape size {hi} is larger than the {}x{} image",
                self.width, self.height
            ));
        }
        if self.objects_per_image[0] > self.objects_per_image[1] {
            return bad("objects_per_image range is empty".into());
        }
        if let Some(c) = &self.clutter {
            if c.distractors[0] > c.distractors[1] || !(0.0..=1.0).contains(&c.fade) || c.scale <= 0.0 {
                return bad("invalid clutter style".into());
            }
        }
        let registry = self.registry()?;
        if self.active.is_empty() {
            Ok((0..self.categories.len()).collect())
        } else {
            self.active.iter().map(|n| registry.require(n).map(|c| c.0)).collect()
        }
    }
}

/// Seed of image `index` derived from the dataset seed, so images can be
/// rendered in any order.
fn image_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_add(0xD1B5_4A32_D192_ED03).rotate_left(17)
}

struct Canvas {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    mask: Vec<u8>,
}

impl Canvas {
    /// Paints a shape occupying the `size`-pixel square at (x0, y0); returns
    /// the tight pixel bounding box of what was painted.
    fn paint(
        &mut self,
        shape: ShapeKind,
        x0: usize,
        y0: usize,
        size: usize,
        color: [u8; 3],
        label: u8,
    ) -> Option<(usize, usize, usize, usize)> {
        let s = size as f64;
        let (cx, cy) = (x0 as f64 + s / 2.0, y0 as f64 + s / 2.0);
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for py in y0..(y0 + size).min(self.height) {
            for px in x0..(x0 + size).min(self.width) {
                let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);
                let inside = match shape {
                    ShapeKind::Square => true,
                    ShapeKind::Circle => (fx - cx).powi(2) + (fy - cy).powi(2) <= (s / 2.0).powi(2),
                    ShapeKind::Triangle => (fx - cx).abs() <= (fy - y0 as f64) / 2.0,
                };
                if !inside {
                    continue;
                }
                let o = (py * self.width + px) * 3;
                self.pixels[o..o + 3].copy_from_slice(&color);
                if label > 0 {
                    self.mask[py * self.width + px] = label;
                }
                bbox = Some(match bbox {
                    None => (px, py, px + 1, py + 1),
                    Some((a, b, c, d)) => (a.min(px), b.min(py), c.max(px + 1), d.max(py + 1)),
                });
            }
        }
        bbox
    }
}

fn fade(color: [u8; 3], toward: [u8; 3], amount: f64) -> [u8; 3] {
    let mut out = [0u8; 3];
    for i in 0..3 {
        out[i] = (color[i] as f64 * (1.0 - amount) + toward[i] as f64 * amount).round() as u8;
    }
    out
}

/// Renders one image; also returns how many shapes were painted.
fn render(spec: &SyntheticSpec, drawable: &[usize], seed: u64, index: usize) -> Result<(ImageRecord, usize), VocError> {
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, index));
    let (w, h) = (spec.width, spec.height);
    let mut canvas = Canvas {
        width: w,
        height: h,
        pixels: vec![0; w * h * 3],
        mask: vec![0; w * h],
    };
    let bg = &spec.background;
    let amp = bg.noise as i32;
    for px in canvas.pixels.chunks_mut(3) {
        for (c, v) in px.iter_mut().enumerate() {
            let noise = if amp > 0 { rng.gen_range(-amp..=amp) } else { 0 };
            *v = (bg.color[c] as i32 + noise).clamp(0, 255) as u8;
        }
    }

    let mut painted = 0;
    if let Some(clutter) = &spec.clutter {
        let n = rng.gen_range(clutter.distractors[0]..=clutter.distractors[1]);
        for _ in 0..n {
            let cat = &spec.categories[drawable[rng.gen_range(0..drawable.len())]];
            let base = rng.gen_range(spec.object_size[0]..=spec.object_size[1]) as f64;
            let size = ((base * clutter.scale).round() as usize).clamp(2, w.min(h));
            let x0 = rng.gen_range(0..=w - size);
            let y0 = rng.gen_range(0..=h - size);
            if canvas
                .paint(cat.shape, x0, y0, size, fade(cat.color, bg.color, clutter.fade), 0)
                .is_some()
            {
                painted += 1;
            }
        }
    }

    let n_obj = rng.gen_range(spec.objects_per_image[0]..=spec.objects_per_image[1]);
    let mut placed: Vec<(usize, usize, usize)> = Vec::new();
    let mut annotations = Vec::new();
    for _ in 0..n_obj {
        let cat_idx = drawable[rng.gen_range(0..drawable.len())];
        let size = rng.gen_range(spec.object_size[0]..=spec.object_size[1]);
        let mut spot = None;
        for _ in 0..50 {
            let x0 = rng.gen_range(0..=w - size);
            let y0 = rng.gen_range(0..=h - size);
            let clear = placed
                .iter()
                .all(|&(px, py, ps)| x0 >= px + ps || px >= x0 + size || y0 >= py + ps || py >= y0 + size);
            if clear {
                spot = Some((x0, y0));
                break;
            }
        }
        let Some((x0, y0)) = spot else { continue };
        placed.push((x0, y0, size));
        let cat = &spec.categories[cat_idx];
        let label = u8::try_from(annotations.len() + 1).unwrap_or(255);
        if let Some((a, b, c, d)) = canvas.paint(cat.shape, x0, y0, size, cat.color, label) {
            let bbox = BoundingBox::new(a as f64, b as f64, c as f64, d as f64)?;
            annotations.push(Annotation::new(CategoryId(cat_idx), bbox));
            painted += 1;
        }
    }
    let record = ImageRecord::new(
        format!("{}{index:05}", spec.id_prefix),
        w,
        h,
        canvas.pixels,
        annotations,
        Some(canvas.mask),
    )?;
    Ok((record, painted))
}

/// Renders `spec.images` images. Same `(spec, seed)` gives byte-identical
/// output regardless of thread count.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Result<DatasetIndex, VocError> {
    let drawable = spec.validate()?;
    let records = (0..spec.images)
        .into_par_iter()
        .map(|i| render(spec, &drawable, seed, i).map(|(r, _)| Arc::new(r)))
        .collect::<Result<Vec<_>, _>>()?;
    DatasetIndex::new(records, spec.registry()?, Provenance::Synthetic { seed })
}

/// Number of shapes painted into image `index`, annotated or not; used to
/// check that clutter really adds unannotated shapes.
pub fn rendered_shape_count(spec: &SyntheticSpec, seed: u64, index: usize) -> Result<usize, VocError> {
    let drawable = spec.validate()?;
    render(spec, &drawable, seed, index).map(|(_, n)| n)
}

/// Distinct shape/color categories, cycling shapes and a fixed color table.
pub fn shape_palette<S: AsRef<str>>(names: &[S]) -> Vec<ShapeCategory> {
    const COLORS: [[u8; 3]; 8] = [
        [220, 40, 40],
        [40, 40, 220],
        [240, 220, 30],
        [40, 190, 60],
        [200, 60, 210],
        [30, 200, 210],
        [245, 140, 20],
        [250, 250, 250],
    ];
    const KINDS: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];
    names
        .iter()
        .enumerate()
        .map(|(i, n)| ShapeCategory {
            name: n.as_ref().to_string(),
            shape: KINDS[i % 3],
            color: COLORS[(i + i / 8) % 8],
        })
        .collect()
}
