use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::voc::{DatasetIndex, ImageRecord, Provenance};

use super::AugmentError;

/// Stable 64-bit FNV-1a hash, used to derive per-record seeds.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

pub(crate) fn record_seed(seed: u64, id: &str) -> u64 {
    fnv1a(id.as_bytes()) ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Nearest-neighbour resize: output pixel (x, y) samples source pixel
/// (x * src_w / w, y * src_h / h).
pub fn resize_nearest(pixels: &[u8], src_w: usize, src_h: usize, w: usize, h: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let sy = y * src_h / h;
        for x in 0..w {
            let sx = x * src_w / w;
            let o = (sy * src_w + sx) * 3;
            out.extend_from_slice(&pixels[o..o + 3]);
        }
    }
    out
}

/// Keeps foreground pixels (mask nonzero) and takes every other pixel from
/// `background`, resized to the record's size. Annotations and mask are
/// unchanged.
pub fn replace_background(record: &ImageRecord, background: &ImageRecord) -> Result<ImageRecord, AugmentError> {
    let mask = record
        .mask
        .as_ref()
        .ok_or_else(|| AugmentError::MissingMask(record.id.clone()))?;
    let bg = resize_nearest(
        &background.pixels,
        background.width,
        background.height,
        record.width,
        record.height,
    );
    let mut pixels = bg;
    for (i, &m) in mask.iter().enumerate() {
        if m != 0 {
            pixels[i * 3..i * 3 + 3].copy_from_slice(&record.pixels[i * 3..i * 3 + 3]);
        }
    }
    Ok(ImageRecord {
        pixels,
        ..record.clone()
    })
}

/// Replaces each record's background with probability `p`, drawing the
/// background uniformly from `backgrounds`. Each record's draw depends only
/// on `(seed, record id)`.
pub fn apply_br_to_dataset(
    base: &DatasetIndex,
    backgrounds: &[Arc<ImageRecord>],
    p: f64,
    seed: u64,
) -> Result<DatasetIndex, AugmentError> {
    if backgrounds.is_empty() {
        return Err(AugmentError::EmptyBackgroundPool);
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(AugmentError::InvalidParameter(format!("replacement probability {p}")));
    }
    let records = base
        .records()
        .par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(record_seed(seed, &r.id));
            let draw: f64 = rng.gen();
            let pick = rng.gen_range(0..backgrounds.len());
            if draw < p {
                replace_background(r, &backgrounds[pick]).map(Arc::new)
            } else {
                Ok(Arc::clone(r))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DatasetIndex::new(
        records,
        base.categories().clone(),
        Provenance::Derived(format!("br(p={p},seed={seed},{})", base.provenance)),
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, w: usize, h: usize, fill: u8, mask: Option<Vec<u8>>) -> ImageRecord {
        let pixels = (0..w * h * 3).map(|i| fill.wrapping_add(i as u8)).collect();
        ImageRecord::new(id, w, h, pixels, vec![], mask).unwrap()
    }

    #[test]
    fn all_zero_mask_gives_background() {
        let r = rec("a", 4, 3, 10, Some(vec![0; 12]));
        let bg = rec("bg", 4, 3, 200, None);
        assert_eq!(replace_background(&r, &bg).unwrap().pixels, bg.pixels);
    }

    #[test]
    fn full_mask_is_identity() {
        let r = rec("a", 4, 3, 10, Some(vec![1; 12]));
        let bg = rec("bg", 8, 8, 200, None);
        assert_eq!(replace_background(&r, &bg).unwrap(), r);
    }

    #[test]
    fn missing_mask_is_an_error() {
        let r = rec("a", 4, 3, 10, None);
        let bg = rec("bg", 4, 3, 200, None);
        assert!(matches!(replace_background(&r, &bg), Err(AugmentError::MissingMask(_))));
    }

    #[test]
    fn nearest_resize_picks_expected_source() {
        let src: Vec<u8> = (0..2 * 2 * 3).map(|i| i as u8).collect();
        let out = resize_nearest(&src, 2, 2, 4, 4);
        // output (3, 1) samples source (1, 0)
        assert_eq!(&out[21..24], &src[3..6]);
    }
}
