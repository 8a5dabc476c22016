//! Pixelwise intensity maps applied through 256-entry lookup tables.

use crate::voc::ImageRecord;

pub type Lut = [u8; 256];

/// Gamma correction table. With `brighten`, `v' = 255 (v/255)^(1/gamma)`;
/// otherwise the exponent is `gamma` itself.
pub fn gamma_lut(gamma: f64, brighten: bool) -> Lut {
    assert!(gamma > 0.0, "gamma factor must be positive");
    let exponent = if brighten { 1.0 / gamma } else { gamma };
    let mut lut = [0u8; 256];
    for (v, out) in lut.iter_mut().enumerate() {
        *out = (255.0 * (v as f64 / 255.0).powf(exponent)).round() as u8;
    }
    lut
}

/// Linear stretch about mid-gray: `clamp(round(128 + factor (v - 128)))`.
pub fn contrast_lut(factor: f64) -> Lut {
    assert!(factor > 0.0, "contrast factor must be positive");
    let mut lut = [0u8; 256];
    for (v, out) in lut.iter_mut().enumerate() {
        *out = (128.0 + factor * (v as f64 - 128.0)).round().clamp(0.0, 255.0) as u8;
    }
    lut
}

pub fn apply_lut(record: &ImageRecord, lut: &Lut) -> ImageRecord {
    ImageRecord {
        pixels: record.pixels.iter().map(|&v| lut[v as usize]).collect(),
        ..record.clone()
    }
}

pub fn adjust_illuminance(record: &ImageRecord, gamma_factor: f64) -> ImageRecord {
    apply_lut(record, &gamma_lut(gamma_factor, true))
}

pub fn adjust_contrast(record: &ImageRecord, contrast_factor: f64) -> ImageRecord {
    apply_lut(record, &contrast_lut(contrast_factor))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_endpoints_fixed() {
        for g in [0.5, 1.0, 1.5, 3.0] {
            let lut = gamma_lut(g, true);
            assert_eq!((lut[0], lut[255]), (0, 255));
        }
    }

    #[test]
    fn unit_factors_are_identity() {
        let g = gamma_lut(1.0, true);
        let c = contrast_lut(1.0);
        for v in 0..256 {
            assert_eq!(g[v] as usize, v);
            assert_eq!(c[v] as usize, v);
        }
    }

    #[test]
    fn gamma_brightens() {
        let lut = gamma_lut(1.5, true);
        assert!((1..255).all(|v| lut[v] as usize >= v));
        // 255 * (128/255)^(2/3) = 161.06...
        assert_eq!(lut[128], 161);
        let darken = gamma_lut(1.5, false);
        assert!(darken[128] < 128);
    }

    #[test]
    fn contrast_midpoint_and_clamp() {
        for f in [0.5, 2.0, 4.0] {
            assert_eq!(contrast_lut(f)[128], 128);
        }
        let lut = contrast_lut(2.0);
        assert_eq!(lut[0], 0);
        assert_eq!(lut[200], 255);
        assert_eq!(lut[100], 72);
    }

    #[test]
    fn image_map_keeps_annotations() {
        let rec = ImageRecord::new("a", 2, 1, vec![0, 64, 128, 192, 255, 10], vec![], None).unwrap();
        let out = adjust_contrast(&rec, 2.0);
        assert_eq!(out.pixels, vec![0, 0, 128, 255, 255, 0]);
        assert_eq!(out.annotations, rec.annotations);
    }
}
