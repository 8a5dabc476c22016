//! Detections as text: `image_id category confidence x_min y_min x_max y_max`
//! per line, in-memory pixel coordinates.

use std::fmt::Write as _;

use crate::voc::{BoundingBox, CategoryRegistry};

use super::{Detection, EvalError};

pub fn write_detections(detections: &[Detection], registry: &CategoryRegistry) -> String {
    let mut out = String::new();
    for d in detections {
        let b = &d.bbox;
        writeln!(
            out,
            "{} {} {} {} {} {} {}",
            d.image_id,
            registry.name(d.category),
            d.confidence,
            b.x_min,
            b.y_min,
            b.x_max,
            b.y_max
        )
        .unwrap();
    }
    out
}

pub fn parse_detections(text: &str, registry: &CategoryRegistry) -> Result<Vec<Detection>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |reason: String| EvalError::Parse { line: i + 1, reason };
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", f.len())));
        }
        let category = registry
            .lookup(f[1])
            .ok_or_else(|| err(format!("unknown category `{}`", f[1])))?;
        let num = |s: &str| s.parse::<f64>().map_err(|_| err(format!("`{s}` is not a number")));
        let confidence = num(f[2])?;
        if !confidence.is_finite() {
            return Err(err("non-finite confidence".into()));
        }
        let bbox = BoundingBox::new(num(f[3])?, num(f[4])?, num(f[5])?, num(f[6])?).map_err(|e| err(e.to_string()))?;
        out.push(Detection {
            image_id: f[0].to_string(),
            category,
            confidence,
            bbox,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voc::CategoryId;

    #[test]
    fn round_trip_exact() {
        let reg = CategoryRegistry::new(["bird", "cucumber"]).unwrap();
        let d = vec![Detection {
            image_id: "img_001".into(),
            category: CategoryId(1),
            confidence: 0.1 + 0.2,
            bbox: BoundingBox::new(1.25, 2.0, 30.0 / 7.0, 9.0).unwrap(),
        }];
        let text = write_detections(&d, &reg);
        assert_eq!(parse_detections(&text, &reg).unwrap(), d);
    }

    #[test]
    fn errors_carry_line() {
        let reg = CategoryRegistry::new(["bird"]).unwrap();
        let e = parse_detections("a bird 0.5 0 0 1 1\nb dog 0.5 0 0 1 1\n", &reg).unwrap_err();
        assert!(matches!(e, EvalError::Parse { line: 2, .. }));
        assert!(parse_detections("a bird 0.5 0 0 1\n", &reg).is_err());
        assert!(parse_detections("a bird 0.5 3 0 1 1\n", &reg).is_err());
    }
}
