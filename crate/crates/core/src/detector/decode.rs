use crate::eval::{iou, ranking_order, Detection};
use crate::scalar::Scalar;
use crate::voc::{BoundingBox, CategoryId};

use super::{DetectorConfig, DetectorError, GridPrediction};

/// Softmax of the class scores across the `N` passes at every location;
/// `out[i][loc]` is the probability of pass `i`.
pub fn calibrate_scores<T: Scalar>(preds: &[GridPrediction<T>]) -> Result<Vec<Vec<T>>, DetectorError> {
    let first = preds.first().ok_or(DetectorError::NoCategories)?;
    let locs = first.locations();
    let mut out = vec![vec![T::zero(); locs]; preds.len()];
    for loc in 0..locs {
        let scores: Vec<T> = preds.iter().map(|p| p.values[loc * 6 + 5]).collect();
        let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
        let total = exps.iter().fold(T::zero(), |a, &b| a + b);
        for (i, e) in exps.into_iter().enumerate() {
            out[i][loc] = e / total;
        }
    }
    Ok(out)
}

/// Greedy per-category suppression: a detection is dropped when it overlaps
/// a higher-ranked kept detection of its category at IoU >= `iou_threshold`.
pub fn nms(mut detections: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    detections.sort_by(ranking_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in detections {
        if kept
            .iter()
            .all(|k| k.category != d.category || iou(&k.bbox, &d.bbox) < iou_threshold)
        {
            kept.push(d);
        }
    }
    kept
}

/// Confidence = objectness x calibrated probability; locations at or above
/// the threshold become boxes, clamped to the network input and rescaled to
/// `image_size`, then suppressed per category.
pub fn decode_predictions<T: Scalar>(
    preds: &[GridPrediction<T>],
    categories: &[CategoryId],
    config: &DetectorConfig,
    image_id: &str,
    image_size: (usize, usize),
) -> Result<Vec<Detection>, DetectorError> {
    if preds.len() != categories.len() {
        return Err(DetectorError::NoCategories);
    }
    let probs = calibrate_scores(preds)?;
    let cell = config.cell_size();
    let input = config.input_size as f64;
    let (sx, sy) = (image_size.0 as f64 / input, image_size.1 as f64 / input);
    let mut out = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        for gy in 0..p.grid_h {
            for gx in 0..p.grid_w {
                for a in 0..p.anchors {
                    let loc = (gy * p.grid_w + gx) * p.anchors + a;
                    let v: Vec<f64> = p.at(gy, gx, a).iter().map(|x| x.to_f64_lossy()).collect();
                    let conf = v[0] * probs[i][loc].to_f64_lossy();
                    if !(conf > 0.0 && conf >= config.objectness_threshold) {
                        continue;
                    }
                    let (cx, cy) = ((gx as f64 + v[1]) * cell, (gy as f64 + v[2]) * cell);
                    let (h, w) = (v[3] * cell, v[4] * cell);
                    let raw = BoundingBox {
                        x_min: cx - w / 2.0,
                        y_min: cy - h / 2.0,
                        x_max: cx + w / 2.0,
                        y_max: cy + h / 2.0,
                    };
                    let Some(b) = raw.clamp_to(input, input) else { continue };
                    out.push(Detection {
                        image_id: image_id.to_string(),
                        category: categories[i],
                        confidence: conf,
                        bbox: b.scale(sx, sy),
                    });
                }
            }
        }
    }
    Ok(nms(out, config.nms_iou))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use proptest::prelude::*;

    fn grid(o: f64, c: f64) -> GridPrediction<f64> {
        let mut values = vec![0.0; 8 * 8 * 2 * 6];
        for loc in 0..128 {
            values[loc * 6..loc * 6 + 6].copy_from_slice(&[o, 0.5, 0.5, 2.0, 2.0, c]);
        }
        GridPrediction {
            grid_h: 8,
            grid_w: 8,
            anchors: 2,
            values,
        }
    }

    #[test]
    fn calibration_cases() {
        let one = calibrate_scores(&[grid(0.5, 3.0)]).unwrap();
        assert!(one[0].iter().all(|&p| p == 1.0));
        let four = calibrate_scores(&[grid(0.5, 1.0), grid(0.5, 1.0), grid(0.5, 1.0), grid(0.5, 1.0)]).unwrap();
        assert!(four.iter().flatten().all(|&p| p == 0.25));
        assert!(calibrate_scores::<f64>(&[]).is_err());
        let a = calibrate_scores(&[grid(0.5, 1.0), grid(0.5, -2.0)]).unwrap();
        let b = calibrate_scores(&[grid(0.5, 11.0), grid(0.5, 8.0)]).unwrap();
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_objectness_decodes_nothing() {
        let cfg = DetectorConfig::default();
        let d = decode_predictions(&[grid(0.0, 0.0)], &[CategoryId(0)], &cfg, "x", (64, 64)).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn hand_decode() {
        let cfg = DetectorConfig::default();
        let mut g = grid(0.0, 0.0);
        let o = ((3 * 8 + 2) * 2 + 1) * 6;
        g.values[o..o + 6].copy_from_slice(&[0.9, 0.25, 0.75, 1.5, 3.0, 0.0]);
        let d = decode_predictions(&[g], &[CategoryId(4)], &cfg, "x", (128, 64)).unwrap();
        assert_eq!(d.len(), 1);
        // center (2.25 * 8, 3.75 * 8) = (18, 30); size 24 x 12 px; x doubled
        let b = d[0].bbox;
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (12.0, 24.0, 60.0, 36.0));
        assert_eq!(d[0].confidence, 0.9);
        assert_eq!(d[0].category, CategoryId(4));
    }

    #[test]
    fn duplicates_collapse() {
        let b = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let mk = |c: usize, conf: f64| Detection {
            image_id: "i".into(),
            category: CategoryId(c),
            confidence: conf,
            bbox: b,
        };
        let kept = nms(vec![mk(0, 0.5), mk(0, 0.7), mk(1, 0.6)], 0.45);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].confidence, 0.7);
    }

    #[test]
    fn encode_decode_round_trip() {
        let cfg = DetectorConfig::default();
        let gt = BoundingBox::new(13.0, 21.0, 31.0, 50.0).unwrap();
        let rec = crate::voc::ImageRecord::new(
            "r",
            64,
            64,
            vec![0; 64 * 64 * 3],
            vec![crate::voc::Annotation::new(CategoryId(0), gt)],
            None,
        )
        .unwrap();
        let t = super::super::build_targets::<f64>(&rec, &[CategoryId(0)], &cfg).unwrap();
        let loc = t.box_mask[0].data().iter().position(|&v| v == 1.0).unwrap();
        let (a, gy, gx) = (loc / 64, (loc % 64) / 8, loc % 8);
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let mut head = Tensor::<f64>::zeros(&[12, 8, 8]);
        let hd = head.data_mut();
        let plane = |k: usize| (a * 6 + k) * 64 + gy * 8 + gx;
        hd[plane(0)] = 5.0;
        hd[plane(1)] = logit(t.box_target[0][0].data()[loc]);
        hd[plane(2)] = logit(t.box_target[0][1].data()[loc]);
        hd[plane(3)] = 2.0 * (t.box_target[0][2].data()[loc] / cfg.anchors[a][1].sqrt()).ln();
        hd[plane(4)] = 2.0 * (t.box_target[0][3].data()[loc] / cfg.anchors[a][0].sqrt()).ln();
        for (i, v) in hd.iter_mut().enumerate() {
            if (i / 64) % 6 == 0 && i != plane(0) {
                *v = -20.0;
            }
        }
        let p = GridPrediction::from_head(&head, &cfg.anchors);
        let d = decode_predictions(&[p], &[CategoryId(0)], &cfg, "r", (64, 64)).unwrap();
        assert_eq!(d.len(), 1);
        let b = d[0].bbox;
        for (x, y) in [
            (b.x_min, gt.x_min),
            (b.y_min, gt.y_min),
            (b.x_max, gt.x_max),
            (b.y_max, gt.y_max),
        ] {
            assert!((x - y).abs() < 1e-4, "{b:?}");
        }
    }

    fn brute_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
        let mut sorted = dets.to_vec();
        sorted.sort_by(ranking_order);
        let mut alive = vec![true; sorted.len()];
        for i in 0..sorted.len() {
            if !alive[i] {
                continue;
            }
            for j in i + 1..sorted.len() {
                if sorted[i].category == sorted[j].category && iou(&sorted[i].bbox, &sorted[j].bbox) >= thr {
                    alive[j] = false;
                }
            }
        }
        sorted
            .into_iter()
            .zip(alive)
            .filter(|(_, a)| *a)
            .map(|(d, _)| d)
            .collect()
    }

    proptest! {
        #[test]
        fn nms_matches_pairwise_oracle(raw in proptest::collection::vec((0usize..2, 1u8..20, 0u8..10, 0u8..10, 1u8..8, 1u8..8), 0..10)) {
            let dets: Vec<Detection> = raw.into_iter().map(|(c, conf, x, y, w, h)| Detection {
                image_id: "i".into(),
                category: CategoryId(c),
                confidence: conf as f64 / 20.0,
                bbox: BoundingBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64).unwrap(),
            }).collect();
            prop_assert_eq!(nms(dets.clone(), 0.45), brute_nms(&dets, 0.45));
        }
    }
}
