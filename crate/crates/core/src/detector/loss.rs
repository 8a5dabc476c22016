use crate::nn::{Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::voc::{CategoryId, ImageRecord};

use super::{DetectorConfig, DetectorError};

/// Dense per-pass training targets for one query image, each `[A, g, g]`
/// except `class_mask` (`[N, A, g, g]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Targets<T> {
    pub passes: usize,
    pub obj_target: Vec<Tensor<T>>,
    pub obj_weight: Vec<Tensor<T>>,
    pub box_mask: Vec<Tensor<T>>,
    /// `(x, y, sqrt h, sqrt w)` encodings.
    pub box_target: Vec<[Tensor<T>; 4]>,
    pub class_mask: Tensor<T>,
    /// Positive locations per pass.
    pub assigned: Vec<usize>,
}

struct Placement {
    gx: usize,
    gy: usize,
    anchor: usize,
    enc: [f64; 4],
}

fn place(config: &DetectorConfig, scale: (f64, f64), b: &crate::voc::BoundingBox) -> Placement {
    let g = config.grid();
    let cell = config.cell_size();
    let (cx, cy) = b.center();
    let (cxg, cyg) = (cx * scale.0 / cell, cy * scale.1 / cell);
    let (wg, hg) = (b.width() * scale.0 / cell, b.height() * scale.1 / cell);
    let gx = (cxg.floor() as usize).min(g - 1);
    let gy = (cyg.floor() as usize).min(g - 1);
    let mut anchor = 0;
    let mut best = f64::NEG_INFINITY;
    for (a, &[aw, ah]) in config.anchors.iter().enumerate() {
        let inter = wg.min(aw) * hg.min(ah);
        let iou = inter / (wg * hg + aw * ah - inter);
        if iou > best {
            best = iou;
            anchor = a;
        }
    }
    Placement {
        gx,
        gy,
        anchor,
        enc: [cxg - gx as f64, cyg - gy as f64, hg.sqrt(), wg.sqrt()],
    }
}

/// Assigns every usable box of a task category to its center cell and
/// best-IoU anchor in that category's pass. Ignored boxes and boxes of other
/// categories only switch off the no-object penalty at their center cell.
/// When two boxes land on the same slot the first keeps it.
pub fn build_targets<T: Scalar>(
    record: &ImageRecord,
    categories: &[CategoryId],
    config: &DetectorConfig,
) -> Result<Targets<T>, DetectorError> {
    if categories.is_empty() {
        return Err(DetectorError::NoCategories);
    }
    let n = categories.len();
    let (g, a_n) = (config.grid(), config.num_anchors());
    let shape = [a_n, g, g];
    let plane = a_n * g * g;
    let idx = |a: usize, gy: usize, gx: usize| (a * g + gy) * g + gx;
    let scale = (
        config.input_size as f64 / record.width as f64,
        config.input_size as f64 / record.height as f64,
    );

    let mut obj_t = vec![vec![0.0; plane]; n];
    let mut obj_w = vec![vec![config.lambda_noobj; plane]; n];
    let mut mask = vec![vec![0.0; plane]; n];
    let mut enc = vec![[vec![0.0; plane], vec![0.0; plane], vec![0.0; plane], vec![0.0; plane]]; n];
    let mut class = vec![0.0; n * plane];
    let mut assigned = vec![0; n];

    for ann in &record.annotations {
        if !ann.bbox.within(record.width as f64, record.height as f64) {
            return Err(DetectorError::AnnotationOutside(record.id.clone()));
        }
    }
    for ann in &record.annotations {
        if ann.ignored || !categories.contains(&ann.category) {
            let p = place(config, scale, &ann.bbox);
            for w in obj_w.iter_mut() {
                for a in 0..a_n {
                    w[idx(a, p.gy, p.gx)] = 0.0;
                }
            }
        }
    }
    for ann in record.annotations.iter().filter(|a| !a.ignored) {
        let Some(pass) = categories.iter().position(|&c| c == ann.category) else {
            continue;
        };
        let p = place(config, scale, &ann.bbox);
        let i = idx(p.anchor, p.gy, p.gx);
        if mask[pass][i] != 0.0 {
            continue;
        }
        mask[pass][i] = 1.0;
        obj_t[pass][i] = 1.0;
        obj_w[pass][i] = 1.0;
        for (k, v) in p.enc.iter().enumerate() {
            enc[pass][k][i] = *v;
        }
        class[pass * plane + i] = 1.0;
        assigned[pass] += 1;
    }

    let t = |v: &[f64]| Tensor::from_fn(&shape, |j| T::lit(v[j]));
    Ok(Targets {
        passes: n,
        obj_target: obj_t.iter().map(|v| t(v)).collect(),
        obj_weight: obj_w.iter().map(|v| t(v)).collect(),
        box_mask: mask.iter().map(|v| t(v)).collect(),
        box_target: enc.iter().map(|e| [t(&e[0]), t(&e[1]), t(&e[2]), t(&e[3])]).collect(),
        class_mask: Tensor::from_fn(&[n, a_n, g, g], |j| T::lit(class[j])),
        assigned,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub class_ce: Var,
    pub box_reg: Var,
    pub objectness: Var,
}

fn masked_sq_error<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<Var, DetectorError> {
    let d = tape.add_const(pred, &target.map(|v| -v))?;
    let sq = tape.square(d)?;
    let w = tape.mul_const(sq, weight.clone())?;
    Ok(tape.sum(w)?)
}

/// Loss for one query image from its `N` head outputs (one per pass, in the
/// order of the categories the targets were built for).
pub fn detection_loss<T: Scalar>(
    tape: &mut Tape<T>,
    heads: &[Var],
    targets: &Targets<T>,
    config: &DetectorConfig,
) -> Result<LossParts, DetectorError> {
    if heads.is_empty() || heads.len() != targets.passes {
        return Err(DetectorError::NoCategories);
    }
    let a_n = config.num_anchors();
    let g = config.grid();
    let plane = g * g;
    let sqrt_anchor = |k: usize| Tensor::from_fn(&[a_n, g, g], |j| T::lit(config.anchors[j / plane][k].sqrt()));
    let zero = tape.constant(Tensor::scalar(T::zero()))?;
    let mut objectness = zero;
    let mut box_sum = zero;
    let mut scores = Vec::with_capacity(heads.len());
    for (i, &h) in heads.iter().enumerate() {
        let o = tape.select_channels(h, 0, 6, a_n)?;
        let o = tape.sigmoid(o)?;
        let term = masked_sq_error(tape, o, &targets.obj_target[i], &targets.obj_weight[i])?;
        objectness = tape.add(objectness, term)?;

        if targets.assigned[i] > 0 {
            let x = tape.select_channels(h, 1, 6, a_n)?;
            let x = tape.sigmoid(x)?;
            let y = tape.select_channels(h, 2, 6, a_n)?;
            let y = tape.sigmoid(y)?;
            let mut sizes = [x, y, x, y];
            for (slot, (ch, anchor_dim)) in [(3usize, 1usize), (4, 0)].into_iter().enumerate() {
                let raw = tape.select_channels(h, ch, 6, a_n)?;
                let half = tape.scale(raw, T::lit(0.5))?;
                let e = tape.exp(half)?;
                sizes[2 + slot] = tape.mul_const(e, sqrt_anchor(anchor_dim))?;
            }
            for (k, &pred) in sizes.iter().enumerate() {
                let term = masked_sq_error(tape, pred, &targets.box_target[i][k], &targets.box_mask[i])?;
                box_sum = tape.add(box_sum, term)?;
            }
        }
        scores.push(tape.select_channels(h, 5, 6, a_n)?);
    }
    let stacked = tape.stack(&scores)?;
    let logp = tape.log_softmax(stacked, 0)?;
    let picked = tape.mul_const(logp, targets.class_mask.clone())?;
    let picked = tape.sum(picked)?;
    let class_ce = tape.scale(picked, -T::one())?;
    let box_reg = tape.scale(box_sum, T::lit(config.box_weight))?;
    let partial = tape.add(objectness, box_reg)?;
    let total = tape.add(partial, class_ce)?;
    Ok(LossParts {
        total,
        class_ce,
        box_reg,
        objectness,
    })
}
