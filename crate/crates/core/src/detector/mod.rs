//! Feature learner D, reweighter M, prediction head P, loss and decoding.

mod decode;
mod loss;

pub use decode::{calibrate_scores, decode_predictions, nms};
pub use loss::{build_targets, detection_loss, LossParts, Targets};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::resize_nearest;
use crate::eval::Detection;
use crate::nn::{sigmoid, NnError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::voc::{BoundingBox, CategoryId, ImageRecord};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("invalid detector config: {0}")]
    InvalidConfig(String),
    #[error("input must be {expected:?}, got {got:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("support box {0} covers no pixels")]
    DegenerateBox(String),
    #[error("record `{0}`: annotation outside the image")]
    AnnotationOutside(String),
    #[error("at least one category pass is required")]
    NoCategories,
    #[error("reweight vector has {got} entries, features have {expected} channels")]
    ReweightLength { expected: usize, got: usize },
    #[error("parameters do not match the architecture: {0}")]
    ParamLayout(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    /// Square network input side, in pixels.
    pub input_size: usize,
    /// Output channels of each conv + pool stage.
    pub widths: Vec<usize>,
    /// Meta-feature channels `m`.
    pub meta_channels: usize,
    /// `(width, height)` in grid cells.
    pub anchors: Vec<[f64; 2]>,
    pub leaky_slope: f64,
    pub lambda_noobj: f64,
    pub box_weight: f64,
    pub objectness_threshold: f64,
    pub nms_iou: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            widths: vec![8, 16, 32],
            meta_channels: 32,
            anchors: vec![[1.5, 3.5], [3.0, 1.5]],
            leaky_slope: 0.1,
            lambda_noobj: 0.5,
            box_weight: 5.0,
            objectness_threshold: 0.1,
            nms_iou: 0.45,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: String| Err(DetectorError::InvalidConfig(m));
        if self.widths.is_empty() || self.widths.contains(&0) || self.meta_channels == 0 {
            return bad("channel widths must be nonempty and positive".into());
        }
        let down = 1usize << self.widths.len();
        if self.input_size == 0 || !self.input_size.is_multiple_of(down) {
            return bad(format!("input size {} is not a multiple of {down}", self.input_size));
        }
        if self.anchors.is_empty() || self.anchors.iter().flatten().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("anchors must be nonempty with positive sizes".into());
        }
        for (name, v) in [
            ("leaky_slope", self.leaky_slope),
            ("lambda_noobj", self.lambda_noobj),
            ("box_weight", self.box_weight),
            ("objectness_threshold", self.objectness_threshold),
            ("nms_iou", self.nms_iou),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.input_size >> self.widths.len()
    }

    pub fn cell_size(&self) -> f64 {
        (1usize << self.widths.len()) as f64
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Clone, Debug)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
}

/// Parameter leaves of one network, bound to a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    d: Vec<(Var, Var)>,
    m: Vec<(Var, Var)>,
    head: (Var, Var),
}

#[derive(Clone, Debug)]
pub struct Detector<T> {
    config: DetectorConfig,
    params: ParamStore<T>,
    d: Vec<Layer>,
    m: Vec<Layer>,
    head: Layer,
}

fn stack_shapes(config: &DetectorConfig, in_channels: usize) -> Vec<[usize; 4]> {
    let mut shapes = Vec::new();
    let mut cin = in_channels;
    for &w in &config.widths {
        shapes.push([w, cin, 3, 3]);
        cin = w;
    }
    shapes.push([config.meta_channels, cin, 3, 3]);
    shapes
}

impl<T: Scalar> Detector<T> {
    /// Uniform fan-in initialization from `seed`; biases start at zero.
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self, DetectorError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut init = |store: &mut ParamStore<T>, name: &str, shape: [usize; 4], gain: f64| {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let bound = (gain / fan_in).sqrt();
            let w = Tensor::from_fn(&shape, |_| T::lit(rng.gen_range(-bound..bound)));
            let weight = store.add(format!("{name}.weight"), w)?;
            let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[shape[0]]))?;
            Ok::<_, DetectorError>(Layer { weight, bias })
        };
        let d = stack_shapes(&config, 3)
            .into_iter()
            .enumerate()
            .map(|(i, s)| init(&mut store, &format!("d.conv{i}"), s, 6.0))
            .collect::<Result<Vec<_>, _>>()?;
        let m = stack_shapes(&config, 4)
            .into_iter()
            .enumerate()
            .map(|(i, s)| init(&mut store, &format!("m.conv{i}"), s, 6.0))
            .collect::<Result<Vec<_>, _>>()?;
        let head = init(
            &mut store,
            "p",
            [config.num_anchors() * 6, config.meta_channels, 1, 1],
            3.0,
        )?;
        Ok(Self {
            config,
            params: store,
            d,
            m,
            head,
        })
    }

    /// Wraps existing parameters, checking names and shapes.
    pub fn from_params(config: DetectorConfig, params: ParamStore<T>) -> Result<Self, DetectorError> {
        let reference = Self::new(config, 0)?;
        if !reference.params.same_layout(&params) {
            return Err(DetectorError::ParamLayout(format!(
                "expected {} tensors totalling {} values",
                reference.params.len(),
                reference.params.numel()
            )));
        }
        Ok(Self { params, ..reference })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn cast<U: Scalar>(&self) -> Detector<U> {
        Detector {
            config: self.config.clone(),
            params: self.params.cast(),
            d: self.d.clone(),
            m: self.m.clone(),
            head: self.head.clone(),
        }
    }

    /// Places every parameter on the tape once.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<Bound, DetectorError> {
        let mut leaf = |l: &Layer| -> Result<(Var, Var), NnError> {
            Ok((tape.param(&self.params, l.weight)?, tape.param(&self.params, l.bias)?))
        };
        let d = self.d.iter().map(&mut leaf).collect::<Result<_, _>>()?;
        let m = self.m.iter().map(&mut leaf).collect::<Result<_, _>>()?;
        let head = leaf(&self.head)?;
        Ok(Bound { d, m, head })
    }

    fn check_input(&self, tape: &Tape<T>, x: Var, channels: usize) -> Result<(), DetectorError> {
        let expected = vec![channels, self.config.input_size, self.config.input_size];
        if tape.shape(x) != expected.as_slice() {
            return Err(DetectorError::InputShape {
                expected,
                got: tape.shape(x).to_vec(),
            });
        }
        Ok(())
    }

    fn conv_stack(&self, tape: &mut Tape<T>, layers: &[(Var, Var)], x: Var) -> Result<Var, DetectorError> {
        let slope = T::lit(self.config.leaky_slope);
        let (last, stages) = layers.split_last().expect("stack has a final layer");
        let mut h = x;
        for &(w, b) in stages {
            h = tape.conv2d(h, w, 1, 1)?;
            h = tape.add_channel_bias(h, b)?;
            h = tape.leaky_relu(h, slope)?;
            h = tape.max_pool2x2(h)?;
        }
        h = tape.conv2d(h, last.0, 1, 1)?;
        h = tape.add_channel_bias(h, last.1)?;
        Ok(tape.leaky_relu(h, slope)?)
    }

    /// D: `[3, s, s]` image to `[m, g, g]` meta features.
    pub fn features_on(&self, tape: &mut Tape<T>, bound: &Bound, image: Var) -> Result<Var, DetectorError> {
        self.check_input(tape, image, 3)?;
        self.conv_stack(tape, &bound.d, image)
    }

    /// M: `[4, s, s]` RGB + box mask to a length-`m` reweighting vector.
    pub fn embed_on(&self, tape: &mut Tape<T>, bound: &Bound, support: Var) -> Result<Var, DetectorError> {
        self.check_input(tape, support, 4)?;
        let h = self.conv_stack(tape, &bound.m, support)?;
        Ok(tape.global_max_pool(h)?)
    }

    /// P applied to `F`, or to `F ⊗ w` when a reweighting vector is given.
    /// Output `[A * 6, g, g]`, channel `a * 6 + k` for k in (o, x, y, h, w, c).
    pub fn head_on(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        features: Var,
        w: Option<Var>,
    ) -> Result<Var, DetectorError> {
        let f = match w {
            Some(w) => {
                let (m, got) = (tape.shape(features)[0], tape.shape(w).iter().product());
                if m != got {
                    return Err(DetectorError::ReweightLength { expected: m, got });
                }
                tape.channel_scale(features, w)?
            }
            None => features,
        };
        let h = tape.conv2d(f, bound.head.0, 1, 0)?;
        Ok(tape.add_channel_bias(h, bound.head.1)?)
    }

    /// Batch-averaged loss of one episode. Each category's reweighting
    /// vector is the mean embedding of its exemplars; every query image runs
    /// one pass per category.
    pub fn episode_loss(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        supports: &[Vec<Tensor<T>>],
        queries: &[(Tensor<T>, Targets<T>)],
    ) -> Result<LossParts, DetectorError> {
        if supports.is_empty() || supports.iter().any(Vec::is_empty) {
            return Err(DetectorError::NoCategories);
        }
        let mut vectors = Vec::with_capacity(supports.len());
        for exemplars in supports {
            let embedded = exemplars
                .iter()
                .map(|s| {
                    let x = tape.constant(s.clone())?;
                    self.embed_on(tape, bound, x)
                })
                .collect::<Result<Vec<_>, _>>()?;
            vectors.push(tape.mean_of(&embedded)?);
        }
        let mut parts: Option<LossParts> = None;
        for (image, targets) in queries {
            let x = tape.constant(image.clone())?;
            let f = self.features_on(tape, bound, x)?;
            let heads = vectors
                .iter()
                .map(|&w| self.head_on(tape, bound, f, Some(w)))
                .collect::<Result<Vec<_>, _>>()?;
            let l = detection_loss(tape, &heads, targets, &self.config)?;
            parts = Some(match parts {
                None => l,
                Some(p) => LossParts {
                    total: tape.add(p.total, l.total)?,
                    class_ce: tape.add(p.class_ce, l.class_ce)?,
                    box_reg: tape.add(p.box_reg, l.box_reg)?,
                    objectness: tape.add(p.objectness, l.objectness)?,
                },
            });
        }
        let p = parts.ok_or_else(|| DetectorError::InvalidConfig("empty query batch".into()))?;
        let inv = T::one() / T::lit(queries.len() as f64);
        Ok(LossParts {
            total: tape.scale(p.total, inv)?,
            class_ce: tape.scale(p.class_ce, inv)?,
            box_reg: tape.scale(p.box_reg, inv)?,
            objectness: tape.scale(p.objectness, inv)?,
        })
    }

    pub fn extract_features(&self, image: &Tensor<T>) -> Result<Tensor<T>, DetectorError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let x = tape.constant(image.clone())?;
        let f = self.features_on(&mut tape, &bound, x)?;
        Ok(tape.value(f).clone())
    }

    pub fn embed_support(&self, support: &Tensor<T>) -> Result<Tensor<T>, DetectorError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let x = tape.constant(support.clone())?;
        let w = self.embed_on(&mut tape, &bound, x)?;
        Ok(tape.value(w).clone())
    }

    /// Mean reweighting vector over exemplars `(record, box)`.
    pub fn class_vector(&self, exemplars: &[(&ImageRecord, BoundingBox)]) -> Result<Tensor<T>, DetectorError> {
        let mut acc: Option<Tensor<T>> = None;
        for (rec, bbox) in exemplars {
            let v = self.embed_support(&support_tensor(rec, bbox, self.config.input_size)?)?;
            match &mut acc {
                Some(a) => a.add_assign(&v),
                None => acc = Some(v),
            }
        }
        let acc = acc.ok_or(DetectorError::NoCategories)?;
        let n = T::lit(exemplars.len() as f64);
        Ok(acc.map(|v| v / n))
    }

    pub fn predict(&self, features: &Tensor<T>, w: Option<&Tensor<T>>) -> Result<GridPrediction<T>, DetectorError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let f = tape.constant(features.clone())?;
        let w = w.map(|w| tape.constant(w.clone())).transpose()?;
        let h = self.head_on(&mut tape, &bound, f, w)?;
        Ok(GridPrediction::from_head(tape.value(h), &self.config.anchors))
    }

    /// One pass per `(category, vector)`, calibrated and decoded to boxes in
    /// the record's own pixel coordinates.
    pub fn detect(
        &self,
        record: &ImageRecord,
        classes: &[(CategoryId, Tensor<T>)],
    ) -> Result<Vec<Detection>, DetectorError> {
        if classes.is_empty() {
            return Err(DetectorError::NoCategories);
        }
        let features = self.extract_features(&image_tensor(record, self.config.input_size))?;
        let preds = classes
            .iter()
            .map(|(_, w)| self.predict(&features, Some(w)))
            .collect::<Result<Vec<_>, _>>()?;
        let cats: Vec<CategoryId> = classes.iter().map(|(c, _)| *c).collect();
        decode_predictions(&preds, &cats, &self.config, &record.id, (record.width, record.height))
    }
}

/// Per-location head outputs after the output nonlinearities, laid out
/// `(grid_h, grid_w, anchors, 6)` as `(o, x, y, h, w, c)`: `o`, `x`, `y`
/// through a sigmoid, `h`, `w` in grid cells, `c` raw.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPrediction<T> {
    pub grid_h: usize,
    pub grid_w: usize,
    pub anchors: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> GridPrediction<T> {
    pub fn from_head(head: &Tensor<T>, anchors: &[[f64; 2]]) -> Self {
        let (a_n, gh, gw) = (anchors.len(), head.shape()[1], head.shape()[2]);
        let hd = head.data();
        let mut values = vec![T::zero(); gh * gw * a_n * 6];
        for gy in 0..gh {
            for gx in 0..gw {
                for (a, anchor) in anchors.iter().enumerate() {
                    let raw = |k: usize| hd[((a * 6 + k) * gh + gy) * gw + gx];
                    let o = ((gy * gw + gx) * a_n + a) * 6;
                    values[o] = sigmoid(raw(0));
                    values[o + 1] = sigmoid(raw(1));
                    values[o + 2] = sigmoid(raw(2));
                    values[o + 3] = T::lit(anchor[1]) * raw(3).exp();
                    values[o + 4] = T::lit(anchor[0]) * raw(4).exp();
                    values[o + 5] = raw(5);
                }
            }
        }
        Self {
            grid_h: gh,
            grid_w: gw,
            anchors: a_n,
            values,
        }
    }

    pub fn locations(&self) -> usize {
        self.grid_h * self.grid_w * self.anchors
    }

    /// The six values at `(gy, gx, a)`.
    pub fn at(&self, gy: usize, gx: usize, a: usize) -> &[T] {
        let o = ((gy * self.grid_w + gx) * self.anchors + a) * 6;
        &self.values[o..o + 6]
    }
}

/// Plain channel-wise product `F[c, y, x] * w[c]`.
pub fn reweight<T: Scalar>(features: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>, DetectorError> {
    let m = features.shape()[0];
    if w.len() != m {
        return Err(DetectorError::ReweightLength {
            expected: m,
            got: w.len(),
        });
    }
    let hw = features.len() / m;
    let mut out = features.clone();
    for (c, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
        chunk.iter_mut().for_each(|v| *v *= w.data()[c]);
    }
    Ok(out)
}

fn resized_pixels(record: &ImageRecord, size: usize) -> std::borrow::Cow<'_, [u8]> {
    if record.width == size && record.height == size {
        std::borrow::Cow::Borrowed(&record.pixels)
    } else {
        std::borrow::Cow::Owned(resize_nearest(&record.pixels, record.width, record.height, size, size))
    }
}

/// `[3, s, s]` tensor with values in `[0, 1]`, nearest-neighbour resized.
pub fn image_tensor<T: Scalar>(record: &ImageRecord, size: usize) -> Tensor<T> {
    let px = resized_pixels(record, size);
    let plane = size * size;
    Tensor::from_fn(&[3, size, size], |i| {
        let (c, p) = (i / plane, i % plane);
        T::lit(px[p * 3 + c] as f64 / 255.0)
    })
}

/// `[4, s, s]`: the image channels plus a mask of pixels whose centers lie
/// inside `bbox` (in record coordinates).
pub fn support_tensor<T: Scalar>(
    record: &ImageRecord,
    bbox: &BoundingBox,
    size: usize,
) -> Result<Tensor<T>, DetectorError> {
    let img = image_tensor::<T>(record, size);
    let (sx, sy) = (size as f64 / record.width as f64, size as f64 / record.height as f64);
    let b = bbox.scale(sx, sy);
    let plane = size * size;
    let mut data = img.into_data();
    data.reserve(plane);
    let mut covered = 0usize;
    for y in 0..size {
        let yc = y as f64 + 0.5;
        for x in 0..size {
            let xc = x as f64 + 0.5;
            let inside = xc >= b.x_min && xc < b.x_max && yc >= b.y_min && yc < b.y_max;
            covered += inside as usize;
            data.push(if inside { T::one() } else { T::zero() });
        }
    }
    if covered == 0 {
        return Err(DetectorError::DegenerateBox(format!("{bbox:?}")));
    }
    Ok(Tensor::new(vec![4, size, size], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(w: usize, h: usize, seed: u8) -> ImageRecord {
        let px = (0..w * h * 3)
            .map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed))
            .collect();
        ImageRecord::new("r", w, h, px, vec![], None).unwrap()
    }

    fn zeroed(mut d: Detector<f64>) -> Detector<f64> {
        d.params_mut().iter_mut().for_each(|p| p.value.fill(0.0));
        d
    }

    #[test]
    fn default_shapes() {
        let det = Detector::<f64>::new(DetectorConfig::default(), 1).unwrap();
        let f = det.extract_features(&image_tensor(&record(64, 64, 0), 64)).unwrap();
        assert_eq!(f.shape(), &[32, 8, 8]);
        let bbox = BoundingBox::new(10.0, 10.0, 30.0, 40.0).unwrap();
        let w = det
            .embed_support(&support_tensor(&record(64, 64, 0), &bbox, 64).unwrap())
            .unwrap();
        assert_eq!(w.shape(), &[32]);
        let p = det.predict(&f, Some(&w)).unwrap();
        assert_eq!(
            (p.grid_h, p.grid_w, p.anchors, p.values.len()),
            (8, 8, 2, 8 * 8 * 2 * 6)
        );
    }

    #[test]
    fn zero_network_outputs() {
        let det = zeroed(Detector::new(DetectorConfig::default(), 1).unwrap());
        let f = det.extract_features(&Tensor::zeros(&[3, 64, 64])).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
        let p = det.predict(&f, None).unwrap();
        let first = p.at(0, 0, 0);
        assert_eq!(&first[..3], &[0.5, 0.5, 0.5]);
        assert_eq!((first[3], first[4]), (3.5, 1.5));
        assert_eq!(p.at(7, 7, 1)[3..5], [1.5, 3.0]);
    }

    #[test]
    fn wrong_input_size() {
        let det = Detector::<f64>::new(DetectorConfig::default(), 1).unwrap();
        assert!(matches!(
            det.extract_features(&Tensor::zeros(&[3, 32, 32])),
            Err(DetectorError::InputShape { .. })
        ));
    }

    #[test]
    fn deterministic_init_and_features() {
        let a = Detector::<f32>::new(DetectorConfig::default(), 9).unwrap();
        let b = Detector::<f32>::new(DetectorConfig::default(), 9).unwrap();
        let img = image_tensor(&record(64, 64, 3), 64);
        assert_eq!(a.extract_features(&img).unwrap(), b.extract_features(&img).unwrap());
    }

    #[test]
    fn support_mask() {
        let rec = record(64, 64, 0);
        let full = BoundingBox::new(0.0, 0.0, 64.0, 64.0).unwrap();
        let t = support_tensor::<f64>(&rec, &full, 64).unwrap();
        assert!(t.data()[3 * 4096..].iter().all(|&v| v == 1.0));
        let tiny = BoundingBox::new(10.6, 10.6, 10.9, 10.9).unwrap();
        assert!(matches!(
            support_tensor::<f64>(&rec, &tiny, 64),
            Err(DetectorError::DegenerateBox(_))
        ));
        let det = Detector::<f64>::new(DetectorConfig::default(), 4).unwrap();
        let a = det.embed_support(&support_tensor(&rec, &BoundingBox::new(0.0, 0.0, 20.0, 20.0).unwrap(), 64).unwrap());
        let b =
            det.embed_support(&support_tensor(&rec, &BoundingBox::new(30.0, 30.0, 60.0, 60.0).unwrap(), 64).unwrap());
        assert_ne!(a.unwrap(), b.unwrap());
    }

    #[test]
    fn reweight_identity_and_basis() {
        let det = Detector::<f32>::new(DetectorConfig::default(), 2).unwrap();
        let f = det.extract_features(&image_tensor(&record(64, 64, 7), 64)).unwrap();
        assert_eq!(reweight(&f, &Tensor::ones(&[32])).unwrap(), f);
        assert_eq!(
            det.predict(&f, Some(&Tensor::ones(&[32]))).unwrap(),
            det.predict(&f, None).unwrap()
        );
        let e3 = Tensor::from_fn(&[32], |i| if i == 3 { 1.0 } else { 0.0 });
        let r = reweight(&f, &e3).unwrap();
        for (i, v) in r.data().iter().enumerate() {
            assert_eq!(*v, if i / 64 == 3 { f.data()[i] } else { 0.0 });
        }
        assert!(reweight(&f, &Tensor::ones(&[5])).is_err());
    }

    #[test]
    fn config_hash_tracks_changes() {
        let a = DetectorConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.nms_iou = 0.5;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let bad = DetectorConfig {
            input_size: 60,
            ..DetectorConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn from_params_checks_layout() {
        let det = Detector::<f32>::new(DetectorConfig::default(), 2).unwrap();
        let params = det.params().clone();
        assert!(Detector::from_params(DetectorConfig::default(), params.clone()).is_ok());
        let other = DetectorConfig {
            meta_channels: 16,
            ..DetectorConfig::default()
        };
        assert!(matches!(
            Detector::from_params(other, params),
            Err(DetectorError::ParamLayout(_))
        ));
    }
    #[test]
    fn full_pipeline_gradient_check() {
        let cfg = DetectorConfig {
            input_size: 16,
            widths: vec![4, 8],
            meta_channels: 8,
            ..DetectorConfig::default()
        };
        let det = Detector::<f64>::new(cfg.clone(), 11).unwrap();
        let q = ImageRecord::new(
            "q",
            16,
            16,
            (0..16 * 16 * 3).map(|i| (i * 37 % 251) as u8).collect(),
            vec![
                crate::voc::Annotation::new(CategoryId(0), BoundingBox::new(1.0, 2.0, 7.0, 12.0).unwrap()),
                crate::voc::Annotation::new(CategoryId(1), BoundingBox::new(8.0, 9.0, 15.0, 14.0).unwrap()),
            ],
            None,
        )
        .unwrap();
        let cats = [CategoryId(0), CategoryId(1)];
        let queries = vec![(
            image_tensor::<f64>(&q, 16),
            build_targets::<f64>(&q, &cats, &cfg).unwrap(),
        )];
        let supports = vec![
            vec![support_tensor::<f64>(&q, &q.annotations[0].bbox, 16).unwrap()],
            vec![support_tensor::<f64>(&q, &q.annotations[1].bbox, 16).unwrap()],
        ];
        let loss_of = |d: &Detector<f64>| {
            let mut tape = Tape::new();
            let bound = d.bind(&mut tape).unwrap();
            let l = d.episode_loss(&mut tape, &bound, &supports, &queries).unwrap();
            (tape, l)
        };
        let mut analytic = det.clone();
        let (tape, l) = loss_of(&analytic);
        tape.backward(l.total, analytic.params_mut()).unwrap();
        let grads: Vec<_> = analytic.params().iter().map(|(_, p)| p.grad.clone()).collect();
        let numeric = crate::nn::gradcheck::numerical_gradient(det.params(), 1e-6, |s| {
            let d = Detector::from_params(cfg.clone(), s.clone()).unwrap();
            let (tape, l) = loss_of(&d);
            Ok(tape.value(l.total).item().unwrap())
        })
        .unwrap();
        let err = crate::nn::gradcheck::max_relative_error(&grads, &numeric, 1e-6);
        assert!(err < 1e-3, "relative error {err}");
    }
}
