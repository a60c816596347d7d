//! Raw prediction tensors and their decoding into image-space detections.
//!
//! Every expert in a mixture shares one [`AnchorConfig`]. A raw tensor holds,
//! per pyramid level, an `[A, H, W, 5 + C]` block of pre-activation values laid
//! out as `t_x, t_y, t_w, t_h, t_obj, t_cls[0..C)`. Decoding follows the
//! YOLOv7 head convention:
//!
//! ```text
//! bx = (2 sigmoid(t_x) - 0.5 + cx) * stride      bw = (2 sigmoid(t_w))^2 * anchor_w
//! by = (2 sigmoid(t_y) - 0.5 + cy) * stride      bh = (2 sigmoid(t_h))^2 * anchor_h
//! ```
//!
//! Boxes are clipped to the image. The detection score is
//! `sigmoid(t_obj) * max_k sigmoid(t_cls[k])` with the argmax class.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection};

/// Box-regression plus objectness channels preceding the class logits.
pub const BOX_CHANNELS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorLevel {
    /// Pixels per grid cell.
    pub stride: usize,
    /// Anchor `(w, h)` pairs in pixels.
    pub anchors: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    /// `[height, width]` in pixels.
    pub image_size: [usize; 2],
    pub class_count: usize,
    pub levels: Vec<AnchorLevel>,
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::config("anchor config has no levels"));
        }
        if self.class_count == 0 {
            return Err(Error::config("class count must be at least 1"));
        }
        let [h, w] = self.image_size;
        let mut prev = 0;
        for (i, level) in self.levels.iter().enumerate() {
            if level.stride == 0 || level.stride <= prev {
                return Err(Error::config(format!(
                    "level {i}: strides must be positive and strictly increasing"
                )));
            }
            prev = level.stride;
            if h % level.stride != 0 || w % level.stride != 0 {
                return Err(Error::config(format!(
                    "level {i}: image size {h}x{w} not divisible by stride {}",
                    level.stride
                )));
            }
            if level.anchors.is_empty() {
                return Err(Error::config(format!("level {i} has no anchors")));
            }
            for a in &level.anchors {
                if !(a[0] > 0.0 && a[1] > 0.0 && a[0].is_finite() && a[1].is_finite()) {
                    return Err(Error::config(format!("level {i}: invalid anchor {a:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        BOX_CHANNELS + self.class_count
    }

    pub fn image_height(&self) -> f64 {
        self.image_size[0] as f64
    }

    pub fn image_width(&self) -> f64 {
        self.image_size[1] as f64
    }

    /// Grid `(height, width)` of a level.
    pub fn grid(&self, level: usize) -> (usize, usize) {
        let s = self.levels[level].stride;
        (self.image_size[0] / s, self.image_size[1] / s)
    }

    /// Total anchor slots `sum_l A_l * H_l * W_l`.
    pub fn slot_count(&self) -> usize {
        (0..self.levels.len())
            .map(|l| {
                let (h, w) = self.grid(l);
                self.levels[l].anchors.len() * h * w
            })
            .sum()
    }
}

/// One pyramid level of raw outputs, `[anchors, height, width, channels]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTensor {
    pub anchors: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl LevelTensor {
    pub fn zeros(anchors: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            anchors,
            height,
            width,
            channels,
            data: vec![0.0; anchors * height * width * channels],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.anchors, self.height, self.width, self.channels]
    }

    #[inline]
    pub fn offset(&self, anchor: usize, cy: usize, cx: usize) -> usize {
        ((anchor * self.height + cy) * self.width + cx) * self.channels
    }

    pub fn cell(&self, anchor: usize, cy: usize, cx: usize) -> &[f32] {
        let o = self.offset(anchor, cy, cx);
        &self.data[o..o + self.channels]
    }

    pub fn cell_mut(&mut self, anchor: usize, cy: usize, cx: usize) -> &mut [f32] {
        let o = self.offset(anchor, cy, cx);
        &mut self.data[o..o + self.channels]
    }
}

/// Raw head output of one expert for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPredictionTensor {
    pub image_id: String,
    pub expert_id: String,
    pub levels: Vec<LevelTensor>,
}

impl RawPredictionTensor {
    pub fn zeros(cfg: &AnchorConfig, image_id: impl Into<String>, expert_id: impl Into<String>) -> Self {
        let levels = (0..cfg.levels.len())
            .map(|l| {
                let (h, w) = cfg.grid(l);
                LevelTensor::zeros(cfg.levels[l].anchors.len(), h, w, cfg.channels())
            })
            .collect();
        Self {
            image_id: image_id.into(),
            expert_id: expert_id.into(),
            levels,
        }
    }

    /// Checks level count, per-axis shapes and finiteness against `cfg`.
    pub fn validate(&self, cfg: &AnchorConfig) -> Result<()> {
        if self.levels.len() != cfg.levels.len() {
            return Err(Error::Shape {
                level: self.levels.len().min(cfg.levels.len()),
                axis: "levels",
                expected: cfg.levels.len(),
                actual: self.levels.len(),
            });
        }
        for (l, t) in self.levels.iter().enumerate() {
            check_level_shape(t, cfg, l)?;
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::input(format!(
                    "raw tensor {}/{} level {l} has non-finite entries",
                    self.image_id, self.expert_id
                )));
            }
        }
        Ok(())
    }

    pub fn element_count(&self) -> usize {
        self.levels.iter().map(|t| t.data.len()).sum()
    }
}

fn check_level_shape(t: &LevelTensor, cfg: &AnchorConfig, level: usize) -> Result<()> {
    let (h, w) = cfg.grid(level);
    let expected = [cfg.levels[level].anchors.len(), h, w, cfg.channels()];
    let actual = [t.anchors, t.height, t.width, t.channels];
    for (axis, (e, a)) in ["anchors", "height", "width", "channels"]
        .into_iter()
        .zip(expected.into_iter().zip(actual))
    {
        if e != a {
            return Err(Error::Shape {
                level,
                axis,
                expected: e,
                actual: a,
            });
        }
    }
    if t.data.len() != expected.iter().product::<usize>() {
        return Err(Error::Shape {
            level,
            axis: "data",
            expected: expected.iter().product(),
            actual: t.data.len(),
        });
    }
    Ok(())
}

#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Unclipped `(cx, cy, w, h)` for one anchor slot.
#[inline]
pub(crate) fn decode_center_size(t: [f64; 4], cx: usize, cy: usize, stride: f64, anchor: [f64; 2]) -> [f64; 4] {
    let bx = (2.0 * sigmoid(t[0]) - 0.5 + cx as f64) * stride;
    let by = (2.0 * sigmoid(t[1]) - 0.5 + cy as f64) * stride;
    let sw = 2.0 * sigmoid(t[2]);
    let sh = 2.0 * sigmoid(t[3]);
    [bx, by, sw * sw * anchor[0], sh * sh * anchor[1]]
}

pub(crate) fn clip_box(c: [f64; 4], img_w: f64, img_h: f64) -> BBox {
    let [bx, by, bw, bh] = c;
    BBox::from_corners_unchecked(
        (bx - bw / 2.0).clamp(0.0, img_w),
        (by - bh / 2.0).clamp(0.0, img_h),
        (bx + bw / 2.0).clamp(0.0, img_w),
        (by + bh / 2.0).clamp(0.0, img_h),
    )
}

/// One decoded anchor slot.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedAnchor {
    pub anchor: usize,
    pub cy: usize,
    pub cx: usize,
    pub bbox: BBox,
    pub objectness: f64,
    pub class_scores: Vec<f64>,
}

impl DecodedAnchor {
    /// `(score, class)` with score = objectness times the best class probability.
    pub fn best(&self) -> (f64, usize) {
        let mut best = 0;
        for (k, &s) in self.class_scores.iter().enumerate() {
            if s > self.class_scores[best] {
                best = k;
            }
        }
        (self.objectness * self.class_scores[best], best)
    }
}

/// Decodes every slot of one level, in `(anchor, cy, cx)` storage order.
pub fn decode_level(raw: &LevelTensor, cfg: &AnchorConfig, level: usize) -> Result<Vec<DecodedAnchor>> {
    if level >= cfg.levels.len() {
        return Err(Error::Shape {
            level,
            axis: "levels",
            expected: cfg.levels.len(),
            actual: level + 1,
        });
    }
    check_level_shape(raw, cfg, level)?;
    let spec = &cfg.levels[level];
    let stride = spec.stride as f64;
    let (img_w, img_h) = (cfg.image_width(), cfg.image_height());
    let mut out = Vec::with_capacity(raw.anchors * raw.height * raw.width);
    for a in 0..raw.anchors {
        for cy in 0..raw.height {
            for cx in 0..raw.width {
                let v = raw.cell(a, cy, cx);
                let t = [v[0] as f64, v[1] as f64, v[2] as f64, v[3] as f64];
                let bbox = clip_box(decode_center_size(t, cx, cy, stride, spec.anchors[a]), img_w, img_h);
                out.push(DecodedAnchor {
                    anchor: a,
                    cy,
                    cx,
                    bbox,
                    objectness: sigmoid(v[4] as f64),
                    class_scores: v[BOX_CHANNELS..].iter().map(|&c| sigmoid(c as f64)).collect(),
                });
            }
        }
    }
    Ok(out)
}

/// Decodes all levels and keeps detections scoring at least `conf_threshold`.
///
/// Output is sorted by descending score; ties by `(level, cy, cx, anchor)`.
pub fn decode_all(raw: &RawPredictionTensor, cfg: &AnchorConfig, conf_threshold: f64) -> Result<Vec<Detection>> {
    if raw.levels.len() != cfg.levels.len() {
        return Err(Error::Shape {
            level: raw.levels.len().min(cfg.levels.len()),
            axis: "levels",
            expected: cfg.levels.len(),
            actual: raw.levels.len(),
        });
    }
    let mut keyed = Vec::new();
    for (l, t) in raw.levels.iter().enumerate() {
        for d in decode_level(t, cfg, l)? {
            let (score, class_id) = d.best();
            if score >= conf_threshold {
                keyed.push(((l, d.cy, d.cx, d.anchor), score, class_id, d.bbox));
            }
        }
    }
    keyed.sort_by(|a, b| match b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal) {
        Ordering::Equal => a.0.cmp(&b.0),
        o => o,
    });
    Ok(keyed
        .into_iter()
        .map(|(_, score, class_id, bbox)| Detection {
            image_id: raw.image_id.clone(),
            class_id,
            score,
            bbox,
            source: Some(raw.expert_id.clone()),
        })
        .collect())
}

/// An anchor slot: `(level, anchor, cy, cx)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Slot {
    pub level: usize,
    pub anchor: usize,
    pub cy: usize,
    pub cx: usize,
}

fn shape_iou(w: f64, h: f64, anchor: [f64; 2]) -> f64 {
    let inter = w.min(anchor[0]) * h.min(anchor[1]);
    let union = w * h + anchor[0] * anchor[1] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Responsible slot for a ground-truth box: the (level, anchor) pair whose
/// anchor shape best overlaps the box, at the cell containing the box center.
/// Ties go to the lower level, then the lower anchor index.
pub fn assign_slot(gt: &BBox, cfg: &AnchorConfig) -> Slot {
    let (w, h) = (gt.width(), gt.height());
    let mut best = (f64::NEG_INFINITY, 0, 0);
    for (l, level) in cfg.levels.iter().enumerate() {
        for (a, &anchor) in level.anchors.iter().enumerate() {
            let s = shape_iou(w, h, anchor);
            if s > best.0 {
                best = (s, l, a);
            }
        }
    }
    let (_, level, anchor) = best;
    let stride = cfg.levels[level].stride as f64;
    let (gh, gw) = cfg.grid(level);
    let (cx, cy) = gt.center();
    Slot {
        level,
        anchor,
        cy: ((cy / stride).floor().max(0.0) as usize).min(gh - 1),
        cx: ((cx / stride).floor().max(0.0) as usize).min(gw - 1),
    }
}

/// Box logits `(t_x, t_y, t_w, t_h)` that decode exactly onto `gt` at `slot`,
/// or `None` when the box is not representable there (center too far from the
/// cell, or size outside `(0, 4)` times the anchor).
pub fn encode_box(gt: &BBox, slot: Slot, cfg: &AnchorConfig) -> Option<[f64; 4]> {
    let level = &cfg.levels[slot.level];
    let stride = level.stride as f64;
    let anchor = level.anchors[slot.anchor];
    let (cx, cy) = gt.center();
    let sx = (cx / stride - slot.cx as f64 + 0.5) / 2.0;
    let sy = (cy / stride - slot.cy as f64 + 0.5) / 2.0;
    let sw = (gt.width() / anchor[0]).sqrt() / 2.0;
    let sh = (gt.height() / anchor[1]).sqrt() / 2.0;
    let open = |p: f64| p > 0.0 && p < 1.0;
    if [sx, sy, sw, sh].into_iter().all(open) {
        Some([logit(sx), logit(sy), logit(sw), logit(sh)])
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn one_level_cfg() -> AnchorConfig {
        AnchorConfig {
            image_size: [32, 32],
            class_count: 2,
            levels: vec![AnchorLevel {
                stride: 8,
                anchors: vec![[16.0, 16.0], [10.0, 20.0]],
            }],
        }
    }

    fn two_level_cfg() -> AnchorConfig {
        AnchorConfig {
            image_size: [32, 32],
            class_count: 3,
            levels: vec![
                AnchorLevel {
                    stride: 8,
                    anchors: vec![[8.0, 8.0], [12.0, 6.0]],
                },
                AnchorLevel {
                    stride: 16,
                    anchors: vec![[20.0, 20.0]],
                },
            ],
        }
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(40.0) - 1.0).abs() < 1e-12);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-12);
        assert!(sigmoid(-800.0) >= 0.0);
    }

    #[test]
    fn zero_cell_decodes_to_anchor_at_cell_center() {
        let cfg = one_level_cfg();
        let raw = RawPredictionTensor::zeros(&cfg, "i", "e");
        let dec = decode_level(&raw.levels[0], &cfg, 0).unwrap();
        let d = &dec[0];
        assert_eq!((d.anchor, d.cy, d.cx), (0, 0, 0));
        // center (4, 4), 16x16, clipped at the image origin
        assert_eq!(d.bbox, BBox::new(0.0, 0.0, 12.0, 12.0).unwrap());
        assert_eq!(d.objectness, 0.5);
        assert_eq!(d.class_scores, vec![0.5, 0.5]);
        // an interior cell is not clipped
        let inner = dec.iter().find(|d| d.anchor == 0 && d.cy == 1 && d.cx == 1).unwrap();
        assert_eq!(inner.bbox, BBox::new(4.0, 4.0, 20.0, 20.0).unwrap());
    }

    #[test]
    fn width_term_squares() {
        let mut cfg = one_level_cfg();
        cfg.levels[0].anchors = vec![[10.0, 10.0]];
        let mut raw = RawPredictionTensor::zeros(&cfg, "i", "e");
        raw.levels[0].cell_mut(0, 1, 1)[2] = 3f64.ln() as f32;
        let dec = decode_level(&raw.levels[0], &cfg, 0).unwrap();
        let d = dec.iter().find(|d| d.cy == 1 && d.cx == 1).unwrap();
        assert!((d.bbox.width() - 22.5).abs() < 1e-5, "{}", d.bbox.width());
    }

    #[test]
    fn wrong_anchor_count_is_an_error() {
        let cfg = one_level_cfg();
        let t = LevelTensor::zeros(3, 4, 4, 7);
        match decode_level(&t, &cfg, 0) {
            Err(Error::Shape { level: 0, axis: "anchors", expected: 2, actual: 3 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn saturated_cell_scores_one() {
        let cfg = two_level_cfg();
        let mut raw = RawPredictionTensor::zeros(&cfg, "i", "e");
        for v in raw.levels.iter_mut().flat_map(|l| l.data.iter_mut()) {
            *v = -40.0;
        }
        let c = raw.levels[1].cell_mut(0, 1, 0);
        c[..4].fill(0.0);
        c[4] = 40.0;
        c[5] = 40.0;
        let dets = decode_all(&raw, &cfg, 0.001).unwrap();
        assert_eq!(dets.len(), 1);
        assert!((dets[0].score - 1.0).abs() < 1e-12);
        assert_eq!(dets[0].class_id, 0);
        assert_eq!(dets[0].source.as_deref(), Some("e"));
    }

    #[test]
    fn unreachable_threshold_is_empty() {
        let cfg = two_level_cfg();
        let raw = RawPredictionTensor::zeros(&cfg, "i", "e");
        assert!(decode_all(&raw, &cfg, 1.1).unwrap().is_empty());
    }

    #[test]
    fn zero_tensor_emits_every_slot_at_quarter_score() {
        let cfg = two_level_cfg();
        let raw = RawPredictionTensor::zeros(&cfg, "i", "e");
        let dets = decode_all(&raw, &cfg, 0.001).unwrap();
        // 2 anchors * 4 * 4 + 1 anchor * 2 * 2
        assert_eq!(dets.len(), 36);
        assert_eq!(dets.len(), cfg.slot_count());
        assert!(dets.iter().all(|d| d.score == 0.25 && d.class_id == 0));
        // tie order is (level, cy, cx, anchor): first two entries are both anchors of cell (0,0)
        assert_eq!(dets[0].bbox, BBox::new(0.0, 0.0, 8.0, 8.0).unwrap());
        assert_eq!(dets[1].bbox, BBox::new(0.0, 1.0, 10.0, 7.0).unwrap());
    }

    #[test]
    fn decoded_boxes_stay_in_frame_and_threshold_is_monotone() {
        use rand::{Rng, SeedableRng};
        let cfg = two_level_cfg();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut raw = RawPredictionTensor::zeros(&cfg, "i", "e");
        for v in raw.levels.iter_mut().flat_map(|l| l.data.iter_mut()) {
            *v = rng.random_range(-6.0..6.0);
        }
        let lo = decode_all(&raw, &cfg, 0.01).unwrap();
        let hi = decode_all(&raw, &cfg, 0.3).unwrap();
        assert!(lo.iter().all(|d| d.bbox.within(32.0, 32.0)));
        assert!(hi.len() <= lo.len());
        assert!(hi.iter().all(|d| lo.contains(d)));
    }

    #[test]
    fn encode_inverts_decode() {
        let cfg = two_level_cfg();
        let gt = BBox::new(5.0, 9.0, 15.0, 15.0).unwrap();
        let slot = assign_slot(&gt, &cfg);
        assert_eq!(slot, Slot { level: 0, anchor: 1, cy: 1, cx: 1 });
        let t = encode_box(&gt, slot, &cfg).unwrap();
        let c = decode_center_size(t, slot.cx, slot.cy, 8.0, cfg.levels[0].anchors[1]);
        let b = clip_box(c, 32.0, 32.0);
        for (x, y) in b.to_array().iter().zip(gt.to_array()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = two_level_cfg();
        assert!(cfg.validate().is_ok());
        cfg.levels[1].stride = 8;
        assert!(cfg.validate().is_err());
        let mut cfg = two_level_cfg();
        cfg.image_size = [30, 32];
        assert!(cfg.validate().is_err());
        let mut cfg = two_level_cfg();
        cfg.levels[0].anchors.clear();
        assert!(cfg.validate().is_err());
    }
}
