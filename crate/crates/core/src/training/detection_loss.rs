//! Simplified one-stage detection loss for gate training.
//!
//! Each ground-truth box is assigned to one anchor slot (see
//! [`assign_slot`]). Per expert tensor the loss is
//!
//! ```text
//! mean_assigned(1 - IoU) + mean_all(BCE(t_obj, assigned)) + mean_assigned(mean_k BCE(t_cls_k, onehot))
//! ```
//!
//! and the experts' losses are averaged. The IoU uses the unclipped decoded
//! box so the term stays differentiable at the image border.

use std::collections::BTreeMap;

use crate::decode::{assign_slot, decode_center_size, sigmoid, AnchorConfig, RawPredictionTensor, Slot, BOX_CHANNELS};
use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::geometry::BBox;

#[derive(Debug, Clone)]
pub(crate) struct Target {
    pub slot: Slot,
    pub bbox: BBox,
    pub class_id: usize,
}

/// Slot assignment for one image. When two boxes land on the same slot the
/// first one keeps it.
pub(crate) fn targets(gts: &[GroundTruth], cfg: &AnchorConfig) -> Result<Vec<Target>> {
    let mut by_slot: BTreeMap<Slot, Target> = BTreeMap::new();
    for g in gts {
        if g.class_id >= cfg.class_count {
            return Err(Error::input(format!(
                "ground-truth class {} >= class count {} (image {})",
                g.class_id, cfg.class_count, g.image_id
            )));
        }
        if !g.bbox.within(cfg.image_width(), cfg.image_height()) {
            return Err(Error::input(format!(
                "ground-truth box {:?} outside the image (image {})",
                g.bbox.to_array(),
                g.image_id
            )));
        }
        let slot = assign_slot(&g.bbox, cfg);
        by_slot.entry(slot).or_insert(Target {
            slot,
            bbox: g.bbox,
            class_id: g.class_id,
        });
    }
    Ok(by_slot.into_values().collect())
}

/// `BCE(sigmoid(t), y)` in logit form.
fn bce_logits(t: f64, y: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p() - y * t
}

/// IoU of a center-size box against `gt` and its gradient with respect to
/// `(cx, cy, w, h)`.
fn iou_with_grad(c: [f64; 4], gt: &BBox) -> (f64, [f64; 4]) {
    let [bx, by, bw, bh] = c;
    let (x1, x2, y1, y2) = (bx - bw / 2.0, bx + bw / 2.0, by - bh / 2.0, by + bh / 2.0);
    let iw = x2.min(gt.x2) - x1.max(gt.x1);
    let ih = y2.min(gt.y2) - y1.max(gt.y1);
    let area = bw * bh;
    let union_base = area + gt.area();
    if iw <= 0.0 || ih <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let union = union_base - inter;
    if union <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    // dI / d(x1, x2, y1, y2)
    let di = [
        if x1 > gt.x1 { -ih } else { 0.0 },
        if x2 < gt.x2 { ih } else { 0.0 },
        if y1 > gt.y1 { -iw } else { 0.0 },
        if y2 < gt.y2 { iw } else { 0.0 },
    ];
    let da = [-bh, bh, -bw, bw];
    let mut d = [0.0; 4];
    for k in 0..4 {
        d[k] = (di[k] * union - inter * (da[k] - di[k])) / (union * union);
    }
    let iou = inter / union;
    (iou, [d[0] + d[1], d[2] + d[3], (d[1] - d[0]) / 2.0, (d[3] - d[2]) / 2.0])
}

fn slot_offset(cfg: &AnchorConfig, s: Slot) -> usize {
    let (h, w) = cfg.grid(s.level);
    ((s.anchor * h + s.cy) * w + s.cx) * cfg.channels()
}

/// Loss of one expert's (weighted) levels stored as `[A, H, W, 5 + C]` in f64.
/// When `grad` is given, `scale * dL/dy` is added into it.
pub(crate) fn expert_loss(
    levels: &[Vec<f64>],
    targets: &[Target],
    cfg: &AnchorConfig,
    mut grad: Option<(&mut [Vec<f64>], f64)>,
) -> f64 {
    let ch = cfg.channels();
    let classes = cfg.class_count as f64;
    let total_slots = cfg.slot_count() as f64;
    let assigned: BTreeMap<Slot, usize> = targets.iter().enumerate().map(|(i, t)| (t.slot, i)).collect();

    let mut obj = 0.0;
    for (l, data) in levels.iter().enumerate() {
        let (h, w) = cfg.grid(l);
        for a in 0..cfg.levels[l].anchors.len() {
            for cy in 0..h {
                for cx in 0..w {
                    let slot = Slot { level: l, anchor: a, cy, cx };
                    let off = ((a * h + cy) * w + cx) * ch + 4;
                    let y = if assigned.contains_key(&slot) { 1.0 } else { 0.0 };
                    obj += bce_logits(data[off], y);
                    if let Some((g, s)) = grad.as_mut() {
                        g[l][off] += *s * (sigmoid(data[off]) - y) / total_slots;
                    }
                }
            }
        }
    }
    let mut loss = obj / total_slots;
    if targets.is_empty() {
        return loss;
    }

    let k = targets.len() as f64;
    let mut box_term = 0.0;
    let mut cls_term = 0.0;
    for t in targets {
        let level = &cfg.levels[t.slot.level];
        let data = &levels[t.slot.level];
        let off = slot_offset(cfg, t.slot);
        let raw = [data[off], data[off + 1], data[off + 2], data[off + 3]];
        let anchor = level.anchors[t.slot.anchor];
        let stride = level.stride as f64;
        let c = decode_center_size(raw, t.slot.cx, t.slot.cy, stride, anchor);
        let (iou, d) = iou_with_grad(c, &t.bbox);
        box_term += 1.0 - iou;
        let mut cls = 0.0;
        for j in 0..cfg.class_count {
            let y = if j == t.class_id { 1.0 } else { 0.0 };
            cls += bce_logits(data[off + BOX_CHANNELS + j], y);
        }
        cls_term += cls / classes;
        if let Some((g, s)) = grad.as_mut() {
            let sg = raw.map(sigmoid);
            let ds = sg.map(|p| p * (1.0 - p));
            let dt = [
                d[0] * 2.0 * ds[0] * stride,
                d[1] * 2.0 * ds[1] * stride,
                d[2] * 8.0 * sg[2] * ds[2] * anchor[0],
                d[3] * 8.0 * sg[3] * ds[3] * anchor[1],
            ];
            let gl = &mut g[t.slot.level];
            for q in 0..4 {
                gl[off + q] -= *s * dt[q] / k;
            }
            for j in 0..cfg.class_count {
                let y = if j == t.class_id { 1.0 } else { 0.0 };
                let o = off + BOX_CHANNELS + j;
                gl[o] += *s * (sigmoid(data[o]) - y) / (classes * k);
            }
        }
    }
    loss += box_term / k + cls_term / k;
    loss
}

/// Detection loss of gate-weighted expert tensors against one image's ground
/// truth, averaged over experts.
pub fn detection_loss(weighted_raws: &[RawPredictionTensor], ground_truth: &[GroundTruth], cfg: &AnchorConfig) -> Result<f64> {
    if weighted_raws.is_empty() {
        return Err(Error::input("detection loss needs at least one expert tensor"));
    }
    let targets = targets(ground_truth, cfg)?;
    let mut total = 0.0;
    for raw in weighted_raws {
        raw.validate(cfg)?;
        let levels: Vec<Vec<f64>> = raw
            .levels
            .iter()
            .map(|t| t.data.iter().map(|&v| v as f64).collect())
            .collect();
        total += expert_loss(&levels, &targets, cfg, None);
    }
    Ok(total / weighted_raws.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::{encode_box, AnchorLevel};

    fn cfg() -> AnchorConfig {
        AnchorConfig {
            image_size: [16, 16],
            class_count: 2,
            levels: vec![AnchorLevel {
                stride: 8,
                anchors: vec![[8.0, 8.0]],
            }],
        }
    }

    fn gt(b: [f64; 4], class_id: usize) -> GroundTruth {
        GroundTruth {
            image_id: "x".into(),
            class_id,
            bbox: BBox::try_from(b).unwrap(),
        }
    }

    #[test]
    fn saturated_background_is_near_zero() {
        let c = cfg();
        let mut raw = RawPredictionTensor::zeros(&c, "x", "a");
        for t in &mut raw.levels {
            for cell in t.data.chunks_mut(c.channels()) {
                cell[4] = -40.0;
            }
        }
        assert!(detection_loss(&[raw], &[], &c).unwrap() < 1e-15);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let c = cfg();
        let g = gt([1.0, 2.0, 9.0, 9.0], 1);
        let slot = assign_slot(&g.bbox, &c);
        let t = encode_box(&g.bbox, slot, &c).unwrap();
        let mut raw = RawPredictionTensor::zeros(&c, "x", "a");
        for cell in raw.levels[0].data.chunks_mut(c.channels()) {
            cell[4] = -40.0;
            cell[5] = -40.0;
            cell[6] = -40.0;
        }
        let cell = raw.levels[0].cell_mut(slot.anchor, slot.cy, slot.cx);
        for q in 0..4 {
            cell[q] = t[q] as f32;
        }
        cell[4] = 40.0;
        cell[6] = 40.0;
        let loss = detection_loss(&[raw], &[g], &c).unwrap();
        assert!(loss < 1e-6, "{loss}");
    }

    #[test]
    fn single_cell_hand_sum() {
        // one slot, one class: the whole tensor is 6 numbers
        let c = AnchorConfig {
            image_size: [8, 8],
            class_count: 1,
            levels: vec![AnchorLevel {
                stride: 8,
                anchors: vec![[8.0, 8.0]],
            }],
        };
        let mut raw = RawPredictionTensor::zeros(&c, "x", "a");
        raw.levels[0].data.copy_from_slice(&[0.0, 0.0, 0.0, 0.0, 2.0, -1.0]);
        // decoded: center (4, 4), size 8x8 -> [0, 0, 8, 8]; gt [0, 0, 8, 4] -> IoU 0.5
        let g = gt([0.0, 0.0, 8.0, 4.0], 0);
        let box_term = 0.5;
        let obj = (1.0 + (-2.0f64).exp()).ln();
        let cls = (1.0 + 1.0f64.exp()).ln();
        let loss = detection_loss(&[raw], &[g], &c).unwrap();
        assert!((loss - (box_term + obj + cls)).abs() < 1e-12);
    }

    #[test]
    fn expert_losses_are_averaged() {
        let c = cfg();
        let a = RawPredictionTensor::zeros(&c, "x", "a");
        let mut b = a.clone();
        b.levels[0].data.iter_mut().for_each(|v| *v = -3.0);
        let g = [gt([2.0, 2.0, 10.0, 12.0], 0)];
        let la = detection_loss(std::slice::from_ref(&a), &g, &c).unwrap();
        let lb = detection_loss(std::slice::from_ref(&b), &g, &c).unwrap();
        let both = detection_loss(&[a, b], &g, &c).unwrap();
        assert!((both - (la + lb) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_ground_truth() {
        let c = cfg();
        let raw = RawPredictionTensor::zeros(&c, "x", "a");
        assert!(detection_loss(std::slice::from_ref(&raw), &[gt([0.0, 0.0, 4.0, 4.0], 2)], &c).is_err());
        assert!(detection_loss(&[raw], &[gt([0.0, 0.0, 20.0, 4.0], 0)], &c).is_err());
    }

    #[test]
    fn iou_gradient_matches_differences() {
        let g = BBox::new(1.0, 2.0, 9.0, 7.0).unwrap();
        let c = [5.5, 4.2, 7.1, 6.3];
        let (_, d) = iou_with_grad(c, &g);
        for k in 0..4 {
            let mut p = c;
            let mut m = c;
            p[k] += 1e-6;
            m[k] -= 1e-6;
            let fd = (iou_with_grad(p, &g).0 - iou_with_grad(m, &g).0) / 2e-6;
            assert!((fd - d[k]).abs() < 1e-7, "{k}: {fd} vs {}", d[k]);
        }
    }
}
