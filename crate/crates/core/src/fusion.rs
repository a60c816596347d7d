//! Merging detections from several experts: NMS, Soft-NMS, WBF and NMW.
//!
//! All methods group by `(image_id, class_id)`; detections from different
//! images or classes never interact. Ordering is fully determined by score
//! with input index as the tie-breaker, so every method is deterministic.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Detection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionMethod {
    Nms,
    SoftNms,
    Wbf,
    #[default]
    Nmw,
}

impl FromStr for FusionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nms" => Ok(Self::Nms),
            "softnms" | "soft-nms" | "soft_nms" => Ok(Self::SoftNms),
            "wbf" => Ok(Self::Wbf),
            "nmw" => Ok(Self::Nmw),
            _ => Err(Error::config(format!("unknown fusion method {s:?}"))),
        }
    }
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Self::Nms => "nms",
            Self::SoftNms => "softnms",
            Self::Wbf => "wbf",
            Self::Nmw => "nmw",
        })
    }
}

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.6;
pub const DEFAULT_SOFTNMS_SIGMA: f64 = 0.5;
pub const DEFAULT_SOFTNMS_SCORE_FLOOR: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub method: FusionMethod,
    pub iou_threshold: f64,
    /// Gaussian decay width for Soft-NMS.
    pub softnms_sigma: f64,
    /// Soft-NMS drops detections whose score is below this floor.
    pub softnms_score_floor: f64,
    /// Per-expert mAP used to pre-weight scores; `None` disables re-weighting.
    pub model_map_weights: Option<BTreeMap<String, f64>>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            method: FusionMethod::Nmw,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            softnms_sigma: DEFAULT_SOFTNMS_SIGMA,
            softnms_score_floor: DEFAULT_SOFTNMS_SCORE_FLOOR,
            model_map_weights: None,
        }
    }
}

impl FusionConfig {
    pub fn with_method(method: FusionMethod) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::config(format!("iou threshold {} not in (0, 1]", self.iou_threshold)));
        }
        if !(self.softnms_sigma > 0.0 && self.softnms_sigma.is_finite()) {
            return Err(Error::config(format!("soft-nms sigma {} must be > 0", self.softnms_sigma)));
        }
        if !(0.0..1.0).contains(&self.softnms_score_floor) {
            return Err(Error::config(format!(
                "soft-nms score floor {} not in [0, 1)",
                self.softnms_score_floor
            )));
        }
        if let Some(w) = &self.model_map_weights {
            if let Some((k, v)) = w.iter().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
                return Err(Error::config(format!("model weight for {k} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Indices sorted by descending score, ties by ascending index.
fn rank(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| by_score_then_index(dets[a].score, a, dets[b].score, b));
    order
}

fn by_score_then_index(sa: f64, ia: usize, sb: f64, ib: usize) -> Ordering {
    match sb.partial_cmp(&sa).unwrap_or(Ordering::Equal) {
        Ordering::Equal => ia.cmp(&ib),
        o => o,
    }
}

fn same_group(a: &Detection, b: &Detection) -> bool {
    a.class_id == b.class_id && a.image_id == b.image_id
}

/// Scales each score by its expert's weight relative to the best expert.
pub fn map_reweight(dets: &[Detection], weights: &BTreeMap<String, f64>) -> Result<Vec<Detection>> {
    let max = weights.values().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0 && max.is_finite()) {
        return Err(Error::config("model mAP weights must contain a positive value"));
    }
    dets.iter()
        .map(|d| {
            let src = d
                .source
                .as_deref()
                .ok_or_else(|| Error::config(format!("detection in {} has no source expert", d.image_id)))?;
            let w = weights
                .get(src)
                .ok_or_else(|| Error::config(format!("no model weight for expert {src:?}")))?;
            let mut out = d.clone();
            out.score = (d.score * (w / max)).clamp(0.0, 1.0);
            Ok(out)
        })
        .collect()
}

/// Greedy class-wise non-maximum suppression.
///
/// Drops a detection when it overlaps an already kept detection of the same
/// class by IoU strictly greater than `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<usize> = Vec::new();
    for i in rank(dets) {
        let suppressed = kept
            .iter()
            .any(|&k| same_group(&dets[k], &dets[i]) && iou(&dets[k].bbox, &dets[i].bbox) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

/// Gaussian Soft-NMS.
///
/// Repeatedly emits the best remaining detection and multiplies the score of
/// every remaining detection in its group by `exp(-iou^2 / sigma)`. Anything
/// scoring below `score_floor` is dropped and never emitted.
pub fn soft_nms(dets: &[Detection], sigma: f64, score_floor: f64) -> Vec<Detection> {
    let mut scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut alive: Vec<usize> = (0..dets.len()).filter(|&i| scores[i] >= score_floor).collect();
    let mut out: Vec<(usize, f64)> = Vec::new();
    while !alive.is_empty() {
        let pos = (0..alive.len())
            .min_by(|&a, &b| by_score_then_index(scores[alive[a]], alive[a], scores[alive[b]], alive[b]))
            .expect("non-empty");
        let sel = alive.swap_remove(pos);
        out.push((sel, scores[sel]));
        alive.retain(|&j| {
            if !same_group(&dets[sel], &dets[j]) {
                return true;
            }
            let o = iou(&dets[sel].bbox, &dets[j].bbox);
            scores[j] *= (-(o * o) / sigma).exp();
            scores[j] >= score_floor
        });
        alive.sort_unstable();
    }
    out.sort_by(|a, b| by_score_then_index(a.1, a.0, b.1, b.0));
    out.into_iter()
        .map(|(i, s)| {
            let mut d = dets[i].clone();
            d.score = s;
            d
        })
        .collect()
}

/// Weighted average of member boxes, kept inside the members' coordinate
/// envelope so rounding can never push a fused edge outside it.
fn weighted_box(members: &[usize], dets: &[Detection], weights: &[f64]) -> BBox {
    if members.len() == 1 {
        return dets[members[0]].bbox;
    }
    let total: f64 = weights.iter().sum();
    let mut acc = [0.0; 4];
    let mut lo = [f64::INFINITY; 4];
    let mut hi = [f64::NEG_INFINITY; 4];
    for (&m, &w) in members.iter().zip(weights) {
        for (k, c) in dets[m].bbox.to_array().into_iter().enumerate() {
            acc[k] += w * c;
            lo[k] = lo[k].min(c);
            hi[k] = hi[k].max(c);
        }
    }
    let c: Vec<f64> = (0..4)
        .map(|k| {
            let v = if total > 0.0 { acc[k] / total } else { lo[k] };
            v.clamp(lo[k], hi[k])
        })
        .collect();
    BBox::from_corners_unchecked(c[0], c[1], c[2].max(c[0]), c[3].max(c[1]))
}

struct Cluster {
    members: Vec<usize>,
    fused: BBox,
}

/// Weighted boxes fusion over `model_count` experts.
///
/// Detections are visited by descending score and join the first same-class
/// cluster whose current fused box overlaps by IoU above `iou_threshold`. The
/// fused score is the mean member score times `min(distinct sources, T) / T`.
pub fn wbf(dets: &[Detection], iou_threshold: f64, model_count: usize) -> Result<Vec<Detection>> {
    Ok(wbf_with_members(dets, iou_threshold, model_count)?.into_iter().map(|(d, _)| d).collect())
}

/// [`wbf`], also returning the input indices merged into each output.
pub fn wbf_with_members(
    dets: &[Detection],
    iou_threshold: f64,
    model_count: usize,
) -> Result<Vec<(Detection, Vec<usize>)>> {
    if model_count < 1 {
        return Err(Error::config("wbf model count must be at least 1"));
    }
    let mut clusters: Vec<Cluster> = Vec::new();
    for i in rank(dets) {
        let hit = clusters
            .iter()
            .position(|c| same_group(&dets[c.members[0]], &dets[i]) && iou(&c.fused, &dets[i].bbox) > iou_threshold);
        match hit {
            Some(ci) => {
                let c = &mut clusters[ci];
                c.members.push(i);
                let w: Vec<f64> = c.members.iter().map(|&m| dets[m].score).collect();
                c.fused = weighted_box(&c.members, dets, &w);
            }
            None => clusters.push(Cluster {
                members: vec![i],
                fused: dets[i].bbox,
            }),
        }
    }
    let t = model_count as f64;
    let mut out: Vec<(usize, Detection, Vec<usize>)> = clusters
        .into_iter()
        .enumerate()
        .map(|(ci, c)| {
            let mean = c.members.iter().map(|&m| dets[m].score).sum::<f64>() / c.members.len() as f64;
            let sources: BTreeSet<Option<&str>> = c.members.iter().map(|&m| dets[m].source.as_deref()).collect();
            let factor = (sources.len() as f64).min(t) / t;
            let mut d = dets[c.members[0]].clone();
            d.bbox = c.fused;
            d.score = (mean * factor).min(d.score);
            (ci, d, c.members)
        })
        .collect();
    out.sort_by(|a, b| by_score_then_index(a.1.score, a.0, b.1.score, b.0));
    Ok(out.into_iter().map(|(_, d, m)| (d, m)).collect())
}

/// Non-maximum weighted fusion.
///
/// The best unassigned detection seeds a cluster and absorbs every unassigned
/// same-class detection overlapping it by IoU above `iou_threshold`. Members are
/// averaged with weights `score * iou(member, seed)`; the cluster keeps the
/// seed's score.
pub fn nmw(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    nmw_with_members(dets, iou_threshold).into_iter().map(|(d, _)| d).collect()
}

/// [`nmw`], also returning the input indices merged into each output.
pub fn nmw_with_members(dets: &[Detection], iou_threshold: f64) -> Vec<(Detection, Vec<usize>)> {
    let order = rank(dets);
    let mut assigned = vec![false; dets.len()];
    let mut out = Vec::new();
    for &seed in &order {
        if assigned[seed] {
            continue;
        }
        assigned[seed] = true;
        let mut members = vec![seed];
        let mut weights = vec![dets[seed].score];
        for &j in &order {
            if assigned[j] || !same_group(&dets[seed], &dets[j]) {
                continue;
            }
            let o = iou(&dets[seed].bbox, &dets[j].bbox);
            if o > iou_threshold {
                assigned[j] = true;
                members.push(j);
                weights.push(dets[j].score * o);
            }
        }
        let mut d = dets[seed].clone();
        d.bbox = weighted_box(&members, dets, &weights);
        out.push((d, members));
    }
    out
}

/// Fuses per-expert detection lists with the configured method.
///
/// Applies mAP re-weighting first when configured, then concatenates the
/// experts in order and fuses each image separately. Images come out sorted
/// by `image_id`.
pub fn fuse(per_expert: &[Vec<Detection>], cfg: &FusionConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let mut all = Vec::with_capacity(per_expert.iter().map(Vec::len).sum());
    for dets in per_expert {
        match &cfg.model_map_weights {
            Some(w) => all.extend(map_reweight(dets, w)?),
            None => all.extend(dets.iter().cloned()),
        }
    }
    let mut by_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, d) in all.iter().enumerate() {
        by_image.entry(d.image_id.as_str()).or_default().push(i);
    }
    let model_count = per_expert.len().max(1);
    let mut out = Vec::with_capacity(all.len());
    for idx in by_image.values() {
        let group: Vec<Detection> = idx.iter().map(|&i| all[i].clone()).collect();
        out.extend(fuse_image(&group, cfg, model_count)?);
    }
    Ok(out)
}

/// Fuses one already-concatenated detection list.
pub fn fuse_image(dets: &[Detection], cfg: &FusionConfig, model_count: usize) -> Result<Vec<Detection>> {
    Ok(match cfg.method {
        FusionMethod::Nms => nms(dets, cfg.iou_threshold),
        FusionMethod::SoftNms => soft_nms(dets, cfg.softnms_sigma, cfg.softnms_score_floor),
        FusionMethod::Wbf => wbf(dets, cfg.iou_threshold, model_count)?,
        FusionMethod::Nmw => nmw(dets, cfg.iou_threshold),
    })
}

/// Normalizes per-expert mAP values into fixed mixture weights.
pub fn map_weights_to_mixture(maps: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = maps.iter().sum();
    if maps.is_empty() || !(total > 0.0) || maps.iter().any(|m| *m < 0.0) {
        return Err(Error::config("mAP weights must be non-negative with a positive sum"));
    }
    Ok(maps.iter().map(|m| m / total).collect())
}

/// Groups detections by image, preserving input order within each image.
pub fn group_by_image(dets: &[Detection]) -> BTreeMap<String, Vec<Detection>> {
    let mut map: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        map.entry(d.image_id.clone()).or_default().push(d.clone());
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(class_id: usize, score: f64, b: [f64; 4], src: &str) -> Detection {
        Detection::new("img", class_id, score, BBox::try_from(b).unwrap()).with_source(src)
    }

    #[test]
    fn reweight_examples() {
        let dets = vec![det(0, 0.8, [0.0, 0.0, 1.0, 1.0], "A"), det(0, 0.8, [0.0, 0.0, 1.0, 1.0], "B")];
        let eq: BTreeMap<_, _> = [("A".to_string(), 0.6), ("B".to_string(), 0.6)].into();
        assert_eq!(map_reweight(&dets, &eq).unwrap(), dets);

        let w: BTreeMap<_, _> = [("A".to_string(), 0.60), ("B".to_string(), 0.45)].into();
        let out = map_reweight(&dets, &w).unwrap();
        assert_eq!(out[0].score, 0.8);
        assert!((out[1].score - 0.6).abs() < 1e-12);

        let unknown = vec![det(0, 0.5, [0.0, 0.0, 1.0, 1.0], "C")];
        assert!(matches!(map_reweight(&unknown, &w), Err(Error::Config(_))));
    }

    #[test]
    fn nms_examples() {
        let one = vec![det(0, 0.7, [0.0, 0.0, 4.0, 4.0], "A")];
        assert_eq!(nms(&one, 0.6), one);

        let pair = vec![det(0, 0.8, [0.0, 0.0, 4.0, 4.0], "A"), det(0, 0.9, [0.0, 0.0, 4.0, 4.0], "B")];
        let out = nms(&pair, 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);

        // different classes never suppress each other
        let mixed = vec![det(0, 0.8, [0.0, 0.0, 4.0, 4.0], "A"), det(1, 0.9, [0.0, 0.0, 4.0, 4.0], "B")];
        assert_eq!(nms(&mixed, 0.5).len(), 2);
    }

    #[test]
    fn nms_ties_keep_input_order() {
        let a = det(0, 0.5, [0.0, 0.0, 4.0, 4.0], "A");
        let b = det(0, 0.5, [0.0, 0.0, 4.0, 4.0], "B");
        let out = nms(&[a.clone(), b], 0.5);
        assert_eq!(out, vec![a]);
    }

    #[test]
    fn softnms_disjoint_unchanged() {
        let dets = vec![det(0, 0.9, [0.0, 0.0, 1.0, 1.0], "A"), det(0, 0.5, [5.0, 5.0, 6.0, 6.0], "A")];
        assert_eq!(soft_nms(&dets, 0.5, 0.3), dets);
    }

    /// Two boxes of width 10 sharing 20/3 columns have IoU exactly 0.5.
    fn half_overlap_pair(second: f64) -> Vec<Detection> {
        let shift = 10.0 / 3.0;
        vec![
            det(0, 0.9, [0.0, 0.0, 10.0, 10.0], "A"),
            det(0, second, [shift, 0.0, 10.0 + shift, 10.0], "B"),
        ]
    }

    #[test]
    fn softnms_gaussian_decay() {
        let dets = half_overlap_pair(0.8);
        assert!((iou(&dets[0].bbox, &dets[1].bbox) - 0.5).abs() < 1e-12);
        let out = soft_nms(&dets, 0.5, 0.3);
        assert_eq!(out.len(), 2);
        assert!((out[1].score - 0.8 * (-0.5f64).exp()).abs() < 1e-9);
        assert!((out[1].score - 0.48522).abs() < 1e-5);
        assert_eq!(out[1].bbox, dets[1].bbox);
    }

    #[test]
    fn softnms_drops_below_floor() {
        let dets = half_overlap_pair(0.35);
        let out = soft_nms(&dets, 0.5, 0.3);
        assert_eq!(out.len(), 1);
        assert!((0.35 * (-0.5f64).exp() - 0.2123).abs() < 1e-4);
    }

    #[test]
    fn wbf_examples() {
        let one = vec![det(0, 0.8, [0.0, 0.0, 10.0, 10.0], "A")];
        let out = wbf(&one, 0.55, 2).unwrap();
        assert_eq!(out[0].bbox, one[0].bbox);
        assert!((out[0].score - 0.4).abs() < 1e-12);

        let two = vec![det(0, 0.8, [0.0, 0.0, 10.0, 10.0], "A"), det(0, 0.8, [0.0, 0.0, 10.0, 10.0], "B")];
        let out = wbf(&two, 0.55, 2).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bbox, two[0].bbox);
        assert!((out[0].score - 0.8).abs() < 1e-12);

        let shifted = vec![det(0, 0.6, [0.0, 0.0, 10.0, 10.0], "A"), det(0, 0.3, [2.0, 0.0, 12.0, 10.0], "B")];
        let out = wbf(&shifted, 0.55, 2).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out[0].bbox.x1 - 0.6 / 0.9 * 1.0).abs() < 1e-4);
        assert!((out[0].bbox.x1 - 0.6667).abs() < 1e-4);

        assert!(wbf(&one, 0.55, 0).is_err());
    }

    #[test]
    fn nmw_examples() {
        let disjoint = vec![det(0, 0.9, [0.0, 0.0, 1.0, 1.0], "A"), det(1, 0.4, [0.0, 0.0, 1.0, 1.0], "B"), det(0, 0.3, [5.0, 5.0, 7.0, 7.0], "A")];
        assert_eq!(nmw(&disjoint, 0.6), disjoint);

        let same = vec![det(0, 0.9, [1.0, 2.0, 3.0, 4.0], "A"), det(0, 0.6, [1.0, 2.0, 3.0, 4.0], "B")];
        let out = nmw(&same, 0.6);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bbox, same[0].bbox);
        assert_eq!(out[0].score, 0.9);

        let pair = vec![det(0, 0.9, [0.0, 0.0, 10.0, 10.0], "A"), det(0, 0.5, [0.0, 0.0, 10.0, 8.0], "B")];
        assert!((iou(&pair[0].bbox, &pair[1].bbox) - 0.8).abs() < 1e-12);
        let out = nmw(&pair, 0.6);
        assert_eq!(out.len(), 1);
        assert!((out[0].bbox.y2 - (0.9 * 10.0 + 0.4 * 8.0) / 1.3).abs() < 1e-9);
        assert!((out[0].bbox.y2 - 9.3846).abs() < 1e-4);
    }

    #[test]
    fn fuse_single_expert_nms_is_identity_on_suppressed_input() {
        let dets = vec![det(0, 0.9, [0.0, 0.0, 4.0, 4.0], "A"), det(1, 0.5, [0.0, 0.0, 4.0, 4.0], "A")];
        let cfg = FusionConfig::with_method(FusionMethod::Nms);
        assert_eq!(fuse(std::slice::from_ref(&dets), &cfg).unwrap(), dets);
    }

    #[test]
    fn fuse_disjoint_experts_is_union() {
        let a = vec![det(0, 0.9, [0.0, 0.0, 4.0, 4.0], "A")];
        let b = vec![det(0, 0.7, [10.0, 10.0, 14.0, 14.0], "B")];
        for m in [FusionMethod::Nms, FusionMethod::Nmw] {
            let out = fuse(&[a.clone(), b.clone()], &FusionConfig::with_method(m)).unwrap();
            assert_eq!(out, vec![a[0].clone(), b[0].clone()], "{m}");
        }
        let mut cfg = FusionConfig::with_method(FusionMethod::SoftNms);
        cfg.softnms_score_floor = 0.1;
        assert_eq!(fuse(&[a.clone(), b.clone()], &cfg).unwrap().len(), 2);
    }

    #[test]
    fn fuse_with_reweighting_composes() {
        let a = vec![det(0, 0.9, [0.0, 0.0, 10.0, 10.0], "A"), det(0, 0.4, [20.0, 20.0, 25.0, 25.0], "A")];
        let b = vec![det(0, 0.8, [1.0, 0.0, 10.0, 10.0], "B")];
        let w: BTreeMap<_, _> = [("A".to_string(), 0.5), ("B".to_string(), 0.6)].into();
        let cfg = FusionConfig {
            model_map_weights: Some(w.clone()),
            ..FusionConfig::default()
        };
        let got = fuse(&[a.clone(), b.clone()], &cfg).unwrap();
        let mut manual = map_reweight(&a, &w).unwrap();
        manual.extend(map_reweight(&b, &w).unwrap());
        assert_eq!(got, nmw(&manual, 0.6));
    }

    #[test]
    fn fuse_keeps_images_apart() {
        let mut a = det(0, 0.9, [0.0, 0.0, 4.0, 4.0], "A");
        a.image_id = "b".into();
        let mut b = det(0, 0.8, [0.0, 0.0, 4.0, 4.0], "A");
        b.image_id = "a".into();
        let out = fuse(&[vec![a, b]], &FusionConfig::with_method(FusionMethod::Nms)).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].image_id, "a");
    }

    #[test]
    fn method_names_round_trip() {
        for m in [FusionMethod::Nms, FusionMethod::SoftNms, FusionMethod::Wbf, FusionMethod::Nmw] {
            assert_eq!(m.to_string().parse::<FusionMethod>().unwrap(), m);
        }
        assert!("median".parse::<FusionMethod>().is_err());
    }

    #[test]
    fn mixture_from_maps() {
        let w = map_weights_to_mixture(&[0.5766, 0.5221]).unwrap();
        assert!((w[0] - 0.5248).abs() < 1e-4 && (w[1] - 0.4752).abs() < 1e-4);
        assert!(map_weights_to_mixture(&[0.0, 0.0]).is_err());
    }
}
