//! mAP50 evaluation with per-subset reporting.
//!
//! AP uses all-points interpolation: the area under the monotone precision
//! envelope. Matching is greedy in descending score order; each detection takes
//! the unmatched ground truth of its image and class with the highest IoU, if
//! that IoU reaches the match threshold.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Detection};

pub const DEFAULT_MATCH_IOU: f64 = 0.5;
pub const DEFAULT_CONF_THRESHOLD: f64 = 0.001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

impl GroundTruth {
    pub fn new(image_id: impl Into<String>, class_id: usize, bbox: BBox) -> Self {
        Self {
            image_id: image_id.into(),
            class_id,
            bbox,
        }
    }
}

/// Time-of-day metadata label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Daytime,
    Nighttime,
    DawnDusk,
    Undefined,
}

impl Subset {
    /// Report column order.
    pub const ALL: [Subset; 4] = [Self::Daytime, Self::Nighttime, Self::DawnDusk, Self::Undefined];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Daytime => "daytime",
            Self::Nighttime => "nighttime",
            Self::DawnDusk => "dawn_dusk",
            Self::Undefined => "undefined",
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::input(format!("unknown subset label {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub conf_threshold: f64,
    pub match_iou: f64,
    /// Classes to report; inferred from the data when absent.
    pub class_count: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            conf_threshold: DEFAULT_CONF_THRESHOLD,
            match_iou: DEFAULT_MATCH_IOU,
            class_count: None,
        }
    }
}

fn rank(dets: &[&Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Area under the precision envelope of a TP/FP sequence.
fn all_points_ap(tp: &[bool], gt_count: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / gt_count as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// TP flags for `dets` (all of one class) in ranked order.
fn match_class(dets: &[&Detection], gts: &[&GroundTruth], iou_match: f64) -> Vec<bool> {
    let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image_id.as_str()).or_default().push(i);
    }
    let mut used = vec![false; gts.len()];
    rank(dets)
        .into_iter()
        .map(|d| {
            let det = dets[d];
            let mut best: Option<(f64, usize)> = None;
            for &g in by_image.get(det.image_id.as_str()).map(Vec::as_slice).unwrap_or(&[]) {
                if used[g] {
                    continue;
                }
                let v = iou(&det.bbox, &gts[g].bbox);
                if v >= iou_match && best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, g));
                }
            }
            match best {
                Some((_, g)) => {
                    used[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Average precision of one class, or `None` when the class has no ground truth.
pub fn match_and_ap(dets: &[Detection], gts: &[GroundTruth], class_id: usize, iou_match: f64) -> Option<f64> {
    let d: Vec<&Detection> = dets.iter().filter(|d| d.class_id == class_id).collect();
    let g: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == class_id).collect();
    if g.is_empty() {
        return None;
    }
    Some(all_points_ap(&match_class(&d, &g, iou_match), g.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub gt_count: usize,
    pub detection_count: usize,
    /// Absent when the class has no ground truth in this subset.
    pub ap50: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub subset: String,
    pub images: usize,
    pub gt_count: usize,
    pub detection_count: usize,
    pub map50: Option<f64>,
    pub per_class: Vec<ClassAp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub conf_threshold: f64,
    pub match_iou: f64,
    pub class_count: usize,
    /// Labeled subsets in `daytime, nighttime, dawn_dusk, undefined` order
    /// (subsets without images omitted), then `all`.
    pub subsets: Vec<SubsetReport>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn subset(&self, name: &str) -> Option<&SubsetReport> {
        self.subsets.iter().find(|s| s.subset == name)
    }

    pub fn overall(&self) -> &SubsetReport {
        self.subsets.last().expect("report always has an overall entry")
    }

    /// Overall mAP50, 0 when no class has ground truth.
    pub fn map50(&self) -> f64 {
        self.overall().map50.unwrap_or(0.0)
    }

    /// Aligned plain-text table, one row per subset plus a per-class block.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>7} {:>7} {:>9} {:>8}", "subset", "images", "gt", "dets", "mAP50");
        for r in &self.subsets {
            let m = r.map50.map_or("-".to_string(), |v| format!("{:.4}", v));
            let _ = writeln!(
                s,
                "{:<10} {:>7} {:>7} {:>9} {:>8}",
                r.subset, r.images, r.gt_count, r.detection_count, m
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<10} {:>7} {:>9} {:>8}", "class", "gt", "dets", "AP50");
        for c in &self.overall().per_class {
            let ap = c.ap50.map_or("-".to_string(), |v| format!("{:.4}", v));
            let _ = writeln!(s, "{:<10} {:>7} {:>9} {:>8}", c.class_id, c.gt_count, c.detection_count, ap);
        }
        s
    }
}

fn subset_report(name: &str, images: usize, dets: &[&Detection], gts: &[&GroundTruth], classes: usize, iou_match: f64) -> SubsetReport {
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let d: Vec<&Detection> = dets.iter().copied().filter(|d| d.class_id == c).collect();
        let g: Vec<&GroundTruth> = gts.iter().copied().filter(|g| g.class_id == c).collect();
        let ap50 = (!g.is_empty()).then(|| all_points_ap(&match_class(&d, &g, iou_match), g.len()));
        per_class.push(ClassAp {
            class_id: c,
            gt_count: g.len(),
            detection_count: d.len(),
            ap50,
        });
    }
    let aps: Vec<f64> = per_class.iter().filter_map(|c| c.ap50).collect();
    SubsetReport {
        subset: name.to_string(),
        images,
        gt_count: gts.len(),
        detection_count: dets.len(),
        map50: (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64),
        per_class,
    }
}

/// Evaluates detections against ground truth overall and per labeled subset.
///
/// Known images are those with ground truth or a subset label. Detections on
/// other images are ignored and reported as warnings. Images without a label
/// count toward `all` only.
pub fn evaluate(dets: &[Detection], gts: &[GroundTruth], subsets: &BTreeMap<String, Subset>, cfg: &EvalConfig) -> Result<EvalReport> {
    if !(cfg.match_iou > 0.0 && cfg.match_iou <= 1.0) {
        return Err(Error::config("match IoU must lie in (0, 1]"));
    }
    let known: BTreeSet<&str> = gts
        .iter()
        .map(|g| g.image_id.as_str())
        .chain(subsets.keys().map(String::as_str))
        .collect();
    let mut unknown: BTreeMap<&str, usize> = BTreeMap::new();
    let kept: Vec<&Detection> = dets
        .iter()
        .filter(|d| {
            if !known.contains(d.image_id.as_str()) {
                *unknown.entry(d.image_id.as_str()).or_default() += 1;
                return false;
            }
            d.score >= cfg.conf_threshold
        })
        .collect();
    let inferred = gts
        .iter()
        .map(|g| g.class_id + 1)
        .chain(kept.iter().map(|d| d.class_id + 1))
        .max()
        .unwrap_or(0);
    let classes = match cfg.class_count {
        Some(c) => {
            if let Some(g) = gts.iter().find(|g| g.class_id >= c) {
                return Err(Error::input(format!(
                    "ground-truth class {} >= class count {c} (image {})",
                    g.class_id, g.image_id
                )));
            }
            c
        }
        None => inferred,
    };
    let warnings = unknown
        .into_iter()
        .map(|(id, n)| format!("{n} detection(s) reference unknown image {id:?}; ignored"))
        .collect();

    let mut reports = Vec::new();
    for s in Subset::ALL {
        let images: BTreeSet<&str> = subsets.iter().filter(|(_, v)| **v == s).map(|(k, _)| k.as_str()).collect();
        if images.is_empty() {
            continue;
        }
        let d: Vec<&Detection> = kept.iter().copied().filter(|d| images.contains(d.image_id.as_str())).collect();
        let g: Vec<&GroundTruth> = gts.iter().filter(|g| images.contains(g.image_id.as_str())).collect();
        reports.push(subset_report(s.as_str(), images.len(), &d, &g, classes, cfg.match_iou));
    }
    let all_g: Vec<&GroundTruth> = gts.iter().collect();
    reports.push(subset_report("all", known.len(), &kept, &all_g, classes, cfg.match_iou));
    Ok(EvalReport {
        conf_threshold: cfg.conf_threshold,
        match_iou: cfg.match_iou,
        class_count: classes,
        subsets: reports,
        warnings,
    })
}
