//! Routing statistics and expert disagreement.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::eval::Subset;
use crate::gate::GateOutput;
use crate::geometry::{iou, Detection};

pub const HISTOGRAM_BINS: usize = 20;
pub const DEFAULT_DISAGREEMENT_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub expert_id: String,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    /// Counts over `HISTOGRAM_BINS` equal bins of `[0, 1]`; 1.0 falls in the last bin.
    pub histogram: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetRouting {
    pub subset: String,
    pub samples: usize,
    pub experts: Vec<WeightStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingSummary {
    pub expert_ids: Vec<String>,
    /// Non-empty subsets in report order, then `all`.
    pub subsets: Vec<SubsetRouting>,
}

impl RoutingSummary {
    pub fn subset(&self, name: &str) -> Option<&SubsetRouting> {
        self.subsets.iter().find(|s| s.subset == name)
    }
}

/// Linear-interpolated quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn weight_stats(expert_id: &str, values: &[f64]) -> WeightStats {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut histogram = vec![0; HISTOGRAM_BINS];
    for v in values {
        let b = ((v * HISTOGRAM_BINS as f64).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
        histogram[b] += 1;
    }
    WeightStats {
        expert_id: expert_id.to_string(),
        mean,
        std: var.sqrt(),
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        q1: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        q3: quantile(&sorted, 0.75),
        histogram,
    }
}

fn label_of(subsets: &BTreeMap<String, Subset>, image_id: &str) -> Subset {
    subsets.get(image_id).copied().unwrap_or(Subset::Undefined)
}

/// Per-subset distribution of gate weights. Non-single outputs contribute
/// the mean of their weight rows. Unlabeled images go to `undefined`.
pub fn routing_summary(outputs: &[(String, GateOutput)], subsets: &BTreeMap<String, Subset>, expert_ids: &[String]) -> RoutingSummary {
    let n = expert_ids.len();
    let mut groups: BTreeMap<Subset, Vec<Vec<f64>>> = BTreeMap::new();
    let mut all = Vec::with_capacity(outputs.len());
    for (id, out) in outputs {
        let w = out.mean_weights();
        groups.entry(label_of(subsets, id)).or_default().push(w.clone());
        all.push(w);
    }
    let summarize = |name: &str, rows: &[Vec<f64>]| SubsetRouting {
        subset: name.to_string(),
        samples: rows.len(),
        experts: (0..n)
            .map(|e| {
                let col: Vec<f64> = rows.iter().map(|r| r[e]).collect();
                weight_stats(&expert_ids[e], &col)
            })
            .collect(),
    };
    let mut out = Vec::new();
    for s in Subset::ALL {
        if let Some(rows) = groups.get(&s) {
            out.push(summarize(s.as_str(), rows));
        }
    }
    if !all.is_empty() {
        out.push(summarize("all", &all));
    }
    RoutingSummary {
        expert_ids: expert_ids.to_vec(),
        subsets: out,
    }
}

/// One CSV row per sample: `image_id,subset,<expert weights...>`.
pub fn routing_csv(outputs: &[(String, GateOutput)], subsets: &BTreeMap<String, Subset>, expert_ids: &[String]) -> String {
    let mut s = String::from("image_id,subset");
    for e in expert_ids {
        let _ = write!(s, ",w_{e}");
    }
    s.push('\n');
    for (id, out) in outputs {
        let _ = write!(s, "{id},{}", label_of(subsets, id));
        for w in out.mean_weights() {
            let _ = write!(s, ",{w}");
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DisagreementCounts {
    pub full_agreement: usize,
    pub label_disagreement: usize,
    pub only_a: usize,
    pub only_b: usize,
}

impl DisagreementCounts {
    pub fn total(&self) -> usize {
        self.full_agreement + self.label_disagreement + self.only_a + self.only_b
    }

    pub fn swapped(self) -> Self {
        Self {
            only_a: self.only_b,
            only_b: self.only_a,
            ..self
        }
    }
}

/// Class-agnostic greedy matching of one image's detections: candidate pairs
/// with IoU at or above `match_iou` are taken in descending IoU order (ties by
/// index), each detection used at most once. Returns `(a_index, b_index)`.
pub fn match_pairs(a: &[Detection], b: &[Detection], match_iou: f64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, da) in a.iter().enumerate() {
        for (j, db) in b.iter().enumerate() {
            let v = iou(&da.bbox, &db.bbox);
            if v >= match_iou && v > 0.0 {
                pairs.push((v, i, j));
            }
        }
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut out = Vec::new();
    for (_, i, j) in pairs {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            out.push((i, j));
        }
    }
    out
}

fn image_counts(a: &[Detection], b: &[Detection], match_iou: f64) -> DisagreementCounts {
    let pairs = match_pairs(a, b, match_iou);
    let same = pairs.iter().filter(|(i, j)| a[*i].class_id == b[*j].class_id).count();
    DisagreementCounts {
        full_agreement: same,
        label_disagreement: pairs.len() - same,
        only_a: a.len() - pairs.len(),
        only_b: b.len() - pairs.len(),
    }
}

/// Per-image disagreement counts over every image that appears in either set.
pub fn disagreement(a: &[Detection], b: &[Detection], match_iou: f64) -> BTreeMap<String, DisagreementCounts> {
    let mut by_image: BTreeMap<&str, (Vec<Detection>, Vec<Detection>)> = BTreeMap::new();
    for d in a {
        by_image.entry(&d.image_id).or_default().0.push(d.clone());
    }
    for d in b {
        by_image.entry(&d.image_id).or_default().1.push(d.clone());
    }
    by_image
        .into_iter()
        .map(|(id, (da, db))| (id.to_string(), image_counts(&da, &db, match_iou)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetDisagreement {
    pub subset: String,
    pub images: usize,
    pub full_agreement: f64,
    pub label_disagreement: f64,
    pub only_a: f64,
    pub only_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisagreementReport {
    pub expert_a: String,
    pub expert_b: String,
    pub match_iou: f64,
    /// Per-image averages; non-empty subsets in report order, then `all`.
    pub subsets: Vec<SubsetDisagreement>,
}

impl DisagreementReport {
    pub fn subset(&self, name: &str) -> Option<&SubsetDisagreement> {
        self.subsets.iter().find(|s| s.subset == name)
    }

    /// One CSV row per subset.
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "subset,images,full_agreement,label_disagreement,only_{},only_{}\n",
            self.expert_a, self.expert_b
        );
        for r in &self.subsets {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.subset, r.images, r.full_agreement, r.label_disagreement, r.only_a, r.only_b
            );
        }
        s
    }
}

fn average(name: &str, counts: &[DisagreementCounts]) -> SubsetDisagreement {
    let n = counts.len() as f64;
    let mean = |f: fn(&DisagreementCounts) -> usize| counts.iter().map(f).sum::<usize>() as f64 / n;
    SubsetDisagreement {
        subset: name.to_string(),
        images: counts.len(),
        full_agreement: mean(|c| c.full_agreement),
        label_disagreement: mean(|c| c.label_disagreement),
        only_a: mean(|c| c.only_a),
        only_b: mean(|c| c.only_b),
    }
}

/// Per-subset averages of per-image counts. Images with no detections from
/// either expert must be present in `counts` (as zeros) to be averaged in.
pub fn disagreement_report(
    counts: &BTreeMap<String, DisagreementCounts>,
    subsets: &BTreeMap<String, Subset>,
    expert_a: &str,
    expert_b: &str,
    match_iou: f64,
) -> DisagreementReport {
    let mut groups: BTreeMap<Subset, Vec<DisagreementCounts>> = BTreeMap::new();
    for (id, c) in counts {
        groups.entry(label_of(subsets, id)).or_default().push(*c);
    }
    let mut out: Vec<SubsetDisagreement> = Subset::ALL
        .into_iter()
        .filter_map(|s| groups.get(&s).map(|c| average(s.as_str(), c)))
        .collect();
    if !counts.is_empty() {
        let all: Vec<DisagreementCounts> = counts.values().copied().collect();
        out.push(average("all", &all));
    }
    DisagreementReport {
        expert_a: expert_a.to_string(),
        expert_b: expert_b.to_string(),
        match_iou,
        subsets: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn single(w: &[f64]) -> GateOutput {
        GateOutput::Single { weights: w.to_vec() }
    }

    fn ids() -> Vec<String> {
        vec!["day".into(), "night".into()]
    }

    fn det(img: &str, c: usize, b: [f64; 4]) -> Detection {
        Detection::new(img, c, 0.9, BBox::try_from(b).unwrap())
    }

    #[test]
    fn collapsed_routing() {
        let outs: Vec<(String, GateOutput)> = (0..3).map(|i| (format!("i{i}"), single(&[1.0, 0.0]))).collect();
        let r = routing_summary(&outs, &BTreeMap::new(), &ids());
        let all = r.subset("all").unwrap();
        assert_eq!(all.experts[0].mean, 1.0);
        assert_eq!(all.experts[0].std, 0.0);
        assert_eq!(all.experts[0].histogram[HISTOGRAM_BINS - 1], 3);
        assert!(r.subset("daytime").is_none());
        assert_eq!(r.subset("undefined").unwrap().samples, 3);
    }

    #[test]
    fn two_point_statistics() {
        let outs = vec![("a".to_string(), single(&[0.25, 0.75])), ("b".to_string(), single(&[0.75, 0.25]))];
        let subs: BTreeMap<String, Subset> = [("a".to_string(), Subset::Daytime), ("b".to_string(), Subset::Daytime)].into();
        let r = routing_summary(&outs, &subs, &ids());
        let day = r.subset("daytime").unwrap();
        assert_eq!(day.experts[0].mean, 0.5);
        assert_eq!(day.experts[1].mean, 0.5);
        assert_eq!(day.experts[0].std, 0.25);
        assert_eq!(day.experts[0].median, 0.5);
        assert!(r.subset("nighttime").is_none());
    }

    #[test]
    fn two_experts_mirror() {
        let outs: Vec<(String, GateOutput)> = [0.1, 0.35, 0.8, 0.95].iter().enumerate().map(|(i, &w)| (i.to_string(), single(&[w, 1.0 - w]))).collect();
        let r = routing_summary(&outs, &BTreeMap::new(), &ids());
        let s = &r.subsets[0].experts;
        assert!((s[0].mean + s[1].mean - 1.0).abs() < 1e-12);
        assert!((s[0].std - s[1].std).abs() < 1e-12);
        assert!((s[0].q1 + s[1].q3 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_sets_fully_agree() {
        let a = vec![det("x", 0, [0.0, 0.0, 10.0, 10.0]), det("x", 1, [20.0, 20.0, 30.0, 30.0])];
        let c = disagreement(&a, &a, 0.5);
        assert_eq!(c["x"], DisagreementCounts { full_agreement: 2, ..Default::default() });
        let only = disagreement(&a, &[], 0.5);
        assert_eq!(only["x"].only_a, 2);
    }

    #[test]
    fn label_disagreement_example() {
        let a = vec![det("x", 0, [0.0, 0.0, 10.0, 10.0])];
        let b = vec![det("x", 1, [0.0, 0.0, 10.0, 9.0])];
        assert_eq!(disagreement(&a, &b, 0.5)["x"].label_disagreement, 1);
    }

    #[test]
    fn report_averages() {
        let one: BTreeMap<String, DisagreementCounts> = [(
            "x".to_string(),
            DisagreementCounts {
                full_agreement: 3,
                label_disagreement: 1,
                only_a: 2,
                only_b: 4,
            },
        )]
        .into();
        let r = disagreement_report(&one, &BTreeMap::new(), "a", "b", 0.5);
        let s = r.subset("all").unwrap();
        assert_eq!((s.full_agreement, s.label_disagreement, s.only_a, s.only_b), (3.0, 1.0, 2.0, 4.0));

        let two: BTreeMap<String, DisagreementCounts> = [
            ("x".to_string(), DisagreementCounts { full_agreement: 2, ..Default::default() }),
            ("y".to_string(), DisagreementCounts::default()),
        ]
        .into();
        let r = disagreement_report(&two, &BTreeMap::new(), "a", "b", 0.5);
        assert_eq!(r.subset("all").unwrap().full_agreement, 1.0);
        assert!(r.to_csv().starts_with("subset,images,full_agreement,label_disagreement,only_a,only_b\n"));
    }
}
