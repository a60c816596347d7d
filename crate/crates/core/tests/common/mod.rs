//! Helpers shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::path::Path;

use moedet::decode::{AnchorConfig, AnchorLevel, RawPredictionTensor};
use moedet::eval::GroundTruth;
use moedet::gate::{Architecture, FeatureMap, GateMode, GateParams, GateSpec};
use moedet::geometry::{iou, BBox, Detection};
use moedet::training::{batch_loss, gate_gradient, Balancing, LossMode, TrainConfig, TrainSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MODES: [GateMode; 3] = [GateMode::Single, GateMode::Spatial, GateMode::Classwise];
pub const LOSSES: [LossMode; 2] = [LossMode::DomainCe, LossMode::Detection];

pub fn small_anchors() -> AnchorConfig {
    AnchorConfig {
        image_size: [32, 32],
        class_count: 2,
        levels: vec![
            AnchorLevel {
                stride: 8,
                anchors: vec![[8.0, 8.0]],
            },
            AnchorLevel {
                stride: 16,
                anchors: vec![[20.0, 16.0]],
            },
        ],
    }
}

fn random_box(rng: &mut ChaCha8Rng, w: f64, h: f64) -> BBox {
    let bw = rng.random_range(4.0..w / 2.0);
    let bh = rng.random_range(4.0..h / 2.0);
    let x = rng.random_range(0.0..w - bw);
    let y = rng.random_range(0.0..h - bh);
    BBox::new(x, y, x + bw, y + bh).unwrap()
}

/// A small random batch: 2 experts, 4-channel 3x3 features, labels and one
/// ground-truth box per sample.
pub fn gradient_batch(seed: u64, n: usize) -> (Vec<TrainSample>, AnchorConfig) {
    let cfg = small_anchors();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| {
            let id = format!("g{i}");
            let features = FeatureMap {
                image_id: id.clone(),
                channels: 4,
                height: 3,
                width: 3,
                data: (0..36).map(|_| rng.random_range(-2.0f32..2.0)).collect(),
                provenance: "test".into(),
                expert_ids: vec!["a".into(), "b".into()],
            };
            let raws = ["a", "b"]
                .iter()
                .map(|e| {
                    let mut t = RawPredictionTensor::zeros(&cfg, id.as_str(), *e);
                    for l in &mut t.levels {
                        l.data.iter_mut().for_each(|v| *v = rng.random_range(-2.0f32..2.0));
                    }
                    t
                })
                .collect();
            let gt = GroundTruth::new(id.as_str(), rng.random_range(0..2), random_box(&mut rng, 32.0, 32.0));
            TrainSample {
                features,
                raws,
                ground_truth: vec![gt],
                domain_label: Some(i % 2),
            }
        })
        .collect();
    (samples, cfg)
}

pub fn small_gate(arch: Architecture, mode: GateMode, seed: u64) -> GateParams {
    let mut spec = GateSpec::new(arch, mode, vec!["a".into(), "b".into()], 4);
    spec.hidden = 6;
    spec.conv_channels = 3;
    if mode == GateMode::Classwise {
        spec.class_count = Some(2);
    }
    GateParams::init(spec, seed).unwrap()
}

/// Largest relative error between the analytic gradient and central
/// differences with step `h`, over every parameter. The relative error of a
/// pair is `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_error(
    arch: Architecture,
    mode: GateMode,
    loss: LossMode,
    balancing: Balancing,
    seed: u64,
    h: f64,
    floor: f64,
) -> f64 {
    let params = small_gate(arch, mode, seed);
    let (samples, anchors) = gradient_batch(seed.wrapping_mul(31).wrapping_add(7), 3);
    let batch: Vec<&TrainSample> = samples.iter().collect();
    let cfg = TrainConfig {
        loss_mode: loss,
        balancing,
        lambda: 0.5,
        ..TrainConfig::default()
    };
    let (_, analytic, _) = gate_gradient(&params, &batch, &cfg, Some(&anchors)).unwrap();
    let mut worst: f64 = 0.0;
    let mut p = params.clone();
    for i in 0..params.values.len() {
        let x = params.values[i];
        p.values[i] = x + h;
        let up = batch_loss(&p, &batch, &cfg, Some(&anchors)).unwrap().total;
        p.values[i] = x - h;
        let down = batch_loss(&p, &batch, &cfg, Some(&anchors)).unwrap().total;
        p.values[i] = x;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    worst
}

/// Straightforward NMS oracle: repeatedly takes the highest-scoring remaining
/// detection (lowest index on ties) and deletes everything of its class that
/// overlaps it by more than `thr`.
pub fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut remaining: Vec<(usize, &Detection)> = dets.iter().enumerate().collect();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for k in 1..remaining.len() {
            let (i, d) = remaining[k];
            let (bi, bd) = remaining[best];
            if d.score > bd.score || (d.score == bd.score && i < bi) {
                best = k;
            }
        }
        let (_, top) = remaining.remove(best);
        remaining.retain(|(_, d)| !(d.class_id == top.class_id && d.image_id == top.image_id && iou(&d.bbox, &top.bbox) > thr));
        kept.push(top.clone());
    }
    kept
}

pub fn random_detections(rng: &mut ChaCha8Rng, max_boxes: usize, classes: usize) -> Vec<Detection> {
    let n = rng.random_range(0..=max_boxes);
    (0..n)
        .map(|_| {
            // coarse grid so ties in score and exact overlaps occur
            let x = rng.random_range(0..8) as f64 * 4.0;
            let y = rng.random_range(0..8) as f64 * 4.0;
            let w = rng.random_range(1..6) as f64 * 4.0;
            let h = rng.random_range(1..6) as f64 * 4.0;
            let score = rng.random_range(1..=20) as f64 / 20.0;
            Detection::new("img", rng.random_range(0..classes), score, BBox::new(x, y, x + w, y + h).unwrap())
        })
        .collect()
}

pub fn moedet_bin() -> &'static Path {
    Path::new(env!("CARGO_BIN_EXE_moedet"))
}

pub fn continuous_detections(rng: &mut ChaCha8Rng, image: &str, n: usize, classes: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let x = rng.random_range(0.0..30.0);
            let y = rng.random_range(0.0..30.0);
            let w = rng.random_range(2.0..15.0);
            let h = rng.random_range(2.0..15.0);
            Detection::new(image, rng.random_range(0..classes), rng.random_range(0.01..1.0), BBox::new(x, y, x + w, y + h).unwrap())
        })
        .collect()
}

/// Exhaustive matching oracle: among all one-to-one matchings using pairs with
/// IoU >= `thr`, the one whose IoUs sorted in descending order are
/// lexicographically largest.
pub fn exhaustive_matching(a: &[Detection], b: &[Detection], thr: f64) -> Vec<(usize, usize)> {
    fn search(
        i: usize,
        a: &[Detection],
        b: &[Detection],
        thr: f64,
        used: &mut Vec<bool>,
        cur: &mut Vec<(usize, usize, f64)>,
        best: &mut Option<(Vec<f64>, Vec<(usize, usize)>)>,
    ) {
        if i == a.len() {
            let mut key: Vec<f64> = cur.iter().map(|p| p.2).collect();
            key.sort_by(|x, y| y.total_cmp(x));
            let better = match best {
                None => true,
                Some((k, _)) => {
                    let mut ord = std::cmp::Ordering::Equal;
                    for t in 0..key.len().max(k.len()) {
                        let (x, y) = (key.get(t).copied().unwrap_or(-1.0), k.get(t).copied().unwrap_or(-1.0));
                        ord = x.total_cmp(&y);
                        if ord != std::cmp::Ordering::Equal {
                            break;
                        }
                    }
                    ord == std::cmp::Ordering::Greater
                }
            };
            if better {
                let mut pairs: Vec<(usize, usize)> = cur.iter().map(|p| (p.0, p.1)).collect();
                pairs.sort();
                *best = Some((key, pairs));
            }
            return;
        }
        search(i + 1, a, b, thr, used, cur, best);
        for j in 0..b.len() {
            let v = iou(&a[i].bbox, &b[j].bbox);
            if !used[j] && v >= thr && v > 0.0 {
                used[j] = true;
                cur.push((i, j, v));
                search(i + 1, a, b, thr, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = None;
    search(0, a, b, thr, &mut vec![false; b.len()], &mut Vec::new(), &mut best);
    best.map(|(_, p)| p).unwrap_or_default()
}

/// Independent AP oracle: naive greedy matching, then the sum over true
/// positives of `1/G` times the best precision at that rank or later.
pub fn ap_oracle(dets: &[Detection], gts: &[GroundTruth], class_id: usize, thr: f64) -> Option<f64> {
    let g: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == class_id).collect();
    if g.is_empty() {
        return None;
    }
    let mut d: Vec<(usize, &Detection)> = dets.iter().enumerate().filter(|(_, d)| d.class_id == class_id).collect();
    d.sort_by(|x, y| y.1.score.partial_cmp(&x.1.score).unwrap().then(x.0.cmp(&y.0)));
    let mut taken = vec![false; g.len()];
    let mut tp = Vec::new();
    for (_, det) in &d {
        let mut best: Option<usize> = None;
        for (k, gt) in g.iter().enumerate() {
            if taken[k] || gt.image_id != det.image_id {
                continue;
            }
            let v = iou(&det.bbox, &gt.bbox);
            if v >= thr && best.is_none_or(|b| v > iou(&det.bbox, &g[b].bbox)) {
                best = Some(k);
            }
        }
        if let Some(k) = best {
            taken[k] = true;
        }
        tp.push(best.is_some());
    }
    let precision: Vec<f64> = (0..tp.len())
        .map(|k| tp[..=k].iter().filter(|t| **t).count() as f64 / (k + 1) as f64)
        .collect();
    let mut ap = 0.0;
    for k in 0..tp.len() {
        if tp[k] {
            let env = precision[k..].iter().copied().fold(0.0, f64::max);
            ap += env / g.len() as f64;
        }
    }
    Some(ap)
}

pub struct Run {
    pub code: i32,
    pub stdout: Vec<u8>,
    pub stderr: String,
}

/// Runs the binary with the given arguments.
pub fn moedet<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Run {
    let o = std::process::Command::new(moedet_bin())
        .args(args)
        .env_remove("MOE_THREADS")
        .output()
        .expect("binary runs");
    Run {
        code: o.status.code().unwrap_or(-1),
        stdout: o.stdout,
        stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
    }
}

/// Like [`moedet`] but panics unless the exit code is 0.
pub fn moedet_ok<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Vec<u8> {
    let r = moedet(args);
    assert_eq!(r.code, 0, "{}", r.stderr);
    r.stdout
}

/// Detection lines as a sorted multiset, for order-insensitive comparison.
pub fn canonical_lines(bytes: &[u8]) -> Vec<String> {
    let mut v: Vec<String> = String::from_utf8_lossy(bytes).lines().map(str::to_string).collect();
    v.sort();
    v
}

/// Checks every fusion method on one input: no score rises, merged boxes stay
/// inside their members' envelope, and classes never interact.
pub fn check_fusion_invariants(dets: &[Detection]) -> Result<(), String> {
    use moedet::fusion::{fuse_image, nmw_with_members, soft_nms, wbf_with_members, FusionConfig, FusionMethod};
    let cfg = FusionConfig::default();
    let thr = cfg.iou_threshold;
    for (name, out) in [("nms", nms_oracle(dets, thr)), ("soft_nms", soft_nms(dets, 0.5, 0.3))] {
        for o in &out {
            if !dets.iter().any(|d| d.class_id == o.class_id && d.bbox == o.bbox && o.score <= d.score) {
                return Err(format!("{name}: output {o:?} has no dominating input"));
            }
        }
    }
    let merged = [
        ("wbf", wbf_with_members(dets, thr, 2).map_err(|e| e.to_string())?),
        ("nmw", nmw_with_members(dets, thr)),
    ];
    for (name, out) in merged {
        for (o, members) in &out {
            let ms: Vec<&Detection> = members.iter().map(|&m| &dets[m]).collect();
            if ms.is_empty() || ms.iter().any(|m| m.class_id != o.class_id) {
                return Err(format!("{name}: bad members for {o:?}"));
            }
            let top = ms.iter().map(|m| m.score).fold(f64::MIN, f64::max);
            if o.score > top {
                return Err(format!("{name}: score {} above best member {top}", o.score));
            }
            let lo = |k: usize| ms.iter().map(|m| m.bbox.to_array()[k]).fold(f64::MAX, f64::min);
            let hi = |k: usize| ms.iter().map(|m| m.bbox.to_array()[k]).fold(f64::MIN, f64::max);
            let b = o.bbox.to_array();
            for k in 0..4 {
                if b[k] < lo(k) - 1e-9 || b[k] > hi(k) + 1e-9 {
                    return Err(format!("{name}: {b:?} outside member envelope"));
                }
            }
        }
    }
    let key = |v: &[Detection]| {
        let mut k: Vec<String> = v.iter().map(|d| format!("{} {:?} {:?}", d.class_id, d.score, d.bbox.to_array())).collect();
        k.sort();
        k
    };
    let classes: std::collections::BTreeSet<usize> = dets.iter().map(|d| d.class_id).collect();
    for method in [FusionMethod::Nms, FusionMethod::SoftNms, FusionMethod::Wbf, FusionMethod::Nmw] {
        let cfg = FusionConfig::with_method(method);
        let joint = fuse_image(dets, &cfg, 2).map_err(|e| e.to_string())?;
        let mut split = Vec::new();
        for &c in &classes {
            let part: Vec<Detection> = dets.iter().filter(|d| d.class_id == c).cloned().collect();
            split.extend(fuse_image(&part, &cfg, 2).map_err(|e| e.to_string())?);
        }
        if key(&joint) != key(&split) {
            return Err(format!("{method}: classes interact"));
        }
    }
    Ok(())
}

/// The three hand-computed soft-NMS cases (sigma 0.5, floor 0.3): disjoint
/// boxes keep their scores; at IoU 0.5 a 0.8 decays to 0.8 * exp(-0.5) and a
/// 0.35 falls below the floor.
pub fn check_softnms_examples() -> Result<(), String> {
    use moedet::fusion::soft_nms;
    let d = |s: f64, x: f64| Detection::new("i", 0, s, BBox::new(x, 0.0, x + 10.0, 10.0).unwrap());
    let disjoint = vec![d(0.9, 0.0), d(0.5, 50.0)];
    if soft_nms(&disjoint, 0.5, 0.3) != disjoint {
        return Err("disjoint boxes changed".into());
    }
    // shifting by a third of the width gives IoU 0.5
    let shift = 10.0 / 3.0;
    let out = soft_nms(&[d(0.9, 0.0), d(0.8, shift)], 0.5, 0.3);
    let expect = 0.8 * (-0.5f64).exp();
    if out.len() != 2 || (out[1].score - expect).abs() > 1e-9 {
        return Err(format!("decayed score {:?}, expected {expect}", out.get(1).map(|o| o.score)));
    }
    let out = soft_nms(&[d(0.9, 0.0), d(0.35, shift)], 0.5, 0.3);
    if out.len() != 1 {
        return Err("0.35 should fall below the floor".into());
    }
    Ok(())
}
