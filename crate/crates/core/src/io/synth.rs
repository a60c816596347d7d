//! Seeded synthetic two-domain datasets.
//!
//! Two experts, `daytime` (index 0) and `nighttime` (index 1). Each is
//! accurate on its own domain and degraded on the other, as set by an
//! [`ExpertQuality`] per (expert, domain) pair. Gate features are a
//! domain-signed pattern plus Gaussian noise, so domains are linearly
//! separable with a configurable margin. Optional "ambiguous" images mix the
//! two domains with a uniform weight `m` and carry no domain label.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::jsonl::{write_ground_truth, write_subsets};
use super::manifest::{write_json, write_manifest, write_pipeline, ExpertSource, Manifest, ManifestSample, PipelineConfig};
use super::tensor_file::{write_features, write_raw, EXTENSION};
use crate::decode::{assign_slot, logit, AnchorConfig, AnchorLevel, RawPredictionTensor, Slot};
use crate::error::{Error, Result};
use crate::eval::{GroundTruth, Subset};
use crate::gate::FeatureMap;
use crate::geometry::{iou, BBox};
use crate::training::TrainSample;

pub const EXPERT_IDS: [&str; 2] = ["daytime", "nighttime"];

/// How one expert behaves on one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertQuality {
    /// Probability that an object produces no positive prediction.
    pub miss_prob: f64,
    /// Center jitter (fraction of box size) and log-size jitter, standard deviation.
    pub loc_noise: f64,
    /// Mean false positives per image (Poisson).
    pub fp_rate: f64,
    /// Objectness logit of false positives.
    pub fp_logit: f64,
    /// Objectness logit of detected objects.
    pub obj_logit: f64,
    /// Class logit of the predicted class.
    pub cls_logit: f64,
    /// Standard deviation added to positive objectness and class logits.
    pub conf_noise: f64,
    /// Probability that a detected object is given a wrong class.
    pub flip_prob: f64,
}

impl ExpertQuality {
    /// Exact boxes, confident, no misses or false positives.
    pub fn perfect() -> Self {
        Self {
            miss_prob: 0.0,
            loc_noise: 0.0,
            fp_rate: 0.0,
            fp_logit: 0.0,
            obj_logit: 8.0,
            cls_logit: 8.0,
            conf_noise: 0.0,
            flip_prob: 0.0,
        }
    }

    pub fn in_domain() -> Self {
        Self {
            miss_prob: 0.05,
            loc_noise: 0.04,
            fp_rate: 0.2,
            fp_logit: 0.0,
            obj_logit: 6.0,
            cls_logit: 6.0,
            conf_noise: 1.0,
            flip_prob: 0.03,
        }
    }

    pub fn cross_domain() -> Self {
        Self {
            miss_prob: 0.35,
            loc_noise: 0.3,
            fp_rate: 1.5,
            fp_logit: 4.0,
            obj_logit: 4.0,
            cls_logit: 5.0,
            conf_noise: 1.0,
            flip_prob: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub images_per_domain: usize,
    pub ambiguous_images: usize,
    pub class_count: usize,
    pub max_objects: usize,
    pub seed: u64,
    /// `quality[expert][domain]`.
    pub quality: Vec<Vec<ExpertQuality>>,
    pub feature_margin: f64,
    pub feature_noise: f64,
    pub feature_channels_per_expert: usize,
    pub feature_size: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            images_per_domain: 200,
            ambiguous_images: 0,
            class_count: 3,
            max_objects: 4,
            seed: 0,
            quality: vec![
                vec![ExpertQuality::in_domain(), ExpertQuality::cross_domain()],
                vec![ExpertQuality::cross_domain(), ExpertQuality::in_domain()],
            ],
            feature_margin: 1.0,
            feature_noise: 0.5,
            feature_channels_per_expert: 2,
            feature_size: 4,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 {
            return Err(Error::config("synthetic spec needs at least one class"));
        }
        if self.quality.len() != 2 || self.quality.iter().any(|q| q.len() != 2) {
            return Err(Error::config("quality must be a 2x2 table [expert][domain]"));
        }
        if self.max_objects == 0 || self.feature_channels_per_expert == 0 || self.feature_size == 0 {
            return Err(Error::config("object count and feature sizes must be positive"));
        }
        for q in self.quality.iter().flatten() {
            let probs_ok = (0.0..=1.0).contains(&q.miss_prob) && (0.0..=1.0).contains(&q.flip_prob);
            if !probs_ok || q.loc_noise < 0.0 || q.fp_rate < 0.0 || q.conf_noise < 0.0 {
                return Err(Error::config("invalid expert quality"));
            }
        }
        if self.feature_noise < 0.0 {
            return Err(Error::config("feature noise must be non-negative"));
        }
        Ok(())
    }

    pub fn anchors(&self) -> AnchorConfig {
        AnchorConfig {
            image_size: [64, 64],
            class_count: self.class_count,
            levels: vec![
                AnchorLevel {
                    stride: 8,
                    anchors: vec![[10.0, 10.0], [18.0, 12.0]],
                },
                AnchorLevel {
                    stride: 16,
                    anchors: vec![[28.0, 24.0], [44.0, 40.0]],
                },
            ],
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthImage {
    pub image_id: String,
    pub subset: Subset,
    pub domain_label: Option<usize>,
    /// Share of the daytime domain: 1 for daytime, 0 for nighttime.
    pub mix: f64,
    pub features: FeatureMap,
    pub raws: Vec<RawPredictionTensor>,
    pub ground_truth: Vec<GroundTruth>,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub anchors: AnchorConfig,
    pub expert_ids: Vec<String>,
    pub images: Vec<SynthImage>,
}

impl SynthDataset {
    pub fn train_samples(&self) -> Vec<TrainSample> {
        self.images
            .iter()
            .map(|im| TrainSample {
                features: im.features.clone(),
                raws: im.raws.clone(),
                ground_truth: im.ground_truth.clone(),
                domain_label: im.domain_label,
            })
            .collect()
    }

    pub fn subsets(&self) -> BTreeMap<String, Subset> {
        self.images.iter().map(|im| (im.image_id.clone(), im.subset)).collect()
    }

    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.images.iter().flat_map(|im| im.ground_truth.iter().cloned()).collect()
    }
}

fn gaussian(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    if sd == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sd).expect("finite sd").sample(rng)
}

/// Logit encoding of a box at `slot`, with the sigmoid arguments clamped into
/// the representable range.
fn encode_clamped(b: &BBox, slot: Slot, cfg: &AnchorConfig) -> [f64; 4] {
    let level = &cfg.levels[slot.level];
    let stride = level.stride as f64;
    let anchor = level.anchors[slot.anchor];
    let (cx, cy) = b.center();
    let p = [
        (cx / stride - slot.cx as f64 + 0.5) / 2.0,
        (cy / stride - slot.cy as f64 + 0.5) / 2.0,
        (b.width() / anchor[0]).sqrt() / 2.0,
        (b.height() / anchor[1]).sqrt() / 2.0,
    ];
    p.map(|v| logit(v.clamp(1e-4, 1.0 - 1e-4)))
}

fn sample_objects(rng: &mut ChaCha8Rng, cfg: &AnchorConfig, spec: &SynthSpec, image_id: &str) -> Vec<(GroundTruth, Slot)> {
    let count = rng.random_range(1..=spec.max_objects);
    let (img_w, img_h) = (cfg.image_width(), cfg.image_height());
    let mut out: Vec<(GroundTruth, Slot)> = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count && attempts < 200 {
        attempts += 1;
        let level = &cfg.levels[rng.random_range(0..cfg.levels.len())];
        let anchor = level.anchors[rng.random_range(0..level.anchors.len())];
        let w = anchor[0] * rng.random_range(0.7..1.4);
        let h = anchor[1] * rng.random_range(0.7..1.4);
        if w >= img_w || h >= img_h {
            continue;
        }
        let cx = rng.random_range(w / 2.0..img_w - w / 2.0);
        let cy = rng.random_range(h / 2.0..img_h - h / 2.0);
        let Ok(bbox) = BBox::from_center(cx, cy, w, h) else { continue };
        if !bbox.within(img_w, img_h) {
            continue;
        }
        let slot = assign_slot(&bbox, cfg);
        if crate::decode::encode_box(&bbox, slot, cfg).is_none() {
            continue;
        }
        if out.iter().any(|(g, s)| *s == slot || iou(&g.bbox, &bbox) >= 0.3) {
            continue;
        }
        let class_id = rng.random_range(0..cfg.class_count);
        out.push((GroundTruth::new(image_id, class_id, bbox), slot));
    }
    out
}

fn background(rng: &mut ChaCha8Rng, cfg: &AnchorConfig, image_id: &str, expert_id: &str) -> RawPredictionTensor {
    let mut t = RawPredictionTensor::zeros(cfg, image_id, expert_id);
    let ch = cfg.channels();
    for level in &mut t.levels {
        for cell in level.data.chunks_mut(ch) {
            for v in &mut cell[..4] {
                *v = gaussian(rng, 0.5) as f32;
            }
            cell[4] = (-8.0 + gaussian(rng, 0.5)) as f32;
            for c in &mut cell[5..] {
                *c = (-4.0 + gaussian(rng, 1.0)) as f32;
            }
        }
    }
    t
}

fn write_slot(t: &mut RawPredictionTensor, slot: Slot, boxl: [f64; 4], obj: f64, class: usize, cls_logit: f64) {
    let cell = t.levels[slot.level].cell_mut(slot.anchor, slot.cy, slot.cx);
    for q in 0..4 {
        cell[q] = boxl[q] as f32;
    }
    cell[4] = obj as f32;
    cell[5 + class] = cls_logit as f32;
}

fn all_slots(cfg: &AnchorConfig) -> Vec<Slot> {
    let mut v = Vec::with_capacity(cfg.slot_count());
    for (level, l) in cfg.levels.iter().enumerate() {
        let (h, w) = cfg.grid(level);
        for anchor in 0..l.anchors.len() {
            for cy in 0..h {
                for cx in 0..w {
                    v.push(Slot { level, anchor, cy, cx });
                }
            }
        }
    }
    v
}

#[allow(clippy::too_many_arguments)]
fn expert_tensor(
    rng: &mut ChaCha8Rng,
    cfg: &AnchorConfig,
    spec: &SynthSpec,
    image_id: &str,
    expert: usize,
    mix: f64,
    objects: &[(GroundTruth, Slot)],
    slots: &[Slot],
) -> RawPredictionTensor {
    let mut t = background(rng, cfg, image_id, EXPERT_IDS[expert]);
    // probability that this expert behaves as on its own domain
    let own = if expert == 0 { mix } else { 1.0 - mix };
    let pick = |rng: &mut ChaCha8Rng| -> &ExpertQuality {
        let home = rng.random::<f64>() < own;
        let domain = if home { expert } else { 1 - expert };
        &spec.quality[expert][domain]
    };
    for (g, slot) in objects {
        let q = pick(rng);
        if rng.random::<f64>() < q.miss_prob {
            continue;
        }
        let (cx, cy) = g.bbox.center();
        let (w, h) = (g.bbox.width(), g.bbox.height());
        let jittered = BBox::from_center(
            cx + gaussian(rng, q.loc_noise * w),
            cy + gaussian(rng, q.loc_noise * h),
            w * gaussian(rng, q.loc_noise).exp(),
            h * gaussian(rng, q.loc_noise).exp(),
        )
        .expect("positive jittered size");
        let class = if cfg.class_count > 1 && rng.random::<f64>() < q.flip_prob {
            (g.class_id + rng.random_range(1..cfg.class_count)) % cfg.class_count
        } else {
            g.class_id
        };
        let obj = q.obj_logit + gaussian(rng, q.conf_noise);
        let cls = q.cls_logit + gaussian(rng, q.conf_noise);
        write_slot(&mut t, *slot, encode_clamped(&jittered, *slot, cfg), obj, class, cls);
    }
    let q = pick(rng);
    if q.fp_rate > 0.0 {
        let n = Poisson::new(q.fp_rate).expect("positive rate").sample(rng) as usize;
        for _ in 0..n {
            let slot = slots[rng.random_range(0..slots.len())];
            if objects.iter().any(|(_, s)| *s == slot) {
                continue;
            }
            let boxl = [gaussian(rng, 1.0), gaussian(rng, 1.0), gaussian(rng, 0.5), gaussian(rng, 0.5)];
            let obj = q.fp_logit + gaussian(rng, q.conf_noise);
            let class = rng.random_range(0..cfg.class_count);
            write_slot(&mut t, slot, boxl, obj, class, q.cls_logit + gaussian(rng, q.conf_noise));
        }
    }
    t
}

fn features(rng: &mut ChaCha8Rng, spec: &SynthSpec, image_id: &str, mix: f64) -> FeatureMap {
    let channels = 2 * spec.feature_channels_per_expert;
    let cells = spec.feature_size * spec.feature_size;
    let sign = 2.0 * mix - 1.0;
    let mut data = Vec::with_capacity(channels * cells);
    for c in 0..channels {
        let pattern = if c % 2 == 0 { 1.0 } else { -1.0 };
        for _ in 0..cells {
            data.push((sign * spec.feature_margin * pattern + gaussian(rng, spec.feature_noise)) as f32);
        }
    }
    FeatureMap {
        image_id: image_id.to_string(),
        channels,
        height: spec.feature_size,
        width: spec.feature_size,
        data,
        provenance: "synthetic".into(),
        expert_ids: EXPERT_IDS.iter().map(|s| s.to_string()).collect(),
    }
}

/// Generates a dataset in memory. Output depends only on `spec`.
pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let cfg = spec.anchors();
    cfg.validate()?;
    let slots = all_slots(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut images = Vec::new();
    let plan = [
        ("day", Subset::Daytime, spec.images_per_domain),
        ("night", Subset::Nighttime, spec.images_per_domain),
        ("undef", Subset::Undefined, spec.ambiguous_images),
    ];
    for (prefix, subset, n) in plan {
        for i in 0..n {
            let image_id = format!("{prefix}_{i:05}");
            let (mix, label) = match subset {
                Subset::Daytime => (1.0, Some(0)),
                Subset::Nighttime => (0.0, Some(1)),
                _ => (rng.random::<f64>(), None),
            };
            let objects = sample_objects(&mut rng, &cfg, spec, &image_id);
            let raws = (0..2)
                .map(|e| expert_tensor(&mut rng, &cfg, spec, &image_id, e, mix, &objects, &slots))
                .collect();
            let features = features(&mut rng, spec, &image_id, mix);
            images.push(SynthImage {
                image_id,
                subset,
                domain_label: label,
                mix,
                features,
                raws,
                ground_truth: objects.into_iter().map(|(g, _)| g).collect(),
            });
        }
    }
    Ok(SynthDataset {
        spec: spec.clone(),
        anchors: cfg,
        expert_ids: EXPERT_IDS.iter().map(|s| s.to_string()).collect(),
        images,
    })
}

/// Writes a dataset directory:
///
/// ```text
/// anchors.json  manifest.json  pipeline.json  synth.json
/// ground_truth.jsonl  subsets.jsonl
/// features/<image>.moef  raw/<expert>/<image>.moef
/// ```
pub fn write_dataset(ds: &SynthDataset, dir: &Path) -> Result<()> {
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(&dir.join("features"))?;
    for e in &ds.expert_ids {
        mkdir(&dir.join("raw").join(e))?;
    }
    let file = |id: &str| format!("{id}.{EXTENSION}");
    let mut samples = Vec::with_capacity(ds.images.len());
    for im in &ds.images {
        let feature_file = PathBuf::from("features").join(file(&im.image_id));
        write_features(&dir.join(&feature_file), &im.features)?;
        let mut raw_files = Vec::new();
        for (e, raw) in ds.expert_ids.iter().zip(&im.raws) {
            let rel = PathBuf::from("raw").join(e).join(file(&im.image_id));
            write_raw(&dir.join(&rel), raw)?;
            raw_files.push(rel);
        }
        samples.push(ManifestSample {
            image_id: im.image_id.clone(),
            feature_file,
            raw_files,
            ground_truth_file: Some("ground_truth.jsonl".into()),
            domain_label: im.domain_label,
        });
    }
    write_json(&dir.join("anchors.json"), &ds.anchors)?;
    write_json(&dir.join("synth.json"), &ds.spec)?;
    write_ground_truth(&dir.join("ground_truth.jsonl"), &ds.ground_truth())?;
    write_subsets(&dir.join("subsets.jsonl"), &ds.subsets())?;
    write_manifest(
        &dir.join("manifest.json"),
        &Manifest::new(ds.expert_ids.clone(), "anchors.json".into(), samples),
    )?;
    let mut pipeline = PipelineConfig::new(
        "anchors.json".into(),
        ds.expert_ids
            .iter()
            .map(|e| ExpertSource {
                id: e.clone(),
                raw_dir: PathBuf::from("raw").join(e),
            })
            .collect(),
    );
    pipeline.feature_dir = Some("features".into());
    pipeline.fixed_weights = Some(vec![0.5; ds.expert_ids.len()]);
    write_pipeline(&dir.join("pipeline.json"), &pipeline)
}
