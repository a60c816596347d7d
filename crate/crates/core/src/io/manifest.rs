//! Anchor configs, training manifests, and pipeline configs.
//!
//! Relative paths inside a manifest or pipeline config resolve against the
//! directory containing that file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::jsonl::read_ground_truth;
use super::tensor_file::{read_features, read_raw, EXTENSION};
use crate::decode::AnchorConfig;
use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::fusion::FusionConfig;
use crate::training::TrainSample;

pub const MANIFEST_FORMAT: &str = "moe-manifest";
pub const PIPELINE_FORMAT: &str = "moe-pipeline";
pub const VERSION: u32 = 1;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path.display(), format!("invalid {what}: {e}")))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Reads and validates an anchor config. Problems are format errors so that a
/// bad anchors file maps to the input-error exit code.
pub fn read_anchors(path: &Path) -> Result<AnchorConfig> {
    let cfg: AnchorConfig = read_json(path, "anchor config")?;
    cfg.validate().map_err(|e| Error::format(path.display(), e.to_string()))?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub image_id: String,
    pub feature_file: PathBuf,
    /// One raw tensor file per expert, in `expert_ids` order.
    pub raw_files: Vec<PathBuf>,
    /// JSON Lines ground truth; may be shared by several samples (filtered by image id).
    pub ground_truth_file: Option<PathBuf>,
    pub domain_label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub expert_ids: Vec<String>,
    pub anchors: PathBuf,
    pub samples: Vec<ManifestSample>,
}

impl Manifest {
    pub fn new(expert_ids: Vec<String>, anchors: PathBuf, samples: Vec<ManifestSample>) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            version: VERSION,
            expert_ids,
            anchors,
            samples,
        }
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let m: Manifest = read_json(path, "manifest")?;
    if m.format != MANIFEST_FORMAT || m.version != VERSION {
        return Err(Error::format(
            path.display(),
            format!("unsupported manifest {:?} version {}", m.format, m.version),
        ));
    }
    Ok(m)
}

pub fn write_manifest(path: &Path, m: &Manifest) -> Result<()> {
    write_json(path, m)
}

/// Loads every sample of a manifest, with its anchor config.
pub fn load_training_set(path: &Path) -> Result<(Manifest, AnchorConfig, Vec<TrainSample>)> {
    let m = read_manifest(path)?;
    let anchors = read_anchors(&resolve(path, &m.anchors))?;
    let mut gt_cache: BTreeMap<PathBuf, BTreeMap<String, Vec<GroundTruth>>> = BTreeMap::new();
    let mut samples = Vec::with_capacity(m.samples.len());
    for s in &m.samples {
        let features = read_features(&resolve(path, &s.feature_file))?;
        if features.expert_ids != m.expert_ids {
            return Err(Error::input(format!(
                "features of {} list experts {:?}, manifest lists {:?}",
                s.image_id, features.expert_ids, m.expert_ids
            )));
        }
        if !s.raw_files.is_empty() && s.raw_files.len() != m.expert_ids.len() {
            return Err(Error::input(format!(
                "sample {} has {} raw files for {} experts",
                s.image_id,
                s.raw_files.len(),
                m.expert_ids.len()
            )));
        }
        let mut raws = Vec::with_capacity(s.raw_files.len());
        for (f, expert) in s.raw_files.iter().zip(&m.expert_ids) {
            let r = read_raw(&resolve(path, f))?;
            if &r.expert_id != expert {
                return Err(Error::input(format!(
                    "raw file {} belongs to expert {:?}, expected {:?}",
                    f.display(),
                    r.expert_id,
                    expert
                )));
            }
            r.validate(&anchors)?;
            raws.push(r);
        }
        let ground_truth = match &s.ground_truth_file {
            Some(f) => {
                let full = resolve(path, f);
                if !gt_cache.contains_key(&full) {
                    let mut by_image: BTreeMap<String, Vec<GroundTruth>> = BTreeMap::new();
                    for g in read_ground_truth(&full)? {
                        by_image.entry(g.image_id.clone()).or_default().push(g);
                    }
                    gt_cache.insert(full.clone(), by_image);
                }
                gt_cache[&full].get(&s.image_id).cloned().unwrap_or_default()
            }
            None => Vec::new(),
        };
        if let Some(l) = s.domain_label {
            if l >= m.expert_ids.len() {
                return Err(Error::input(format!("sample {}: domain label {l} out of range", s.image_id)));
            }
        }
        samples.push(TrainSample {
            features,
            raws,
            ground_truth,
            domain_label: s.domain_label,
        });
    }
    Ok((m, anchors, samples))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSource {
    pub id: String,
    /// Directory of `<image_id>.moef` raw tensor files.
    pub raw_dir: PathBuf,
}

/// Everything `moe` needs to run the full pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub format: String,
    pub version: u32,
    pub anchors: PathBuf,
    pub experts: Vec<ExpertSource>,
    /// Directory of `<image_id>.moef` feature files; needed with a trained gate.
    #[serde(default)]
    pub feature_dir: Option<PathBuf>,
    #[serde(default)]
    pub gate: Option<PathBuf>,
    #[serde(default)]
    pub fixed_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default = "default_conf")]
    pub conf_threshold: f64,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_conf() -> f64 {
    crate::eval::DEFAULT_CONF_THRESHOLD
}

impl PipelineConfig {
    pub fn new(anchors: PathBuf, experts: Vec<ExpertSource>) -> Self {
        Self {
            format: PIPELINE_FORMAT.into(),
            version: VERSION,
            anchors,
            experts,
            feature_dir: None,
            gate: None,
            fixed_weights: None,
            fusion: FusionConfig::default(),
            conf_threshold: default_conf(),
            output: None,
        }
    }

    pub fn expert_ids(&self) -> Vec<String> {
        self.experts.iter().map(|e| e.id.clone()).collect()
    }

    /// Returns a copy with every relative path resolved against `config_path`.
    pub fn resolved(&self, config_path: &Path) -> Self {
        let mut c = self.clone();
        c.anchors = resolve(config_path, &c.anchors);
        for e in &mut c.experts {
            e.raw_dir = resolve(config_path, &e.raw_dir);
        }
        c.feature_dir = c.feature_dir.map(|p| resolve(config_path, &p));
        c.gate = c.gate.map(|p| resolve(config_path, &p));
        c.output = c.output.map(|p| resolve(config_path, &p));
        c
    }
}

pub fn read_pipeline(path: &Path) -> Result<PipelineConfig> {
    let c: PipelineConfig = read_json(path, "pipeline config")?;
    if c.format != PIPELINE_FORMAT || c.version != VERSION {
        return Err(Error::format(
            path.display(),
            format!("unsupported pipeline config {:?} version {}", c.format, c.version),
        ));
    }
    if c.experts.is_empty() {
        return Err(Error::config("pipeline config lists no experts"));
    }
    Ok(c.resolved(path))
}

pub fn write_pipeline(path: &Path, c: &PipelineConfig) -> Result<()> {
    write_json(path, c)
}

/// Sorted image ids of the `.moef` files in a directory.
pub fn list_tensor_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().and_then(|e| e.to_str()) == Some(EXTENSION) {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), p.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}
