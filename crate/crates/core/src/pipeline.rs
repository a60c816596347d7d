//! End-to-end mixture: weighting, per-expert decode, fusion.
//!
//! Images are independent, so batches run on a rayon pool. Results always come
//! back in input order, which makes output identical at any thread count.

use std::path::PathBuf;

use rayon::prelude::*;

use crate::decode::{decode_all, AnchorConfig, RawPredictionTensor};
use crate::error::{Error, Result};
use crate::fusion::{fuse_image, map_reweight, FusionConfig};
use crate::gate::{apply_expert_weights, fixed_weight_output, gate_forward, FeatureMap, GateOutput, GateParams};
use crate::geometry::Detection;
use crate::io::manifest::{list_tensor_files, PipelineConfig};
use crate::io::tensor_file::{read_features, read_raw, EXTENSION};
use crate::io::gate_file::read_gate;

/// Source of the per-image expert weights.
#[derive(Debug, Clone)]
pub enum Weighting {
    Gate(GateParams),
    Fixed(Vec<f64>),
}

impl Weighting {
    pub fn weights(&self, features: Option<&FeatureMap>, expert_count: usize) -> Result<GateOutput> {
        match self {
            Weighting::Fixed(w) => fixed_weight_output(w, expert_count),
            Weighting::Gate(p) => {
                let f = features.ok_or_else(|| Error::config("a trained gate needs feature maps"))?;
                if p.expert_count() != expert_count {
                    return Err(Error::config(format!(
                        "gate routes {} experts, pipeline has {expert_count}",
                        p.expert_count()
                    )));
                }
                gate_forward(p, f, false)
            }
        }
    }
}

/// Weights, decodes and fuses one image.
///
/// Experts whose weight is zero everywhere are skipped before decoding, so a
/// one-hot weighting reproduces that expert's own decode followed by fusion.
pub fn moe_image(
    raws: &[RawPredictionTensor],
    weights: &GateOutput,
    anchors: &AnchorConfig,
    fusion: &FusionConfig,
    conf_threshold: f64,
) -> Result<Vec<Detection>> {
    let weighted = apply_expert_weights(raws, weights, anchors)?;
    let mut all = Vec::new();
    let mut active = 0;
    for (i, w) in weighted.iter().enumerate() {
        if weights.is_silent(i) {
            continue;
        }
        active += 1;
        let dets = decode_all(w, anchors, conf_threshold)?;
        match &fusion.model_map_weights {
            Some(m) => all.extend(map_reweight(&dets, m)?),
            None => all.extend(dets),
        }
    }
    fuse_image(&all, fusion, active.max(1))
}

/// Everything needed to process one image.
#[derive(Debug, Clone)]
pub struct ImageInput {
    pub image_id: String,
    pub raws: Vec<RawPredictionTensor>,
    pub features: Option<FeatureMap>,
}

#[derive(Debug, Clone)]
pub struct ImageResult {
    pub image_id: String,
    pub weights: GateOutput,
    pub detections: Vec<Detection>,
}

pub(crate) fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::config("thread count must be at least 1"));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::config(format!("cannot start thread pool: {e}")))
}

/// Runs `f` over `items` on `threads` workers, keeping input order.
pub fn par_map<T, R, F>(items: &[T], threads: Option<usize>, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    if threads == Some(1) {
        return items.iter().map(f).collect();
    }
    thread_pool(threads)?.install(|| items.par_iter().map(f).collect())
}

/// Runs the mixture over in-memory inputs.
pub fn run_moe(
    images: &[ImageInput],
    weighting: &Weighting,
    anchors: &AnchorConfig,
    fusion: &FusionConfig,
    conf_threshold: f64,
    threads: Option<usize>,
) -> Result<Vec<ImageResult>> {
    fusion.validate()?;
    par_map(images, threads, |im| {
        let weights = weighting.weights(im.features.as_ref(), im.raws.len())?;
        let detections = moe_image(&im.raws, &weights, anchors, fusion, conf_threshold)?;
        Ok(ImageResult {
            image_id: im.image_id.clone(),
            weights,
            detections,
        })
    })
}

/// File locations of one image under a pipeline config.
#[derive(Debug, Clone)]
pub struct ImageFiles {
    pub image_id: String,
    pub raw_files: Vec<PathBuf>,
    pub feature_file: Option<PathBuf>,
}

/// Lists the images present for every expert. The first expert's directory
/// defines the image set; any other expert missing an image is an input error.
pub fn pipeline_images(cfg: &PipelineConfig, need_features: bool) -> Result<Vec<ImageFiles>> {
    let first = cfg
        .experts
        .first()
        .ok_or_else(|| Error::config("pipeline config lists no experts"))?;
    let ids = list_tensor_files(&first.raw_dir)?;
    let mut out = Vec::with_capacity(ids.len());
    for (id, _) in ids {
        let file = format!("{id}.{EXTENSION}");
        let mut raw_files = Vec::with_capacity(cfg.experts.len());
        for e in &cfg.experts {
            let p = e.raw_dir.join(&file);
            if !p.is_file() {
                return Err(Error::input(format!("expert {} has no tensor for image {id}", e.id)));
            }
            raw_files.push(p);
        }
        let feature_file = match (&cfg.feature_dir, need_features) {
            (Some(d), true) => Some(d.join(&file)),
            (None, true) => return Err(Error::config("a trained gate needs feature_dir in the pipeline config")),
            _ => None,
        };
        out.push(ImageFiles {
            image_id: id,
            raw_files,
            feature_file,
        });
    }
    Ok(out)
}

pub fn load_image(files: &ImageFiles, expert_ids: &[String], anchors: &AnchorConfig) -> Result<ImageInput> {
    let mut raws = Vec::with_capacity(files.raw_files.len());
    for (p, id) in files.raw_files.iter().zip(expert_ids) {
        let r = read_raw(p)?;
        if &r.expert_id != id || r.image_id != files.image_id {
            return Err(Error::input(format!(
                "{}: holds ({}, {}), expected ({}, {id})",
                p.display(),
                r.image_id,
                r.expert_id,
                files.image_id
            )));
        }
        r.validate(anchors)?;
        raws.push(r);
    }
    let features = match &files.feature_file {
        Some(p) => {
            let f = read_features(p)?;
            if f.expert_ids != expert_ids {
                return Err(Error::config(format!(
                    "{}: features list experts {:?}, pipeline lists {:?}",
                    p.display(),
                    f.expert_ids,
                    expert_ids
                )));
            }
            Some(f)
        }
        None => None,
    };
    Ok(ImageInput {
        image_id: files.image_id.clone(),
        raws,
        features,
    })
}

/// Resolves the weighting of a pipeline config: the gate file if given,
/// otherwise the fixed weights.
pub fn pipeline_weighting(cfg: &PipelineConfig) -> Result<Weighting> {
    match (&cfg.gate, &cfg.fixed_weights) {
        (Some(g), _) => {
            let p = read_gate(g)?;
            if p.spec.expert_ids != cfg.expert_ids() {
                return Err(Error::config(format!(
                    "gate experts {:?} differ from pipeline experts {:?}",
                    p.spec.expert_ids,
                    cfg.expert_ids()
                )));
            }
            Ok(Weighting::Gate(p))
        }
        (None, Some(w)) => Ok(Weighting::Fixed(w.clone())),
        (None, None) => Err(Error::config("pipeline config needs a gate or fixed_weights")),
    }
}

/// Runs a pipeline config end to end, reading each image inside its worker.
pub fn run_pipeline(cfg: &PipelineConfig, anchors: &AnchorConfig, threads: Option<usize>) -> Result<Vec<ImageResult>> {
    cfg.fusion.validate()?;
    let weighting = pipeline_weighting(cfg)?;
    let files = pipeline_images(cfg, matches!(weighting, Weighting::Gate(_)))?;
    let ids = cfg.expert_ids();
    par_map(&files, threads, |f| {
        let im = load_image(f, &ids, anchors)?;
        let weights = weighting.weights(im.features.as_ref(), im.raws.len())?;
        let detections = moe_image(&im.raws, &weights, anchors, &cfg.fusion, cfg.conf_threshold)?;
        Ok(ImageResult {
            image_id: im.image_id,
            weights,
            detections,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{nms, FusionMethod};
    use crate::io::synth::{synth_dataset, SynthSpec};

    fn inputs() -> (Vec<ImageInput>, AnchorConfig) {
        let d = synth_dataset(&SynthSpec {
            images_per_domain: 4,
            seed: 9,
            ..SynthSpec::default()
        })
        .unwrap();
        let ims = d
            .images
            .iter()
            .map(|im| ImageInput {
                image_id: im.image_id.clone(),
                raws: im.raws.clone(),
                features: Some(im.features.clone()),
            })
            .collect();
        (ims, d.anchors)
    }

    #[test]
    fn one_hot_matches_single_expert() {
        let (ims, anchors) = inputs();
        let fusion = FusionConfig::with_method(FusionMethod::Nms);
        let out = run_moe(&ims, &Weighting::Fixed(vec![1.0, 0.0]), &anchors, &fusion, 0.001, Some(1)).unwrap();
        for (im, r) in ims.iter().zip(&out) {
            let alone = nms(&decode_all(&im.raws[0], &anchors, 0.001).unwrap(), 0.6);
            assert_eq!(r.detections, alone);
        }
    }

    #[test]
    fn thread_count_does_not_change_output() {
        let (ims, anchors) = inputs();
        let w = Weighting::Fixed(vec![0.5, 0.5]);
        let f = FusionConfig::default();
        let a = run_moe(&ims, &w, &anchors, &f, 0.001, Some(1)).unwrap();
        let b = run_moe(&ims, &w, &anchors, &f, 0.001, Some(4)).unwrap();
        let flat = |v: &[ImageResult]| v.iter().flat_map(|r| r.detections.clone()).collect::<Vec<_>>();
        assert_eq!(flat(&a), flat(&b));
    }

    #[test]
    fn gate_without_features_is_config_error() {
        let (mut ims, anchors) = inputs();
        ims[0].features = None;
        let spec = crate::gate::GateSpec::new(
            crate::gate::Architecture::Fc1,
            crate::gate::GateMode::Single,
            vec!["daytime".into(), "nighttime".into()],
            4,
        );
        let g = Weighting::Gate(GateParams::zeros(spec).unwrap());
        let e = run_moe(&ims[..1], &g, &anchors, &FusionConfig::default(), 0.001, Some(1)).unwrap_err();
        assert_eq!(e.exit_code(), 3);
    }
}
