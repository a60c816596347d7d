//! Batch loss and its analytic gradient with respect to gate parameters.
//!
//! The chain runs loss -> gate weight rows -> softmax -> head -> trunk. For the
//! detection loss the step from weighted tensor to weight is
//! `dL/dw_i = sum(dL/dy~_i * y_i)` over the elements each weight scales; the
//! expert tensors are constants.

use crate::decode::{AnchorConfig, RawPredictionTensor, BOX_CHANNELS};
use crate::error::{Error, Result};
use crate::gate::{bilinear_resample, bilinear_taps, FeatureMap, ForwardTrace, GateOutput, GateParams, RowGrads};

use super::balance::{add_balancing_grad, add_domain_ce_grad, balancing_loss, domain_ce_loss, importance};
use super::detection_loss::{expert_loss, targets};
use super::{LossMode, TrainConfig, TrainSample};

/// Loss values of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub task: f64,
    pub balancing: f64,
    pub total: f64,
    pub importance: Vec<f64>,
}

/// Per-element weight lookup for one expert on one level.
enum LevelWeights {
    Const(f64),
    Grid(Vec<f64>),
    Class(f64, Vec<f64>),
}

impl LevelWeights {
    fn new(out: &GateOutput, expert: usize, h: usize, w: usize) -> Self {
        match out {
            GateOutput::Single { weights } => LevelWeights::Const(weights[expert]),
            GateOutput::Spatial { grid } => {
                let g = bilinear_resample(grid, h, w);
                LevelWeights::Grid(g.rows().map(|r| r[expert]).collect())
            }
            GateOutput::Classwise { shared, per_class } => {
                LevelWeights::Class(shared[expert], per_class.iter().map(|r| r[expert]).collect())
            }
        }
    }

    #[inline]
    fn at(&self, cell: usize, channel: usize) -> f64 {
        match self {
            LevelWeights::Const(w) => *w,
            LevelWeights::Grid(g) => g[cell],
            LevelWeights::Class(s, k) => {
                if channel < BOX_CHANNELS {
                    *s
                } else {
                    k[channel - BOX_CHANNELS]
                }
            }
        }
    }
}

/// `w * y` for every level of one expert, in f64 (no f32 rounding).
fn weighted_levels(raw: &RawPredictionTensor, out: &GateOutput, expert: usize) -> Vec<Vec<f64>> {
    raw.levels
        .iter()
        .map(|t| {
            let lw = LevelWeights::new(out, expert, t.height, t.width);
            let cells = t.height * t.width;
            t.data
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let ch = i % t.channels;
                    let cell = (i / t.channels) % cells;
                    lw.at(cell, ch) * v as f64
                })
                .collect()
        })
        .collect()
}

/// Adds `sum dL/dy~ * y` into the weight-row gradients of expert `expert`.
fn contract(raw: &RawPredictionTensor, out: &GateOutput, expert: usize, dy: &[Vec<f64>], rows: &mut RowGrads) {
    for (t, d) in raw.levels.iter().zip(dy) {
        let cells = t.height * t.width;
        match out {
            GateOutput::Single { .. } => {
                rows[0][expert] += t.data.iter().zip(d).map(|(&y, g)| y as f64 * g).sum::<f64>();
            }
            GateOutput::Classwise { .. } => {
                for (i, (&y, g)) in t.data.iter().zip(d).enumerate() {
                    let ch = i % t.channels;
                    let row = if ch < BOX_CHANNELS { 0 } else { 1 + ch - BOX_CHANNELS };
                    rows[row][expert] += y as f64 * g;
                }
            }
            GateOutput::Spatial { grid } => {
                let mut per_cell = vec![0.0; cells];
                for (i, (&y, g)) in t.data.iter().zip(d).enumerate() {
                    per_cell[(i / t.channels) % cells] += y as f64 * g;
                }
                let taps = bilinear_taps(grid.height, grid.width, t.height, t.width);
                for (cell, tap) in taps.iter().enumerate() {
                    for &(src, tw) in tap {
                        rows[src][expert] += tw * per_cell[cell];
                    }
                }
            }
        }
    }
}

fn zero_row_grads(out: &GateOutput) -> RowGrads {
    out.rows().iter().map(|r| vec![0.0; r.len()]).collect()
}

/// Loss (and optionally per-row gradients) for a batch of gate outputs.
fn losses(
    outputs: &[GateOutput],
    batch: &[&TrainSample],
    cfg: &TrainConfig,
    anchors: Option<&AnchorConfig>,
    mut grads: Option<&mut Vec<RowGrads>>,
) -> Result<BatchLoss> {
    let b = batch.len() as f64;
    let task = match cfg.loss_mode {
        LossMode::DomainCe => {
            let (idx, labels): (Vec<usize>, Vec<usize>) = batch
                .iter()
                .enumerate()
                .filter_map(|(i, s)| s.domain_label.map(|l| (i, l)))
                .unzip();
            if idx.is_empty() {
                0.0
            } else {
                let outs: Vec<GateOutput> = idx.iter().map(|&i| outputs[i].clone()).collect();
                let v = domain_ce_loss(&outs, &labels)?;
                if let Some(g) = grads.as_deref_mut() {
                    let mut sub: Vec<RowGrads> = outs.iter().map(zero_row_grads).collect();
                    add_domain_ce_grad(&outs, &labels, 1.0, &mut sub);
                    for (&i, s) in idx.iter().zip(sub) {
                        for (row, srow) in g[i].iter_mut().zip(s) {
                            row.iter_mut().zip(srow).for_each(|(a, b)| *a += b);
                        }
                    }
                }
                v
            }
        }
        LossMode::Detection => {
            let acfg = anchors.ok_or_else(|| Error::config("detection loss requires an anchor config"))?;
            let mut total = 0.0;
            for (i, (s, out)) in batch.iter().zip(outputs).enumerate() {
                if s.raws.len() != out.expert_count() {
                    return Err(Error::input(format!(
                        "sample {} has {} expert tensors, gate has {} experts",
                        s.features.image_id,
                        s.raws.len(),
                        out.expert_count()
                    )));
                }
                let tg = targets(&s.ground_truth, acfg)?;
                let n = s.raws.len() as f64;
                for (e, raw) in s.raws.iter().enumerate() {
                    raw.validate(acfg)?;
                    let levels = weighted_levels(raw, out, e);
                    match grads.as_deref_mut() {
                        Some(g) => {
                            let mut dy: Vec<Vec<f64>> = levels.iter().map(|l| vec![0.0; l.len()]).collect();
                            total += expert_loss(&levels, &tg, acfg, Some((&mut dy, 1.0 / (n * b)))) / n;
                            contract(raw, out, e, &dy, &mut g[i]);
                        }
                        None => total += expert_loss(&levels, &tg, acfg, None) / n,
                    }
                }
            }
            total / b
        }
    };
    let balancing = balancing_loss(cfg.balancing, outputs)?;
    if let Some(g) = grads {
        add_balancing_grad(cfg.balancing, outputs, cfg.lambda, g)?;
    }
    Ok(BatchLoss {
        task,
        balancing,
        total: task + cfg.lambda * balancing,
        importance: importance(outputs)?,
    })
}

fn features<'a>(batch: &[&'a TrainSample]) -> Vec<&'a FeatureMap> {
    batch.iter().map(|s| &s.features).collect()
}

/// Training-mode loss of one batch.
pub fn batch_loss(
    params: &GateParams,
    batch: &[&TrainSample],
    cfg: &TrainConfig,
    anchors: Option<&AnchorConfig>,
) -> Result<BatchLoss> {
    let (outputs, _) = params.forward(&features(batch), true)?;
    losses(&outputs, batch, cfg, anchors, None)
}

/// Training-mode loss of one batch and its exact gradient with respect to
/// `params.values`. The returned trace feeds the running-statistics update.
pub fn gate_gradient(
    params: &GateParams,
    batch: &[&TrainSample],
    cfg: &TrainConfig,
    anchors: Option<&AnchorConfig>,
) -> Result<(BatchLoss, Vec<f64>, ForwardTrace)> {
    let (outputs, trace) = params.forward(&features(batch), true)?;
    let mut rows: Vec<RowGrads> = outputs.iter().map(zero_row_grads).collect();
    let loss = losses(&outputs, batch, cfg, anchors, Some(&mut rows))?;
    let grad = params.backward(&trace, &rows)?;
    Ok((loss, grad, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::{Architecture, GateMode, GateSpec};
    use crate::training::balance::Balancing;

    fn sample(label: usize) -> TrainSample {
        TrainSample {
            features: FeatureMap {
                image_id: "x".into(),
                channels: 2,
                height: 1,
                width: 1,
                data: vec![0.3, -0.2],
                provenance: "t".into(),
                expert_ids: vec!["a".into(), "b".into()],
            },
            raws: Vec::new(),
            ground_truth: Vec::new(),
            domain_label: Some(label),
        }
    }

    #[test]
    fn domain_ce_logit_gradient_at_uniform() {
        // zero fc1 weights give uniform output; the bias gradient equals dL/dlogits
        let spec = GateSpec::new(Architecture::Fc1, GateMode::Single, vec!["a".into(), "b".into()], 2);
        let params = GateParams::zeros(spec).unwrap();
        let cfg = TrainConfig {
            loss_mode: LossMode::DomainCe,
            balancing: Balancing::None,
            ..TrainConfig::default()
        };
        let s = sample(0);
        let (loss, grad, _) = gate_gradient(&params, &[&s], &cfg, None).unwrap();
        assert!((loss.task - 2f64.ln()).abs() < 1e-10);
        let bias = &grad[grad.len() - 2..];
        assert!((bias[0] + 0.5).abs() < 1e-9 && (bias[1] - 0.5).abs() < 1e-9, "{bias:?}");
    }

    #[test]
    fn zero_lambda_drops_balancing_gradient() {
        let spec = GateSpec {
            hidden: 4,
            ..GateSpec::new(Architecture::Fc2, GateMode::Single, vec!["a".into(), "b".into()], 2)
        };
        let params = GateParams::init(spec, 4).unwrap();
        let s = [sample(0), sample(1)];
        let batch: Vec<&TrainSample> = s.iter().collect();
        let base = TrainConfig {
            balancing: Balancing::None,
            ..TrainConfig::default()
        };
        let zero = TrainConfig {
            balancing: Balancing::Importance,
            lambda: 0.0,
            ..TrainConfig::default()
        };
        let (_, a, _) = gate_gradient(&params, &batch, &base, None).unwrap();
        let (_, b, _) = gate_gradient(&params, &batch, &zero, None).unwrap();
        assert_eq!(a, b);
    }
}
