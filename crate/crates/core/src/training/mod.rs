//! Gate training with frozen experts.
//!
//! Only gate parameters change. Expert tensors are borrowed immutably
//! throughout, so they cannot drift during training.

pub mod balance;
mod detection_loss;
mod gradient;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use balance::{
    balancing_loss, batch_entropy_loss, domain_ce_loss, importance, importance_loss, kl_uniform_loss,
    samplewise_entropy_loss, total_loss, Balancing, LOG_EPS,
};
pub use detection_loss::detection_loss;
pub use gradient::{batch_loss, gate_gradient, BatchLoss};

use crate::decode::{AnchorConfig, RawPredictionTensor};
use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::gate::{gate_forward, FeatureMap, GateParams};

pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Detection,
    #[default]
    DomainCe,
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Self::Detection => "detection",
            Self::DomainCe => "domain_ce",
        })
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detection" => Ok(Self::Detection),
            "domain_ce" => Ok(Self::DomainCe),
            _ => Err(Error::config(format!("unknown loss mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss_mode: LossMode,
    pub balancing: Balancing,
    pub lambda: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Per-epoch multiplier applied to `lambda`.
    pub lambda_decay: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_mode: LossMode::DomainCe,
            balancing: Balancing::SampleEntropy,
            lambda: DEFAULT_LAMBDA,
            learning_rate: 0.01,
            momentum: DEFAULT_MOMENTUM,
            epochs: 50,
            batch_size: 16,
            seed: 0,
            lambda_decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda must be finite and >= 0"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be positive"));
        }
        if let Some(d) = self.lambda_decay {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::config("lambda decay must be positive"));
            }
        }
        Ok(())
    }

    fn lambda_at(&self, epoch: usize) -> f64 {
        match self.lambda_decay {
            Some(d) => self.lambda * d.powi(epoch as i32),
            None => self.lambda,
        }
    }
}

/// One training image: gate input, frozen expert outputs, and labels.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub features: FeatureMap,
    /// One tensor per expert, in gate expert order. May be empty for
    /// domain-supervised training.
    pub raws: Vec<RawPredictionTensor>,
    pub ground_truth: Vec<GroundTruth>,
    /// Index of the in-domain expert, if known.
    pub domain_label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lambda: f64,
    pub task_loss: f64,
    pub balancing_loss: f64,
    pub total_loss: f64,
    /// Summed gate weights over the epoch's samples.
    pub importance: Vec<f64>,
    /// Share of labeled samples whose largest mean weight is their domain expert.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub routing_accuracy: Option<f64>,
}

/// Fraction of labeled samples routed (by argmax of mean weight) to their
/// domain expert. `None` without labeled samples.
pub fn routing_accuracy(params: &GateParams, samples: &[TrainSample]) -> Result<Option<f64>> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for s in samples {
        let Some(label) = s.domain_label else { continue };
        let w = gate_forward(params, &s.features, false)?.mean_weights();
        let best = (0..w.len()).fold(0, |b, i| if w[i] > w[b] { i } else { b });
        hits += usize::from(best == label);
        total += 1;
    }
    Ok((total > 0).then(|| hits as f64 / total as f64))
}

/// Trains the gate with momentum SGD. The batch order depends only on
/// `cfg.seed`, so identical inputs give identical parameter bytes.
///
/// `on_epoch` receives metrics after every epoch.
pub fn train_gate(
    params: &GateParams,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    anchors: Option<&AnchorConfig>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(GateParams, Vec<EpochMetrics>)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    match cfg.loss_mode {
        LossMode::DomainCe if samples.iter().all(|s| s.domain_label.is_none()) => {
            return Err(Error::config("domain_ce training needs samples with domain labels"));
        }
        LossMode::Detection if anchors.is_none() => {
            return Err(Error::config("detection training needs an anchor config"));
        }
        _ => {}
    }
    let mut params = params.clone();
    let mut velocity = vec![0.0; params.values.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let step_cfg = TrainConfig {
            lambda: cfg.lambda_at(epoch),
            ..cfg.clone()
        };
        order.shuffle(&mut rng);
        let mut task = 0.0;
        let mut bal = 0.0;
        let mut imp = vec![0.0; params.expert_count()];
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (loss, grad, trace) = gate_gradient(&params, &batch, &step_cfg, anchors)?;
            if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            for ((p, v), g) in params.values.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v + g;
                *p -= cfg.learning_rate * *v;
            }
            params.update_running_stats(&trace);
            task += loss.task;
            bal += loss.balancing;
            imp.iter_mut().zip(&loss.importance).for_each(|(a, b)| *a += b);
            batches += 1;
        }
        let nb = batches as f64;
        let m = EpochMetrics {
            epoch,
            lambda: step_cfg.lambda,
            task_loss: task / nb,
            balancing_loss: bal / nb,
            total_loss: (task + step_cfg.lambda * bal) / nb,
            importance: imp,
            routing_accuracy: routing_accuracy(&params, samples)?,
        };
        on_epoch(&m);
        history.push(m);
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::{Architecture, GateMode, GateSpec};
    use rand::Rng;

    fn separable(n: usize, seed: u64) -> Vec<TrainSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let sign = if label == 0 { 1.0 } else { -1.0 };
                let data = (0..4 * 4)
                    .map(|k| {
                        let base = if k < 8 { sign } else { -sign };
                        (base + rng.random_range(-0.3..0.3)) as f32
                    })
                    .collect();
                TrainSample {
                    features: FeatureMap {
                        image_id: format!("s{i}"),
                        channels: 4,
                        height: 2,
                        width: 2,
                        data,
                        provenance: "synthetic".into(),
                        expert_ids: vec!["a".into(), "b".into()],
                    },
                    raws: Vec::new(),
                    ground_truth: Vec::new(),
                    domain_label: Some(label),
                }
            })
            .collect()
    }

    fn spec() -> GateSpec {
        GateSpec {
            hidden: 8,
            conv_channels: 4,
            ..GateSpec::new(Architecture::ConvFc2, GateMode::Single, vec!["a".into(), "b".into()], 4)
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let p = GateParams::init(spec(), 1).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            ..TrainConfig::default()
        };
        let (out, hist) = train_gate(&p, &separable(8, 1), &cfg, None, |_| {}).unwrap();
        assert_eq!(out.values, p.values);
        assert_eq!(hist.len(), 2);
    }

    #[test]
    fn learns_separable_domains() {
        let p = GateParams::init(spec(), 2).unwrap();
        let data = separable(40, 3);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let (out, hist) = train_gate(&p, &data, &cfg, None, |_| {}).unwrap();
        assert!(hist.last().unwrap().routing_accuracy.unwrap() >= 0.99);
        assert!(routing_accuracy(&out, &separable(40, 4)).unwrap().unwrap() >= 0.99);
    }

    #[test]
    fn repeatable_for_seed() {
        let p = GateParams::init(spec(), 2).unwrap();
        let data = separable(12, 3);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 5,
            seed: 9,
            ..TrainConfig::default()
        };
        let (a, _) = train_gate(&p, &data, &cfg, None, |_| {}).unwrap();
        let (b, _) = train_gate(&p, &data, &cfg, None, |_| {}).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_is_reported() {
        let fc1 = GateSpec::new(Architecture::Fc1, GateMode::Single, vec!["a".into(), "b".into()], 4);
        let p = GateParams::init(fc1, 2).unwrap();
        let mut data = separable(4, 3);
        data[0].features.data[0] = f32::MAX;
        data[1].features.data[0] = f32::MAX;
        let cfg = TrainConfig {
            learning_rate: 1e300,
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let err = train_gate(&p, &data, &cfg, None, |_| {}).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
    }

    #[test]
    fn sample_entropy_resists_collapse() {
        let fc1 = GateSpec::new(Architecture::Fc1, GateMode::Single, vec!["a".into(), "b".into()], 4);
        let p = GateParams::init(fc1, 5).unwrap();
        let data: Vec<TrainSample> = separable(16, 7).into_iter().filter(|s| s.domain_label == Some(0)).collect();
        let step = |lambda| {
            let cfg = TrainConfig {
                lambda,
                learning_rate: 0.5,
                epochs: 5,
                batch_size: 16,
                ..TrainConfig::default()
            };
            let (out, _) = train_gate(&p, &data, &cfg, None, |_| {}).unwrap();
            data.iter()
                .map(|s| gate_forward(&out, &s.features, false).unwrap().mean_weights()[0])
                .sum::<f64>()
                / data.len() as f64
        };
        let (a, b) = (step(0.5), step(0.0));
        assert!(a < b, "{a} {b}");
    }
}
